//! Set-level indicators, open-loop proxy measures and the inefficiency
//! regression.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::{BaselineResult, LosFlag, OpenLoopResult, ScenarioResult};
use crate::error::{Error, Result};

/// The per-scenario quantities every indicator is built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub fuel: f64,
    pub baseline_fuel: f64,
    pub los: Vec<LosFlag>,
    pub timeout: bool,
    pub livelock_witness: bool,
    pub wall_clock: f64,
}

impl From<&ScenarioResult> for ScenarioRow {
    fn from(r: &ScenarioResult) -> Self {
        ScenarioRow {
            fuel: r.fuel_total(),
            baseline_fuel: r.baseline_fuel_total(),
            los: r.los.clone(),
            timeout: r.timeout,
            livelock_witness: r.livelock_witness,
            wall_clock: r.wall_clock,
        }
    }
}

impl From<&BaselineResult> for ScenarioRow {
    fn from(r: &BaselineResult) -> Self {
        ScenarioRow {
            fuel: r.fuel_total(),
            baseline_fuel: r.fuel_total(),
            los: r.los.clone(),
            timeout: false,
            livelock_witness: false,
            wall_clock: r.wall_clock,
        }
    }
}

/// A statistic that may be undefined on degenerate input; undefined values
/// are reported as 0 with `defined = false`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub defined: bool,
}

impl Estimate {
    fn of(num: f64, den: f64) -> Self {
        if den > 0.0 {
            Estimate { value: num / den, defined: true }
        } else {
            Estimate { value: 0.0, defined: false }
        }
    }
}

/// Mean over scenarios of `(Σ fuel − Σ baseline fuel) / Σ baseline fuel`.
pub fn inefficiency(rows: &[ScenarioRow]) -> Result<Estimate> {
    let mut sum = 0.0;
    for r in rows {
        if !(r.baseline_fuel > 0.0) {
            return Err(Error::domain("baseline fuel must be positive"));
        }
        sum += (r.fuel - r.baseline_fuel) / r.baseline_fuel;
    }
    Ok(Estimate::of(sum, rows.len() as f64))
}

/// Fraction of scenarios whose monitor at `threshold_ft` fired. `gated`
/// selects the vertically gated monitor.
pub fn los_rate(rows: &[ScenarioRow], threshold_ft: f64, gated: bool) -> Result<Estimate> {
    let mut hits = 0usize;
    for r in rows {
        let flag = r
            .los
            .iter()
            .find(|l| l.threshold_ft == threshold_ft)
            .ok_or(Error::UnknownThreshold(threshold_ft))?;
        if if gated { flag.gated } else { flag.ungated } {
            hits += 1;
        }
    }
    Ok(Estimate::of(hits as f64, rows.len() as f64))
}

pub fn timeout_rate(rows: &[ScenarioRow]) -> Estimate {
    Estimate::of(rows.iter().filter(|r| r.timeout).count() as f64, rows.len() as f64)
}

/// Loss-of-well-clear ratio; absent when the DAA-off rate is zero.
pub fn lowc_ratio(rate_on: f64, rate_off: f64) -> Option<f64> {
    (rate_off > 0.0).then(|| rate_on / rate_off)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopMeasures {
    /// Maneuvers started per kilometer flown, over the whole set.
    pub m_over_d: f64,
    /// Mean heading change of maneuvering aircraft, degrees.
    pub alpha_bar: f64,
    pub alpha_defined: bool,
    pub maneuvers: usize,
    pub distance_km: f64,
    pub n_scenarios: usize,
}

pub fn open_loop_measures(results: &[OpenLoopResult]) -> OpenLoopMeasures {
    let mut acc = OpenLoopAccumulator::default();
    for r in results {
        acc.push(r);
    }
    acc.finish()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OpenLoopAccumulator {
    pub n: usize,
    pub maneuvers: usize,
    pub distance_m: f64,
    pub delta_sum: f64,
    pub delta_count: usize,
}

impl OpenLoopAccumulator {
    pub fn push(&mut self, r: &OpenLoopResult) {
        self.n += 1;
        self.maneuvers += r.maneuvers_started;
        self.distance_m += r.distance_flown_total;
        self.delta_sum += r.heading_deltas.iter().sum::<f64>();
        self.delta_count += r.heading_deltas.len();
    }

    pub fn merge(&mut self, other: &OpenLoopAccumulator) {
        self.n += other.n;
        self.maneuvers += other.maneuvers;
        self.distance_m += other.distance_m;
        self.delta_sum += other.delta_sum;
        self.delta_count += other.delta_count;
    }

    pub fn finish(&self) -> OpenLoopMeasures {
        let km = self.distance_m / 1000.0;
        let alpha = Estimate::of(self.delta_sum, self.delta_count as f64);
        OpenLoopMeasures {
            m_over_d: Estimate::of(self.maneuvers as f64, km).value,
            alpha_bar: alpha.value,
            alpha_defined: alpha.defined,
            maneuvers: self.maneuvers,
            distance_km: km,
            n_scenarios: self.n,
        }
    }
}

/// Set-level closed-loop indicators. Rates keyed by monitor threshold in feet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub n_scenarios: usize,
    pub inefficiency_rate: f64,
    pub los_rate: BTreeMap<String, f64>,
    pub los_rate_ungated: BTreeMap<String, f64>,
    pub timeout_rate: f64,
    pub livelock_witnesses: usize,
    /// False for an empty set; every rate is then reported as 0.
    pub defined: bool,
    /// Excluded from deterministic outputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_scenario_compute_time: Option<f64>,
}

impl MetricsSummary {
    pub fn los(&self, threshold_ft: f64) -> Option<f64> {
        self.los_rate.get(&threshold_key(threshold_ft)).copied()
    }
}

pub fn threshold_key(threshold_ft: f64) -> String {
    format!("{threshold_ft}")
}

/// Streaming, mergeable accumulator behind [`MetricsSummary`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsAccumulator {
    pub n: usize,
    pub inefficiency_sum: f64,
    /// (threshold ft, gated hits, ungated hits)
    pub los: Vec<(f64, usize, usize)>,
    pub timeouts: usize,
    pub livelock_witnesses: usize,
    pub wall_clock_sum: f64,
}

impl MetricsAccumulator {
    pub fn push(&mut self, row: &ScenarioRow) -> Result<()> {
        if !(row.baseline_fuel > 0.0) {
            return Err(Error::domain("baseline fuel must be positive"));
        }
        if self.n == 0 && self.los.is_empty() {
            self.los = row.los.iter().map(|l| (l.threshold_ft, 0, 0)).collect();
        }
        if row.los.len() != self.los.len() || row.los.iter().zip(&self.los).any(|(a, b)| a.threshold_ft != b.0) {
            return Err(Error::domain("scenario monitors do not match the set"));
        }
        self.n += 1;
        self.inefficiency_sum += (row.fuel - row.baseline_fuel) / row.baseline_fuel;
        for (l, slot) in row.los.iter().zip(self.los.iter_mut()) {
            slot.1 += usize::from(l.gated);
            slot.2 += usize::from(l.ungated);
        }
        self.timeouts += usize::from(row.timeout);
        self.livelock_witnesses += usize::from(row.livelock_witness);
        self.wall_clock_sum += row.wall_clock;
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) -> Result<()> {
        if other.n == 0 {
            return Ok(());
        }
        if self.n == 0 {
            *self = other.clone();
            return Ok(());
        }
        if self.los.len() != other.los.len() || self.los.iter().zip(&other.los).any(|(a, b)| a.0 != b.0) {
            return Err(Error::domain("cannot merge sets with different monitors"));
        }
        self.n += other.n;
        self.inefficiency_sum += other.inefficiency_sum;
        for (a, b) in self.los.iter_mut().zip(&other.los) {
            a.1 += b.1;
            a.2 += b.2;
        }
        self.timeouts += other.timeouts;
        self.livelock_witnesses += other.livelock_witnesses;
        self.wall_clock_sum += other.wall_clock_sum;
        Ok(())
    }

    /// Summary without timing, suitable for byte-identical comparison.
    pub fn finish(&self) -> MetricsSummary {
        let n = self.n as f64;
        let rate = |k: usize| Estimate::of(k as f64, n).value;
        MetricsSummary {
            n_scenarios: self.n,
            inefficiency_rate: Estimate::of(self.inefficiency_sum, n).value,
            los_rate: self.los.iter().map(|(t, g, _)| (threshold_key(*t), rate(*g))).collect(),
            los_rate_ungated: self.los.iter().map(|(t, _, u)| (threshold_key(*t), rate(*u))).collect(),
            timeout_rate: rate(self.timeouts),
            livelock_witnesses: self.livelock_witnesses,
            defined: self.n > 0,
            mean_scenario_compute_time: None,
        }
    }

    pub fn mean_wall_clock(&self) -> Estimate {
        Estimate::of(self.wall_clock_sum, self.n as f64)
    }
}

pub fn summarize(rows: &[ScenarioRow]) -> Result<MetricsSummary> {
    let mut acc = MetricsAccumulator::default();
    for r in rows {
        acc.push(r)?;
    }
    Ok(acc.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    /// Indices into the feature vector of the features actually fitted.
    pub features: Vec<usize>,
    pub coefficients: Vec<f64>,
    pub intercept: f64,
    /// `None` when the target is constant and the fit is not exact.
    pub r_squared: Option<f64>,
    /// Set when collinear features forced a single-feature fit.
    pub collinear_fallback: bool,
}

impl RegressionModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + self.features.iter().zip(&self.coefficients).map(|(&j, c)| c * x[j]).sum::<f64>()
    }
}

/// Ordinary least squares with intercept via the normal equations.
///
/// Collinear features fall back to the first feature alone.
pub fn fit_linear(points: &[(Vec<f64>, f64)]) -> Result<RegressionModel> {
    let p = points.first().map_or(0, |(x, _)| x.len());
    if p == 0 {
        return Err(Error::domain("regression needs at least one feature"));
    }
    if points.iter().any(|(x, y)| x.len() != p || !y.is_finite() || x.iter().any(|v| !v.is_finite())) {
        return Err(Error::domain("regression points must be finite and of equal width"));
    }
    let all: Vec<usize> = (0..p).collect();
    match fit_subset(points, &all)? {
        Some(m) => Ok(m),
        None if p > 1 => {
            let mut m = fit_subset(points, &[0])?.ok_or_else(|| Error::domain("feature 0 is constant"))?;
            m.collinear_fallback = true;
            Ok(m)
        }
        None => Err(Error::domain("feature is constant")),
    }
}

/// Fit on the listed features; `None` when the normal matrix is singular.
pub fn fit_subset(points: &[(Vec<f64>, f64)], features: &[usize]) -> Result<Option<RegressionModel>> {
    let k = features.len() + 1;
    if points.len() < k {
        return Err(Error::domain(format!("need at least {} points for {} feature(s)", k, k - 1)));
    }
    let row = |x: &[f64]| {
        let mut r = Vec::with_capacity(k);
        r.push(1.0);
        r.extend(features.iter().map(|&j| x[j]));
        r
    };
    let mut a = vec![vec![0.0; k + 1]; k];
    for (x, y) in points {
        let r = row(x);
        for i in 0..k {
            for j in 0..k {
                a[i][j] += r[i] * r[j];
            }
            a[i][k] += r[i] * y;
        }
    }
    let Some(beta) = solve(a) else {
        return Ok(None);
    };
    let intercept = beta[0];
    let coefficients = beta[1..].to_vec();
    let model = RegressionModel {
        features: features.to_vec(),
        coefficients,
        intercept,
        r_squared: None,
        collinear_fallback: false,
    };
    let mean = points.iter().map(|(_, y)| y).sum::<f64>() / points.len() as f64;
    let ss_tot: f64 = points.iter().map(|(_, y)| (y - mean).powi(2)).sum();
    let ss_res: f64 = points.iter().map(|(x, y)| (y - model.predict(x)).powi(2)).sum();
    let scale = points.iter().map(|(_, y)| y * y).sum::<f64>().max(1.0);
    let r_squared = if ss_tot > 1e-24 * scale {
        Some((1.0 - ss_res / ss_tot).min(1.0))
    } else if ss_res <= 1e-20 * scale {
        Some(1.0)
    } else {
        None
    };
    Ok(Some(RegressionModel { r_squared, ..model }))
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
fn solve(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let n = a.len();
    let norm = a.iter().flat_map(|r| r[..n].iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() <= 1e-12 * norm.max(f64::MIN_POSITIVE) {
            return None;
        }
        a.swap(col, pivot);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..=n {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| a[i][j] * x[j]).sum();
        x[i] = (a[i][n] - s) / a[i][i];
    }
    Some(x)
}
