//! Parallel batch execution over a scenario set and the on-disk artifacts of
//! a run: results CSV, event log, summary, timing, manifest and failures.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{
    run_baseline, run_closed_loop, run_open_loop, BaselineResult, EventRecord, LosFlag, OpenLoopResult,
    PairSeparation, ScenarioResult, ScenarioSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{
    fit_linear, fit_subset, MetricsAccumulator, MetricsSummary, OpenLoopAccumulator, OpenLoopMeasures,
    RegressionModel, ScenarioRow,
};
use crate::scenario::{GeneratorOptions, TrafficConfiguration};

/// Environment variable overriding the default output directory.
pub const OUT_DIR_ENV: &str = "CELLSIM_OUT_DIR";

pub const RESULTS_FILE: &str = "results.csv";
pub const TIMING_CSV: &str = "timing.csv";
pub const TIMING_JSON: &str = "timing.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FAILURES_FILE: &str = "failures.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Closed,
    Open,
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sample {
    Full,
    Count(usize),
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub spec: ScenarioSpec,
    pub mode: RunMode,
    pub set_path: String,
    pub set_checksum: String,
    pub generator: GeneratorOptions,
    pub set_size: usize,
    pub sample: Sample,
    pub seed: u64,
    pub workers: usize,
    pub out_dir: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Closed(ScenarioResult),
    Open(OpenLoopResult),
    Baseline(BaselineResult),
}

impl Outcome {
    pub fn wall_clock(&self) -> f64 {
        match self {
            Outcome::Closed(r) => r.wall_clock,
            Outcome::Open(r) => r.wall_clock,
            Outcome::Baseline(r) => r.wall_clock,
        }
    }

    pub fn events(&self) -> &[EventRecord] {
        match self {
            Outcome::Closed(r) => &r.events,
            Outcome::Open(r) => &r.events,
            Outcome::Baseline(_) => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRecord {
    /// Position in the scenario set.
    pub index: usize,
    pub config: TrafficConfiguration,
    pub outcome: std::result::Result<Outcome, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub index: usize,
    pub config_hash: String,
    pub error: String,
}

pub fn run_one(cfg: &TrafficConfiguration, spec: &ScenarioSpec, mode: RunMode) -> Result<Outcome> {
    let a = &cfg.assignments;
    Ok(match mode {
        RunMode::Closed => Outcome::Closed(run_closed_loop(a, spec)?),
        RunMode::Open => Outcome::Open(run_open_loop(a, spec)?),
        RunMode::Baseline => Outcome::Baseline(run_baseline(a, spec)?),
    })
}

/// Runs the selected configurations on `workers` threads. Records come back
/// in `indices` order whatever the completion order; a failing or panicking
/// scenario becomes an error record instead of aborting the batch.
pub fn execute(
    set: &[TrafficConfiguration],
    indices: &[usize],
    spec: &ScenarioSpec,
    mode: RunMode,
    workers: usize,
) -> Result<Vec<ScenarioRecord>> {
    spec.validate()?;
    if let Some(bad) = indices.iter().find(|&&i| i >= set.len()) {
        return Err(Error::domain(format!("index {bad} out of range for a set of {}", set.len())));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::domain(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        indices
            .par_iter()
            .map(|&index| {
                let config = set[index];
                let outcome = match catch_unwind(AssertUnwindSafe(|| run_one(&config, spec, mode))) {
                    Ok(Ok(o)) => Ok(o),
                    Ok(Err(e)) => Err(e.to_string()),
                    Err(panic) => Err(panic_message(panic.as_ref())),
                };
                ScenarioRecord { index, config, outcome }
            })
            .collect()
    }))
}

fn panic_message(p: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        format!("panic: {s}")
    } else if let Some(s) = p.downcast_ref::<String>() {
        format!("panic: {s}")
    } else {
        "panic".into()
    }
}

/// Deterministic set-level result: identical for identical manifests,
/// independent of worker count, output location and timing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub label: String,
    pub modes: Vec<RunMode>,
    pub set_checksum: String,
    pub sample: Sample,
    pub seed: u64,
    pub n_scenarios: usize,
    pub failures: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closed_loop: Option<MetricsSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<MetricsSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub open_loop: Option<OpenLoopMeasures>,
}

impl BatchSummary {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Format { path: path.display().to_string(), message: e.to_string() })
    }

    /// Closed-loop inefficiency, when this summary carries one.
    pub fn inefficiency(&self) -> Option<f64> {
        self.closed_loop.as_ref().filter(|m| m.defined).map(|m| m.inefficiency_rate)
    }

    /// Combines a closed-loop and an open-loop summary of the same spec.
    pub fn merge(&self, other: &BatchSummary) -> Result<BatchSummary> {
        if self.label != other.label {
            return Err(Error::domain(format!("cannot merge `{}` with `{}`", self.label, other.label)));
        }
        let mut modes = self.modes.clone();
        for m in &other.modes {
            if modes.contains(m) {
                return Err(Error::domain(format!("both summaries of `{}` contain {m:?} results", self.label)));
            }
            modes.push(*m);
        }
        Ok(BatchSummary {
            label: self.label.clone(),
            modes,
            set_checksum: self.set_checksum.clone(),
            sample: self.sample,
            seed: self.seed,
            n_scenarios: self.n_scenarios.max(other.n_scenarios),
            failures: self.failures + other.failures,
            closed_loop: self.closed_loop.clone().or_else(|| other.closed_loop.clone()),
            baseline: self.baseline.clone().or_else(|| other.baseline.clone()),
            open_loop: self.open_loop.or(other.open_loop),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub n_scenarios: usize,
    pub mean_scenario_compute_time: f64,
    pub total_scenario_compute_time: f64,
    pub batch_wall_clock: f64,
    pub workers: usize,
}

pub fn summarize_records(manifest: &RunManifest, records: &[ScenarioRecord]) -> Result<BatchSummary> {
    let mut acc = MetricsAccumulator::default();
    let mut open = OpenLoopAccumulator::default();
    let mut failures = 0;
    for r in records {
        match &r.outcome {
            Ok(Outcome::Closed(x)) => acc.push(&ScenarioRow::from(x))?,
            Ok(Outcome::Baseline(x)) => acc.push(&ScenarioRow::from(x))?,
            Ok(Outcome::Open(x)) => open.push(x),
            Err(_) => failures += 1,
        }
    }
    let metrics = acc.finish();
    Ok(BatchSummary {
        label: manifest.spec.label.clone(),
        modes: vec![manifest.mode],
        set_checksum: manifest.set_checksum.clone(),
        sample: manifest.sample,
        seed: manifest.seed,
        n_scenarios: records.len(),
        failures,
        closed_loop: (manifest.mode == RunMode::Closed).then(|| metrics.clone()),
        baseline: (manifest.mode == RunMode::Baseline).then_some(metrics),
        open_loop: (manifest.mode == RunMode::Open).then(|| open.finish()),
    })
}

/// Writes every artifact of a run into `manifest.out_dir`; returns the summary.
pub fn write_outputs(manifest: &RunManifest, records: &[ScenarioRecord], batch_wall_clock: f64) -> Result<BatchSummary> {
    let dir = PathBuf::from(&manifest.out_dir);
    std::fs::create_dir_all(&dir)?;
    write_json(&dir.join(MANIFEST_FILE), manifest)?;
    write_results_csv(&dir.join(RESULTS_FILE), manifest.mode, records)?;
    write_events(&dir.join(EVENTS_FILE), records)?;

    let mut timing = csv::Writer::from_path(dir.join(TIMING_CSV))?;
    timing.write_record(["index", "wall_clock"])?;
    let mut total = 0.0;
    let mut n = 0usize;
    for r in records {
        if let Ok(o) = &r.outcome {
            timing.write_record([r.index.to_string(), o.wall_clock().to_string()])?;
            total += o.wall_clock();
            n += 1;
        }
    }
    timing.flush()?;
    let timing_summary = TimingSummary {
        n_scenarios: n,
        mean_scenario_compute_time: if n > 0 { total / n as f64 } else { 0.0 },
        total_scenario_compute_time: total,
        batch_wall_clock,
        workers: manifest.workers,
    };
    write_json(&dir.join(TIMING_JSON), &timing_summary)?;

    let failures: Vec<Failure> = records
        .iter()
        .filter_map(|r| {
            r.outcome.as_ref().err().map(|e| Failure { index: r.index, config_hash: r.config.hash_hex(), error: e.clone() })
        })
        .collect();
    write_json(&dir.join(FAILURES_FILE), &failures)?;

    let summary = summarize_records(manifest, records)?;
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Runs a manifest end to end and writes its artifacts.
pub fn run_manifest(manifest: &RunManifest, set: &[TrafficConfiguration], indices: &[usize]) -> Result<(BatchSummary, Vec<ScenarioRecord>)> {
    let start = Instant::now();
    let records = execute(set, indices, &manifest.spec, manifest.mode, manifest.workers)?;
    let elapsed = start.elapsed().as_secs_f64();
    let summary = write_outputs(manifest, &records, elapsed)?;
    Ok((summary, records))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn pair_columns(seps: &[PairSeparation]) -> impl Iterator<Item = String> + '_ {
    seps.iter().map(|p| format!("min_sep_ft_{}{}", p.a, p.b))
}

fn los_columns(los: &[LosFlag]) -> impl Iterator<Item = String> + '_ {
    los.iter().flat_map(|l| [format!("los_{}_gated", l.threshold_ft), format!("los_{}_ungated", l.threshold_ft)])
}

fn los_values(los: &[LosFlag]) -> impl Iterator<Item = String> + '_ {
    los.iter().flat_map(|l| [u8::from(l.gated).to_string(), u8::from(l.ungated).to_string()])
}

/// One row per successful scenario, in set order. Wall-clock lives in the
/// timing files so this file is reproducible byte for byte.
pub fn write_results_csv(path: &Path, mode: RunMode, records: &[ScenarioRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header_written = false;
    for r in records {
        let Ok(outcome) = &r.outcome else { continue };
        let mut header = vec!["index".to_string(), "config_hash".to_string()];
        let mut row = vec![r.index.to_string(), r.config.hash_hex()];
        match (mode, outcome) {
            (RunMode::Closed, Outcome::Closed(x)) => {
                for a in &x.aircraft {
                    let i = a.aircraft_id;
                    header.extend(
                        ["fuel", "baseline_fuel", "flight_time", "path_length", "deviations", "arrived"]
                            .map(|c| format!("{c}_{i}")),
                    );
                    row.extend([
                        a.fuel.to_string(),
                        a.baseline_fuel.to_string(),
                        a.flight_time.to_string(),
                        a.path_length.to_string(),
                        a.deviation_count.to_string(),
                        u8::from(a.arrived).to_string(),
                    ]);
                }
                header.extend(pair_columns(&x.min_separation));
                row.extend(x.min_separation.iter().map(|p| p.min_horizontal_ft.to_string()));
                header.extend(los_columns(&x.los));
                row.extend(los_values(&x.los));
                header.extend(["timeout".into(), "livelock_witness".into()]);
                row.extend([u8::from(x.timeout).to_string(), u8::from(x.livelock_witness).to_string()]);
            }
            (RunMode::Baseline, Outcome::Baseline(x)) => {
                for f in &x.flights {
                    let i = f.aircraft_id;
                    header.extend([format!("fuel_{i}"), format!("duration_{i}")]);
                    row.extend([f.fuel.to_string(), f.duration.to_string()]);
                }
                header.extend(pair_columns(&x.min_separation));
                row.extend(x.min_separation.iter().map(|p| p.min_horizontal_ft.to_string()));
                header.extend(los_columns(&x.los));
                row.extend(los_values(&x.los));
            }
            (RunMode::Open, Outcome::Open(x)) => {
                header.extend(
                    ["distance_flown_total", "maneuvers_started", "stop_time", "stopped_on_coc", "heading_deltas"]
                        .map(String::from),
                );
                row.extend([
                    x.distance_flown_total.to_string(),
                    x.maneuvers_started.to_string(),
                    x.stop_time.to_string(),
                    u8::from(x.stopped_on_coc).to_string(),
                    x.heading_deltas.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(";"),
                ]);
            }
            _ => return Err(Error::domain("outcome does not match the run mode")),
        }
        if !header_written {
            w.write_record(&header)?;
            header_written = true;
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct EventLine<'a> {
    index: usize,
    #[serde(flatten)]
    record: &'a EventRecord,
}

pub fn write_events(path: &Path, records: &[ScenarioRecord]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    for r in records {
        if let Ok(o) = &r.outcome {
            for e in o.events() {
                serde_json::to_writer(&mut f, &EventLine { index: r.index, record: e })?;
                f.write_all(b"\n")?;
            }
        }
    }
    f.flush()?;
    Ok(())
}

/// Regression of closed-loop inefficiency on the open-loop measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub labels: Vec<String>,
    /// Features per point: `[m_over_d, alpha_bar]`.
    pub features: Vec<[f64; 2]>,
    pub inefficiency: Vec<f64>,
    pub combined: RegressionModel,
    pub m_over_d_only: Option<RegressionModel>,
    pub alpha_bar_only: Option<RegressionModel>,
    pub predicted: Vec<f64>,
}

pub const MIN_REGRESSION_POINTS: usize = 3;

/// Builds the regression from `(source name, summary)` pairs; each summary
/// must carry open-loop measures and a closed-loop inefficiency.
pub fn regress(summaries: &[(String, BatchSummary)]) -> Result<RegressionReport> {
    if summaries.len() < MIN_REGRESSION_POINTS {
        return Err(Error::domain(format!(
            "regression needs at least {MIN_REGRESSION_POINTS} summaries, got {}",
            summaries.len()
        )));
    }
    let mut labels = Vec::new();
    let mut features = Vec::new();
    let mut inefficiency = Vec::new();
    for (name, s) in summaries {
        let ineff = s.inefficiency().ok_or_else(|| Error::Format {
            path: name.clone(),
            message: "summary has no closed-loop inefficiency".into(),
        })?;
        let open = s.open_loop.ok_or_else(|| Error::Format {
            path: name.clone(),
            message: "summary has no open-loop measures".into(),
        })?;
        labels.push(s.label.clone());
        features.push([open.m_over_d, open.alpha_bar]);
        inefficiency.push(ineff);
    }
    let points: Vec<(Vec<f64>, f64)> = features.iter().zip(&inefficiency).map(|(f, y)| (f.to_vec(), *y)).collect();
    let combined = fit_linear(&points)?;
    let predicted = features.iter().map(|f| combined.predict(f)).collect();
    Ok(RegressionReport {
        labels,
        features,
        inefficiency,
        m_over_d_only: fit_subset(&points, &[0])?,
        alpha_bar_only: fit_subset(&points, &[1])?,
        combined,
        predicted,
    })
}

/// Plot-ready `(label, true, predicted)` rows.
pub fn write_regression_csv(path: &Path, report: &RegressionReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["label", "m_over_d", "alpha_bar", "inefficiency", "predicted"])?;
    for i in 0..report.labels.len() {
        w.write_record([
            report.labels[i].clone(),
            report.features[i][0].to_string(),
            report.features[i][1].to_string(),
            report.inefficiency[i].to_string(),
            report.predicted[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
