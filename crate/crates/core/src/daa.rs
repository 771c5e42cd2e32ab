//! Detect-and-avoid: closest-point-of-approach conflict prediction, the
//! pluggable engine interface, and the reference well-clear engine.
//!
//! The reference engine labels every candidate heading on a fixed grid by
//! simulating a limit-rate turn to that heading followed by straight flight,
//! against straight-line projections of the intruders. Vertical bands (3D
//! only) label a small grid of vertical speeds the same way.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dynamics::{AircraftState, GuidanceCommand, PerformanceLimits, BASE_ALTITUDE_FT};
use crate::geometry::{angular_distance, ft_to_m, heading_delta, normalize_heading, Position3D, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dimensions {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub aircraft_id: u8,
    pub position: Position3D,
    /// m/s
    pub velocity: Vec2,
    /// ft/min
    pub vertical_speed: f64,
}

impl Track {
    pub fn from_state(aircraft_id: u8, s: &AircraftState) -> Self {
        Track { aircraft_id, position: s.position, velocity: s.velocity(), vertical_speed: s.vertical_speed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationThresholds {
    /// Horizontal miss distance, ft.
    pub hmd_ft: f64,
    /// Vertical threshold, ft (3D only).
    pub zthr_ft: f64,
    /// s
    pub lookahead: f64,
}

impl SeparationThresholds {
    pub fn with_hmd(hmd_ft: f64) -> Self {
        SeparationThresholds { hmd_ft, ..Default::default() }
    }

    pub fn hmd_m(&self) -> f64 {
        ft_to_m(self.hmd_ft)
    }
}

impl Default for SeparationThresholds {
    fn default() -> Self {
        SeparationThresholds { hmd_ft: 4000.0, zthr_ft: 450.0, lookahead: 60.0 }
    }
}

/// Time of closest approach for relative position `s` and velocity `v`,
/// clamped at 0; 0 when the relative velocity vanishes.
pub fn time_to_cpa(s: Vec2, v: Vec2) -> f64 {
    let vv = v.norm_sq();
    if vv == 0.0 {
        return 0.0;
    }
    (-s.dot(v) / vv).max(0.0)
}

/// Horizontal miss distance at the closest point of approach.
pub fn predicted_hmd(s: Vec2, v: Vec2) -> f64 {
    (s + v * time_to_cpa(s, v)).norm()
}

/// Relative geometry of an intruder as seen from the ownship.
#[derive(Debug, Clone, Copy)]
struct Relative {
    s: Vec2,
    v: Vec2,
    /// ft
    dz: f64,
    own_alt: f64,
    intr_alt: f64,
    /// ft/s
    own_vz: f64,
    intr_vz: f64,
}

/// Altitude after `t` seconds; a descent stops at the base altitude.
fn project_alt(alt: f64, vz: f64, t: f64) -> f64 {
    let z = alt + vz * t;
    if vz < 0.0 {
        z.max(alt.min(BASE_ALTITUDE_FT))
    } else {
        z
    }
}

impl Relative {
    fn between(own_pos: Position3D, own_vel: Vec2, own_vs: f64, intruder: &Track) -> Self {
        Relative {
            s: intruder.position.horizontal() - own_pos.horizontal(),
            v: intruder.velocity - own_vel,
            dz: intruder.position.alt_ft - own_pos.alt_ft,
            own_alt: own_pos.alt_ft,
            intr_alt: intruder.position.alt_ft,
            own_vz: own_vs / 60.0,
            intr_vz: intruder.vertical_speed / 60.0,
        }
    }

    fn dz_at(&self, t: f64) -> f64 {
        project_alt(self.intr_alt, self.intr_vz, t) - project_alt(self.own_alt, self.own_vz, t)
    }

    /// Minimum |dz| over `[t0, t1]`; dz is piecewise linear with kinks where
    /// a descending aircraft reaches the base altitude.
    fn min_abs_dz(&self, t0: f64, t1: f64) -> f64 {
        let mut ts = vec![t0, t1];
        for (alt, vz) in [(self.own_alt, self.own_vz), (self.intr_alt, self.intr_vz)] {
            if vz < 0.0 && alt > BASE_ALTITUDE_FT {
                let t = (BASE_ALTITUDE_FT - alt) / vz;
                if t > t0 && t < t1 {
                    ts.push(t);
                }
            }
        }
        ts.sort_by(f64::total_cmp);
        let dz: Vec<f64> = ts.iter().map(|&t| self.dz_at(t)).collect();
        if dz.windows(2).any(|w| w[0].signum() != w[1].signum() || w[0] == 0.0) {
            return 0.0;
        }
        dz.iter().fold(f64::INFINITY, |m, d| m.min(d.abs()))
    }
}

/// Straight-flight conflict test with a given lookahead.
///
/// Horizontal: the pair is inside `hmd` at some instant of `[0, lookahead]`,
/// i.e. inside now or entering before the lookahead expires. In 3D the
/// vertical separation must also fall under `zthr` somewhere in that window.
fn straight_conflict(rel: &Relative, hmd: f64, zthr_ft: f64, lookahead: f64, dims: Dimensions) -> bool {
    let inside = rel.s.norm() < hmd;
    let speed = rel.v.norm();
    // window where |s + v t| < hmd: t = tcpa ± sqrt(hmd² - miss²)/|v|
    let (t_in, t_out) = if speed == 0.0 {
        if !inside {
            return false;
        }
        (0.0, lookahead)
    } else {
        let t_cpa_raw = -rel.s.dot(rel.v) / (speed * speed);
        let miss = (rel.s + rel.v * t_cpa_raw).norm();
        if miss >= hmd {
            return false;
        }
        let half = (hmd * hmd - miss * miss).sqrt() / speed;
        ((t_cpa_raw - half).max(0.0), (t_cpa_raw + half).min(lookahead))
    };
    if t_out <= t_in && !inside {
        return false;
    }
    if dims == Dimensions::TwoD {
        return true;
    }
    if t_out <= t_in {
        return rel.dz.abs() < zthr_ft;
    }
    rel.min_abs_dz(t_in, t_out) < zthr_ft
}

/// Pairwise conflict test between two tracks under straight-line projection.
pub fn detect_conflict(own: &Track, intruder: &Track, th: &SeparationThresholds, dims: Dimensions) -> bool {
    let rel = Relative::between(own.position, own.velocity, own.vertical_speed, intruder);
    straight_conflict(&rel, th.hmd_m(), th.zthr_ft, th.lookahead, dims)
}

/// Minimum distance over `t ∈ [0, dt]` for linear relative motion from `s0` to `s1`.
pub fn segment_min_distance(s0: Vec2, s1: Vec2, dt: f64) -> f64 {
    let v = (s1 - s0) * (1.0 / dt);
    let t = time_to_cpa(s0, v).min(dt);
    (s0 + v * t).norm()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertLevel {
    None,
    Caution,
    Avoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandLabel {
    Clear,
    Conflict,
}

/// Half-open interval `[lo, hi)`. Heading bands with `lo > hi` wrap through north.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
    pub label: BandLabel,
}

impl Band {
    pub fn contains_heading(&self, h: f64) -> bool {
        let h = normalize_heading(h);
        if self.lo < self.hi {
            self.lo <= h && h < self.hi
        } else {
            h >= self.lo || h < self.hi
        }
    }

    pub fn contains_value(&self, v: f64) -> bool {
        self.lo <= v && v < self.hi
    }

    /// Angular width in degrees.
    pub fn width_deg(&self) -> f64 {
        if self.lo < self.hi {
            self.hi - self.lo
        } else {
            360.0 - self.lo + self.hi
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntruderStatus {
    Suppressed,
    Clear,
    Threat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Advisory {
    pub alert: AlertLevel,
    pub heading_bands: Vec<Band>,
    pub vs_bands: Vec<Band>,
    /// Candidate vertical speeds (ft/min) the vertical bands were built from.
    pub vs_levels: Vec<f64>,
    /// Grid spacing of the heading bands, degrees.
    pub heading_step: f64,
    /// Instantaneous: no threat among the non-suppressed intruders.
    pub clear_of_conflict: bool,
    pub per_intruder_status: BTreeMap<u8, IntruderStatus>,
}

impl Advisory {
    pub fn heading_label(&self, h: f64) -> BandLabel {
        self.heading_bands
            .iter()
            .find(|b| b.contains_heading(h))
            .map(|b| b.label)
            .unwrap_or(BandLabel::Conflict)
    }

    /// Conservative test for an arbitrary heading: off-grid headings are clear
    /// only when the grid headings on both sides are.
    pub fn heading_clear(&self, h: f64) -> bool {
        let h = normalize_heading(h);
        let below = (h / self.heading_step).floor() * self.heading_step;
        let clear = |x: f64| self.heading_label(normalize_heading(x)) == BandLabel::Clear;
        if h - below < 1e-9 {
            clear(below)
        } else {
            clear(below) && clear(below + self.heading_step)
        }
    }

    pub fn vs_label(&self, vs: f64) -> BandLabel {
        let last = self.vs_bands.last();
        self.vs_bands
            .iter()
            .find(|b| b.contains_value(vs))
            // the envelope's upper bound belongs to the last band
            .or_else(|| last.filter(|b| vs == b.hi))
            .map(|b| b.label)
            .unwrap_or(BandLabel::Conflict)
    }

    /// Top of the vertical-speed envelope, ft/min.
    pub fn max_climb(&self) -> f64 {
        self.vs_bands.last().map_or(0.0, |b| b.hi.max(0.0))
    }

    /// Smallest non-negative vertical-speed level labeled clear.
    pub fn lowest_clear_non_descending(&self) -> Option<f64> {
        self.vs_levels
            .iter()
            .copied()
            .filter(|v| *v >= 0.0 && self.vs_label(*v) == BandLabel::Clear)
            .min_by(f64::total_cmp)
    }

    pub fn has_conflict_band(&self) -> bool {
        self.heading_bands.iter().chain(&self.vs_bands).any(|b| b.label == BandLabel::Conflict)
    }
}

/// Merges per-bucket labels of width `step` degrees into heading bands.
pub fn merge_heading_labels(labels: &[BandLabel], step: f64) -> Vec<Band> {
    let mut bands: Vec<Band> = Vec::new();
    for (i, &label) in labels.iter().enumerate() {
        let lo = i as f64 * step;
        match bands.last_mut() {
            Some(b) if b.label == label => b.hi = lo + step,
            _ => bands.push(Band { lo, hi: lo + step, label }),
        }
    }
    if bands.len() > 1 && bands[0].label == bands[bands.len() - 1].label {
        let first = bands.remove(0);
        if let Some(last) = bands.last_mut() {
            last.hi = first.hi;
        }
    }
    bands
}

/// Removes every intruder with lower priority than the ownship when
/// extrinsic priorities are on. Priority decreases with aircraft id.
pub fn apply_priority_suppression(own_id: u8, tracks: &[Track], extrinsic: bool) -> (Vec<Track>, Vec<u8>) {
    if !extrinsic {
        return (tracks.to_vec(), Vec::new());
    }
    let (kept, dropped): (Vec<Track>, Vec<Track>) = tracks.iter().partition(|t| t.aircraft_id < own_id);
    (kept, dropped.into_iter().map(|t| t.aircraft_id).collect())
}

/// Clear-of-conflict over a sampled history of `(time, conflict)` flags:
/// true once the trailing conflict-free stretch lasts at least `hold` seconds.
pub fn coc_hysteresis(history: &[(f64, bool)], hold: f64) -> bool {
    let Some(&(t_last, last_conflict)) = history.last() else {
        return hold <= 0.0;
    };
    if last_conflict {
        return false;
    }
    let start = match history.iter().rposition(|(_, c)| *c) {
        Some(j) => history[j + 1].0,
        None => history[0].0,
    };
    t_last - start >= hold
}

/// Streaming form of [`coc_hysteresis`], one instance per aircraft.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CocFilter {
    hold: f64,
    clear_since: Option<f64>,
}

impl CocFilter {
    pub fn new(hold: f64) -> Self {
        CocFilter { hold, clear_since: None }
    }

    pub fn update(&mut self, time: f64, conflict: bool) -> bool {
        if conflict {
            self.clear_since = None;
            return false;
        }
        let since = *self.clear_since.get_or_insert(time);
        time - since >= self.hold
    }

    pub fn reset(&mut self) {
        self.clear_since = None;
    }
}

/// Inputs shared by every engine call within a scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DaaParams {
    pub thresholds: SeparationThresholds,
    pub limits: PerformanceLimits,
    pub dims: Dimensions,
}

/// Plug-point for conflict-detection-and-resolution logic: tracks in,
/// advisory out. Implementations must be deterministic.
pub trait DaaEngine: Send + Sync {
    fn name(&self) -> &str;

    /// `intruders` already excludes suppressed aircraft, listed in `suppressed`.
    fn advise(&self, own: &Track, intruders: &[Track], suppressed: &[u8], params: &DaaParams) -> Advisory;
}

/// Reference well-clear engine with turn-transient heading bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEngine {
    /// Heading grid step, degrees; must divide 360.
    pub heading_step: f64,
    /// Vertical-speed candidates, ft/min, ascending.
    pub vs_levels: Vec<f64>,
    /// Chord length along simulated turns, s.
    pub turn_sample: f64,
}

impl Default for ReferenceEngine {
    fn default() -> Self {
        ReferenceEngine { heading_step: 1.0, vs_levels: vec![-1000.0, -500.0, 0.0, 500.0, 1000.0], turn_sample: 0.5 }
    }
}

impl ReferenceEngine {
    fn bucket_count(&self) -> usize {
        (360.0 / self.heading_step).round() as usize
    }

    /// Ownship positions along a limit-rate turn (`dir` = ±1), sampled every
    /// `turn_sample` seconds with the integrator's update order: the heading
    /// advances first, then the aircraft flies the step on the new heading.
    fn turn_path(&self, own: &Track, heading0: f64, speed: f64, dir: f64, p: &DaaParams) -> Vec<Vec2> {
        let per_step = p.limits.max_turn_rate * self.turn_sample;
        let steps = ((180.0 / per_step).ceil() as usize).min((p.thresholds.lookahead / self.turn_sample).ceil() as usize);
        let mut path = Vec::with_capacity(steps + 1);
        let mut pos = own.position.horizontal();
        path.push(pos);
        for k in 1..=steps {
            pos = pos + Vec2::from_heading(heading0 + dir * per_step * k as f64, speed * self.turn_sample);
            path.push(pos);
        }
        path
    }

    /// Index of the first chord of `path` along which the ownship comes within
    /// `hmd` of some intruder, or `usize::MAX`.
    fn first_turn_conflict(&self, own: &Track, path: &[Vec2], intruders: &[Track], p: &DaaParams) -> usize {
        let hmd = p.thresholds.hmd_m();
        let tau = self.turn_sample;
        for (k, w) in path.windows(2).enumerate() {
            let t0 = k as f64 * tau;
            for intr in intruders {
                let q0 = intr.position.horizontal() + intr.velocity * t0;
                let q1 = q0 + intr.velocity * tau;
                if segment_min_distance(q0 - w[0], q1 - w[1], tau) < hmd {
                    if p.dims == Dimensions::TwoD {
                        return k + 1;
                    }
                    let rel = Relative::between(own.position, Vec2::ZERO, own.vertical_speed, intr);
                    if rel.min_abs_dz(t0, t0 + tau) < p.thresholds.zthr_ft {
                        return k + 1;
                    }
                }
            }
        }
        usize::MAX
    }

    fn heading_labels(&self, own: &Track, intruders: &[Track], p: &DaaParams) -> Vec<BandLabel> {
        let n = self.bucket_count();
        if intruders.is_empty() {
            return vec![BandLabel::Clear; n];
        }
        let speed = own.velocity.norm();
        let heading0 = own.velocity.heading_deg();
        let cw = self.turn_path(own, heading0, speed, 1.0, p);
        let ccw = self.turn_path(own, heading0, speed, -1.0, p);
        let first_cw = self.first_turn_conflict(own, &cw, intruders, p);
        let first_ccw = self.first_turn_conflict(own, &ccw, intruders, p);
        let hmd = p.thresholds.hmd_m();
        let lookahead = p.thresholds.lookahead;
        let per_step = p.limits.max_turn_rate * self.turn_sample;

        (0..n)
            .map(|i| {
                let candidate = i as f64 * self.heading_step;
                let delta = heading_delta(heading0, candidate);
                // the last turning step already flies the candidate heading
                let steps = (delta.abs() / per_step - 1e-9).ceil().max(0.0) as usize;
                let turning = steps.saturating_sub(1);
                let (path, first) = if delta >= 0.0 { (&cw, first_cw) } else { (&ccw, first_ccw) };
                if turning > 0 && first <= turning {
                    return BandLabel::Conflict;
                }
                let t_s = turning as f64 * self.turn_sample;
                if t_s >= lookahead {
                    return BandLabel::Clear;
                }
                let pos = path[turning.min(path.len() - 1)];
                let vel = Vec2::from_heading(candidate, speed);
                let own_pos = Position3D::from_horizontal(pos, own.position.alt_ft + own.vertical_speed * t_s / 60.0);
                let conflict = intruders.iter().any(|intr| {
                    let moved = Track {
                        position: Position3D::from_horizontal(
                            intr.position.horizontal() + intr.velocity * t_s,
                            intr.position.alt_ft + intr.vertical_speed * t_s / 60.0,
                        ),
                        ..*intr
                    };
                    let rel = Relative::between(own_pos, vel, own.vertical_speed, &moved);
                    straight_conflict(&rel, hmd, p.thresholds.zthr_ft, lookahead - t_s, p.dims)
                });
                if conflict {
                    BandLabel::Conflict
                } else {
                    BandLabel::Clear
                }
            })
            .collect()
    }

    fn vs_bands(&self, own: &Track, intruders: &[Track], p: &DaaParams) -> Vec<Band> {
        let lo_env = -p.limits.max_descent_rate;
        let hi_env = p.limits.max_climb_rate;
        let levels: Vec<f64> = self.vs_levels.iter().copied().filter(|v| (lo_env..=hi_env).contains(v)).collect();
        if p.dims == Dimensions::TwoD || levels.is_empty() {
            return vec![Band { lo: lo_env, hi: hi_env, label: BandLabel::Clear }];
        }
        let at_floor = own.position.alt_ft <= BASE_ALTITUDE_FT;
        let mut bands: Vec<Band> = Vec::new();
        for (i, &level) in levels.iter().enumerate() {
            let effective = if at_floor && level < 0.0 { 0.0 } else { level };
            let probe = Track { vertical_speed: effective, ..*own };
            let conflict = intruders.iter().any(|intr| detect_conflict(&probe, intr, &p.thresholds, p.dims));
            let label = if conflict { BandLabel::Conflict } else { BandLabel::Clear };
            let lo = if i == 0 { lo_env } else { 0.5 * (levels[i - 1] + level) };
            let hi = if i + 1 == levels.len() { hi_env } else { 0.5 * (level + levels[i + 1]) };
            match bands.last_mut() {
                Some(b) if b.label == label => b.hi = hi,
                _ => bands.push(Band { lo, hi, label }),
            }
        }
        bands
    }

    /// Whether any intruder could reach the miss-distance circle within the
    /// lookahead at the current speeds.
    fn within_reach(own: &Track, intr: &Track, p: &DaaParams) -> bool {
        let gap = own.position.horizontal().distance(intr.position.horizontal()) - p.thresholds.hmd_m();
        gap <= (own.velocity.norm() + intr.velocity.norm()) * p.thresholds.lookahead
    }
}

impl DaaEngine for ReferenceEngine {
    fn name(&self) -> &str {
        "reference"
    }

    fn advise(&self, own: &Track, intruders: &[Track], suppressed: &[u8], p: &DaaParams) -> Advisory {
        let mut per_intruder_status = BTreeMap::new();
        for id in suppressed {
            per_intruder_status.insert(*id, IntruderStatus::Suppressed);
        }
        let relevant: Vec<Track> = intruders.iter().copied().filter(|i| Self::within_reach(own, i, p)).collect();
        let mut threat = false;
        for intr in intruders {
            let t = detect_conflict(own, intr, &p.thresholds, p.dims);
            threat |= t;
            per_intruder_status.insert(intr.aircraft_id, if t { IntruderStatus::Threat } else { IntruderStatus::Clear });
        }
        let labels = self.heading_labels(own, &relevant, p);
        let heading_bands = merge_heading_labels(&labels, self.heading_step);
        let vs_bands = self.vs_bands(own, &relevant, p);
        let mut adv = Advisory {
            alert: AlertLevel::None,
            heading_bands,
            vs_bands,
            vs_levels: self.vs_levels.clone(),
            heading_step: self.heading_step,
            clear_of_conflict: !threat,
            per_intruder_status,
        };
        adv.alert = if threat {
            AlertLevel::Avoid
        } else if adv.has_conflict_band() {
            AlertLevel::Caution
        } else {
            AlertLevel::None
        };
        adv
    }
}

/// Picks the clear heading nearest to `preferred` (ties resolve clockwise)
/// and, in 3D, the smallest clear climb. Only upward vertical resolutions
/// are ever taken.
pub fn select_resolution(adv: &Advisory, preferred: f64, current_heading: f64, dims: Dimensions) -> GuidanceCommand {
    let preferred = normalize_heading(preferred);
    let heading = if adv.heading_clear(preferred) {
        Some(preferred)
    } else {
        nearest_clear_heading(adv, preferred)
    };
    let climb = if dims == Dimensions::ThreeD {
        adv.vs_levels.iter().copied().filter(|v| *v > 0.0).find(|v| adv.vs_label(*v) == BandLabel::Clear)
    } else {
        None
    };
    match (heading, climb) {
        (Some(h), c) => GuidanceCommand { heading: h, vertical_speed: c.unwrap_or(0.0), saturated: false },
        (None, Some(c)) => GuidanceCommand { heading: current_heading, vertical_speed: c, saturated: false },
        // nothing clear: hold heading and, in 3D, keep the up sense at full rate
        (None, None) => {
            let up = if dims == Dimensions::ThreeD { adv.max_climb() } else { 0.0 };
            GuidanceCommand { heading: current_heading, vertical_speed: up, saturated: true }
        }
    }
}

/// Nearest clear grid heading, scanning candidate headings at 1° spacing.
fn nearest_clear_heading(adv: &Advisory, preferred: f64) -> Option<f64> {
    let mut best: Option<(f64, bool, f64)> = None;
    for band in adv.heading_bands.iter().filter(|b| b.label == BandLabel::Clear) {
        let width = band.width_deg().round() as i64;
        for k in 0..width.max(1) {
            let h = normalize_heading((band.lo.ceil()) + k as f64);
            if !band.contains_heading(h) {
                continue;
            }
            let d = angular_distance(preferred, h);
            let cw = heading_delta(preferred, h) > 0.0;
            let better = match best {
                None => true,
                Some((bd, bcw, _)) => d < bd - 1e-9 || ((d - bd).abs() <= 1e-9 && cw && !bcw),
            };
            if better {
                best = Some((d, cw, h));
            }
        }
    }
    best.map(|(_, _, h)| h)
}
