//! Per-aircraft mission state machine: cruise to destination, avoid on
//! alert, resume once clear of conflict, return to base altitude (3D), done.

use serde::{Deserialize, Serialize};

use crate::daa::{select_resolution, Advisory, AlertLevel, BandLabel, CocFilter, Dimensions};
use crate::dynamics::{AircraftState, GuidanceCommand, PerformanceLimits, BASE_ALTITUDE_FT};
use crate::geometry::{angular_distance, Vec2};

/// Altitude band around the base altitude treated as "captured".
pub const ALTITUDE_CAPTURE_FT: f64 = 25.0;
/// Altitude tolerance for arrival in 3D.
pub const ARRIVAL_ALTITUDE_TOLERANCE_FT: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MissionMode {
    Cruise,
    Avoid,
    Resume,
    DescendToBase,
    Done,
}

impl MissionMode {
    /// Transitions the controller may take.
    pub fn can_transition_to(self, to: MissionMode) -> bool {
        use MissionMode::*;
        matches!(
            (self, to),
            (Cruise, Avoid)
                | (Cruise, Done)
                | (Avoid, Resume)
                | (Avoid, Done)
                | (Resume, Cruise)
                | (Resume, DescendToBase)
                | (Resume, Avoid)
                | (Resume, Done)
                | (DescendToBase, Cruise)
                | (DescendToBase, Avoid)
                | (DescendToBase, Done)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManeuverKind {
    Horizontal,
    Vertical,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManeuverRecord {
    pub aircraft_id: u8,
    pub start_time: f64,
    pub end_time: f64,
    pub start_heading: f64,
    pub end_heading: f64,
    pub kind: ManeuverKind,
    /// False when the scenario ended before clear of conflict.
    pub completed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OpenManeuver {
    start_time: f64,
    start_heading: f64,
    turned: bool,
    climbed: bool,
}

impl OpenManeuver {
    fn close(self, aircraft_id: u8, time: f64, heading: f64, completed: bool) -> ManeuverRecord {
        let kind = match (self.turned, self.climbed) {
            (true, true) => ManeuverKind::Mixed,
            (false, true) => ManeuverKind::Vertical,
            _ => ManeuverKind::Horizontal,
        };
        ManeuverRecord {
            aircraft_id,
            start_time: self.start_time,
            end_time: time,
            start_heading: self.start_heading,
            end_heading: heading,
            kind,
            completed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MissionEvent {
    ModeChange { from: MissionMode, to: MissionMode },
    ManeuverStarted { heading: f64 },
    ManeuverEnded { heading: f64 },
    /// No clear resolution existed; holding heading.
    Saturated,
    /// Resume blocked: the direct heading is inside a conflict band.
    ResumeBlocked { direct_heading: f64 },
    Arrived { flight_time: f64 },
    Timeout,
    /// Open-loop run halted on the first completed maneuver.
    OpenLoopStop,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MissionContext {
    pub dims: Dimensions,
    pub capture_radius: f64,
    pub limits: PerformanceLimits,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub command: GuidanceCommand,
    pub mode: MissionMode,
    pub events: Vec<MissionEvent>,
}

/// Closed-loop controller for one aircraft.
#[derive(Debug, Clone)]
pub struct MissionController {
    pub aircraft_id: u8,
    pub destination: Vec2,
    mode: MissionMode,
    command: GuidanceCommand,
    coc: CocFilter,
    open: Option<OpenManeuver>,
    records: Vec<ManeuverRecord>,
}

impl MissionController {
    pub fn new(aircraft_id: u8, destination: Vec2, initial_heading: f64, coc_hold: f64) -> Self {
        MissionController {
            aircraft_id,
            destination,
            mode: MissionMode::Cruise,
            command: GuidanceCommand::level(initial_heading),
            coc: CocFilter::new(coc_hold),
            open: None,
            records: Vec::new(),
        }
    }

    pub fn mode(&self) -> MissionMode {
        self.mode
    }

    pub fn command(&self) -> GuidanceCommand {
        self.command
    }

    pub fn records(&self) -> &[ManeuverRecord] {
        &self.records
    }

    pub fn in_maneuver(&self) -> bool {
        self.open.is_some()
    }

    pub fn direct_heading(&self, own: &AircraftState) -> f64 {
        (self.destination - own.position.horizontal()).heading_deg()
    }

    /// True once the aircraft is within the capture radius (and, in 3D, back
    /// near base altitude).
    pub fn has_arrived(&self, own: &AircraftState, ctx: &MissionContext) -> bool {
        let horizontal = own.position.horizontal().distance(self.destination) <= ctx.capture_radius;
        let vertical = ctx.dims == Dimensions::TwoD
            || (own.position.alt_ft - BASE_ALTITUDE_FT).abs() <= ARRIVAL_ALTITUDE_TOLERANCE_FT;
        horizontal && vertical
    }

    fn set_mode(&mut self, to: MissionMode, events: &mut Vec<MissionEvent>) {
        debug_assert!(self.mode.can_transition_to(to), "{:?} -> {:?}", self.mode, to);
        events.push(MissionEvent::ModeChange { from: self.mode, to });
        self.mode = to;
    }

    /// Marks the aircraft as arrived; closes any open maneuver.
    pub fn arrive(&mut self, own: &AircraftState) -> Vec<MissionEvent> {
        let mut events = Vec::new();
        if self.mode == MissionMode::Done {
            return events;
        }
        if let Some(m) = self.open.take() {
            self.records.push(m.close(self.aircraft_id, own.time, own.heading, false));
        }
        self.set_mode(MissionMode::Done, &mut events);
        events
    }

    /// Closes an open maneuver at scenario end without changing mode.
    pub fn finish(&mut self, own: &AircraftState) {
        if let Some(m) = self.open.take() {
            self.records.push(m.close(self.aircraft_id, own.time, own.heading, false));
        }
    }

    fn start_maneuver(&mut self, own: &AircraftState, events: &mut Vec<MissionEvent>) {
        self.open = Some(OpenManeuver { start_time: own.time, start_heading: own.heading, turned: false, climbed: false });
        self.set_mode(MissionMode::Avoid, events);
        events.push(MissionEvent::ManeuverStarted { heading: own.heading });
    }

    fn resolve(
        &mut self,
        own: &AircraftState,
        adv: &Advisory,
        gate: Option<&Advisory>,
        ctx: &MissionContext,
        events: &mut Vec<MissionEvent>,
    ) {
        let mut cmd = select_resolution(adv, self.direct_heading(own), own.heading, ctx.dims);
        // with a horizontal resolution in hand, climb only where no aircraft is
        if let Some(g) = gate {
            if cmd.vertical_speed > 0.0 && adv.heading_clear(cmd.heading) && g.vs_label(cmd.vertical_speed) != BandLabel::Clear {
                cmd.vertical_speed = adv
                    .vs_levels
                    .iter()
                    .copied()
                    .filter(|v| *v > 0.0 && adv.vs_label(*v) == BandLabel::Clear && g.vs_label(*v) == BandLabel::Clear)
                    .min_by(f64::total_cmp)
                    .unwrap_or(0.0);
            }
        }
        if cmd.saturated {
            events.push(MissionEvent::Saturated);
        }
        if let Some(m) = self.open.as_mut() {
            m.turned |= angular_distance(cmd.heading, m.start_heading) > 1e-9;
            m.climbed |= cmd.vertical_speed > 0.0;
        }
        self.command = cmd;
    }

    /// Vertical speed when not descending: level if that is clear, otherwise
    /// the smallest clear climb, otherwise full climb.
    fn hold_vertical(own: &AircraftState, adv: Option<&Advisory>, ctx: &MissionContext) -> f64 {
        match adv {
            Some(a) if ctx.dims == Dimensions::ThreeD && own.position.alt_ft >= BASE_ALTITUDE_FT => {
                a.lowest_clear_non_descending().unwrap_or_else(|| a.max_climb())
            }
            _ => 0.0,
        }
    }

    fn above_base(own: &AircraftState) -> bool {
        own.position.alt_ft - BASE_ALTITUDE_FT > ALTITUDE_CAPTURE_FT
    }

    /// One decision tick. `adv` is `None` when detect-and-avoid is disabled.
    pub fn decide(&mut self, own: &AircraftState, adv: Option<&Advisory>, ctx: &MissionContext) -> Decision {
        self.decide_with(own, AdvisorySet::single(adv), ctx)
    }

    pub fn decide_with(&mut self, own: &AircraftState, advs: AdvisorySet<'_>, ctx: &MissionContext) -> Decision {
        let AdvisorySet { avoid: adv, gate, resume } = advs;
        let mut events = Vec::new();
        let direct = self.direct_heading(own);
        let avoid = adv.is_some_and(|a| a.alert == AlertLevel::Avoid);
        let conflict = adv.is_some_and(|a| !a.clear_of_conflict);
        let clear = self.coc.update(own.time, conflict);

        match self.mode {
            MissionMode::Done => {}
            MissionMode::Cruise | MissionMode::DescendToBase => {
                if let (true, Some(a)) = (avoid, adv) {
                    self.start_maneuver(own, &mut events);
                    self.resolve(own, a, gate, ctx, &mut events);
                } else if self.mode == MissionMode::DescendToBase {
                    self.descend(own, gate, direct, ctx, &mut events);
                } else {
                    self.command = GuidanceCommand::level(direct);
                }
            }
            MissionMode::Avoid => {
                if clear {
                    if let Some(m) = self.open.take() {
                        self.records.push(m.close(self.aircraft_id, own.time, own.heading, true));
                    }
                    events.push(MissionEvent::ManeuverEnded { heading: own.heading });
                    self.set_mode(MissionMode::Resume, &mut events);
                    self.try_resume(own, resume, gate, direct, ctx, &mut events);
                } else if let (true, Some(a)) = (avoid, adv) {
                    self.resolve(own, a, gate, ctx, &mut events);
                }
            }
            MissionMode::Resume => {
                if let (true, Some(a)) = (avoid, adv) {
                    self.start_maneuver(own, &mut events);
                    self.resolve(own, a, gate, ctx, &mut events);
                } else {
                    self.try_resume(own, resume, gate, direct, ctx, &mut events);
                }
            }
        }
        Decision { command: self.command, mode: self.mode, events }
    }

    fn try_resume(
        &mut self,
        own: &AircraftState,
        resume: Option<&Advisory>,
        gate: Option<&Advisory>,
        direct: f64,
        ctx: &MissionContext,
        events: &mut Vec<MissionEvent>,
    ) {
        let clear = resume.is_none_or(|a| a.heading_clear(direct));
        if !clear {
            events.push(MissionEvent::ResumeBlocked { direct_heading: direct });
            self.command = GuidanceCommand { vertical_speed: Self::hold_vertical(own, gate, ctx), ..GuidanceCommand::level(own.heading) };
            return;
        }
        if ctx.dims == Dimensions::ThreeD && Self::above_base(own) {
            self.set_mode(MissionMode::DescendToBase, events);
            self.descend(own, gate, direct, ctx, events);
        } else {
            self.set_mode(MissionMode::Cruise, events);
            self.command = GuidanceCommand::level(direct);
        }
    }

    fn descend(
        &mut self,
        own: &AircraftState,
        adv: Option<&Advisory>,
        direct: f64,
        ctx: &MissionContext,
        events: &mut Vec<MissionEvent>,
    ) {
        if !Self::above_base(own) {
            self.set_mode(MissionMode::Cruise, events);
            self.command = GuidanceCommand::level(direct);
            return;
        }
        let rate = -ctx.limits.max_descent_rate;
        let descent_clear = adv.is_none_or(|a| a.vs_label(rate) == BandLabel::Clear);
        self.command = GuidanceCommand { heading: direct, vertical_speed: if descent_clear { rate } else { Self::hold_vertical(own, adv, ctx) }, saturated: false };
    }
}

/// Advisories feeding one decision tick.
#[derive(Debug, Clone, Copy, Default)]
pub struct AdvisorySet<'a> {
    /// Avoidance guidance; `None` when detect-and-avoid is disabled.
    pub avoid: Option<&'a Advisory>,
    /// Vertical choices that are not avoidance (return-to-base descent,
    /// altitude hold) are checked here; may see traffic `avoid` suppresses.
    pub gate: Option<&'a Advisory>,
    /// Return-to-course check, usually computed with a buffered miss distance.
    pub resume: Option<&'a Advisory>,
}

impl<'a> AdvisorySet<'a> {
    pub fn single(adv: Option<&'a Advisory>) -> Self {
        AdvisorySet { avoid: adv, gate: adv, resume: adv }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DeviationCounts {
    pub per_aircraft: Vec<usize>,
    pub total: usize,
}

/// Number of maneuvers started, per aircraft id and in total.
pub fn count_deviations(records: &[ManeuverRecord], fleet_size: usize) -> DeviationCounts {
    let mut per_aircraft = vec![0; fleet_size];
    for r in records {
        if let Some(c) = per_aircraft.get_mut(r.aircraft_id as usize) {
            *c += 1;
        }
    }
    DeviationCounts { total: records.len(), per_aircraft }
}
