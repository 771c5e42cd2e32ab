//! Constant-speed point-mass kinematics with turn-rate and vertical-speed
//! limits, plus the fuel model.
//!
//! Within one step the heading is updated first and the position is then
//! integrated along the new heading, so each step is a straight segment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{heading_delta, normalize_heading, Airspace, Position3D, Vec2};
use crate::mission::MissionMode;
use crate::scenario::MissionAssignment;

pub const BASE_ALTITUDE_FT: f64 = 500.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerformanceLimits {
    /// deg/s
    pub max_turn_rate: f64,
    /// ft/min
    pub max_climb_rate: f64,
    /// ft/min, positive magnitude
    pub max_descent_rate: f64,
    /// fuel units per second in level flight
    pub fuel_rate_cruise: f64,
    pub fuel_factor_climb: f64,
    pub fuel_factor_descent: f64,
}

impl Default for PerformanceLimits {
    fn default() -> Self {
        PerformanceLimits {
            max_turn_rate: 3.0,
            max_climb_rate: 1000.0,
            max_descent_rate: 1000.0,
            fuel_rate_cruise: 1.0,
            fuel_factor_climb: 1.5,
            fuel_factor_descent: 0.7,
        }
    }
}

impl PerformanceLimits {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.max_turn_rate, self.max_climb_rate, self.max_descent_rate, self.fuel_rate_cruise];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::domain("performance limits must be positive and finite"));
        }
        if !(self.fuel_factor_climb > 1.0) {
            return Err(Error::domain("climb fuel factor must exceed 1"));
        }
        if !(self.fuel_factor_descent > 0.0 && self.fuel_factor_descent < 1.0) {
            return Err(Error::domain("descent fuel factor must lie in (0, 1)"));
        }
        if !(self.fuel_factor_climb + self.fuel_factor_descent > 2.0) {
            return Err(Error::domain("climb + descent fuel factors must exceed 2"));
        }
        Ok(())
    }

    fn fuel_factor(&self, vertical_speed: f64) -> f64 {
        if vertical_speed > 0.0 {
            self.fuel_factor_climb
        } else if vertical_speed < 0.0 {
            self.fuel_factor_descent
        } else {
            1.0
        }
    }
}

/// Target heading and vertical speed handed to the autopilot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceCommand {
    pub heading: f64,
    /// ft/min
    pub vertical_speed: f64,
    /// Set when no clear resolution existed and the command holds heading.
    pub saturated: bool,
}

impl GuidanceCommand {
    pub fn level(heading: f64) -> Self {
        GuidanceCommand { heading, vertical_speed: 0.0, saturated: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AircraftState {
    pub position: Position3D,
    /// degrees clockwise from north, `[0, 360)`
    pub heading: f64,
    /// m/s, constant
    pub ground_speed: f64,
    /// ft/min
    pub vertical_speed: f64,
    pub fuel_used: f64,
    pub time: f64,
    pub mode: MissionMode,
}

impl AircraftState {
    pub fn velocity(&self) -> Vec2 {
        Vec2::from_heading(self.heading, self.ground_speed)
    }

    pub fn is_finite(&self) -> bool {
        self.position.is_finite()
            && self.heading.is_finite()
            && self.vertical_speed.is_finite()
            && self.fuel_used.is_finite()
            && self.time.is_finite()
    }
}

/// Advances one aircraft by `dt` seconds toward `cmd`.
pub fn step_state(s: &AircraftState, cmd: &GuidanceCommand, dt: f64, limits: &PerformanceLimits) -> Result<AircraftState> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::domain(format!("time step must be positive, got {dt}")));
    }
    if !(cmd.heading.is_finite() && cmd.vertical_speed.is_finite()) {
        return Err(Error::domain("non-finite guidance command"));
    }
    let max_turn = limits.max_turn_rate * dt;
    let turn = heading_delta(s.heading, normalize_heading(cmd.heading)).clamp(-max_turn, max_turn);
    let heading = normalize_heading(s.heading + turn);

    let mut vertical_speed = cmd.vertical_speed.clamp(-limits.max_descent_rate, limits.max_climb_rate);
    if vertical_speed < 0.0 && s.position.alt_ft <= BASE_ALTITUDE_FT {
        vertical_speed = 0.0;
    }
    let mut alt = s.position.alt_ft + vertical_speed * dt / 60.0;
    if alt < BASE_ALTITUDE_FT {
        alt = BASE_ALTITUDE_FT;
    }

    let horizontal = s.position.horizontal() + Vec2::from_heading(heading, s.ground_speed * dt);
    let fuel = limits.fuel_rate_cruise * dt * limits.fuel_factor(vertical_speed);
    Ok(AircraftState {
        position: Position3D::from_horizontal(horizontal, alt),
        heading,
        ground_speed: s.ground_speed,
        vertical_speed,
        fuel_used: s.fuel_used + fuel,
        time: s.time + dt,
        mode: s.mode,
    })
}

/// Straight, level, constant-speed flight from origin to destination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineFlight {
    pub aircraft_id: u8,
    pub origin: Vec2,
    pub destination: Vec2,
    pub velocity: Vec2,
    pub distance: f64,
    pub duration: f64,
    pub fuel: f64,
}

impl BaselineFlight {
    pub fn position_at(&self, t: f64) -> Vec2 {
        self.origin + self.velocity * t.clamp(0.0, self.duration)
    }

    pub fn heading(&self) -> f64 {
        (self.destination - self.origin).heading_deg()
    }
}

pub fn baseline_trajectory(
    assignment: &MissionAssignment,
    airspace: &Airspace,
    cruise_speed: f64,
    limits: &PerformanceLimits,
) -> BaselineFlight {
    let origin = airspace.centroid(assignment.origin);
    let destination = airspace.centroid(assignment.destination);
    let leg = destination - origin;
    let distance = leg.norm();
    let duration = distance / cruise_speed;
    BaselineFlight {
        aircraft_id: assignment.aircraft_id,
        origin,
        destination,
        velocity: leg * (cruise_speed / distance),
        distance,
        duration,
        fuel: limits.fuel_rate_cruise * duration,
    }
}
