//! Road scenarios: the obstacle-avoidance merge (S1), the crossroad-zone
//! merge (S2), reference trajectory construction, and the rain model.

use serde::{Deserialize, Serialize};

use crate::dynamics::{oriented_box, polytope_of, polytopes_intersect, Polytope, VehicleState};
use crate::error::{Error, Result};
use crate::mpc::{NoChangeZone, ReferenceTrajectory};

pub const GRAVITY: f64 = 9.81;
pub const LANE_WIDTH: f64 = 3.7;
pub const CRUISE_SPEED: f64 = 14.2;

/// Longitudinal stagger of the initial formation, meters.
const INITIAL_GAP: f64 = 9.0;
/// Target column spacing behind the lead vehicle, meters.
const COLUMN_GAP: f64 = 10.0;
/// Velocity-profile dip amplitude, m/s.
const SPEED_DIP: f64 = 1.2;
/// Duration of a single-lane merge in S1, seconds. Lateral authority under
/// the slip-angle kinematics caps out near 2.2 m/s, so a 3.7 m change needs
/// at least ~3 s to stay inside the steering and steering-rate limits.
const S1_MERGE_SECONDS: f64 = 3.5;
/// Duration of a single-lane merge in S2, seconds; sharper than S1 by
/// construction, which is what drives the larger steering effort there.
const S2_MERGE_SECONDS: f64 = 2.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Weather {
    Dry,
    /// kappa is the water-film thickness parameter of the adhesion model.
    Rain { kappa: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub lanes: usize,
    pub lane_width: f64,
    pub slots: usize,
    pub dt: f64,
    pub obstacles: Vec<Polytope>,
    pub initial_states: Vec<VehicleState>,
    pub references: ReferenceTrajectory,
    pub no_change_zone: Option<NoChangeZone>,
    pub weather: Weather,
    /// Per-step acceleration caps implied by the weather; empty when dry.
    pub accel_caps: Vec<f64>,
}

impl Scenario {
    pub fn vehicles(&self) -> usize {
        self.initial_states.len()
    }

    /// Lateral road bounds for vehicle centers (the right lane is centered
    /// at y = 0, lanes stack leftward).
    pub fn road_bounds(&self) -> (f64, f64) {
        (-self.lane_width / 2.0, (self.lanes as f64 - 0.5) * self.lane_width)
    }

    /// Lane center ordinate, lane 0 = right.
    pub fn lane_center(&self, lane: usize) -> f64 {
        lane as f64 * self.lane_width
    }
}

/// Road adhesion coefficient in rain.
pub fn rain_adhesion(speed: f64, kappa: f64) -> Result<f64> {
    let rho = 0.9458 - 0.0057 * speed - 0.0108 * kappa;
    if rho <= 0.0 {
        return Err(Error::InvalidWeather(format!(
            "adhesion {rho:.4} nonpositive at v = {speed}, kappa = {kappa}"
        )));
    }
    Ok(rho)
}

/// Acceleration threshold implied by an adhesion coefficient.
pub fn rain_accel_threshold(rho: f64) -> f64 {
    rho * GRAVITY
}

/// Applies a rain level to a scenario: per-step acceleration bounds become
/// +-min(a_max, rho(v_ref) g), with the reference speed as v.
pub fn apply_weather(mut scenario: Scenario, kappa: f64, a_max: f64) -> Result<Scenario> {
    if kappa < 0.0 {
        return Err(Error::InvalidWeather("kappa must be nonnegative".into()));
    }
    let steps = scenario.references.steps();
    let mut caps = Vec::with_capacity(steps);
    for t in 0..steps {
        let v_ref = scenario.references.states[0][t].v;
        let rho = rain_adhesion(v_ref, kappa)?;
        caps.push(a_max.min(rain_accel_threshold(rho)));
    }
    scenario.weather = Weather::Rain { kappa };
    scenario.accel_caps = caps;
    Ok(scenario)
}

/// Smoothstep on [0, 1].
fn smooth01(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

#[derive(Debug, Clone, Copy)]
enum Kind {
    S1,
    S2,
}

/// Lane assignment: the lead vehicle starts in the target lane; followers
/// cycle through the other lanes.
fn lane_of(kind: Kind, vehicle: usize) -> usize {
    match kind {
        // Target: right lane (0). Followers alternate central and right; the
        // left lane stays clear because a two-lane change cannot complete
        // within the horizon under the slip-angle lateral-speed cap.
        Kind::S1 => {
            if vehicle == 0 {
                0
            } else {
                [1, 0][(vehicle - 1) % 2]
            }
        }
        // Target: central lane (1). Followers cycle right, left, central.
        Kind::S2 => {
            if vehicle == 0 {
                1
            } else {
                [0, 2, 1][(vehicle - 1) % 3]
            }
        }
    }
}

/// Per-vehicle lateral maneuver plan: piecewise lane transitions
/// (start second, duration, from-y, to-y).
fn merge_phases(kind: Kind, vehicle: usize, lane: usize, target: f64, lane_width: f64) -> Vec<(f64, f64, f64, f64)> {
    let y0 = lane as f64 * lane_width;
    let _ = lane;
    match kind {
        Kind::S1 => {
            if (y0 - target).abs() < 1e-9 {
                return Vec::new();
            }
            let t0 = 0.3 + 0.3 * vehicle as f64;
            vec![(t0, S1_MERGE_SECONDS, y0, target)]
        }
        Kind::S2 => {
            if (y0 - target).abs() < 1e-9 {
                return Vec::new();
            }
            let t0 = 0.3 + 0.25 * vehicle as f64;
            vec![(t0, S2_MERGE_SECONDS, y0, target)]
        }
    }
}

fn build(kind: Kind, vehicles: usize, slots: usize, dt: f64) -> Result<Scenario> {
    if !(2..=9).contains(&vehicles) {
        return Err(Error::InvalidConfig(format!(
            "platoon size must be between 2 and 9 vehicles, got {vehicles}"
        )));
    }
    let lanes = 3;
    let total_seconds = slots as f64 * dt;
    let (name, target_lane) = match kind {
        Kind::S1 => ("s1", 0usize),
        Kind::S2 => ("s2", 1usize),
    };
    let target_y = target_lane as f64 * LANE_WIDTH;

    // Common speed profile: a gentle dip and recovery around the cruise
    // speed, mean CRUISE_SPEED.
    let speed = |t_s: f64| -> f64 {
        CRUISE_SPEED + SPEED_DIP / 2.0
            - SPEED_DIP * (std::f64::consts::PI * t_s / total_seconds).sin().powi(2)
    };

    let mut states = Vec::with_capacity(vehicles);
    let mut initial = Vec::with_capacity(vehicles);
    for k in 0..vehicles {
        let lane = lane_of(kind, k);
        let x0 = -INITIAL_GAP * k as f64;
        let y0 = lane as f64 * LANE_WIDTH;
        initial.push(VehicleState::new(x0, y0, 0.0, speed(0.0)));

        let phases = merge_phases(kind, k, lane, target_y, LANE_WIDTH);
        // Longitudinal slot adjustment toward the column spacing.
        let shift = (-(COLUMN_GAP * k as f64)) - x0;
        let mut row = Vec::with_capacity(slots + 1);
        let mut x_cruise = x0;
        for t in 0..=slots {
            let t_s = t as f64 * dt;
            if t > 0 {
                x_cruise += speed(t_s - dt) * dt;
            }
            let x = x_cruise + shift * smooth01((t_s - 0.2) / 3.6);
            let mut y = y0;
            for &(p0, w, from, to) in &phases {
                if t_s >= p0 {
                    y = from + (to - from) * smooth01((t_s - p0) / w);
                }
            }
            row.push(VehicleState::new(x, y, 0.0, speed(t_s)));
        }
        // Heading reference = path tangent; velocity = path speed, so the
        // slot-shift derivative is part of the velocity reference.
        for t in 0..slots {
            let dy = row[t + 1].y - row[t].y;
            let dx = (row[t + 1].x - row[t].x).max(1e-6);
            row[t].heading = (dy / dx).atan();
            row[t].v = (dx * dx + dy * dy).sqrt() / dt;
        }
        states.push(row);
    }

    let obstacles = match kind {
        Kind::S1 => {
            // Blocks the central and left lanes ahead of the platoon.
            vec![oriented_box([66.0, 5.55], 0.0, 10.0, 2.0 * LANE_WIDTH)]
        }
        Kind::S2 => Vec::new(),
    };
    let no_change_zone = match kind {
        Kind::S1 => None,
        Kind::S2 => Some(NoChangeZone {
            x_start: 55.0,
            x_end: 95.0,
            latvel_angle_cap: 5e-5,
        }),
    };

    let scenario = Scenario {
        name: name.into(),
        lanes,
        lane_width: LANE_WIDTH,
        slots,
        dt,
        obstacles,
        initial_states: initial,
        references: ReferenceTrajectory { states },
        no_change_zone,
        weather: Weather::Dry,
        accel_caps: Vec::new(),
    };

    // Construction sanity: no initial footprint may touch an obstacle.
    let geom = crate::dynamics::VehicleGeometry {
        length: 4.5,
        width: 1.8,
        front_axle: 1.125,
        rear_axle: 1.125,
    };
    for (k, z) in scenario.initial_states.iter().enumerate() {
        for obs in &scenario.obstacles {
            if polytopes_intersect(&polytope_of(z, &geom), obs) {
                return Err(Error::InvalidConfig(format!(
                    "initial state of vehicle {k} intersects an obstacle"
                )));
            }
        }
    }
    Ok(scenario)
}

/// Obstacle-avoidance scenario: an obstacle blocks the left and central
/// lanes; references steer everyone into a single right-lane column.
pub fn scenario_s1(vehicles: usize) -> Result<Scenario> {
    build(Kind::S1, vehicles, 100, 0.05)
}

/// Crossroad scenario: everyone merges into the central lane before the
/// solid-line zone where lane changes are forbidden.
pub fn scenario_s2(vehicles: usize) -> Result<Scenario> {
    build(Kind::S2, vehicles, 100, 0.05)
}

/// Builder with explicit horizon length, used by reduced test instances.
pub fn scenario_with(name: &str, vehicles: usize, slots: usize, dt: f64) -> Result<Scenario> {
    match name {
        "s1" => build(Kind::S1, vehicles, slots, dt),
        "s2" => build(Kind::S2, vehicles, slots, dt),
        other => Err(Error::InvalidConfig(format!("unknown scenario '{other}'"))),
    }
}
