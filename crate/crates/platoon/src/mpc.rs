//! Receding-horizon platoon controller.
//!
//! Each control step solves a finite-horizon program built by linearizing
//! the bicycle dynamics and the collision geometry about a guess trajectory,
//! re-linearizing until the exact objective stops improving (sequential
//! convexification with a trust region). States are condensed out: the
//! solver sees only the stacked inputs, every state is an affine map of
//! them.

use serde::{Deserialize, Serialize};

use crate::convex::{self, Affine, ConvexProgram, SolveOptions, SolveStatus};
use crate::dynamics::{
    disc_cover, polytope_of, polytopes_intersect, step, step_jacobians, ControlInput, Polytope,
    VehicleGeometry, VehicleState,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MpcConfig {
    /// Horizon length in steps.
    pub horizon: usize,
    /// Diagonal state-tracking weights Q_z.
    pub q_state: [f64; 4],
    /// Input-effort weights Q_u.
    pub q_input: [f64; 2],
    /// Input-rate weights Q_du.
    pub q_input_rate: [f64; 2],
    pub state_min: [f64; 4],
    pub state_max: [f64; 4],
    pub input_min: [f64; 2],
    pub input_max: [f64; 2],
    pub input_rate_min: [f64; 2],
    pub input_rate_max: [f64; 2],
    /// Inner re-linearization budget M_p.
    pub max_inner_iters: usize,
    /// Objective-change tolerance eps_p.
    pub tolerance: f64,
    /// Safety margin added to the disc radii, meters.
    pub collision_margin: f64,
    pub dt: f64,
    pub geometry: VehicleGeometry,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            q_state: [1.0, 100.0, 1.0, 0.1],
            q_input: [1.0, 1.0],
            q_input_rate: [1.0, 1.0],
            state_min: [-100.0, -1.85, -0.6, 0.0],
            state_max: [1000.0, 9.25, 0.6, 30.0],
            input_min: [-4.0, -0.3],
            input_max: [4.0, 0.3],
            input_rate_min: [-1.0, -0.01],
            input_rate_max: [1.0, 0.01],
            max_inner_iters: 40,
            tolerance: 1e-5,
            collision_margin: 0.2,
            dt: 0.05,
            geometry: VehicleGeometry {
                length: 4.5,
                width: 1.8,
                front_axle: 1.125,
                rear_axle: 1.125,
            },
        }
    }
}

/// Solid-line region where lane changes are forbidden.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoChangeZone {
    pub x_start: f64,
    pub x_end: f64,
    /// Hard cap on the lateral direction angle |phi + beta| inside the zone,
    /// radians; lateral velocity is v sin(phi + beta).
    pub latvel_angle_cap: f64,
}

/// Communication coupling seen by the controller: the CSIT error penalty
/// Gamma_hat depends on the platoon states through the motion coefficient
/// and the path-loss channel.
#[derive(Debug, Clone)]
pub struct CsitCoupling {
    /// Q_h.
    pub weight: f64,
    /// ||p_k||^4 per follower per global slot (follower k = vehicle k+1).
    pub p4: Vec<Vec<f64>>,
    pub antennas: f64,
    pub path_loss_exp: f64,
    pub state_max: [f64; 4],
}

impl CsitCoupling {
    /// Exact Gamma_hat for one follower at one slot given its state, its
    /// predicted state, and the lead vehicle position.
    pub fn gamma_hat(
        &self,
        follower: usize,
        slot: usize,
        z: &VehicleState,
        z_est: &VehicleState,
        lv_pos: [f64; 2],
    ) -> f64 {
        let dev = [
            z.x - z_est.x,
            z.y - z_est.y,
            z.heading - z_est.heading,
            z.v - z_est.v,
        ];
        let zmax_norm = (self.state_max.iter().map(|v| v * v).sum::<f64>()).sqrt();
        let eps = ((dev.iter().map(|v| v * v).sum::<f64>()).sqrt() / (2.0 * zmax_norm)).min(1.0);
        let dx = z.x - lv_pos[0];
        let dy = z.y - lv_pos[1];
        let d = (dx * dx + dy * dy).sqrt().max(1e-6);
        let h_norm_sq = self.antennas * d.powf(-2.0 * self.path_loss_exp);
        eps * eps * self.p4[follower][slot.min(self.p4[follower].len() - 1)] * h_norm_sq
    }
}

/// Environment of one receding-horizon run.
#[derive(Debug, Clone)]
pub struct RunEnv {
    pub obstacles: Vec<Polytope>,
    pub zone: Option<NoChangeZone>,
    /// Per-global-step acceleration cap (weather); empty means none.
    pub accel_caps: Vec<f64>,
    pub csit: Option<CsitCoupling>,
}

impl RunEnv {
    pub fn open_road() -> Self {
        Self { obstacles: Vec::new(), zone: None, accel_caps: Vec::new(), csit: None }
    }

    fn accel_cap(&self, t: usize) -> f64 {
        if self.accel_caps.is_empty() {
            f64::INFINITY
        } else {
            self.accel_caps[t.min(self.accel_caps.len() - 1)]
        }
    }
}

/// Reference states per vehicle per global step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceTrajectory {
    pub states: Vec<Vec<VehicleState>>,
}

impl ReferenceTrajectory {
    pub fn vehicles(&self) -> usize {
        self.states.len()
    }

    pub fn steps(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }
}

/// Emitted closed-loop run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlatoonTrace {
    /// states[k][t], t = 0..=T.
    pub states: Vec<Vec<VehicleState>>,
    /// inputs[k][t], t = 0..T.
    pub inputs: Vec<Vec<ControlInput>>,
    /// Converged horizon objective per solved step.
    pub objectives: Vec<f64>,
    /// Minimum pairwise disc clearance per step (vehicles + obstacles).
    pub min_clearance: Vec<f64>,
    /// Exact rectangle-overlap flags per step; all false on success.
    pub collision_flags: Vec<bool>,
}

/// Result of one horizon solve.
#[derive(Debug, Clone)]
pub struct HorizonSolution {
    pub first_inputs: Vec<ControlInput>,
    /// Exact rollout of the converged inputs, [vehicle][0..=horizon].
    pub trajectory: Vec<Vec<VehicleState>>,
    pub inputs: Vec<Vec<ControlInput>>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

const STATE_BACKOFF: [f64; 4] = [1e-4, 1e-4, 1e-5, 1e-4];
const TRUST_STATE: [f64; 4] = [1.0, 1.0, 0.1, 1.0];
/// Exact-penalty weight on the shared collision slack.
const COLLISION_PENALTY: f64 = 1e6;

/// Affine representation of a predicted state component over the stacked
/// input vector.
#[derive(Clone)]
struct AffineState {
    constant: [f64; 4],
    /// coeffs[c] holds (var, weight) pairs for state component c.
    coeffs: [Vec<(usize, f64)>; 4],
}

struct Condensed {
    /// predicted[k][j] for j = 0..=horizon.
    predicted: Vec<Vec<AffineState>>,
}

fn input_scale(cfg: &MpcConfig) -> [f64; 2] {
    [cfg.input_max[0].abs().max(1.0), cfg.input_max[1].abs().max(0.1)]
}

/// Index of input component `c` of vehicle `k` at step `j`.
fn uvar(k: usize, j: usize, c: usize, horizon: usize) -> usize {
    (k * horizon + j) * 2 + c
}

/// Builds the affine state predictions along the guess trajectory.
fn condense(
    current: &[VehicleState],
    guess_states: &[Vec<VehicleState>],
    guess_inputs: &[Vec<ControlInput>],
    cfg: &MpcConfig,
) -> Condensed {
    let vehicles = current.len();
    let horizon = cfg.horizon;
    let scale = input_scale(cfg);
    let mut predicted = Vec::with_capacity(vehicles);
    for k in 0..vehicles {
        let mut rows: Vec<AffineState> = Vec::with_capacity(horizon + 1);
        rows.push(AffineState {
            constant: current[k].as_array(),
            coeffs: Default::default(),
        });
        for j in 0..horizon {
            let zg = &guess_states[k][j];
            let ug = &guess_inputs[k][j];
            let (ja, jb) = step_jacobians(zg, ug, &cfg.geometry, cfg.dt);
            let f0 = step(zg, ug, &cfg.geometry, cfg.dt).as_array();
            let prev = &rows[j];
            let zg_arr = zg.as_array();
            let mut next = AffineState {
                constant: [0.0; 4],
                coeffs: Default::default(),
            };
            for r in 0..4 {
                // f0 + A (z_j - zg) + B (u_j - ug)
                let mut c = f0[r];
                for s in 0..4 {
                    c += ja[r][s] * (prev.constant[s] - zg_arr[s]);
                }
                c -= jb[r][0] * ug.accel + jb[r][1] * ug.steer;
                next.constant[r] = c;
                let mut terms: Vec<(usize, f64)> = Vec::new();
                for s in 0..4 {
                    for &(v, w) in &prev.coeffs[s] {
                        terms.push((v, ja[r][s] * w));
                    }
                }
                terms.push((uvar(k, j, 0, horizon), jb[r][0] * scale[0]));
                terms.push((uvar(k, j, 1, horizon), jb[r][1] * scale[1]));
                // Merge duplicate variable entries.
                terms.sort_unstable_by_key(|&(v, _)| v);
                let mut packed: Vec<(usize, f64)> = Vec::with_capacity(terms.len());
                for (v, w) in terms {
                    if let Some(last) = packed.last_mut() {
                        if last.0 == v {
                            last.1 += w;
                            continue;
                        }
                    }
                    packed.push((v, w));
                }
                next.coeffs[r] = packed;
            }
            rows.push(next);
        }
        predicted.push(rows);
    }
    Condensed { predicted }
}

impl AffineState {
    fn component(&self, c: usize) -> Affine {
        Affine::new(self.coeffs[c].clone(), self.constant[c])
    }

    /// Affine form of a disc center coordinate: pos + R(heading) offset,
    /// linearized about the guess heading.
    fn disc_center(&self, guess: &VehicleState, offset: f64, coord: usize) -> Affine {
        let (s, c) = guess.heading.sin_cos();
        let mut a = self.component(coord);
        let (trig, dtrig) = if coord == 0 { (c, -s) } else { (s, c) };
        a.constant += trig * offset - dtrig * offset * guess.heading;
        let dphi = self.component(2);
        for (v, w) in dphi.terms {
            a.terms.push((v, w * dtrig * offset));
        }
        a.constant += dtrig * offset * dphi.constant;
        a
    }
}

/// Exact objective of a rollout (tracking + effort + input rate + CSIT
/// penalty), matching the horizon program's own terms.
fn exact_objective(
    states: &[Vec<VehicleState>],
    inputs: &[Vec<ControlInput>],
    refs: &[&[VehicleState]],
    u_prev: &[ControlInput],
    cfg: &MpcConfig,
    env: &RunEnv,
    t0: usize,
) -> f64 {
    let mut total = 0.0;
    for k in 0..states.len() {
        for j in 1..states[k].len() {
            let z = &states[k][j];
            let r = &refs[k][j - 1];
            total += (cfg.q_state[0] * (z.x - r.x)).powi(2)
                + (cfg.q_state[1] * (z.y - r.y)).powi(2)
                + (cfg.q_state[2] * (z.heading - r.heading)).powi(2)
                + (cfg.q_state[3] * (z.v - r.v)).powi(2);
        }
        for (j, u) in inputs[k].iter().enumerate() {
            total += (cfg.q_input[0] * u.accel).powi(2) + (cfg.q_input[1] * u.steer).powi(2);
            let prev = if j == 0 { u_prev[k] } else { inputs[k][j - 1] };
            total += (cfg.q_input_rate[0] * (u.accel - prev.accel)).powi(2)
                + (cfg.q_input_rate[1] * (u.steer - prev.steer)).powi(2);
        }
    }
    if let Some(csit) = &env.csit {
        for k in 1..states.len() {
            for j in 1..states[k].len() {
                let z_est = step(&states[k][j - 1], &held_input(inputs, k, j), &cfg.geometry, cfg.dt);
                total += csit.weight
                    * csit.gamma_hat(
                        k - 1,
                        t0 + j,
                        &states[k][j],
                        &z_est,
                        [states[0][j].x, states[0][j].y],
                    );
            }
        }
    }
    total
}

/// Input the transmitter assumes was held when predicting slot j from j-1:
/// the input applied at j-2 (zero before the horizon).
fn held_input(inputs: &[Vec<ControlInput>], k: usize, j: usize) -> ControlInput {
    if j >= 2 {
        inputs[k][j - 2]
    } else {
        ControlInput::ZERO
    }
}

fn rollout(
    current: &[VehicleState],
    inputs: &[Vec<ControlInput>],
    cfg: &MpcConfig,
) -> Vec<Vec<VehicleState>> {
    current
        .iter()
        .enumerate()
        .map(|(k, z0)| {
            let mut row = Vec::with_capacity(inputs[k].len() + 1);
            row.push(*z0);
            for u in &inputs[k] {
                let next = step(row.last().unwrap(), u, &cfg.geometry, cfg.dt);
                row.push(next);
            }
            row
        })
        .collect()
}

/// Exact-rollout admissibility: raw state boxes, input-rate chain licensing,
/// and the exact rectangle collision test.
fn rollout_admissible(
    states: &[Vec<VehicleState>],
    inputs: &[Vec<ControlInput>],
    u_prev: &[ControlInput],
    cfg: &MpcConfig,
    env: &RunEnv,
    t0: usize,
) -> bool {
    let vehicles = states.len();
    for k in 0..vehicles {
        for z in &states[k][1..] {
            let a = z.as_array();
            for c in 0..4 {
                if a[c] < cfg.state_min[c] || a[c] > cfg.state_max[c] {
                    return false;
                }
            }
        }
        for (j, u) in inputs[k].iter().enumerate() {
            let cap = env.accel_cap(t0 + j).min(cfg.input_max[0]);
            if u.accel < cfg.input_min[0].max(-cap) || u.accel > cap {
                return false;
            }
            if u.steer < cfg.input_min[1] || u.steer > cfg.input_max[1] {
                return false;
            }
            let prev = if j == 0 { u_prev[k] } else { inputs[k][j - 1] };
            let da = u.accel - prev.accel;
            let ds = u.steer - prev.steer;
            if da < cfg.input_rate_min[0] - 1e-12
                || da > cfg.input_rate_max[0] + 1e-12
                || ds < cfg.input_rate_min[1] - 1e-12
                || ds > cfg.input_rate_max[1] + 1e-12
            {
                return false;
            }
        }
    }
    for j in 1..states[0].len() {
        for a in 0..vehicles {
            let pa = polytope_of(&states[a][j], &cfg.geometry);
            for b in (a + 1)..vehicles {
                let pb = polytope_of(&states[b][j], &cfg.geometry);
                if polytopes_intersect(&pa, &pb) {
                    return false;
                }
            }
            for obs in &env.obstacles {
                if polytopes_intersect(&pa, obs) {
                    return false;
                }
            }
        }
    }
    true
}

/// Builds the condensed horizon program about a guess trajectory.
#[allow(clippy::too_many_arguments)]
pub fn build_horizon_program(
    current: &[VehicleState],
    refs: &[&[VehicleState]],
    u_prev: &[ControlInput],
    cfg: &MpcConfig,
    env: &RunEnv,
    guess_states: &[Vec<VehicleState>],
    guess_inputs: &[Vec<ControlInput>],
    trust_scale: f64,
    t0: usize,
) -> Result<ConvexProgram> {
    let vehicles = current.len();
    let horizon = cfg.horizon;
    if refs.len() != vehicles || refs.iter().any(|r| r.len() < horizon) {
        return Err(Error::InvalidConfig("reference window shorter than the horizon".into()));
    }
    let scale = input_scale(cfg);
    let mut prog = ConvexProgram::new();

    // Input variables with box bounds folding input limits, weather caps and
    // the input trust region. One shared nonnegative slack softens the
    // linearized collision rows (exact penalty in the objective); converged
    // solutions drive it to zero and acceptance still demands the exact
    // rectangle test.
    for k in 0..vehicles {
        for j in 0..horizon {
            let cap = env.accel_cap(t0 + j).min(cfg.input_max[0]);
            let ug = &guess_inputs[k][j];
            let tr = trust_scale;
            let lo_a = (cfg.input_min[0].max(-cap)).max(ug.accel + cfg.input_rate_min[0] * tr);
            let hi_a = cap.min(ug.accel + cfg.input_rate_max[0] * tr);
            let lo_s = cfg.input_min[1].max(ug.steer + cfg.input_rate_min[1] * tr);
            let hi_s = cfg.input_max[1].min(ug.steer + cfg.input_rate_max[1] * tr);
            if lo_a >= hi_a || lo_s >= hi_s {
                return Err(Error::Solver(format!(
                    "empty input box for vehicle {k} step {j} (trust {trust_scale:.3})"
                )));
            }
            prog.add_var(format!("a{k}_{j}"), lo_a / scale[0], hi_a / scale[0], 0);
            prog.add_var(format!("d{k}_{j}"), lo_s / scale[1], hi_s / scale[1], 0);
        }
    }

    // Hard input-rate rows between consecutive steps (step 0 against the
    // previously applied input).
    for k in 0..vehicles {
        for j in 0..horizon {
            for c in 0..2 {
                let (lo, hi) = (cfg.input_rate_min[c], cfg.input_rate_max[c]);
                if j == 0 {
                    let prev = if c == 0 { u_prev[k].accel } else { u_prev[k].steer };
                    prog.add_linear(
                        vec![(uvar(k, 0, c, horizon), scale[c])],
                        hi + prev,
                        "du_box",
                    );
                    prog.add_linear(
                        vec![(uvar(k, 0, c, horizon), -scale[c])],
                        -(lo + prev),
                        "du_box",
                    );
                } else {
                    prog.add_linear(
                        vec![
                            (uvar(k, j, c, horizon), scale[c]),
                            (uvar(k, j - 1, c, horizon), -scale[c]),
                        ],
                        hi,
                        "du_box",
                    );
                    prog.add_linear(
                        vec![
                            (uvar(k, j, c, horizon), -scale[c]),
                            (uvar(k, j - 1, c, horizon), scale[c]),
                        ],
                        -lo,
                        "du_box",
                    );
                }
            }
        }
    }

    let condensed = condense(current, guess_states, guess_inputs, cfg);

    // Tracking, effort, and input-rate objective terms.
    for k in 0..vehicles {
        for j in 1..=horizon {
            let r = refs[k][j - 1].as_array();
            for c in 0..4 {
                if cfg.q_state[c] > 0.0 {
                    let mut row = condensed.predicted[k][j].component(c);
                    row.constant -= r[c];
                    row = row.scale(cfg.q_state[c]);
                    prog.add_obj_quad(1.0, row);
                }
            }
        }
        for j in 0..horizon {
            for c in 0..2 {
                if cfg.q_input[c] > 0.0 {
                    prog.add_obj_quad(
                        1.0,
                        Affine::var(uvar(k, j, c, horizon), cfg.q_input[c] * scale[c]),
                    );
                }
                if cfg.q_input_rate[c] > 0.0 {
                    let row = if j == 0 {
                        let prev = if c == 0 { u_prev[k].accel } else { u_prev[k].steer };
                        Affine::new(
                            vec![(uvar(k, 0, c, horizon), scale[c])],
                            -prev,
                        )
                        .scale(cfg.q_input_rate[c])
                    } else {
                        Affine::new(
                            vec![
                                (uvar(k, j, c, horizon), scale[c]),
                                (uvar(k, j - 1, c, horizon), -scale[c]),
                            ],
                            0.0,
                        )
                        .scale(cfg.q_input_rate[c])
                    };
                    prog.add_obj_quad(1.0, row);
                }
            }
        }
    }

    // CSIT penalty, linearized about the guess by central differences.
    if let Some(csit) = &env.csit {
        if csit.weight > 0.0 {
            for k in 1..vehicles {
                for j in 1..=horizon {
                    let z_est = step(
                        &guess_states[k][j - 1],
                        &held_guess_input(guess_inputs, k, j),
                        &cfg.geometry,
                        cfg.dt,
                    );
                    let zg = guess_states[k][j];
                    let lv = guess_states[0][j];
                    let f0 =
                        csit.gamma_hat(k - 1, t0 + j, &zg, &z_est, [lv.x, lv.y]);
                    let h = 1e-5;
                    let mut grad_terms: Vec<(usize, f64)> = Vec::new();
                    let mut constant = csit.weight * f0;
                    // Own state (4 comps) and LV position (2 comps).
                    for c in 0..4 {
                        let mut zp = zg.as_array();
                        let mut zm = zg.as_array();
                        zp[c] += h;
                        zm[c] -= h;
                        let fp = csit.gamma_hat(
                            k - 1,
                            t0 + j,
                            &VehicleState::from_array(zp),
                            &z_est,
                            [lv.x, lv.y],
                        );
                        let fm = csit.gamma_hat(
                            k - 1,
                            t0 + j,
                            &VehicleState::from_array(zm),
                            &z_est,
                            [lv.x, lv.y],
                        );
                        let g = csit.weight * (fp - fm) / (2.0 * h);
                        let row = condensed.predicted[k][j].component(c);
                        for (v, w) in row.terms {
                            grad_terms.push((v, g * w));
                        }
                        constant += g * (row.constant - zg.as_array()[c]);
                    }
                    for c in 0..2 {
                        let mut lp = [lv.x, lv.y];
                        let mut lm = lp;
                        lp[c] += h;
                        lm[c] -= h;
                        let fp = csit.gamma_hat(k - 1, t0 + j, &zg, &z_est, lp);
                        let fm = csit.gamma_hat(k - 1, t0 + j, &zg, &z_est, lm);
                        let g = csit.weight * (fp - fm) / (2.0 * h);
                        let row = condensed.predicted[0][j].component(c);
                        for (v, w) in row.terms {
                            grad_terms.push((v, g * w));
                        }
                        constant += g * (row.constant - [lv.x, lv.y][c]);
                    }
                    for (v, w) in grad_terms {
                        prog.add_obj_linear(v, w);
                    }
                    prog.obj_constant += constant;
                }
            }
        }
    }

    // State boxes (backed off) and the state trust region.
    for k in 0..vehicles {
        for j in 1..=horizon {
            for c in 0..4 {
                let row = condensed.predicted[k][j].component(c);
                let up = cfg.state_max[c] - STATE_BACKOFF[c];
                let lo = cfg.state_min[c] + STATE_BACKOFF[c];
                let mut terms = row.terms.clone();
                prog.add_linear(std::mem::take(&mut terms), up - row.constant, "z_box");
                let neg: Vec<(usize, f64)> = row.terms.iter().map(|&(v, w)| (v, -w)).collect();
                prog.add_linear(neg, row.constant - lo, "z_box");
                let zg = guess_states[k][j].as_array()[c];
                let tr = TRUST_STATE[c] * trust_scale;
                let mut t1 = row.terms.clone();
                prog.add_linear(std::mem::take(&mut t1), zg + tr - row.constant, "trust_z");
                let neg: Vec<(usize, f64)> = row.terms.iter().map(|&(v, w)| (v, -w)).collect();
                prog.add_linear(neg, row.constant - (zg - tr), "trust_z");
            }
            // Inside the no-change zone, cap the lateral direction angle
            // phi + beta(delta), with beta linearized about the guess steer.
            if let Some(zone) = &env.zone {
                let x = guess_states[k][j].x;
                if x >= zone.x_start && x <= zone.x_end && j >= 1 {
                    let ug = &guess_inputs[k][j - 1];
                    let ratio = cfg.geometry.rear_axle / cfg.geometry.wheelbase();
                    let tan_d = ug.steer.tan();
                    let beta0 = (tan_d * ratio).atan();
                    let dbeta = ratio * (1.0 + tan_d * tan_d)
                        / (1.0 + (tan_d * ratio) * (tan_d * ratio));
                    let phi_row = condensed.predicted[k][j].component(2);
                    let dvar = uvar(k, j - 1, 1, horizon);
                    let mut terms = phi_row.terms.clone();
                    terms.push((dvar, dbeta * scale[1]));
                    let constant = phi_row.constant + beta0 - dbeta * ug.steer;
                    let cap = zone.latvel_angle_cap;
                    let mut t1 = terms.clone();
                    prog.add_linear(std::mem::take(&mut t1), cap - constant, "zone_latvel");
                    let neg: Vec<(usize, f64)> = terms.iter().map(|&(v, w)| (v, -w)).collect();
                    prog.add_linear(neg, constant + cap, "zone_latvel");
                }
            }
        }
    }

    // Disc-separation collision rows, linearized about the guess. The norm
    // is convex, so its linearization under-estimates the true distance and
    // the rows are sufficient for separation at the linearized states. One
    // penalty slack per step keeps a usable descent direction while deep in
    // violation: progress at any step pays off immediately.
    let slacks: Vec<usize> = (0..=horizon)
        .map(|j| {
            let v = prog.add_var(format!("cslack_{j}"), 0.0, 100.0, 0);
            prog.add_obj_linear(v, COLLISION_PENALTY);
            v
        })
        .collect();
    let radius = ((cfg.geometry.length / 4.0).powi(2) + (cfg.geometry.width / 2.0).powi(2)).sqrt()
        + cfg.collision_margin;
    let offsets = [cfg.geometry.length / 4.0, -cfg.geometry.length / 4.0];
    for j in 1..=horizon {
        let slack = slacks[j];
        for a in 0..vehicles {
            for b in (a + 1)..vehicles {
                for oa in offsets {
                    for ob in offsets {
                        let ga = &guess_states[a][j];
                        let gb = &guess_states[b][j];
                        let ca = disc_point(ga, oa);
                        let cb = disc_point(gb, ob);
                        let diff = [ca[0] - cb[0], ca[1] - cb[1]];
                        let dist = (diff[0] * diff[0] + diff[1] * diff[1]).sqrt().max(1e-9);
                        let n = [diff[0] / dist, diff[1] / dist];
                        // n . (c_a(z) - c_b(z)) >= 2 * radius
                        let mut terms: Vec<(usize, f64)> = Vec::new();
                        let mut constant = 0.0;
                        for (coord, nc) in n.iter().enumerate() {
                            let ra = condensed.predicted[a][j].disc_center(ga, oa, coord);
                            let rb = condensed.predicted[b][j].disc_center(gb, ob, coord);
                            for (v, w) in ra.terms {
                                terms.push((v, nc * w));
                            }
                            for (v, w) in rb.terms {
                                terms.push((v, -nc * w));
                            }
                            constant += nc * (ra.constant - rb.constant);
                        }
                        terms.push((slack, 1.0));
                        prog.add_linear_ge(terms, 2.0 * radius - constant, "collision");
                    }
                }
            }
            // Obstacles: supporting halfspace of the point-to-box distance.
            for obs in &env.obstacles {
                for oa in offsets {
                    let ga = &guess_states[a][j];
                    let ca = disc_point(ga, oa);
                    let (dist, n) = box_distance_direction(obs, ca);
                    if dist > 50.0 {
                        continue;
                    }
                    let mut terms: Vec<(usize, f64)> = Vec::new();
                    let mut constant = 0.0;
                    for (coord, nc) in n.iter().enumerate() {
                        let ra = condensed.predicted[a][j].disc_center(ga, oa, coord);
                        for (v, w) in ra.terms {
                            terms.push((v, nc * w));
                        }
                        constant += nc * ra.constant;
                    }
                    // n . c >= n . proj + radius
                    let proj = [ca[0] - n[0] * dist, ca[1] - n[1] * dist];
                    let rhs = n[0] * proj[0] + n[1] * proj[1] + radius;
                    terms.push((slack, 1.0));
                    prog.add_linear_ge(terms, rhs - constant, "obstacle");
                }
            }
        }
    }

    Ok(prog)
}

fn approach_zero(value: f64, step: f64) -> f64 {
    if value.abs() <= step {
        0.0
    } else {
        value - value.signum() * step
    }
}

fn held_guess_input(inputs: &[Vec<ControlInput>], k: usize, j: usize) -> ControlInput {
    if j >= 2 {
        inputs[k][j - 2]
    } else {
        ControlInput::ZERO
    }
}

fn disc_point(z: &VehicleState, offset: f64) -> [f64; 2] {
    let (s, c) = z.heading.sin_cos();
    [z.x + c * offset, z.y + s * offset]
}

/// Distance from a point to an oriented box and the outward unit direction.
fn box_distance_direction(b: &Polytope, p: [f64; 2]) -> (f64, [f64; 2]) {
    let (s, c) = b.heading.sin_cos();
    let dx = p[0] - b.center[0];
    let dy = p[1] - b.center[1];
    let local = [c * dx + s * dy, -s * dx + c * dy];
    let clamped = [
        local[0].clamp(-b.half_length, b.half_length),
        local[1].clamp(-b.half_width, b.half_width),
    ];
    let delta = [local[0] - clamped[0], local[1] - clamped[1]];
    let dist = (delta[0] * delta[0] + delta[1] * delta[1]).sqrt();
    if dist < 1e-9 {
        // Inside or on the box: push along the least-penetrated face.
        let gaps = [
            b.half_length - local[0],
            local[0] + b.half_length,
            b.half_width - local[1],
            local[1] + b.half_width,
        ];
        let (idx, _) = gaps
            .iter()
            .enumerate()
            .min_by(|x, y| x.1.partial_cmp(y.1).unwrap())
            .unwrap();
        let local_n = match idx {
            0 => [1.0, 0.0],
            1 => [-1.0, 0.0],
            2 => [0.0, 1.0],
            _ => [0.0, -1.0],
        };
        let world = [c * local_n[0] - s * local_n[1], s * local_n[0] + c * local_n[1]];
        return (0.0, world);
    }
    let world = [
        (c * delta[0] - s * delta[1]) / dist,
        (s * delta[0] + c * delta[1]) / dist,
    ];
    (dist, world)
}

/// Exact collision penetration of a rollout: summed disc-pair overlaps plus
/// obstacle-disc penetrations, matching the program's slack semantics.
fn penetration(states: &[Vec<VehicleState>], cfg: &MpcConfig, env: &RunEnv) -> f64 {
    let radius = ((cfg.geometry.length / 4.0).powi(2) + (cfg.geometry.width / 2.0).powi(2)).sqrt()
        + cfg.collision_margin;
    let offsets = [cfg.geometry.length / 4.0, -cfg.geometry.length / 4.0];
    let vehicles = states.len();
    let mut total = 0.0;
    for j in 1..states[0].len() {
        for a in 0..vehicles {
            for oa in offsets {
                let ca = disc_point(&states[a][j], oa);
                for b in (a + 1)..vehicles {
                    for ob in offsets {
                        let cb = disc_point(&states[b][j], ob);
                        let d = ((ca[0] - cb[0]).powi(2) + (ca[1] - cb[1]).powi(2)).sqrt();
                        total += (2.0 * radius - d).max(0.0);
                    }
                }
                for obs in &env.obstacles {
                    let (d, _) = box_distance_direction(obs, ca);
                    total += (radius - d).max(0.0);
                }
            }
        }
    }
    total
}

/// Solves one horizon by sequential convexification with a trust region.
/// `warm` optionally seeds the guess with a previous plan (already shifted).
pub fn solve_horizon(
    current: &[VehicleState],
    refs: &[&[VehicleState]],
    u_prev: &[ControlInput],
    cfg: &MpcConfig,
    env: &RunEnv,
    t0: usize,
    warm: Option<&[Vec<ControlInput>]>,
) -> Result<HorizonSolution> {
    let vehicles = current.len();
    let horizon = cfg.horizon;
    let scale = input_scale(cfg);

    // Initial guess: the shifted previous plan if provided and rate-feasible,
    // otherwise ramp each input toward zero at the rate limit (a pure zero
    // guess could violate the step-0 rate row after a hard maneuver).
    let ramp_guess = || -> Vec<Vec<ControlInput>> {
        (0..vehicles)
            .map(|k| {
                let mut u = u_prev[k];
                (0..horizon)
                    .map(|_| {
                        u = ControlInput::new(
                            approach_zero(u.accel, cfg.input_rate_max[0] * 0.999),
                            approach_zero(u.steer, cfg.input_rate_max[1] * 0.999),
                        );
                        u
                    })
                    .collect()
            })
            .collect()
    };
    let mut guess_inputs = match warm {
        Some(w) if w.len() == vehicles && w.iter().all(|row| row.len() == horizon) => w.to_vec(),
        _ => ramp_guess(),
    };
    let mut guess_states = rollout(current, &guess_inputs, cfg);
    if !rollout_admissible(&guess_states, &guess_inputs, u_prev, cfg, env, t0)
        && penetration(&guess_states, cfg, env) == 0.0
        && warm.is_some()
    {
        // Warm plan broke a bound after the state advanced; fall back.
        guess_inputs = ramp_guess();
        guess_states = rollout(current, &guess_inputs, cfg);
    }

    let merit_of = |states: &[Vec<VehicleState>], inputs: &[Vec<ControlInput>]| -> f64 {
        exact_objective(states, inputs, refs, u_prev, cfg, env, t0)
            + COLLISION_PENALTY * penetration(states, cfg, env)
    };

    let mut guess_merit = merit_of(&guess_states, &guess_inputs);
    let mut best_obj = f64::INFINITY;
    let mut best: Option<(Vec<Vec<VehicleState>>, Vec<Vec<ControlInput>>)> = None;
    if rollout_admissible(&guess_states, &guess_inputs, u_prev, cfg, env, t0) {
        best_obj = exact_objective(&guess_states, &guess_inputs, refs, u_prev, cfg, env, t0);
        best = Some((guess_states.clone(), guess_inputs.clone()));
    }

    let mut trust = 1.0f64;
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..cfg.max_inner_iters {
        iterations += 1;
        let prog = build_horizon_program(
            current,
            refs,
            u_prev,
            cfg,
            env,
            &guess_states,
            &guess_inputs,
            trust,
            t0,
        )?;
        let opts = SolveOptions {
            opt_tol: 1e-8,
            max_iters: 300,
            ..SolveOptions::default()
        };
        let sol = convex::solve(&prog, &opts)?;
        if sol.status == SolveStatus::Infeasible {
            // Linearization too aggressive; shrink and retry.
            trust *= 0.5;
            if trust < 1e-3 {
                break;
            }
            continue;
        }
        let mut inputs = vec![vec![ControlInput::ZERO; horizon]; vehicles];
        for k in 0..vehicles {
            for j in 0..horizon {
                inputs[k][j] = ControlInput::new(
                    sol.values[uvar(k, j, 0, horizon)] * scale[0],
                    sol.values[uvar(k, j, 1, horizon)] * scale[1],
                );
            }
        }
        let states = rollout(current, &inputs, cfg);
        let admissible = rollout_admissible(&states, &inputs, u_prev, cfg, env, t0);
        let merit = merit_of(&states, &inputs);
        if std::env::var("PLATOON_DEBUG_MPC").is_ok() {
            eprintln!(
                "scp iter {iterations}: merit {merit:.6} (guess {guess_merit:.6}) trust {trust:.3} admissible {admissible} pen {:.4} solver {:?}/{}",
                penetration(&states, cfg, env), sol.status, sol.newton_iters
            );
        }
        if merit <= guess_merit + 1e-12 {
            let improvement = guess_merit - merit;
            guess_merit = merit;
            guess_states = states.clone();
            guess_inputs = inputs.clone();
            trust = (trust * 2.0).min(1.0);
            if admissible {
                let obj = exact_objective(&states, &inputs, refs, u_prev, cfg, env, t0);
                if obj < best_obj {
                    best_obj = obj;
                    best = Some((states, inputs));
                }
                if improvement.abs() < cfg.tolerance * (1.0 + guess_merit.abs()) {
                    converged = true;
                    break;
                }
            }
        } else {
            trust *= 0.5;
            if trust < 1e-3 {
                break;
            }
        }
    }

    let (trajectory, inputs) = best.ok_or_else(|| {
        Error::Solver("horizon solve found no admissible trajectory".into())
    })?;

    // The controller must never emit a colliding plan.
    for j in 1..=horizon {
        for a in 0..vehicles {
            let pa = polytope_of(&trajectory[a][j], &cfg.geometry);
            for b in (a + 1)..vehicles {
                if polytopes_intersect(&pa, &polytope_of(&trajectory[b][j], &cfg.geometry)) {
                    return Err(Error::Collision {
                        step: t0 + j,
                        a: format!("vehicle {a}"),
                        b: format!("vehicle {b}"),
                    });
                }
            }
            for (oi, obs) in env.obstacles.iter().enumerate() {
                if polytopes_intersect(&pa, obs) {
                    return Err(Error::Collision {
                        step: t0 + j,
                        a: format!("vehicle {a}"),
                        b: format!("obstacle {oi}"),
                    });
                }
            }
        }
    }

    if !converged {
        log::warn!("horizon at step {t0} stopped after {iterations} iterations without meeting eps_p");
    }

    Ok(HorizonSolution {
        first_inputs: inputs.iter().map(|row| row[0]).collect(),
        trajectory,
        inputs,
        objective: best_obj,
        iterations,
        converged,
    })
}

/// Receding-horizon closed loop over T steps; steps beyond T - horizon hold
/// the last emitted input.
pub fn receding_run(
    initial: &[VehicleState],
    refs: &ReferenceTrajectory,
    cfg: &MpcConfig,
    env: &RunEnv,
) -> Result<PlatoonTrace> {
    let vehicles = initial.len();
    if refs.vehicles() != vehicles {
        return Err(Error::DimensionMismatch("reference vehicle count".into()));
    }
    let total = refs.steps().saturating_sub(1);
    if total < cfg.horizon {
        return Err(Error::InvalidConfig(format!(
            "need more than horizon+1 reference steps, got {}",
            refs.steps()
        )));
    }
    let mut states: Vec<Vec<VehicleState>> = initial.iter().map(|z| vec![*z]).collect();
    let mut inputs: Vec<Vec<ControlInput>> = vec![Vec::new(); vehicles];
    let mut objectives = Vec::new();
    let mut min_clearance = Vec::new();
    let mut u_prev = vec![ControlInput::ZERO; vehicles];

    let solve_steps = total - cfg.horizon;
    let mut warm: Option<Vec<Vec<ControlInput>>> = None;
    for t in 0..total {
        let u_now: Vec<ControlInput> = if t < solve_steps || t == 0 {
            let window: Vec<&[VehicleState]> = (0..vehicles)
                .map(|k| &refs.states[k][t + 1..t + 1 + cfg.horizon])
                .collect();
            let current: Vec<VehicleState> = (0..vehicles).map(|k| states[k][t]).collect();
            let sol = solve_horizon(&current, &window, &u_prev, cfg, env, t, warm.as_deref())
                .map_err(|e| Error::Solver(format!("step {t}: {e}")))?;
            objectives.push(sol.objective);
            // Shift the plan one step for the next warm start.
            warm = Some(
                sol.inputs
                    .iter()
                    .map(|row| {
                        let mut shifted: Vec<ControlInput> = row[1..].to_vec();
                        shifted.push(*row.last().unwrap());
                        shifted
                    })
                    .collect(),
            );
            sol.first_inputs
        } else {
            // Tail: hold the last emitted input.
            u_prev.clone()
        };
        for k in 0..vehicles {
            let next = step(&states[k][t], &u_now[k], &cfg.geometry, cfg.dt);
            states[k].push(next);
            inputs[k].push(u_now[k]);
        }
        u_prev = u_now;

        let mut clearance = f64::INFINITY;
        let mut collided = false;
        for a in 0..vehicles {
            let pa = polytope_of(&states[a][t + 1], &cfg.geometry);
            let da = disc_cover(&states[a][t + 1], &cfg.geometry, 0.0);
            for b in (a + 1)..vehicles {
                let pb = polytope_of(&states[b][t + 1], &cfg.geometry);
                if polytopes_intersect(&pa, &pb) {
                    collided = true;
                }
                let db = disc_cover(&states[b][t + 1], &cfg.geometry, 0.0);
                for x in &da {
                    for y in &db {
                        let d = ((x.center[0] - y.center[0]).powi(2)
                            + (x.center[1] - y.center[1]).powi(2))
                        .sqrt()
                            - x.radius
                            - y.radius;
                        clearance = clearance.min(d);
                    }
                }
            }
            for obs in &env.obstacles {
                if polytopes_intersect(&pa, obs) {
                    collided = true;
                }
                for x in &da {
                    let (d, _) = box_distance_direction(obs, x.center);
                    clearance = clearance.min(d - x.radius);
                }
            }
        }
        min_clearance.push(clearance);
        if collided {
            return Err(Error::Collision {
                step: t + 1,
                a: "platoon".into(),
                b: "exact check".into(),
            });
        }
    }

    Ok(PlatoonTrace {
        states,
        inputs,
        objectives,
        min_clearance: min_clearance.clone(),
        collision_flags: vec![false; min_clearance.len()],
    })
}
