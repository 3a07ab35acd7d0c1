//! Successive convex approximation loop for the downlink subproblem, plus
//! schedule rounding and the baseline schemes.

use crate::convex::{self, SolveOptions, SolveStatus};
use crate::error::{Error, Result};

use super::subproblem::{self, Scaled};
use super::{DownlinkSpec, DownlinkVariables, ScaIterate, ScaReport, ScaStatus, Scheme};

#[derive(Debug, Clone)]
pub struct ScaOptions {
    /// Maximum SCA iterations N.
    pub max_iters: usize,
    /// Stopping tolerance on the latency bound (slot-index units).
    pub tolerance: f64,
    pub solver: SolveOptions,
}

impl Default for ScaOptions {
    fn default() -> Self {
        Self {
            max_iters: 30,
            tolerance: 1e-4,
            solver: SolveOptions {
                feas_tol: 1e-7,
                opt_tol: 1e-9,
                max_iters: 600,
                ..SolveOptions::default()
            },
        }
    }
}

/// Algorithm 2 on the RSMA formulation.
pub fn sca_solve(spec: &DownlinkSpec, opts: &ScaOptions) -> Result<ScaReport> {
    run(spec, Scheme::Rsma, opts)
}

/// Same pipeline with the unicast rate-split forced to zero.
pub fn baseline_mulp(spec: &DownlinkSpec, opts: &ScaOptions) -> Result<ScaReport> {
    run(spec, Scheme::Mulp, opts)
}

/// Same pipeline without a common stream; the payload is unicast to every
/// follower under SIC decoding ordered by descending channel norm.
pub fn baseline_noma(spec: &DownlinkSpec, opts: &ScaOptions) -> Result<ScaReport> {
    run(spec, Scheme::Noma, opts)
}

pub(crate) fn run(spec: &DownlinkSpec, scheme: Scheme, opts: &ScaOptions) -> Result<ScaReport> {
    spec.validate()?;
    let sc = Scaled::new(spec, scheme)?;
    let mut current = subproblem::interior_point(spec, &sc, None)?;
    let mut prev_phi = current.latency_bound;
    let mut prev_obj = current.objective(spec);
    let mut best = current.clone();
    let mut iterates: Vec<ScaIterate> = Vec::new();
    let mut status = ScaStatus::IterationLimit;

    for n in 1..=opts.max_iters {
        let (prog, layout) = subproblem::build(spec, &sc, &current)?;
        let x0 = subproblem::initial_vector(&layout, &sc, &current, spec);
        let solver_opts = SolveOptions { initial: Some(x0), ..opts.solver.clone() };
        let sol = convex::solve(&prog, &solver_opts)?;
        if sol.status == SolveStatus::Infeasible {
            let x0 = subproblem::initial_vector(&layout, &sc, &current, spec);
            return Err(Error::Solver(format!(
                "{} subproblem reported infeasible at SCA iteration {n}; \
                 start-point residuals {:?}",
                scheme.as_str(),
                prog.worst_constraints(&x0, 4)
            )));
        }
        let cand = subproblem::extract(&layout, &sc, spec, &sol.values);
        let obj = cand.objective(spec);

        // The previous iterate stays feasible for the new subproblem, so a
        // non-improving solve means the iteration has saturated.
        if obj > prev_obj + 1e-9 * (1.0 + prev_obj.abs()) && !iterates.is_empty() {
            status = ScaStatus::Converged;
            break;
        }

        let orig_violation = subproblem::verify_original_constraints(spec, &cand)?;
        if orig_violation > 100.0 * opts.solver.feas_tol {
            return Err(Error::Solver(format!(
                "original SINR constraints violated by {orig_violation:.3e} at iteration {n}"
            )));
        }
        let prog_violation = prog.max_violation(&sol.values).max(0.0);
        iterates.push(ScaIterate {
            iteration: n,
            latency_bound: cand.latency_bound,
            objective: obj,
            max_violation: prog_violation.max(orig_violation.max(0.0)),
        });
        best = cand.clone();

        let dphi = (prev_phi - cand.latency_bound).abs();
        prev_phi = cand.latency_bound;
        prev_obj = obj;
        if dphi < opts.tolerance {
            status = ScaStatus::Converged;
            break;
        }
        current = subproblem::interior_point(spec, &sc, Some(&cand))?;
    }

    let relaxed = best;
    let rounded = round_schedule(spec, &relaxed)?;
    let latency_slots = rounded.latency_slots();
    Ok(ScaReport {
        iterates,
        status,
        latency_seconds: latency_slots as f64 * spec.dt,
        latency_slots,
        objective: relaxed.objective(spec),
        final_vars: rounded,
        relaxed_vars: relaxed,
    })
}

/// Rounds the relaxed schedule mask to binary and repairs the payload
/// constraint greedily (earliest slots first) if thresholding lost bits.
pub fn round_schedule(spec: &DownlinkSpec, vars: &DownlinkVariables) -> Result<DownlinkVariables> {
    let mut rounded = vars.clone();
    let slots = spec.slots;
    for row in 0..rounded.psi.len() {
        for t in 0..slots {
            rounded.psi[row][t] = if vars.psi[row][t] >= 0.5 { 1.0 } else { 0.0 };
        }
        let rate = |t: usize| -> f64 {
            match vars.scheme {
                Scheme::Rsma | Scheme::Mulp => vars.c0[t],
                Scheme::Noma => vars.alpha[row][t],
            }
        };
        let mut delivered: f64 = (0..slots)
            .map(|t| rounded.psi[row][t] * rate(t) * spec.dt)
            .sum();
        if delivered < spec.payload_bits {
            for t in 0..slots {
                if rounded.psi[row][t] == 0.0 {
                    rounded.psi[row][t] = 1.0;
                    delivered += rate(t) * spec.dt;
                    if delivered >= spec.payload_bits {
                        break;
                    }
                }
            }
        }
        if delivered < spec.payload_bits * (1.0 - 1e-12) {
            return Err(Error::PayloadInfeasible(format!(
                "stream {row}: all-on rounded schedule delivers {delivered:.3e} of {:.3e} bits",
                spec.payload_bits
            )));
        }
    }
    rounded.latency_bound = rounded.latency_slots() as f64;
    Ok(rounded)
}
