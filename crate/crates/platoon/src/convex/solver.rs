//! Log-barrier interior-point solver for [`ConvexProgram`].
//!
//! The barrier of every constraint class is smooth:
//!   linear   a^T x - b          -> -log(b - a^T x)
//!   quad     sum r_i(x)^2 - q(x) -> -log(q - sum r^2)
//!   exp2     2^e(x) - c(x)       -> -log(c - 2^e)
//!
//! Newton systems are factored per variable group. A constraint whose
//! nonlinear part lives in one group but whose gradient spills into other
//! groups (always a linear spill) contributes a rank-one term handled through
//! a Woodbury correction, so programs with per-slot block structure solve in
//! time linear in the number of slots.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

use super::program::{Affine, Constraint, ConvexProgram};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub values: Vec<f64>,
    pub objective_value: f64,
    pub status: SolveStatus,
    /// Scaled stationarity/gap residual at the returned point.
    pub kkt_residual: f64,
    pub newton_iters: usize,
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub feas_tol: f64,
    pub opt_tol: f64,
    /// Total Newton iteration budget across barrier stages.
    pub max_iters: usize,
    /// Multiplicative duality-gap reduction per barrier stage.
    pub barrier_reduction: f64,
    pub initial: Option<Vec<f64>>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            feas_tol: 1e-7,
            opt_tol: 1e-6,
            max_iters: 200,
            barrier_reduction: 0.2,
            initial: None,
        }
    }
}

/// KKT residual report at a given point.
#[derive(Debug, Clone)]
pub struct KktReport {
    pub primal_violation: f64,
    pub dual_violation: f64,
    pub stationarity: f64,
    pub complementarity_gap: f64,
}

// Row normalization rescales constraint residuals by arbitrary factors, so
// "strictly feasible" only demands floating-point headroom; the log barrier
// itself is invariant to the row scale.
const INTERIOR_MARGIN: f64 = 1e-30;

struct GroupSpan {
    offset: usize,
    len: usize,
}

/// Normalized constraint plus its structural classification.
struct NormCon {
    con: Constraint,
    /// Group holding the nonlinear part (or the single group for local
    /// constraints). `None` for purely linear cross-group constraints.
    hess_group: Option<usize>,
    /// True when every touched variable lives in one group: the rank-one
    /// gradient outer product can then be folded into the block Hessian.
    local: bool,
}

struct Prepared {
    n: usize,
    groups: Vec<GroupSpan>,
    var_group: Vec<usize>,
    lowers: Vec<f64>,
    uppers: Vec<f64>,
    cons: Vec<NormCon>,
    /// Total barrier term count (constraints + finite bounds).
    m: usize,
    obj_linear: DVector<f64>,
    obj_constant: f64,
    obj_quads: Vec<(f64, Affine, usize)>,
}

fn prepare(prog: &ConvexProgram) -> Result<Prepared> {
    prog.validate()?;
    let n = prog.num_vars();
    let num_groups = prog.num_groups().max(1);
    let mut offsets = vec![usize::MAX; num_groups];
    let mut lens = vec![0usize; num_groups];
    let mut var_group = Vec::with_capacity(n);
    for (i, v) in prog.vars.iter().enumerate() {
        if offsets[v.group] == usize::MAX {
            offsets[v.group] = i;
        }
        lens[v.group] += 1;
        var_group.push(v.group);
    }
    let groups = (0..num_groups)
        .map(|g| GroupSpan { offset: if offsets[g] == usize::MAX { 0 } else { offsets[g] }, len: lens[g] })
        .collect();

    let mut cons = Vec::with_capacity(prog.constraints.len());
    for c in &prog.constraints {
        let normalized = normalize(c);
        let touched = normalized.touched_vars();
        let mut gs: Vec<usize> = touched.iter().map(|&i| var_group[i]).collect();
        gs.sort_unstable();
        gs.dedup();
        let local = gs.len() <= 1;
        let hess_group = match &normalized {
            Constraint::Linear { .. } => {
                if local {
                    gs.first().copied()
                } else {
                    None
                }
            }
            Constraint::Quad { rows, .. } => rows
                .iter()
                .flat_map(|r| r.terms.iter())
                .map(|&(i, _)| var_group[i])
                .next()
                .or_else(|| gs.first().copied()),
            Constraint::Exp2 { exponent, .. } => exponent
                .terms
                .first()
                .map(|&(i, _)| var_group[i])
                .or_else(|| gs.first().copied()),
        };
        cons.push(NormCon { con: normalized, hess_group, local });
    }

    let mut bound_count = 0;
    let mut lowers = Vec::with_capacity(n);
    let mut uppers = Vec::with_capacity(n);
    for v in &prog.vars {
        if v.lower.is_finite() {
            bound_count += 1;
        }
        if v.upper.is_finite() {
            bound_count += 1;
        }
        lowers.push(v.lower);
        uppers.push(v.upper);
    }

    let mut obj_linear = DVector::zeros(n);
    for &(i, c) in &prog.obj_linear {
        obj_linear[i] += c;
    }
    let obj_quads = prog
        .obj_quads
        .iter()
        .map(|q| {
            let g = q
                .row
                .terms
                .first()
                .map(|&(i, _)| var_group[i])
                .unwrap_or(0);
            (q.weight, q.row.clone(), g)
        })
        .collect();

    Ok(Prepared {
        n,
        groups,
        var_group,
        lowers,
        uppers,
        m: cons.len() + bound_count,
        cons,
        obj_linear,
        obj_constant: prog.obj_constant,
        obj_quads,
    })
}

/// Rescales a constraint so its coefficients are O(1).
fn normalize(c: &Constraint) -> Constraint {
    match c {
        Constraint::Linear { terms, rhs, label } => {
            let mag = terms
                .iter()
                .map(|(_, c)| c.abs())
                .fold(rhs.abs(), f64::max)
                .max(1e-12);
            Constraint::Linear {
                terms: terms.iter().map(|&(i, c)| (i, c / mag)).collect(),
                rhs: rhs / mag,
                label: label.clone(),
            }
        }
        Constraint::Quad { rows, bound, label } => {
            let mag = bound
                .max_abs_coeff()
                .max(bound.constant.abs())
                .max(rows.iter().map(|r| {
                    let m = r.max_abs_coeff().max(r.constant.abs());
                    m * m
                }).fold(0.0, f64::max))
                .max(1e-12);
            let row_scale = 1.0 / mag.sqrt();
            Constraint::Quad {
                rows: rows.iter().map(|r| r.scale(row_scale)).collect(),
                bound: bound.scale(1.0 / mag),
                label: label.clone(),
            }
        }
        Constraint::Exp2 { exponent, cap, label } => {
            let mag = cap.max_abs_coeff().max(cap.constant.abs()).max(1e-12);
            let mut e = exponent.clone();
            e.constant -= mag.log2();
            Constraint::Exp2 { exponent: e, cap: cap.scale(1.0 / mag), label: label.clone() }
        }
    }
}

struct BarrierEval {
    value: f64,
    grad: DVector<f64>,
    blocks: Vec<DMatrix<f64>>,
    /// Rank-one Woodbury columns (sorted sparse vectors).
    cross: Vec<Vec<(usize, f64)>>,
}

impl Prepared {
    fn objective(&self, x: &DVector<f64>) -> f64 {
        let mut v = self.obj_constant + self.obj_linear.dot(x);
        for (w, row, _) in &self.obj_quads {
            let r = row.eval(x.as_slice());
            v += w * r * r;
        }
        v
    }

    fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = f64::NEG_INFINITY;
        for c in &self.cons {
            worst = worst.max(c.con.eval(x));
        }
        for i in 0..self.n {
            if self.lowers[i].is_finite() {
                worst = worst.max(self.lowers[i] - x[i]);
            }
            if self.uppers[i].is_finite() {
                worst = worst.max(x[i] - self.uppers[i]);
            }
        }
        worst
    }

    /// Constraint residual only; box bounds are checked separately because
    /// their natural proximity scale varies per variable.
    fn max_constraint_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = f64::NEG_INFINITY;
        for c in &self.cons {
            worst = worst.max(c.con.eval(x));
        }
        worst
    }

    fn bounds_interior(&self, x: &[f64]) -> bool {
        (0..self.n).all(|i| x[i] > self.lowers[i] && x[i] < self.uppers[i])
    }

    fn strictly_feasible(&self, x: &[f64], margin: f64) -> bool {
        self.bounds_interior(x) && self.max_constraint_violation(x) <= -margin
    }

    /// Barrier function t*f0 + phi with gradient, block Hessians, and
    /// Woodbury columns. Returns None if `x` is not strictly interior.
    fn eval(&self, x: &DVector<f64>, t: f64) -> Option<BarrierEval> {
        let n = self.n;
        let mut value = t * self.objective(x);
        let mut grad = &self.obj_linear * t;
        let mut blocks: Vec<DMatrix<f64>> = self
            .groups
            .iter()
            .map(|g| DMatrix::zeros(g.len, g.len))
            .collect();
        let mut cross: Vec<Vec<(usize, f64)>> = Vec::new();

        // Objective quadratic terms.
        for (w, row, g) in &self.obj_quads {
            let r = row.eval(x.as_slice());
            let off = self.groups[*g].offset;
            for &(i, ci) in &row.terms {
                grad[i] += t * 2.0 * w * r * ci;
                for &(j, cj) in &row.terms {
                    if j <= i {
                        blocks[*g][(i - off, j - off)] += t * 2.0 * w * ci * cj;
                    }
                }
            }
        }

        // Box bounds.
        for i in 0..n {
            let g = self.var_group[i];
            let off = self.groups[g].offset;
            if self.lowers[i].is_finite() {
                let s = x[i] - self.lowers[i];
                if s <= 0.0 {
                    return None;
                }
                value -= s.ln();
                grad[i] -= 1.0 / s;
                blocks[g][(i - off, i - off)] += 1.0 / (s * s);
            }
            if self.uppers[i].is_finite() {
                let s = self.uppers[i] - x[i];
                if s <= 0.0 {
                    return None;
                }
                value -= s.ln();
                grad[i] += 1.0 / s;
                blocks[g][(i - off, i - off)] += 1.0 / (s * s);
            }
        }

        // Constraints.
        for nc in &self.cons {
            let f = nc.con.eval(x.as_slice());
            if f >= 0.0 {
                return None;
            }
            let slack = -f;
            value -= slack.ln();
            // Gradient of f and its barrier weight 1/slack.
            let mut gf: Vec<(usize, f64)> = Vec::new();
            match &nc.con {
                Constraint::Linear { terms, .. } => {
                    gf.extend(terms.iter().copied());
                }
                Constraint::Quad { rows, bound, .. } => {
                    for r in rows {
                        let rv = r.eval(x.as_slice());
                        for &(i, c) in &r.terms {
                            gf.push((i, 2.0 * rv * c));
                        }
                    }
                    for &(i, c) in &bound.terms {
                        gf.push((i, -c));
                    }
                }
                Constraint::Exp2 { exponent, cap, .. } => {
                    let e = exponent.eval(x.as_slice()).exp2() * std::f64::consts::LN_2;
                    for &(i, c) in &exponent.terms {
                        gf.push((i, e * c));
                    }
                    for &(i, c) in &cap.terms {
                        gf.push((i, -c));
                    }
                }
            }
            // Accumulate duplicate indices and sort.
            gf.sort_unstable_by_key(|&(i, _)| i);
            let mut packed: Vec<(usize, f64)> = Vec::with_capacity(gf.len());
            for (i, c) in gf {
                if let Some(last) = packed.last_mut() {
                    if last.0 == i {
                        last.1 += c;
                        continue;
                    }
                }
                packed.push((i, c));
            }

            for &(i, c) in &packed {
                grad[i] += c / slack;
            }

            // Hessian of f scaled by 1/slack into the owning block.
            if let Some(g) = nc.hess_group {
                let off = self.groups[g].offset;
                let block = &mut blocks[g];
                match &nc.con {
                    Constraint::Linear { .. } => {}
                    Constraint::Quad { rows, .. } => {
                        for r in rows {
                            for &(i, ci) in &r.terms {
                                for &(j, cj) in &r.terms {
                                    if j <= i {
                                        block[(i - off, j - off)] += 2.0 * ci * cj / slack;
                                    }
                                }
                            }
                        }
                    }
                    Constraint::Exp2 { exponent, .. } => {
                        let e = exponent.eval(x.as_slice()).exp2()
                            * std::f64::consts::LN_2
                            * std::f64::consts::LN_2;
                        for &(i, ci) in &exponent.terms {
                            for &(j, cj) in &exponent.terms {
                                if j <= i {
                                    block[(i - off, j - off)] += e * ci * cj / slack;
                                }
                            }
                        }
                    }
                }
            }

            // Gradient outer product grad f grad f^T / slack^2.
            if nc.local {
                if let Some(g) = nc.hess_group {
                    let off = self.groups[g].offset;
                    let block = &mut blocks[g];
                    for &(i, ci) in &packed {
                        for &(j, cj) in &packed {
                            if j <= i {
                                block[(i - off, j - off)] += ci * cj / (slack * slack);
                            }
                        }
                    }
                }
            } else {
                cross.push(packed.iter().map(|&(i, c)| (i, c / slack)).collect());
            }
        }

        // Mirror lower triangles.
        for b in &mut blocks {
            let (r, _) = b.shape();
            for i in 0..r {
                for j in (i + 1)..r {
                    b[(i, j)] = b[(j, i)];
                }
            }
        }

        Some(BarrierEval { value, grad, blocks, cross })
    }

    fn barrier_value(&self, x: &DVector<f64>, t: f64) -> Option<f64> {
        let mut value = t * self.objective(x);
        for i in 0..self.n {
            if self.lowers[i].is_finite() {
                let s = x[i] - self.lowers[i];
                if s <= 0.0 {
                    return None;
                }
                value -= s.ln();
            }
            if self.uppers[i].is_finite() {
                let s = self.uppers[i] - x[i];
                if s <= 0.0 {
                    return None;
                }
                value -= s.ln();
            }
        }
        for nc in &self.cons {
            let f = nc.con.eval(x.as_slice());
            if f >= 0.0 {
                return None;
            }
            value -= (-f).ln();
        }
        Some(value)
    }
}

struct BlockFactors {
    chols: Vec<Option<Cholesky<f64, nalgebra::Dyn>>>,
}

fn factor_blocks(blocks: &[DMatrix<f64>]) -> Result<BlockFactors> {
    let mut chols = Vec::with_capacity(blocks.len());
    for b in blocks {
        if b.nrows() == 0 {
            chols.push(None);
            continue;
        }
        // Barrier Hessians are SPD; try the exact matrix first and only then
        // escalate a ridge. The ridge must stay far below the smallest
        // meaningful curvature, so it starts tiny and grows geometrically.
        if let Some(ch) = Cholesky::new(b.clone()) {
            chols.push(Some(ch));
            continue;
        }
        let mut ridge = 1e-14 * (1.0 + b.diagonal().amax());
        let mut done = false;
        for _ in 0..10 {
            let mut attempt = b.clone();
            for i in 0..attempt.nrows() {
                attempt[(i, i)] += ridge;
            }
            if let Some(ch) = Cholesky::new(attempt) {
                chols.push(Some(ch));
                done = true;
                break;
            }
            ridge *= 100.0;
        }
        if !done {
            return Err(Error::Solver("block factorization failed".into()));
        }
    }
    Ok(BlockFactors { chols })
}

impl BlockFactors {
    fn solve_dense(&self, prepared: &Prepared, rhs: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(rhs.len());
        for (g, span) in prepared.groups.iter().enumerate() {
            if span.len == 0 {
                continue;
            }
            let sub = rhs.rows(span.offset, span.len).into_owned();
            if let Some(ch) = &self.chols[g] {
                let sol = ch.solve(&sub);
                out.rows_mut(span.offset, span.len).copy_from(&sol);
            }
        }
        out
    }

    /// Solves H_bd y = w for a sparse w; the result is supported on the same
    /// groups as w.
    fn solve_sparse(&self, prepared: &Prepared, w: &[(usize, f64)]) -> Vec<(usize, f64)> {
        let mut groups: Vec<usize> = w.iter().map(|&(i, _)| prepared.var_group[i]).collect();
        groups.sort_unstable();
        groups.dedup();
        let mut out: Vec<(usize, f64)> = Vec::new();
        for g in groups {
            let span = &prepared.groups[g];
            let mut sub = DVector::zeros(span.len);
            for &(i, c) in w {
                if prepared.var_group[i] == g {
                    sub[i - span.offset] = c;
                }
            }
            if let Some(ch) = &self.chols[g] {
                let sol = ch.solve(&sub);
                for r in 0..span.len {
                    if sol[r] != 0.0 {
                        out.push((span.offset + r, sol[r]));
                    }
                }
            }
        }
        out.sort_unstable_by_key(|&(i, _)| i);
        out
    }
}

fn sparse_dot(a: &[(usize, f64)], b: &[(usize, f64)]) -> f64 {
    let mut ia = 0;
    let mut ib = 0;
    let mut acc = 0.0;
    while ia < a.len() && ib < b.len() {
        match a[ia].0.cmp(&b[ib].0) {
            std::cmp::Ordering::Less => ia += 1,
            std::cmp::Ordering::Greater => ib += 1,
            std::cmp::Ordering::Equal => {
                acc += a[ia].1 * b[ib].1;
                ia += 1;
                ib += 1;
            }
        }
    }
    acc
}

fn sparse_dot_dense(a: &[(usize, f64)], b: &DVector<f64>) -> f64 {
    a.iter().map(|&(i, c)| c * b[i]).sum()
}

/// Solves (H_bd + W W^T) d = rhs via Woodbury.
fn newton_direction(
    prepared: &Prepared,
    factors: &BlockFactors,
    cross: &[Vec<(usize, f64)>],
    rhs: &DVector<f64>,
) -> Result<DVector<f64>> {
    let u = factors.solve_dense(prepared, rhs);
    if cross.is_empty() {
        return Ok(u);
    }
    let r = cross.len();
    let ys: Vec<Vec<(usize, f64)>> = cross
        .iter()
        .map(|w| factors.solve_sparse(prepared, w))
        .collect();
    let mut m = DMatrix::identity(r, r);
    for j in 0..r {
        for k in j..r {
            let v = sparse_dot(&cross[j], &ys[k]);
            m[(j, k)] += v;
            if k != j {
                m[(k, j)] += v;
            }
        }
    }
    let mut wu = DVector::zeros(r);
    for j in 0..r {
        wu[j] = sparse_dot_dense(&cross[j], &u);
    }
    // M = I + W^T H^-1 W is SPD but can span many decades near active
    // boundaries; LU with a ridge retry is the robust way to solve it.
    let z = match Cholesky::new(m.clone()) {
        Some(ch) => ch.solve(&wu),
        None => {
            let ridge = 1e-12 * m.diagonal().amax().max(1.0);
            for i in 0..r {
                m[(i, i)] += ridge;
            }
            m.clone()
                .lu()
                .solve(&wu)
                .ok_or_else(|| Error::Solver("Woodbury factorization failed".into()))?
        }
    };
    let mut d = u;
    for j in 0..r {
        for &(i, c) in &ys[j] {
            d[i] -= c * z[j];
        }
    }
    Ok(d)
}

/// Newton loop at fixed barrier weight t. Returns the Newton iterations used.
fn center(
    prepared: &Prepared,
    x: &mut DVector<f64>,
    t: f64,
    budget: usize,
    early_exit: &mut dyn FnMut(&[f64]) -> bool,
) -> Result<usize> {
    let mut iters = 0;
    while iters < budget {
        let eval = prepared
            .eval(x, t)
            .ok_or_else(|| Error::Solver("iterate left the interior".into()))?;
        let factors = factor_blocks(&eval.blocks)?;
        let d = newton_direction(prepared, &factors, &eval.cross, &(-&eval.grad))?;
        let decrement = eval.grad.dot(&(-&d));
        iters += 1;
        if !decrement.is_finite() {
            return Err(Error::Solver("non-finite Newton decrement".into()));
        }
        if decrement / 2.0 <= 1e-10 * (1.0 + eval.value.abs()) {
            break;
        }

        // Fraction-to-boundary on the closed-form terms, then backtracking.
        let mut alpha = 1.0f64;
        for i in 0..prepared.n {
            if d[i] < 0.0 && prepared.lowers[i].is_finite() {
                alpha = alpha.min((prepared.lowers[i] - x[i]) / d[i]);
            }
            if d[i] > 0.0 && prepared.uppers[i].is_finite() {
                alpha = alpha.min((prepared.uppers[i] - x[i]) / d[i]);
            }
        }
        alpha = (alpha * 0.99).min(1.0);
        let mut candidate = &*x + &d * alpha;
        let mut tries = 0;
        let f0 = eval.value;
        let slope = eval.grad.dot(&d);
        loop {
            if let Some(v) = prepared.barrier_value(&candidate, t) {
                if v <= f0 + 0.01 * alpha * slope {
                    break;
                }
            }
            alpha *= 0.5;
            tries += 1;
            if tries > 60 {
                // No usable step; the stage has converged numerically.
                return Ok(iters);
            }
            candidate = &*x + &d * alpha;
        }
        *x = candidate;
        if early_exit(x.as_slice()) {
            return Ok(iters);
        }
    }
    Ok(iters)
}

/// Barrier loop over increasing t.
fn barrier_minimize(
    prepared: &Prepared,
    x: &mut DVector<f64>,
    opts: &SolveOptions,
    early_exit: &mut dyn FnMut(&[f64]) -> bool,
) -> Result<(SolveStatus, usize, f64)> {
    let m = prepared.m.max(1) as f64;
    let f0 = prepared.objective(x);
    let mut t = (m / (1.0 + f0.abs())).clamp(1e-2, 1e4);
    let grow = 1.0 / opts.barrier_reduction.clamp(1e-3, 0.9);
    let mut used = 0;
    loop {
        let budget = opts.max_iters - used;
        if budget == 0 {
            return Ok((SolveStatus::IterationLimit, used, m / t));
        }
        let spent = center(prepared, x, t, budget.min(60), early_exit)?;
        used += spent;
        if early_exit(x.as_slice()) {
            return Ok((SolveStatus::Optimal, used, m / t));
        }
        let scale = 1.0 + prepared.objective(x).abs();
        if m / t <= opts.opt_tol * scale {
            return Ok((SolveStatus::Optimal, used, m / t));
        }
        if used >= opts.max_iters {
            return Ok((SolveStatus::IterationLimit, used, m / t));
        }
        t *= grow;
    }
}

/// Clips a point into the strict interior of the variable boxes. Points that
/// are already strictly inside are left untouched, however close to a bound:
/// the log barrier is scale-invariant near a bound, while moving a variable
/// by an absolute pad can wreck constraints that live on a smaller scale.
fn clip_into_bounds(prepared: &Prepared, x: &mut DVector<f64>) {
    for i in 0..prepared.n {
        let lo = prepared.lowers[i];
        let hi = prepared.uppers[i];
        let pad = if lo.is_finite() && hi.is_finite() {
            ((hi - lo) * 1e-7).max(1e-300)
        } else {
            1e-9
        };
        if !x[i].is_finite() {
            x[i] = if lo.is_finite() && hi.is_finite() {
                0.5 * (lo + hi)
            } else if lo.is_finite() {
                lo + 1.0
            } else if hi.is_finite() {
                hi - 1.0
            } else {
                0.0
            };
        }
        if lo.is_finite() && x[i] <= lo {
            x[i] = lo + pad;
        }
        if hi.is_finite() && x[i] >= hi {
            x[i] = hi - pad;
        }
    }
}

/// Phase-1: minimize slack variables added per group (plus one for
/// cross-group constraints) until the original constraints hold strictly.
fn phase1(prog: &ConvexProgram, prepared: &Prepared, x0: &DVector<f64>) -> Result<Option<DVector<f64>>> {
    let num_groups = prepared.groups.len();
    // Slack of group q sits right after the group's span; one extra global
    // slack (own group) serves the cross-group constraints.
    let new_index = |old: usize| -> usize { old + prepared.var_group[old] };
    let mut aug = ConvexProgram::new();
    let mut slack_ids = vec![0usize; num_groups];
    {
        let mut next_group = 0usize;
        for (i, v) in prog.vars.iter().enumerate() {
            while next_group <= v.group {
                next_group += 1;
            }
            let _ = i;
            aug.add_var(v.name.clone(), v.lower, v.upper, v.group);
            let is_group_end = prog
                .vars
                .get(i + 1)
                .map_or(true, |nv| nv.group != v.group);
            if is_group_end {
                slack_ids[v.group] = aug.add_var(format!("s{}", v.group), -1e-3, f64::INFINITY, v.group);
            }
        }
    }
    let cross_slack = aug.add_var("s_cross", -1e-3, f64::INFINITY, num_groups);
    for g in 0..num_groups {
        if prepared.groups[g].len > 0 {
            aug.add_obj_linear(slack_ids[g], 1.0);
        }
    }
    aug.add_obj_linear(cross_slack, 1.0);

    let remap_affine = |a: &Affine| -> Affine {
        Affine {
            terms: a.terms.iter().map(|&(i, c)| (new_index(i), c)).collect(),
            constant: a.constant,
        }
    };
    for nc in &prepared.cons {
        let slack = if nc.local {
            slack_ids[nc.hess_group.unwrap_or(0)]
        } else {
            cross_slack
        };
        match &nc.con {
            Constraint::Linear { terms, rhs, label } => {
                let mut t: Vec<(usize, f64)> = terms.iter().map(|&(i, c)| (new_index(i), c)).collect();
                t.push((slack, -1.0));
                aug.add_linear(t, *rhs, label.clone());
            }
            Constraint::Quad { rows, bound, label } => {
                let rows = rows.iter().map(&remap_affine).collect();
                let mut bound = remap_affine(bound);
                bound.terms.push((slack, 1.0));
                aug.add_quad(rows, bound, label.clone());
            }
            Constraint::Exp2 { exponent, cap, label } => {
                let exponent = remap_affine(exponent);
                let mut cap = remap_affine(cap);
                cap.terms.push((slack, 1.0));
                aug.add_exp2(exponent, cap, label.clone());
            }
        }
    }

    let aug_prepared = prepare(&aug)?;
    let mut x = DVector::zeros(aug.num_vars());
    for i in 0..prepared.n {
        x[new_index(i)] = x0[i];
    }
    clip_into_bounds(&aug_prepared, &mut x);
    // Start slacks above the worst violation in their scope.
    let mut start_slack = vec![1.0f64; num_groups + 1];
    {
        let base: Vec<f64> = (0..prepared.n).map(|i| x[new_index(i)]).collect();
        for nc in &prepared.cons {
            let f = nc.con.eval(&base);
            let idx = if nc.local { nc.hess_group.unwrap_or(0) } else { num_groups };
            if f + 1.0 > start_slack[idx] {
                start_slack[idx] = f + 1.0;
            }
        }
    }
    for g in 0..num_groups {
        if prepared.groups[g].len > 0 {
            x[slack_ids[g]] = start_slack[g];
        }
    }
    x[cross_slack] = start_slack[num_groups];

    let opts = SolveOptions {
        opt_tol: 1e-9,
        max_iters: 400,
        ..SolveOptions::default()
    };
    let extract = |xa: &[f64]| -> Vec<f64> {
        (0..prepared.n).map(|i| xa[new_index(i)]).collect()
    };
    let mut done = |xa: &[f64]| -> bool {
        let inner = extract(xa);
        prepared.max_constraint_violation(&inner) <= -1e-7
    };
    let _ = barrier_minimize(&aug_prepared, &mut x, &opts, &mut done)?;
    let inner = extract(x.as_slice());
    if prepared.max_constraint_violation(&inner) < 0.0 && prepared.bounds_interior(&inner) {
        Ok(Some(DVector::from_vec(inner)))
    } else {
        Ok(None)
    }
}

/// Solves the program with the log-barrier interior method.
pub fn solve(prog: &ConvexProgram, opts: &SolveOptions) -> Result<Solution> {
    let prepared = prepare(prog)?;
    let n = prepared.n;
    if n == 0 {
        return Ok(Solution {
            values: vec![],
            objective_value: prepared.obj_constant,
            status: SolveStatus::Optimal,
            kkt_residual: 0.0,
            newton_iters: 0,
        });
    }

    let mut x = match &opts.initial {
        Some(v) => {
            if v.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "initial point has {} entries, program has {n}",
                    v.len()
                )));
            }
            DVector::from_vec(v.clone())
        }
        None => DVector::zeros(n),
    };
    clip_into_bounds(&prepared, &mut x);

    if !prepared.strictly_feasible(x.as_slice(), INTERIOR_MARGIN) {
        match phase1(prog, &prepared, &x)? {
            Some(feasible) => x = feasible,
            None => {
                return Ok(Solution {
                    values: x.as_slice().to_vec(),
                    objective_value: prepared.objective(&x),
                    status: SolveStatus::Infeasible,
                    kkt_residual: f64::INFINITY,
                    newton_iters: 0,
                })
            }
        }
    }

    let (status, iters, gap) = barrier_minimize(&prepared, &mut x, opts, &mut |_| false)?;
    let objective_value = prepared.objective(&x);
    let kkt_residual = gap / (1.0 + objective_value.abs());
    Ok(Solution {
        values: x.as_slice().to_vec(),
        objective_value,
        status,
        kkt_residual,
        newton_iters: iters,
    })
}

/// Residual report at an arbitrary point: primal violation, estimated dual
/// violation, stationarity, and complementarity gap.
pub fn check_kkt(prog: &ConvexProgram, point: &[f64]) -> Result<KktReport> {
    let prepared = prepare(prog)?;
    if point.len() != prepared.n {
        return Err(Error::DimensionMismatch(format!(
            "point has {} entries, program has {}",
            point.len(),
            prepared.n
        )));
    }
    let x = DVector::from_column_slice(point);
    let primal_violation = prepared.max_violation(point).max(0.0);

    // Objective gradient.
    let mut g0 = prepared.obj_linear.clone();
    for (w, row, _) in &prepared.obj_quads {
        let r = row.eval(point);
        for &(i, c) in &row.terms {
            g0[i] += 2.0 * w * r * c;
        }
    }

    // Active constraints (including bounds) and their gradients.
    let band = 1e-5;
    let mut grads: Vec<DVector<f64>> = Vec::new();
    let mut fvals: Vec<f64> = Vec::new();
    for nc in &prepared.cons {
        let f = nc.con.eval(point);
        if f >= -band {
            let mut gf = DVector::zeros(prepared.n);
            match &nc.con {
                Constraint::Linear { terms, .. } => {
                    for &(i, c) in terms {
                        gf[i] += c;
                    }
                }
                Constraint::Quad { rows, bound, .. } => {
                    for r in rows {
                        let rv = r.eval(point);
                        for &(i, c) in &r.terms {
                            gf[i] += 2.0 * rv * c;
                        }
                    }
                    for &(i, c) in &bound.terms {
                        gf[i] -= c;
                    }
                }
                Constraint::Exp2 { exponent, cap, .. } => {
                    let e = exponent.eval(point).exp2() * std::f64::consts::LN_2;
                    for &(i, c) in &exponent.terms {
                        gf[i] += e * c;
                    }
                    for &(i, c) in &cap.terms {
                        gf[i] -= c;
                    }
                }
            }
            grads.push(gf);
            fvals.push(f);
        }
    }
    for i in 0..prepared.n {
        if prepared.lowers[i].is_finite() && prepared.lowers[i] - x[i] >= -band {
            let mut gf = DVector::zeros(prepared.n);
            gf[i] = -1.0;
            grads.push(gf);
            fvals.push(prepared.lowers[i] - x[i]);
        }
        if prepared.uppers[i].is_finite() && x[i] - prepared.uppers[i] >= -band {
            let mut gf = DVector::zeros(prepared.n);
            gf[i] = 1.0;
            grads.push(gf);
            fvals.push(x[i] - prepared.uppers[i]);
        }
    }

    let g0_scale = g0.amax().max(1.0);
    if grads.is_empty() {
        return Ok(KktReport {
            primal_violation,
            dual_violation: 0.0,
            stationarity: g0.amax() / g0_scale,
            complementarity_gap: 0.0,
        });
    }

    let k = grads.len();
    let mut jt = DMatrix::zeros(prepared.n, k);
    for (c, gf) in grads.iter().enumerate() {
        jt.set_column(c, gf);
    }
    let svd = jt.clone().svd(true, true);
    let lambda_raw = svd.solve(&(-&g0), 1e-12).unwrap_or_else(|_| DVector::zeros(k));
    let dual_violation = lambda_raw.iter().fold(0.0f64, |acc, &l| acc.max(-l));
    let lambda: DVector<f64> = lambda_raw.map(|l| l.max(0.0));
    let resid = &g0 + &jt * &lambda;
    let stationarity = resid.amax() / g0_scale;
    let complementarity_gap = lambda
        .iter()
        .zip(fvals.iter())
        .map(|(&l, &f)| (l * f).abs())
        .fold(0.0, f64::max);
    Ok(KktReport { primal_violation, dual_violation, stationarity, complementarity_gap })
}
