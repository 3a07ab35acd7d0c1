//! Structured convex program description.
//!
//! A program owns named scalar variables with box bounds, an objective of the
//! form  c^T x + sum_j w_j (a_j^T x + b_j)^2,  and constraints drawn from
//! three classes:
//!
//! * linear:            a^T x <= b
//! * convex quadratic:  sum_i (r_i^T x + s_i)^2 <= a^T x + b
//! * power cone:        2^(e^T x + f) <= c^T x + d
//!
//! Variables may be assigned to groups. Constraints and objective terms whose
//! nonlinear part stays within a single group let the solver factor the
//! Newton system block-by-block; constraints spanning several groups must be
//! linear (their barrier Hessian is rank one and is handled by a low-rank
//! correction).

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Sparse affine form `terms . x + constant`.
#[derive(Debug, Clone, Default)]
pub struct Affine {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl Affine {
    pub fn new(terms: Vec<(usize, f64)>, constant: f64) -> Self {
        Self { terms, constant }
    }

    pub fn constant(c: f64) -> Self {
        Self { terms: Vec::new(), constant: c }
    }

    pub fn var(index: usize, coeff: f64) -> Self {
        Self { terms: vec![(index, coeff)], constant: 0.0 }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().fold(self.constant, |acc, &(i, c)| acc + c * x[i])
    }

    pub fn scale(&self, s: f64) -> Affine {
        Affine {
            terms: self.terms.iter().map(|&(i, c)| (i, c * s)).collect(),
            constant: self.constant * s,
        }
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.iter().map(|(_, c)| c.abs()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct VarDef {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub group: usize,
}

/// One inequality constraint, in `f(x) <= 0` convention after moving the
/// right-hand side over.
#[derive(Debug, Clone)]
pub enum Constraint {
    /// terms . x <= rhs
    Linear { terms: Vec<(usize, f64)>, rhs: f64, label: String },
    /// sum_i rows_i(x)^2 <= bound(x)
    Quad { rows: Vec<Affine>, bound: Affine, label: String },
    /// 2^(exponent(x)) <= cap(x)
    Exp2 { exponent: Affine, cap: Affine, label: String },
}

impl Constraint {
    pub fn label(&self) -> &str {
        match self {
            Constraint::Linear { label, .. }
            | Constraint::Quad { label, .. }
            | Constraint::Exp2 { label, .. } => label,
        }
    }

    /// Constraint residual f(x); feasible iff <= 0.
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Constraint::Linear { terms, rhs, .. } => {
                terms.iter().fold(-rhs, |acc, &(i, c)| acc + c * x[i])
            }
            Constraint::Quad { rows, bound, .. } => {
                rows.iter().map(|r| r.eval(x).powi(2)).sum::<f64>() - bound.eval(x)
            }
            Constraint::Exp2 { exponent, cap, .. } => exponent.eval(x).exp2() - cap.eval(x),
        }
    }

    pub fn touched_vars(&self) -> Vec<usize> {
        let mut vars = Vec::new();
        let push_affine = |a: &Affine, vars: &mut Vec<usize>| {
            vars.extend(a.terms.iter().map(|&(i, _)| i));
        };
        match self {
            Constraint::Linear { terms, .. } => vars.extend(terms.iter().map(|&(i, _)| i)),
            Constraint::Quad { rows, bound, .. } => {
                for r in rows {
                    push_affine(r, &mut vars);
                }
                push_affine(bound, &mut vars);
            }
            Constraint::Exp2 { exponent, cap, .. } => {
                push_affine(exponent, &mut vars);
                push_affine(cap, &mut vars);
            }
        }
        vars.sort_unstable();
        vars.dedup();
        vars
    }

    /// Variables appearing in the nonlinear part (quadratic rows / exponent).
    fn nonlinear_vars(&self) -> Vec<usize> {
        let mut vars = Vec::new();
        match self {
            Constraint::Linear { .. } => {}
            Constraint::Quad { rows, .. } => {
                for r in rows {
                    vars.extend(r.terms.iter().map(|&(i, _)| i));
                }
            }
            Constraint::Exp2 { exponent, .. } => {
                vars.extend(exponent.terms.iter().map(|&(i, _)| i));
            }
        }
        vars.sort_unstable();
        vars.dedup();
        vars
    }
}

/// Objective quadratic term `weight * row(x)^2`.
#[derive(Debug, Clone)]
pub struct QuadObjTerm {
    pub weight: f64,
    pub row: Affine,
}

#[derive(Debug, Clone, Default)]
pub struct ConvexProgram {
    pub vars: Vec<VarDef>,
    pub obj_linear: Vec<(usize, f64)>,
    pub obj_constant: f64,
    pub obj_quads: Vec<QuadObjTerm>,
    pub constraints: Vec<Constraint>,
}

impl ConvexProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, name: impl Into<String>, lower: f64, upper: f64, group: usize) -> usize {
        let id = self.vars.len();
        self.vars.push(VarDef { name: name.into(), lower, upper, group });
        id
    }

    pub fn num_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn num_groups(&self) -> usize {
        self.vars.iter().map(|v| v.group).max().map_or(0, |g| g + 1)
    }

    pub fn add_obj_linear(&mut self, var: usize, coeff: f64) {
        self.obj_linear.push((var, coeff));
    }

    pub fn add_obj_quad(&mut self, weight: f64, row: Affine) {
        if weight < 0.0 {
            panic!("objective quadratic weights must be nonnegative");
        }
        if weight > 0.0 {
            self.obj_quads.push(QuadObjTerm { weight, row });
        }
    }

    /// terms . x <= rhs
    pub fn add_linear(&mut self, terms: Vec<(usize, f64)>, rhs: f64, label: impl Into<String>) {
        self.constraints.push(Constraint::Linear { terms, rhs, label: label.into() });
    }

    /// lhs(x) >= rhs(x), stored as rhs - lhs <= 0.
    pub fn add_linear_ge(&mut self, lhs: Vec<(usize, f64)>, rhs: f64, label: impl Into<String>) {
        let terms = lhs.into_iter().map(|(i, c)| (i, -c)).collect();
        self.add_linear(terms, -rhs, label);
    }

    /// sum rows_i(x)^2 <= bound(x)
    pub fn add_quad(&mut self, rows: Vec<Affine>, bound: Affine, label: impl Into<String>) {
        self.constraints.push(Constraint::Quad { rows, bound, label: label.into() });
    }

    /// 2^(exponent(x)) <= cap(x)
    pub fn add_exp2(&mut self, exponent: Affine, cap: Affine, label: impl Into<String>) {
        self.constraints.push(Constraint::Exp2 { exponent, cap, label: label.into() });
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut v = self.obj_constant;
        for &(i, c) in &self.obj_linear {
            v += c * x[i];
        }
        for q in &self.obj_quads {
            let r = q.row.eval(x);
            v += q.weight * r * r;
        }
        v
    }

    /// Worst residuals at `x` by constraint label, most violated first.
    pub fn worst_constraints(&self, x: &[f64], n: usize) -> Vec<(String, f64)> {
        let mut worst: Vec<(String, f64)> = self
            .constraints
            .iter()
            .map(|c| (c.label().to_string(), c.eval(x)))
            .collect();
        for (i, v) in self.vars.iter().enumerate() {
            worst.push((format!("lb:{}", v.name), v.lower - x[i]));
            worst.push((format!("ub:{}", v.name), x[i] - v.upper));
        }
        worst.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        worst.truncate(n);
        worst
    }

    /// Largest constraint violation at `x` (0 when feasible), including box
    /// bounds.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for c in &self.constraints {
            worst = worst.max(c.eval(x));
        }
        for (i, v) in self.vars.iter().enumerate() {
            worst = worst.max(v.lower - x[i]);
            worst = worst.max(x[i] - v.upper);
        }
        worst
    }

    /// Checks structural invariants: variable references in range, groups of
    /// each variable contiguous, nonlinear parts confined to one group.
    pub fn validate(&self) -> Result<()> {
        let n = self.vars.len();
        for v in &self.vars {
            if v.lower > v.upper {
                return Err(Error::InvalidConfig(format!("variable {} has empty bounds", v.name)));
            }
        }
        // Groups must occupy contiguous index ranges.
        let mut seen_end = vec![false; self.num_groups()];
        let mut current = usize::MAX;
        for v in &self.vars {
            if v.group != current {
                if v.group < self.vars.len() && seen_end.get(v.group).copied().unwrap_or(false) {
                    return Err(Error::InvalidConfig(format!(
                        "variable group {} is not contiguous",
                        v.group
                    )));
                }
                if current != usize::MAX {
                    seen_end[current] = true;
                }
                current = v.group;
            }
        }
        let check_affine = |a: &Affine| -> Result<()> {
            for &(i, _) in &a.terms {
                if i >= n {
                    return Err(Error::InvalidConfig(format!("variable index {i} out of range")));
                }
            }
            Ok(())
        };
        for q in &self.obj_quads {
            check_affine(&q.row)?;
            let groups = groups_of(&q.row.terms, &self.vars);
            if groups.len() > 1 {
                return Err(Error::InvalidConfig(
                    "objective quadratic term spans several variable groups".into(),
                ));
            }
        }
        for &(i, _) in &self.obj_linear {
            if i >= n {
                return Err(Error::InvalidConfig(format!("variable index {i} out of range")));
            }
        }
        for c in &self.constraints {
            for i in c.touched_vars() {
                if i >= n {
                    return Err(Error::InvalidConfig(format!(
                        "constraint {} references unknown variable {i}",
                        c.label()
                    )));
                }
            }
            let nl = c.nonlinear_vars();
            if !nl.is_empty() {
                let mut gs: Vec<usize> = nl.iter().map(|&i| self.vars[i].group).collect();
                gs.sort_unstable();
                gs.dedup();
                if gs.len() > 1 {
                    return Err(Error::InvalidConfig(format!(
                        "nonlinear constraint {} spans groups {:?}; cross-group constraints must be linear",
                        c.label(),
                        gs
                    )));
                }
            }
        }
        Ok(())
    }

    /// Plain-text dump of variables and constraints, one per line, for
    /// diffing programs across runs.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, v) in self.vars.iter().enumerate() {
            let _ = writeln!(out, "var {i} {} in [{}, {}] group {}", v.name, v.lower, v.upper, v.group);
        }
        let fmt_affine = |a: &Affine| -> String {
            let mut s = String::new();
            for (i, c) in &a.terms {
                let _ = write!(s, "{c:+}*x{i} ");
            }
            let _ = write!(s, "{:+}", a.constant);
            s
        };
        let _ = writeln!(
            out,
            "objective: linear {:?} const {} quads {}",
            self.obj_linear,
            self.obj_constant,
            self.obj_quads.len()
        );
        for c in &self.constraints {
            match c {
                Constraint::Linear { terms, rhs, label } => {
                    let _ = writeln!(out, "linear [{label}] {terms:?} <= {rhs}");
                }
                Constraint::Quad { rows, bound, label } => {
                    let rows_s: Vec<String> = rows.iter().map(fmt_affine).collect();
                    let _ = writeln!(out, "quad [{label}] sum sq({}) <= {}", rows_s.join(" | "), fmt_affine(bound));
                }
                Constraint::Exp2 { exponent, cap, label } => {
                    let _ = writeln!(out, "exp2 [{label}] 2^({}) <= {}", fmt_affine(exponent), fmt_affine(cap));
                }
            }
        }
        out
    }
}

pub(crate) fn groups_of(terms: &[(usize, f64)], vars: &[VarDef]) -> Vec<usize> {
    let mut gs: Vec<usize> = terms.iter().map(|&(i, _)| vars[i].group).collect();
    gs.sort_unstable();
    gs.dedup();
    gs
}
