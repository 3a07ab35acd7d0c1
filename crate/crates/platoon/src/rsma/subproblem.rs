//! Assembly of the per-iteration convex subproblem.
//!
//! The builder works on a nondimensionalized copy of the instance: precoders
//! are scaled by 1/sqrt(P_t), channels become g = h sqrt(P_t)/sigma (so noise
//! power is 1), rates are in bits/s/Hz, the SINR chain variables are scaled
//! by per-receiver caps 1 + ||g||^2, and the latency bound by T. This keeps
//! every solver variable O(1) across the twelve decades spanned by the
//! physical quantities.

use num_complex::Complex64;

use crate::channel::{ChannelVector, PrecoderMatrix};
use crate::convex::{Affine, ConvexProgram};
use crate::error::{Error, Result};

use super::{
    minorant_bilinear, minorant_qol, DownlinkSpec, DownlinkVariables, Scheme,
};

const DELTA: f64 = 1e-6;
const TINY: f64 = 1e-9;
/// Fraction of the achievable rate given up when constructing interior
/// points; keeps the SINR-chain constraints comfortably slack.
const RATE_BACKOFF: f64 = 1e-3;

/// One SIC decoding chain: `receiver` decodes the private message of user
/// `msg` while the private streams in `interferers` are still present.
#[derive(Debug, Clone)]
pub(crate) struct Chain {
    pub receiver: usize,
    pub msg: usize,
    pub interferers: Vec<usize>,
}

/// Nondimensionalized instance data.
#[derive(Debug, Clone)]
pub(crate) struct Scaled {
    pub scheme: Scheme,
    pub users: usize,
    pub slots: usize,
    pub antennas: usize,
    /// Effective channels g[k][t] with unit noise power.
    pub g: Vec<Vec<Vec<Complex64>>>,
    pub g_norm_sq: Vec<Vec<f64>>,
    /// 1 + ||g||^2 per user per slot.
    pub cap: Vec<Vec<f64>>,
    /// Global spectral-rate bound used for variable boxes.
    pub r_max: f64,
    /// QoS in bits/s/Hz.
    pub r_th: f64,
    /// Payload in spectral slot units B0 / (B dt).
    pub b0: f64,
    pub sigma: f64,
    pub power: f64,
    /// User indices ordered by descending channel norm (NOMA SIC order).
    pub sic: Vec<usize>,
    /// Private decoding chains.
    pub chains: Vec<Chain>,
}

impl Scaled {
    pub fn new(spec: &DownlinkSpec, scheme: Scheme) -> Result<Self> {
        spec.validate()?;
        let users = spec.radio.users;
        let slots = spec.slots;
        let sigma = spec.radio.noise_power()?;
        let power = spec.radio.power;
        let amp = power.sqrt() / sigma.sqrt();
        let mut g = Vec::with_capacity(users);
        let mut g_norm_sq = Vec::with_capacity(users);
        let mut cap = Vec::with_capacity(users);
        for k in 0..users {
            let mut row = Vec::with_capacity(slots);
            let mut row_n = Vec::with_capacity(slots);
            let mut row_c = Vec::with_capacity(slots);
            for t in 0..slots {
                let gk: Vec<Complex64> =
                    spec.channels[k][t].coefficients.iter().map(|h| h * amp).collect();
                let n: f64 = gk.iter().map(|c| c.norm_sqr()).sum();
                row.push(gk);
                row_n.push(n);
                row_c.push(1.0 + n);
            }
            g.push(row);
            g_norm_sq.push(row_n);
            cap.push(row_c);
        }
        let r_max = g_norm_sq
            .iter()
            .flatten()
            .map(|&n| (1.0 + n).log2())
            .fold(0.0, f64::max)
            + 1.0;

        // SIC order: descending channel norm at slot 0, ties by index.
        let mut sic: Vec<usize> = (0..users).collect();
        sic.sort_by(|&a, &b| {
            g_norm_sq[b][0]
                .partial_cmp(&g_norm_sq[a][0])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });

        let chains = match scheme {
            Scheme::Rsma | Scheme::Mulp => (0..users)
                .map(|k| Chain {
                    receiver: k,
                    msg: k,
                    interferers: (0..users).filter(|&i| i != k).collect(),
                })
                .collect(),
            Scheme::Noma => {
                let mut chains = Vec::new();
                for i in 0..users {
                    for j in i..users {
                        chains.push(Chain {
                            receiver: sic[i],
                            msg: sic[j],
                            interferers: sic[..j].to_vec(),
                        });
                    }
                }
                chains
            }
        };

        Ok(Self {
            scheme,
            users,
            slots,
            antennas: spec.radio.antennas,
            g,
            g_norm_sq,
            cap,
            r_max,
            r_th: spec.qos_rate / spec.radio.bandwidth,
            b0: spec.payload_bits / (spec.radio.bandwidth * spec.dt),
            sigma,
            power,
            sic,
            chains,
        })
    }

    pub fn streams(&self) -> usize {
        match self.scheme {
            Scheme::Rsma | Scheme::Mulp => self.users + 1,
            Scheme::Noma => self.users,
        }
    }

    pub fn psi_rows(&self) -> usize {
        match self.scheme {
            Scheme::Rsma | Scheme::Mulp => 1,
            Scheme::Noma => self.users,
        }
    }

    /// Stream index of user k's private precoder.
    pub fn private_stream(&self, k: usize) -> usize {
        match self.scheme {
            Scheme::Rsma | Scheme::Mulp => k + 1,
            Scheme::Noma => k,
        }
    }

    fn chain_cap(&self, chain: &Chain, t: usize) -> f64 {
        self.cap[chain.receiver][t]
    }

    /// |g_recv^H p|^2 for a scaled precoder.
    fn gain(&self, recv: usize, t: usize, p: &[Complex64]) -> f64 {
        inner(&self.g[recv][t], p).norm_sqr()
    }
}

fn inner(g: &[Complex64], p: &[Complex64]) -> Complex64 {
    g.iter().zip(p.iter()).map(|(a, b)| a.conj() * b).sum()
}

/// Variable indices of one slot (into the flat solver vector).
#[derive(Debug, Clone)]
pub(crate) struct SlotVars {
    pub psi: Vec<usize>,
    pub omega: Vec<usize>,
    pub c0: Option<usize>,
    pub c: Vec<usize>,
    /// Start of the 2M-long (re, im interleaved) block per stream.
    pub p: Vec<usize>,
    pub a: Vec<usize>,
    pub a_c: Vec<usize>,
    pub theta: Vec<usize>,
    pub xi: Vec<usize>,
    pub theta_c: Vec<usize>,
    pub xi_c: Vec<usize>,
    pub s: Vec<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub slots: Vec<SlotVars>,
    pub phi: usize,
}

/// Builds variables (bounds + groups) for every slot plus the shared latency
/// bound.
fn build_layout(prog: &mut ConvexProgram, sc: &Scaled) -> Layout {
    let mut slots = Vec::with_capacity(sc.slots);
    let two_m = 2 * sc.antennas;
    for t in 0..sc.slots {
        let group = t;
        let mut sv = SlotVars {
            psi: Vec::new(),
            omega: Vec::new(),
            c0: None,
            c: Vec::new(),
            p: Vec::new(),
            a: Vec::new(),
            a_c: Vec::new(),
            theta: Vec::new(),
            xi: Vec::new(),
            theta_c: Vec::new(),
            xi_c: Vec::new(),
            s: Vec::new(),
        };
        for r in 0..sc.psi_rows() {
            sv.psi.push(prog.add_var(format!("psi{r}_{t}"), 0.0, 1.0, group));
        }
        for r in 0..sc.psi_rows() {
            sv.omega.push(prog.add_var(format!("omega{r}_{t}"), 0.0, sc.r_max, group));
        }
        if matches!(sc.scheme, Scheme::Rsma | Scheme::Mulp) {
            sv.c0 = Some(prog.add_var(format!("c0_{t}"), 0.0, sc.r_max, group));
        }
        if sc.scheme == Scheme::Rsma {
            for k in 0..sc.users {
                sv.c.push(prog.add_var(format!("c{k}_{t}"), 0.0, sc.r_max, group));
            }
        }
        for s in 0..sc.streams() {
            let start = prog.num_vars();
            for m in 0..sc.antennas {
                prog.add_var(format!("p{s}re{m}_{t}"), -1.05, 1.05, group);
                prog.add_var(format!("p{s}im{m}_{t}"), -1.05, 1.05, group);
            }
            let _ = two_m;
            sv.p.push(start);
        }
        for k in 0..sc.users {
            sv.a.push(prog.add_var(format!("a{k}_{t}"), -45.0, sc.r_max, group));
        }
        for (i, _) in sc.chains.iter().enumerate() {
            sv.theta.push(prog.add_var(format!("th{i}_{t}"), 0.0, 1.05, group));
        }
        for (i, ch) in sc.chains.iter().enumerate() {
            let lo = 0.4 / sc.chain_cap(ch, t);
            sv.xi.push(prog.add_var(format!("xi{i}_{t}"), lo, 1.05, group));
        }
        if matches!(sc.scheme, Scheme::Rsma | Scheme::Mulp) {
            for k in 0..sc.users {
                sv.a_c.push(prog.add_var(format!("ac{k}_{t}"), 0.0, sc.r_max, group));
            }
            for k in 0..sc.users {
                sv.theta_c.push(prog.add_var(format!("thc{k}_{t}"), 0.0, 1.05, group));
            }
            for k in 0..sc.users {
                let lo = 0.4 / sc.cap[k][t];
                sv.xi_c.push(prog.add_var(format!("xic{k}_{t}"), lo, 1.05, group));
            }
        }
        for k in 0..sc.users {
            sv.s.push(prog.add_var(format!("s{k}_{t}"), 0.0, 1.05, group));
        }
        slots.push(sv);
    }
    let phi = prog.add_var("phi", 0.0, 1.1, sc.slots);
    Layout { slots, phi }
}

/// Two affine rows (real and imaginary parts) of g^H p over the interleaved
/// precoder block starting at `p_start`.
fn gain_rows(g: &[Complex64], p_start: usize) -> [Affine; 2] {
    let m = g.len();
    let mut re = Vec::with_capacity(2 * m);
    let mut im = Vec::with_capacity(2 * m);
    for (j, gj) in g.iter().enumerate() {
        // (g^H p)_re = sum Re(g) Re(p) + Im(g) Im(p)
        re.push((p_start + 2 * j, gj.re));
        re.push((p_start + 2 * j + 1, gj.im));
        // (g^H p)_im = sum Re(g) Im(p) - Im(g) Re(p)
        im.push((p_start + 2 * j, -gj.im));
        im.push((p_start + 2 * j + 1, gj.re));
    }
    [Affine::new(re, 0.0), Affine::new(im, 0.0)]
}

fn scaled_precoder(p: &[Complex64], power: f64) -> Vec<Complex64> {
    let s = 1.0 / power.sqrt();
    p.iter().map(|c| c * s).collect()
}

/// Builds the convex subproblem linearized around `current`.
pub(crate) fn build(
    spec: &DownlinkSpec,
    sc: &Scaled,
    current: &DownlinkVariables,
) -> Result<(ConvexProgram, Layout)> {
    let mut prog = ConvexProgram::new();
    let layout = build_layout(&mut prog, sc);
    let t_slots = sc.slots as f64;

    for t in 0..sc.slots {
        let sv = &layout.slots[t];

        // Latency coupling: psi * (t+1)/T <= phi.
        for &psi in &sv.psi {
            prog.add_linear(
                vec![(psi, (t + 1) as f64 / t_slots), (layout.phi, -1.0)],
                0.0,
                "latency",
            );
        }

        // Per-slot transmit power: sum of squared precoder entries <= 1.
        let mut rows = Vec::new();
        for &start in &sv.p {
            for idx in 0..2 * sc.antennas {
                rows.push(Affine::var(start + idx, 1.0));
            }
        }
        prog.add_quad(rows, Affine::constant(1.0), "power");

        // Payload-rate minorant: Omega(psi, rate) >= omega.
        for (row, &omega) in sv.omega.iter().enumerate() {
            let (psi_n, rate_n, rate_var) = match sc.scheme {
                Scheme::Rsma | Scheme::Mulp => (
                    current.psi[0][t],
                    current.c0[t] / spec.radio.bandwidth,
                    sv.c0.unwrap(),
                ),
                Scheme::Noma => (
                    current.psi[row][t],
                    current.alpha[row][t] / spec.radio.bandwidth,
                    sv.a[row],
                ),
            };
            let m = minorant_bilinear(psi_n, rate_n);
            prog.add_linear_ge(
                vec![
                    (sv.psi[row], m.coef_psi),
                    (rate_var, m.coef_c0),
                    (omega, -1.0),
                ],
                -m.constant,
                "omega_cap",
            );
            // McCormick upper envelope of psi * rate over its box; valid for
            // the original bilinear constraint and keeps the tangent from
            // leaking payload through inactive slots.
            prog.add_linear(vec![(omega, 1.0), (sv.psi[row], -sc.r_max)], 0.0, "omega_psi");
            prog.add_linear(vec![(omega, 1.0), (rate_var, -1.0)], 0.0, "omega_rate");
        }

        // QoS splits.
        for k in 0..sc.users {
            match sc.scheme {
                Scheme::Rsma => {
                    prog.add_linear_ge(vec![(sv.c[k], 1.0), (sv.a[k], 1.0)], sc.r_th, "qos");
                }
                Scheme::Mulp | Scheme::Noma => {
                    prog.add_linear_ge(vec![(sv.a[k], 1.0)], sc.r_th, "qos");
                }
            }
        }

        // Private decoding chains.
        for (ci, chain) in sc.chains.iter().enumerate() {
            let cap = sc.chain_cap(chain, t);
            let theta = sv.theta[ci];
            let xi = sv.xi[ci];
            // 2^a <= cap * theta_hat.
            prog.add_exp2(
                Affine::var(sv.a[chain.msg], 1.0),
                Affine::var(theta, cap),
                "p_cone",
            );
            // Psi minorant >= cap * theta_hat - 1.
            let p_n = scaled_precoder(
                &current.precoders[t].private[chain.msg],
                sc.power,
            );
            let xi_n = chain_xi_scaled(current, sc, ci, t);
            let q = minorant_qol(
                &p_n,
                xi_n,
                &ChannelVector { coefficients: sc.g[chain.receiver][t].clone() },
            )?;
            let p_start = sv.p[sc.private_stream(chain.msg)];
            let mut terms = Vec::with_capacity(2 * sc.antennas + 2);
            for (j, a) in q.coef_p.iter().enumerate() {
                terms.push((p_start + 2 * j, a.re));
                terms.push((p_start + 2 * j + 1, a.im));
            }
            terms.push((xi, q.coef_xi * cap));
            terms.push((theta, -cap));
            prog.add_linear_ge(terms, -1.0, "psi_lin");
            // Interference epigraph: sum |g^H p_i|^2 + 1 <= cap * xi_hat.
            let mut rows = Vec::new();
            for &i in &chain.interferers {
                let [re, im] = gain_rows(&sc.g[chain.receiver][t], sv.p[sc.private_stream(i)]);
                rows.push(re);
                rows.push(im);
            }
            prog.add_quad(rows, Affine::new(vec![(xi, cap)], -1.0), "xi_epi");
        }

        // Common-stream chains (RSMA / MU-LP only).
        if matches!(sc.scheme, Scheme::Rsma | Scheme::Mulp) {
            let c0 = sv.c0.unwrap();
            for k in 0..sc.users {
                let cap = sc.cap[k][t];
                // c0 + sum_j c_j <= a^c_k.
                let mut terms = vec![(c0, 1.0)];
                for &cj in &sv.c {
                    terms.push((cj, 1.0));
                }
                terms.push((sv.a_c[k], -1.0));
                prog.add_linear(terms, 0.0, "c_sum");
                prog.add_exp2(
                    Affine::var(sv.a_c[k], 1.0),
                    Affine::var(sv.theta_c[k], cap),
                    "pc_cone",
                );
                let p_n = scaled_precoder(&current.precoders[t].common, sc.power);
                let xi_n = current.xi_c[k][t] / sc.sigma;
                let q = minorant_qol(
                    &p_n,
                    xi_n,
                    &ChannelVector { coefficients: sc.g[k][t].clone() },
                )?;
                let p_start = sv.p[0];
                let mut terms = Vec::with_capacity(2 * sc.antennas + 2);
                for (j, a) in q.coef_p.iter().enumerate() {
                    terms.push((p_start + 2 * j, a.re));
                    terms.push((p_start + 2 * j + 1, a.im));
                }
                terms.push((sv.xi_c[k], q.coef_xi * cap));
                terms.push((sv.theta_c[k], -cap));
                prog.add_linear_ge(terms, -1.0, "psic_lin");
                let mut rows = Vec::new();
                for i in 0..sc.users {
                    let [re, im] = gain_rows(&sc.g[k][t], sv.p[sc.private_stream(i)]);
                    rows.push(re);
                    rows.push(im);
                }
                prog.add_quad(rows, Affine::new(vec![(sv.xi_c[k], cap)], -1.0), "xic_epi");
            }
        }

        // ||p_k||^2 <= s_k epigraphs feeding the CSIT penalty.
        for k in 0..sc.users {
            let p_start = sv.p[sc.private_stream(k)];
            let rows = (0..2 * sc.antennas)
                .map(|idx| Affine::var(p_start + idx, 1.0))
                .collect();
            prog.add_quad(rows, Affine::var(sv.s[k], 1.0), "s_epi");
            let coef = spec.weight_csit
                * spec.epsilons[k][t].powi(2)
                * spec.channels[k][t].norm_sq()
                * sc.power
                * sc.power;
            prog.add_obj_quad(coef, Affine::var(sv.s[k], 1.0));
        }
    }

    // Payload coupling per stream row: sum_t omega >= b0.
    for row in 0..sc.psi_rows() {
        let terms: Vec<(usize, f64)> = (0..sc.slots)
            .map(|t| (layout.slots[t].omega[row], 1.0))
            .collect();
        prog.add_linear_ge(terms, sc.b0, "payload");
    }

    // Objective: Q_t * T * phi_hat (+ the quadratic CSIT terms added above).
    prog.add_obj_linear(layout.phi, spec.weight_latency * t_slots);

    Ok((prog, layout))
}

/// Public wrapper returning just the program.
pub fn build_subproblem(
    spec: &DownlinkSpec,
    scheme: Scheme,
    current: &DownlinkVariables,
) -> Result<ConvexProgram> {
    let sc = Scaled::new(spec, scheme)?;
    Ok(build(spec, &sc, current)?.0)
}

/// Scaled xi value (noise-normalized) of one chain at one slot.
fn chain_xi_scaled(current: &DownlinkVariables, sc: &Scaled, chain_idx: usize, t: usize) -> f64 {
    current.xi[chain_idx][t] / sc.sigma
}

/// Flattens a physical point into the solver's scaled variable vector.
pub(crate) fn initial_vector(layout: &Layout, sc: &Scaled, point: &DownlinkVariables, spec: &DownlinkSpec) -> Vec<f64> {
    let mut x = vec![0.0; layout.phi + 1];
    for (t, sv) in layout.slots.iter().enumerate() {
        for (r, &id) in sv.psi.iter().enumerate() {
            x[id] = point.psi[r][t];
        }
        for (r, &id) in sv.omega.iter().enumerate() {
            x[id] = point.omega[r][t] / spec.radio.bandwidth;
        }
        if let Some(id) = sv.c0 {
            x[id] = point.c0[t] / spec.radio.bandwidth;
        }
        for (k, &id) in sv.c.iter().enumerate() {
            x[id] = point.c[k][t] / spec.radio.bandwidth;
        }
        for (s, &start) in sv.p.iter().enumerate() {
            let p = if matches!(sc.scheme, Scheme::Rsma | Scheme::Mulp) && s == 0 {
                &point.precoders[t].common
            } else {
                let k = if matches!(sc.scheme, Scheme::Rsma | Scheme::Mulp) { s - 1 } else { s };
                &point.precoders[t].private[k]
            };
            let scale = 1.0 / sc.power.sqrt();
            for (j, c) in p.iter().enumerate() {
                x[start + 2 * j] = c.re * scale;
                x[start + 2 * j + 1] = c.im * scale;
            }
        }
        for (k, &id) in sv.a.iter().enumerate() {
            x[id] = point.alpha[k][t] / spec.radio.bandwidth;
        }
        for (ci, &id) in sv.theta.iter().enumerate() {
            x[id] = point.theta[ci][t] / sc.chain_cap(&sc.chains[ci], t);
        }
        for (ci, &id) in sv.xi.iter().enumerate() {
            x[id] = point.xi[ci][t] / (sc.sigma * sc.chain_cap(&sc.chains[ci], t));
        }
        for (k, &id) in sv.a_c.iter().enumerate() {
            x[id] = point.alpha_c[k][t] / spec.radio.bandwidth;
        }
        for (k, &id) in sv.theta_c.iter().enumerate() {
            x[id] = point.theta_c[k][t] / sc.cap[k][t];
        }
        for (k, &id) in sv.xi_c.iter().enumerate() {
            x[id] = point.xi_c[k][t] / (sc.sigma * sc.cap[k][t]);
        }
        for (k, &id) in sv.s.iter().enumerate() {
            x[id] = point.s[k][t] / sc.power;
        }
    }
    x[layout.phi] = point.latency_bound / sc.slots as f64;
    x
}

/// Converts a solver vector back into physical units.
pub(crate) fn extract(
    layout: &Layout,
    sc: &Scaled,
    spec: &DownlinkSpec,
    x: &[f64],
) -> DownlinkVariables {
    let b = spec.radio.bandwidth;
    let users = sc.users;
    let slots = sc.slots;
    let mut vars = DownlinkVariables {
        scheme: sc.scheme,
        psi: vec![vec![0.0; slots]; sc.psi_rows()],
        precoders: Vec::with_capacity(slots),
        c0: vec![0.0; slots],
        c: vec![vec![0.0; slots]; if sc.scheme == Scheme::Rsma { users } else { 0 }],
        alpha: vec![vec![0.0; slots]; users],
        theta: vec![vec![0.0; slots]; sc.chains.len()],
        xi: vec![vec![0.0; slots]; sc.chains.len()],
        alpha_c: vec![vec![0.0; slots]; if sc.scheme == Scheme::Noma { 0 } else { users }],
        theta_c: vec![vec![0.0; slots]; if sc.scheme == Scheme::Noma { 0 } else { users }],
        xi_c: vec![vec![0.0; slots]; if sc.scheme == Scheme::Noma { 0 } else { users }],
        omega: vec![vec![0.0; slots]; sc.psi_rows()],
        s: vec![vec![0.0; slots]; users],
        latency_bound: x[layout.phi] * slots as f64,
    };
    let amp = sc.power.sqrt();
    for (t, sv) in layout.slots.iter().enumerate() {
        for (r, &id) in sv.psi.iter().enumerate() {
            vars.psi[r][t] = x[id];
        }
        for (r, &id) in sv.omega.iter().enumerate() {
            vars.omega[r][t] = x[id] * b;
        }
        if let Some(id) = sv.c0 {
            vars.c0[t] = x[id] * b;
        }
        for (k, &id) in sv.c.iter().enumerate() {
            vars.c[k][t] = x[id] * b;
        }
        let read_p = |start: usize| -> Vec<Complex64> {
            (0..sc.antennas)
                .map(|j| Complex64::new(x[start + 2 * j] * amp, x[start + 2 * j + 1] * amp))
                .collect()
        };
        let (common, priv_start) = if matches!(sc.scheme, Scheme::Rsma | Scheme::Mulp) {
            (read_p(sv.p[0]), 1)
        } else {
            (vec![Complex64::new(0.0, 0.0); sc.antennas], 0)
        };
        let privates: Vec<Vec<Complex64>> =
            (0..users).map(|k| read_p(sv.p[k + priv_start])).collect();
        vars.precoders
            .push(PrecoderMatrix::new(common, privates).expect("precoder dims"));
        for (k, &id) in sv.a.iter().enumerate() {
            vars.alpha[k][t] = x[id] * b;
        }
        for (ci, &id) in sv.theta.iter().enumerate() {
            vars.theta[ci][t] = x[id] * sc.chain_cap(&sc.chains[ci], t);
        }
        for (ci, &id) in sv.xi.iter().enumerate() {
            vars.xi[ci][t] = x[id] * sc.sigma * sc.chain_cap(&sc.chains[ci], t);
        }
        for (k, &id) in sv.a_c.iter().enumerate() {
            vars.alpha_c[k][t] = x[id] * b;
        }
        for (k, &id) in sv.theta_c.iter().enumerate() {
            vars.theta_c[k][t] = x[id] * sc.cap[k][t];
        }
        for (k, &id) in sv.xi_c.iter().enumerate() {
            vars.xi_c[k][t] = x[id] * sc.sigma * sc.cap[k][t];
        }
        for (k, &id) in sv.s.iter().enumerate() {
            vars.s[k][t] = x[id] * sc.power;
        }
    }
    vars
}

/// Constructs a strictly feasible point. With `seed = None` this is the
/// Algorithm-2 initialization (feasible precoder, C_0 = R^c, C_k = 0 up to a
/// QoS repair); with a seed it pulls an SCA iterate back into the interior so
/// the next subproblem can start from it.
pub(crate) fn interior_point(
    spec: &DownlinkSpec,
    sc: &Scaled,
    seed: Option<&DownlinkVariables>,
) -> Result<DownlinkVariables> {
    let users = sc.users;
    let slots = sc.slots;
    let b = spec.radio.bandwidth;

    let mut vars = DownlinkVariables {
        scheme: sc.scheme,
        psi: vec![vec![1.0 - DELTA; slots]; sc.psi_rows()],
        precoders: Vec::with_capacity(slots),
        c0: vec![0.0; slots],
        c: vec![vec![0.0; slots]; if sc.scheme == Scheme::Rsma { users } else { 0 }],
        alpha: vec![vec![0.0; slots]; users],
        theta: vec![vec![0.0; slots]; sc.chains.len()],
        xi: vec![vec![0.0; slots]; sc.chains.len()],
        alpha_c: vec![vec![0.0; slots]; if sc.scheme == Scheme::Noma { 0 } else { users }],
        theta_c: vec![vec![0.0; slots]; if sc.scheme == Scheme::Noma { 0 } else { users }],
        xi_c: vec![vec![0.0; slots]; if sc.scheme == Scheme::Noma { 0 } else { users }],
        omega: vec![vec![0.0; slots]; sc.psi_rows()],
        s: vec![vec![0.0; slots]; users],
        latency_bound: 0.0,
    };

    for t in 0..slots {
        // Scaled precoders for this slot.
        let p_tilde: Vec<Vec<Complex64>> = match seed {
            Some(v) => {
                let total = v.precoders[t].total_power();
                let shrink = if total > 0.0 {
                    ((1.0 - 1e-3) * sc.power / total).sqrt().min(1.0) * (1.0 - TINY)
                } else {
                    1.0
                };
                let mut all = Vec::new();
                if matches!(sc.scheme, Scheme::Rsma | Scheme::Mulp) {
                    all.push(scaled_precoder(&v.precoders[t].common, sc.power / (shrink * shrink)));
                }
                for k in 0..users {
                    all.push(scaled_precoder(&v.precoders[t].private[k], sc.power / (shrink * shrink)));
                }
                all
            }
            None => {
                let mut all = Vec::new();
                let dirs: Vec<Vec<Complex64>> = (0..users)
                    .map(|k| {
                        let g = &sc.g[k][t];
                        let n = sc.g_norm_sq[k][t].sqrt().max(1e-300);
                        g.iter().map(|c| c / n).collect()
                    })
                    .collect();
                if matches!(sc.scheme, Scheme::Rsma | Scheme::Mulp) {
                    // Private streams get just enough power for the QoS
                    // target (with headroom); the common stream carries the
                    // payload and receives the rest.
                    let gamma_th = sc.r_th.exp2() - 1.0;
                    let mut rho = 0.45 / users as f64;
                    let margin = 1.0 - gamma_th * (users as f64 - 1.0);
                    if margin > 0.0 {
                        let g_min = sc
                            .g_norm_sq
                            .iter()
                            .map(|row| row[t])
                            .fold(f64::INFINITY, f64::min)
                            .max(1e-300);
                        let need = 2.0 * gamma_th / (g_min * margin);
                        rho = need.clamp(1e-6 * 0.9 / users as f64, 0.45 / users as f64);
                    }
                    let common_power = 0.9 - rho * users as f64;
                    let mut mean = vec![Complex64::new(0.0, 0.0); sc.antennas];
                    for d in &dirs {
                        for (m, c) in d.iter().enumerate() {
                            mean[m] += c;
                        }
                    }
                    let n: f64 = mean.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt().max(1e-300);
                    let share = common_power.sqrt();
                    all.push(mean.iter().map(|c| c / n * share).collect());
                    let share = rho.sqrt();
                    for d in &dirs {
                        all.push(d.iter().map(|c| c * share).collect());
                    }
                } else {
                    // Every follower must carry the payload over its own
                    // private stream, so size the SIC power cascade from the
                    // rate each message needs: position j sees the messages
                    // of positions j' < j as interference at every receiver
                    // i <= j.
                    let per_slot = sc.b0 / sc.slots as f64;
                    let mut powers = noma_power_cascade(sc, t, (per_slot * 1.1).max(sc.r_th * 1.2));
                    let total: f64 = powers.iter().sum();
                    if total > 0.9 {
                        powers = noma_power_cascade(sc, t, sc.r_th * 1.2);
                    }
                    let total: f64 = powers.iter().sum();
                    if total > 0.9 {
                        let s = 0.9 / total;
                        for p in &mut powers {
                            *p *= s;
                        }
                    }
                    for k in 0..users {
                        let pos = sc.sic.iter().position(|&u| u == k).unwrap();
                        all.push(dirs[k].iter().map(|c| c * powers[pos].sqrt()).collect());
                    }
                }
                all
            }
        };

        // Seeded schedule mask pulled into the open interval.
        if let Some(v) = seed {
            for r in 0..sc.psi_rows() {
                vars.psi[r][t] = v.psi[r][t].clamp(1e-7, 1.0 - 1e-7);
            }
        }

        // Chain interference, SINR and available spectral rates.
        let mut xi_prime = vec![0.0; sc.chains.len()];
        let mut sinr = vec![0.0; sc.chains.len()];
        for (ci, chain) in sc.chains.iter().enumerate() {
            let mut interf = 1.0;
            for &i in &chain.interferers {
                interf += sc.gain(chain.receiver, t, &p_tilde[sc.private_stream(i)]);
            }
            xi_prime[ci] = interf * (1.0 + 1e-4);
            sinr[ci] = sc.gain(chain.receiver, t, &p_tilde[sc.private_stream(chain.msg)])
                / xi_prime[ci];
        }
        let avail = |k: usize| -> f64 {
            sc.chains
                .iter()
                .enumerate()
                .filter(|(_, ch)| ch.msg == k)
                .map(|(ci, _)| (1.0 + sinr[ci]).log2())
                .fold(f64::INFINITY, f64::min)
        };

        // Rate variables with the QoS repair.
        let mut a = vec![0.0; users];
        let mut c = vec![0.0; users];
        for k in 0..users {
            let ak_avail = avail(k);
            a[k] = ak_avail * (1.0 - RATE_BACKOFF) - TINY;
            match sc.scheme {
                Scheme::Rsma => {
                    let need = sc.r_th - a[k];
                    if need > 0.0 {
                        c[k] = need + (sc.r_th * RATE_BACKOFF).max(1e-12);
                    }
                }
                Scheme::Mulp | Scheme::Noma => {
                    if a[k] <= sc.r_th {
                        if sc.r_th == 0.0 && a[k] >= 0.0 {
                            // Degenerate zero-QoS case: keep a strictly above 0
                            // only if some rate exists; a = 0 is allowed.
                        } else {
                            return Err(Error::QosInfeasible {
                                slot: t + 1,
                                detail: format!(
                                    "user {k}: achievable private rate {:.4} b/s/Hz < required {:.4}",
                                    ak_avail, sc.r_th
                                ),
                            });
                        }
                    }
                }
            }
        }

        // Common stream budget and split.
        if matches!(sc.scheme, Scheme::Rsma | Scheme::Mulp) {
            let mut sinr_c = vec![0.0; users];
            let mut xi_c_prime = vec![0.0; users];
            for k in 0..users {
                let mut interf = 1.0;
                for i in 0..users {
                    interf += sc.gain(k, t, &p_tilde[sc.private_stream(i)]);
                }
                xi_c_prime[k] = interf * (1.0 + 1e-4);
                sinr_c[k] = sc.gain(k, t, &p_tilde[0]) / xi_c_prime[k];
            }
            let rc_avail = (0..users)
                .map(|k| (1.0 + sinr_c[k]).log2())
                .fold(f64::INFINITY, f64::min);
            let budget = rc_avail * (1.0 - RATE_BACKOFF);
            let c_sum: f64 = c.iter().sum();
            if c_sum >= budget {
                return Err(Error::QosInfeasible {
                    slot: t + 1,
                    detail: format!(
                        "common-rate budget {budget:.4} b/s/Hz exhausted by QoS splits {c_sum:.4}"
                    ),
                });
            }
            let c0 = ((budget - c_sum) * (1.0 - 1e-3)).max(TINY);
            vars.c0[t] = c0 * b;
            for k in 0..users {
                let used = c0 + c_sum;
                let hi = (1.0 + sinr_c[k]).log2();
                let ac = 0.5 * (used + hi);
                vars.alpha_c[k][t] = ac * b;
                vars.theta_c[k][t] = 0.5 * (ac.exp2() + 1.0 + sinr_c[k]);
                vars.xi_c[k][t] = xi_c_prime[k] * sc.sigma;
            }
        }

        for k in 0..users {
            vars.alpha[k][t] = a[k] * b;
            if sc.scheme == Scheme::Rsma {
                vars.c[k][t] = c[k] * b;
            }
        }
        for (ci, chain) in sc.chains.iter().enumerate() {
            let av = a[chain.msg];
            vars.theta[ci][t] = 0.5 * (av.exp2() + 1.0 + sinr[ci]);
            vars.xi[ci][t] = xi_prime[ci] * sc.sigma;
        }
        for k in 0..users {
            let nsq: f64 = p_tilde[sc.private_stream(k)].iter().map(|c| c.norm_sqr()).sum();
            vars.s[k][t] = (nsq * (1.0 + DELTA) + 1e-8) * sc.power;
        }
        let amp = sc.power.sqrt();
        let to_phys = |p: &Vec<Complex64>| -> Vec<Complex64> { p.iter().map(|c| c * amp).collect() };
        let (common, priv_start) = if matches!(sc.scheme, Scheme::Rsma | Scheme::Mulp) {
            (to_phys(&p_tilde[0]), 1usize)
        } else {
            (vec![Complex64::new(0.0, 0.0); sc.antennas], 0)
        };
        let privates = (0..users).map(|k| to_phys(&p_tilde[k + priv_start])).collect();
        vars.precoders.push(PrecoderMatrix::new(common, privates)?);
    }

    // Payload auxiliaries: omega proportional to the per-slot caps. A seeded
    // schedule whose mask was driven too low to carry the payload is reset to
    // the all-on mask before giving up.
    for row in 0..sc.psi_rows() {
        let caps_for = |psi_row: &[f64]| -> Vec<f64> {
            (0..slots)
                .map(|t| {
                    let rate = match sc.scheme {
                        Scheme::Rsma | Scheme::Mulp => vars.c0[t] / b,
                        Scheme::Noma => vars.alpha[row][t] / b,
                    };
                    psi_row[t] * rate * (1.0 - DELTA)
                })
                .collect()
        };
        let mut caps = caps_for(&vars.psi[row]);
        let mut total: f64 = caps.iter().sum();
        if sc.b0 * (1.0 + DELTA) >= total {
            for t in 0..slots {
                vars.psi[row][t] = 1.0 - 1e-7;
            }
            caps = caps_for(&vars.psi[row]);
            total = caps.iter().sum();
        }
        let ratio = sc.b0 * (1.0 + DELTA) / total.max(1e-300);
        if !(ratio < 1.0) {
            return Err(Error::PayloadInfeasible(format!(
                "stream {row}: even the all-on schedule carries {:.3e} of the required {:.3e} spectral slot units",
                total, sc.b0
            )));
        }
        for t in 0..slots {
            vars.omega[row][t] = caps[t] * ratio * b;
        }
    }

    // Latency bound strictly above every psi * slot index.
    let mut max_term = 0.0f64;
    for row in &vars.psi {
        for (t, &psi) in row.iter().enumerate() {
            max_term = max_term.max(psi * (t + 1) as f64);
        }
    }
    vars.latency_bound = (max_term + DELTA * slots as f64).min(1.09 * slots as f64);

    Ok(vars)
}

/// Power per SIC position so each message achieves `target` bits/s/Hz at all
/// of its decoders, assuming aligned beams. Position 0 is the strongest user.
fn noma_power_cascade(sc: &Scaled, t: usize, target: f64) -> Vec<f64> {
    let gamma = target.exp2() - 1.0;
    let users = sc.users;
    let mut powers = vec![0.0; users];
    let mut interference_budget = 0.0;
    for pos in 0..users {
        let g_min = (0..=pos)
            .map(|i| sc.g_norm_sq[sc.sic[i]][t])
            .fold(f64::INFINITY, f64::min)
            .max(1e-300);
        powers[pos] = gamma * (interference_budget + 1.0 / g_min) * 1.05;
        interference_budget += powers[pos];
    }
    powers
}

/// Algorithm-2 initialization in physical units.
pub fn init_feasible(spec: &DownlinkSpec, scheme: Scheme) -> Result<DownlinkVariables> {
    let sc = Scaled::new(spec, scheme)?;
    interior_point(spec, &sc, None)
}

/// Exact feasibility of the original (nonconvex) SINR constraints at a point:
/// returns the largest violation of `|h^H p|^2 / xi >= theta - 1` over all
/// decoding chains and slots, in relative terms.
pub fn verify_original_constraints(
    spec: &DownlinkSpec,
    vars: &DownlinkVariables,
) -> Result<f64> {
    let sc = Scaled::new(spec, vars.scheme)?;
    let sigma = sc.sigma;
    let mut worst: f64 = 0.0;
    for t in 0..sc.slots {
        for (ci, chain) in sc.chains.iter().enumerate() {
            let h = &spec.channels[chain.receiver][t];
            let p = &vars.precoders[t].private[chain.msg];
            let lhs = h.gain(p) / vars.xi[ci][t].max(sigma * 1e-12);
            let rhs = vars.theta[ci][t] - 1.0;
            worst = worst.max((rhs - lhs) / (1.0 + rhs.abs()));
        }
        if matches!(vars.scheme, Scheme::Rsma | Scheme::Mulp) {
            for k in 0..sc.users {
                let h = &spec.channels[k][t];
                let p = &vars.precoders[t].common;
                let lhs = h.gain(p) / vars.xi_c[k][t].max(sigma * 1e-12);
                let rhs = vars.theta_c[k][t] - 1.0;
                worst = worst.max((rhs - lhs) / (1.0 + rhs.abs()));
            }
        }
    }
    Ok(worst)
}
