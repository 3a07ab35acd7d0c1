//! FEEL-downlink subproblem: rate-splitting transmission optimized by
//! successive convex approximation, plus the MU-LP and unicast-NOMA
//! baselines solved through the same machinery.

mod sca;
mod subproblem;

pub use sca::{baseline_mulp, baseline_noma, round_schedule, sca_solve, ScaOptions};
pub use subproblem::{build_subproblem, init_feasible, verify_original_constraints};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelVector, PrecoderMatrix, RadioConfig};
use crate::error::{Error, Result};

/// Downlink transmission scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Rate-splitting: common stream carries the broadcast payload plus
    /// common sub-messages; private streams carry the rest.
    Rsma,
    /// Multi-user linear precoding: no rate splitting, the common stream
    /// carries only the broadcast payload.
    Mulp,
    /// Unicast NOMA: no common stream; the payload is delivered to every
    /// follower through its own private stream with SIC decoding.
    Noma,
}

impl Scheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::Rsma => "rsma",
            Scheme::Mulp => "mulp",
            Scheme::Noma => "noma",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rsma" => Ok(Scheme::Rsma),
            "mulp" | "mu-lp" => Ok(Scheme::Mulp),
            "noma" => Ok(Scheme::Noma),
            other => Err(Error::InvalidConfig(format!("unknown scheme '{other}'"))),
        }
    }
}

/// Everything the downlink optimizer needs for one horizon.
#[derive(Debug, Clone)]
pub struct DownlinkSpec {
    /// Slot count T.
    pub slots: usize,
    /// Slot duration in seconds.
    pub dt: f64,
    /// Broadcast payload size B0 in bits.
    pub payload_bits: f64,
    /// Control-message QoS rate per follower per slot, bits/s.
    pub qos_rate: f64,
    pub radio: RadioConfig,
    /// channels[k][t].
    pub channels: Vec<Vec<ChannelVector>>,
    /// epsilons[k][t], CSIT error coefficients in [0, 1].
    pub epsilons: Vec<Vec<f64>>,
    /// Q_t.
    pub weight_latency: f64,
    /// Q_h.
    pub weight_csit: f64,
}

impl DownlinkSpec {
    pub fn validate(&self) -> Result<()> {
        self.radio.validate()?;
        if self.slots == 0 {
            return Err(Error::InvalidConfig("T >= 1 required".into()));
        }
        if self.payload_bits <= 0.0 {
            return Err(Error::InvalidConfig("B0 > 0 required".into()));
        }
        if self.qos_rate < 0.0 {
            return Err(Error::InvalidConfig("R_th >= 0 required".into()));
        }
        if self.dt <= 0.0 {
            return Err(Error::InvalidConfig("dt > 0 required".into()));
        }
        let k = self.radio.users;
        if self.channels.len() != k || self.epsilons.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "channels/epsilons must have K = {k} rows"
            )));
        }
        for (h_row, e_row) in self.channels.iter().zip(&self.epsilons) {
            if h_row.len() != self.slots || e_row.len() != self.slots {
                return Err(Error::DimensionMismatch("channel array shape must be K x T".into()));
            }
            for h in h_row {
                if h.len() != self.radio.antennas {
                    return Err(Error::DimensionMismatch("channel length != M".into()));
                }
            }
        }
        Ok(())
    }
}

/// Primal variables of the downlink problem in physical units.
///
/// `psi` and `omega` have one row for the single super-common stream under
/// RSMA / MU-LP and one row per follower under NOMA. `theta` / `xi` hold one
/// row per decoding chain: per follower for RSMA / MU-LP, one per SIC
/// receiver/message pair for NOMA.
#[derive(Debug, Clone)]
pub struct DownlinkVariables {
    pub scheme: Scheme,
    /// Relaxed or rounded schedule mask per stream per slot.
    pub psi: Vec<Vec<f64>>,
    pub precoders: Vec<PrecoderMatrix>,
    /// Broadcast portion of the common rate, bits/s per slot.
    pub c0: Vec<f64>,
    /// Common-stream unicast portions C_k, bits/s.
    pub c: Vec<Vec<f64>>,
    /// Private-rate variables alpha_k, bits/s.
    pub alpha: Vec<Vec<f64>>,
    /// 1 + SINR lower bounds per decoding chain.
    pub theta: Vec<Vec<f64>>,
    /// Interference-plus-noise epigraphs per decoding chain, W.
    pub xi: Vec<Vec<f64>>,
    /// Common-rate auxiliaries (empty for NOMA).
    pub alpha_c: Vec<Vec<f64>>,
    pub theta_c: Vec<Vec<f64>>,
    pub xi_c: Vec<Vec<f64>>,
    /// Per-slot payload-rate auxiliaries omega, bits/s (rows match psi).
    pub omega: Vec<Vec<f64>>,
    /// Epigraphs of ||p_k||^2, W.
    pub s: Vec<Vec<f64>>,
    /// Scalar latency bound (slot-index units).
    pub latency_bound: f64,
}

impl DownlinkVariables {
    /// Largest active slot index (1-based); 0 when no slot is active.
    pub fn latency_slots(&self) -> usize {
        let mut latest = 0;
        for row in &self.psi {
            for (t, &v) in row.iter().enumerate() {
                if v >= 0.5 {
                    latest = latest.max(t + 1);
                }
            }
        }
        latest
    }

    /// CSIT penalty sum_k sum_t Gamma_hat evaluated exactly from precoders.
    pub fn csit_penalty(&self, spec: &DownlinkSpec) -> f64 {
        let mut total = 0.0;
        for (t, p) in self.precoders.iter().enumerate() {
            for k in 0..spec.radio.users {
                total += crate::channel::gamma_hat(
                    &p.private[k],
                    spec.epsilons[k][t],
                    &spec.channels[k][t],
                );
            }
        }
        total
    }

    /// Exact comm-block objective Q_t * latency_bound + Q_h * sum Gamma_hat.
    pub fn objective(&self, spec: &DownlinkSpec) -> f64 {
        spec.weight_latency * self.latency_bound + spec.weight_csit * self.csit_penalty(spec)
    }

    /// Delivered payload bits per stream row after applying the mask.
    pub fn delivered_bits(&self, spec: &DownlinkSpec) -> Vec<f64> {
        self.psi
            .iter()
            .enumerate()
            .map(|(row, psi_row)| {
                psi_row
                    .iter()
                    .enumerate()
                    .map(|(t, &psi)| {
                        let rate = match self.scheme {
                            Scheme::Rsma | Scheme::Mulp => self.c0[t],
                            Scheme::Noma => self.alpha[row][t],
                        };
                        psi * rate * spec.dt
                    })
                    .sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaStatus {
    Converged,
    IterationLimit,
}

/// One accepted SCA iterate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScaIterate {
    pub iteration: usize,
    pub latency_bound: f64,
    pub objective: f64,
    pub max_violation: f64,
}

/// Result of Algorithm 2 (plus schedule rounding).
#[derive(Debug, Clone)]
pub struct ScaReport {
    pub iterates: Vec<ScaIterate>,
    pub status: ScaStatus,
    /// Final variables with the rounded binary schedule.
    pub final_vars: DownlinkVariables,
    /// Final relaxed variables before rounding.
    pub relaxed_vars: DownlinkVariables,
    /// Rounded latency as a slot index (1-based; 0 = nothing scheduled).
    pub latency_slots: usize,
    pub latency_seconds: f64,
    /// Exact objective at the final relaxed point.
    pub objective: f64,
}

/// Affine minorant of the bilinear form psi * c0 around an expansion point:
/// Omega(psi, c0) = psi_n c0 + c0_n psi - psi_n c0_n. Tangent and exact at
/// the expansion point; not a global bound.
#[derive(Debug, Clone, Copy)]
pub struct BilinearMinorant {
    pub coef_psi: f64,
    pub coef_c0: f64,
    pub constant: f64,
}

pub fn minorant_bilinear(psi_n: f64, c0_n: f64) -> BilinearMinorant {
    BilinearMinorant {
        coef_psi: c0_n,
        coef_c0: psi_n,
        constant: -psi_n * c0_n,
    }
}

impl BilinearMinorant {
    pub fn eval(&self, psi: f64, c0: f64) -> f64 {
        self.coef_psi * psi + self.coef_c0 * c0 + self.constant
    }
}

/// Affine global lower bound of the quadratic-over-linear form
/// |h^H p|^2 / xi around (p_n, xi_n):
/// Psi(p, xi) = 2 Re(p_n^H h h^H p) / xi_n - (|h^H p_n| / xi_n)^2 xi.
#[derive(Debug, Clone)]
pub struct QolMinorant {
    /// Complex coefficient vector a with linear term Re(a^H p).
    pub coef_p: Vec<Complex64>,
    pub coef_xi: f64,
}

pub fn minorant_qol(p_n: &[Complex64], xi_n: f64, h: &ChannelVector) -> Result<QolMinorant> {
    if xi_n <= 0.0 {
        return Err(Error::InvalidLinearization(format!(
            "expansion denominator must be positive, got {xi_n}"
        )));
    }
    if p_n.len() != h.len() {
        return Err(Error::DimensionMismatch("precoder / channel length mismatch".into()));
    }
    let hp = h.inner(p_n); // h^H p_n
    // a = 2 h (h^H p_n), chosen so that Re(a^H p) = 2 Re(p_n^H h h^H p) / xi_n.
    let coef_p: Vec<Complex64> = h.coefficients.iter().map(|hi| 2.0 * hi * hp / xi_n).collect();
    let coef_xi = -(hp.norm() / xi_n).powi(2);
    Ok(QolMinorant { coef_p, coef_xi })
}

impl QolMinorant {
    pub fn eval(&self, p: &[Complex64], xi: f64) -> f64 {
        let lin: f64 = self
            .coef_p
            .iter()
            .zip(p.iter())
            .map(|(a, pi)| (a.conj() * pi).re)
            .sum();
        lin + self.coef_xi * xi
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bilinear_minorant_cases() {
        // Tangency at the expansion point.
        let m = minorant_bilinear(0.37, 2.9);
        assert!((m.eval(0.37, 2.9) - 0.37 * 2.9).abs() < 1e-12);
        // Zero expansion point gives the zero form.
        let m = minorant_bilinear(0.0, 0.0);
        assert_eq!(m.eval(0.8, 5.0), 0.0);
        // Hand-evaluated: psi_n = 1, c0_n = 5 at (0.5, 4) -> 4 + 2.5 - 5 = 1.5.
        let m = minorant_bilinear(1.0, 5.0);
        assert!((m.eval(0.5, 4.0) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn qol_minorant_cases() {
        let h = ChannelVector::from_real(&[1.0]).unwrap();
        // Tangency: at (p_n, xi_n) the minorant equals |h^H p|^2 / xi.
        let p_n = vec![Complex64::new(1.0, 0.0)];
        let m = minorant_qol(&p_n, 1.0, &h).unwrap();
        assert!((m.eval(&p_n, 1.0) - 1.0).abs() < 1e-12);
        // Hand value: Psi(2, 1) = 4 - 1 = 3 <= |2|^2 / 1.
        let p2 = vec![Complex64::new(2.0, 0.0)];
        assert!((m.eval(&p2, 1.0) - 3.0).abs() < 1e-12);
        assert!(m.eval(&p2, 1.0) <= 4.0);

        // Expansion orthogonal to h: the form vanishes identically.
        let h2 = ChannelVector::from_real(&[1.0, 0.0]).unwrap();
        let p_orth = vec![Complex64::new(0.0, 0.0), Complex64::new(3.0, 0.0)];
        let m = minorant_qol(&p_orth, 2.0, &h2).unwrap();
        let probe = vec![Complex64::new(1.5, -0.4), Complex64::new(0.1, 2.0)];
        assert_eq!(m.eval(&probe, 7.0), 0.0);

        assert!(minorant_qol(&p_n, 0.0, &h).is_err());
        assert!(minorant_qol(&p_n, -1.0, &h).is_err());
    }

    #[test]
    fn qol_minorant_is_global_lower_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let h = ChannelVector::new(
            (0..3)
                .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap();
        let p_n: Vec<Complex64> = (0..3)
            .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let xi_n = 0.7;
        let m = minorant_qol(&p_n, xi_n, &h).unwrap();
        // Tangency within 1e-10.
        let exact_at = h.gain(&p_n) / xi_n;
        assert!((m.eval(&p_n, xi_n) - exact_at).abs() < 1e-10);
        // Global lower bound over 10^3 random samples.
        for _ in 0..1000 {
            let p: Vec<Complex64> = (0..3)
                .map(|_| Complex64::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)))
                .collect();
            let xi: f64 = rng.gen_range(1e-3..5.0);
            assert!(m.eval(&p, xi) <= h.gain(&p) / xi + 1e-9);
        }
    }

    #[test]
    fn qol_minorant_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let h = ChannelVector::new(
            (0..2)
                .map(|_| Complex64::new(rng.gen_range(0.2..1.0), rng.gen_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap();
        let p_n: Vec<Complex64> = (0..2)
            .map(|_| Complex64::new(rng.gen_range(0.2..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let xi_n = 1.3;
        let m = minorant_qol(&p_n, xi_n, &h).unwrap();
        let f = |p: &[Complex64], xi: f64| h.gain(p) / xi;
        let step = 1e-6;
        // Real and imaginary parts of each precoder coefficient.
        for i in 0..2 {
            for part in 0..2 {
                let mut plus = p_n.clone();
                let mut minus = p_n.clone();
                if part == 0 {
                    plus[i].re += step;
                    minus[i].re -= step;
                } else {
                    plus[i].im += step;
                    minus[i].im -= step;
                }
                let fd = (f(&plus, xi_n) - f(&minus, xi_n)) / (2.0 * step);
                let coef = if part == 0 { m.coef_p[i].re } else { m.coef_p[i].im };
                assert!(
                    (fd - coef).abs() <= 1e-5 * fd.abs().max(1.0),
                    "fd {fd} vs coef {coef}"
                );
            }
        }
        let fd_xi = (f(&p_n, xi_n + step) - f(&p_n, xi_n - step)) / (2.0 * step);
        assert!((fd_xi - m.coef_xi).abs() <= 1e-5 * fd_xi.abs().max(1.0));
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!("rsma".parse::<Scheme>().unwrap(), Scheme::Rsma);
        assert_eq!("MU-LP".parse::<Scheme>().unwrap(), Scheme::Mulp);
        assert_eq!("noma".parse::<Scheme>().unwrap(), Scheme::Noma);
        assert!("ofdma".parse::<Scheme>().is_err());
    }
}
