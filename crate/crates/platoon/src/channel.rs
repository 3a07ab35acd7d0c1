//! Downlink channel model: path-loss channel vectors, imperfect-CSIT split,
//! RSMA SINR and achievable-rate computation.
//!
//! All operations are pure functions; none of them keep shared state, so they
//! can be called from any number of workers concurrently.

use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};

/// Complex channel vector between the lead vehicle and one follower.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelVector {
    pub coefficients: Vec<Complex64>,
}

impl ChannelVector {
    pub fn new(coefficients: Vec<Complex64>) -> Result<Self> {
        if coefficients.is_empty() {
            return Err(Error::InvalidConfig("channel vector must have M >= 1".into()));
        }
        if coefficients.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::InvalidCoefficient("non-finite channel coefficient".into()));
        }
        Ok(Self { coefficients })
    }

    /// Real-valued channel, convenient for the deterministic path-loss mode.
    pub fn from_real(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| Complex64::new(v, 0.0)).collect())
    }

    pub fn len(&self) -> usize {
        self.coefficients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coefficients.is_empty()
    }

    /// Squared Euclidean norm ||h||^2.
    pub fn norm_sq(&self) -> f64 {
        self.coefficients.iter().map(|c| c.norm_sqr()).sum()
    }

    /// Inner product h^H p.
    pub fn inner(&self, p: &[Complex64]) -> Complex64 {
        self.coefficients
            .iter()
            .zip(p.iter())
            .map(|(h, p)| h.conj() * p)
            .sum()
    }

    /// |h^H p|^2.
    pub fn gain(&self, p: &[Complex64]) -> f64 {
        self.inner(p).norm_sqr()
    }
}

/// Imperfect CSIT decomposition h = h_tilde + h_hat with power split
/// (1 - eps^2) / eps^2.
#[derive(Debug, Clone)]
pub struct CsitSplit {
    /// Channel estimate h_tilde = sqrt(1 - eps^2) h.
    pub estimate: ChannelVector,
    /// Error power gain Gamma_hat = eps^2 * Gamma.
    pub error_gain: f64,
    pub epsilon: f64,
}

/// Precoders for the common stream and the K private streams.
#[derive(Debug, Clone)]
pub struct PrecoderMatrix {
    pub common: Vec<Complex64>,
    pub private: Vec<Vec<Complex64>>,
}

impl PrecoderMatrix {
    pub fn new(common: Vec<Complex64>, private: Vec<Vec<Complex64>>) -> Result<Self> {
        let m = common.len();
        if m == 0 {
            return Err(Error::InvalidConfig("precoder needs M >= 1 antennas".into()));
        }
        if private.iter().any(|p| p.len() != m) {
            return Err(Error::DimensionMismatch("private precoder length != M".into()));
        }
        Ok(Self { common, private })
    }

    pub fn antennas(&self) -> usize {
        self.common.len()
    }

    pub fn users(&self) -> usize {
        self.private.len()
    }

    /// trace(P P^H) = total transmit power.
    pub fn total_power(&self) -> f64 {
        let pc: f64 = self.common.iter().map(|c| c.norm_sqr()).sum();
        let pp: f64 = self
            .private
            .iter()
            .map(|p| p.iter().map(|c| c.norm_sqr()).sum::<f64>())
            .sum();
        pc + pp
    }
}

/// Static radio parameters of the downlink.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RadioConfig {
    /// Antenna count at the lead vehicle.
    pub antennas: usize,
    /// Number of follower vehicles served.
    pub users: usize,
    /// Bandwidth in Hz.
    pub bandwidth: f64,
    /// Transmit power budget in W.
    pub power: f64,
    /// Noise power spectral density in dBm/Hz.
    pub noise_density_dbm: f64,
    /// Path loss exponent.
    pub path_loss_exp: f64,
}

impl RadioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.antennas == 0 || self.users == 0 {
            return Err(Error::InvalidConfig("M >= 1 and K >= 1 required".into()));
        }
        if self.bandwidth <= 0.0 || self.power <= 0.0 {
            return Err(Error::InvalidConfig("B > 0 and P_t > 0 required".into()));
        }
        Ok(())
    }

    /// Noise power sigma^2 over this bandwidth.
    pub fn noise_power(&self) -> Result<f64> {
        noise_power(self.noise_density_dbm, self.bandwidth)
    }
}

/// Converts a noise density in dBm/Hz over bandwidth `bandwidth_hz` into W.
pub fn noise_power(noise_density_dbm: f64, bandwidth_hz: f64) -> Result<f64> {
    if bandwidth_hz <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "bandwidth must be positive, got {bandwidth_hz}"
        )));
    }
    Ok(10f64.powf((noise_density_dbm - 30.0) / 10.0) * bandwidth_hz)
}

/// Deterministic path-loss channel: every coefficient equals d^(-mu).
pub fn path_loss_channel(distance_m: f64, config: &RadioConfig) -> Result<ChannelVector> {
    if distance_m <= 0.0 {
        return Err(Error::DegenerateGeometry(format!(
            "LV-FV distance must be positive, got {distance_m}"
        )));
    }
    let coeff = distance_m.powf(-config.path_loss_exp);
    ChannelVector::from_real(&vec![coeff; config.antennas])
}

/// Adds a zero-mean circular complex perturbation with per-coefficient
/// variance eps^2 * Gamma / M on top of a deterministic channel. Used only by
/// the optional Monte-Carlo robustness mode.
pub fn perturb_channel<R: Rng>(h: &ChannelVector, epsilon: f64, rng: &mut R) -> ChannelVector {
    let m = h.len() as f64;
    let gamma = h.norm_sq();
    let sigma = (epsilon * epsilon * gamma / m / 2.0).sqrt();
    let coefficients = h
        .coefficients
        .iter()
        .map(|c| {
            let re: f64 = rng.sample::<f64, _>(rand_distr_standard_normal());
            let im: f64 = rng.sample::<f64, _>(rand_distr_standard_normal());
            c + Complex64::new(re * sigma, im * sigma)
        })
        .collect();
    ChannelVector { coefficients }
}

// rand 0.8 ships StandardNormal through rand_distr; a Box-Muller-free inline
// sampler keeps the dependency list short.
fn rand_distr_standard_normal() -> impl rand::distributions::Distribution<f64> {
    struct StdNormal;
    impl rand::distributions::Distribution<f64> for StdNormal {
        fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
            // Box-Muller on two uniforms.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        }
    }
    StdNormal
}

/// Motion-related CSIT error coefficient
/// eps = ||z - z_est||_2 / (2 ||z_max||_2), clamped into [0, 1].
pub fn motion_coefficient(state: &[f64; 4], estimate: &[f64; 4], state_max: &[f64; 4]) -> Result<f64> {
    let max_norm = norm4(state_max);
    if max_norm <= 0.0 {
        return Err(Error::InvalidConfig("z_max must be nonzero".into()));
    }
    let dev = [
        state[0] - estimate[0],
        state[1] - estimate[1],
        state[2] - estimate[2],
        state[3] - estimate[3],
    ];
    let eps = norm4(&dev) / (2.0 * max_norm);
    if eps > 1.0 {
        // Transient bound violations during solver iterates must not abort.
        log::warn!("motion coefficient {eps:.4} clamped to 1");
        return Ok(1.0);
    }
    Ok(eps)
}

fn norm4(v: &[f64; 4]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]).sqrt()
}

/// Splits a channel into its CSIT estimate and error gain for a given eps.
pub fn split_csit(h: &ChannelVector, epsilon: f64) -> Result<CsitSplit> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::InvalidCoefficient(format!(
            "epsilon must lie in [0,1], got {epsilon}"
        )));
    }
    let scale = (1.0 - epsilon * epsilon).sqrt();
    let estimate = ChannelVector {
        coefficients: h.coefficients.iter().map(|c| c * scale).collect(),
    };
    Ok(CsitSplit {
        estimate,
        error_gain: epsilon * epsilon * h.norm_sq(),
        epsilon,
    })
}

/// SINR of the common stream at one receiver: all private streams interfere.
pub fn sinr_common(h: &ChannelVector, p: &PrecoderMatrix, noise: f64) -> Result<f64> {
    check_dims(h, p)?;
    check_noise(noise)?;
    let signal = h.gain(&p.common);
    let interference: f64 = p.private.iter().map(|pk| h.gain(pk)).sum();
    Ok(signal / (interference + noise))
}

/// SINR of private stream `k` after SIC removed the common stream.
pub fn sinr_private(h: &ChannelVector, p: &PrecoderMatrix, k: usize, noise: f64) -> Result<f64> {
    check_dims(h, p)?;
    check_noise(noise)?;
    if k >= p.users() {
        return Err(Error::IndexOutOfRange { index: k, len: p.users() });
    }
    let signal = h.gain(&p.private[k]);
    let interference: f64 = p
        .private
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != k)
        .map(|(_, pi)| h.gain(pi))
        .sum();
    Ok(signal / (interference + noise))
}

/// Shannon rate R = B log2(1 + gamma) in bits/s.
pub fn rate(gamma: f64, bandwidth_hz: f64) -> Result<f64> {
    if gamma < 0.0 {
        return Err(Error::InvalidCoefficient(format!("negative SINR {gamma}")));
    }
    Ok(bandwidth_hz * (1.0 + gamma).log2())
}

/// Decodable common rate: the minimum over all receivers.
pub fn common_rate(
    channels: &[ChannelVector],
    p: &PrecoderMatrix,
    noise: f64,
    bandwidth_hz: f64,
) -> Result<f64> {
    if channels.is_empty() {
        return Err(Error::InvalidConfig("common rate needs at least one receiver".into()));
    }
    let mut min_rate = f64::INFINITY;
    for h in channels {
        let r = rate(sinr_common(h, p, noise)?, bandwidth_hz)?;
        min_rate = min_rate.min(r);
    }
    Ok(min_rate)
}

/// CSIT error penalty sum over followers:
/// sum_k eps_k^2 * ||p_k||^4 * ||h_k||^2 (Gamma_hat with the deterministic
/// E{||h||^2} = ||h||^2 convention).
pub fn gain_error_penalty(
    p: &PrecoderMatrix,
    epsilons: &[f64],
    channels: &[ChannelVector],
) -> Result<f64> {
    if epsilons.len() != p.users() || channels.len() != p.users() {
        return Err(Error::DimensionMismatch(format!(
            "penalty needs one epsilon and one channel per user ({} users)",
            p.users()
        )));
    }
    let mut total = 0.0;
    for ((pk, &eps), h) in p.private.iter().zip(epsilons).zip(channels) {
        let pk_norm_sq: f64 = pk.iter().map(|c| c.norm_sqr()).sum();
        total += eps * eps * pk_norm_sq * pk_norm_sq * h.norm_sq();
    }
    Ok(total)
}

/// Gamma_hat for a single follower.
pub fn gamma_hat(private: &[Complex64], epsilon: f64, h: &ChannelVector) -> f64 {
    let p_sq: f64 = private.iter().map(|c| c.norm_sqr()).sum();
    epsilon * epsilon * p_sq * p_sq * h.norm_sq()
}

fn check_dims(h: &ChannelVector, p: &PrecoderMatrix) -> Result<()> {
    if h.len() != p.antennas() {
        return Err(Error::DimensionMismatch(format!(
            "channel has {} antennas, precoder {}",
            h.len(),
            p.antennas()
        )));
    }
    Ok(())
}

fn check_noise(noise: f64) -> Result<()> {
    if noise <= 0.0 {
        return Err(Error::InvalidConfig(format!("noise power must be positive, got {noise}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cplx(values: &[f64]) -> Vec<Complex64> {
        values.iter().map(|&v| Complex64::new(v, 0.0)).collect()
    }

    #[test]
    fn noise_power_reference_values() {
        // 10^((-174-30)/10) * 5e6, frozen from the definition.
        let sigma = noise_power(-174.0, 5e6).unwrap();
        assert!((sigma - 1.990535852767493e-14).abs() < 1e-26);
        // 0 dBm = 1 mW, -30 dBm/Hz over 1 Hz = 1e-6 W.
        assert!((noise_power(-30.0, 1.0).unwrap() - 1e-6).abs() < 1e-18);
        assert!((noise_power(0.0, 1.0).unwrap() - 1e-3).abs() < 1e-15);
        assert!(noise_power(-174.0, 0.0).is_err());
    }

    fn radio(m: usize, mu: f64) -> RadioConfig {
        RadioConfig {
            antennas: m,
            users: 1,
            bandwidth: 5e6,
            power: 0.316,
            noise_density_dbm: -174.0,
            path_loss_exp: mu,
        }
    }

    #[test]
    fn path_loss_values() {
        let h = path_loss_channel(1.0, &radio(3, 2.0)).unwrap();
        assert_eq!(h.len(), 3);
        for c in &h.coefficients {
            assert_eq!(c.re, 1.0);
        }
        let h = path_loss_channel(10.0, &radio(1, 2.0)).unwrap();
        assert!((h.coefficients[0].re - 0.01).abs() < 1e-15);
        let h = path_loss_channel(4.5, &radio(2, 2.0)).unwrap();
        for c in &h.coefficients {
            assert!((c.re - 0.04938271604938271).abs() < 1e-15);
        }
        assert!(path_loss_channel(0.0, &radio(1, 2.0)).is_err());
        assert!(path_loss_channel(-3.0, &radio(1, 2.0)).is_err());
    }

    #[test]
    fn path_loss_strictly_decreasing_in_distance() {
        let cfg = radio(1, 2.0);
        let mut prev = f64::INFINITY;
        for i in 1..50 {
            let d = 0.5 + i as f64;
            let h = path_loss_channel(d, &cfg).unwrap();
            assert!(h.coefficients[0].re < prev);
            prev = h.coefficients[0].re;
        }
    }

    #[test]
    fn motion_coefficient_cases() {
        let zmax = [10.0, 10.0, 1.0, 30.0];
        let z = [3.0, -1.0, 0.2, 14.0];
        assert_eq!(motion_coefficient(&z, &z, &zmax).unwrap(), 0.0);
        // z - z_est = z_max gives exactly 1/2.
        let z_est = [3.0 - 10.0, -1.0 - 10.0, 0.2 - 1.0, 14.0 - 30.0];
        assert!((motion_coefficient(&z, &z_est, &zmax).unwrap() - 0.5).abs() < 1e-12);
        // Oracle value 1 / (2 sqrt(1101)).
        let eps = motion_coefficient(&[1.0, 0.0, 0.0, 0.0], &[0.0; 4], &zmax).unwrap();
        assert!((eps - 0.015068719366972806).abs() < 1e-15);
        assert!(motion_coefficient(&z, &z, &[0.0; 4]).is_err());
        // Far outside the bounds: clamps instead of failing.
        let eps = motion_coefficient(&[1e6, 0.0, 0.0, 0.0], &[0.0; 4], &zmax).unwrap();
        assert_eq!(eps, 1.0);
    }

    #[test]
    fn split_csit_cases() {
        let h = ChannelVector::from_real(&[1.0, 0.0]).unwrap();
        let s = split_csit(&h, 0.0).unwrap();
        assert_eq!(s.estimate, h);
        assert_eq!(s.error_gain, 0.0);

        let s = split_csit(&h, 1.0).unwrap();
        assert!(s.estimate.norm_sq() < 1e-30);

        let s = split_csit(&h, 0.6).unwrap();
        assert!((s.estimate.coefficients[0].re - 0.8).abs() < 1e-12);
        assert!((s.error_gain - 0.36).abs() < 1e-12);

        assert!(split_csit(&h, -0.1).is_err());
        assert!(split_csit(&h, 1.1).is_err());
    }

    #[test]
    fn split_csit_power_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let h = ChannelVector::new(
                (0..4)
                    .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                    .collect(),
            )
            .unwrap();
            let eps: f64 = rng.gen_range(0.0..1.0);
            let s = split_csit(&h, eps).unwrap();
            let gamma = h.norm_sq();
            assert!((s.estimate.norm_sq() + s.error_gain - gamma).abs() < 1e-9);
        }
    }

    fn single_precoder(pc: &[f64], privates: &[&[f64]]) -> PrecoderMatrix {
        PrecoderMatrix::new(cplx(pc), privates.iter().map(|p| cplx(p)).collect()).unwrap()
    }

    #[test]
    fn sinr_common_cases() {
        let h = ChannelVector::from_real(&[1.0]).unwrap();
        let p = single_precoder(&[1.0], &[&[1.0]]);
        assert!((sinr_common(&h, &p, 1.0).unwrap() - 0.5).abs() < 1e-12);

        let p = single_precoder(&[0.0], &[&[1.0]]);
        assert_eq!(sinr_common(&h, &p, 1.0).unwrap(), 0.0);

        let p = single_precoder(&[1.0], &[&[0.0]]);
        assert!((sinr_common(&h, &p, 1.0).unwrap() - 1.0).abs() < 1e-12);

        assert!(sinr_common(&h, &p, 0.0).is_err());
    }

    #[test]
    fn sinr_private_cases() {
        let h = ChannelVector::from_real(&[1.0]).unwrap();
        let p = single_precoder(&[0.5], &[&[1.0]]);
        assert!((sinr_private(&h, &p, 0, 1.0).unwrap() - 1.0).abs() < 1e-12);

        let p = single_precoder(&[0.5], &[&[1.0], &[1.0]]);
        assert!((sinr_private(&h, &p, 0, 1.0).unwrap() - 0.5).abs() < 1e-12);

        let p = single_precoder(&[0.5], &[&[0.0], &[1.0]]);
        assert_eq!(sinr_private(&h, &p, 0, 1.0).unwrap(), 0.0);

        assert!(sinr_private(&h, &p, 2, 1.0).is_err());
    }

    #[test]
    fn sinr_phase_rotation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let h = ChannelVector::new(
                (0..3)
                    .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                    .collect(),
            )
            .unwrap();
            let p = PrecoderMatrix::new(
                (0..3)
                    .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                    .collect(),
                vec![(0..3)
                    .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                    .collect()],
            )
            .unwrap();
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let rot = Complex64::from_polar(1.0, theta);
            let h_rot = ChannelVector {
                coefficients: h.coefficients.iter().map(|c| c * rot).collect(),
            };
            let a = sinr_common(&h, &p, 0.3).unwrap();
            let b = sinr_common(&h_rot, &p, 0.3).unwrap();
            assert!((a - b).abs() < 1e-12);
            assert!(a >= 0.0);
            let a = sinr_private(&h, &p, 0, 0.3).unwrap();
            let b = sinr_private(&h_rot, &p, 0, 0.3).unwrap();
            assert!((a - b).abs() < 1e-12);
            assert!(a >= 0.0);
        }
    }

    #[test]
    fn rate_cases() {
        assert_eq!(rate(0.0, 5e6).unwrap(), 0.0);
        assert!((rate(1.0, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((rate(3.0, 5e6).unwrap() - 1e7).abs() < 1e-3);
        assert!(rate(-0.1, 1.0).is_err());
        // Monotone nondecreasing in gamma.
        let mut prev = -1.0;
        for i in 0..100 {
            let r = rate(i as f64 * 0.37, 2.0).unwrap();
            assert!(r >= prev);
            prev = r;
        }
    }

    #[test]
    fn common_rate_cases() {
        let h1 = ChannelVector::from_real(&[1.0]).unwrap();
        let p = single_precoder(&[1.0], &[&[0.0]]);
        let single = common_rate(std::slice::from_ref(&h1), &p, 1.0, 1.0).unwrap();
        assert!((single - rate(sinr_common(&h1, &p, 1.0).unwrap(), 1.0).unwrap()).abs() < 1e-12);

        // Identical receivers: min equals any receiver's rate.
        let both = common_rate(&[h1.clone(), h1.clone()], &p, 1.0, 1.0).unwrap();
        assert!((both - single).abs() < 1e-12);

        // Weaker receiver drives the min: log2(1 + 0.01).
        let h2 = ChannelVector::from_real(&[0.1]).unwrap();
        let p2 = single_precoder(&[1.0], &[&[0.0], &[0.0]]);
        let r = common_rate(&[h1.clone(), h2.clone()], &p2, 1.0, 1.0).unwrap();
        assert!((r - 0.014355292977070054).abs() < 1e-12);
        // Min property against each receiver.
        for h in [&h1, &h2] {
            let rk = rate(sinr_common(h, &p2, 1.0).unwrap(), 1.0).unwrap();
            assert!(r <= rk + 1e-15);
        }

        assert!(common_rate(&[], &p, 1.0, 1.0).is_err());
    }

    #[test]
    fn gain_error_penalty_cases() {
        let h = ChannelVector::from_real(&[1.0, 0.0]).unwrap();
        let p = single_precoder(&[0.0, 0.0], &[&[1.0, 0.0]]);
        assert_eq!(gain_error_penalty(&p, &[0.0], std::slice::from_ref(&h)).unwrap(), 0.0);
        assert!((gain_error_penalty(&p, &[1.0], std::slice::from_ref(&h)).unwrap() - 1.0).abs() < 1e-12);

        // Quartic scaling in ||p||: doubling p multiplies the term by 16.
        let p2 = single_precoder(&[0.0, 0.0], &[&[2.0, 0.0]]);
        let base = gain_error_penalty(&p, &[0.7], std::slice::from_ref(&h)).unwrap();
        let scaled = gain_error_penalty(&p2, &[0.7], std::slice::from_ref(&h)).unwrap();
        assert!((scaled / base - 16.0).abs() < 1e-9);
    }

    #[test]
    fn perturbation_has_requested_power_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = ChannelVector::from_real(&[0.1, 0.1, 0.1, 0.1]).unwrap();
        let eps = 0.5;
        let n = 4000;
        let mut err_power = 0.0;
        for _ in 0..n {
            let hp = perturb_channel(&h, eps, &mut rng);
            err_power += hp
                .coefficients
                .iter()
                .zip(&h.coefficients)
                .map(|(a, b)| (a - b).norm_sqr())
                .sum::<f64>();
        }
        let expected = eps * eps * h.norm_sq();
        let measured = err_power / n as f64;
        assert!((measured / expected - 1.0).abs() < 0.1);
    }
}
