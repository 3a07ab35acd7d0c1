//! Federated-learning round simulation on synthetic convex tasks, with
//! downlink-latency accounting tied to the broadcast schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rsma::{DownlinkVariables, ScaReport, Scheme};

/// Global model parameters plus their serialized size.
#[derive(Debug, Clone)]
pub struct ModelVector {
    pub parameters: Vec<f64>,
    pub precision_bits: u32,
}

impl ModelVector {
    pub fn zeros(dim: usize, precision_bits: u32) -> Self {
        Self { parameters: vec![0.0; dim], precision_bits }
    }

    pub fn bit_size(&self) -> f64 {
        (self.parameters.len() as u32 * self.precision_bits) as f64
    }
}

/// Samples held by one follower.
#[derive(Debug, Clone)]
pub struct LocalDataset {
    pub samples: Vec<(Vec<f64>, f64)>,
}

impl LocalDataset {
    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::InvalidConfig("local dataset must be nonempty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    LeastSquares,
    Logistic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeelConfig {
    /// Step size; zero or negative selects 1/L computed from the data.
    pub step_size: f64,
    pub rounds: usize,
    pub workers: usize,
    pub loss: LossKind,
    pub dim: usize,
    pub samples_per_worker: usize,
    pub precision_bits: u32,
    pub seed: u64,
}

impl Default for FeelConfig {
    fn default() -> Self {
        Self {
            step_size: 0.0,
            rounds: 20,
            workers: 2,
            loss: LossKind::LeastSquares,
            dim: 16,
            samples_per_worker: 128,
            precision_bits: 32,
            seed: 7,
        }
    }
}

/// Deterministic synthetic task split into equal worker shards.
pub fn synthetic_shards(config: &FeelConfig) -> Vec<LocalDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dim = config.dim;
    let w_true: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (0..config.workers)
        .map(|_| {
            let samples = (0..config.samples_per_worker)
                .map(|_| {
                    let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let clean: f64 = x.iter().zip(&w_true).map(|(a, b)| a * b).sum();
                    let noisy = clean + 0.05 * rng.gen_range(-1.0..1.0);
                    let label = match config.loss {
                        LossKind::LeastSquares => noisy,
                        LossKind::Logistic => {
                            if noisy >= 0.0 {
                                1.0
                            } else {
                                -1.0
                            }
                        }
                    };
                    (x, label)
                })
                .collect();
            LocalDataset { samples }
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Full-batch gradient of the local loss.
pub fn local_gradient(w: &[f64], dataset: &LocalDataset, loss: LossKind) -> Result<Vec<f64>> {
    dataset.validate()?;
    let dim = w.len();
    let mut g = vec![0.0; dim];
    for (x, y) in &dataset.samples {
        if x.len() != dim {
            return Err(Error::DimensionMismatch("sample/model dimension".into()));
        }
        match loss {
            LossKind::LeastSquares => {
                let r = dot(w, x) - y;
                for (gi, xi) in g.iter_mut().zip(x) {
                    *gi += r * xi;
                }
            }
            LossKind::Logistic => {
                let margin = -y * dot(w, x);
                let sigma = 1.0 / (1.0 + (-margin).exp());
                for (gi, xi) in g.iter_mut().zip(x) {
                    *gi += -y * sigma * xi;
                }
            }
        }
    }
    let inv = 1.0 / dataset.samples.len() as f64;
    for gi in &mut g {
        *gi *= inv;
    }
    Ok(g)
}

/// Loss value of the model on a dataset.
pub fn loss_value(w: &[f64], dataset: &LocalDataset, loss: LossKind) -> f64 {
    let n = dataset.samples.len() as f64;
    dataset
        .samples
        .iter()
        .map(|(x, y)| match loss {
            LossKind::LeastSquares => 0.5 * (dot(w, x) - y).powi(2),
            LossKind::Logistic => (1.0 + (-y * dot(w, x)).exp()).ln(),
        })
        .sum::<f64>()
        / n
}

/// Uniform gradient aggregation (1/K sum).
pub fn aggregate(gradients: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = gradients
        .first()
        .ok_or_else(|| Error::InvalidConfig("no gradients to aggregate".into()))?;
    let dim = first.len();
    let mut out = vec![0.0; dim];
    for g in gradients {
        if g.len() != dim {
            return Err(Error::DimensionMismatch("gradient dimensions differ".into()));
        }
        for (o, gi) in out.iter_mut().zip(g) {
            *o += gi;
        }
    }
    let inv = 1.0 / gradients.len() as f64;
    for o in &mut out {
        *o *= inv;
    }
    Ok(out)
}

/// Shard-size-weighted variant (off by default in the round loop).
pub fn aggregate_weighted(gradients: &[Vec<f64>], sizes: &[usize]) -> Result<Vec<f64>> {
    if gradients.len() != sizes.len() {
        return Err(Error::DimensionMismatch("one size per gradient required".into()));
    }
    let total: usize = sizes.iter().sum();
    let dim = gradients.first().map_or(0, Vec::len);
    let mut out = vec![0.0; dim];
    for (g, &s) in gradients.iter().zip(sizes) {
        let w = s as f64 / total as f64;
        for (o, gi) in out.iter_mut().zip(g) {
            *o += w * gi;
        }
    }
    Ok(out)
}

/// Gradient step w' = w - eta g.
pub fn global_update(w: &[f64], gradient: &[f64], eta: f64) -> Vec<f64> {
    w.iter().zip(gradient).map(|(wi, gi)| wi - eta * gi).collect()
}

/// Largest curvature of the empirical loss, via power iteration on the
/// Gram matrix (logistic curvature is bounded by a quarter of it).
pub fn lipschitz_constant(shards: &[LocalDataset], loss: LossKind) -> f64 {
    let dim = shards[0].samples[0].0.len();
    let n: usize = shards.iter().map(|s| s.samples.len()).sum();
    let mut v = vec![1.0 / (dim as f64).sqrt(); dim];
    let mut lambda = 0.0;
    for _ in 0..100 {
        // u = (1/n) X^T X v
        let mut u = vec![0.0; dim];
        for shard in shards {
            for (x, _) in &shard.samples {
                let s = dot(x, &v);
                for (ui, xi) in u.iter_mut().zip(x) {
                    *ui += s * xi;
                }
            }
        }
        for ui in &mut u {
            *ui /= n as f64;
        }
        lambda = dot(&u, &v);
        let norm = dot(&u, &u).sqrt().max(1e-300);
        for (vi, ui) in v.iter_mut().zip(&u) {
            *vi = ui / norm;
        }
    }
    match loss {
        LossKind::LeastSquares => lambda,
        LossKind::Logistic => lambda / 4.0,
    }
}

/// One synchronous FEEL round: local gradients, aggregation, global step.
/// Returns the updated model and the downlink latency of broadcasting it.
pub fn feel_round(
    w: &ModelVector,
    shards: &[LocalDataset],
    eta: f64,
    downlink: &ScaReport,
    dt: f64,
) -> Result<(ModelVector, f64)> {
    verify_payload(&downlink.final_vars, w.bit_size(), dt)?;
    let gradients: Vec<Vec<f64>> = shards
        .iter()
        .map(|d| local_gradient(&w.parameters, d, LossKind::LeastSquares))
        .collect::<Result<_>>()?;
    let mean = aggregate(&gradients)?;
    let parameters = global_update(&w.parameters, &mean, eta);
    let latency = downlink.latency_slots as f64 * dt;
    Ok((ModelVector { parameters, precision_bits: w.precision_bits }, latency))
}

/// Checks the schedule actually carries `bits` (the (19c) precondition).
pub fn verify_payload(vars: &DownlinkVariables, bits: f64, dt: f64) -> Result<()> {
    if bits == 0.0 {
        return Ok(());
    }
    for (row, psi_row) in vars.psi.iter().enumerate() {
        let delivered: f64 = psi_row
            .iter()
            .enumerate()
            .map(|(t, &psi)| {
                let rate = match vars.scheme {
                    Scheme::Rsma | Scheme::Mulp => vars.c0[t],
                    Scheme::Noma => vars.alpha[row][t],
                };
                psi * rate * dt
            })
            .sum();
        if delivered + 1e-9 < bits {
            return Err(Error::PayloadInfeasible(format!(
                "schedule stream {row} carries {delivered:.3e} bits < model size {bits:.3e}"
            )));
        }
    }
    Ok(())
}

/// One point of the training curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeelRoundRecord {
    pub round: usize,
    pub cumulative_latency_s: f64,
    pub loss: f64,
}

/// Runs `config.rounds` FEEL rounds chained over a per-round downlink
/// schedule (reused when a single schedule is given). The emitted curve pairs
/// loss with cumulative downlink latency.
pub fn run_training(
    config: &FeelConfig,
    schedules: &[&ScaReport],
    dt: f64,
) -> Result<Vec<FeelRoundRecord>> {
    if schedules.is_empty() {
        return Err(Error::InvalidConfig("at least one downlink schedule required".into()));
    }
    let shards = synthetic_shards(config);
    let pooled = LocalDataset {
        samples: shards.iter().flat_map(|s| s.samples.clone()).collect(),
    };
    let eta = if config.step_size > 0.0 {
        config.step_size
    } else {
        1.0 / lipschitz_constant(&shards, config.loss)
    };
    let mut w = ModelVector::zeros(config.dim, config.precision_bits);
    let mut curve = Vec::with_capacity(config.rounds + 1);
    let mut cumulative = 0.0;
    curve.push(FeelRoundRecord {
        round: 0,
        cumulative_latency_s: 0.0,
        loss: loss_value(&w.parameters, &pooled, config.loss),
    });
    let mut rises = 0usize;
    for round in 1..=config.rounds {
        let schedule = schedules[(round - 1).min(schedules.len() - 1)];
        let gradients: Vec<Vec<f64>> = shards
            .iter()
            .map(|d| local_gradient(&w.parameters, d, config.loss))
            .collect::<Result<_>>()?;
        let mean = aggregate(&gradients)?;
        verify_payload(&schedule.final_vars, w.bit_size(), dt)?;
        w.parameters = global_update(&w.parameters, &mean, eta);
        cumulative += schedule.latency_slots as f64 * dt;
        let loss = loss_value(&w.parameters, &pooled, config.loss);
        if loss > curve.last().unwrap().loss + 1e-15 {
            rises += 1;
            if rises >= 5 {
                return Err(Error::StepSize(format!(
                    "loss increased for {rises} consecutive rounds (eta = {eta:.3e})"
                )));
            }
        } else {
            rises = 0;
        }
        curve.push(FeelRoundRecord { round, cumulative_latency_s: cumulative, loss });
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(x: Vec<f64>, y: f64) -> LocalDataset {
        LocalDataset { samples: vec![(x, y)] }
    }

    #[test]
    fn gradient_hand_cases() {
        // Least squares with one sample (x = [1], y = 0), w = [2]: g = 2.
        let d = single(vec![1.0], 0.0);
        let g = local_gradient(&[2.0], &d, LossKind::LeastSquares).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-15);

        // At the exact solution the gradient vanishes.
        let d = LocalDataset {
            samples: vec![(vec![1.0, 0.0], 3.0), (vec![0.0, 1.0], -2.0)],
        };
        let g = local_gradient(&[3.0, -2.0], &d, LossKind::LeastSquares).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-15));

        assert!(local_gradient(&[0.0], &LocalDataset { samples: vec![] }, LossKind::LeastSquares).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = FeelConfig { workers: 1, dim: 5, samples_per_worker: 40, ..FeelConfig::default() };
        for loss in [LossKind::LeastSquares, LossKind::Logistic] {
            let shards = synthetic_shards(&FeelConfig { loss, ..cfg.clone() });
            let w: Vec<f64> = (0..5).map(|i| 0.2 * i as f64 - 0.3).collect();
            let g = local_gradient(&w, &shards[0], loss).unwrap();
            let h = 1e-6;
            for i in 0..5 {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[i] += h;
                wm[i] -= h;
                let fd = (loss_value(&wp, &shards[0], loss) - loss_value(&wm, &shards[0], loss))
                    / (2.0 * h);
                assert!(
                    (fd - g[i]).abs() <= 1e-6 * fd.abs().max(1.0),
                    "{loss:?} coord {i}: fd {fd} vs g {}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn aggregate_cases() {
        let g = aggregate(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(g, vec![1.0, 2.0]);
        let g = aggregate(&[vec![1.0, -3.0], vec![-1.0, 3.0]]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        assert!(aggregate(&[vec![1.0], vec![1.0, 2.0]]).is_err());

        // Equal shards: aggregate of shard gradients equals the full-batch
        // gradient.
        let cfg = FeelConfig { workers: 4, dim: 6, samples_per_worker: 32, ..FeelConfig::default() };
        let shards = synthetic_shards(&cfg);
        let w = vec![0.1; 6];
        let parts: Vec<Vec<f64>> = shards
            .iter()
            .map(|d| local_gradient(&w, d, LossKind::LeastSquares).unwrap())
            .collect();
        let mean = aggregate(&parts).unwrap();
        let pooled = LocalDataset {
            samples: shards.iter().flat_map(|s| s.samples.clone()).collect(),
        };
        let full = local_gradient(&w, &pooled, LossKind::LeastSquares).unwrap();
        for (a, b) in mean.iter().zip(&full) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn update_cases() {
        assert_eq!(global_update(&[1.0], &[2.0], 0.0), vec![1.0]);
        assert_eq!(global_update(&[1.0], &[0.0], 0.5), vec![1.0]);
        let w = global_update(&[1.0], &[2.0], 0.1);
        assert!((w[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn federated_rounds_match_centralized_descent() {
        let cfg = FeelConfig { workers: 4, dim: 8, samples_per_worker: 64, ..FeelConfig::default() };
        let shards = synthetic_shards(&cfg);
        let pooled = LocalDataset {
            samples: shards.iter().flat_map(|s| s.samples.clone()).collect(),
        };
        let eta = 1.0 / lipschitz_constant(&shards, LossKind::LeastSquares);
        let mut w_fed = vec![0.0; 8];
        let mut w_cen = vec![0.0; 8];
        for _ in 0..20 {
            let parts: Vec<Vec<f64>> = shards
                .iter()
                .map(|d| local_gradient(&w_fed, d, LossKind::LeastSquares).unwrap())
                .collect();
            w_fed = global_update(&w_fed, &aggregate(&parts).unwrap(), eta);
            let g = local_gradient(&w_cen, &pooled, LossKind::LeastSquares).unwrap();
            w_cen = global_update(&w_cen, &g, eta);
            for (a, b) in w_fed.iter().zip(&w_cen) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn descent_is_monotone_at_safe_step_size() {
        let cfg = FeelConfig { workers: 2, dim: 8, samples_per_worker: 64, ..FeelConfig::default() };
        let shards = synthetic_shards(&cfg);
        let pooled = LocalDataset {
            samples: shards.iter().flat_map(|s| s.samples.clone()).collect(),
        };
        let lip = lipschitz_constant(&shards, LossKind::LeastSquares);
        let eta = 1.0 / lip;
        let mut w = vec![0.0; 8];
        let mut prev = loss_value(&w, &pooled, LossKind::LeastSquares);
        for _ in 0..30 {
            let parts: Vec<Vec<f64>> = shards
                .iter()
                .map(|d| local_gradient(&w, d, LossKind::LeastSquares).unwrap())
                .collect();
            w = global_update(&w, &aggregate(&parts).unwrap(), eta);
            let loss = loss_value(&w, &pooled, LossKind::LeastSquares);
            assert!(loss <= prev + 1e-12);
            prev = loss;
        }
        // Zero-initialized model on this data: first gradient equals
        // -(1/n) sum y_i x_i.
        let w0 = vec![0.0; 8];
        let g = local_gradient(&w0, &pooled, LossKind::LeastSquares).unwrap();
        let n = pooled.samples.len() as f64;
        for i in 0..8 {
            let hand: f64 =
                -pooled.samples.iter().map(|(x, y)| y * x[i]).sum::<f64>() / n;
            assert!((g[i] - hand).abs() < 1e-12);
        }
    }
}
