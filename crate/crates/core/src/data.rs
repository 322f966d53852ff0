//! Synthetic data for in-context linear regression.
//!
//! A context is one task vector t ~ N(0, I_D) together with K examples
//! (x_k, y_k), x_k ~ N(0, I_D), y_k ~ N(t·x_k, σ²). With a finite task
//! pool, tasks are drawn uniformly from M pre-generated vectors instead.

use crate::error::{CoreError, Result};
use crate::rng::{RngKey, Stream};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// One regression context.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionContext {
    /// Task vector t, length D.
    pub task: Vec<f64>,
    /// K input vectors, each length D.
    pub xs: Vec<Vec<f64>>,
    /// K labels.
    pub ys: Vec<f64>,
    /// OOD scale g used to draw this context (1 in distribution).
    pub gain: f64,
}

/// Which distribution factor an OOD batch perturbs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OodMode {
    Inputs,
    Tasks,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DataConfig {
    /// Input dimension D.
    pub input_dim: usize,
    /// Maximum in-context examples K.
    pub max_examples: usize,
    /// Label noise variance σ².
    pub sigma2: f64,
    /// Finite task pool size M; absent means tasks are drawn on the fly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_tasks: Option<u64>,
    pub seed: u64,
    /// Held-out evaluation set size.
    #[serde(default = "default_test_size")]
    pub test_size: usize,
}

fn default_test_size() -> usize {
    2048
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            input_dim: 4,
            max_examples: 8,
            sigma2: 0.125,
            num_tasks: None,
            seed: 0,
            test_size: default_test_size(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(CoreError::config("data.input_dim", "must be >= 1"));
        }
        if self.max_examples == 0 {
            return Err(CoreError::config("data.max_examples", "must be >= 1"));
        }
        if !(self.sigma2 >= 0.0) {
            return Err(CoreError::config("data.sigma2", "must be >= 0"));
        }
        if self.num_tasks == Some(0) {
            return Err(CoreError::config("data.num_tasks", "must be >= 1 when set"));
        }
        Ok(())
    }

    /// Task vector i of the finite pool.
    fn pool_task(&self, i: u64) -> Vec<f64> {
        let mut rng = RngKey::new(self.seed, Stream::TaskPool, i, 0).rng();
        (0..self.input_dim).map(|_| rng.sample(StandardNormal)).collect()
    }
}

/// Draw one context at stream position (`pos`, `item`), with separate
/// variance gains on the input and task factors.
fn sample_context(
    cfg: &DataConfig,
    stream: Stream,
    pos: u64,
    item: u64,
    input_gain: f64,
    task_gain: f64,
) -> RegressionContext {
    let (d, k) = (cfg.input_dim, cfg.max_examples);
    let mut rng = RngKey::new(cfg.seed, stream, pos, item).rng();
    let task: Vec<f64> = match cfg.num_tasks {
        None => {
            let scale = task_gain.sqrt();
            (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * scale).collect()
        }
        Some(m) => {
            let idx = rng.gen_range(0..m);
            let scale = task_gain.sqrt();
            cfg.pool_task(idx).into_iter().map(|t| t * scale).collect()
        }
    };
    let xscale = input_gain.sqrt();
    let xs: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * xscale).collect())
        .collect();
    let sigma = cfg.sigma2.sqrt();
    let ys: Vec<f64> = xs
        .iter()
        .map(|x| {
            let mean: f64 = task.iter().zip(x).map(|(t, xi)| t * xi).sum();
            if cfg.sigma2 == 0.0 {
                mean
            } else {
                mean + sigma * rng.sample::<f64, _>(StandardNormal)
            }
        })
        .collect();
    RegressionContext {
        task,
        xs,
        ys,
        gain: input_gain.max(task_gain),
    }
}

/// Sample a batch of contexts at stream position `pos`. Deterministic in
/// (`cfg.seed`, `stream`, `pos`, item index).
pub fn sample_batch(
    cfg: &DataConfig,
    batch_size: usize,
    stream: Stream,
    pos: u64,
) -> Vec<RegressionContext> {
    (0..batch_size)
        .map(|i| sample_context(cfg, stream, pos, i as u64, 1.0, 1.0))
        .collect()
}

/// Sample an out-of-distribution batch: `mode` selects which factor's
/// covariance is scaled by `gain`; the other factor is unchanged. With
/// gain 1 this reproduces [`sample_batch`] draws bit-exactly.
pub fn sample_ood_batch(
    cfg: &DataConfig,
    batch_size: usize,
    gain: f64,
    mode: OodMode,
    stream: Stream,
    pos: u64,
) -> Result<Vec<RegressionContext>> {
    if !(gain > 0.0) {
        return Err(CoreError::config("gain", "must be > 0"));
    }
    let (ig, tg) = match mode {
        OodMode::Inputs => (gain, 1.0),
        OodMode::Tasks => (1.0, gain),
    };
    Ok((0..batch_size)
        .map(|i| sample_context(cfg, stream, pos, i as u64, ig, tg))
        .collect())
}

/// Component-wise mean of a task pool.
pub fn mean_task(pool: &[Vec<f64>]) -> Vec<f64> {
    let d = pool.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; d];
    for t in pool {
        for (s, v) in mean.iter_mut().zip(t) {
            *s += v;
        }
    }
    for s in mean.iter_mut() {
        *s /= pool.len() as f64;
    }
    mean
}

/// The finite task pool, if configured.
pub fn task_pool(cfg: &DataConfig) -> Option<Vec<Vec<f64>>> {
    cfg.num_tasks
        .map(|m| (0..m).map(|i| cfg.pool_task(i)).collect())
}

/// The mean task vector: zero when tasks are unbounded, the component-wise
/// average of the pool otherwise.
pub fn task_prior(cfg: &DataConfig) -> Vec<f64> {
    match task_pool(cfg) {
        None => vec![0.0; cfg.input_dim],
        Some(pool) => mean_task(&pool),
    }
}

/// The frozen held-out evaluation set shared by every checkpoint.
pub fn eval_set(cfg: &DataConfig) -> Vec<RegressionContext> {
    sample_batch(cfg, cfg.test_size, Stream::EvalData, 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DataConfig {
        DataConfig { seed: 42, ..DataConfig::default() }
    }

    /// Plain Gauss-Jordan solve for the noiseless-identifiability check.
    fn solve_least_squares(xs: &[Vec<f64>], ys: &[f64], d: usize) -> Vec<f64> {
        let mut ata = vec![vec![0.0; d + 1]; d];
        for (x, &y) in xs.iter().zip(ys) {
            for i in 0..d {
                for j in 0..d {
                    ata[i][j] += x[i] * x[j];
                }
                ata[i][d] += x[i] * y;
            }
        }
        for col in 0..d {
            let piv = (col..d).max_by(|&a, &b| ata[a][col].abs().total_cmp(&ata[b][col].abs())).unwrap();
            ata.swap(col, piv);
            let p = ata[col][col];
            for j in col..=d {
                ata[col][j] /= p;
            }
            for r in 0..d {
                if r != col {
                    let f = ata[r][col];
                    for j in col..=d {
                        ata[r][j] -= f * ata[col][j];
                    }
                }
            }
        }
        (0..d).map(|i| ata[i][d]).collect()
    }

    #[test]
    fn noiseless_labels_identify_task() {
        let c = DataConfig { sigma2: 0.0, ..cfg() };
        for ctx in sample_batch(&c, 4, Stream::TrainData, 0) {
            let fit = solve_least_squares(&ctx.xs, &ctx.ys, c.input_dim);
            for (a, b) in fit.iter().zip(&ctx.task) {
                assert!((a - b).abs() < 1e-10, "ols {a} vs task {b}");
            }
        }
    }

    #[test]
    fn label_second_moment_matches_expectation() {
        // E[y²] = E||t||²·1 + σ² = D + σ² = 4.125, within 1% over 1e6 draws.
        let c = cfg();
        let n_ctx = 125_000; // 8 labels each -> 1e6 draws
        let mut sum = 0.0;
        let mut count = 0u64;
        for ctx in sample_batch(&c, n_ctx, Stream::TrainData, 7) {
            for y in ctx.ys {
                sum += y * y;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let expect = c.input_dim as f64 + c.sigma2;
        assert!(
            (mean - expect).abs() < 0.01 * expect,
            "E[y^2] = {mean}, want {expect} within 1%"
        );
    }

    #[test]
    fn single_task_pool_shares_task() {
        let c = DataConfig { num_tasks: Some(1), ..cfg() };
        let batch = sample_batch(&c, 16, Stream::TrainData, 3);
        let first = &batch[0].task;
        assert!(batch.iter().all(|ctx| ctx.task == *first));
    }

    #[test]
    fn determinism_bit_exact() {
        let c = cfg();
        let a = sample_batch(&c, 32, Stream::TrainData, 11);
        let b = sample_batch(&c, 32, Stream::TrainData, 11);
        assert_eq!(a, b);
        let other = sample_batch(&c, 32, Stream::TrainData, 12);
        assert_ne!(a, other);
    }

    #[test]
    fn unit_gain_reproduces_in_distribution_draws() {
        let c = cfg();
        let a = sample_batch(&c, 8, Stream::OodData, 5);
        let b = sample_ood_batch(&c, 8, 1.0, OodMode::Inputs, Stream::OodData, 5).unwrap();
        let t = sample_ood_batch(&c, 8, 1.0, OodMode::Tasks, Stream::OodData, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, t);
    }

    #[test]
    fn ood_input_gain_scales_variance() {
        let c = cfg();
        let g = 100.0;
        let batches = sample_ood_batch(&c, 3200, g, OodMode::Inputs, Stream::OodData, 0).unwrap();
        let mut sum = 0.0;
        let mut n = 0u64;
        for ctx in &batches {
            for x in &ctx.xs {
                for &v in x {
                    sum += v * v;
                    n += 1;
                }
            }
        }
        let var = sum / n as f64; // >= 1e5 coordinate draws
        assert!((var - g).abs() < 0.03 * g, "Var(x) = {var}, want {g} within 3%");
        // tasks unchanged
        let mut tsum = 0.0;
        let mut tn = 0u64;
        for ctx in &batches {
            for &t in &ctx.task {
                tsum += t * t;
                tn += 1;
            }
        }
        let tvar = tsum / tn as f64;
        assert!((tvar - 1.0).abs() < 0.05, "task var {tvar} should stay 1");
    }

    #[test]
    fn ood_task_gain_scales_task_norm() {
        let c = cfg();
        let g = 4.0;
        let batches = sample_ood_batch(&c, 25_000, g, OodMode::Tasks, Stream::OodData, 1).unwrap();
        let mut sum = 0.0;
        for ctx in &batches {
            sum += ctx.task.iter().map(|t| t * t).sum::<f64>();
        }
        let mean = sum / batches.len() as f64;
        let expect = g * c.input_dim as f64;
        assert!((mean - expect).abs() < 0.03 * expect, "E||t||² = {mean}, want {expect}");
    }

    #[test]
    fn task_prior_unbounded_is_zero() {
        assert_eq!(task_prior(&cfg()), vec![0.0; 4]);
    }

    #[test]
    fn symmetric_pool_has_zero_mean() {
        let pool = vec![vec![1.0; 4], vec![-1.0; 4]];
        assert_eq!(mean_task(&pool), vec![0.0; 4]);
    }

    #[test]
    fn task_prior_matches_direct_average() {
        let c = DataConfig { num_tasks: Some(64), ..cfg() };
        let prior = task_prior(&c);
        let mut direct = vec![0.0; c.input_dim];
        for i in 0..64 {
            for (s, t) in direct.iter_mut().zip(c.pool_task(i)) {
                *s += t;
            }
        }
        for d in direct.iter_mut() {
            *d /= 64.0;
        }
        for (a, b) in prior.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_labels_are_exact_inner_products() {
        let c = DataConfig { sigma2: 0.0, ..cfg() };
        for ctx in sample_batch(&c, 8, Stream::EvalData, 2) {
            for (x, &y) in ctx.xs.iter().zip(&ctx.ys) {
                let ip: f64 = ctx.task.iter().zip(x).map(|(t, xi)| t * xi).sum();
                assert_eq!(y.to_bits(), ip.to_bits());
            }
        }
    }
}
