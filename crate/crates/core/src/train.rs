//! Single-epoch minibatch training with Adam, a one-cycle learning-rate
//! schedule, and checkpointing on a mixed linear/log step plan.
//!
//! Every batch is freshly sampled from the counter-based data stream, so
//! a run is a pure function of its configs and can be resumed bit-exactly
//! from any checkpoint.

use crate::data::{sample_batch, DataConfig, RegressionContext};
use crate::error::{CoreError, Result};
use crate::model::DifferentiableLoss;
use crate::par::{chunked_reduce, BATCH_CHUNK};
use crate::params::ParameterVector;
use crate::rng::Stream;
use crate::scalar::Scalar;
use crate::transformer::{Precision, TransformerBatch, TransformerModel};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// Peak learning rate of the one-cycle schedule.
    pub max_lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Fraction of the cycle spent increasing the learning rate.
    #[serde(default = "default_pct_start")]
    pub pct_start: f64,
    /// Initial lr = max_lr / div_factor.
    #[serde(default = "default_div_factor")]
    pub div_factor: f64,
    /// Final lr = max_lr / final_div_factor.
    #[serde(default = "default_final_div_factor")]
    pub final_div_factor: f64,
    /// Checkpoint plan: linearly spaced count.
    #[serde(default = "default_n_linear")]
    pub checkpoints_linear: usize,
    /// Checkpoint plan: logarithmically spaced count.
    #[serde(default = "default_n_log")]
    pub checkpoints_log: usize,
    pub seed: u64,
    /// Gradient clipping by global norm; off by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_pct_start() -> f64 {
    0.5
}
fn default_div_factor() -> f64 {
    25.0
}
fn default_final_div_factor() -> f64 {
    1e4
}
fn default_n_linear() -> usize {
    100
}
fn default_n_log() -> usize {
    90
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500_000,
            batch_size: 256,
            max_lr: 3e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            pct_start: default_pct_start(),
            div_factor: default_div_factor(),
            final_div_factor: default_final_div_factor(),
            checkpoints_linear: default_n_linear(),
            checkpoints_log: default_n_log(),
            seed: 0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(CoreError::config("train.steps", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(CoreError::config("train.batch_size", "must be >= 1"));
        }
        if !(self.max_lr > 0.0) {
            return Err(CoreError::config("train.max_lr", "must be > 0"));
        }
        if !(self.pct_start > 0.0 && self.pct_start < 1.0) {
            return Err(CoreError::config("train.pct_start", "must be in (0, 1)"));
        }
        Ok(())
    }

    /// One-cycle learning rate at optimizer step t in [0, steps]: rises
    /// linearly from max_lr/div_factor to max_lr over pct_start*steps,
    /// then falls linearly to max_lr/final_div_factor.
    pub fn learning_rate(&self, t: u64) -> f64 {
        let total = self.steps as f64;
        let peak_at = (self.pct_start * total).round();
        let lr0 = self.max_lr / self.div_factor;
        let lr_end = self.max_lr / self.final_div_factor;
        let t = t as f64;
        if t <= peak_at {
            lr0 + (self.max_lr - lr0) * t / peak_at.max(1.0)
        } else {
            self.max_lr + (lr_end - self.max_lr) * (t - peak_at) / (total - peak_at).max(1.0)
        }
    }

    /// Checkpoint steps: `checkpoints_linear` linearly spaced over [0, T]
    /// plus `checkpoints_log` log-spaced over [1, T], deduplicated and
    /// sorted; 0 and T are always present.
    pub fn checkpoint_plan(&self) -> Vec<u64> {
        let t = self.steps;
        let mut steps = vec![0, t];
        if self.checkpoints_linear >= 2 {
            let n = self.checkpoints_linear as u64;
            for i in 0..n {
                steps.push((i as f64 * t as f64 / (n - 1) as f64).round() as u64);
            }
        }
        if self.checkpoints_log >= 2 {
            let n = self.checkpoints_log;
            let hi = (t as f64).ln();
            for i in 0..n {
                let x = hi * i as f64 / (n - 1) as f64;
                steps.push(x.exp().round() as u64);
            }
        }
        steps.sort_unstable();
        steps.dedup();
        steps.retain(|&s| s <= t);
        steps
    }
}

/// Training step t plus everything needed to continue the run bit-exactly.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    pub params: ParameterVector,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
}

/// Per-token losses on a held-out set, k = 1..K, plus their mean.
#[derive(Clone, Debug, Serialize)]
pub struct EvalResult {
    pub per_token: Vec<f64>,
    pub mean: f64,
}

/// Mean per-token losses over a fixed evaluation set.
pub fn evaluate(
    model: &TransformerModel,
    params: &[f64],
    eval_set: &[RegressionContext],
) -> Result<EvalResult> {
    let k = model.cfg.max_examples;
    let n = eval_set.len();
    if n == 0 {
        return Err(CoreError::shape("empty evaluation set"));
    }
    let sums = chunked_reduce(
        n,
        BATCH_CHUNK,
        |r| -> Result<Vec<f64>> {
            let mut acc = vec![0.0; k];
            for ctx in &eval_set[r] {
                let (preds, _) = model.forward(params, ctx, false)?;
                for (j, (p, y)) in preds.iter().zip(&ctx.ys).enumerate() {
                    let e = p - y;
                    acc[j] += e * e;
                }
            }
            Ok(acc)
        },
        |a, b| {
            let mut a = a?;
            for (x, y) in a.iter_mut().zip(b?) {
                *x += y;
            }
            Ok(a)
        },
    )
    .expect("nonempty")?;
    let per_token: Vec<f64> = sums.into_iter().map(|s| s / n as f64).collect();
    let mean = per_token.iter().sum::<f64>() / k as f64;
    Ok(EvalResult { per_token, mean })
}

struct AdamState<S> {
    m: Vec<S>,
    v: Vec<S>,
}

fn train_impl<S: Scalar>(
    model: &TransformerModel,
    data: &DataConfig,
    cfg: &TrainConfig,
    start: Option<&Checkpoint>,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
    on_step: &mut dyn FnMut(u64, f64, f64),
) -> Result<Checkpoint> {
    let dim = model.dim();
    let (mut params, mut adam, start_step): (Vec<S>, AdamState<S>, u64) = match start {
        None => {
            let p = model.init_params(cfg.seed);
            (
                p.values.iter().map(|&x| S::from_f64(x)).collect(),
                AdamState {
                    m: vec![S::zero(); dim],
                    v: vec![S::zero(); dim],
                },
                0,
            )
        }
        Some(ck) => (
            ck.params.values.iter().map(|&x| S::from_f64(x)).collect(),
            AdamState {
                m: ck.adam_m.iter().map(|&x| S::from_f64(x)).collect(),
                v: ck.adam_v.iter().map(|&x| S::from_f64(x)).collect(),
            },
            ck.step,
        ),
    };

    let plan = cfg.checkpoint_plan();
    let snapshot = |step: u64, params: &[S], adam: &AdamState<S>| -> Result<Checkpoint> {
        Ok(Checkpoint {
            step,
            params: ParameterVector::new(
                params.iter().map(|&x| x.value()).collect(),
                model.layout().clone(),
            )?,
            adam_m: adam.m.iter().map(|&x| x.value()).collect(),
            adam_v: adam.v.iter().map(|&x| x.value()).collect(),
        })
    };

    if start.is_none() && plan.contains(&0) {
        on_checkpoint(&snapshot(0, &params, &adam)?)?;
    }

    let mut last = snapshot(start_step, &params, &adam)?;
    for t in start_step..cfg.steps {
        let lr = cfg.learning_rate(t);
        let contexts = sample_batch(data, cfg.batch_size, Stream::TrainData, t);
        let batch = TransformerBatch::mean(contexts);
        let (loss, mut grad) = model.batch_value_and_grad(&params, &batch)?;
        let loss_f = loss.value();
        if !loss_f.is_finite() {
            // abort; the sink has already retained the last good checkpoint
            return Err(CoreError::NonFinite {
                location: format!("train step {t}"),
            });
        }
        on_step(t, loss_f, lr);

        if let Some(clip) = cfg.grad_clip {
            let norm = grad
                .iter()
                .map(|g| g.value() * g.value())
                .sum::<f64>()
                .sqrt();
            if norm > clip {
                let scale = S::from_f64(clip / norm);
                for g in grad.iter_mut() {
                    *g = *g * scale;
                }
            }
        }

        // Adam with bias correction; t starts at 1
        let t_adam = (t + 1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t_adam);
        let bc2 = 1.0 - cfg.beta2.powi(t_adam);
        let b1 = S::from_f64(cfg.beta1);
        let b2 = S::from_f64(cfg.beta2);
        let one_m_b1 = S::from_f64(1.0 - cfg.beta1);
        let one_m_b2 = S::from_f64(1.0 - cfg.beta2);
        let step_size = S::from_f64(lr / bc1);
        let eps = S::from_f64(cfg.adam_eps);
        let inv_sqrt_bc2 = S::from_f64(1.0 / bc2.sqrt());
        for i in 0..dim {
            let g = grad[i];
            adam.m[i] = b1 * adam.m[i] + one_m_b1 * g;
            adam.v[i] = b2 * adam.v[i] + one_m_b2 * g * g;
            let denom = (adam.v[i]).sqrt() * inv_sqrt_bc2 + eps;
            params[i] -= step_size * adam.m[i] / denom;
        }

        let reached = t + 1;
        if plan.binary_search(&reached).is_ok() {
            last = snapshot(reached, &params, &adam)?;
            on_checkpoint(&last)?;
        }
    }
    if last.step != cfg.steps {
        last = snapshot(cfg.steps, &params, &adam)?;
    }
    Ok(last)
}

/// Train for `cfg.steps` optimizer steps, emitting checkpoints at the
/// planned steps through `on_checkpoint` (step 0 and the final step are
/// always in the plan) and per-step (step, loss, lr) records through
/// `on_step`. Returns the final checkpoint. Resuming from a checkpoint
/// reproduces the uninterrupted run bit-exactly.
pub fn train(
    model: &TransformerModel,
    data: &DataConfig,
    cfg: &TrainConfig,
    start: Option<&Checkpoint>,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
    on_step: &mut dyn FnMut(u64, f64, f64),
) -> Result<Checkpoint> {
    cfg.validate()?;
    data.validate()?;
    if data.input_dim != model.cfg.input_dim || data.max_examples != model.cfg.max_examples {
        return Err(CoreError::config(
            "model.input_dim",
            "model and data dimensions must agree",
        ));
    }
    match model.cfg.precision {
        Precision::F64 => train_impl::<f64>(model, data, cfg, start, on_checkpoint, on_step),
        Precision::F32 => train_impl::<f32>(model, data, cfg, start, on_checkpoint, on_step),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::TransformerConfig;

    fn tiny() -> (TransformerModel, DataConfig, TrainConfig) {
        let mcfg = TransformerConfig {
            layers: 1,
            heads: 2,
            d_embed: 8,
            d_mlp: 8,
            input_dim: 2,
            max_examples: 3,
            ..TransformerConfig::default()
        };
        let data = DataConfig {
            input_dim: 2,
            max_examples: 3,
            seed: 5,
            test_size: 64,
            ..DataConfig::default()
        };
        let tcfg = TrainConfig {
            steps: 40,
            batch_size: 8,
            checkpoints_linear: 5,
            checkpoints_log: 4,
            seed: 1,
            ..TrainConfig::default()
        };
        (TransformerModel::new(mcfg).unwrap(), data, tcfg)
    }

    #[test]
    fn one_cycle_schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert!((cfg.learning_rate(0) - 3e-3 / 25.0).abs() < 1e-12);
        let peak = (cfg.pct_start * cfg.steps as f64).round() as u64;
        assert!((cfg.learning_rate(peak) - 3e-3).abs() < 1e-12);
        assert!((cfg.learning_rate(cfg.steps) - 3e-3 / 1e4).abs() < 1e-12);
        // near zero at both ends relative to the peak
        assert!(cfg.learning_rate(0) < 0.05 * cfg.max_lr);
        assert!(cfg.learning_rate(cfg.steps) < 1e-3 * cfg.max_lr);
    }

    #[test]
    fn checkpoint_plan_dedup_sorted_with_endpoints() {
        let cfg = TrainConfig::default();
        let plan = cfg.checkpoint_plan();
        assert_eq!(plan.first(), Some(&0));
        assert_eq!(plan.last(), Some(&cfg.steps));
        let mut sorted = plan.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(plan, sorted);
        assert!(plan.len() <= cfg.checkpoints_linear + cfg.checkpoints_log + 2);
        assert!(plan.len() >= cfg.checkpoints_linear.max(cfg.checkpoints_log));
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let (model, data, cfg) = tiny();
        let mut sink = Vec::new();
        let final_full = train(
            &model,
            &data,
            &cfg,
            None,
            &mut |ck| {
                sink.push(ck.clone());
                Ok(())
            },
            &mut |_, _, _| {},
        )
        .unwrap();

        // restart from the midpoint checkpoint
        let mid = sink
            .iter()
            .find(|c| c.step == cfg.steps / 2)
            .expect("midpoint checkpoint planned")
            .clone();
        let final_resumed = train(
            &model,
            &data,
            &cfg,
            Some(&mid),
            &mut |_| Ok(()),
            &mut |_, _, _| {},
        )
        .unwrap();
        assert_eq!(final_full.step, final_resumed.step);
        for (a, b) in final_full
            .params
            .values
            .iter()
            .zip(&final_resumed.params.values)
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in final_full.adam_v.iter().zip(&final_resumed.adam_v) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn identical_configs_identical_checkpoints() {
        let (model, data, cfg) = tiny();
        let run = || {
            let mut out = Vec::new();
            train(
                &model,
                &data,
                &cfg,
                None,
                &mut |ck| {
                    out.push(ck.params.values.clone());
                    Ok(())
                },
                &mut |_, _, _| {},
            )
            .unwrap();
            out
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            for (p, q) in x.iter().zip(y) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }

    #[test]
    fn f32_training_resumes_bit_exactly() {
        let (model, data, cfg) = tiny();
        let model = TransformerModel::new(TransformerConfig {
            precision: Precision::F32,
            ..model.cfg
        })
        .unwrap();
        let mut sink = Vec::new();
        let final_full = train(
            &model,
            &data,
            &cfg,
            None,
            &mut |ck| {
                sink.push(ck.clone());
                Ok(())
            },
            &mut |_, _, _| {},
        )
        .unwrap();
        let mid = sink.iter().find(|c| c.step == cfg.steps / 2).unwrap().clone();
        let resumed = train(&model, &data, &cfg, Some(&mid), &mut |_| Ok(()), &mut |_, _, _| {})
            .unwrap();
        for (a, b) in final_full.params.values.iter().zip(&resumed.params.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn training_reduces_loss_on_tiny_run() {
        let mcfg = TransformerConfig {
            layers: 2,
            heads: 2,
            d_embed: 16,
            d_mlp: 16,
            input_dim: 2,
            max_examples: 4,
            ..TransformerConfig::default()
        };
        let data = DataConfig {
            input_dim: 2,
            max_examples: 4,
            seed: 5,
            test_size: 256,
            ..DataConfig::default()
        };
        let cfg = TrainConfig {
            steps: 3000,
            batch_size: 32,
            checkpoints_linear: 3,
            checkpoints_log: 0,
            seed: 1,
            ..TrainConfig::default()
        };
        let model = TransformerModel::new(mcfg).unwrap();
        let eval = crate::data::eval_set(&data);
        let init = evaluate(&model, &model.init_params(cfg.seed).values, &eval).unwrap();
        let final_ck = train(&model, &data, &cfg, None, &mut |_| Ok(()), &mut |_, _, _| {})
            .unwrap();
        let res = evaluate(&model, &final_ck.params.values, &eval).unwrap();
        assert_eq!(res.per_token.len(), 4);
        assert!(
            res.mean < 0.8 * init.mean,
            "eval {} should clearly beat initial {}",
            res.mean,
            init.mean
        );
    }

    #[test]
    fn zero_predictor_eval_matches_expectation() {
        // per-token loss of the zero predictor is about D + sigma^2
        let (model, data, _) = tiny();
        let mut params = model.init_params(2);
        params.segment_mut("unembed.w").unwrap().fill(0.0);
        params.segment_mut("unembed.b").unwrap().fill(0.0);
        let data = DataConfig {
            test_size: 4096,
            ..data
        };
        let eval = crate::data::eval_set(&data);
        let res = evaluate(&model, &params.values, &eval).unwrap();
        let expect = data.input_dim as f64 + data.sigma2;
        for (k, l) in res.per_token.iter().enumerate() {
            assert!(
                (l - expect).abs() < 0.15 * expect,
                "token {k}: loss {l}, want about {expect}"
            );
        }
    }
}
