//! SGLD sampler, LLC estimator, online traces, diagnostics, and the
//! hyperparameter calibration sweep.
//!
//! The estimator is lambda_hat(w*) = n*beta * ( E[loss] - loss(w*) ), with
//! the expectation taken over the localized Gibbs posterior and
//! approximated by averaging recycled minibatch losses over C independent
//! SGLD chains started at w*. Each chain step is
//!
//!   w <- w - (eps/2) * ( beta*n * grad_minibatch(w) + (gamma/2)(w - w*) )
//!        + N(0, eps)
//!
//! and the noise/batch schedule is fully determined by (seed, chain, tau),
//! so estimates at different checkpoints share their randomness and the
//! LLC-over-time curve comes out smooth.

use crate::data::{sample_batch, DataConfig, RegressionContext};
use crate::error::{CoreError, Result};
use crate::geometry::{CurvePoint, LlcCurve};
use crate::model::{value_and_grad_flat, DifferentiableLoss, GradResult};
use crate::par::map_indexed;
use crate::potentials::{PotentialModel, SyntheticBatch};
use crate::rng::{fill_standard_normal, RngKey, Stream};
use crate::transformer::{TokenLossMode, TransformerBatch, TransformerModel};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Which empirical loss the sampler sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Mean over all K in-context predictions (overlapping subsequences).
    Subsequence,
    /// Proper likelihood: one uniformly drawn context length per sequence,
    /// loss on the final prediction only.
    Likelihood,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SgldConfig {
    /// Step size eps.
    pub epsilon: f64,
    /// Localization strength gamma.
    pub gamma: f64,
    /// Inverse-temperature product n*beta.
    pub nbeta: f64,
    pub chains: usize,
    pub steps_per_chain: usize,
    pub burn_in: usize,
    /// Minibatch size m.
    pub batch_size: usize,
    /// Virtual SGLD dataset size mu.
    pub dataset_size: u64,
    pub seed: u64,
    pub loss_mode: LossMode,
}

impl Default for SgldConfig {
    fn default() -> Self {
        // regression defaults
        SgldConfig {
            epsilon: 3e-4,
            gamma: 13.3,
            nbeta: 66.7,
            chains: 10,
            steps_per_chain: 5000,
            burn_in: 1000,
            batch_size: 1024,
            dataset_size: 1 << 20,
            seed: 0,
            loss_mode: LossMode::Subsequence,
        }
    }
}

impl SgldConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sgld.epsilon", self.epsilon),
            ("sgld.gamma", self.gamma),
            ("sgld.nbeta", self.nbeta),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(CoreError::config(name, "must be a positive finite number"));
            }
        }
        if self.chains == 0 {
            return Err(CoreError::config("sgld.chains", "must be >= 1"));
        }
        if self.burn_in >= self.steps_per_chain {
            return Err(CoreError::config(
                "sgld.burn_in",
                "must be smaller than steps_per_chain",
            ));
        }
        if self.batch_size == 0 {
            return Err(CoreError::config("sgld.batch_size", "must be >= 1"));
        }
        Ok(())
    }

    /// Step-scale reparametrization: beta_tilde = eps*beta*n/2,
    /// gamma_tilde = eps*gamma/4.
    pub fn beta_tilde(&self) -> f64 {
        self.epsilon * self.nbeta / 2.0
    }

    pub fn gamma_tilde(&self) -> f64 {
        self.epsilon * self.gamma / 4.0
    }

    /// Build a config from reparametrized coordinates. The chain length is
    /// scaled to cover the localization relaxation time 1/gamma_tilde
    /// (about twelve relaxations, capped), with a fifth as burn-in.
    pub fn from_reparametrized(
        &self,
        epsilon: f64,
        beta_tilde: f64,
        gamma_tilde: f64,
        max_steps: usize,
    ) -> SgldConfig {
        let steps = ((12.0 / gamma_tilde).ceil() as usize)
            .clamp(self.steps_per_chain, max_steps.max(self.steps_per_chain));
        SgldConfig {
            epsilon,
            nbeta: 2.0 * beta_tilde / epsilon,
            gamma: 4.0 * gamma_tilde / epsilon,
            steps_per_chain: steps,
            burn_in: steps / 5,
            ..self.clone()
        }
    }
}

/// What the SGLD sampler needs from a model/data pairing.
pub trait SgldTarget: Sync {
    fn dim(&self) -> usize;

    /// Loss and gradient on the minibatch keyed by (chain, tau).
    fn minibatch_grad(&self, w: &[f64], chain: u64, tau: u64) -> Result<GradResult>;

    /// Loss at w on the fixed reference batch (the loss(w*) term).
    fn reference_loss(&self, w: &[f64]) -> Result<f64>;
}

/// Analytic potentials: the "empirical" loss is the analytic loss for
/// every batch, so SGLD noise is the only stochasticity.
pub struct PotentialTarget {
    pub model: PotentialModel,
}

impl SgldTarget for PotentialTarget {
    fn dim(&self) -> usize {
        self.model.potential.dim
    }

    fn minibatch_grad(&self, w: &[f64], chain: u64, tau: u64) -> Result<GradResult> {
        let batch = SyntheticBatch {
            draw: chain.wrapping_mul(1 << 32) ^ tau,
        };
        value_and_grad_flat(&self.model, w, &batch)
    }

    fn reference_loss(&self, w: &[f64]) -> Result<f64> {
        self.model.eval_loss(w, &SyntheticBatch::default())
    }
}

/// The regression transformer over its virtual SGLD dataset: sample i of
/// the dataset is generated deterministically from (seed, SgldData, i), so
/// mu-sized data never needs to be materialized.
pub struct RegressionTarget<'a> {
    pub model: &'a TransformerModel,
    data: DataConfig,
    cfg: SgldConfig,
    reference: TransformerBatch,
}

impl<'a> RegressionTarget<'a> {
    pub fn new(model: &'a TransformerModel, data: &DataConfig, cfg: &SgldConfig) -> Result<Self> {
        cfg.validate()?;
        data.validate()?;
        let mut target = RegressionTarget {
            model,
            data: data.clone(),
            cfg: cfg.clone(),
            reference: TransformerBatch::mean(Vec::new()),
        };
        // fixed reference batch, shared by all chains and checkpoints
        target.reference = target.draw_batch(RngKey::new(cfg.seed, Stream::SgldRef, 0, 0));
        Ok(target)
    }

    fn context_at(&self, index: u64) -> RegressionContext {
        let mut batch = sample_batch(&self.data, 1, Stream::SgldData, index);
        batch.remove(0)
    }

    fn draw_batch(&self, key: RngKey) -> TransformerBatch {
        let mut rng = key.rng();
        let m = self.cfg.batch_size;
        let k_max = self.model.cfg.max_examples as u8;
        let mut contexts = Vec::with_capacity(m);
        let mut ks = Vec::with_capacity(m);
        for _ in 0..m {
            let idx = rng.gen_range(0..self.cfg.dataset_size);
            contexts.push(self.context_at(idx));
            if self.cfg.loss_mode == LossMode::Likelihood {
                ks.push(rng.gen_range(1..=k_max));
            }
        }
        let mode = match self.cfg.loss_mode {
            LossMode::Subsequence => TokenLossMode::Mean,
            LossMode::Likelihood => TokenLossMode::Single(ks),
        };
        TransformerBatch { contexts, mode }
    }
}

impl SgldTarget for RegressionTarget<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn minibatch_grad(&self, w: &[f64], chain: u64, tau: u64) -> Result<GradResult> {
        let batch = self.draw_batch(RngKey::new(self.cfg.seed, Stream::SgldBatch, chain, tau));
        value_and_grad_flat(self.model, w, &batch)
    }

    fn reference_loss(&self, w: &[f64]) -> Result<f64> {
        self.model.eval_loss(w, &self.reference)
    }
}

/// Per-chain diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainFlags {
    pub divergent: bool,
    pub non_converged: bool,
    pub negative: bool,
    pub escaped: bool,
}

impl ChainFlags {
    pub fn is_empty(&self) -> bool {
        !(self.divergent || self.non_converged || self.negative || self.escaped)
    }

    pub fn union(self, other: ChainFlags) -> ChainFlags {
        ChainFlags {
            divergent: self.divergent || other.divergent,
            non_converged: self.non_converged || other.non_converged,
            negative: self.negative || other.negative,
            escaped: self.escaped || other.escaped,
        }
    }

    pub fn labels(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.divergent {
            v.push("divergent");
        }
        if self.non_converged {
            v.push("non_converged");
        }
        if self.negative {
            v.push("negative");
        }
        if self.escaped {
            v.push("escaped");
        }
        v
    }
}

impl std::fmt::Display for ChainFlags {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_empty() {
            write!(f, "-")
        } else {
            write!(f, "{}", self.labels().join("|"))
        }
    }
}

/// Raw output of one SGLD chain.
#[derive(Clone, Debug)]
pub struct ChainTrace {
    /// Recycled minibatch loss at each visited point w_tau, tau = 1..=T
    /// (shorter if the chain diverged).
    pub losses: Vec<f64>,
    pub divergent: bool,
    pub max_excursion: f64,
    pub final_excursion: f64,
}

/// Run one localized SGLD chain from w* and record the recycled minibatch
/// losses. A non-finite iterate truncates the trace and flags the chain
/// instead of raising.
pub fn run_chain<T: SgldTarget>(
    target: &T,
    w_star: &[f64],
    cfg: &SgldConfig,
    chain_index: u64,
) -> Result<ChainTrace> {
    cfg.validate()?;
    let d = w_star.len();
    if d != target.dim() {
        return Err(CoreError::shape(format!(
            "w* has {} entries, target expects {}",
            d,
            target.dim()
        )));
    }
    let mut w = w_star.to_vec();
    let mut noise = vec![0.0; d];
    let mut losses = Vec::with_capacity(cfg.steps_per_chain);
    let mut divergent = false;
    let mut max_exc = 0.0f64;
    let half_eps = 0.5 * cfg.epsilon;
    let noise_std = cfg.epsilon.sqrt();

    for tau in 1..=cfg.steps_per_chain as u64 {
        let gr = match target.minibatch_grad(&w, chain_index, tau) {
            Ok(g) => g,
            Err(CoreError::NonFinite { .. }) => {
                divergent = true;
                break;
            }
            Err(e) => return Err(e),
        };
        if !gr.loss.is_finite() {
            divergent = true;
            break;
        }
        losses.push(gr.loss);

        fill_standard_normal(
            RngKey::new(cfg.seed, Stream::SgldNoise, chain_index, tau),
            &mut noise,
        );
        let mut exc2 = 0.0;
        let mut finite = true;
        for i in 0..d {
            let drift = cfg.nbeta * gr.grad[i] + 0.5 * cfg.gamma * (w[i] - w_star[i]);
            w[i] += -half_eps * drift + noise_std * noise[i];
            if !w[i].is_finite() {
                finite = false;
            }
            let dev = w[i] - w_star[i];
            exc2 += dev * dev;
        }
        if !finite {
            divergent = true;
            break;
        }
        max_exc = max_exc.max(exc2.sqrt());
    }

    let final_exc = w
        .iter()
        .zip(w_star)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(ChainTrace {
        losses,
        divergent,
        max_excursion: max_exc,
        final_excursion: if final_exc.is_finite() { final_exc } else { f64::INFINITY },
    })
}

/// Running LLC estimate along a chain:
/// lambda_tau = ((tau-1)*lambda_{tau-1} + nbeta*(loss_tau - init_loss)) / tau,
/// seeded with lambda_0 = 0. Element 0 of the result is that seed; the
/// final element equals the batch-mean estimator algebraically.
pub fn online_trace(losses: &[f64], nbeta: f64, init_loss: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(losses.len() + 1);
    out.push(0.0);
    let mut prev = 0.0;
    for (i, &l) in losses.iter().enumerate() {
        let tau = (i + 1) as f64;
        let cur = ((tau - 1.0) * prev + nbeta * (l - init_loss)) / tau;
        out.push(cur);
        prev = cur;
    }
    out
}

/// Inputs to per-chain diagnosis that depend on the whole estimate.
#[derive(Clone, Copy, Debug)]
pub struct ChainStats {
    pub init_loss: f64,
    pub post_burn_mean_loss: f64,
    /// Standard error of the post-burn-in loss mean.
    pub loss_sem: f64,
    /// Standard deviation of per-chain estimates across chains.
    pub cross_chain_std: f64,
    pub divergent_run: bool,
}

const DIVERGENT_LAMBDA: f64 = 1e6;

/// Classify a chain's failure modes from its running-estimate trace.
pub fn diagnose_chain(lambda_trace: &[f64], stats: &ChainStats, _cfg: &SgldConfig) -> ChainFlags {
    let mut flags = ChainFlags::default();
    if stats.divergent_run
        || lambda_trace.iter().any(|x| !x.is_finite())
        || lambda_trace.iter().any(|x| x.abs() > DIVERGENT_LAMBDA)
    {
        flags.divergent = true;
    }
    let n = lambda_trace.len();
    if n >= 10 {
        let last = lambda_trace[n - 1];
        // slope of the running estimate over its last fifth, per step
        let tail = &lambda_trace[n - n / 5..];
        let m = tail.len() as f64;
        let xbar = (m - 1.0) / 2.0;
        let ybar = tail.iter().sum::<f64>() / m;
        let mut sxx = 0.0;
        let mut sxy = 0.0;
        for (i, &y) in tail.iter().enumerate() {
            let dx = i as f64 - xbar;
            sxx += dx * dx;
            sxy += dx * (y - ybar);
        }
        let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        // non-converged: drifting more than 1% of the estimate per 100 steps
        if (slope * 100.0).abs() > 0.01 * last.abs().max(1e-12) {
            flags.non_converged = true;
        }
        if last < -2.0 * stats.cross_chain_std {
            flags.negative = true;
        }
    }
    let noise_floor = 3.0 * stats.loss_sem + 1e-12 * (1.0 + stats.init_loss.abs());
    if stats.post_burn_mean_loss < stats.init_loss - noise_floor {
        flags.escaped = true;
    }
    flags
}

/// One chain's processed record.
#[derive(Clone, Debug)]
pub struct ChainRecord {
    pub losses: Vec<f64>,
    /// Running estimate, length losses.len() + 1 (leading 0).
    pub lambda_trace: Vec<f64>,
    pub lambda: f64,
    pub flags: ChainFlags,
    /// Chains excluded from the aggregate (divergent ones).
    pub included: bool,
    pub max_excursion: f64,
}

/// The LLC estimate with per-chain traces and diagnostics.
#[derive(Clone, Debug)]
pub struct LlcEstimate {
    pub lambda_hat: f64,
    pub per_chain: Vec<f64>,
    pub chains: Vec<ChainRecord>,
    pub init_loss: f64,
    /// Across-included-chain standard deviation of per-chain estimates.
    pub std: f64,
    /// Union of chain flags.
    pub flags: ChainFlags,
}

/// Estimate the LLC at w*: run C chains, average the post-burn-in
/// recycled losses of the non-divergent ones, and subtract the reference
/// loss at w*. Divergent chains are excluded and surfaced in diagnostics;
/// if every chain diverges the estimate fails.
pub fn estimate_llc<T: SgldTarget>(
    target: &T,
    w_star: &[f64],
    cfg: &SgldConfig,
) -> Result<LlcEstimate> {
    cfg.validate()?;
    let init_loss = target.reference_loss(w_star)?;
    if !init_loss.is_finite() {
        return Err(CoreError::NonFinite {
            location: "reference loss".into(),
        });
    }

    let raw: Vec<Result<ChainTrace>> =
        map_indexed(cfg.chains, |c| run_chain(target, w_star, cfg, c as u64));
    let mut traces = Vec::with_capacity(cfg.chains);
    for r in raw {
        traces.push(r?);
    }

    // per-chain estimates over post-burn-in draws
    let mut per_chain = Vec::with_capacity(cfg.chains);
    let mut post_stats = Vec::with_capacity(cfg.chains);
    for t in &traces {
        let post: &[f64] = if t.losses.len() > cfg.burn_in {
            &t.losses[cfg.burn_in..]
        } else {
            &[]
        };
        let (mean, sem) = if post.is_empty() {
            (f64::NAN, f64::INFINITY)
        } else {
            let m = post.iter().sum::<f64>() / post.len() as f64;
            let var = post.iter().map(|x| (x - m).powi(2)).sum::<f64>()
                / post.len().max(2) as f64;
            (m, (var / post.len() as f64).sqrt())
        };
        per_chain.push(cfg.nbeta * (mean - init_loss));
        post_stats.push((mean, sem));
    }

    // provisional inclusion: finite, non-divergent chains
    let prelim: Vec<f64> = traces
        .iter()
        .zip(&per_chain)
        .filter(|(t, l)| !t.divergent && l.is_finite())
        .map(|(_, &l)| l)
        .collect();
    let cross_std = spread(&prelim);

    let mut chains = Vec::with_capacity(cfg.chains);
    let mut union = ChainFlags::default();
    for (i, trace) in traces.into_iter().enumerate() {
        let lambda_trace = online_trace(&trace.losses, cfg.nbeta, init_loss);
        let (mean, sem) = post_stats[i];
        let stats = ChainStats {
            init_loss,
            post_burn_mean_loss: mean,
            loss_sem: sem,
            cross_chain_std: cross_std,
            divergent_run: trace.divergent,
        };
        let flags = diagnose_chain(&lambda_trace, &stats, cfg);
        let included = !flags.divergent && per_chain[i].is_finite();
        union = union.union(flags);
        chains.push(ChainRecord {
            losses: trace.losses,
            lambda_trace,
            lambda: per_chain[i],
            flags,
            included,
            max_excursion: trace.max_excursion,
        });
    }

    let included: Vec<f64> = chains
        .iter()
        .filter(|c| c.included)
        .map(|c| c.lambda)
        .collect();
    if included.is_empty() {
        return Err(CoreError::Estimation(format!(
            "all {} chains diverged (flags: {})",
            cfg.chains, union
        )));
    }
    let lambda_hat = included.iter().sum::<f64>() / included.len() as f64;

    Ok(LlcEstimate {
        lambda_hat,
        per_chain,
        chains,
        init_loss,
        std: spread(&included),
        flags: union,
    })
}

fn spread(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

// ---------------------------------------------------------------------------
// Calibration sweep
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CalibrationGrid {
    pub epsilons: Vec<f64>,
    pub beta_tildes: Vec<f64>,
    pub gamma_tildes: Vec<f64>,
    /// Cap on the auto-scaled chain length.
    #[serde(default = "default_sweep_cap")]
    pub max_steps: usize,
}

fn default_sweep_cap() -> usize {
    400_000
}

impl CalibrationGrid {
    /// A default grid suitable for the analytic potentials: weak
    /// localization in step units and inverse temperatures well above the
    /// neural-network defaults, three step sizes per pair. Unstable
    /// combinations flag themselves divergent and drop out.
    pub fn for_potentials() -> CalibrationGrid {
        CalibrationGrid {
            epsilons: vec![3e-5, 1e-4, 3e-4],
            beta_tildes: vec![0.01, 0.03, 0.1],
            gamma_tildes: vec![1e-4, 3e-4],
            max_steps: 200_000,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CalibrationPoint {
    pub epsilon: f64,
    pub beta_tilde: f64,
    pub gamma_tilde: f64,
    pub nbeta: f64,
    pub gamma: f64,
    pub steps_per_chain: usize,
    pub lambda_hat: f64,
    pub std: f64,
    pub flags: ChainFlags,
    pub admissible: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct CalibrationOutcome {
    pub points: Vec<CalibrationPoint>,
    /// Index into `points` of the recommended setting, if any pair was
    /// admissible.
    pub recommended: Option<usize>,
}

impl CalibrationOutcome {
    pub fn recommended_point(&self) -> Option<&CalibrationPoint> {
        self.recommended.map(|i| &self.points[i])
    }
}

/// Grid sweep over the (eps, beta_tilde, gamma_tilde) reparametrization.
///
/// A point is admissible when no chain raises a flag. Among admissible
/// (beta_tilde, gamma_tilde) pairs the sweep prefers, in order: small
/// variation of lambda_hat across eps (robustness), small gamma_tilde
/// (weak localization), large beta_tilde (low temperature); within the
/// chosen pair it returns the largest admissible eps, which converges in
/// the fewest steps.
pub fn calibration_sweep<T: SgldTarget>(
    target: &T,
    w_star: &[f64],
    grid: &CalibrationGrid,
    base: &SgldConfig,
) -> Result<CalibrationOutcome> {
    if grid.epsilons.is_empty() || grid.beta_tildes.is_empty() || grid.gamma_tildes.is_empty() {
        return Err(CoreError::config("grid", "sweep grid must be nonempty"));
    }
    let mut points = Vec::new();
    for &gt in &grid.gamma_tildes {
        for &bt in &grid.beta_tildes {
            for &eps in &grid.epsilons {
                let cfg = base.from_reparametrized(eps, bt, gt, grid.max_steps);
                let point = match estimate_llc(target, w_star, &cfg) {
                    Ok(est) => CalibrationPoint {
                        epsilon: eps,
                        beta_tilde: bt,
                        gamma_tilde: gt,
                        nbeta: cfg.nbeta,
                        gamma: cfg.gamma,
                        steps_per_chain: cfg.steps_per_chain,
                        lambda_hat: est.lambda_hat,
                        std: est.std,
                        admissible: est.flags.is_empty(),
                        flags: est.flags,
                    },
                    Err(_) => CalibrationPoint {
                        epsilon: eps,
                        beta_tilde: bt,
                        gamma_tilde: gt,
                        nbeta: cfg.nbeta,
                        gamma: cfg.gamma,
                        steps_per_chain: cfg.steps_per_chain,
                        lambda_hat: f64::NAN,
                        std: f64::NAN,
                        admissible: false,
                        flags: ChainFlags {
                            divergent: true,
                            ..ChainFlags::default()
                        },
                    },
                };
                points.push(point);
            }
        }
    }

    // rank (beta_tilde, gamma_tilde) pairs by eps-robustness
    #[derive(Debug)]
    struct PairScore {
        spread: f64,
        gamma_tilde: f64,
        beta_tilde: f64,
        best_index: usize,
    }
    let mut pairs: Vec<PairScore> = Vec::new();
    for &gt in &grid.gamma_tildes {
        for &bt in &grid.beta_tildes {
            let members: Vec<(usize, &CalibrationPoint)> = points
                .iter()
                .enumerate()
                .filter(|(_, p)| {
                    p.admissible && p.beta_tilde == bt && p.gamma_tilde == gt
                })
                .collect();
            if members.is_empty() {
                continue;
            }
            let vals: Vec<f64> = members.iter().map(|(_, p)| p.lambda_hat).collect();
            let (lo, hi) = vals
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| {
                    (l.min(v), h.max(v))
                });
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let spread = if vals.len() >= 2 {
                (hi - lo) / mean.abs().max(1e-12)
            } else {
                // single admissible eps: usable but not robustness-checked
                f64::MAX / 4.0
            };
            let best_index = members
                .iter()
                .max_by(|(_, a), (_, b)| a.epsilon.total_cmp(&b.epsilon))
                .map(|(i, _)| *i)
                .expect("nonempty");
            pairs.push(PairScore {
                spread,
                gamma_tilde: gt,
                beta_tilde: bt,
                best_index,
            });
        }
    }
    if pairs.is_empty() {
        return Ok(CalibrationOutcome {
            points,
            recommended: None,
        });
    }
    let best_spread = pairs
        .iter()
        .map(|p| p.spread)
        .fold(f64::INFINITY, f64::min);
    // near-ties in robustness resolved toward small gamma, large beta
    let threshold = best_spread.max(1e-3) * 1.5;
    let chosen = pairs
        .iter()
        .filter(|p| p.spread <= threshold)
        .min_by(|a, b| {
            a.gamma_tilde
                .total_cmp(&b.gamma_tilde)
                .then(b.beta_tilde.total_cmp(&a.beta_tilde))
        })
        .expect("filter keeps the argmin");
    Ok(CalibrationOutcome {
        points,
        recommended: Some(chosen.best_index),
    })
}

// ---------------------------------------------------------------------------
// LLC over training
// ---------------------------------------------------------------------------

/// A checkpoint handed to the curve estimator: parameters or the reason
/// they could not be loaded.
pub struct CurveInput {
    pub step: u64,
    pub params: std::result::Result<Vec<f64>, String>,
}

/// Estimate the LLC at every checkpoint with the identical seed, so the
/// noise and batch schedules match across checkpoints. Per-checkpoint
/// failures become gaps, not aborts.
pub fn estimate_llc_curve<T: SgldTarget>(
    target: &T,
    checkpoints: Vec<CurveInput>,
    cfg: &SgldConfig,
) -> (LlcCurve, Vec<LlcEstimate>) {
    let mut curve = LlcCurve::default();
    let mut estimates = Vec::new();
    for ck in checkpoints {
        match ck.params {
            Err(reason) => curve.gaps.push((ck.step, reason)),
            Ok(w) => match estimate_llc(target, &w, cfg) {
                Ok(est) => {
                    curve.points.push(CurvePoint {
                        step: ck.step,
                        lambda_hat: est.lambda_hat,
                        std: est.std,
                        loss: None,
                    });
                    estimates.push(est);
                }
                Err(e) => curve.gaps.push((ck.step, e.to_string())),
            },
        }
    }
    (curve, estimates)
}
