//! Decoder-only pre-layer-norm transformer for in-context linear regression.
//!
//! A context of K (x, y) pairs is encoded as 2K tokens of dimension D+1:
//! x-tokens carry x in the last D coordinates, y-tokens carry y in the
//! first. The prediction for y_k is read from the first output coordinate
//! at the x_k position. Forward and backward are written once, generically
//! over [`Scalar`], so the same code yields f64 gradients, f32 training
//! steps, and exact Hessian-vector products through dual numbers.

use crate::data::RegressionContext;
use crate::error::{CoreError, Result};
use crate::model::DifferentiableLoss;
use crate::par::{chunked_reduce, BATCH_CHUNK};
use crate::params::{Layout, ParameterVector};
use crate::rng::{fill_truncated_normal, RngKey, Stream};
use crate::scalar::Scalar;
use ndarray::{s, Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Scalar precision used by the training loop. Estimation and analysis
/// always run in f64; checkpoints always store f64.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_embed: usize,
    pub d_mlp: usize,
    /// Input dimension D; token dimension is D+1.
    pub input_dim: usize,
    /// Max in-context examples K; sequence length is 2K.
    pub max_examples: usize,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default = "default_precision")]
    pub precision: Precision,
}

fn default_ln_eps() -> f64 {
    1e-5
}

fn default_init_std() -> f64 {
    0.02
}

fn default_precision() -> Precision {
    Precision::F64
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            layers: 2,
            heads: 4,
            d_embed: 64,
            d_mlp: 64,
            input_dim: 4,
            max_examples: 8,
            layer_norm_eps: default_ln_eps(),
            init_std: default_init_std(),
            precision: default_precision(),
        }
    }
}

impl TransformerConfig {
    pub fn d_head(&self) -> usize {
        self.d_embed / self.heads
    }

    pub fn token_dim(&self) -> usize {
        self.input_dim + 1
    }

    pub fn seq_len(&self) -> usize {
        2 * self.max_examples
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_embed % self.heads != 0 {
            return Err(CoreError::config(
                "model.heads",
                "d_embed must be divisible by heads",
            ));
        }
        if self.layers == 0 {
            return Err(CoreError::config("model.layers", "must be >= 1"));
        }
        if self.input_dim == 0 || self.max_examples == 0 {
            return Err(CoreError::config("model", "input_dim and max_examples must be >= 1"));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(CoreError::config("model.layer_norm_eps", "must be > 0"));
        }
        Ok(())
    }

    /// Flat parameter layout. Linear weights are stored (in, out) so the
    /// forward pass is `h.dot(&w)`; biases follow their weights.
    pub fn layout(&self) -> Result<Arc<Layout>> {
        self.validate()?;
        let (d, dm, td, t) = (self.d_embed, self.d_mlp, self.token_dim(), self.seq_len());
        let mut specs: Vec<(String, Vec<usize>)> = vec![
            ("embed.w".into(), vec![td, d]),
            ("pos.w".into(), vec![t, d]),
        ];
        for b in 0..self.layers {
            specs.push((format!("block{b}.ln1.w"), vec![d]));
            specs.push((format!("block{b}.ln1.b"), vec![d]));
            specs.push((format!("block{b}.attn.wq"), vec![d, d]));
            specs.push((format!("block{b}.attn.wk"), vec![d, d]));
            specs.push((format!("block{b}.attn.wv"), vec![d, d]));
            specs.push((format!("block{b}.attn.wo"), vec![d, d]));
            specs.push((format!("block{b}.ln2.w"), vec![d]));
            specs.push((format!("block{b}.ln2.b"), vec![d]));
            specs.push((format!("block{b}.mlp.w1"), vec![d, dm]));
            specs.push((format!("block{b}.mlp.b1"), vec![dm]));
            specs.push((format!("block{b}.mlp.w2"), vec![dm, d]));
            specs.push((format!("block{b}.mlp.b2"), vec![d]));
        }
        specs.push(("ln_f.w".into(), vec![d]));
        specs.push(("ln_f.b".into(), vec![d]));
        specs.push(("unembed.w".into(), vec![d, td]));
        specs.push(("unembed.b".into(), vec![td]));
        Ok(Arc::new(Layout::new(specs)?))
    }
}

/// Attention patterns captured during a forward pass: one row-stochastic
/// lower-triangular (seq, seq) matrix per (layer, head).
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub layers: usize,
    pub heads: usize,
    pub seq: usize,
    patterns: Vec<Array2<f64>>,
}

impl AttentionRecord {
    pub fn pattern(&self, layer: usize, head: usize) -> &Array2<f64> {
        &self.patterns[layer * self.heads + head]
    }

    /// Assemble a record from raw patterns, indexed layer-major.
    pub fn from_patterns(
        layers: usize,
        heads: usize,
        seq: usize,
        patterns: Vec<Array2<f64>>,
    ) -> Result<Self> {
        if patterns.len() != layers * heads
            || patterns.iter().any(|p| p.dim() != (seq, seq))
        {
            return Err(CoreError::shape(
                "attention record needs layers*heads patterns of shape (seq, seq)",
            ));
        }
        Ok(AttentionRecord {
            layers,
            heads,
            seq,
            patterns,
        })
    }
}

/// How tokens contribute to the batch loss.
#[derive(Clone, Debug)]
pub enum TokenLossMode {
    /// Mean of squared errors over all K predictions (the training loss).
    Mean,
    /// Per context, squared error on prediction k only (1-based); this is
    /// the likelihood-style loss with a sampled context length.
    Single(Vec<u8>),
}

/// A batch handed to the differentiable-loss interface.
#[derive(Clone, Debug)]
pub struct TransformerBatch {
    pub contexts: Vec<RegressionContext>,
    pub mode: TokenLossMode,
}

impl TransformerBatch {
    pub fn mean(contexts: Vec<RegressionContext>) -> Self {
        TransformerBatch {
            contexts,
            mode: TokenLossMode::Mean,
        }
    }
}

/// The regression transformer: config plus its parameter layout.
#[derive(Clone, Debug)]
pub struct TransformerModel {
    pub cfg: TransformerConfig,
    layout: Arc<Layout>,
}

impl TransformerModel {
    pub fn new(cfg: TransformerConfig) -> Result<Self> {
        let layout = cfg.layout()?;
        Ok(TransformerModel { cfg, layout })
    }

    /// Truncated-normal initialization (std `init_std`, cut at 2 std) for
    /// linear and embedding weights; zeros for biases; ones for layer-norm
    /// weights.
    pub fn init_params(&self, seed: u64) -> ParameterVector {
        let mut values = vec![0.0; self.layout.total()];
        for (i, seg) in self.layout.segments().iter().enumerate() {
            let range = seg.offset..seg.offset + seg.len();
            let slot = &mut values[range];
            let name = seg.name.as_str();
            let is_ln = name.contains(".ln") || name.starts_with("ln_f");
            let is_weight = [".w", ".wq", ".wk", ".wv", ".wo", ".w1", ".w2"]
                .iter()
                .any(|suf| name.ends_with(suf));
            if is_ln {
                if is_weight {
                    slot.fill(1.0);
                }
                // layer-norm biases stay zero
            } else if is_weight {
                fill_truncated_normal(
                    RngKey::new(seed, Stream::Init, i as u64, 0),
                    self.cfg.init_std,
                    2.0,
                    slot,
                );
            }
            // linear biases stay zero
        }
        ParameterVector::new(values, self.layout.clone()).expect("init is finite")
    }

    fn seg<'a, S: Scalar>(&self, params: &'a [S], name: &str) -> ArrayView2<'a, S> {
        let seg = self.layout.segment(name).expect("segment exists");
        let (r, c) = match seg.shape.as_slice() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => unreachable!("segments are 1- or 2-d"),
        };
        ArrayView2::from_shape((r, c), &params[seg.offset..seg.offset + seg.len()])
            .expect("shape matches")
    }

    fn seg1<'a, S: Scalar>(&self, params: &'a [S], name: &str) -> &'a [S] {
        let seg = self.layout.segment(name).expect("segment exists");
        &params[seg.offset..seg.offset + seg.len()]
    }
}

/// Encode a context as its 2K x (D+1) token matrix.
pub fn tokenize(cfg: &TransformerConfig, ctx: &RegressionContext) -> Result<Array2<f64>> {
    let (d, k) = (cfg.input_dim, cfg.max_examples);
    if ctx.xs.len() != k || ctx.ys.len() != k || ctx.xs.iter().any(|x| x.len() != d) {
        return Err(CoreError::shape(format!(
            "context has {} examples of dim {}, model expects K={k}, D={d}",
            ctx.xs.len(),
            ctx.xs.first().map_or(0, Vec::len),
        )));
    }
    let mut tokens = Array2::zeros((2 * k, d + 1));
    for i in 0..k {
        for j in 0..d {
            tokens[[2 * i, 1 + j]] = ctx.xs[i][j];
        }
        tokens[[2 * i + 1, 0]] = ctx.ys[i];
    }
    Ok(tokens)
}

// Tanh-approximation GELU and its derivative.
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    let u = S::from_f64(GELU_C) * (x + S::from_f64(GELU_A) * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_prime<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    let u = S::from_f64(GELU_C) * (x + S::from_f64(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = S::from_f64(GELU_C) * (S::one() + S::from_f64(3.0 * GELU_A) * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}

/// Layer norm caches needed by the backward pass.
struct LnCache<S: Scalar> {
    normalized: Array2<S>,
    rstd: Array1<S>,
}

fn layer_norm<S: Scalar>(x: &Array2<S>, w: &[S], b: &[S], eps: f64) -> (Array2<S>, LnCache<S>) {
    let (t, d) = x.dim();
    let inv_d = S::from_f64(1.0 / d as f64);
    let mut normalized = Array2::zeros((t, d));
    let mut out = Array2::zeros((t, d));
    let mut rstd = Array1::zeros(t);
    for i in 0..t {
        let row = x.row(i);
        let mut mean = S::zero();
        for &v in row {
            mean += v;
        }
        mean = mean * inv_d;
        let mut var = S::zero();
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var = var * inv_d;
        let r = S::one() / (var + S::from_f64(eps)).sqrt();
        rstd[i] = r;
        for j in 0..d {
            let n = (row[j] - mean) * r;
            normalized[[i, j]] = n;
            out[[i, j]] = n * w[j] + b[j];
        }
    }
    (out, LnCache { normalized, rstd })
}

/// dL/dx for layer norm given dL/dy; accumulates dw, db.
fn layer_norm_backward<S: Scalar>(
    dy: &Array2<S>,
    cache: &LnCache<S>,
    w: &[S],
    dw: &mut [S],
    db: &mut [S],
) -> Array2<S> {
    let (t, d) = dy.dim();
    let inv_d = S::from_f64(1.0 / d as f64);
    let mut dx = Array2::zeros((t, d));
    for i in 0..t {
        let mut mean_dn = S::zero();
        let mut mean_dn_n = S::zero();
        for j in 0..d {
            let g = dy[[i, j]];
            dw[j] += g * cache.normalized[[i, j]];
            db[j] += g;
            let dn = g * w[j];
            mean_dn += dn;
            mean_dn_n += dn * cache.normalized[[i, j]];
        }
        mean_dn = mean_dn * inv_d;
        mean_dn_n = mean_dn_n * inv_d;
        let r = cache.rstd[i];
        for j in 0..d {
            let dn = dy[[i, j]] * w[j];
            dx[[i, j]] = r * (dn - mean_dn - cache.normalized[[i, j]] * mean_dn_n);
        }
    }
    dx
}

/// Everything the backward pass needs from one block's forward.
struct BlockTape<S: Scalar> {
    ln1: LnCache<S>,
    q: Array2<S>,
    k: Array2<S>,
    v: Array2<S>,
    /// Softmax patterns per head.
    alphas: Vec<Array2<S>>,
    ctx: Array2<S>,
    ln2: LnCache<S>,
    ln2_out: Array2<S>,
    preact: Array2<S>,
    act: Array2<S>,
}

struct Tape<S: Scalar> {
    tokens: Array2<S>,
    blocks: Vec<BlockTape<S>>,
    ln_f: LnCache<S>,
    ln_f_out: Array2<S>,
    /// K predictions.
    preds: Vec<S>,
}

impl TransformerModel {
    /// Full forward pass over one context, keeping the tape.
    fn forward_tape<S: Scalar>(
        &self,
        params: &[S],
        ctx: &RegressionContext,
        mut capture: Option<&mut Vec<Array2<f64>>>,
    ) -> Result<Tape<S>> {
        let cfg = &self.cfg;
        let (t, d, h, dh) = (cfg.seq_len(), cfg.d_embed, cfg.heads, cfg.d_head());
        let eps = cfg.layer_norm_eps;
        let tok_f64 = tokenize(cfg, ctx)?;
        let tokens = tok_f64.mapv(S::from_f64);

        // embedding + learnable positional embedding
        let we = self.seg(params, "embed.w");
        let pos = self.seg(params, "pos.w");
        let mut hcur = tokens.dot(&we) + &pos;

        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let neg_inf = S::from_f64(f64::NEG_INFINITY);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for b in 0..cfg.layers {
            let attn_input = hcur.clone();
            let w1n = self.seg1(params, &format!("block{b}.ln1.w"));
            let b1n = self.seg1(params, &format!("block{b}.ln1.b"));
            let (n1, ln1) = layer_norm(&attn_input, w1n, b1n, eps);

            let q = n1.dot(&self.seg(params, &format!("block{b}.attn.wq")));
            let k = n1.dot(&self.seg(params, &format!("block{b}.attn.wk")));
            let v = n1.dot(&self.seg(params, &format!("block{b}.attn.wv")));

            let mut ctxm: Array2<S> = Array2::zeros((t, d));
            let mut alphas = Vec::with_capacity(h);
            for head in 0..h {
                let cols = head * dh..(head + 1) * dh;
                let qh = q.slice(s![.., cols.clone()]);
                let kh = k.slice(s![.., cols.clone()]);
                let vh = v.slice(s![.., cols.clone()]);
                let mut alpha: Array2<S> = Array2::zeros((t, t));
                for i in 0..t {
                    // causal scores over j <= i, max-subtracted softmax
                    let mut mx = neg_inf;
                    let mut srow = vec![S::zero(); i + 1];
                    for (j, sc) in srow.iter_mut().enumerate() {
                        let mut acc = S::zero();
                        for c in 0..dh {
                            acc += qh[[i, c]] * kh[[j, c]];
                        }
                        *sc = acc * scale;
                        mx = mx.smax(*sc);
                    }
                    let mut denom = S::zero();
                    for sc in srow.iter_mut() {
                        *sc = (*sc - mx).exp();
                        denom += *sc;
                    }
                    let inv = S::one() / denom;
                    for (j, sc) in srow.iter().enumerate() {
                        alpha[[i, j]] = *sc * inv;
                    }
                    // context vector for this position
                    for c in 0..dh {
                        let mut acc = S::zero();
                        for (j, sc) in srow.iter().enumerate() {
                            acc += *sc * vh[[j, c]];
                        }
                        ctxm[[i, head * dh + c]] = acc * inv;
                    }
                }
                if let Some(rec) = capture.as_deref_mut() {
                    rec.push(alpha.mapv(|a| a.value()));
                }
                alphas.push(alpha);
            }

            let attn_out = ctxm.dot(&self.seg(params, &format!("block{b}.attn.wo")));
            hcur = attn_input.clone() + attn_out;

            let mlp_input = hcur.clone();
            let w2n = self.seg1(params, &format!("block{b}.ln2.w"));
            let b2n = self.seg1(params, &format!("block{b}.ln2.b"));
            let (n2, ln2) = layer_norm(&mlp_input, w2n, b2n, eps);
            let preact = n2.dot(&self.seg(params, &format!("block{b}.mlp.w1")));
            let bias1 = self.seg1(params, &format!("block{b}.mlp.b1"));
            let mut preact = preact;
            for mut row in preact.rows_mut() {
                for (x, &bb) in row.iter_mut().zip(bias1) {
                    *x += bb;
                }
            }
            let act = preact.mapv(gelu);
            let mlp_out = act.dot(&self.seg(params, &format!("block{b}.mlp.w2")));
            let bias2 = self.seg1(params, &format!("block{b}.mlp.b2"));
            hcur = mlp_input.clone() + mlp_out;
            for mut row in hcur.rows_mut() {
                for (x, &bb) in row.iter_mut().zip(bias2) {
                    *x += bb;
                }
            }

            if hcur.iter().any(|x| !x.is_finite_value()) {
                return Err(CoreError::NonFinite {
                    location: format!("block{b}"),
                });
            }

            blocks.push(BlockTape {
                ln1,
                q,
                k,
                v,
                alphas,
                ctx: ctxm,
                ln2,
                ln2_out: n2,
                preact,
                act,
            });
        }

        let wfn = self.seg1(params, "ln_f.w");
        let bfn = self.seg1(params, "ln_f.b");
        let (zf, ln_f) = layer_norm(&hcur, wfn, bfn, eps);
        let wu = self.seg(params, "unembed.w");
        let bu = self.seg1(params, "unembed.b");
        // predictions: first output coordinate at each x position
        let mut preds = Vec::with_capacity(cfg.max_examples);
        for kk in 0..cfg.max_examples {
            let row = zf.row(2 * kk);
            let mut acc = S::zero();
            for j in 0..d {
                acc += row[j] * wu[[j, 0]];
            }
            preds.push(acc + bu[0]);
        }
        if preds.iter().any(|p| !p.is_finite_value()) {
            return Err(CoreError::NonFinite {
                location: "unembed".into(),
            });
        }

        Ok(Tape {
            tokens,
            blocks,
            ln_f,
            ln_f_out: zf,
            preds,
        })
    }

    /// Backward pass: given dL/dŷ_k, accumulate parameter gradients.
    fn backward_tape<S: Scalar>(
        &self,
        params: &[S],
        tape: &Tape<S>,
        dpreds: &[S],
        grad: &mut [S],
    ) {
        let cfg = &self.cfg;
        let (t, d, h, dh) = (cfg.seq_len(), cfg.d_embed, cfg.heads, cfg.d_head());
        let layout = self.layout.clone();
        let range = |name: &str| layout.range(name).expect("segment exists");

        // unembedding: only output coordinate 0 at x positions receives signal
        let wu = self.seg(params, "unembed.w");
        let mut dzf: Array2<S> = Array2::zeros((t, d));
        {
            let gw = range("unembed.w");
            let gb = range("unembed.b");
            let td = cfg.token_dim();
            for (kk, &dp) in dpreds.iter().enumerate() {
                let pos = 2 * kk;
                for j in 0..d {
                    grad[gw.start + j * td] += dp * tape.ln_f_out[[pos, j]];
                    dzf[[pos, j]] += dp * wu[[j, 0]];
                }
                grad[gb.start] += dp;
            }
        }

        // final layer norm
        let mut dh_res = {
            let wfn = self.seg1(params, "ln_f.w");
            let (gw, gb) = (range("ln_f.w"), range("ln_f.b"));
            let (mut dwv, mut dbv) = (vec![S::zero(); d], vec![S::zero(); d]);
            let dx = layer_norm_backward(&dzf, &tape.ln_f, wfn, &mut dwv, &mut dbv);
            for j in 0..d {
                grad[gw.start + j] += dwv[j];
                grad[gb.start + j] += dbv[j];
            }
            dx
        };

        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        for b in (0..cfg.layers).rev() {
            let tape_b = &tape.blocks[b];

            // ---- MLP path ----
            // h_out = mlp_input + gelu(LN2(mlp_input)·W1 + b1)·W2 + b2
            let w2 = self.seg(params, &format!("block{b}.mlp.w2"));
            let w1 = self.seg(params, &format!("block{b}.mlp.w1"));
            {
                let g = range(&format!("block{b}.mlp.b2"));
                for i in 0..t {
                    for j in 0..d {
                        grad[g.start + j] += dh_res[[i, j]];
                    }
                }
            }
            // dW2 += act^T · dh ; dact = dh · W2^T
            {
                let dm = cfg.d_mlp;
                let g = range(&format!("block{b}.mlp.w2"));
                let dw2 = tape_b.act.t().dot(&dh_res);
                for r in 0..dm {
                    for c in 0..d {
                        grad[g.start + r * d + c] += dw2[[r, c]];
                    }
                }
            }
            let dact = dh_res.dot(&w2.t());
            let mut dpre = dact;
            ndarray::Zip::from(&mut dpre)
                .and(&tape_b.preact)
                .for_each(|dp, &u| *dp = *dp * gelu_prime(u));
            {
                let dm = cfg.d_mlp;
                let gb1 = range(&format!("block{b}.mlp.b1"));
                for i in 0..t {
                    for j in 0..dm {
                        grad[gb1.start + j] += dpre[[i, j]];
                    }
                }
                let gw1 = range(&format!("block{b}.mlp.w1"));
                let dw1 = tape_b.ln2_out.t().dot(&dpre);
                for r in 0..d {
                    for c in 0..dm {
                        grad[gw1.start + r * dm + c] += dw1[[r, c]];
                    }
                }
            }
            let dn2 = dpre.dot(&w1.t());
            {
                let w2n = self.seg1(params, &format!("block{b}.ln2.w"));
                let (gw, gb) = (
                    range(&format!("block{b}.ln2.w")),
                    range(&format!("block{b}.ln2.b")),
                );
                let (mut dwv, mut dbv) = (vec![S::zero(); d], vec![S::zero(); d]);
                let dx = layer_norm_backward(&dn2, &tape_b.ln2, w2n, &mut dwv, &mut dbv);
                for j in 0..d {
                    grad[gw.start + j] += dwv[j];
                    grad[gb.start + j] += dbv[j];
                }
                // residual: d(mlp_input) = dh (direct) + LN path
                dh_res = dh_res + dx;
            }

            // ---- attention path ----
            // h_mid = attn_input + (softmax(QK^T)·V per head, concat)·Wo
            let wo = self.seg(params, &format!("block{b}.attn.wo"));
            {
                let g = range(&format!("block{b}.attn.wo"));
                let dwo = tape_b.ctx.t().dot(&dh_res);
                for r in 0..d {
                    for c in 0..d {
                        grad[g.start + r * d + c] += dwo[[r, c]];
                    }
                }
            }
            let dctx = dh_res.dot(&wo.t());
            let mut dq: Array2<S> = Array2::zeros((t, d));
            let mut dk: Array2<S> = Array2::zeros((t, d));
            let mut dv: Array2<S> = Array2::zeros((t, d));
            for head in 0..h {
                let cols = head * dh..(head + 1) * dh;
                let alpha = &tape_b.alphas[head];
                let qh = tape_b.q.slice(s![.., cols.clone()]);
                let kh = tape_b.k.slice(s![.., cols.clone()]);
                let vh = tape_b.v.slice(s![.., cols.clone()]);
                for i in 0..t {
                    // dalpha_ij = sum_c dctx[i, c] * v[j, c];  j <= i
                    // softmax backward: ds_j = alpha_j (dalpha_j - sum alpha dalpha)
                    let mut dot = S::zero();
                    let mut dalpha = vec![S::zero(); i + 1];
                    for (j, da) in dalpha.iter_mut().enumerate() {
                        let mut acc = S::zero();
                        for c in 0..dh {
                            acc += dctx[[i, head * dh + c]] * vh[[j, c]];
                        }
                        *da = acc;
                        dot += acc * alpha[[i, j]];
                    }
                    for (j, da) in dalpha.iter().enumerate() {
                        let a = alpha[[i, j]];
                        let ds = a * (*da - dot) * scale;
                        // dq[i] += ds * k[j]; dk[j] += ds * q[i]
                        for c in 0..dh {
                            dq[[i, head * dh + c]] += ds * kh[[j, c]];
                            dk[[j, head * dh + c]] += ds * qh[[i, c]];
                        }
                        // dv[j] += alpha_ij * dctx[i]
                        for c in 0..dh {
                            dv[[j, head * dh + c]] += a * dctx[[i, head * dh + c]];
                        }
                    }
                }
            }
            // weight grads and dn1
            let n1 = {
                // recompute LN1 output from cache (normalized·w + b not needed:
                // use normalized and weights)
                let w1n = self.seg1(params, &format!("block{b}.ln1.w"));
                let b1n = self.seg1(params, &format!("block{b}.ln1.b"));
                let mut n1 = tape_b.ln1.normalized.clone();
                for mut row in n1.rows_mut() {
                    for (j, x) in row.iter_mut().enumerate() {
                        *x = *x * w1n[j] + b1n[j];
                    }
                }
                n1
            };
            let mut dn1 = Array2::zeros((t, d));
            for (dmat, name) in [(&dq, "wq"), (&dk, "wk"), (&dv, "wv")] {
                let g = range(&format!("block{b}.attn.{name}"));
                let dw = n1.t().dot(dmat);
                for r in 0..d {
                    for c in 0..d {
                        grad[g.start + r * d + c] += dw[[r, c]];
                    }
                }
                let w = self.seg(params, &format!("block{b}.attn.{name}"));
                dn1 = dn1 + dmat.dot(&w.t());
            }
            {
                let w1n = self.seg1(params, &format!("block{b}.ln1.w"));
                let (gw, gb) = (
                    range(&format!("block{b}.ln1.w")),
                    range(&format!("block{b}.ln1.b")),
                );
                let (mut dwv, mut dbv) = (vec![S::zero(); d], vec![S::zero(); d]);
                let dx = layer_norm_backward(&dn1, &tape_b.ln1, w1n, &mut dwv, &mut dbv);
                for j in 0..d {
                    grad[gw.start + j] += dwv[j];
                    grad[gb.start + j] += dbv[j];
                }
                dh_res = dh_res + dx;
            }
        }

        // embedding and positional embedding
        {
            let g = range("embed.w");
            let dwe = tape.tokens.t().dot(&dh_res);
            let td = cfg.token_dim();
            for r in 0..td {
                for c in 0..d {
                    grad[g.start + r * d + c] += dwe[[r, c]];
                }
            }
            let gp = range("pos.w");
            for i in 0..t {
                for j in 0..d {
                    grad[gp.start + i * d + j] += dh_res[[i, j]];
                }
            }
        }
    }

    /// Predictions for one context (f64 path), optionally capturing
    /// attention patterns.
    pub fn forward(
        &self,
        params: &[f64],
        ctx: &RegressionContext,
        capture: bool,
    ) -> Result<(Vec<f64>, Option<AttentionRecord>)> {
        let mut patterns = capture.then(Vec::new);
        let tape = self.forward_tape(params, ctx, patterns.as_mut())?;
        let record = patterns.map(|p| AttentionRecord {
            layers: self.cfg.layers,
            heads: self.cfg.heads,
            seq: self.cfg.seq_len(),
            patterns: p,
        });
        Ok((tape.preds, record))
    }

    /// Mean squared-error loss over a batch (forward only).
    pub fn batch_loss(&self, params: &[f64], contexts: &[RegressionContext]) -> Result<f64> {
        let totals = chunked_reduce(
            contexts.len(),
            BATCH_CHUNK,
            |r| -> Result<f64> {
                let mut acc = 0.0;
                for ctx in &contexts[r] {
                    let (preds, _) = self.forward(params, ctx, false)?;
                    let k = preds.len() as f64;
                    for (p, y) in preds.iter().zip(&ctx.ys) {
                        let e = p - y;
                        acc += e * e / k;
                    }
                }
                Ok(acc)
            },
            |a, b| Ok(a? + b?),
        );
        match totals {
            None => Err(CoreError::shape("empty batch")),
            Some(total) => Ok(total? / contexts.len() as f64),
        }
    }

    /// Loss and gradient over a batch, fanned out over fixed-size chunks.
    /// The reduction order is fixed, so results are bit-identical for any
    /// thread count and for the sequential build.
    pub fn batch_value_and_grad<S: Scalar>(
        &self,
        params: &[S],
        batch: &TransformerBatch,
    ) -> Result<(S, Vec<S>)> {
        let n = batch.contexts.len();
        if n == 0 {
            return Err(CoreError::shape("empty batch"));
        }
        let chunks = chunked_reduce(
            n,
            BATCH_CHUNK,
            |r| -> Result<(S, Vec<S>)> {
                let sub = TransformerBatch {
                    contexts: batch.contexts[r.clone()].to_vec(),
                    mode: match &batch.mode {
                        TokenLossMode::Mean => TokenLossMode::Mean,
                        TokenLossMode::Single(ks) => TokenLossMode::Single(ks[r].to_vec()),
                    },
                };
                let mut g = vec![S::zero(); params.len()];
                let loss = self.eval_grad_unscaled(params, &sub, &mut g)?;
                Ok((loss, g))
            },
            |a, b| {
                let (la, mut ga) = a?;
                let (lb, gb) = b?;
                for (x, y) in ga.iter_mut().zip(gb) {
                    *x += y;
                }
                Ok((la + lb, ga))
            },
        )
        .expect("nonempty");
        let (loss_sum, mut grad) = chunks?;
        let inv = S::from_f64(1.0 / n as f64);
        for g in grad.iter_mut() {
            *g = *g * inv;
        }
        Ok((loss_sum * inv, grad))
    }

    /// Sum (not mean) of per-context losses and gradients.
    fn eval_grad_unscaled<S: Scalar>(
        &self,
        params: &[S],
        batch: &TransformerBatch,
        grad_out: &mut [S],
    ) -> Result<S> {
        let mut total = S::zero();
        for (i, ctx) in batch.contexts.iter().enumerate() {
            let tape = self.forward_tape(params, ctx, None)?;
            let kf = self.cfg.max_examples as f64;
            let mut dpreds = vec![S::zero(); tape.preds.len()];
            match &batch.mode {
                TokenLossMode::Mean => {
                    for (kk, (&p, &y)) in tape.preds.iter().zip(&ctx.ys).enumerate() {
                        let e = p - S::from_f64(y);
                        total += e * e * S::from_f64(1.0 / kf);
                        dpreds[kk] = S::from_f64(2.0 / kf) * e;
                    }
                }
                TokenLossMode::Single(ks) => {
                    let k = ks[i] as usize;
                    if k == 0 || k > self.cfg.max_examples {
                        return Err(CoreError::shape(format!(
                            "single-token index {k} out of range 1..={}",
                            self.cfg.max_examples
                        )));
                    }
                    let e = tape.preds[k - 1] - S::from_f64(ctx.ys[k - 1]);
                    total += e * e;
                    dpreds[k - 1] = S::from_f64(2.0) * e;
                }
            }
            self.backward_tape(params, &tape, &dpreds, grad_out);
        }
        Ok(total)
    }
}

impl DifferentiableLoss for TransformerModel {
    type Batch = TransformerBatch;

    fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    fn eval_grad<S: Scalar>(
        &self,
        params: &[S],
        batch: &Self::Batch,
        grad_out: &mut [S],
    ) -> Result<S> {
        let n = batch.contexts.len();
        if n == 0 {
            return Err(CoreError::shape("empty batch"));
        }
        let loss = self.eval_grad_unscaled(params, batch, grad_out)?;
        let inv = S::from_f64(1.0 / n as f64);
        for g in grad_out.iter_mut() {
            *g = *g * inv;
        }
        Ok(loss * inv)
    }
}
