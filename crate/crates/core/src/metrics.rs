//! Behavioral and structural probes of the regression transformer:
//! ICL scores, task-prior distance, OOD sweeps, attention statistics,
//! composition scores, and collapse reports.
//!
//! Formula-level functions operate on raw predictions or captured
//! attention patterns; thin wrappers run the forward pass over a frozen
//! evaluation set so series are comparable across checkpoints.

use crate::data::{sample_ood_batch, DataConfig, OodMode, RegressionContext};
use crate::error::{CoreError, Result};
use crate::par::{chunked_reduce, BATCH_CHUNK};
use crate::params::ParameterVector;
use crate::rng::Stream;
use crate::transformer::{AttentionRecord, TransformerModel};
use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Behavioral scores
// ---------------------------------------------------------------------------

/// ICL_{k1:k2} = per-token loss at k2 minus at k1 (1-based); negative
/// means better late-context performance.
pub fn icl_score(per_token_losses: &[f64], k1: usize, k2: usize) -> Result<f64> {
    let k = per_token_losses.len();
    if k1 < 1 || k2 < k1 || k2 > k {
        return Err(CoreError::shape(format!(
            "icl positions must satisfy 1 <= k1 <= k2 <= {k}, got ({k1}, {k2})"
        )));
    }
    Ok(per_token_losses[k2 - 1] - per_token_losses[k1 - 1])
}

/// Mean squared prediction over all tokens, given raw predictions.
pub fn mean_square_of(preds: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for row in preds {
        for p in row {
            sum += p * p;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean squared distance between predictions and the task-prior
/// prediction prior·x_k.
pub fn task_prior_score_of(
    preds: &[Vec<f64>],
    contexts: &[RegressionContext],
    prior: &[f64],
) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (row, ctx) in preds.iter().zip(contexts) {
        for (p, x) in row.iter().zip(&ctx.xs) {
            let base: f64 = prior.iter().zip(x).map(|(a, b)| a * b).sum();
            let e = p - base;
            sum += e * e;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Forward predictions for a set of contexts, order-preserving.
pub fn batch_predictions(
    model: &TransformerModel,
    params: &[f64],
    contexts: &[RegressionContext],
) -> Result<Vec<Vec<f64>>> {
    let out = chunked_reduce(
        contexts.len(),
        BATCH_CHUNK,
        |r| -> Result<Vec<Vec<f64>>> {
            contexts[r]
                .iter()
                .map(|ctx| model.forward(params, ctx, false).map(|(p, _)| p))
                .collect()
        },
        |a, b| {
            let mut a = a?;
            a.extend(b?);
            Ok(a)
        },
    );
    out.unwrap_or_else(|| Ok(Vec::new()))
}

/// E[ŷ²] over the evaluation set.
pub fn mean_square_prediction(
    model: &TransformerModel,
    params: &[f64],
    eval_set: &[RegressionContext],
) -> Result<f64> {
    Ok(mean_square_of(&batch_predictions(model, params, eval_set)?))
}

/// Mean squared distance to the task-prior prediction over the
/// evaluation set.
pub fn task_prior_score(
    model: &TransformerModel,
    params: &[f64],
    eval_set: &[RegressionContext],
    prior: &[f64],
) -> Result<f64> {
    Ok(task_prior_score_of(
        &batch_predictions(model, params, eval_set)?,
        eval_set,
        prior,
    ))
}

/// One gain setting of an out-of-distribution sweep.
#[derive(Clone, Debug, Serialize)]
pub struct OodPoint {
    pub gain: f64,
    /// Mean squared error divided by the gain.
    pub normalized_loss: f64,
    pub mean_abs_prediction: f64,
}

/// Default OOD gain grid, log-spaced 10^-1 .. 10^2.
pub fn default_ood_gains() -> Vec<f64> {
    vec![0.1, 10f64.powf(-0.5), 1.0, 10f64.sqrt(), 10.0, 10f64.powf(1.5), 100.0]
}

/// Evaluate normalized loss and mean |ŷ| per gain on freshly drawn OOD
/// batches (deterministic in the data seed).
pub fn ood_sweep(
    model: &TransformerModel,
    params: &[f64],
    data: &DataConfig,
    gains: &[f64],
    mode: OodMode,
    batch_size: usize,
) -> Result<Vec<OodPoint>> {
    let mut out = Vec::with_capacity(gains.len());
    for &g in gains {
        let contexts = sample_ood_batch(data, batch_size, g, mode, Stream::OodData, 0)?;
        let preds = batch_predictions(model, params, &contexts)?;
        let mut se = 0.0;
        let mut abs = 0.0;
        let mut n = 0usize;
        for (row, ctx) in preds.iter().zip(&contexts) {
            for (p, y) in row.iter().zip(&ctx.ys) {
                se += (p - y) * (p - y);
                abs += p.abs();
                n += 1;
            }
        }
        out.push(OodPoint {
            gain: g,
            normalized_loss: se / n as f64 / (g * g),
            mean_abs_prediction: abs / n as f64,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Attention statistics
// ---------------------------------------------------------------------------

/// Query-position class: predictions happen at x tokens, context reading
/// at y tokens; each head is analyzed separately over both.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadComponent {
    X,
    Y,
}

/// Positions contributing to a component. The final y token receives no
/// training signal and is excluded throughout.
fn component_positions(seq: usize, comp: HeadComponent) -> Vec<usize> {
    match comp {
        HeadComponent::X => (0..seq - 1).filter(|p| p % 2 == 0).collect(),
        HeadComponent::Y => (0..seq - 1).filter(|p| p % 2 == 1).collect(),
    }
}

/// Normalized attention entropies for one captured pattern.
/// Entry [(layer, head)][p] is H_p / log2(p+1); positions with a single
/// visible token (p = 0) and the final y token are skipped.
#[derive(Clone, Debug)]
pub struct AttentionEntropy {
    pub layers: usize,
    pub heads: usize,
    /// (layer, head) -> (position, normalized entropy)
    pub per_position: Vec<Vec<(usize, f64)>>,
}

impl AttentionEntropy {
    pub fn head_component_mean(&self, layer: usize, head: usize, comp: HeadComponent) -> f64 {
        let entries = &self.per_position[layer * self.heads + head];
        let want = match comp {
            HeadComponent::X => 0,
            HeadComponent::Y => 1,
        };
        let vals: Vec<f64> = entries
            .iter()
            .filter(|(p, _)| p % 2 == want)
            .map(|(_, h)| *h)
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }
}

/// Shannon entropy over preceding indices, normalized by the maximum
/// entropy for the position's context length.
pub fn attention_entropy(record: &AttentionRecord) -> AttentionEntropy {
    let seq = record.seq;
    let mut per_position = Vec::with_capacity(record.layers * record.heads);
    for l in 0..record.layers {
        for h in 0..record.heads {
            let a = record.pattern(l, h);
            let mut entries = Vec::new();
            for p in 1..seq - 1 {
                let mut ent = 0.0;
                for j in 0..=p {
                    let v = a[[p, j]];
                    if v > 0.0 {
                        ent -= v * v.log2();
                    }
                }
                entries.push((p, ent / ((p + 1) as f64).log2()));
            }
            per_position.push(entries);
        }
    }
    AttentionEntropy {
        layers: record.layers,
        heads: record.heads,
        per_position,
    }
}

/// Attention variability across samples, in [0, 1]; zero iff the pattern
/// is identical on every sample.
#[derive(Clone, Debug)]
pub struct AttentionVariability {
    pub layers: usize,
    pub heads: usize,
    /// (layer, head) -> (position, variability)
    pub per_position: Vec<Vec<(usize, f64)>>,
}

impl AttentionVariability {
    pub fn head_component_mean(&self, layer: usize, head: usize, comp: HeadComponent) -> f64 {
        let entries = &self.per_position[layer * self.heads + head];
        let want = match comp {
            HeadComponent::X => 0,
            HeadComponent::Y => 1,
        };
        let vals: Vec<f64> = entries
            .iter()
            .filter(|(p, _)| p % 2 == want)
            .map(|(_, h)| *h)
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }
}

/// V_p = sum_i sum_{k'<=p} |alpha_i - mean| / (2 n sum_{k'<=p} mean).
pub fn attention_variability(records: &[AttentionRecord]) -> Result<AttentionVariability> {
    let n = records.len();
    if n < 2 {
        return Err(CoreError::shape("variability needs at least 2 samples"));
    }
    let (layers, heads, seq) = (records[0].layers, records[0].heads, records[0].seq);
    let mut per_position = Vec::with_capacity(layers * heads);
    for l in 0..layers {
        for h in 0..heads {
            let mut entries = Vec::new();
            for p in 0..seq - 1 {
                let mut mean = vec![0.0; p + 1];
                for r in records {
                    let a = r.pattern(l, h);
                    for (j, m) in mean.iter_mut().enumerate() {
                        *m += a[[p, j]];
                    }
                }
                for m in mean.iter_mut() {
                    *m /= n as f64;
                }
                let denom: f64 = 2.0 * n as f64 * mean.iter().sum::<f64>();
                let mut num = 0.0;
                for r in records {
                    let a = r.pattern(l, h);
                    for (j, m) in mean.iter().enumerate() {
                        num += (a[[p, j]] - m).abs();
                    }
                }
                entries.push((p, if denom > 0.0 { num / denom } else { 0.0 }));
            }
            per_position.push(entries);
        }
    }
    Ok(AttentionVariability {
        layers,
        heads,
        per_position,
    })
}

/// Attention-pattern class of one head component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadClass {
    SelfToken,
    PreviousToken,
    PreviousX,
    PreviousY,
    Unclassified,
}

#[derive(Clone, Debug, Serialize)]
pub struct HeadLabel {
    pub layer: usize,
    pub head: usize,
    pub component: HeadComponent,
    pub class: HeadClass,
    pub self_score: f64,
    pub previous_token_score: f64,
    pub x_total: f64,
    pub y_total: f64,
    pub variability: f64,
}

/// Score and classify every head component over a validation batch of
/// captured patterns. A class is assigned only when its score meets
/// `score_threshold` and the component's variability stays below
/// `variability_threshold`.
pub fn head_scores(
    records: &[AttentionRecord],
    score_threshold: f64,
    variability_threshold: f64,
) -> Result<Vec<HeadLabel>> {
    if records.is_empty() {
        return Err(CoreError::shape("head scores need at least 1 sample"));
    }
    let (layers, heads, seq) = (records[0].layers, records[0].heads, records[0].seq);
    let variability = if records.len() >= 2 {
        Some(attention_variability(records)?)
    } else {
        None
    };
    let mut labels = Vec::new();
    for l in 0..layers {
        for h in 0..heads {
            for comp in [HeadComponent::X, HeadComponent::Y] {
                let positions = component_positions(seq, comp);
                let mut selfs = 0.0;
                let mut prev = 0.0;
                let mut prev_n = 0usize;
                let mut x_total = 0.0;
                let mut y_total = 0.0;
                let mut n = 0usize;
                for r in records {
                    let a = r.pattern(l, h);
                    for &p in &positions {
                        selfs += a[[p, p]];
                        if p >= 1 {
                            prev += a[[p, p - 1]];
                            prev_n += 1;
                        }
                        for j in 0..=p {
                            if j % 2 == 0 {
                                x_total += a[[p, j]];
                            } else {
                                y_total += a[[p, j]];
                            }
                        }
                        n += 1;
                    }
                }
                let n = n.max(1) as f64;
                let self_score = selfs / n;
                let previous_token_score = prev / prev_n.max(1) as f64;
                let x_total = x_total / n;
                let y_total = y_total / n;
                let var = variability
                    .as_ref()
                    .map(|v| v.head_component_mean(l, h, comp))
                    .unwrap_or(0.0);
                let class = if var <= variability_threshold {
                    if self_score >= score_threshold {
                        HeadClass::SelfToken
                    } else if previous_token_score >= score_threshold {
                        HeadClass::PreviousToken
                    } else if x_total >= score_threshold {
                        HeadClass::PreviousX
                    } else if y_total >= score_threshold {
                        HeadClass::PreviousY
                    } else {
                        HeadClass::Unclassified
                    }
                } else {
                    HeadClass::Unclassified
                };
                labels.push(HeadLabel {
                    layer: l,
                    head: h,
                    component: comp,
                    class,
                    self_score,
                    previous_token_score,
                    x_total,
                    y_total,
                    variability: var,
                });
            }
        }
    }
    Ok(labels)
}

// ---------------------------------------------------------------------------
// Composition scores
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize)]
pub struct CompositionScores {
    pub q: f64,
    pub k: f64,
    pub v: f64,
}

fn frob(m: &ndarray::Array2<f64>) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn head_cols<'a>(
    params: &'a ParameterVector,
    name: &str,
    head: usize,
    d_head: usize,
) -> Result<ndarray::Array2<f64>> {
    let seg = params.layout.segment(name)?.clone();
    let d = seg.shape[0];
    let view = ArrayView2::from_shape((d, seg.shape[1]), params.segment(name)?)
        .map_err(|e| CoreError::shape(e.to_string()))?;
    Ok(view
        .slice(ndarray::s![.., head * d_head..(head + 1) * d_head])
        .to_owned())
}

/// Q/K/V composition between `first` (earlier layer) and `second`:
/// ||M · W_OV^first||_F / (||M||_F ||W_OV^first||_F) with
/// M = W_QK^second^T, W_QK^second, W_OV^second respectively.
pub fn composition_scores(
    model: &TransformerModel,
    params: &ParameterVector,
    first: (usize, usize),
    second: (usize, usize),
) -> Result<CompositionScores> {
    let dh = model.cfg.d_head();
    let d = model.cfg.d_embed;
    let assemble = |layer: usize, head: usize| -> Result<(ndarray::Array2<f64>, ndarray::Array2<f64>)> {
        let wq = head_cols(params, &format!("block{layer}.attn.wq"), head, dh)?;
        let wk = head_cols(params, &format!("block{layer}.attn.wk"), head, dh)?;
        let wv = head_cols(params, &format!("block{layer}.attn.wv"), head, dh)?;
        let wo_seg = params.segment(&format!("block{layer}.attn.wo"))?;
        let wo = ArrayView2::from_shape((d, d), wo_seg)
            .map_err(|e| CoreError::shape(e.to_string()))?;
        let wo_head = wo.slice(ndarray::s![head * dh..(head + 1) * dh, ..]).to_owned();
        // residual-to-residual circuits
        let w_qk = wq.dot(&wk.t());
        let w_ov = wv.dot(&wo_head);
        Ok((w_qk, w_ov))
    };
    let (_, ov1) = assemble(first.0, first.1)?;
    let (qk2, ov2) = assemble(second.0, second.1)?;
    let denom_ov1 = frob(&ov1);
    let score = |m: &ndarray::Array2<f64>| -> f64 {
        let denom = frob(m) * denom_ov1;
        if denom == 0.0 {
            0.0
        } else {
            frob(&m.dot(&ov1)) / denom
        }
    };
    Ok(CompositionScores {
        q: score(&qk2.t().to_owned()),
        k: score(&qk2),
        v: score(&ov2),
    })
}

// ---------------------------------------------------------------------------
// Collapse report
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct LnCollapse {
    pub module: String,
    pub fraction_weights_below: f64,
    pub fraction_biases_below: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CollapseReport {
    /// Magnitude threshold used for the "collapsed fraction" statistics.
    pub threshold: f64,
    pub layer_norms: Vec<LnCollapse>,
    /// Singular values of the token embedding, descending (D+1 values).
    pub embedding_singular_values: Vec<f64>,
    /// Singular values of the positional embedding, descending.
    pub positional_singular_values: Vec<f64>,
    /// Cosine similarity between each embedding row and its projection
    /// onto the span of the unembedding.
    pub embed_unembed_cosines: Vec<f64>,
    /// Effective unembedding weights (W_U y-row ⊙ final LN weight).
    pub effective_unembed_w: Vec<f64>,
    /// Effective unembedding bias.
    pub effective_unembed_b: f64,
}

/// Singular values of a flat (rows x cols) matrix via Jacobi eigenvalues
/// of A·A^T (rows <= cols here).
fn singular_values(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut gram = vec![0.0; rows * rows];
    for i in 0..rows {
        for j in 0..rows {
            let mut s = 0.0;
            for k in 0..cols {
                s += a[i * cols + k] * a[j * cols + k];
            }
            gram[i * rows + j] = s;
        }
    }
    let mut eig = jacobi_eigenvalues(&mut gram, rows);
    eig.sort_by(|x, y| y.total_cmp(x));
    eig.into_iter().map(|e| e.max(0.0).sqrt()).collect()
}

/// Cyclic Jacobi sweeps; enough for the small Gram matrices here.
fn jacobi_eigenvalues(a: &mut [f64], n: usize) -> Vec<f64> {
    for _ in 0..64 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = 0.5 * (aqq - app) / apq;
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// Orthonormal basis of the column span via modified Gram-Schmidt.
fn orthonormal_columns(cols: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for mut v in cols {
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (x, c) in v.iter_mut().zip(b) {
                *x -= dot * c;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for x in v.iter_mut() {
                *x /= norm;
            }
            basis.push(v);
        }
    }
    basis
}

/// Layer-norm collapse fractions, embedding/positional singular values,
/// embedding/unembedding subspace cosines, and the effective unembedding.
pub fn collapse_report(
    model: &TransformerModel,
    params: &ParameterVector,
    threshold: f64,
) -> Result<CollapseReport> {
    let cfg = &model.cfg;
    let (d, td, t) = (cfg.d_embed, cfg.token_dim(), cfg.seq_len());

    let frac_below = |xs: &[f64]| -> f64 {
        xs.iter().filter(|x| x.abs() < threshold).count() as f64 / xs.len() as f64
    };
    let mut layer_norms = Vec::new();
    for b in 0..cfg.layers {
        for ln in ["ln1", "ln2"] {
            layer_norms.push(LnCollapse {
                module: format!("block{b}.{ln}"),
                fraction_weights_below: frac_below(params.segment(&format!("block{b}.{ln}.w"))?),
                fraction_biases_below: frac_below(params.segment(&format!("block{b}.{ln}.b"))?),
            });
        }
    }
    layer_norms.push(LnCollapse {
        module: "ln_f".into(),
        fraction_weights_below: frac_below(params.segment("ln_f.w")?),
        fraction_biases_below: frac_below(params.segment("ln_f.b")?),
    });

    let embed = params.segment("embed.w")?;
    let pos = params.segment("pos.w")?;
    let embedding_singular_values = singular_values(embed, td, d);
    let positional_singular_values = singular_values(pos, t, d);

    // span of the unembedding: its D+1 columns as vectors in R^d
    let unembed = params.segment("unembed.w")?;
    let cols: Vec<Vec<f64>> = (0..td)
        .map(|c| (0..d).map(|r| unembed[r * td + c]).collect())
        .collect();
    let basis = orthonormal_columns(cols);
    let mut embed_unembed_cosines = Vec::with_capacity(td);
    for r in 0..td {
        let row = &embed[r * d..(r + 1) * d];
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            embed_unembed_cosines.push(0.0);
            continue;
        }
        let mut proj2 = 0.0;
        for b in &basis {
            let dot: f64 = row.iter().zip(b).map(|(a, c)| a * c).sum();
            proj2 += dot * dot;
        }
        embed_unembed_cosines.push((proj2.sqrt() / norm).min(1.0));
    }

    // effective unembedding acting on normalized activations:
    //   w_eff = (W_U)[:,0] ⊙ ln_f.w ;  b_eff = (W_U)[:,0]·ln_f.b + b_U[0]
    let ln_w = params.segment("ln_f.w")?;
    let ln_b = params.segment("ln_f.b")?;
    let bu = params.segment("unembed.b")?;
    let y_col: Vec<f64> = (0..d).map(|r| unembed[r * td]).collect();
    let effective_unembed_w: Vec<f64> =
        y_col.iter().zip(ln_w).map(|(a, b)| a * b).collect();
    let effective_unembed_b: f64 =
        y_col.iter().zip(ln_b).map(|(a, b)| a * b).sum::<f64>() + bu[0];

    Ok(CollapseReport {
        threshold,
        layer_norms,
        embedding_singular_values,
        positional_singular_values,
        embed_unembed_cosines,
        effective_unembed_w,
        effective_unembed_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_batch, task_pool, task_prior};
    use crate::rng::{standard_normal_vec, RngKey};
    use crate::transformer::TransformerConfig;
    use ndarray::Array2;

    fn small_model() -> (TransformerModel, DataConfig) {
        let cfg = TransformerConfig {
            layers: 2,
            heads: 2,
            d_embed: 8,
            d_mlp: 8,
            input_dim: 2,
            max_examples: 4,
            ..TransformerConfig::default()
        };
        let data = DataConfig {
            input_dim: 2,
            max_examples: 4,
            seed: 21,
            test_size: 128,
            ..DataConfig::default()
        };
        (TransformerModel::new(cfg).unwrap(), data)
    }

    #[test]
    fn icl_score_arithmetic() {
        assert_eq!(icl_score(&[1.5; 8], 1, 8).unwrap(), 0.0);
        let losses = [4.0, 3.5, 3.0, 2.5, 2.0, 1.7, 1.3, 1.0];
        assert_eq!(icl_score(&losses, 1, 8).unwrap(), -3.0);
        assert_eq!(icl_score(&losses, 3, 3).unwrap(), 0.0);
        assert!(icl_score(&losses, 0, 3).is_err());
        assert!(icl_score(&losses, 3, 9).is_err());
    }

    #[test]
    fn zero_predictor_scores() {
        let preds = vec![vec![0.0; 4]; 10];
        assert_eq!(mean_square_of(&preds), 0.0);
    }

    #[test]
    fn task_prior_formula_level() {
        let (_, data) = small_model();
        let contexts = sample_batch(&data, 16, Stream::Fixture, 0);
        let prior = vec![0.3, -0.7];
        // predictions implementing the prior exactly -> score 0
        let preds: Vec<Vec<f64>> = contexts
            .iter()
            .map(|c| {
                c.xs.iter()
                    .map(|x| prior.iter().zip(x).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect();
        assert!(task_prior_score_of(&preds, &contexts, &prior) < 1e-28);
        // zero prior reduces the score to the mean square prediction
        let other: Vec<Vec<f64>> = preds.iter().map(|r| r.iter().map(|p| p + 0.5).collect()).collect();
        let zero = vec![0.0, 0.0];
        assert!(
            (task_prior_score_of(&other, &contexts, &zero) - mean_square_of(&other)).abs()
                < 1e-15
        );
    }

    #[test]
    fn prior_beats_pool_members_for_prior_predictor() {
        let (_, data) = small_model();
        let data = DataConfig {
            num_tasks: Some(2),
            ..data
        };
        let pool = task_pool(&data).unwrap();
        let prior = task_prior(&data);
        let contexts = sample_batch(&data, 64, Stream::Fixture, 1);
        let preds: Vec<Vec<f64>> = contexts
            .iter()
            .map(|c| {
                c.xs.iter()
                    .map(|x| prior.iter().zip(x).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect();
        let base = task_prior_score_of(&preds, &contexts, &prior);
        for member in &pool {
            let s = task_prior_score_of(&preds, &contexts, member);
            assert!(base <= s + 1e-12, "prior {base} should not exceed member {s}");
        }
    }

    #[test]
    fn ood_zero_predictor_normalized_loss() {
        // zero predictor: E[y^2]/g^2 = (D*g + sigma^2)/g^2 for OOD inputs
        let (model, data) = small_model();
        let mut params = model.init_params(0);
        params.segment_mut("unembed.w").unwrap().fill(0.0);
        params.segment_mut("unembed.b").unwrap().fill(0.0);
        let gains = [1.0, 100.0];
        let pts = ood_sweep(&model, &params.values, &data, &gains, OodMode::Inputs, 2000).unwrap();
        for pt in &pts {
            let expect = (data.input_dim as f64 * pt.gain + data.sigma2) / (pt.gain * pt.gain);
            assert!(
                (pt.normalized_loss - expect).abs() < 0.08 * expect,
                "gain {}: {} vs {}",
                pt.gain,
                pt.normalized_loss,
                expect
            );
            assert_eq!(pt.mean_abs_prediction, 0.0);
        }
        assert!(pts[1].normalized_loss < pts[0].normalized_loss);
    }

    fn record_from(rows: Vec<Array2<f64>>, seq: usize) -> AttentionRecord {
        AttentionRecord::from_patterns(1, 1, seq, rows).unwrap()
    }

    fn uniform_lower(seq: usize) -> Array2<f64> {
        let mut a = Array2::zeros((seq, seq));
        for p in 0..seq {
            for j in 0..=p {
                a[[p, j]] = 1.0 / (p + 1) as f64;
            }
        }
        a
    }

    fn one_hot_self(seq: usize) -> Array2<f64> {
        let mut a = Array2::zeros((seq, seq));
        for p in 0..seq {
            a[[p, p]] = 1.0;
        }
        a
    }

    #[test]
    fn entropy_uniform_and_hard() {
        let seq = 8;
        let rec = record_from(vec![uniform_lower(seq)], seq);
        let ent = attention_entropy(&rec);
        for (_, h) in &ent.per_position[0] {
            assert!((h - 1.0).abs() < 1e-12, "uniform entropy {h}");
        }
        let rec = record_from(vec![one_hot_self(seq)], seq);
        let ent = attention_entropy(&rec);
        for (_, h) in &ent.per_position[0] {
            assert_eq!(*h, 0.0);
        }
    }

    #[test]
    fn entropy_two_of_four() {
        // position with 4 visible tokens, equal mass on 2 of them:
        // H = 1 bit, normalized 1 / log2(4) = 0.5
        let seq = 4;
        let mut a = uniform_lower(seq);
        for j in 0..seq {
            a[[3, j]] = 0.0;
        }
        a[[3, 0]] = 0.5;
        a[[3, 2]] = 0.5;
        // keep earlier rows stochastic; we only read position 3... but 3 is
        // the final y token, excluded. Use seq 6 and position 3 instead.
        let seq = 6;
        let mut a = uniform_lower(seq);
        for j in 0..seq {
            a[[3, j]] = 0.0;
        }
        a[[3, 0]] = 0.5;
        a[[3, 2]] = 0.5;
        let rec = record_from(vec![a], seq);
        let ent = attention_entropy(&rec);
        let h3 = ent.per_position[0]
            .iter()
            .find(|(p, _)| *p == 3)
            .map(|(_, h)| *h)
            .unwrap();
        assert!((h3 - 0.5).abs() < 1e-12, "got {h3}");
    }

    #[test]
    fn variability_identical_and_disjoint() {
        let seq = 6;
        let rec = || record_from(vec![uniform_lower(seq)], seq);
        let v = attention_variability(&[rec(), rec()]).unwrap();
        for (_, x) in &v.per_position[0] {
            assert_eq!(*x, 0.0);
        }
        // two samples with disjoint one-hot rows: V = 1 - 1/n = 1/2, the
        // formula's maximum for n = 2
        let mut a = one_hot_self(seq);
        let mut b = Array2::zeros((seq, seq));
        b[[0, 0]] = 1.0;
        for p in 1..seq {
            b[[p, p - 1]] = 1.0;
        }
        a[[0, 0]] = 1.0;
        let ra = record_from(vec![a], seq);
        let rb = record_from(vec![b], seq);
        let v = attention_variability(&[ra, rb]).unwrap();
        for (p, x) in &v.per_position[0] {
            if *p >= 1 {
                assert!((x - 0.5).abs() < 1e-12, "pos {p}: {x}");
            }
        }
    }

    #[test]
    fn variability_matches_direct_recomputation() {
        let seq = 8;
        // random stochastic lower-triangular patterns
        let mk = |seed: u64| {
            let vals = standard_normal_vec(RngKey::new(seed, Stream::Fixture, 2, 0), seq * seq);
            let mut a = Array2::zeros((seq, seq));
            for p in 0..seq {
                let mut total = 0.0;
                for j in 0..=p {
                    let v = vals[p * seq + j].abs() + 0.01;
                    a[[p, j]] = v;
                    total += v;
                }
                for j in 0..=p {
                    a[[p, j]] /= total;
                }
            }
            record_from(vec![a], seq)
        };
        let records: Vec<AttentionRecord> = (0..5).map(mk).collect();
        let v = attention_variability(&records).unwrap();
        // direct two-pass recomputation
        for (p, got) in &v.per_position[0] {
            let p = *p;
            let n = records.len() as f64;
            let mut mean = vec![0.0; p + 1];
            for r in &records {
                for (j, m) in mean.iter_mut().enumerate() {
                    *m += r.pattern(0, 0)[[p, j]] / n;
                }
            }
            let mut num = 0.0;
            for r in &records {
                for (j, m) in mean.iter().enumerate() {
                    num += (r.pattern(0, 0)[[p, j]] - m).abs();
                }
            }
            let want = num / (2.0 * n * mean.iter().sum::<f64>());
            assert!((got - want).abs() < 1e-12);
            assert!(*got >= 0.0 && *got <= 1.0);
        }
    }

    #[test]
    fn head_scores_identity_and_shift() {
        let seq = 8;
        let rec = record_from(vec![one_hot_self(seq)], seq);
        let labels = head_scores(&[rec], 0.8, 0.2).unwrap();
        for l in &labels {
            assert!((l.self_score - 1.0).abs() < 1e-12);
            assert_eq!(l.previous_token_score, 0.0);
            assert_eq!(l.class, HeadClass::SelfToken);
            assert!((l.x_total + l.y_total - 1.0).abs() < 1e-12);
        }
        let mut shift = Array2::zeros((seq, seq));
        shift[[0, 0]] = 1.0;
        for p in 1..seq {
            shift[[p, p - 1]] = 1.0;
        }
        let rec = record_from(vec![shift], seq);
        let labels = head_scores(&[rec], 0.8, 0.2).unwrap();
        for l in &labels {
            assert!((l.previous_token_score - 1.0).abs() < 1e-12);
            assert_eq!(l.class, HeadClass::PreviousToken);
        }
    }

    #[test]
    fn composition_identity_and_scaling() {
        let (model, _) = small_model();
        let mut params = model.init_params(3);
        let d = model.cfg.d_embed;
        let dh = model.cfg.d_head();
        // set head 0 of block 0 so W_OV = identity-ish is impossible at
        // rank d_head; instead check homogeneity and the 1/sqrt(d) algebra
        // directly on the score shape via rescaling invariance:
        let base = composition_scores(&model, &params, (0, 0), (1, 1)).unwrap();
        for name in ["block0.attn.wv", "block0.attn.wo"] {
            for x in params.segment_mut(name).unwrap() {
                *x *= 3.0;
            }
        }
        let scaled = composition_scores(&model, &params, (0, 0), (1, 1)).unwrap();
        assert!((base.q - scaled.q).abs() < 1e-12);
        assert!((base.k - scaled.k).abs() < 1e-12);
        assert!((base.v - scaled.v).abs() < 1e-12);
        for s in [base.q, base.k, base.v] {
            assert!(s > 0.0 && s <= 1.0);
        }
        let _ = (d, dh);
    }

    #[test]
    fn composition_identity_score_is_inverse_sqrt_d() {
        // With M = I and W_OV = I (d x d), score = ||I||_F / (||I||_F^2)
        // = 1/sqrt(d). Exercised through the frobenius helper directly.
        let d = 16;
        let eye = Array2::from_shape_fn((d, d), |(i, j)| (i == j) as u64 as f64);
        let score = frob(&eye.dot(&eye)) / (frob(&eye) * frob(&eye));
        assert!((score - 1.0 / (d as f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn collapse_report_shapes_and_trivials() {
        let (model, _) = small_model();
        let params = model.init_params(4);
        let rep = collapse_report(&model, &params, 0.1).unwrap();
        // all-ones layer norms at init -> no collapsed weights
        for ln in &rep.layer_norms {
            assert_eq!(ln.fraction_weights_below, 0.0);
            assert_eq!(ln.fraction_biases_below, 1.0); // zero biases count
        }
        let td = model.cfg.token_dim();
        assert_eq!(rep.embedding_singular_values.len(), td);
        assert!(rep
            .embedding_singular_values
            .windows(2)
            .all(|w| w[0] >= w[1]));
        assert!(rep.embedding_singular_values.iter().all(|&s| s >= 0.0));
        assert_eq!(rep.positional_singular_values.len(), model.cfg.seq_len());
        assert_eq!(rep.embed_unembed_cosines.len(), td);
        for c in &rep.embed_unembed_cosines {
            assert!(*c >= 0.0 && *c <= 1.0);
        }
    }

    #[test]
    fn zero_ln_weight_zeroes_effective_unembedding() {
        let (model, _) = small_model();
        let mut params = model.init_params(5);
        params.segment_mut("ln_f.w").unwrap().fill(0.0);
        let rep = collapse_report(&model, &params, 0.1).unwrap();
        assert!(rep.effective_unembed_w.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn aligned_subspaces_have_unit_cosines() {
        let (model, _) = small_model();
        let mut params = model.init_params(6);
        let d = model.cfg.d_embed;
        let td = model.cfg.token_dim();
        // make the embedding rows lie exactly in the span of the
        // unembedding columns
        let unembed: Vec<f64> = params.segment("unembed.w").unwrap().to_vec();
        let cols: Vec<Vec<f64>> = (0..td)
            .map(|c| (0..d).map(|r| unembed[r * td + c]).collect())
            .collect();
        {
            let embed = params.segment_mut("embed.w").unwrap();
            for r in 0..td {
                for j in 0..d {
                    embed[r * d + j] = 2.0 * cols[r][j] - cols[(r + 1) % td][j];
                }
            }
        }
        let rep = collapse_report(&model, &params, 0.1).unwrap();
        for c in &rep.embed_unembed_cosines {
            assert!((c - 1.0).abs() < 1e-9, "cosine {c}");
        }
    }

    #[test]
    fn irrelevant_unembed_rows_leave_output_unchanged() {
        // zeroed final-LN weight and bias entries make the matching
        // unembedding rows irrelevant: randomize them, outputs identical
        let (model, data) = small_model();
        let mut params = model.init_params(7);
        let zeroed = [1usize, 3, 6];
        {
            let w = params.segment_mut("ln_f.w").unwrap();
            for &i in &zeroed {
                w[i] = 0.0;
            }
        }
        {
            let b = params.segment_mut("ln_f.b").unwrap();
            for &i in &zeroed {
                b[i] = 0.0;
            }
        }
        let contexts = sample_batch(&data, 8, Stream::Fixture, 3);
        let before: Vec<Vec<f64>> =
            batch_predictions(&model, &params.values, &contexts).unwrap();
        let td = model.cfg.token_dim();
        {
            let u = params.segment_mut("unembed.w").unwrap();
            let noise = standard_normal_vec(RngKey::new(9, Stream::Fixture, 4, 0), zeroed.len() * td);
            for (k, &i) in zeroed.iter().enumerate() {
                for c in 0..td {
                    u[i * td + c] = 10.0 * noise[k * td + c];
                }
            }
        }
        let after: Vec<Vec<f64>> = batch_predictions(&model, &params.values, &contexts).unwrap();
        for (a, b) in before.iter().zip(&after) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-10, "{x} vs {y}");
            }
        }
    }
}
