//! Property tests for the invariants that hold over arbitrary inputs.

mod common;

use dgsc_core::data::{sample_batch, DataConfig};
use dgsc_core::metrics::{attention_entropy, attention_variability, composition_scores};
use dgsc_core::rng::Stream;
use dgsc_core::sgld::online_trace;
use dgsc_core::transformer::{AttentionRecord, TransformerConfig, TransformerModel};
use ndarray::Array2;
use proptest::prelude::*;

fn stochastic_pattern(seq: usize, raw: &[f64]) -> Array2<f64> {
    let mut a = Array2::zeros((seq, seq));
    for p in 0..seq {
        let mut total = 0.0;
        for j in 0..=p {
            let v = raw[(p * seq + j) % raw.len()].abs() + 1e-3;
            a[[p, j]] = v;
            total += v;
        }
        for j in 0..=p {
            a[[p, j]] /= total;
        }
    }
    a
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn entropy_and_variability_bounded(raw in prop::collection::vec(-10.0f64..10.0, 64..256)) {
        let seq = 8;
        let rec1 = AttentionRecord::from_patterns(1, 1, seq, vec![stochastic_pattern(seq, &raw)]).unwrap();
        let mut rev = raw.clone();
        rev.reverse();
        let rec2 = AttentionRecord::from_patterns(1, 1, seq, vec![stochastic_pattern(seq, &rev)]).unwrap();

        let ent = attention_entropy(&rec1);
        for (_, h) in &ent.per_position[0] {
            prop_assert!((0.0..=1.0 + 1e-12).contains(h), "entropy {h}");
        }
        let var = attention_variability(&[rec1, rec2]).unwrap();
        for (_, v) in &var.per_position[0] {
            prop_assert!((0.0..=1.0 + 1e-12).contains(v), "variability {v}");
        }
    }

    #[test]
    fn online_trace_identity(losses in prop::collection::vec(-5.0f64..5.0, 1..300),
                             nbeta in 1.0f64..500.0,
                             init in -2.0f64..2.0) {
        let online = online_trace(&losses, nbeta, init);
        prop_assert_eq!(online[0], 0.0);
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        let batch = nbeta * (mean - init);
        let last = *online.last().unwrap();
        let tol = 1e-12 * batch.abs().max(1e-9);
        prop_assert!((last - batch).abs() <= tol, "online {last} vs batch {batch}");
    }

    #[test]
    fn composition_scores_scale_invariant_and_bounded(seed in 0u64..500, scale in 0.25f64..8.0) {
        let cfg = TransformerConfig {
            layers: 2,
            heads: 2,
            d_embed: 8,
            d_mlp: 8,
            input_dim: 2,
            max_examples: 2,
            ..TransformerConfig::default()
        };
        let model = TransformerModel::new(cfg).unwrap();
        let mut params = model.init_params(seed);
        let base = composition_scores(&model, &params, (0, 0), (1, 1)).unwrap();
        for s in [base.q, base.k, base.v] {
            prop_assert!(s > 0.0 && s <= 1.0, "score {s}");
        }
        for name in ["block1.attn.wq", "block1.attn.wk"] {
            for x in params.segment_mut(name).unwrap() {
                *x *= scale;
            }
        }
        let scaled = composition_scores(&model, &params, (0, 0), (1, 1)).unwrap();
        prop_assert!((base.q - scaled.q).abs() < 1e-9);
        prop_assert!((base.k - scaled.k).abs() < 1e-9);
        prop_assert!((base.v - scaled.v).abs() < 1e-9);
    }

    #[test]
    fn batches_are_reproducible(seed in 0u64..1000, pos in 0u64..1000) {
        let cfg = DataConfig { seed, ..DataConfig::default() };
        let a = sample_batch(&cfg, 4, Stream::TrainData, pos);
        let b = sample_batch(&cfg, 4, Stream::TrainData, pos);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn noiseless_labels_are_inner_products(seed in 0u64..1000) {
        let cfg = DataConfig { sigma2: 0.0, seed, ..DataConfig::default() };
        for ctx in sample_batch(&cfg, 2, Stream::EvalData, 0) {
            for (x, &y) in ctx.xs.iter().zip(&ctx.ys) {
                let ip: f64 = ctx.task.iter().zip(x).map(|(t, v)| t * v).sum();
                prop_assert_eq!(y.to_bits(), ip.to_bits());
            }
        }
    }
}
