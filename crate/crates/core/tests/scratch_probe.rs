mod common;
use common::fd_grad;
use dgsc_core::data::{sample_batch, DataConfig};
use dgsc_core::model::value_and_grad_flat;
use dgsc_core::rng::Stream;
use dgsc_core::transformer::*;

#[test]
#[ignore]
fn probe_fd_truncation() {
    let cfg = TransformerConfig { layers: 2, heads: 2, d_embed: 8, d_mlp: 8, input_dim: 2, max_examples: 3, ..TransformerConfig::default() };
    let data = DataConfig { input_dim: 2, max_examples: 3, seed: 17, ..DataConfig::default() };
    let model = TransformerModel::new(cfg).unwrap();
    // find the failing draw
    for draw in 0..20u64 {
        let params = model.init_params(draw);
        let batch = TransformerBatch::mean(sample_batch(&data, 2, Stream::Fixture, draw));
        let got = value_and_grad_flat(&model, &params.values, &batch).unwrap();
        let want4 = fd_grad(&model, &params.values, &batch, 1e-4);
        let mut worst = (0usize, 0.0f64);
        for (i, (g, w)) in got.grad.iter().zip(&want4).enumerate() {
            let rel = (g - w).abs() / w.abs().max(1e-12);
            if w.abs() > 1e-6 && rel > worst.1 { worst = (i, rel); }
        }
        if worst.1 > 1e-4 {
            let i = worst.0;
            let want3 = fd_grad(&model, &params.values, &batch, 1e-3);
            let want5 = fd_grad(&model, &params.values, &batch, 3e-5);
            println!("draw {draw} coord {i}: analytic {:.10e}", got.grad[i]);
            println!("  fd(1e-3) {:.10e}  diff {:.2e}", want3[i], (got.grad[i]-want3[i]).abs());
            println!("  fd(1e-4) {:.10e}  diff {:.2e}", want4[i], (got.grad[i]-want4[i]).abs());
            println!("  fd(3e-5) {:.10e}  diff {:.2e}", want5[i], (got.grad[i]-want5[i]).abs());
        }
    }
}
