//! The `detect-stages` and `hessian-stats` subcommands.

use crate::cmd_train::scan_checkpoints;
use crate::util::{run_dir, write_json};
use dgsc_core::model::DifferentiableLoss;
use dgsc_core::data::sample_batch;
use dgsc_core::geometry::{
    detect_boundaries, hessian_stats, render_stage_table, smooth_curve, stage_table, NoiseSpec,
    Tolerance,
};
use dgsc_core::io::checkpoint::load_checkpoint;
use dgsc_core::io::config::RunConfig;
use dgsc_core::io::csvio::{
    read_llc_curve, write_boundaries, write_smoothed, write_stage_table, write_versioned_csv,
};
use dgsc_core::io::svg::{line_plot, Series};
use dgsc_core::rng::Stream;
use dgsc_core::transformer::{TransformerBatch, TransformerModel};
use dgsc_core::Result;
use std::path::PathBuf;

pub fn detect_stages(
    curve_path: PathBuf,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    length_scale: Option<f64>,
    tolerance: Option<f64>,
) -> Result<()> {
    let analysis = match config {
        Some(p) => RunConfig::load(&p)?.analysis,
        None => Default::default(),
    };
    let dir = run_dir(out, "detect-stages")?;
    let curve = read_llc_curve(&curve_path)?;
    let ls = length_scale.unwrap_or(analysis.gp_length_scale);
    let sm = smooth_curve(
        &curve,
        ls,
        NoiseSpec::FromCurveStd {
            floor: analysis.gp_noise_floor,
        },
    )?;
    let tol = match tolerance {
        Some(a) => Tolerance::Absolute(a),
        None => Tolerance::Relative(analysis.boundary_tolerance),
    };
    let bounds = detect_boundaries(&sm, tol);
    let table = stage_table(&curve, &bounds);

    write_smoothed(&dir.join("smoothed.csv"), &sm)?;
    write_boundaries(&dir.join("boundaries.csv"), &bounds)?;
    write_stage_table(&dir.join("stages.csv"), &table)?;
    let rendered = render_stage_table(&table);
    std::fs::write(dir.join("stages.txt"), &rendered)?;
    print!("{rendered}");

    let raw = Series {
        name: "lambda_hat".into(),
        points: curve
            .points
            .iter()
            .filter(|p| p.step > 0)
            .map(|p| (p.step as f64, p.lambda_hat))
            .collect(),
    };
    let smoothed = Series {
        name: "gp mean".into(),
        points: sm
            .steps
            .iter()
            .zip(&sm.mean)
            .map(|(&s, &m)| (s as f64, m))
            .collect(),
    };
    std::fs::write(
        dir.join("stages.svg"),
        line_plot(
            "LLC curve and smoothed fit",
            "log10 step",
            "lambda_hat",
            &[raw, smoothed],
            true,
        ),
    )?;
    eprintln!("{} boundaries -> {}", bounds.len(), dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn hessian(
    config: PathBuf,
    checkpoint: Option<PathBuf>,
    run: Option<PathBuf>,
    out: Option<PathBuf>,
    probes: Option<usize>,
    power_iters: Option<usize>,
    batch: Option<usize>,
) -> Result<()> {
    let cfg = RunConfig::load(&config)?;
    let dir = run_dir(out, "hessian-stats")?;
    let model = TransformerModel::new(cfg.model.clone())?;
    let digest = cfg.provenance_digest();
    let probes = probes.unwrap_or(cfg.analysis.hessian_probes);
    let iters = power_iters.unwrap_or(cfg.analysis.hessian_power_iters);
    let batch_size = batch.unwrap_or(cfg.analysis.hessian_batch);
    // a fixed batch shared by every checkpoint
    let contexts = sample_batch(&cfg.data, batch_size, Stream::SgldData, u64::MAX);
    let hbatch = TransformerBatch::mean(contexts);

    let targets: Vec<(u64, PathBuf)> = match (checkpoint, run) {
        (Some(p), None) => vec![(u64::MAX, p)],
        (None, Some(r)) => scan_checkpoints(&r)?,
        _ => {
            return Err(dgsc_core::CoreError::config(
                "target",
                "exactly one of --checkpoint or --run is required",
            ))
        }
    };

    let mut rows = Vec::new();
    for (step, path) in &targets {
        let (ck, _) = load_checkpoint(path, model.layout().clone(), Some(&digest))?;
        let step = if *step == u64::MAX { ck.step } else { *step };
        let stats = hessian_stats(
            &model,
            &ck.params.values,
            &hbatch,
            probes,
            iters,
            cfg.sgld.seed,
        )?;
        eprintln!(
            "step {step}: trace {:.4} (se {:.4}), max eig {:.5}",
            stats.trace, stats.trace_stderr, stats.max_eigenvalue
        );
        if targets.len() == 1 {
            write_json(&dir.join("hessian.json"), &stats)?;
        }
        rows.push((step, stats));
    }
    write_versioned_csv(
        &dir.join("hessian.csv"),
        "hessian_stats",
        &[
            "step",
            "trace",
            "trace_stderr",
            "max_eigenvalue",
            "power_residual",
            "power_converged",
        ],
        rows.iter().map(|(step, s)| {
            vec![
                step.to_string(),
                s.trace.to_string(),
                s.trace_stderr.to_string(),
                s.max_eigenvalue.to_string(),
                s.power_residual.to_string(),
                s.power_converged.to_string(),
            ]
        }),
    )?;
    let trace = Series {
        name: "trace".into(),
        points: rows
            .iter()
            .filter(|(s, _)| *s > 0)
            .map(|(s, st)| (*s as f64, st.trace))
            .collect(),
    };
    let maxeig = Series {
        name: "max eigenvalue".into(),
        points: rows
            .iter()
            .filter(|(s, _)| *s > 0)
            .map(|(s, st)| (*s as f64, st.max_eigenvalue))
            .collect(),
    };
    std::fs::write(
        dir.join("hessian.svg"),
        line_plot(
            "Hessian statistics over training",
            "log10 step",
            "value",
            &[trace, maxeig],
            true,
        ),
    )?;
    Ok(())
}
