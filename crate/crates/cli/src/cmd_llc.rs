//! The `estimate-llc`, `llc-curve`, and `sweep` subcommands.

use crate::cmd_train::scan_checkpoints;
use crate::util::{run_dir, write_json};
use dgsc_core::model::DifferentiableLoss;
use dgsc_core::data::eval_set;
use dgsc_core::io::checkpoint::load_checkpoint;
use dgsc_core::io::config::RunConfig;
use dgsc_core::io::csvio::{write_llc_curve, write_traces, write_versioned_csv};
use dgsc_core::io::svg::{line_plot, Series};
use dgsc_core::potentials::{as_loss_model, potential_by_name};
use dgsc_core::sgld::{
    calibration_sweep, estimate_llc, estimate_llc_curve, CalibrationGrid, CurveInput,
    LlcEstimate, LossMode, PotentialTarget, RegressionTarget, SgldConfig,
};
use dgsc_core::train::evaluate;
use dgsc_core::transformer::TransformerModel;
use dgsc_core::{CoreError, Result};
use serde::Serialize;
use std::path::PathBuf;

#[derive(Serialize)]
struct EstimateSummary {
    lambda_hat: f64,
    per_chain: Vec<f64>,
    std: f64,
    init_loss: f64,
    flags: Vec<&'static str>,
    excluded_chains: usize,
    config: SgldConfig,
}

fn summarize(est: &LlcEstimate, cfg: &SgldConfig) -> EstimateSummary {
    EstimateSummary {
        lambda_hat: est.lambda_hat,
        per_chain: est.per_chain.clone(),
        std: est.std,
        init_loss: est.init_loss,
        flags: est.flags.labels(),
        excluded_chains: est.chains.iter().filter(|c| !c.included).count(),
        config: cfg.clone(),
    }
}

pub struct EstimateArgs {
    pub potential: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epsilon: Option<f64>,
    pub gamma: Option<f64>,
    pub nbeta: Option<f64>,
    pub chains: Option<usize>,
    pub steps: Option<usize>,
    pub burn_in: Option<usize>,
    pub batch_size: Option<usize>,
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn apply_overrides(cfg: &mut SgldConfig, a: &EstimateArgs) {
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epsilon {
        cfg.epsilon = v;
    }
    if let Some(v) = a.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = a.nbeta {
        cfg.nbeta = v;
    }
    if let Some(v) = a.chains {
        cfg.chains = v;
    }
    if let Some(v) = a.steps {
        cfg.steps_per_chain = v;
    }
    if let Some(v) = a.burn_in {
        cfg.burn_in = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
}

pub fn estimate(args: EstimateArgs) -> Result<()> {
    let run_cfg = load_config(&args.config)?;
    let mut sgld = run_cfg.sgld.clone();
    apply_overrides(&mut sgld, &args);
    let dir = run_dir(args.out.clone(), "estimate-llc")?;

    let est = match (&args.potential, &args.checkpoint) {
        (Some(name), None) => {
            let p = potential_by_name(name)?;
            let w_star = p.reference_point.clone();
            let target = PotentialTarget {
                model: as_loss_model(p, sgld.dataset_size),
            };
            estimate_llc(&target, &w_star, &sgld)?
        }
        (None, Some(ckpt)) => {
            let model = TransformerModel::new(run_cfg.model.clone())?;
            let digest = run_cfg.provenance_digest();
            let (ck, _) = load_checkpoint(ckpt, model.layout().clone(), Some(&digest))?;
            let target = RegressionTarget::new(&model, &run_cfg.data, &sgld)?;
            estimate_llc(&target, &ck.params.values, &sgld)?
        }
        _ => {
            return Err(CoreError::config(
                "target",
                "exactly one of --potential or --checkpoint is required",
            ))
        }
    };

    write_traces(&dir.join("traces.csv"), &est)?;
    write_json(&dir.join("summary.json"), &summarize(&est, &sgld))?;
    let series: Vec<Series> = est
        .chains
        .iter()
        .enumerate()
        .map(|(c, rec)| Series {
            name: format!("chain {c}"),
            points: rec
                .lambda_trace
                .iter()
                .enumerate()
                .skip(1)
                .map(|(i, &l)| (i as f64, l))
                .collect(),
        })
        .collect();
    std::fs::write(
        dir.join("traces.svg"),
        line_plot("running LLC estimate", "SGLD step", "lambda", &series, false),
    )?;
    println!(
        "lambda_hat {:.6} (std {:.6}, flags {})",
        est.lambda_hat, est.std, est.flags
    );
    Ok(())
}

pub fn curve(
    config: PathBuf,
    run: PathBuf,
    out: Option<PathBuf>,
    loss_mode: Option<String>,
) -> Result<()> {
    let run_cfg = RunConfig::load(&config)?;
    let mut sgld = run_cfg.sgld.clone();
    if let Some(mode) = loss_mode {
        sgld.loss_mode = match mode.as_str() {
            "subsequence" => LossMode::Subsequence,
            "likelihood" => LossMode::Likelihood,
            other => {
                return Err(CoreError::config(
                    "sgld.loss_mode",
                    format!("unknown loss mode `{other}`"),
                ))
            }
        };
    }
    let dir = run_dir(out, "llc-curve")?;
    let model = TransformerModel::new(run_cfg.model.clone())?;
    let digest = run_cfg.provenance_digest();
    let target = RegressionTarget::new(&model, &run_cfg.data, &sgld)?;

    let inputs: Vec<CurveInput> = scan_checkpoints(&run)?
        .into_iter()
        .map(|(step, path)| CurveInput {
            step,
            params: load_checkpoint(&path, model.layout().clone(), Some(&digest))
                .map(|(ck, _)| ck.params.values)
                .map_err(|e| e.to_string()),
        })
        .collect();

    eprintln!("estimating LLC at {} checkpoints", inputs.len());
    let (mut curve, _) = estimate_llc_curve(&target, inputs, &sgld);

    // attach test loss per checkpoint for the stage tables
    let eval = eval_set(&run_cfg.data);
    for point in curve.points.iter_mut() {
        let path = run
            .join("checkpoints")
            .join(dgsc_core::io::checkpoint::checkpoint_file_name(point.step));
        if let Ok((ck, _)) = load_checkpoint(&path, model.layout().clone(), Some(&digest)) {
            point.loss = Some(evaluate(&model, &ck.params.values, &eval)?.mean);
        }
    }

    write_llc_curve(&dir.join("llc_curve.csv"), &curve)?;
    write_json(&dir.join("curve_summary.json"), &curve)?;
    let lam = Series {
        name: "lambda_hat".into(),
        points: curve
            .points
            .iter()
            .filter(|p| p.step > 0)
            .map(|p| (p.step as f64, p.lambda_hat))
            .collect(),
    };
    std::fs::write(
        dir.join("llc_curve.svg"),
        line_plot("LLC over training", "log10 step", "lambda_hat", &[lam], true),
    )?;
    eprintln!(
        "curve with {} points, {} gaps -> {}",
        curve.points.len(),
        curve.gaps.len(),
        dir.display()
    );
    Ok(())
}

pub struct SweepArgs {
    pub potential: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub epsilons: Option<Vec<f64>>,
    pub beta_tildes: Option<Vec<f64>>,
    pub gamma_tildes: Option<Vec<f64>>,
    pub max_steps: Option<usize>,
    pub seed: Option<u64>,
}

pub fn sweep(args: SweepArgs) -> Result<()> {
    let run_cfg = load_config(&args.config)?;
    let mut base = run_cfg.sgld.clone();
    if let Some(s) = args.seed {
        base.seed = s;
    }
    let mut grid = CalibrationGrid::for_potentials();
    if let Some(v) = args.epsilons {
        grid.epsilons = v;
    }
    if let Some(v) = args.beta_tildes {
        grid.beta_tildes = v;
    }
    if let Some(v) = args.gamma_tildes {
        grid.gamma_tildes = v;
    }
    if let Some(v) = args.max_steps {
        grid.max_steps = v;
    }
    let dir = run_dir(args.out.clone(), "sweep")?;

    let outcome = match (&args.potential, &args.checkpoint) {
        (Some(name), None) => {
            let p = potential_by_name(name)?;
            let w_star = p.reference_point.clone();
            let target = PotentialTarget {
                model: as_loss_model(p, base.dataset_size),
            };
            calibration_sweep(&target, &w_star, &grid, &base)?
        }
        (None, Some(ckpt)) => {
            let model = TransformerModel::new(run_cfg.model.clone())?;
            let digest = run_cfg.provenance_digest();
            let (ck, _) = load_checkpoint(ckpt, model.layout().clone(), Some(&digest))?;
            let target = RegressionTarget::new(&model, &run_cfg.data, &base)?;
            calibration_sweep(&target, &ck.params.values, &grid, &base)?
        }
        _ => {
            return Err(CoreError::config(
                "target",
                "exactly one of --potential or --checkpoint is required",
            ))
        }
    };

    write_versioned_csv(
        &dir.join("sweep.csv"),
        "calibration_sweep",
        &[
            "epsilon",
            "beta_tilde",
            "gamma_tilde",
            "nbeta",
            "gamma",
            "steps_per_chain",
            "lambda_hat",
            "std",
            "flags",
            "admissible",
        ],
        outcome.points.iter().map(|p| {
            vec![
                p.epsilon.to_string(),
                p.beta_tilde.to_string(),
                p.gamma_tilde.to_string(),
                p.nbeta.to_string(),
                p.gamma.to_string(),
                p.steps_per_chain.to_string(),
                p.lambda_hat.to_string(),
                p.std.to_string(),
                p.flags.to_string(),
                p.admissible.to_string(),
            ]
        }),
    )?;
    write_json(&dir.join("sweep_summary.json"), &outcome)?;
    match outcome.recommended_point() {
        Some(p) => println!(
            "recommended: epsilon {:.1e} beta_tilde {:.1e} gamma_tilde {:.1e} -> lambda_hat {:.4}",
            p.epsilon, p.beta_tilde, p.gamma_tilde, p.lambda_hat
        ),
        None => println!("no admissible grid point"),
    }
    Ok(())
}

