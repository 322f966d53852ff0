//! The `train` subcommand.

use crate::util::{run_dir, write_json};
use dgsc_core::model::DifferentiableLoss;
use dgsc_core::data::eval_set;
use dgsc_core::io::checkpoint::{checkpoint_file_name, load_checkpoint, save_checkpoint};
use dgsc_core::io::config::RunConfig;
use dgsc_core::io::csvio::write_versioned_csv;
use dgsc_core::io::svg::{line_plot, Series};
use dgsc_core::train::{evaluate, train, EvalResult};
use dgsc_core::transformer::TransformerModel;
use dgsc_core::{CoreError, Result};
use serde::Serialize;
use std::io::Write;
use std::path::PathBuf;

#[derive(Serialize)]
struct TrainSummary {
    final_step: u64,
    checkpoints: usize,
    eval: EvalResult,
    provenance_digest: String,
}

pub fn run(config: PathBuf, out: Option<PathBuf>, resume: Option<PathBuf>) -> Result<()> {
    let cfg = RunConfig::load(&config)?;
    let dir = run_dir(out, "train")?;
    cfg.save(&dir.join("config.toml"))?;
    let ckpt_dir = dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;

    let model = TransformerModel::new(cfg.model.clone())?;
    let digest = cfg.provenance_digest();

    let start = match &resume {
        None => None,
        Some(path) => {
            let (ck, _) = load_checkpoint(path, model.layout().clone(), Some(&digest))?;
            Some(ck)
        }
    };

    // per-step log, buffered and written at the end (it is a pure function
    // of the config, so a crash loses nothing that a rerun cannot recreate)
    let mut log: Vec<(u64, f64, f64)> = Vec::with_capacity(cfg.train.steps as usize);
    let mut n_ckpts = 0usize;
    let final_ck = {
        let mut on_ckpt = |ck: &dgsc_core::train::Checkpoint| -> Result<()> {
            save_checkpoint(&ckpt_dir.join(checkpoint_file_name(ck.step)), ck, &digest)?;
            n_ckpts += 1;
            Ok(())
        };
        let mut on_step = |t: u64, loss: f64, lr: f64| {
            log.push((t, loss, lr));
            if t % 1000 == 0 {
                eprintln!("step {t}: loss {loss:.5} lr {lr:.2e}");
                let _ = std::io::stderr().flush();
            }
        };
        train(&model, &cfg.data, &cfg.train, start.as_ref(), &mut on_ckpt, &mut on_step)?
    };

    write_versioned_csv(
        &dir.join("train_log.csv"),
        "train_log",
        &["step", "loss", "lr"],
        log.iter()
            .map(|(t, l, r)| vec![t.to_string(), l.to_string(), r.to_string()]),
    )?;
    let loss_series = Series {
        name: "train loss".into(),
        points: log
            .iter()
            .filter(|(t, _, _)| *t > 0)
            .map(|(t, l, _)| (*t as f64, *l))
            .collect(),
    };
    std::fs::write(
        dir.join("train_log.svg"),
        line_plot("training loss", "log10 step", "batch loss", &[loss_series], true),
    )?;

    let eval = evaluate(&model, &final_ck.params.values, &eval_set(&cfg.data))?;
    let summary = TrainSummary {
        final_step: final_ck.step,
        checkpoints: n_ckpts,
        eval,
        provenance_digest: dgsc_core::io::config::digest_hex(&digest),
    };
    write_json(&dir.join("train_summary.json"), &summary)?;
    eprintln!(
        "trained to step {} ({} checkpoints) -> {}",
        final_ck.step,
        n_ckpts,
        dir.display()
    );
    Ok(())
}

/// Load every checkpoint in a run directory, sorted by step.
pub fn scan_checkpoints(run: &PathBuf) -> Result<Vec<(u64, PathBuf)>> {
    let dir = run.join("checkpoints");
    let mut found = Vec::new();
    for entry in std::fs::read_dir(&dir)? {
        let entry = entry?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(step) = dgsc_core::io::checkpoint::parse_checkpoint_step(&name) {
            found.push((step, entry.path()));
        }
    }
    if found.is_empty() {
        return Err(CoreError::Format(format!(
            "no checkpoints under `{}`",
            dir.display()
        )));
    }
    found.sort_by_key(|(s, _)| *s);
    Ok(found)
}
