//! The `metrics` subcommand: the full behavioral/structural suite over a
//! run's checkpoints, one CSV (plus SVG) per metric family.

use crate::cmd_train::scan_checkpoints;
use crate::util::run_dir;
use dgsc_core::model::DifferentiableLoss;
use dgsc_core::data::{eval_set, sample_batch, task_prior, OodMode};
use dgsc_core::io::checkpoint::load_checkpoint;
use dgsc_core::io::config::RunConfig;
use dgsc_core::io::csvio::{write_metric_series, MetricRow};
use dgsc_core::io::svg::{line_plot, Series};
use dgsc_core::metrics::{
    attention_entropy, attention_variability, collapse_report, composition_scores, head_scores,
    icl_score, mean_square_of, ood_sweep, task_prior_score_of, HeadComponent,
};
use dgsc_core::rng::Stream;
use dgsc_core::train::evaluate;
use dgsc_core::transformer::{AttentionRecord, TransformerModel};
use dgsc_core::Result;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub fn run(config: PathBuf, run: PathBuf, out: Option<PathBuf>) -> Result<()> {
    let cfg = RunConfig::load(&config)?;
    let dir = run_dir(out, "metrics")?;
    let model = TransformerModel::new(cfg.model.clone())?;
    let digest = cfg.provenance_digest();
    let eval = eval_set(&cfg.data);
    let attn_contexts = sample_batch(&cfg.data, cfg.analysis.attention_batch, Stream::EvalData, 1);
    let prior = task_prior(&cfg.data);
    let k = cfg.model.max_examples;
    let d = cfg.model.input_dim;

    let mut families: BTreeMap<&'static str, Vec<MetricRow>> = BTreeMap::new();
    let mut push = |fam: &'static str, step: u64, metric: &str, index: String, value: f64| {
        families.entry(fam).or_default().push(MetricRow {
            step,
            metric: metric.to_string(),
            index,
            value,
        });
    };

    let checkpoints = scan_checkpoints(&run)?;
    eprintln!("computing metrics at {} checkpoints", checkpoints.len());
    for (step, path) in &checkpoints {
        let (ck, _) = load_checkpoint(path, model.layout().clone(), Some(&digest))?;
        let params = &ck.params;
        let step = *step;

        // per-token losses and ICL scores
        let ev = evaluate(&model, &params.values, &eval)?;
        for (i, l) in ev.per_token.iter().enumerate() {
            push("per_token_loss", step, "loss", (i + 1).to_string(), *l);
        }
        push("per_token_loss", step, "mean", String::new(), ev.mean);
        push(
            "icl",
            step,
            "icl",
            format!("1:{d}"),
            icl_score(&ev.per_token, 1, d)?,
        );
        push(
            "icl",
            step,
            "icl",
            format!("{d}:{k}"),
            icl_score(&ev.per_token, d, k)?,
        );

        // prediction magnitude and task-prior distance
        let preds = dgsc_core::metrics::batch_predictions(&model, &params.values, &eval)?;
        push("prediction", step, "mean_square_prediction", String::new(), mean_square_of(&preds));
        push(
            "prediction",
            step,
            "task_prior_score",
            String::new(),
            task_prior_score_of(&preds, &eval, &prior),
        );

        // OOD sweeps over both factors
        for (mode, tag) in [(OodMode::Inputs, "inputs"), (OodMode::Tasks, "tasks")] {
            let pts = ood_sweep(
                &model,
                &params.values,
                &cfg.data,
                &cfg.analysis.ood_gains,
                mode,
                cfg.analysis.ood_batch,
            )?;
            for p in pts {
                push("ood", step, &format!("norm_loss_{tag}"), format!("{}", p.gain), p.normalized_loss);
                push("ood", step, &format!("mean_abs_pred_{tag}"), format!("{}", p.gain), p.mean_abs_prediction);
            }
        }

        // attention statistics over a fixed validation batch
        let records: Vec<AttentionRecord> = attn_contexts
            .iter()
            .map(|ctx| {
                model
                    .forward(&params.values, ctx, true)
                    .map(|(_, rec)| rec.expect("capture requested"))
            })
            .collect::<Result<_>>()?;
        let ent_mean = {
            // average the per-sample normalized entropies
            let per: Vec<_> = records.iter().map(attention_entropy).collect();
            move |l: usize, h: usize, comp: HeadComponent| -> f64 {
                let vals: Vec<f64> = per.iter().map(|e| e.head_component_mean(l, h, comp)).collect();
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        let var = attention_variability(&records)?;
        for l in 0..cfg.model.layers {
            for h in 0..cfg.model.heads {
                for (comp, tag) in [(HeadComponent::X, "x"), (HeadComponent::Y, "y")] {
                    let idx = format!("b{l}h{h}{tag}");
                    push("attention", step, "entropy", idx.clone(), ent_mean(l, h, comp));
                    push(
                        "attention",
                        step,
                        "variability",
                        idx,
                        var.head_component_mean(l, h, comp),
                    );
                }
            }
        }
        let labels = head_scores(
            &records,
            cfg.analysis.head_score_threshold,
            cfg.analysis.head_variability_threshold,
        )?;
        for lab in &labels {
            let tag = match lab.component {
                HeadComponent::X => "x",
                HeadComponent::Y => "y",
            };
            let idx = format!("b{}h{}{}", lab.layer, lab.head, tag);
            push("heads", step, "self", idx.clone(), lab.self_score);
            push("heads", step, "previous_token", idx.clone(), lab.previous_token_score);
            push("heads", step, "x_total", idx.clone(), lab.x_total);
            push("heads", step, "y_total", idx.clone(), lab.y_total);
            push(
                "heads",
                step,
                "class",
                idx,
                match lab.class {
                    dgsc_core::metrics::HeadClass::SelfToken => 1.0,
                    dgsc_core::metrics::HeadClass::PreviousToken => 2.0,
                    dgsc_core::metrics::HeadClass::PreviousX => 3.0,
                    dgsc_core::metrics::HeadClass::PreviousY => 4.0,
                    dgsc_core::metrics::HeadClass::Unclassified => 0.0,
                },
            );
        }

        // composition between every first- and second-layer head pair
        if cfg.model.layers >= 2 {
            for h1 in 0..cfg.model.heads {
                for h2 in 0..cfg.model.heads {
                    let s = composition_scores(&model, params, (0, h1), (1, h2))?;
                    let idx = format!("0:{h1}->1:{h2}");
                    push("composition", step, "q", idx.clone(), s.q);
                    push("composition", step, "k", idx.clone(), s.k);
                    push("composition", step, "v", idx, s.v);
                }
            }
        }

        // collapse report
        let rep = collapse_report(&model, params, cfg.analysis.collapse_threshold)?;
        for ln in &rep.layer_norms {
            push("collapse", step, "ln_frac_w_below", ln.module.clone(), ln.fraction_weights_below);
            push("collapse", step, "ln_frac_b_below", ln.module.clone(), ln.fraction_biases_below);
        }
        for (i, s) in rep.embedding_singular_values.iter().enumerate() {
            push("collapse", step, "embed_sv", i.to_string(), *s);
        }
        for (i, s) in rep.positional_singular_values.iter().enumerate() {
            push("collapse", step, "pos_sv", i.to_string(), *s);
        }
        for (i, c) in rep.embed_unembed_cosines.iter().enumerate() {
            push("collapse", step, "embed_unembed_cos", i.to_string(), *c);
        }
        for (i, w) in rep.effective_unembed_w.iter().enumerate() {
            push("collapse", step, "eff_unembed_w", i.to_string(), *w);
        }
        push("collapse", step, "eff_unembed_b", String::new(), rep.effective_unembed_b);
    }

    for (family, rows) in &families {
        let csv_path = dir.join(format!("{family}.csv"));
        write_metric_series(&csv_path, rows)?;
        write_family_svg(&dir, family, rows)?;
    }
    eprintln!("{} metric families -> {}", families.len(), dir.display());
    Ok(())
}

/// One SVG per family: a line per (metric, index) pair over step.
fn write_family_svg(dir: &Path, family: &str, rows: &[MetricRow]) -> Result<()> {
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        if r.step == 0 {
            continue; // log axis
        }
        let name = if r.index.is_empty() {
            r.metric.clone()
        } else {
            format!("{} [{}]", r.metric, r.index)
        };
        series.entry(name).or_default().push((r.step as f64, r.value));
    }
    let series: Vec<Series> = series
        .into_iter()
        .map(|(name, points)| Series { name, points })
        .collect();
    std::fs::write(
        dir.join(format!("{family}.svg")),
        line_plot(family, "log10 step", "value", &series, true),
    )?;
    Ok(())
}
