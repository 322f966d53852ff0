//! Versioned CSV exports. Every file starts with a schema line
//! `# dgsc-csv <major> <name>`; readers reject unknown major versions.

use crate::error::{CoreError, Result};
use crate::geometry::{CurvePoint, LlcCurve, SmoothedCurve, StageBoundary, StageRow};
use crate::sgld::LlcEstimate;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const CSV_MAJOR: u32 = 1;

pub fn write_versioned_csv(
    path: &Path,
    schema: &str,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "# dgsc-csv {CSV_MAJOR} {schema}")?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(header)
        .map_err(|e| CoreError::Format(e.to_string()))?;
    for row in rows {
        csv.write_record(&row)
            .map_err(|e| CoreError::Format(e.to_string()))?;
    }
    csv.flush()?;
    Ok(())
}

/// Open a versioned CSV, checking the schema line, returning (header,
/// records).
pub fn read_versioned_csv(path: &Path, schema: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let file = std::fs::File::open(path)?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    let parts: Vec<&str> = first.trim().split_whitespace().collect();
    if parts.len() < 3 || parts[0] != "#" || parts[1] != "dgsc-csv" {
        return Err(CoreError::Format(format!(
            "`{}` lacks a dgsc-csv schema line",
            path.display()
        )));
    }
    let major: u32 = parts[2]
        .parse()
        .map_err(|_| CoreError::Format("bad schema version".into()))?;
    if major != CSV_MAJOR {
        return Err(CoreError::Format(format!(
            "unsupported csv major version {major} (reader supports {CSV_MAJOR})"
        )));
    }
    if parts.get(3) != Some(&schema) {
        return Err(CoreError::Format(format!(
            "`{}` holds schema `{}`, expected `{schema}`",
            path.display(),
            parts.get(3).unwrap_or(&"<none>")
        )));
    }
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header = csv
        .headers()
        .map_err(|e| CoreError::Format(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in csv.records() {
        let rec = rec.map_err(|e| CoreError::Format(e.to_string()))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

// ---------------------------------------------------------------------------
// Concrete schemas
// ---------------------------------------------------------------------------

pub fn write_llc_curve(path: &Path, curve: &LlcCurve) -> Result<()> {
    write_versioned_csv(
        path,
        "llc_curve",
        &["step", "lambda_hat", "std", "loss"],
        curve.points.iter().map(|p| {
            vec![
                p.step.to_string(),
                p.lambda_hat.to_string(),
                p.std.to_string(),
                p.loss.map(|l| l.to_string()).unwrap_or_default(),
            ]
        }),
    )
}

pub fn read_llc_curve(path: &Path) -> Result<LlcCurve> {
    let (header, rows) = read_versioned_csv(path, "llc_curve")?;
    let col = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CoreError::Format(format!("llc_curve missing column `{name}`")))
    };
    let (ci_step, ci_lam, ci_std) = (col("step")?, col("lambda_hat")?, col("std")?);
    let ci_loss = header.iter().position(|h| h == "loss");
    let mut points = Vec::with_capacity(rows.len());
    for row in rows {
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| CoreError::Format(format!("bad number `{s}` in llc_curve")))
        };
        points.push(CurvePoint {
            step: row[ci_step]
                .parse()
                .map_err(|_| CoreError::Format("bad step".into()))?,
            lambda_hat: parse(&row[ci_lam])?,
            std: parse(&row[ci_std])?,
            loss: match ci_loss {
                Some(i) if !row[i].is_empty() => Some(parse(&row[i])?),
                _ => None,
            },
        });
    }
    let curve = LlcCurve {
        points,
        gaps: Vec::new(),
    };
    curve.validate()?;
    Ok(curve)
}

/// Per-chain traces: (chain, tau, loss, lambda_running).
pub fn write_traces(path: &Path, est: &LlcEstimate) -> Result<()> {
    write_versioned_csv(
        path,
        "llc_traces",
        &["chain", "tau", "loss", "lambda_running"],
        est.chains.iter().enumerate().flat_map(|(c, rec)| {
            rec.losses
                .iter()
                .zip(rec.lambda_trace.iter().skip(1))
                .enumerate()
                .map(move |(i, (loss, lam))| {
                    vec![
                        c.to_string(),
                        (i + 1).to_string(),
                        loss.to_string(),
                        lam.to_string(),
                    ]
                })
                .collect::<Vec<_>>()
        }),
    )
}

pub fn write_smoothed(path: &Path, sm: &SmoothedCurve) -> Result<()> {
    write_versioned_csv(
        path,
        "smoothed_curve",
        &["step", "log10_step", "mean", "derivative", "derivative_std"],
        (0..sm.steps.len()).map(|i| {
            vec![
                sm.steps[i].to_string(),
                sm.x[i].to_string(),
                sm.mean[i].to_string(),
                sm.derivative[i].to_string(),
                sm.derivative_std[i].to_string(),
            ]
        }),
    )
}

pub fn write_boundaries(path: &Path, bounds: &[StageBoundary]) -> Result<()> {
    write_versioned_csv(
        path,
        "stage_boundaries",
        &["step", "kind", "derivative_value"],
        bounds.iter().map(|b| {
            vec![
                b.step.to_string(),
                format!("{:?}", b.kind).to_lowercase(),
                b.derivative_value.to_string(),
            ]
        }),
    )
}

pub fn write_stage_table(path: &Path, rows: &[StageRow]) -> Result<()> {
    write_versioned_csv(
        path,
        "stage_table",
        &["stage", "end_step", "delta_loss", "delta_llc"],
        rows.iter().map(|r| {
            vec![
                r.stage.to_string(),
                r.end_step.to_string(),
                r.delta_loss.map(|v| v.to_string()).unwrap_or_default(),
                r.delta_llc.to_string(),
            ]
        }),
    )
}

/// Long-format metric series: (step, metric, index, value).
pub struct MetricRow {
    pub step: u64,
    pub metric: String,
    pub index: String,
    pub value: f64,
}

pub fn write_metric_series(path: &Path, rows: &[MetricRow]) -> Result<()> {
    write_versioned_csv(
        path,
        "metric_series",
        &["step", "metric", "index", "value"],
        rows.iter().map(|r| {
            vec![
                r.step.to_string(),
                r.metric.clone(),
                r.index.clone(),
                r.value.to_string(),
            ]
        }),
    )
}

pub fn read_metric_series(path: &Path) -> Result<Vec<MetricRow>> {
    let (_, rows) = read_versioned_csv(path, "metric_series")?;
    rows.into_iter()
        .map(|r| {
            Ok(MetricRow {
                step: r[0].parse().map_err(|_| CoreError::Format("bad step".into()))?,
                metric: r[1].clone(),
                index: r[2].clone(),
                value: r[3]
                    .parse()
                    .map_err(|_| CoreError::Format("bad value".into()))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn llc_curve_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        let curve = LlcCurve {
            points: vec![
                CurvePoint { step: 1, lambda_hat: 0.5, std: 0.01, loss: Some(2.0) },
                CurvePoint { step: 10, lambda_hat: 1.25, std: 0.02, loss: None },
            ],
            gaps: Vec::new(),
        };
        write_llc_curve(&path, &curve).unwrap();
        let loaded = read_llc_curve(&path).unwrap();
        assert_eq!(loaded.points.len(), 2);
        assert_eq!(loaded.points[0].loss, Some(2.0));
        assert_eq!(loaded.points[1].loss, None);
        assert_eq!(loaded.points[1].lambda_hat.to_bits(), 1.25f64.to_bits());
    }

    #[test]
    fn unknown_major_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "# dgsc-csv 2 llc_curve\nstep,lambda_hat,std,loss\n").unwrap();
        assert!(matches!(
            read_llc_curve(&path),
            Err(CoreError::Format(_))
        ));
    }

    #[test]
    fn wrong_schema_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metric_series(
            &path,
            &[MetricRow {
                step: 0,
                metric: "icl".into(),
                index: "1:4".into(),
                value: -0.5,
            }],
        )
        .unwrap();
        assert!(read_llc_curve(&path).is_err());
        let rows = read_metric_series(&path).unwrap();
        assert_eq!(rows[0].metric, "icl");
        assert_eq!(rows[0].value, -0.5);
    }
}
