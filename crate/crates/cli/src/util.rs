//! Shared CLI plumbing: run directories, JSON output, exit codes.

use dgsc_core::CoreError;
use std::path::{Path, PathBuf};

/// Exit codes: 2 config, 3 I/O, 4 estimation.
pub fn exit_code(err: &CoreError) -> i32 {
    match err {
        CoreError::Config { .. } | CoreError::Shape(_) => 2,
        CoreError::Io(_)
        | CoreError::Format(_)
        | CoreError::Integrity(_)
        | CoreError::Compatibility { .. } => 3,
        CoreError::Estimation(_)
        | CoreError::NonFinite { .. }
        | CoreError::InsufficientHits { .. }
        | CoreError::SingularKernel { .. } => 4,
    }
}

/// Output root: --out if given, else $DGSC_RUN_DIR/<name>, else
/// ./runs/<name>. Re-running into the same directory overwrites.
pub fn run_dir(out: Option<PathBuf>, name: &str) -> Result<PathBuf, CoreError> {
    let dir = match out {
        Some(d) => d,
        None => {
            let root = std::env::var("DGSC_RUN_DIR").unwrap_or_else(|_| "runs".into());
            Path::new(&root).join(name)
        }
    };
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CoreError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CoreError::Format(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn parse_f64_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect()
}
