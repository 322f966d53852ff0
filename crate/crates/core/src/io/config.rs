//! The run configuration: one TOML file with nested sections, fully
//! serializable, with a digest that is stable under key reordering.

use crate::data::DataConfig;
use crate::error::{CoreError, Result};
use crate::sgld::SgldConfig;
use crate::train::TrainConfig;
use crate::transformer::TransformerConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Analysis-stage knobs: stage detection, metric batches, Hessian probes.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AnalysisConfig {
    /// GP length-scale for curve smoothing, in log10-step units.
    #[serde(default = "d_gp_length_scale")]
    pub gp_length_scale: f64,
    /// Floor on the per-point GP noise variance.
    #[serde(default = "d_gp_noise_floor")]
    pub gp_noise_floor: f64,
    /// Plateau tolerance as a fraction of the max |derivative|.
    #[serde(default = "d_boundary_tolerance")]
    pub boundary_tolerance: f64,
    #[serde(default = "d_ood_gains")]
    pub ood_gains: Vec<f64>,
    #[serde(default = "d_ood_batch")]
    pub ood_batch: usize,
    /// Contexts used for attention-pattern statistics.
    #[serde(default = "d_attention_batch")]
    pub attention_batch: usize,
    #[serde(default = "d_head_score_threshold")]
    pub head_score_threshold: f64,
    #[serde(default = "d_head_variability_threshold")]
    pub head_variability_threshold: f64,
    /// Magnitude below which a weight counts as collapsed.
    #[serde(default = "d_collapse_threshold")]
    pub collapse_threshold: f64,
    #[serde(default = "d_hessian_probes")]
    pub hessian_probes: usize,
    #[serde(default = "d_hessian_power_iters")]
    pub hessian_power_iters: usize,
    /// Batch size for Hessian-vector products.
    #[serde(default = "d_hessian_batch")]
    pub hessian_batch: usize,
}

fn d_gp_length_scale() -> f64 {
    1.0
}
fn d_gp_noise_floor() -> f64 {
    1e-6
}
fn d_boundary_tolerance() -> f64 {
    0.05
}
fn d_ood_gains() -> Vec<f64> {
    crate::metrics::default_ood_gains()
}
fn d_ood_batch() -> usize {
    512
}
fn d_attention_batch() -> usize {
    128
}
fn d_head_score_threshold() -> f64 {
    0.8
}
fn d_head_variability_threshold() -> f64 {
    0.2
}
fn d_collapse_threshold() -> f64 {
    0.1
}
fn d_hessian_probes() -> usize {
    10
}
fn d_hessian_power_iters() -> usize {
    50
}
fn d_hessian_batch() -> usize {
    256
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            gp_length_scale: d_gp_length_scale(),
            gp_noise_floor: d_gp_noise_floor(),
            boundary_tolerance: d_boundary_tolerance(),
            ood_gains: d_ood_gains(),
            ood_batch: d_ood_batch(),
            attention_batch: d_attention_batch(),
            head_score_threshold: d_head_score_threshold(),
            head_variability_threshold: d_head_variability_threshold(),
            collapse_threshold: d_collapse_threshold(),
            hessian_probes: d_hessian_probes(),
            hessian_power_iters: d_hessian_power_iters(),
            hessian_batch: d_hessian_batch(),
        }
    }
}

fn d_version() -> String {
    "1".into()
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    #[serde(default = "d_version")]
    pub version: String,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: TransformerConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sgld: SgldConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: d_version(),
            data: DataConfig::default(),
            model: TransformerConfig::default(),
            train: TrainConfig::default(),
            sgld: SgldConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != "1" {
            return Err(CoreError::config(
                "version",
                format!("unsupported config version `{}` (expected 1)", self.version),
            ));
        }
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.sgld.validate()?;
        if self.model.input_dim != self.data.input_dim {
            return Err(CoreError::config(
                "model.input_dim",
                format!(
                    "model.input_dim ({}) must equal data.input_dim ({})",
                    self.model.input_dim, self.data.input_dim
                ),
            ));
        }
        if self.model.max_examples != self.data.max_examples {
            return Err(CoreError::config(
                "model.max_examples",
                format!(
                    "model.max_examples ({}) must equal data.max_examples ({})",
                    self.model.max_examples, self.data.max_examples
                ),
            ));
        }
        if !(self.analysis.boundary_tolerance > 0.0) {
            return Err(CoreError::config("analysis.boundary_tolerance", "must be > 0"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CoreError::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| CoreError::config("config", e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Digest of the training provenance (data, model, train sections):
    /// checkpoints carry it and refuse to load under an incompatible
    /// config. Canonical JSON (sorted keys) keeps it stable under TOML
    /// key reordering.
    pub fn provenance_digest(&self) -> [u8; 8] {
        #[derive(Serialize)]
        struct Provenance<'a> {
            data: &'a DataConfig,
            model: &'a TransformerConfig,
            train: &'a TrainConfig,
        }
        let value = serde_json::to_value(Provenance {
            data: &self.data,
            model: &self.model,
            train: &self.train,
        })
        .expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        let mut h = Sha256::new();
        h.update(b"dgsc.provenance.v1");
        h.update(canonical.as_bytes());
        let digest = h.finalize();
        let mut out = [0u8; 8];
        out.copy_from_slice(&digest[..8]);
        out
    }
}

pub fn digest_hex(d: &[u8; 8]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_stable_under_key_reordering() {
        let a: RunConfig = toml::from_str(
            "[data]\ninput_dim = 4\nmax_examples = 8\nsigma2 = 0.125\nseed = 3\n\n[train]\nsteps = 1000\nbatch_size = 8\nmax_lr = 0.003\nseed = 0\n",
        )
        .unwrap();
        let b: RunConfig = toml::from_str(
            "[train]\nseed = 0\nmax_lr = 0.003\nbatch_size = 8\nsteps = 1000\n\n[data]\nseed = 3\nsigma2 = 0.125\nmax_examples = 8\ninput_dim = 4\n",
        )
        .unwrap();
        assert_eq!(a.provenance_digest(), b.provenance_digest());
        // and sensitive to actual changes
        let mut c = a.clone();
        c.data.input_dim = 8;
        assert_ne!(a.provenance_digest(), c.provenance_digest());
        // sgld section does not affect provenance
        let mut d = a.clone();
        d.sgld.epsilon *= 2.0;
        assert_eq!(a.provenance_digest(), d.provenance_digest());
    }

    #[test]
    fn round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        let cfg = RunConfig::default();
        cfg.save(&path).unwrap();
        let loaded = RunConfig::load(&path).unwrap();
        assert_eq!(cfg, loaded);

        let mut bad = RunConfig::default();
        bad.model.input_dim = 9;
        match bad.validate() {
            Err(CoreError::Config { field, .. }) => assert_eq!(field, "model.input_dim"),
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
