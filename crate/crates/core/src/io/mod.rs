//! Configuration, checkpoint persistence, and export formats.

pub mod checkpoint;
pub mod config;
pub mod csvio;
pub mod svg;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{AnalysisConfig, RunConfig};
