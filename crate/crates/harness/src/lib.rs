//! Experiment harness for the gradient-inversion laboratory: datasets,
//! TOML configs, attack × defense sweeps with per-run artifacts, and
//! grouped summaries.

pub mod config;
pub mod dataset;
pub mod error;
pub mod runner;
pub mod summary;

pub use config::{DatasetConfig, ExperimentConfig, GeneratorSetup, ModelConfig, OUTPUT_DIR_ENV};
pub use dataset::{load_image_folder, synth_dataset, Dataset, SynthKind};
pub use error::{HarnessError, Result};
pub use runner::{run_experiment, ExperimentRecord, RunConfig};
pub use summary::{load_records, summarize, SummaryRow};
