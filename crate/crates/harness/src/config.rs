//! Experiment configuration, read from TOML.
//!
//! ```toml
//! output_dir = "runs/desk"
//! batch_sizes = [1, 2, 4]
//! repeats = 3
//!
//! [dataset]
//! source = "synthetic"
//! kind = "shapes"
//! n = 16
//! size = 8
//!
//! [model]
//! arch = "conv-small"
//!
//! [generator]
//! kind = "identity"
//!
//! [attack]
//! total_iters = 2000
//!
//! [[defenses]]
//! kind = "none"
//!
//! [[defenses]]
//! kind = "prune"
//! keep_fraction = 0.3
//! ```
//!
//! The `[attack]` table overrides a preset chosen by the generator: the
//! pixel-space defaults for `identity`, the latent-space defaults otherwise.
//! Unknown keys anywhere are an error. Relative paths are resolved against
//! the directory holding the config file.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use gilab_core::attack::AttackConfig;
use gilab_core::defenses::DefenseSpec;
use gilab_core::nnmodels::{ArchId, GeneratorConfig, PretrainOptions};
use serde::{Deserialize, Serialize};

use crate::dataset::{load_image_folder, synth_dataset, Dataset, SynthKind};
use crate::error::{HarnessError, Result};

/// Overrides `output_dir` when set.
pub const OUTPUT_DIR_ENV: &str = "GILAB_OUTPUT_DIR";

fn three() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        kind: SynthKind,
        n: usize,
        size: usize,
        #[serde(default = "three")]
        channels: usize,
        #[serde(default)]
        seed: u64,
    },
    /// A directory with `labels.csv` and the images it lists.
    ImageFolder {
        path: PathBuf,
        size: usize,
        #[serde(default = "three")]
        channels: usize,
    },
}

impl DatasetConfig {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetConfig::Synthetic {
                kind,
                n,
                size,
                channels,
                seed,
            } => synth_dataset(*kind, *n, *size, *channels, *seed),
            DatasetConfig::ImageFolder { path, size, channels } => load_image_folder(path, *size, *channels),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: ArchId,
    pub seed: u64,
    /// Defaults to the dataset's class count.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: ArchId::ConvSmall,
            seed: 0,
            num_classes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeneratorSetup {
    /// No generator: optimise pixels directly.
    #[default]
    Identity,
    /// A generator fitted to the dataset before any run.
    Pretrained {
        #[serde(default)]
        generator: GeneratorConfig,
        #[serde(default)]
        pretrain: PretrainOptions,
        /// Loaded if it exists, otherwise written after pretraining.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        checkpoint: Option<PathBuf>,
    },
}

impl GeneratorSetup {
    pub fn attack_name(&self) -> &'static str {
        match self {
            GeneratorSetup::Identity => "direct",
            GeneratorSetup::Pretrained { .. } => "gi-smn",
        }
    }

    pub fn attack_preset(&self) -> AttackConfig {
        match self {
            GeneratorSetup::Identity => AttackConfig::direct(),
            GeneratorSetup::Pretrained { .. } => AttackConfig::default(),
        }
    }
}

fn default_defenses() -> Vec<DefenseSpec> {
    vec![DefenseSpec::None]
}

fn one() -> usize {
    1
}

fn default_name() -> String {
    "experiment".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub generator: GeneratorSetup,
    /// Fully resolved; see the module docs for how TOML input is merged.
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default = "default_defenses")]
    pub defenses: Vec<DefenseSpec>,
    pub batch_sizes: Vec<usize>,
    #[serde(default = "one")]
    pub repeats: usize,
    /// Drives batch sampling and defense noise.
    #[serde(default)]
    pub seed: u64,
    /// Worker threads for independent runs.
    #[serde(default = "one")]
    pub threads: usize,
    pub output_dir: PathBuf,
}

fn merge_json(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        let attack = table.remove("attack");
        let mut cfg: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))?;
        let mut merged = serde_json::to_value(cfg.generator.attack_preset())?;
        if let Some(over) = attack {
            merge_json(&mut merged, serde_json::to_value(over)?);
        }
        cfg.attack = serde_json::from_value(merged).map_err(|e| HarnessError::Config(format!("[attack]: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML file, resolves relative paths and applies the
    /// environment override for `output_dir`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        cfg.override_output_dir(std::env::var_os(OUTPUT_DIR_ENV));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        if let DatasetConfig::ImageFolder { path, .. } = &mut self.dataset {
            fix(path);
        }
        if let GeneratorSetup::Pretrained {
            checkpoint: Some(p), ..
        } = &mut self.generator
        {
            fix(p);
        }
    }

    pub fn override_output_dir(&mut self, value: Option<OsString>) {
        if let Some(v) = value.filter(|v| !v.is_empty()) {
            self.output_dir = PathBuf::from(v);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_sizes.is_empty() {
            return Err(HarnessError::Config("batch_sizes must list at least one size".into()));
        }
        if let Some(b) = self.batch_sizes.iter().find(|&&b| b == 0) {
            return Err(HarnessError::Config(format!("batch size {b} must be >= 1")));
        }
        if self.repeats == 0 {
            return Err(HarnessError::Config("repeats must be >= 1".into()));
        }
        if self.threads == 0 {
            return Err(HarnessError::Config("threads must be >= 1".into()));
        }
        if self.defenses.is_empty() {
            return Err(HarnessError::Config("defenses must list at least one entry".into()));
        }
        for d in &self.defenses {
            d.validate()?;
        }
        self.attack.validate()?;
        Ok(())
    }
}
