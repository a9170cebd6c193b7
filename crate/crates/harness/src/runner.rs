//! Sweeps of batch size × defense × repeat, one output directory per run.

use std::fs::{self, File};
use std::io::BufWriter;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use gilab_core::attack::{direct_attack, gi_smn_attack, write_trajectory_csv, ReconstructionResult};
use gilab_core::checkpoint::{load_generator, save_generator};
use gilab_core::defenses::DefenseSpec;
use gilab_core::flsim::{client_gradient, make_attack_input, report_gradient};
use gilab_core::metrics::{batch_match_metrics, MetricReport};
use gilab_core::nnmodels::{Generator, TargetModel};
use gilab_core::LabelBatch;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, GeneratorSetup};
use crate::dataset::{save_png, Dataset};
use crate::error::{HarnessError, Result};
use crate::summary::{summarize, write_summary};

/// Defenses used by `defense sweep` when the config does not list any.
pub fn standard_defense_sweep() -> Vec<DefenseSpec> {
    vec![
        DefenseSpec::None,
        DefenseSpec::prune(0.3),
        DefenseSpec::prune(0.01),
        DefenseSpec::GaussianNoise { sigma2: 1e-4 },
        DefenseSpec::GaussianNoise { sigma2: 1e-2 },
    ]
}

/// One cell of the sweep, with every seed it consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub run_id: String,
    pub batch_size: usize,
    pub defense: DefenseSpec,
    pub repeat: usize,
    pub batch_seed: u64,
    pub defense_seed: u64,
    pub attack_seed: u64,
    pub experiment: ExperimentConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImagePaths {
    pub recon: Vec<PathBuf>,
    pub original: Vec<PathBuf>,
}

/// Outcome of one run. Paths are relative to the experiment's output
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub run_id: String,
    pub config_hash: String,
    pub dataset: String,
    pub batch_size: usize,
    pub attack: String,
    pub defense: String,
    pub repeat: usize,
    /// Dataset indices of the private batch.
    pub sample_indices: Vec<usize>,
    pub metrics: Option<MetricReport>,
    pub trajectory_path: Option<PathBuf>,
    pub image_paths: ImagePaths,
    pub iters_run: usize,
    pub wall_time_s: f64,
    /// Set when the run failed; the other fields then describe how far it got.
    pub error: Option<String>,
}

impl ExperimentRecord {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }

    pub fn mean_psnr(&self) -> Option<f64> {
        self.metrics.as_ref().map(|m| m.mean_psnr_db)
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stream seed for `(base, stream, batch_size, repeat)`.
pub fn derive_seed(base: u64, stream: u64, batch_size: usize, repeat: usize) -> u64 {
    [stream, batch_size as u64, repeat as u64]
        .iter()
        .fold(splitmix(base), |acc, &v| splitmix(acc ^ v))
}

const BATCH_STREAM: u64 = 1;
const DEFENSE_STREAM: u64 = 2;

fn slug(s: &str) -> String {
    let mut out = String::new();
    for c in s.chars() {
        let c = if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' };
        if !(c == '_' && out.ends_with('_')) {
            out.push(c);
        }
    }
    out.trim_matches('_').to_string()
}

/// Every run of `cfg`, ordered by batch size, then defense, then repeat.
pub fn plan_runs(cfg: &ExperimentConfig) -> Vec<RunConfig> {
    let mut runs = Vec::new();
    for &batch_size in &cfg.batch_sizes {
        for defense in &cfg.defenses {
            for repeat in 0..cfg.repeats {
                let run_id = format!("{:03}-b{batch_size}-{}-r{repeat}", runs.len(), slug(&defense.to_string()));
                runs.push(RunConfig {
                    run_id,
                    batch_size,
                    defense: defense.clone(),
                    repeat,
                    batch_seed: derive_seed(cfg.seed, BATCH_STREAM, batch_size, repeat),
                    defense_seed: derive_seed(cfg.seed, DEFENSE_STREAM, batch_size, repeat),
                    attack_seed: cfg.attack.seed.wrapping_add(repeat as u64),
                    experiment: cfg.clone(),
                });
            }
        }
    }
    runs
}

/// SHA-256 over the run's JSON form, excluding where and how it is
/// executed (`output_dir`, `threads`).
pub fn config_hash(run: &RunConfig) -> Result<String> {
    let mut v = serde_json::to_value(run)?;
    if let Some(exp) = v.get_mut("experiment").and_then(|e| e.as_object_mut()) {
        exp.remove("output_dir");
        exp.remove("threads");
    }
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&v)?)))
}

/// Shared, read-only state of a sweep.
pub struct Prepared {
    pub dataset: Dataset,
    pub model: TargetModel,
    pub generator: Option<Generator>,
}

/// Loads the dataset, builds the model and fits or loads the generator.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let dataset = cfg.dataset.load()?;
    let num_classes = cfg.model.num_classes.unwrap_or(dataset.num_classes);
    if let Some(&bad) = dataset.labels.iter().find(|&&l| l >= num_classes) {
        return Err(HarnessError::Config(format!(
            "dataset label {bad} does not fit a {num_classes}-class model"
        )));
    }
    let model = TargetModel::build(cfg.model.arch, dataset.shape(), num_classes, cfg.model.seed)?;
    let generator = match &cfg.generator {
        GeneratorSetup::Identity => None,
        GeneratorSetup::Pretrained {
            generator,
            pretrain,
            checkpoint,
        } => match checkpoint {
            Some(path) if path.is_file() => {
                let g = load_generator(path)?;
                if g.config() != generator || g.output_shape() != dataset.shape() {
                    return Err(HarnessError::Config(format!(
                        "checkpoint {} does not match the configured generator",
                        path.display()
                    )));
                }
                Some(g)
            }
            _ => {
                let fresh = Generator::new(*generator, dataset.shape())?;
                let g = fresh.fit(&dataset.images, pretrain)?.generator;
                if let Some(path) = checkpoint {
                    if let Some(dir) = path.parent() {
                        fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
                    }
                    save_generator(path, &g)?;
                }
                Some(g)
            }
        },
    };
    Ok(Prepared {
        dataset,
        model,
        generator,
    })
}

struct Artifacts {
    metrics: MetricReport,
    trajectory_path: PathBuf,
    image_paths: ImagePaths,
    iters_run: usize,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(HarnessError::io(path))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value)?;
    Ok(())
}

fn execute(run: &RunConfig, prep: &Prepared, out_dir: &Path, indices: &mut Vec<usize>) -> Result<Artifacts> {
    let n = prep.dataset.len();
    if run.batch_size > n {
        return Err(HarnessError::Config(format!(
            "batch size {} exceeds the {n} images in the dataset",
            run.batch_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(run.batch_seed);
    *indices = index::sample(&mut rng, n, run.batch_size).into_vec();
    let originals = prep.dataset.images.select(indices)?;
    let labels = LabelBatch(indices.iter().map(|&i| prep.dataset.labels[i]).collect());

    let grad = client_gradient(&prep.model, &originals, &labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.defense_seed);
    let observed = report_gradient(&grad, &run.defense, &mut rng)?;
    let input = make_attack_input(&prep.model, observed, labels)?;

    let mut attack = run.experiment.attack.clone();
    attack.seed = run.attack_seed;
    let result: ReconstructionResult = match &prep.generator {
        Some(g) => gi_smn_attack(&input, g, &attack)?,
        None => direct_attack(&input, &attack)?,
    };
    let metrics = batch_match_metrics(&result.images, &originals, 1.0)?;

    let rel = |f: &str| PathBuf::from(&run.run_id).join(f);
    let trajectory_path = rel("trajectory.csv");
    let abs = out_dir.join(&trajectory_path);
    let file = File::create(&abs).map_err(HarnessError::io(&abs))?;
    write_trajectory_csv(BufWriter::new(file), &result.trajectory).map_err(HarnessError::io(&abs))?;
    let mut image_paths = ImagePaths::default();
    for slot in 0..run.batch_size {
        let recon = rel(&format!("recon_{slot:04}.png"));
        let original = rel(&format!("original_{slot:04}.png"));
        save_png(&result.images, slot, &out_dir.join(&recon))?;
        save_png(&originals, slot, &out_dir.join(&original))?;
        image_paths.recon.push(recon);
        image_paths.original.push(original);
    }
    Ok(Artifacts {
        metrics,
        trajectory_path,
        image_paths,
        iters_run: result.iters_run,
    })
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "unknown panic".into()
    }
}

/// Executes one run and writes its directory. Never fails: errors and
/// panics end up in the record.
pub fn run_one(run: &RunConfig, prep: &Prepared) -> ExperimentRecord {
    let start = Instant::now();
    let out_dir = &run.experiment.output_dir;
    let run_dir = out_dir.join(&run.run_id);
    let mut indices = Vec::new();
    let mut record = ExperimentRecord {
        run_id: run.run_id.clone(),
        config_hash: String::new(),
        dataset: prep.dataset.name.clone(),
        batch_size: run.batch_size,
        attack: run.experiment.generator.attack_name().into(),
        defense: run.defense.to_string(),
        repeat: run.repeat,
        sample_indices: Vec::new(),
        metrics: None,
        trajectory_path: None,
        image_paths: ImagePaths::default(),
        iters_run: 0,
        wall_time_s: 0.0,
        error: None,
    };
    let outcome = panic::catch_unwind(AssertUnwindSafe(|| -> Result<Artifacts> {
        fs::create_dir_all(&run_dir).map_err(HarnessError::io(&run_dir))?;
        record.config_hash = config_hash(run)?;
        write_json(&run_dir.join("config.json"), run)?;
        execute(run, prep, out_dir, &mut indices)
    }));
    record.sample_indices = indices;
    match outcome {
        Ok(Ok(a)) => {
            record.metrics = Some(a.metrics);
            record.trajectory_path = Some(a.trajectory_path);
            record.image_paths = a.image_paths;
            record.iters_run = a.iters_run;
        }
        Ok(Err(e)) => record.error = Some(e.to_string()),
        Err(p) => record.error = Some(format!("panic: {}", panic_message(p))),
    }
    record.wall_time_s = start.elapsed().as_secs_f64();
    if let Err(e) = write_json(&run_dir.join("record.json"), &record) {
        if record.error.is_none() {
            record.error = Some(format!("writing record.json: {e}"));
        }
    }
    record
}

/// Runs the whole sweep and writes `summary.csv` / `summary.txt` next to
/// the run directories. Per-run failures are recorded, not returned.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ExperimentRecord>> {
    cfg.validate()?;
    let prep = prepare(cfg)?;
    fs::create_dir_all(&cfg.output_dir).map_err(HarnessError::io(&cfg.output_dir))?;
    let runs = plan_runs(cfg);
    let records: Vec<ExperimentRecord> = if cfg.threads > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
        pool.install(|| runs.par_iter().map(|r| run_one(r, &prep)).collect())
    } else {
        runs.iter().map(|r| run_one(r, &prep)).collect()
    };
    write_summary(&cfg.output_dir, &summarize(&records)?)?;
    Ok(records)
}
