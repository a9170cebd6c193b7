use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gilab_core::metrics::{psnr, ssim, SsimParams};
use gilab_harness::dataset::load_image;
use gilab_harness::runner::standard_defense_sweep;
use gilab_harness::summary::{format_summary, write_summary};
use gilab_harness::{load_records, run_experiment, summarize, ExperimentConfig, HarnessError, Result};

/// Gradient-inversion experiments at desk scale.
#[derive(Parser)]
#[command(name = "gilab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Attack experiments.
    Attack {
        #[command(subcommand)]
        action: AttackAction,
    },
    /// Defense experiments.
    Defense {
        #[command(subcommand)]
        action: DefenseAction,
    },
    /// Image quality metrics.
    Metrics {
        #[command(subcommand)]
        action: MetricsAction,
    },
    /// Rebuild the summary table from the run records in a directory.
    Summarize { dir: PathBuf },
}

#[derive(Subcommand)]
enum AttackAction {
    /// Run every (batch size, defense, repeat) cell of a config.
    Run { config: PathBuf },
}

#[derive(Subcommand)]
enum DefenseAction {
    /// Like `attack run`; a config that only lists `none` gets the standard
    /// pruning and noise sweep.
    Sweep { config: PathBuf },
}

#[derive(Subcommand)]
enum MetricsAction {
    /// PSNR and SSIM between two images of equal size.
    Compare { a: PathBuf, b: PathBuf },
}

/// Whether every run succeeded.
fn run(config: &Path, sweep: bool) -> Result<bool> {
    let mut cfg = ExperimentConfig::load(config)?;
    if sweep && cfg.defenses == [gilab_core::defenses::DefenseSpec::None] {
        cfg.defenses = standard_defense_sweep();
    }
    let records = run_experiment(&cfg)?;
    for r in &records {
        match (&r.error, r.mean_psnr()) {
            (None, Some(p)) => eprintln!("{}  psnr {p:.2} dB  {:.1}s", r.run_id, r.wall_time_s),
            (err, _) => eprintln!("{}  FAILED: {}", r.run_id, err.as_deref().unwrap_or("no metrics")),
        }
    }
    print!("{}", format_summary(&summarize(&records)?));
    println!("results in {}", cfg.output_dir.display());
    Ok(records.iter().all(|r| r.succeeded()))
}

fn compare(a: &Path, b: &Path) -> Result<()> {
    let (sa, xa) = load_image(a, None, 3)?;
    let (sb, xb) = load_image(b, None, 3)?;
    if sa != sb {
        return Err(HarnessError::Config(format!(
            "{} is {sa} but {} is {sb}",
            a.display(),
            b.display()
        )));
    }
    let p = psnr(&xa, &xb, 1.0)?;
    let s = ssim(&xa, &xb, sa, &SsimParams::default())?;
    println!("psnr_db {p:.4}");
    println!("ssim {s:.6}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Attack {
            action: AttackAction::Run { config },
        } => run(config, false),
        Command::Defense {
            action: DefenseAction::Sweep { config },
        } => run(config, true),
        Command::Metrics {
            action: MetricsAction::Compare { a, b },
        } => compare(a, b).map(|_| true),
        Command::Summarize { dir } => load_records(dir).and_then(|records| {
            let rows = summarize(&records)?;
            write_summary(dir, &rows)?;
            print!("{}", format_summary(&rows));
            Ok(rows.iter().all(|r| r.failed == 0))
        }),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
