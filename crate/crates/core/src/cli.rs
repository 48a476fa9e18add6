//! Command-line interface.

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::dataset::{to_uci_string, uci_batch_path};
use crate::error::{Error, Result};
use crate::experiment::{
    featurize, ingest, reproduce_uci, resolve_data_dir, run_train, ReproduceOptions, TrainRequest,
};
use crate::features::DEFAULT_STEADY_FRACTION;
use crate::gradcheck::{gradcheck_arch, run_gradcheck};
use crate::synth::{synthetic_uci, DriftSpec};
use crate::trainer::TrainConfig;

#[derive(Debug, Parser)]
#[command(name = "driftfuse", version, about = "Gas-sensor drift compensation by multi-source domain adaptation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse UCI batch files, dump them as CSV and check class counts.
    Ingest(IngestArgs),
    /// Train one source/target pair.
    Train(TrainArgs),
    /// Run sources 1,2 against targets 3..10 over several seeds.
    ReproduceUci(ReproduceArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Extract the 40 per-trial features from raw response curves.
    Featurize(FeaturizeArgs),
    /// Write synthetic drifting batches in the UCI file format.
    Synth(SynthArgs),
    /// List the shipped configs.
    Configs,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Batch files; defaults to batch1..10.dat in the data directory.
    pub files: Vec<PathBuf>,
    #[arg(long, env = "DRIFT_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub sources: Vec<u32>,
    #[arg(long)]
    pub target: u32,
    /// Shipped config name (see `configs`) or path to a TOML file.
    #[arg(long)]
    pub config: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long, env = "DRIFT_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steady_window_frac: Option<f64>,
    #[arg(long)]
    pub lambda_minus_one: bool,
    /// Ablation: train with the adaptation weight fixed at zero.
    #[arg(long)]
    pub source_only: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    #[arg(long, env = "DRIFT_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',')]
    pub only: Vec<u32>,
    /// Runs trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steady_window_frac: Option<f64>,
    #[arg(long)]
    pub lambda_minus_one: bool,
    #[arg(long)]
    pub source_only: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Perturb the analytic gradient of this block (harness self-test).
    #[arg(long)]
    pub corrupt: Option<String>,
}

#[derive(Debug, Args)]
pub struct FeaturizeArgs {
    /// CSV with columns trial,baseline,label.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_STEADY_FRACTION)]
    pub steady_window_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub batch: u32,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of the real per-class sample counts.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.25)]
    pub drift: f64,
}

/// Runs a parsed command. Output goes to stdout, progress to stderr.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Train(a) => cmd_train(a),
        Command::ReproduceUci(a) => cmd_reproduce(a),
        Command::Gradcheck(a) => {
            let report = run_gradcheck(&gradcheck_arch(), a.seed, a.corrupt.as_deref())?;
            print!("{}", report.to_text());
            if report.all_passed() {
                Ok(())
            } else {
                Err(Error::Validation("gradient check failed".into()))
            }
        }
        Command::Featurize(a) => {
            let d = featurize(&a.manifest, &a.out, a.steady_window_frac, a.batch)?;
            println!("wrote {} trials to {}", d.len(), a.out.display());
            Ok(())
        }
        Command::Synth(a) => {
            if !(a.scale > 0.0) {
                return Err(Error::InvalidArgument("--scale must be positive".into()));
            }
            let spec = DriftSpec {
                seed: a.seed,
                drift: a.drift,
                ..DriftSpec::default()
            };
            fs::create_dir_all(&a.out).map_err(|e| Error::Io {
                path: a.out.clone(),
                source: e,
            })?;
            for d in synthetic_uci(spec, a.scale)? {
                let p = uci_batch_path(&a.out, d.batch_id());
                fs::write(&p, to_uci_string(&d)).map_err(|e| Error::Io { path: p.clone(), source: e })?;
                println!("{} ({} samples)", p.display(), d.len());
            }
            Ok(())
        }
        Command::Configs => {
            for name in TrainConfig::preset_names() {
                println!("{name}");
            }
            Ok(())
        }
    }
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    let files = if a.files.is_empty() {
        match a.data_dir {
            Some(dir) => (1..=10).map(|i| uci_batch_path(&dir, i)).collect(),
            None => return Err(Error::Empty("no input files and no data directory".into())),
        }
    } else {
        a.files
    };
    let (_, report) = ingest(&files, a.out.as_deref())?;
    print!("{}", report.to_text());
    if report.passed() {
        Ok(())
    } else {
        Err(Error::Validation(report.failures().join("; ")))
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut config = TrainConfig::load(&a.config)?;
    config.seed = a.seed;
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(f) = a.steady_window_frac {
        config.steady_window_frac = f;
    }
    config.lambda_minus_one |= a.lambda_minus_one;
    config.source_only |= a.source_only;
    let req = TrainRequest {
        sources: a.sources,
        target: a.target,
        config,
        data_dir: resolve_data_dir(a.data_dir.as_deref())?,
        out: a.out,
    };
    let epochs = req.config.epochs;
    let quiet = a.quiet;
    let art = run_train(&req, |log| {
        if !quiet {
            eprintln!(
                "epoch {:>4}/{epochs}  loss {:.4}  lambda {:.3}  target acc {}",
                log.epoch,
                log.losses.total,
                log.losses.lambda,
                log.target_acc.map(|a| format!("{:.2}%", 100.0 * a)).unwrap_or_default()
            );
        }
    })?;
    println!("{}", art.dir.display());
    println!(
        "final acc {:.2}%  steady acc {:.2}% (last {} epochs)",
        100.0 * art.report.final_acc,
        100.0 * art.report.steady_acc,
        art.report.steady_window
    );
    Ok(())
}

fn cmd_reproduce(a: ReproduceArgs) -> Result<()> {
    let data_dir = resolve_data_dir(a.data_dir.as_deref())?;
    let opts = ReproduceOptions {
        seeds: a.seeds,
        only: a.only,
        jobs: a.jobs,
        epochs: a.epochs,
        lambda_minus_one: a.lambda_minus_one,
        source_only: a.source_only,
        steady_window_frac: a.steady_window_frac,
    };
    let summary = reproduce_uci(&data_dir, &a.out, &opts, |m| eprintln!("{m}"))?;
    print!("{}", summary.to_markdown());
    if summary.any_failed() {
        Err(Error::Validation("some runs failed".into()))
    } else {
        Ok(())
    }
}
