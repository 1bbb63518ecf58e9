//! `usseg`: data generation, training, evaluation, benchmarking, ablation and
//! feature visualization for the adapter-tuned segmentation model.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use usseg::data::phantom::{PhantomSpec, Regime};
use usseg::run::{self, RunConfig};
use usseg::train::AblationMode;
use usseg::{Error, Result};

#[derive(Parser)]
#[command(name = "usseg", version, about = "Adapter-tuned ultrasound segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON); defaults are used for every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the ablation mode (A..E or the full name).
    #[arg(long)]
    mode: Option<AblationMode>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(mode) = self.mode {
            cfg.train.ablation_mode = mode;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic phantom dataset directory.
    GenerateData {
        #[arg(long, default_value = "cardiac")]
        regime: Regime,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Image height and width.
        #[arg(long, default_value_t = 224)]
        size: usize,
        /// Thyroid regime: probability of a sample without foreground.
        #[arg(long, default_value_t = 0.2)]
        empty_fraction: f64,
    },
    /// Trains the configured variant and keeps the best checkpoint.
    Train(Common),
    /// Scores the test split with a checkpoint or with stored predictions.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory or training output directory.
        #[arg(long, required_unless_present = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Directory of `<id>.png` label maps to score instead of running a model.
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
    },
    /// Times single-image forward passes at 224x224.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Free text recorded in bench.json.
        #[arg(long, default_value = "")]
        device_note: String,
        #[arg(long, default_value_t = run::BENCH_TIMED_ITERS)]
        iters: usize,
    },
    /// Trains and scores the five ablation rows.
    Ablate(Common),
    /// Renders the first three principal components of the fused features.
    VisualizePca {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenerateData {
            regime,
            count,
            seed,
            out,
            size,
            empty_fraction,
        } => {
            let spec = PhantomSpec {
                seed,
                count,
                size,
                regime,
                empty_fraction,
            };
            run::generate_data(&spec, &out)?;
            println!("wrote {count} samples to {}", out.display());
        }
        Command::Train(common) => {
            let cfg = common.resolve()?;
            let outcome = run::run_train(&cfg)?;
            println!(
                "best val loss {} at step {} in {}",
                outcome.state.best_val_loss,
                outcome.best_step,
                cfg.output_dir.display()
            );
        }
        Command::Eval {
            common,
            checkpoint,
            predictions,
        } => {
            let cfg = common.resolve()?;
            let report = match (checkpoint, predictions) {
                (_, Some(p)) => run::run_eval_predictions(&cfg, &p, &cfg.output_dir)?,
                (Some(c), None) => run::run_eval(&cfg, &c, &cfg.output_dir)?,
                (None, None) => return Err(Error::Config("eval needs --checkpoint or --predictions".into())),
            };
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Bench {
            common,
            device_note,
            iters,
        } => {
            let cfg = common.resolve()?;
            let report = run::run_bench(&cfg, &device_note, iters, &cfg.output_dir)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Ablate(common) => {
            let cfg = common.resolve()?;
            print!("{}", run::run_ablate(&cfg, &cfg.output_dir)?);
        }
        Command::VisualizePca { common, checkpoint } => {
            let cfg = common.resolve()?;
            let degenerate = run::run_visualize_pca(&cfg, checkpoint.as_deref(), &cfg.output_dir)?;
            for id in degenerate {
                eprintln!("warning: fewer than three principal directions for {id}; missing channels are mid-gray");
            }
            println!("wrote {}", Path::new(&cfg.output_dir).join("pca").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
