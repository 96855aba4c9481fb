use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gridcast::cli::{self, DaySet, EvalTarget};
use gridcast::config::RunConfig;
use gridcast::{Error, Result};

/// Traffic-movie forecasting runs.
#[derive(Parser, Debug)]
#[command(name = "gridcast", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic city: movies, weather table, manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model; writes checkpoints and metrics.tsv to the run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Defaults to $GRIDCAST_RUN_ROOT/<variant>.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Warm-start from another run's checkpoint.
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
        /// Continue from the newest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint, or the persistence baseline, on the challenge blocks.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Defaults to the newest checkpoint in the run directory.
        #[arg(long, conflicts_with = "model")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        model: Option<ModelKind>,
        /// City profile: moscow, istanbul or berlin.
        #[arg(long)]
        profile: Option<String>,
        #[arg(long, value_enum, default_value = "val")]
        days: Days,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Build comparison tables and loss plots from run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Defaults to $GRIDCAST_RUN_ROOT/report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelKind {
    Persistence,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Days {
    Train,
    Val,
    All,
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(args: Args) -> Result<()> {
    match args.command {
        Command::GenData { config, out, force, seed } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(s) = seed {
                cfg.data.synth.seed = s;
            }
            cli::gen_data(&cfg, &out, force)?;
        }
        Command::Train { config, manifest, run_dir, init_checkpoint, resume, workers, seed } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(p) = init_checkpoint {
                cfg.train.init_checkpoint = Some(p);
            }
            if let Some(w) = workers {
                cfg.sampler.workers = w;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let run_dir = run_dir.unwrap_or_else(|| cli::run_root().join(cfg.model.variant.label()));
            cli::train(&cfg, &manifest, &run_dir, resume)?;
        }
        Command::Eval { config, manifest, run_dir, checkpoint, model, profile, days, workers } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(p) = profile {
                cfg.eval.profile = p;
                cfg.eval.block_start_bins = None;
            }
            if let Some(w) = workers {
                cfg.sampler.workers = w;
            }
            let target = match (model, checkpoint) {
                (Some(ModelKind::Persistence), _) => EvalTarget::Persistence,
                (None, Some(p)) => EvalTarget::Checkpoint(p),
                (None, None) => EvalTarget::Latest,
            };
            let default_name = match target {
                EvalTarget::Persistence => "persistence",
                _ => cfg.model.variant.label(),
            };
            let run_dir = run_dir.unwrap_or_else(|| cli::run_root().join(default_name));
            let days = match days {
                Days::Train => DaySet::Train,
                Days::Val => DaySet::Val,
                Days::All => DaySet::All,
            };
            let r = cli::eval(&cfg, &manifest, target, &run_dir, days)?;
            print!("{}", r.report.to_table());
        }
        Command::Report { runs, out } => {
            let out = out.unwrap_or_else(|| cli::run_root().join("report"));
            for p in cli::report(&runs, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code() as u8
}
