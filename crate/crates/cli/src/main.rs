use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info, warn};
use mmlab::experiments::{run, ExperimentConfig, ExperimentKind};
use mmlab::Error;

#[derive(Parser, Debug)]
#[command(name = "mmlab", version, about = "Run desk-scale experiments and write CSV/JSON results")]
struct Cli {
    /// Configuration file (sectioned `key = value` text).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Run with this single seed instead of the configured seed list.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory; overrides the configured one.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Learning-rate sweep over widths and depths, with and without depth scaling.
    LrTransfer,
    /// Test accuracy against normalised margin and ensemble size.
    MarginSweep,
    /// Gibbs, Bayes and BPM test errors with PAC-Bayes bounds.
    StrategyCompare,
    /// Empirical wide-network Gram matrix against the arccosine kernel.
    NngpCheck,
    /// Generalisation bound report for one training sample.
    Bounds,
    /// Analytic identities with known answers.
    Selftest,
}

impl Command {
    fn kind(self) -> ExperimentKind {
        match self {
            Command::LrTransfer => ExperimentKind::LrTransfer,
            Command::MarginSweep => ExperimentKind::MarginSweep,
            Command::StrategyCompare => ExperimentKind::StrategyCompare,
            Command::NngpCheck => ExperimentKind::NngpCheck,
            Command::Bounds => ExperimentKind::Bounds,
            Command::Selftest => ExperimentKind::Selftest,
        }
    }
}

fn load(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();

    let cfg = match load(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            error!("{e}");
            return ExitCode::from(1);
        }
    };
    if let Some(n) = cli.workers {
        if n == 0 {
            error!("configuration error: --workers must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            warn!("could not size worker pool: {e}");
        }
    }

    let kind = cli.command.kind();
    info!("running {} with seeds {:?} into {}", kind.name(), cfg.seeds, cfg.out.display());
    match run(kind, &cfg) {
        Ok(summary) => {
            for f in &summary.files {
                info!("wrote {}", f.display());
            }
            info!("manifest {}", summary.manifest.display());
            if summary.failed_cells > 0 {
                warn!("{} grid cells failed; see the error column", summary.failed_cells);
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            error!("{e}");
            ExitCode::from(1)
        }
    }
}
