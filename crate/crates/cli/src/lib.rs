//! Command-line pipelines over the `concept-atlas` library.

pub mod config;
pub mod error;
pub mod pipelines;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

pub use config::RunConfig;
pub use error::CliError;
use pipelines::Outputs;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "CONCEPT_ATLAS_THREADS";

#[derive(Debug, Parser)]
#[command(name = "concept-atlas", version, about = "Concept-based similarity of CNN feature spaces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed applied to every seeded stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Dotted config override, e.g. `--set factorization.n_concepts=10`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Mine NCAVs per layer, build masks, and write UCS matrices.
    Ucs,
    /// Train CAVs per layer and write the SFSS matrix.
    Sfss,
    /// Composite synthetic concept images.
    Synthgen,
    /// UCS at each configured binarization threshold.
    Btsweep,
    /// Planted-stack end-to-end check; exits 0 only if it passes.
    Selfcheck,
    /// Print a dump's header and value summary.
    Inspect { dump: PathBuf },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ucs => "ucs",
            Command::Sfss => "sfss",
            Command::Synthgen => "synthgen",
            Command::Btsweep => "btsweep",
            Command::Selfcheck => "selfcheck",
            Command::Inspect { .. } => "inspect",
        }
    }
}

/// Applies `CONCEPT_ATLAS_THREADS` to the global pool; returns the thread count in use.
pub fn init_threads() -> Result<usize, CliError> {
    let requested = match std::env::var(THREADS_ENV) {
        Ok(raw) => Some(
            raw.trim()
                .parse::<usize>()
                .ok()
                .filter(|n| *n > 0)
                .ok_or_else(|| CliError::Config(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?,
        ),
        Err(_) => None,
    };
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = requested {
            // A second call in the same process keeps the first pool.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        Ok(rayon::current_num_threads())
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = requested;
        Ok(1)
    }
}

pub struct RunOutcome {
    pub report: Value,
    pub written: Vec<PathBuf>,
}

pub fn run(cli: &Cli) -> Result<RunOutcome, CliError> {
    let threads = init_threads()?;
    if let Command::Inspect { dump } = &cli.command {
        return Ok(RunOutcome {
            report: pipelines::inspect(dump)?,
            written: Vec::new(),
        });
    }
    let mut config = config::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    config.validate()?;
    match cli.command {
        Command::Ucs | Command::Btsweep | Command::Sfss => config.check_inputs(true, false)?,
        Command::Synthgen => config.check_inputs(false, true)?,
        _ => {}
    }

    let mut out = Outputs::create(&config.output_dir)?;
    let echo = json!({
        "command": cli.command.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "threads": threads,
        "config": config,
    });
    out.json("run.json", &echo)?;
    let report = match cli.command {
        Command::Ucs => pipelines::ucs(&config, &mut out),
        Command::Sfss => pipelines::sfss(&config, &mut out),
        Command::Synthgen => pipelines::synthgen(&config, &mut out),
        Command::Btsweep => pipelines::btsweep(&config, &mut out),
        Command::Selfcheck => pipelines::selfcheck(&config, &mut out),
        Command::Inspect { .. } => unreachable!("handled above"),
    }?;
    Ok(RunOutcome {
        report,
        written: out.written,
    })
}
