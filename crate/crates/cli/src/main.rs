//! Command-line front end for the observer simulation library.
//!
//! Subcommands: `run` (simulate one scenario), `portrait` (reduced-system
//! phase portrait with the saddle-manifold trace), `compare` (rank estimator
//! variants on a common scenario), `sweep` (time-scale sweep over sampled
//! initial conditions), `validate` (check a config file without running).
//!
//! Exit codes: 0 success, 1 validation/configuration/I-O failure,
//! 2 divergence (partial outputs plus an error record were written).

mod config;
mod ops;
mod output;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use config::ConfigFile;

#[derive(Parser)]
#[command(
    name = "pmsm-observer",
    version,
    about = "Simulate and analyze hybrid sensorless estimators for synchronous machines"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one scenario: trajectory CSV, jump log, summary metrics.
    Run(CommonArgs),
    /// Reduced-system phase portrait with the saddle-manifold trace.
    Portrait(CommonArgs),
    /// Run several estimator variants on one scenario and tabulate metrics.
    Compare(CommonArgs),
    /// Sweep the fast time scale over sampled initial conditions.
    Sweep(CommonArgs),
    /// Parse and validate a config file without simulating anything.
    Validate(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Scenario/config file (TOML); omitted: built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for generated files.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Override the random seed of the scenario and sweep sections.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the trajectory downsampling factor (keep every K-th sample).
    #[arg(long)]
    downsample: Option<usize>,
}

impl CommonArgs {
    /// Load the config file and apply the flag overrides.
    fn resolve(&self) -> anyhow::Result<ConfigFile> {
        let mut cfg = ConfigFile::load(self.config.as_deref())?;
        if self.seed.is_some() || self.downsample.is_some() {
            let scenario = cfg.scenario.get_or_insert_with(Default::default);
            if let Some(seed) = self.seed {
                scenario.seed = seed;
            }
            if let Some(ds) = self.downsample {
                scenario.downsample = ds;
            }
        }
        if let Some(seed) = self.seed {
            cfg.sweep.get_or_insert_with(Default::default).config.seed = seed;
        }
        Ok(cfg)
    }
}

fn dispatch(cli: &Cli) -> anyhow::Result<u8> {
    match &cli.cmd {
        Cmd::Run(args) => {
            let cfg = args.resolve()?;
            ops::run(&cfg.scenario_or_default(), &args.out)
        }
        Cmd::Portrait(args) => {
            let cfg = args.resolve()?;
            ops::portrait(&cfg.portrait_or_default(), &args.out)
        }
        Cmd::Compare(args) => {
            let cfg = args.resolve()?;
            ops::compare(
                &cfg.scenario_or_default(),
                &cfg.compare_or_default(),
                &args.out,
            )
        }
        Cmd::Sweep(args) => {
            let cfg = args.resolve()?;
            ops::sweep(&cfg.sweep_or_default(), &args.out)
        }
        Cmd::Validate(args) => {
            let cfg = args.resolve()?;
            ops::validate(&cfg)
        }
    }
}

fn main() -> ExitCode {
    // Usage errors exit 1 (clap's default of 2 is reserved for divergence);
    // --help and --version print and exit 0.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}
