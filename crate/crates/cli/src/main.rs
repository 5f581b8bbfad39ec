use std::path::PathBuf;
use std::process::ExitCode;

use brainsbi::commands::{replay, run_stage};
use brainsbi::config::GeneratorKind;
use brainsbi::{CliError, CliResult, Layout, RunConfig, Stage};
use clap::{Args, Parser, Subcommand};

/// Simulation-based inversion of a synthetic brain emulator.
#[derive(Parser)]
#[command(name = "brainsbi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the fully resolved default configuration as TOML.
    InitConfig {
        /// Write to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate the training and validation datasets.
    Simulate(RunArgs),
    /// Fit the standardizer and PCA basis on the training dataset.
    FitSummary(RunArgs),
    /// Train the amortized posterior.
    Train(RunArgs),
    /// Draw posterior samples for every validation observation.
    Sample(RunArgs),
    /// Recovery, calibration and plot tables from the posterior draws.
    Evaluate(RunArgs),
    /// Recover scores from the validation stimuli and correlate them with the truth.
    CycleCheck(RunArgs),
    /// Every stage in order.
    Pipeline(RunArgs),
    /// Re-run the stage recorded in a manifest with its recorded configuration.
    Replay {
        manifest: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Override the posterior draws per observation.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, value_enum)]
    generator: Option<GeneratorKind>,
    /// Worker threads (results do not depend on it).
    #[arg(long)]
    threads: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(samples) = self.samples {
            config.diagnostics.samples = samples;
        }
        if let Some(kind) = self.generator {
            config.generator.kind = kind;
        }
        config.validate()?;
        Ok(config)
    }
}

fn set_threads(threads: Option<usize>) -> CliResult<()> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot configure {n} threads: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let (stage, args) = match cli.command {
        Command::InitConfig { out } => {
            let text = RunConfig::default().to_toml();
            match out {
                Some(path) => std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?,
                None => print!("{text}"),
            }
            return Ok(());
        }
        Command::Replay { manifest, out, threads } => {
            set_threads(threads)?;
            replay(&manifest, &Layout::new(out))?;
            return Ok(());
        }
        Command::Simulate(a) => (Stage::Simulate, a),
        Command::FitSummary(a) => (Stage::FitSummary, a),
        Command::Train(a) => (Stage::Train, a),
        Command::Sample(a) => (Stage::Sample, a),
        Command::Evaluate(a) => (Stage::Evaluate, a),
        Command::CycleCheck(a) => (Stage::CycleCheck, a),
        Command::Pipeline(a) => (Stage::Pipeline, a),
    };
    set_threads(args.threads)?;
    let config = args.resolve()?;
    run_stage(stage, &config, &Layout::new(&args.out))?;
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
