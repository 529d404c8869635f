use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use flowconsist::sampler::{SamplerConfig, SamplerMode};
use flowconsist_cli::{
    cmd_config_default, cmd_diagnose, cmd_sample, cmd_sweep_omega, cmd_train, load_config, CliResult, DiagnoseOutcome,
    Experiment, ModelSource,
};

#[derive(Parser)]
#[command(name = "flowconsist", version, about = "Train, sample and check fast-flow models on Gaussian mixtures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Jumps,
    Euler,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints and metrics.csv to the output directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write generated samples as CSV.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        nfe: usize,
        #[arg(long, default_value_t = 1.0)]
        omega: f64,
        #[arg(long, value_enum, default_value_t = Mode::Jumps)]
        mode: Mode,
        #[arg(long)]
        label: Option<usize>,
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one numerical experiment and write its CSV. Exit 4 if an assertion fails.
    Diagnose {
        /// `analytic` or a checkpoint path.
        #[arg(long, default_value = "analytic")]
        source: String,
        /// drift, thm1, thm2, thm3, appendix, accumulation or omega_sweep.
        #[arg(long)]
        experiment: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample quality across guidance scales.
    SweepOmega {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the documented default configuration.
    ConfigDefault {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn report(outcome: &DiagnoseOutcome) -> u8 {
    for a in &outcome.report.assertions {
        println!("{} {}: {}", if a.passed { "PASS" } else { "FAIL" }, a.name, a.detail);
    }
    println!("wrote {}", outcome.csv.display());
    outcome.exit_code()
}

fn run(cli: Cli) -> CliResult<u8> {
    match cli.command {
        Command::Train { config } => {
            let cfg = load_config(config.as_deref())?;
            let done = cmd_train(&cfg)?;
            println!("trained {} steps; wrote {} and {}", done.final_step, done.checkpoint.display(), done.metrics.display());
            Ok(0)
        }
        Command::Sample { checkpoint, nfe, omega, mode, label, n, seed, out } => {
            let mode = match mode {
                Mode::Jumps => SamplerMode::FlowMapJumps,
                Mode::Euler => SamplerMode::EulerInstantaneous,
            };
            cmd_sample(&checkpoint, &SamplerConfig { nfe, omega, mode, label }, n, seed, &out)?;
            println!("wrote {n} samples to {}", out.display());
            Ok(0)
        }
        Command::Diagnose { source, experiment, config, out } => {
            let experiment: Experiment = experiment.parse()?;
            let source: ModelSource = source.parse()?;
            let cfg = load_config(config.as_deref())?;
            Ok(report(&cmd_diagnose(&source, experiment, &cfg, out.as_deref())?))
        }
        Command::SweepOmega { checkpoint, config, out } => {
            let cfg = load_config(config.as_deref())?;
            Ok(report(&cmd_sweep_omega(&checkpoint, &cfg, out.as_deref())?))
        }
        Command::ConfigDefault { out } => {
            let text = cmd_config_default();
            match out {
                Some(p) => flowconsist::io::write_atomic(&p, text.as_bytes())?,
                None => print!("{text}"),
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
