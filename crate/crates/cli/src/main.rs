use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use contraction_cli::commands::{cmd_rollout, cmd_sweep, cmd_train, cmd_verify, out_dir};
use contraction_cli::{CliError, ExperimentConfig, EXIT_USAGE};

/// Contraction-certified modular control experiments.
#[derive(Parser)]
#[command(name = "contraction-cli", version)]
struct Cli {
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Checks a policy bank against every enabled stability criterion.
    Verify {
        config: PathBuf,
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Simulates one episode and writes its trajectory.
    Rollout {
        config: PathBuf,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        traj: Option<PathBuf>,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Trains a bank with evolution strategies.
    Train { config: PathBuf },
    /// Re-checks a bank over a grid of one env parameter.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<f64>,
    },
}

fn config_path(cmd: &Command) -> &PathBuf {
    match cmd {
        Command::Verify { config, .. }
        | Command::Rollout { config, .. }
        | Command::Train { config }
        | Command::Sweep { config, .. } => config,
    }
}

fn run(cli: Cli) -> Result<i32, CliError> {
    let mut cfg = ExperimentConfig::load(config_path(&cli.command))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = out_dir(&cfg, cli.out_dir.as_deref())?;
    match &cli.command {
        Command::Verify { policy, .. } => cmd_verify(&cfg, policy.as_deref(), &out),
        Command::Rollout {
            policy, traj, plot, ..
        } => cmd_rollout(
            &cfg,
            policy.as_deref(),
            traj.as_deref(),
            plot.as_deref(),
            &out,
        ),
        Command::Train { .. } => cmd_train(&cfg, &out),
        Command::Sweep {
            policy,
            param,
            values,
            ..
        } => cmd_sweep(&cfg, policy.as_deref(), param, values, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
