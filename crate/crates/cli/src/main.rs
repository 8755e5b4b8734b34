use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use phasebuck_cli::commands::DEFAULT_SWEEP_FACTORS;
use phasebuck_cli::{run, Command, RunManifest};

#[derive(Parser)]
#[command(name = "phasebuck", version, about = "Multiphase buck converter simulation and PID tuning")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Simulate one scenario and write trace.csv and metrics.json.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Gain file overriding the scenario's `gains` section.
        #[arg(long)]
        gains: Option<PathBuf>,
        /// Also write a gnuplot script for the trace.
        #[arg(long)]
        gnuplot: bool,
    },
    /// Tune the controller with particle-swarm optimization.
    Tune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pso: PathBuf,
        /// Overrides the seed in the PSO file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        gnuplot: bool,
    },
    /// Routh-Hurwitz screen of the reduced model at the extreme loads.
    Stability {
        #[command(flatten)]
        common: Common,
    },
    /// Re-simulate with the load surge scaled in magnitude and rate.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gains: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SWEEP_FACTORS)]
        factors: Vec<f64>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    quiet: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = match &cli.command {
        Sub::Simulate { common, .. } => (Command::Simulate, common),
        Sub::Tune { common, .. } => (Command::Tune, common),
        Sub::Stability { common } => (Command::Stability, common),
        Sub::Sweep { common, .. } => (Command::Sweep, common),
    };
    let mut m = RunManifest::new(command, &common.scenario, &common.out);
    m.quiet = common.quiet;
    match cli.command {
        Sub::Simulate { gains, gnuplot, .. } => {
            m.gains_path = gains;
            m.gnuplot = gnuplot;
        }
        Sub::Tune { pso, seed, gnuplot, .. } => {
            m.pso_path = Some(pso);
            m.seed_override = seed;
            m.gnuplot = gnuplot;
        }
        Sub::Stability { .. } => {}
        Sub::Sweep { gains, factors, .. } => {
            m.gains_path = gains;
            m.factors = factors;
        }
    }
    ExitCode::from(run(&m) as u8)
}
