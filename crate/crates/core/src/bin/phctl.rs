use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use phcore::cli::{self, Command, RunOptions};

/// Simulation, damping identification and PI-PBC tuning for
/// port-Hamiltonian mechanical systems.
#[derive(Parser)]
#[command(name = "phctl", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Closed-loop simulation: trajectory CSV, metrics JSON, plot data
    Simulate(Common),
    /// Damping identification from simulated experiments or CSV records
    Identify(Common),
    /// Gain certification or minimal-KP synthesis
    Tune(Common),
    /// Stationary Upsilon_sym and Gershgorin analysis
    Analyze(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario JSON file
    scenario: PathBuf,
    /// Output directory (default: the scenario's output_dir, else phctl_out/<name>)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Use simulator accelerations instead of finite differences
    #[arg(long)]
    exact_accel: bool,
    /// Weight epsilon of the analysis
    #[arg(long)]
    epsilon: Option<f64>,
    /// Noise seed override
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, common) = match cli.command {
        Cmd::Simulate(c) => (Command::Simulate, c),
        Cmd::Identify(c) => (Command::Identify, c),
        Cmd::Tune(c) => (Command::Tune, c),
        Cmd::Analyze(c) => (Command::Analyze, c),
    };
    let opts = RunOptions {
        out: common.out,
        exact_accel: common.exact_accel,
        epsilon: common.epsilon,
        seed: common.seed,
    };
    let result = cli::configure_threads().and_then(|_| cli::run_file(cmd, &common.scenario, &opts));
    match result {
        Ok(summary) => {
            // a closed pipe downstream is not a failure of the command
            let mut out = std::io::stdout().lock();
            for line in &summary.lines {
                let _ = writeln!(out, "{line}");
            }
            for p in &summary.written {
                let _ = writeln!(out, "wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("phctl: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
