use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use robomill::config::Overrides;
use robomill_cli::{cmd_compensate, cmd_simulate, cmd_verify, CliError};

/// Simulate robotic milling with a compliant robot model and compensate the
/// predicted tool deflection.
#[derive(Parser)]
#[command(name = "robomill", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
    /// Time step, s.
    #[arg(long)]
    dt: Option<f64>,
    /// Simulated duration, s.
    #[arg(long)]
    duration: Option<f64>,
    /// Workpiece grid step in both directions, m.
    #[arg(long)]
    grid_step: Option<f64>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides { dt: self.dt, duration: self.duration, grid_step: self.grid_step }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the milling simulation; writes trace, spectrum, profile, grid and report.json.
    Simulate {
        scenario: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Build the compensated trajectory from a simulated trace.
    Compensate {
        scenario: PathBuf,
        trace: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Re-simulate with a compensated trajectory and compare with the nominal run.
    Verify {
        scenario: PathBuf,
        trajectory: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Simulate { scenario, common } => {
            let r = cmd_simulate(&scenario, &common.out, &common.overrides())?;
            Ok(format!(
                "low frequency {:.3} Hz, static deviation {:.4e} m, max deviation {:.4e} m ({:.1} s)",
                r.low_frequency, r.static_deviation, r.max_deviation, r.runtime
            ))
        }
        Command::Compensate { scenario, trace, common } => {
            let c = cmd_compensate(&scenario, &trace, &common.out, &common.overrides())?;
            Ok(format!(
                "{} samples at {} s, first mode {:.3} Hz, cutoff {:.3} Hz",
                c.samples.len(),
                c.controller_period,
                c.first_mode,
                c.cutoff
            ))
        }
        Command::Verify { scenario, trajectory, common } => {
            let r = cmd_verify(&scenario, &trajectory, &common.out, &common.overrides())?;
            Ok(format!(
                "static deviation {:.4e} -> {:.4e} m ({:.1}%), max deviation {:.4e} -> {:.4e} m ({:.1}%), low frequency {:.3} -> {:.3} Hz",
                r.before.static_deviation,
                r.after.static_deviation,
                100.0 * r.static_deviation_reduction,
                r.before.max_deviation,
                r.after.max_deviation,
                100.0 * r.max_deviation_reduction,
                r.before.low_frequency,
                r.after.low_frequency
            ))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
