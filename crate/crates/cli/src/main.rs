use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use zonebal_cli::{CliError, Overrides};
use zonebal_core::Scenario;

#[derive(Parser)]
#[command(name = "zonebal", version, about = "SMP load-balancing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the simulated duration.
    #[arg(long = "duration-us")]
    duration_us: Option<u64>,
    /// Output directory.
    #[arg(short, long, env = "ZONEBAL_OUT")]
    out: Option<PathBuf>,
    /// Re-check scheduler invariants after every event (slow).
    #[arg(long)]
    check_invariants: bool,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            duration_us: self.duration_us,
            check_invariants: self.check_invariants,
        }
    }

    fn out(&self) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(zonebal_cli::default_out_dir)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write samples.csv, summary.json and latency.dat.
    Run {
        scenario: PathBuf,
        /// baseline | zone:cold | zone:warm_low | zone:warm_mid | zone:warm_high | zone:hot
        #[arg(long)]
        policy: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Run several policies on the same scenario and seed.
    Compare {
        scenario: PathBuf,
        #[arg(required = true, num_args = 1..)]
        policies: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// One run per value of `axis` (spot, cache_penalty_us or n_cpu_hogs).
    Sweep {
        scenario: PathBuf,
        axis: String,
        values: Vec<u64>,
        #[arg(long)]
        policy: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Print a scenario file with every key at its default.
    Scenario {
        /// The light-load scenario instead of the desk scenario.
        #[arg(long)]
        light: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut stdout = io::stdout();
    let result = match &cli.command {
        Command::Run {
            scenario,
            policy,
            common,
        } => zonebal_cli::run(
            scenario,
            policy.as_deref(),
            &common.overrides(),
            &common.out(),
            &mut stdout,
        ),
        Command::Compare {
            scenario,
            policies,
            common,
        } => zonebal_cli::compare(
            scenario,
            policies,
            &common.overrides(),
            &common.out(),
            &mut stdout,
        ),
        Command::Sweep {
            scenario,
            axis,
            values,
            policy,
            common,
        } => zonebal_cli::sweep(
            scenario,
            axis,
            values,
            policy.as_deref(),
            &common.overrides(),
            &common.out(),
            &mut stdout,
        ),
        Command::Scenario { light } => {
            let s = if *light {
                Scenario::light()
            } else {
                Scenario::default()
            };
            print!("{}", s.to_json());
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("zonebal: {}", e.message());
            ExitCode::from(exit_byte(&e))
        }
    }
}

fn exit_byte(e: &CliError) -> u8 {
    e.exit_code() as u8
}
