use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use difflab::scenario::{list_checks, run_scenario, ExitStatus};

#[derive(Parser)]
#[command(
    name = "lab",
    about = "Scenario runner for discrete Dirichlet form experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and write trace.csv, distances.csv, sweep.csv, report.txt.
    Run {
        scenario: PathBuf,
        /// Output directory (overrides the scenario's `out`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// List the available checks.
    Checks {
        #[arg(long)]
        json: bool,
    },
    /// Print the version.
    Version,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                ExitStatus::Invalid.code() as u8
            } else {
                0
            });
        }
    };
    match cli.command {
        Command::Version => {
            println!("lab {}", env!("CARGO_PKG_VERSION"));
            ExitCode::SUCCESS
        }
        Command::Checks { json } => {
            let checks = list_checks();
            if json {
                println!(
                    "{}",
                    serde_json::to_string_pretty(&checks).expect("check list serializes")
                );
            } else {
                for c in &checks {
                    println!("{:<16} {}  [claim: {}]", c.name, c.description, c.claim);
                }
            }
            ExitCode::SUCCESS
        }
        Command::Run {
            scenario,
            out,
            threads,
        } => {
            if let Some(n) = threads {
                if n == 0 {
                    eprintln!("error: --threads must be positive");
                    return ExitCode::from(ExitStatus::Invalid.code() as u8);
                }
                if let Err(e) = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                {
                    eprintln!("error: {e}");
                    return ExitCode::from(ExitStatus::Invalid.code() as u8);
                }
            }
            match run_scenario(&scenario, out.as_deref()) {
                Ok(summary) => {
                    for o in &summary.outcomes {
                        println!("{}: {}", o.name, if o.passed { "PASS" } else { "FAIL" });
                    }
                    println!("outputs in {}", summary.out_dir.display());
                    ExitCode::from(summary.status().code() as u8)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(e.exit_status().code() as u8)
                }
            }
        }
    }
}
