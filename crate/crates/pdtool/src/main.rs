use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pdtool::{check, run_config_file, schema, thread_pool, ExitStatus};

#[derive(Parser)]
#[command(name = "pdtool", version, about = "Primal-dual optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config and write its traces.
    Run {
        config: PathBuf,
        /// Output directory (overrides the config's "output").
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed (overrides the config's "seed").
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the invariant suites.
    Check {
        /// Only this module's suite.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Print the config JSON schema.
    Schema,
}

fn exit(status: ExitStatus) -> ExitCode {
    ExitCode::from(status as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit(ExitStatus::Error) } else { exit(ExitStatus::Ok) };
        }
    };
    match cli.command {
        Command::Run { config, out, seed } => match run_config_file(&config, out.as_deref(), seed) {
            Ok(report) => {
                for f in &report.files {
                    println!("{}", f.display());
                }
                for flag in &report.flags {
                    eprintln!("flag: {flag}");
                }
                exit(report.status())
            }
            Err(e) => {
                eprintln!("error: {e}");
                exit(ExitStatus::Error)
            }
        },
        Command::Check { filter } => {
            let result = thread_pool().and_then(|pool| pool.install(|| check::run_suite(filter.as_deref())));
            match result {
                Ok(report) => {
                    for c in &report {
                        let verdict = if c.passed { "PASS" } else { "FAIL" };
                        println!("{verdict} {} value={:e} threshold={:e}", c.name, c.value, c.threshold);
                    }
                    let failed = report.iter().filter(|c| !c.passed).count();
                    println!("{} passed, {failed} failed", report.len() - failed);
                    exit(if failed == 0 { ExitStatus::Ok } else { ExitStatus::Flagged })
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    exit(ExitStatus::Error)
                }
            }
        }
        Command::Schema => {
            print!("{}", schema::CONFIG_SCHEMA);
            exit(ExitStatus::Ok)
        }
    }
}
