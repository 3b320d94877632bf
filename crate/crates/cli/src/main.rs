use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use mfsc::{demo_config, run_scenario, verify_run, Kind, Overrides};

#[derive(Parser)]
#[command(name = "mfsc", version, about = "Singular mean-field stochastic control scenarios")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and write a run directory.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        particles: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// Run directory (default: <output root>/<config output or file stem>).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "MFSC_OUTPUT_ROOT", default_value = "runs")]
        output_root: PathBuf,
    },
    /// Recompute the checks of a run directory; exit 0 iff all pass.
    Verify { dir: PathBuf },
    /// Print the reference config of a scenario kind.
    Demo { kind: String },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn execute(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure the thread pool")?;
    }
    match cli.command {
        Command::Run { config, seed, particles, steps, out, output_root } => {
            let overrides = Overrides { seed, particles, steps };
            let outcome = run_scenario(&config, overrides, &output_root, out.as_deref())?;
            for c in outcome.report.failures() {
                eprintln!("check failed: {}", c.name);
            }
            println!("run directory: {}", outcome.dir.display());
            if let Some(v) = &outcome.manifest.value {
                println!("value = {v}");
            }
            println!("verdict = {}", if outcome.report.verdict() { "pass" } else { "fail" });
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { dir } => {
            let report = verify_run(&dir)?;
            print!("{report}");
            Ok(if report.verdict() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Demo { kind } => {
            let kind: Kind = kind.parse()?;
            print!("{}", demo_config(kind));
            Ok(ExitCode::SUCCESS)
        }
    }
}
