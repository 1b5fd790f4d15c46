use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kinflow_cli::report::fmt_f64;
use kinflow_cli::{run, RunOptions};

#[derive(Parser)]
#[command(name = "kinflow", version, about = "Run kinetic and measure-valued flow experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `seed` in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; falls back to KINFLOW_THREADS.
        #[arg(long, env = "KINFLOW_THREADS")]
        threads: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Command::Run {
        config,
        out,
        seed,
        threads,
    } = cli.command;
    if let Some(n) = threads {
        if n == 0 {
            eprintln!("config error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("run failed: {e}");
            return ExitCode::from(1);
        }
    }
    match run(&config, &RunOptions { out, seed }) {
        Ok(outcome) => {
            for c in &outcome.checks {
                let tag = if c.passed { "ok" } else { "FAILED" };
                println!(
                    "{tag:>6}  {}: {} (value {}, limit {})",
                    c.name,
                    c.invariant,
                    fmt_f64(c.value),
                    fmt_f64(c.threshold)
                );
            }
            println!("summary: {}", outcome.summary.display());
            if !outcome.passed() {
                for c in outcome.checks.iter().filter(|c| !c.passed) {
                    eprintln!("check failed: {} violated ({})", c.invariant, c.name);
                }
            }
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
