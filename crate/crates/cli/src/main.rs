use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use epibench::config::{apply_seed_env, parse_config, report, run_experiment};
use epibench::oracles::oracle_suite;
use epibench::principles::format_value;

#[derive(Parser)]
#[command(name = "epibench", version, about = "Epistemic-uncertainty benchmark runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate the configured grid.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Maximum number of concurrent tasks.
        #[arg(long, default_value_t = default_jobs())]
        jobs: usize,
        /// Output directory, overriding `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the closed-form oracles against Monte Carlo and exact sweeps.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Recompute compliance.csv and summary.csv from existing heatmaps.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), format_value)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { config, jobs, out } => {
            let mut cfg = parse_config(&config).with_context(|| format!("reading {}", config.display()))?;
            apply_seed_env(&mut cfg)?;
            if let Some(out) = out {
                cfg.output_dir = out;
            }
            if jobs == 0 {
                bail!("--jobs must be >= 1");
            }
            let rep = run_experiment(&cfg, jobs)?;
            println!("output: {}", rep.output_dir.display());
            println!("{:<16} {:>10} {:>10}", "method", "first", "second");
            for (m, c) in &rep.compliance {
                println!("{m:<16} {:>10} {:>10}", fmt_opt(c.first_principle), fmt_opt(c.second_principle));
            }
            if rep.failed_cells > 0 {
                eprintln!("{} cell(s) failed; see manifest.txt", rep.failed_cells);
                return Ok(ExitCode::FAILURE);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::OracleCheck { seed } => {
            let checks = oracle_suite(seed)?;
            let mut ok = true;
            for c in &checks {
                ok &= c.passed;
                println!("{:<32} {:<4} {}", c.name, if c.passed { "PASS" } else { "FAIL" }, c.detail);
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Report { out } => {
            for (m, c) in report(&out)? {
                println!("{m:<16} {:>10} {:>10}", fmt_opt(c.first_principle), fmt_opt(c.second_principle));
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
