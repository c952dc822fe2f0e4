use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use morphsim::commands::{cmd_compare, cmd_profile, cmd_run, cmd_sweep};
use morphsim::{Arm, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "morphsim",
    version,
    about = "Simulate precision morphing and elastic KV caches under load"
)]
struct Cli {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Divide trace inter-arrival times by this factor.
    #[arg(long, global = true)]
    downscale: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rank layers on the toy model and write swap sequences and degradation curves.
    Profile,
    /// Simulate one arm on the configured workload.
    Run {
        #[arg(long, value_enum)]
        arm: Arm,
    },
    /// Sweep request rates and report the saturation rate per arm.
    Sweep {
        /// Comma-separated request rates, e.g. 4,8,12.
        #[arg(long, value_delimiter = ',', required = true)]
        rps: Vec<f64>,
        /// Arms to run; the config's list when omitted.
        #[arg(long, value_enum, value_delimiter = ',')]
        arms: Vec<Arm>,
    },
    /// Print metric ratios of report B over report A.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Compare even if the config fingerprints differ.
        #[arg(long)]
        force: bool,
    },
    /// Print the built-in config as TOML.
    DefaultConfig,
}

fn config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if cli.downscale.is_some() {
        cfg.downscale = cli.downscale;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.1}"))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Profile => {
            let out = cmd_profile(&config(&cli)?)?;
            for p in &out.sequences {
                println!("wrote {}", p.display());
            }
            println!("wrote {}", out.curves.display());
        }
        Command::Run { arm } => {
            let cfg = config(&cli)?;
            let out = cmd_run(&cfg, *arm)?;
            let r = &out.report;
            println!(
                "{arm}: {} requests, P95 TTFT {} ms, {} SLO violations, {} preemptions, peak KV {} blocks",
                r.requests,
                fmt_opt(r.ttft_ms.p95),
                r.slo_violations,
                r.preemptions,
                r.kv.peak_capacity_blocks
            );
            println!(
                "wrote {}",
                morphsim::commands::arm_dir(&cfg, *arm).display()
            );
        }
        Command::Sweep { rps, arms } => {
            let mut cfg = config(&cli)?;
            if !arms.is_empty() {
                cfg.sweep.arms = arms.clone();
            }
            let result = cmd_sweep(&cfg, rps)?;
            println!(
                "{:>8}  {:<18}{:>14}{:>12}",
                "rps", "arm", "p95_ttft_ms", "violations"
            );
            for r in &result.rows {
                println!(
                    "{:>8}  {:<18}{:>14}{:>12}",
                    r.rps,
                    r.arm.name(),
                    fmt_opt(r.p95_ttft_ms),
                    r.slo_violations
                );
            }
            for (arm, s) in &result.saturation {
                let s = s.map_or_else(|| "not reached".into(), |x| format!("{x} rps"));
                println!("saturation {arm}: {s}");
            }
        }
        Command::Compare { a, b, force } => {
            let c = cmd_compare(a, b, *force)?;
            if !c.fingerprints_match {
                eprintln!("warning: reports come from different configs");
            }
            print!("{}", c.table());
        }
        Command::DefaultConfig => print!("{}", ExperimentConfig::default().to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
