//! Batch runner for fragmentation-transport scenarios.
//!
//! Exit codes: 0 success, 2 configuration error, 3 physical-condition
//! failure, 4 solver non-convergence, 5 verification failure. Every error
//! path prints a JSON error object on stdout next to the human message on
//! stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fireworks_core::runner::{
    cmd_asymptotics, cmd_check, cmd_compare, cmd_mc, cmd_solve, RunError, RunOptions,
};
use fireworks_core::scenario::ScenarioConfig;

#[derive(Parser)]
#[command(
    name = "fireworks",
    version,
    about = "Deterministic and Monte Carlo solvers for a linear fragmentation-transport kinetic model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Scenario file (TOML).
    #[arg(long)]
    config: PathBuf,

    /// Worker-thread cap for the inner loops; results are worker-invariant.
    #[arg(long, default_value_t = 2)]
    workers: usize,

    /// Replaces the configured Monte Carlo seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory (defaults to the config's output.dir).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Config override as section.key=value; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Verify the physical admissibility conditions and the uniform
    /// redistribution bound.
    Check(CommonArgs),
    /// Run the fixed-point solver and write snapshots plus diagnostics.
    Solve(CommonArgs),
    /// Run the weighted-particle simulation alone.
    Mc(CommonArgs),
    /// Cross-validate the solver against the particle observables.
    Compare(CommonArgs),
    /// Verify mass decay, the free-motion limit bound and weak residuals.
    Asymptotics(CommonArgs),
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, String> {
    raw.iter()
        .map(|item| {
            item.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| format!("override '{item}' is not of the form KEY=VALUE"))
        })
        .collect()
}

fn load(args: &CommonArgs) -> Result<(ScenarioConfig, RunOptions), RunError> {
    let overrides = parse_overrides(&args.overrides).map_err(RunError::Config)?;
    let config = ScenarioConfig::load(&args.config, &overrides).map_err(RunError::from)?;
    let base_dir = args
        .config
        .parent()
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from("."));
    let opts = RunOptions {
        workers: args.workers,
        out_dir: args.out.clone(),
        seed: args.seed,
        base_dir,
    };
    Ok((config, opts))
}

fn run(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Check(args) => {
            let (config, opts) = load(&args)?;
            let outcome = cmd_check(&config, &opts)?;
            for c in &outcome.report.conditions {
                println!(
                    "[{}] {} (worst {:.6e} at {})",
                    if c.passed { "pass" } else { "FAIL" },
                    c.name,
                    c.worst_value,
                    c.worst_location
                );
            }
            println!(
                "[{}] uniform redistribution bound: delta = {:.6}",
                if outcome.delta.satisfied { "pass" } else { "FAIL" },
                outcome.delta.delta
            );
            Ok(())
        }
        Command::Solve(args) => {
            let (config, opts) = load(&args)?;
            let outcome = cmd_solve(&config, &opts)?;
            let d = &outcome.diagnostics;
            println!(
                "converged in {} sweeps (final residual {:.3e}); outputs in {}",
                d.iterations,
                d.residual_history.last().copied().unwrap_or(0.0),
                outcome.out_dir.display()
            );
            Ok(())
        }
        Command::Mc(args) => {
            let (config, opts) = load(&args)?;
            let outcome = cmd_mc(&config, &opts)?;
            let last = outcome.rows.last().expect("at least the initial tally");
            println!(
                "{} steps recorded; final mass {:.6} (se {:.2e}); outputs in {}",
                outcome.rows.len() - 1,
                last.mass,
                last.mass_se,
                outcome.out_dir.display()
            );
            Ok(())
        }
        Command::Compare(args) => {
            let (config, opts) = load(&args)?;
            let outcome = cmd_compare(&config, &opts)?;
            let worst = outcome
                .rows
                .iter()
                .max_by(|a, b| a.z.abs().total_cmp(&b.z.abs()))
                .expect("at least one checkpoint");
            println!(
                "all {} observables within band; worst |z| = {:.2} ({} at t = {})",
                outcome.rows.len(),
                worst.z.abs(),
                worst.observable,
                worst.t
            );
            Ok(())
        }
        Command::Asymptotics(args) => {
            let (config, opts) = load(&args)?;
            let outcome = cmd_asymptotics(&config, &opts)?;
            let s = &outcome.summary;
            println!(
                "delta = {:.4}; decay inequalities {}, limit bound {}, distance monotone {}, weak residuals {}",
                s.delta,
                if s.diff_inequality_pass && s.int_inequality_pass { "pass" } else { "FAIL" },
                if s.bound_pass { "pass" } else { "FAIL" },
                if s.distance_monotone_pass { "pass" } else { "FAIL" },
                if s.weak_pass { "pass" } else { "FAIL" },
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // machine-readable object on stdout, human text on stderr
            println!("{}", err.to_json());
            eprintln!("error: {}", err.message());
            ExitCode::from(err.exit_code().clamp(0, 255) as u8)
        }
    }
}
