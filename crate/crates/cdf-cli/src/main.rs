//! `cdf`: scenario-driven safe-navigation runs.
//!
//! Subcommands:
//!   simulate      run one closed loop, write trajectory.csv + summary.json
//!   sweep         run seeded Monte Carlo batches, write sweep.csv + summary
//!   density-grid  export the density field over a grid, write grid.csv
//!   validate      parse and validate a scenario, print the verdict
//!
//! Exit codes for `simulate`: 0 converged, 2 unsafe, 3 infeasible,
//! 4 timeout; 1 is reserved for malformed scenarios, bad flags and I/O
//! failures. `sweep` exits 0 iff the unsafe fraction is exactly zero.
//! Set CDF_LOG=quiet|info|debug to control stderr chatter.

mod output;

use std::env;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use cdf_control::scenario::Scenario;
use cdf_control::sim::Outcome;

const EXIT_OK: u8 = 0;
const EXIT_ERROR: u8 = 1;
const EXIT_UNSAFE: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_TIMEOUT: u8 = 4;

const USAGE: &str = "\
cdf - density-based safe navigation runner

USAGE:
  cdf simulate     --scenario FILE --out DIR [overrides]
  cdf sweep        --scenario FILE --out DIR [--count N] [--seed N] [overrides]
  cdf density-grid --scenario FILE --out DIR [--resolution N]
  cdf validate     --scenario FILE

OVERRIDES (reapplied on top of the scenario file):
  --dt X       integration step
  --beta X     divergence margin
  --alpha X    density exponent
  --seed N     sweep seed
  --count N    sweep run count

ENVIRONMENT:
  CDF_LOG      quiet | info (default) | debug
";

fn log_level() -> u8 {
    match env::var("CDF_LOG").as_deref() {
        Ok("quiet") | Ok("error") => 0,
        Ok("debug") => 2,
        _ => 1,
    }
}

macro_rules! info {
    ($($arg:tt)*) => {
        if log_level() >= 1 { eprintln!($($arg)*); }
    };
}

#[derive(Debug, Default)]
struct Args {
    scenario: Option<PathBuf>,
    out: Option<PathBuf>,
    count: Option<usize>,
    seed: Option<u64>,
    resolution: Option<usize>,
    dt: Option<String>,
    beta: Option<String>,
    alpha: Option<String>,
}

fn parse_args(mut argv: impl Iterator<Item = String>) -> Result<Args, String> {
    let mut args = Args::default();
    while let Some(flag) = argv.next() {
        let mut value = |name: &str| -> Result<String, String> {
            argv.next().ok_or(format!("flag {name} needs a value"))
        };
        match flag.as_str() {
            "--scenario" => args.scenario = Some(PathBuf::from(value("--scenario")?)),
            "--out" => args.out = Some(PathBuf::from(value("--out")?)),
            "--count" => {
                args.count = Some(
                    value("--count")?
                        .parse()
                        .map_err(|_| "count must be a nonnegative integer".to_string())?,
                )
            }
            "--seed" => {
                args.seed = Some(
                    value("--seed")?
                        .parse()
                        .map_err(|_| "seed must be a nonnegative integer".to_string())?,
                )
            }
            "--resolution" => {
                args.resolution = Some(
                    value("--resolution")?
                        .parse()
                        .map_err(|_| "resolution must be a positive integer".to_string())?,
                )
            }
            "--dt" => args.dt = Some(value("--dt")?),
            "--beta" => args.beta = Some(value("--beta")?),
            "--alpha" => args.alpha = Some(value("--alpha")?),
            other => return Err(format!("unknown flag `{other}`")),
        }
    }
    Ok(args)
}

fn load_scenario(args: &Args) -> Result<Scenario, String> {
    let path = args
        .scenario
        .as_ref()
        .ok_or("missing required flag --scenario")?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read scenario {}: {e}", path.display()))?;
    let mut scenario = Scenario::parse(&text).map_err(|e| e.to_string())?;
    if let Some(dt) = &args.dt {
        scenario
            .apply_override("dt", dt)
            .map_err(|e| e.to_string())?;
    }
    if let Some(beta) = &args.beta {
        scenario
            .apply_override("beta", beta)
            .map_err(|e| e.to_string())?;
    }
    if let Some(alpha) = &args.alpha {
        scenario
            .apply_override("alpha", alpha)
            .map_err(|e| e.to_string())?;
    }
    if let Some(seed) = args.seed {
        scenario
            .apply_override("seed", &seed.to_string())
            .map_err(|e| e.to_string())?;
    }
    if let Some(count) = args.count {
        scenario
            .apply_override("count", &count.to_string())
            .map_err(|e| e.to_string())?;
    }
    Ok(scenario)
}

fn ensure_out_dir(args: &Args) -> Result<&Path, String> {
    let out = args.out.as_ref().ok_or("missing required flag --out")?;
    std::fs::create_dir_all(out).map_err(|e| format!("cannot create {}: {e}", out.display()))?;
    Ok(out)
}

fn cmd_simulate(args: &Args) -> Result<u8, String> {
    let scenario = load_scenario(args)?;
    let built = scenario.build().map_err(|e| e.to_string())?;
    let out = ensure_out_dir(args)?;

    let started = Instant::now();
    let traj = built.run().map_err(|e| e.to_string())?;
    let wall = started.elapsed().as_secs_f64();

    let control_dim = if built.is_dubin {
        2 // (v, ω)
    } else {
        built.system.control_dim()
    };
    output::write_trajectory_csv(
        &out.join("trajectory.csv"),
        &built.density,
        &traj,
        control_dim,
    )
    .map_err(|e| e.to_string())?;
    output::write_summary_json(&out.join("summary.json"), &traj, wall)
        .map_err(|e| e.to_string())?;

    info!(
        "outcome={} steps={} terminal_distance={:.6} min_clearance={:.6} dwell={:.6} relaxed={}",
        traj.outcome.as_str(),
        traj.steps.len(),
        traj.terminal_distance,
        traj.min_clearance,
        traj.unsafe_dwell_time,
        traj.relaxed_steps()
    );

    Ok(match traj.outcome {
        Outcome::Converged => EXIT_OK,
        Outcome::Unsafe => EXIT_UNSAFE,
        Outcome::Infeasible => EXIT_INFEASIBLE,
        Outcome::Timeout => EXIT_TIMEOUT,
    })
}

fn cmd_sweep(args: &Args) -> Result<u8, String> {
    let scenario = load_scenario(args)?;
    let built = scenario.build().map_err(|e| e.to_string())?;
    let out = ensure_out_dir(args)?;

    let count = built.count;
    let seed = built.seed;
    let started = Instant::now();
    let report = built.sweep(count, seed).map_err(|e| e.to_string())?;
    let wall = started.elapsed().as_secs_f64();

    output::write_sweep_csv(&out.join("sweep.csv"), &report).map_err(|e| e.to_string())?;
    output::write_sweep_summary_json(&out.join("sweep_summary.json"), &report, count, seed, wall)
        .map_err(|e| e.to_string())?;

    info!(
        "runs={} converged={:.3} unsafe={:.3} failed={} max_dwell={:.6}",
        count,
        report.converged_fraction,
        report.unsafe_fraction,
        report.failed_runs,
        report.max_unsafe_dwell_time
    );

    Ok(if report.unsafe_fraction == 0.0 {
        EXIT_OK
    } else {
        EXIT_UNSAFE
    })
}

fn cmd_density_grid(args: &Args) -> Result<u8, String> {
    let scenario = load_scenario(args)?;
    if scenario.target.len() > 2 && scenario.grid_fixed.is_none() {
        return Err(
            "density grid over a workspace with more than two dimensions needs a slice \
             spec (grid_dims + grid_fixed)"
                .to_string(),
        );
    }
    let built = scenario.build().map_err(|e| e.to_string())?;
    let out = ensure_out_dir(args)?;
    let resolution = args.resolution.unwrap_or(101);
    if resolution == 0 {
        return Err("resolution must be at least 1".to_string());
    }
    output::write_grid_csv(
        &out.join("grid.csv"),
        &built.density,
        &built.grid,
        resolution,
    )
    .map_err(|e| e.to_string())?;
    info!(
        "grid {}x{} over [{:.3}, {:.3}] x [{:.3}, {:.3}]",
        resolution,
        resolution,
        built.grid.min.0,
        built.grid.max.0,
        built.grid.min.1,
        built.grid.max.1
    );
    Ok(EXIT_OK)
}

fn cmd_validate(args: &Args) -> Result<u8, String> {
    let scenario = load_scenario(args)?;
    scenario.build().map_err(|e| e.to_string())?;
    println!("ok");
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let mut argv = env::args().skip(1);
    let Some(verb) = argv.next() else {
        eprint!("{USAGE}");
        return ExitCode::from(EXIT_ERROR);
    };
    let args = match parse_args(argv) {
        Ok(args) => args,
        Err(message) => {
            eprintln!("error: {message}");
            eprint!("{USAGE}");
            return ExitCode::from(EXIT_ERROR);
        }
    };
    let result = match verb.as_str() {
        "simulate" => cmd_simulate(&args),
        "sweep" => cmd_sweep(&args),
        "density-grid" => cmd_density_grid(&args),
        "validate" => cmd_validate(&args),
        "help" | "--help" | "-h" => {
            print!("{USAGE}");
            return ExitCode::from(EXIT_OK);
        }
        other => {
            eprintln!("error: unknown subcommand `{other}`");
            eprint!("{USAGE}");
            return ExitCode::from(EXIT_ERROR);
        }
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
