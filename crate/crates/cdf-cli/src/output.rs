//! CSV and summary writers.
//!
//! Floats are printed with 17 significant digits so every value round-trips
//! exactly; identical runs therefore produce byte-identical files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use cdf_control::density::DensityFunction;
use cdf_control::scenario::GridSpec;
use cdf_control::sim::{StepFlag, SweepReport, Trajectory, RHO_SENTINEL};
use nalgebra::DVector;

/// Full round-trip decimal formatting (17 significant digits).
pub fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else if v == f64::INFINITY {
        "inf".to_string()
    } else if v == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{v:.16e}")
    }
}

/// `t, x…, u…, rho, min_clearance, step_flag`, one row per recorded state.
/// The terminal row repeats the last applied control and flag.
pub fn write_trajectory_csv(
    path: &Path,
    df: &DensityFunction,
    traj: &Trajectory,
    control_dim: usize,
) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let n = traj.states[0].len();
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=control_dim).map(|i| format!("u{i}")));
    header.push("rho".to_string());
    header.push("min_clearance".to_string());
    header.push("step_flag".to_string());
    writeln!(out, "{}", header.join(","))?;

    let zero_control = DVector::zeros(control_dim);
    for (k, state) in traj.states.iter().enumerate() {
        let control = if traj.controls.is_empty() {
            &zero_control
        } else {
            &traj.controls[k.min(traj.controls.len() - 1)]
        };
        let flag = if traj.steps.is_empty() {
            StepFlag::Optimal
        } else {
            traj.steps[k.min(traj.steps.len() - 1)].flag
        };
        let mut fields = vec![fmt_float(traj.times[k])];
        fields.extend(state.iter().map(|&v| fmt_float(v)));
        fields.extend(control.iter().map(|&v| fmt_float(v)));
        fields.push(fmt_float(traj.rhos[k]));
        fields.push(fmt_float(df.min_clearance(state)));
        fields.push(flag.as_str().to_string());
        writeln!(out, "{}", fields.join(","))?;
    }
    out.flush()
}

/// JSON has no literal for infinities or NaN; quote those.
fn json_number(v: f64) -> String {
    if v.is_finite() {
        fmt_float(v)
    } else {
        json_string(&fmt_float(v))
    }
}

fn json_string(s: &str) -> String {
    let mut escaped = String::with_capacity(s.len() + 2);
    escaped.push('"');
    for c in s.chars() {
        match c {
            '"' => escaped.push_str("\\\""),
            '\\' => escaped.push_str("\\\\"),
            '\n' => escaped.push_str("\\n"),
            c if (c as u32) < 0x20 => escaped.push_str(&format!("\\u{:04x}", c as u32)),
            c => escaped.push(c),
        }
    }
    escaped.push('"');
    escaped
}

pub fn write_summary_json(
    path: &Path,
    traj: &Trajectory,
    wall_seconds: f64,
) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{{")?;
    writeln!(
        out,
        "  \"outcome\": {},",
        json_string(traj.outcome.as_str())
    )?;
    writeln!(
        out,
        "  \"terminal_distance\": {},",
        json_number(traj.terminal_distance)
    )?;
    writeln!(
        out,
        "  \"unsafe_dwell_time\": {},",
        json_number(traj.unsafe_dwell_time)
    )?;
    writeln!(
        out,
        "  \"min_clearance\": {},",
        json_number(traj.min_clearance)
    )?;
    writeln!(out, "  \"steps\": {},", traj.steps.len())?;
    writeln!(out, "  \"duration\": {},", json_number(traj.duration()))?;
    writeln!(out, "  \"relaxed_steps\": {},", traj.relaxed_steps())?;
    writeln!(
        out,
        "  \"rho_above_one_steps\": {},",
        traj.rho_above_one_steps()
    )?;
    match &traj.failure {
        Some(text) => writeln!(out, "  \"failure\": {},", json_string(text))?,
        None => writeln!(out, "  \"failure\": null,")?,
    }
    writeln!(out, "  \"wall_time_s\": {}", json_number(wall_seconds))?;
    writeln!(out, "}}")?;
    out.flush()
}

/// One row per run: index, start, outcome, terminal distance, dwell time.
pub fn write_sweep_csv(path: &Path, report: &SweepReport) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let n = report.runs.first().map_or(0, |r| r.x0.len());
    let mut header = vec!["run".to_string()];
    header.extend((1..=n).map(|i| format!("x0_{i}")));
    header.push("outcome".to_string());
    header.push("terminal_distance".to_string());
    header.push("dwell_time".to_string());
    writeln!(out, "{}", header.join(","))?;
    for run in &report.runs {
        let outcome = run
            .outcome
            .map_or("failed".to_string(), |o| o.as_str().to_string());
        let mut fields = vec![run.index.to_string()];
        fields.extend(run.x0.iter().map(|&v| fmt_float(v)));
        fields.push(outcome);
        fields.push(fmt_float(run.terminal_distance));
        fields.push(fmt_float(run.unsafe_dwell_time));
        writeln!(out, "{}", fields.join(","))?;
    }
    out.flush()
}

pub fn write_sweep_summary_json(
    path: &Path,
    report: &SweepReport,
    count: usize,
    seed: u64,
    wall_seconds: f64,
) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{{")?;
    writeln!(out, "  \"count\": {count},")?;
    writeln!(out, "  \"seed\": {seed},")?;
    writeln!(
        out,
        "  \"converged_fraction\": {},",
        json_number(report.converged_fraction)
    )?;
    writeln!(
        out,
        "  \"unsafe_fraction\": {},",
        json_number(report.unsafe_fraction)
    )?;
    writeln!(out, "  \"failed_runs\": {},", report.failed_runs)?;
    writeln!(
        out,
        "  \"max_unsafe_dwell_time\": {},",
        json_number(report.max_unsafe_dwell_time)
    )?;
    writeln!(out, "  \"wall_time_s\": {}", json_number(wall_seconds))?;
    writeln!(out, "}}")?;
    out.flush()
}

/// Uniform grid over the scenario's slice window:
/// `x1, x2, rho, gradx1, gradx2, in_unsafe, in_sensing`.
/// Points inside the terminal neighborhood report ρ as [`RHO_SENTINEL`].
pub fn write_grid_csv(
    path: &Path,
    df: &DensityFunction,
    grid: &GridSpec,
    resolution: usize,
) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "x1,x2,rho,gradx1,gradx2,in_unsafe,in_sensing")?;
    let (d0, d1) = grid.dims;
    let coord = |lo: f64, hi: f64, i: usize| {
        if resolution == 1 {
            lo
        } else {
            lo + (hi - lo) * i as f64 / (resolution - 1) as f64
        }
    };
    let mut state = grid.base.clone();
    for i in 0..resolution {
        let a = coord(grid.min.0, grid.max.0, i);
        for j in 0..resolution {
            let b = coord(grid.min.1, grid.max.1, j);
            state[d0] = a;
            state[d1] = b;
            let in_unsafe = df.in_unsafe_set(&state);
            let in_terminal = (&state - df.target()).norm() <= df.eta();
            let (rho, gx, gy) = if in_unsafe {
                (0.0, 0.0, 0.0)
            } else if in_terminal {
                (RHO_SENTINEL, 0.0, 0.0)
            } else {
                let rho = df.rho(&state).unwrap_or(RHO_SENTINEL);
                let grad = df
                    .rho_gradient(&state)
                    .unwrap_or_else(|_| DVector::zeros(state.len()));
                (rho, grad[d0], grad[d1])
            };
            let in_sensing = df.in_sensing_region(&state);
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                fmt_float(a),
                fmt_float(b),
                fmt_float(rho),
                fmt_float(gx),
                fmt_float(gy),
                u8::from(in_unsafe),
                u8::from(in_sensing)
            )?;
        }
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_round_trips() {
        for &v in &[
            0.0,
            1.0,
            -2.5,
            0.1,
            std::f64::consts::PI,
            1.0e-300,
            -3.333333333333333e17,
        ] {
            let text = fmt_float(v);
            let back: f64 = text.parse().unwrap();
            assert_eq!(back, v, "{text} did not round-trip");
        }
        assert_eq!(fmt_float(f64::NAN), "nan");
        assert_eq!(fmt_float(f64::INFINITY), "inf");
    }
}
