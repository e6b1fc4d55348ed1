//! Contract tests for the `cdf` binary: exit codes, file shapes, validation
//! messages, determinism.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};

static DIR_COUNTER: AtomicUsize = AtomicUsize::new(0);

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_cdf")
}

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn temp_dir(label: &str) -> PathBuf {
    let id = DIR_COUNTER.fetch_add(1, Ordering::SeqCst);
    let dir = std::env::temp_dir().join(format!("cdf-cli-{}-{}-{}", std::process::id(), label, id));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_scenario(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("case.scenario");
    std::fs::write(&path, text).unwrap();
    path
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env("CDF_LOG", "quiet")
        .output()
        .expect("binary should run")
}

fn stderr_of(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).to_string()
}

const CHEAP_DUFFING: &str = "
system = duffing
target = 1 0
P = 2.5222563756923959 0.2360679774997898 0.2360679774997898 1.1174300616460806
alpha = 1.0
eta = 0.1
beta = 0.1
policy = slack
dt = 0.01
steps = 300
x0 = -2.5 0
obstacle.1.center = 0 0
obstacle.1.r_unsafe = 0.5
obstacle.1.r_sense = 0.7
sampler = ring
ring_center = 0 0
ring_radius = 2.5
count = 100
seed = 42
";

#[test]
fn shipped_duffing_simulate_exits_zero_with_full_csv() {
    let out = temp_dir("duffing-sim");
    let scenario = scenarios_dir().join("duffing.scenario");
    let output = run(&[
        "simulate",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(0), "{}", stderr_of(&output));
    let csv = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    // n + m + 4 columns for the Duffing plant (2 + 1 + 4).
    assert_eq!(header.split(',').count(), 7);
    assert_eq!(header, "t,x1,x2,u1,rho,min_clearance,step_flag");
    for line in lines {
        assert_eq!(line.split(',').count(), 7);
    }
    let summary = std::fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(summary.contains("\"outcome\": \"converged\""));
}

#[test]
fn unsafe_initial_state_fails_validation() {
    let dir = temp_dir("unsafe-x0");
    let scenario = write_scenario(&dir, &CHEAP_DUFFING.replace("x0 = -2.5 0", "x0 = 0.2 0"));
    let output = run(&[
        "simulate",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        dir.join("out").to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr_of(&output).contains("initial state unsafe"));
}

#[test]
fn equal_radii_fail_validation() {
    let dir = temp_dir("equal-radii");
    let scenario = write_scenario(
        &dir,
        &CHEAP_DUFFING.replace("obstacle.1.r_sense = 0.7", "obstacle.1.r_sense = 0.5"),
    );
    let output = run(&[
        "simulate",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        dir.join("out").to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr_of(&output).contains("r_sense"));
}

#[test]
fn sweep_rejects_zero_count() {
    let dir = temp_dir("count-zero");
    let scenario = write_scenario(&dir, CHEAP_DUFFING);
    let output = run(&[
        "sweep",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        dir.join("out").to_str().unwrap(),
        "--count",
        "0",
    ]);
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr_of(&output).contains("count must be >= 1"));
}

#[test]
fn sweep_writes_one_row_per_run_plus_header() {
    let dir = temp_dir("sweep-rows");
    let scenario = write_scenario(&dir, CHEAP_DUFFING);
    let out = dir.join("out");
    let output = run(&[
        "sweep",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--count",
        "100",
        "--seed",
        "42",
    ]);
    assert!(output.status.code().is_some());
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 101);
    assert_eq!(
        csv.lines().next().unwrap(),
        "run,x0_1,x0_2,outcome,terminal_distance,dwell_time"
    );
}

#[test]
fn repeated_sweep_is_byte_identical() {
    let dir = temp_dir("sweep-determinism");
    let scenario = write_scenario(&dir, CHEAP_DUFFING);
    let mut outputs = Vec::new();
    for tag in ["a", "b"] {
        let out = dir.join(tag);
        let output = run(&[
            "sweep",
            "--scenario",
            scenario.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--count",
            "30",
            "--seed",
            "42",
        ]);
        assert!(output.status.code().is_some(), "{}", stderr_of(&output));
        outputs.push(std::fs::read(out.join("sweep.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1], "sweep.csv differed between runs");
}

#[test]
fn density_grid_emits_resolution_squared_rows() {
    let dir = temp_dir("grid");
    let scenario = write_scenario(
        &dir,
        &format!("{CHEAP_DUFFING}\ngrid_min = -1 -1\ngrid_max = 1 1\n"),
    );
    let out = dir.join("out");
    let output = run(&[
        "density-grid",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--resolution",
        "3",
    ]);
    assert_eq!(output.status.code(), Some(0), "{}", stderr_of(&output));
    let csv = std::fs::read_to_string(out.join("grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 10); // header + 3x3
}

#[test]
fn density_grid_unsafe_rows_have_zero_rho() {
    let dir = temp_dir("grid-unsafe");
    let scenario = write_scenario(
        &dir,
        &format!("{CHEAP_DUFFING}\ngrid_min = -1 -1\ngrid_max = 1 1\n"),
    );
    let out = dir.join("out");
    let output = run(&[
        "density-grid",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--resolution",
        "41",
    ]);
    assert_eq!(output.status.code(), Some(0));
    let csv = std::fs::read_to_string(out.join("grid.csv")).unwrap();
    let mut saw_unsafe = false;
    for line in csv.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let rho: f64 = fields[2].parse().unwrap();
        let in_unsafe: u8 = fields[5].parse().unwrap();
        if in_unsafe == 1 {
            saw_unsafe = true;
            assert_eq!(rho, 0.0, "unsafe grid point with nonzero rho: {line}");
        }
    }
    assert!(saw_unsafe, "grid never sampled the unsafe set");
}

#[test]
fn density_grid_peaks_toward_target_and_dies_on_obstacle() {
    // Coarse shape check on the exported field: the cell nearest the target
    // carries more density than any cell on the obstacle (which carries 0).
    let dir = temp_dir("grid-shape");
    let scenario = write_scenario(
        &dir,
        &format!("{CHEAP_DUFFING}\ngrid_min = -2 -2\ngrid_max = 2 2\n"),
    );
    let out = dir.join("out");
    run(&[
        "density-grid",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--resolution",
        "81",
    ]);
    let csv = std::fs::read_to_string(out.join("grid.csv")).unwrap();
    let mut best_near_target = f64::NEG_INFINITY;
    let mut worst_obstacle = f64::INFINITY;
    for line in csv.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let x1: f64 = fields[0].parse().unwrap();
        let x2: f64 = fields[1].parse().unwrap();
        let rho: f64 = fields[2].parse().unwrap();
        let in_unsafe: u8 = fields[5].parse().unwrap();
        if rho >= 1e12 {
            continue; // capped terminal neighborhood
        }
        if ((x1 - 1.0).powi(2) + x2 * x2).sqrt() < 0.4 {
            best_near_target = best_near_target.max(rho);
        }
        if in_unsafe == 1 {
            worst_obstacle = worst_obstacle.min(rho);
        }
    }
    assert!(best_near_target > 1.0);
    assert_eq!(worst_obstacle, 0.0);
}

#[test]
fn higher_dimensional_grid_needs_a_slice_spec() {
    let dir = temp_dir("grid-3d");
    let scenario = write_scenario(
        &dir,
        "
        system = single_integrator
        state_dim = 3
        target = 0 0 0
        x0 = 1 1 1
        ",
    );
    let output = run(&[
        "density-grid",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        dir.join("out").to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr_of(&output).contains("slice"));

    // Supplying the slice makes it well-posed.
    let sliced = write_scenario(
        &temp_dir("grid-3d-ok"),
        "
        system = single_integrator
        state_dim = 3
        target = 0 0 0
        x0 = 1 1 1
        grid_dims = 0 1
        grid_fixed = 0 0 0.5
        grid_min = -1 -1
        grid_max = 1 1
        ",
    );
    let out = temp_dir("grid-3d-out");
    let output = run(&[
        "density-grid",
        "--scenario",
        sliced.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--resolution",
        "3",
    ]);
    assert_eq!(output.status.code(), Some(0), "{}", stderr_of(&output));
}

#[test]
fn validate_accepts_all_shipped_scenarios() {
    for name in [
        "duffing.scenario",
        "dubin.scenario",
        "integrator_free.scenario",
        "alpha_sweep.scenario",
    ] {
        let scenario = scenarios_dir().join(name);
        let output = run(&["validate", "--scenario", scenario.to_str().unwrap()]);
        assert_eq!(
            output.status.code(),
            Some(0),
            "{name}: {}",
            stderr_of(&output)
        );
        assert!(String::from_utf8_lossy(&output.stdout).contains("ok"));
    }
}

#[test]
fn malformed_scenario_and_flags_exit_one() {
    let dir = temp_dir("malformed");
    let scenario = write_scenario(&dir, "system = duffing\ntarget = fast slow\n");
    let output = run(&["validate", "--scenario", scenario.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr_of(&output).contains("target"));

    let output = run(&["simulate"]);
    assert_eq!(output.status.code(), Some(1));

    let output = run(&["frobnicate", "--scenario", "x"]);
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn exit_codes_follow_outcomes() {
    // Timeout: the horizon ends long before the target is reached.
    let dir = temp_dir("exit-timeout");
    let scenario = write_scenario(&dir, &CHEAP_DUFFING.replace("steps = 300", "steps = 5"));
    let output = run(&[
        "simulate",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        dir.join("t").to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(4), "{}", stderr_of(&output));

    // Unsafe: a forced constant control drives straight into the obstacle.
    let dir = temp_dir("exit-unsafe");
    let scenario = write_scenario(
        &dir,
        "
        system = single_integrator
        state_dim = 2
        target = 3 0
        x0 = -2 0
        mode = nominal
        nominal = 1 0
        dt = 0.01
        steps = 2000
        obstacle.1.center = 0 0
        obstacle.1.r_unsafe = 0.5
        obstacle.1.r_sense = 0.7
        ",
    );
    let output = run(&[
        "simulate",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        dir.join("u").to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(2), "{}", stderr_of(&output));

    // Infeasible: under the error policy a start that needs more authority
    // than the +-2 bounds provide aborts immediately.
    let dir = temp_dir("exit-infeasible");
    let scenario = write_scenario(
        &dir,
        &CHEAP_DUFFING
            .replace("policy = slack", "policy = error")
            .replace("beta = 0.1", "beta = 0.01")
            .replace("x0 = -2.5 0", "x0 = -1 -1.5"),
    );
    let output = run(&[
        "simulate",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        dir.join("i").to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(3), "{}", stderr_of(&output));
    let summary = std::fs::read_to_string(dir.join("i").join("summary.json")).unwrap();
    assert!(summary.contains("\"outcome\": \"infeasible\""));
    assert!(summary.contains("violated by"));
}

#[test]
fn shipped_duffing_full_sweep_is_safe() {
    // The scenario's own defaults: 100 seeded starts on the 2.5 ring.
    let out = temp_dir("full-sweep");
    let scenario = scenarios_dir().join("duffing.scenario");
    let output = run(&[
        "sweep",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(0), "{}", stderr_of(&output));
    let summary = std::fs::read_to_string(out.join("sweep_summary.json")).unwrap();
    assert!(summary.contains("\"unsafe_fraction\": 0.0000000000000000e0"));
    assert!(summary.contains("\"max_unsafe_dwell_time\": 0.0000000000000000e0"));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 101);
    let converged = csv
        .lines()
        .skip(1)
        .filter(|l| l.contains("converged"))
        .count();
    assert!(converged >= 95, "only {converged}/100 converged");
}

#[test]
fn sweep_with_unsafe_runs_exits_two() {
    // Forced constant control from a box of starts straight into the
    // obstacle: every run is unsafe and the sweep must say so.
    let dir = temp_dir("sweep-unsafe");
    let scenario = write_scenario(
        &dir,
        "
        system = single_integrator
        state_dim = 2
        target = 3 0
        x0 = -2 0
        mode = nominal
        nominal = 1 0
        dt = 0.01
        steps = 2000
        obstacle.1.center = 0 0
        obstacle.1.r_unsafe = 0.5
        obstacle.1.r_sense = 0.7
        sampler = box
        box_min = -2.2 -0.1
        box_max = -1.8 0.1
        count = 5
        seed = 3
        ",
    );
    let out = dir.join("out");
    let output = run(&[
        "sweep",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(2), "{}", stderr_of(&output));
    let summary = std::fs::read_to_string(out.join("sweep_summary.json")).unwrap();
    assert!(summary.contains("\"unsafe_fraction\": 1.0000000000000000e0"));
}

#[test]
fn dubin_trajectory_has_vehicle_columns() {
    let out = temp_dir("dubin-csv");
    let scenario = scenarios_dir().join("dubin.scenario");
    let output = run(&[
        "simulate",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(0), "{}", stderr_of(&output));
    let csv = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    // Three vehicle states, two vehicle inputs: n + m + 4 = 9 columns.
    assert_eq!(
        csv.lines().next().unwrap(),
        "t,x1,x2,x3,u1,u2,rho,min_clearance,step_flag"
    );
    for line in csv.lines() {
        assert_eq!(line.split(',').count(), 9);
    }
}

#[test]
fn obstacle_free_summary_stays_valid_json() {
    // min_clearance is +inf without obstacles; JSON has no inf literal, so
    // the writer must quote it.
    let dir = temp_dir("json-inf");
    let out = dir.join("out");
    let scenario = scenarios_dir().join("integrator_free.scenario");
    let output = run(&[
        "simulate",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(0), "{}", stderr_of(&output));
    let summary = std::fs::read_to_string(out.join("summary.json")).unwrap();
    assert!(summary.contains("\"min_clearance\": \"inf\""));
    assert!(!summary.contains(": inf"));
}

#[test]
fn overrides_change_the_run() {
    let dir = temp_dir("override");
    let scenario = write_scenario(&dir, CHEAP_DUFFING);
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    run(&[
        "simulate",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out_a.to_str().unwrap(),
    ]);
    run(&[
        "simulate",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out_b.to_str().unwrap(),
        "--dt",
        "0.005",
    ]);
    let a = std::fs::read_to_string(out_a.join("trajectory.csv")).unwrap();
    let b = std::fs::read_to_string(out_b.join("trajectory.csv")).unwrap();
    let second_time = |text: &str| {
        text.lines()
            .nth(2)
            .unwrap()
            .split(',')
            .next()
            .unwrap()
            .parse::<f64>()
            .unwrap()
    };
    assert_eq!(second_time(&a), 0.01);
    assert_eq!(second_time(&b), 0.005);
}
