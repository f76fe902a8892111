use std::path::Path;
use std::process::{Command, Output};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use switched_slq::models::{LinearSubsystem, QuadraticCost, QuadraticTerminal};
use switched_slq::problem::Subsystem;
use switched_slq::rollout::rollout;
use switched_slq::{NormalizedGrid, SlqPolicy, SwitchedProblem, SwitchingTimes};
use switched_slq_bench::commands::{grad_check, grad_check_defaults};
use switched_slq_bench::output::{ReportFile, TrajectoryTable};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_switched-slq")).args(args).output().unwrap()
}

fn report(dir: &Path) -> ReportFile {
    ReportFile::parse(&std::fs::read_to_string(dir.join("report.txt")).unwrap()).unwrap()
}

#[test]
fn lists_builtins() {
    let out = cli(&["list-benchmarks"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("ex1: 3 modes") && text.contains("ex2: 3 modes"));
}

#[test]
fn unknown_benchmark_is_a_usage_error() {
    let out = cli(&["solve", "--benchmark", "bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().contains("ex1, ex2"));
}

#[test]
fn bad_flags_are_usage_errors() {
    assert_eq!(cli(&["solve", "--benchmark", "ex1", "--frobnicate"]).status.code(), Some(1));
    assert_eq!(cli(&["solve", "--benchmark", "ex1", "--initial-times", "2,1"]).status.code(), Some(1));
    assert_eq!(cli(&["solve"]).status.code(), Some(1));
}

#[test]
fn zero_outer_iterations_reports_not_converged() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&[
        "solve",
        "--benchmark",
        "ex1",
        "--max-outer",
        "0",
        "--output-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let r = report(dir.path());
    assert_eq!(r.get("converged"), Some("false"));
    assert_eq!(r.get("outer_iterations"), Some("0"));
    assert_eq!(r.get("times"), Some("1, 2"));
}

#[test]
fn config_file_is_read_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.cfg");
    std::fs::write(&config, "benchmark = ex2\nmax_outer = 0\nnodes_per_mode = 50\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = cli(&[
        "solve",
        "--config",
        config.to_str().unwrap(),
        "--benchmark",
        "ex1",
        "--output-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let r = report(&out_dir);
    assert_eq!(r.get("benchmark"), Some("ex1"));
    assert_eq!(r.get("nodes_per_mode"), Some("50"));
    let table = TrajectoryTable::read(std::fs::File::open(out_dir.join("trajectory.csv")).unwrap()).unwrap();
    assert_eq!(table.header, ["z", "t", "x1", "x2", "u1"]);
    assert_eq!(table.rows.len(), 3 * 50 + 1);
}

#[test]
fn solve_converges_and_reports_are_stable() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let out = cli(&["solve", "--benchmark", "ex1", "--output-dir", dir.path().to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0));
    }
    let strip = |r: ReportFile| -> Vec<(String, String)> {
        r.entries.into_iter().filter(|(k, _)| k != "wall_time_ms").collect()
    };
    let (ra, rb) = (report(a.path()), report(b.path()));
    let cost: f64 = ra.get("cost").unwrap().parse().unwrap();
    assert!(cost < 11.66);
    assert_eq!(ra.get("converged"), Some("true"));
    assert_eq!(strip(ra), strip(rb));
    let csv = |d: &Path| std::fs::read(d.join("trajectory.csv")).unwrap();
    assert_eq!(csv(a.path()), csv(b.path()));
}

#[test]
fn trajectory_csv_round_trip() {
    let problem = switched_slq::benchmarks::example2_problem(1.0);
    let times = SwitchingTimes::new(vec![0.7, 1.9]);
    let grid = NormalizedGrid::new(3, 40).unwrap();
    let policy = SlqPolicy::constant_input(grid, 4, &DVector::from_vec(vec![0.3, -0.2]));
    let traj = rollout(&problem, &times, &policy).unwrap();
    let table = TrajectoryTable::from_trajectory(&traj);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trajectory.csv");
    table.write(std::fs::File::create(&path).unwrap()).unwrap();
    let back = TrajectoryTable::read(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(back.header, table.header);
    assert_eq!(back.rows.len(), table.rows.len());
    for (r, s) in back.rows.iter().zip(&table.rows) {
        for (x, y) in r.iter().zip(s) {
            assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }
}

#[test]
fn grad_check_passes_at_uniform_times() {
    let out = cli(&["grad-check", "--benchmark", "ex1"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("rel_error"));
}

#[test]
fn grad_check_fails_an_unattainable_tolerance() {
    let out = cli(&["grad-check", "--benchmark", "ex1", "--tolerance", "1e-12"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn grad_check_of_single_mode_problem_is_empty() {
    let cost = QuadraticCost::new(DMatrix::identity(1, 1), DMatrix::identity(1, 1), DVector::zeros(1), DVector::zeros(1));
    let sys: Arc<dyn Subsystem> = Arc::new(LinearSubsystem::new(DMatrix::zeros(1, 1), DMatrix::identity(1, 1), cost));
    let terminal = QuadraticTerminal::new(DMatrix::identity(1, 1), DVector::zeros(1));
    let p = SwitchedProblem::new(vec![sys], Arc::new(terminal), 0.0, 1.0, DVector::from_element(1, 1.0)).unwrap();
    let grid = NormalizedGrid::new(1, 20).unwrap();
    let check = grad_check(&p, &SwitchingTimes::new(vec![]), grid, &grad_check_defaults(), 1e-4).unwrap();
    assert!(check.rows.is_empty());
    assert!(check.passes(1e-2));
}

#[test]
fn scaling_with_one_size_prints_one_row() {
    let out = cli(&["scaling", "--benchmark", "ex1", "--nodes", "50"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 2);
}
