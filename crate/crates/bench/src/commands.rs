//! Subcommands and their exit codes.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use switched_slq::benchmarks::{builtin, Benchmark, BENCHMARK_NAMES};
use switched_slq::gradient::{fd_gradient_oracle, gradient, oracle_settings, FdMode, GradientSettings};
use switched_slq::outer::{cold_solve, ocs2_solve, Ocs2Report, OuterTermination};
use switched_slq::{NormalizedGrid, SlqSettings, SwitchedProblem, SwitchingTimes};

use crate::config::{Config, DEFAULT_FD_STEP, DEFAULT_GRADIENT_TOLERANCE};
use crate::output::{join_floats, ReportFile, TrajectoryTable};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NOT_CONVERGED: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "switched-slq", version, about = "Switching-time and input optimization for the builtin benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Optimize switching times and inputs; writes trajectory.csv and report.txt.
    Solve(Options),
    /// Compare the analytic switching-time gradient with finite differences.
    GradCheck(Options),
    /// Time single inner solves over a list of grid sizes.
    Scaling(Options),
    /// List the builtin benchmarks.
    ListBenchmarks,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Options {
    #[arg(long)]
    pub benchmark: Option<String>,
    /// Flat `key = value` settings file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub initial_times: Option<Vec<f64>>,
    #[arg(long)]
    pub nodes_per_mode: Option<usize>,
    #[arg(long)]
    pub l_min: Option<f64>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub max_outer: Option<usize>,
    #[arg(long)]
    pub gap_tol: Option<f64>,
    #[arg(long)]
    pub step_tol: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub gammas: Option<Vec<f64>>,
    #[arg(long)]
    pub no_warm_start: bool,
    /// Finite-difference step for grad-check.
    #[arg(long)]
    pub h: Option<f64>,
    /// Relative tolerance for grad-check.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Grid sizes for scaling, e.g. `100,200,400`.
    #[arg(long, value_delimiter = ',')]
    pub nodes: Option<Vec<usize>>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

impl Options {
    fn flags(&self) -> Config {
        Config {
            benchmark: self.benchmark.clone(),
            initial_times: self.initial_times.clone(),
            nodes_per_mode: self.nodes_per_mode,
            l_min: self.l_min,
            max_iterations: self.max_iterations,
            max_outer: self.max_outer,
            gap_tol: self.gap_tol,
            step_tol: self.step_tol,
            gammas: self.gammas.clone(),
            warm_start: self.no_warm_start.then_some(false),
            h: self.h,
            tolerance: self.tolerance,
            nodes: self.nodes.clone(),
            threads: self.threads,
            output_dir: self.output_dir.clone(),
        }
    }

    pub fn resolve(&self) -> Result<Config> {
        let file = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        Ok(file.merged(self.flags()))
    }
}

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

fn usage(error: anyhow::Error) -> Failure {
    Failure { code: EXIT_USAGE, error }
}

fn solver(error: anyhow::Error) -> Failure {
    Failure {
        code: EXIT_NOT_CONVERGED,
        error,
    }
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli, out) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.code
        }
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> std::result::Result<i32, Failure> {
    match &cli.command {
        Command::Solve(o) => solve(&setup(o)?, out),
        Command::GradCheck(o) => grad_check_command(&setup(o)?, out),
        Command::Scaling(o) => scaling(&setup(o)?, out),
        Command::ListBenchmarks => {
            list_benchmarks(out).map_err(usage)?;
            Ok(EXIT_OK)
        }
    }
}

fn setup(o: &Options) -> std::result::Result<Config, Failure> {
    let cfg = o.resolve().map_err(usage)?;
    if let Some(n) = cfg.threads {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(cfg)
}

fn load_benchmark(cfg: &Config) -> std::result::Result<(Benchmark, SwitchingTimes, NormalizedGrid), Failure> {
    let bench = builtin(cfg.benchmark_name().map_err(usage)?).map_err(|e| usage(e.into()))?;
    let times = cfg.times_or(&bench.initial_times);
    bench.problem.check_times(&times).map_err(|e| usage(e.into()))?;
    let grid = NormalizedGrid::new(bench.problem.modes(), cfg.nodes_per_mode()).map_err(|e| usage(e.into()))?;
    Ok((bench, times, grid))
}

fn termination_name(t: OuterTermination) -> &'static str {
    match t {
        OuterTermination::GapSmall => "gap-small",
        OuterTermination::StepSmall => "step-small",
        OuterTermination::MaxOuterIterations => "max-outer-iterations",
    }
}

/// Report for a finished solve. `wall_time_ms` is the last line.
pub fn solve_report(bench: &Benchmark, initial: &SwitchingTimes, cfg: &Config, r: &Ocs2Report) -> ReportFile {
    let s = cfg.ocs2_settings();
    let mut f = ReportFile::default();
    f.push("benchmark", &bench.name);
    f.push("converged", r.converged);
    f.push("termination", termination_name(r.termination));
    f.push("cost", r.optimal_cost);
    f.push("times", join_floats(r.optimal_times.as_slice()));
    f.push("outer_iterations", r.outer_iterations);
    f.push("function_calls", r.function_calls);
    f.push("inner_iterations", r.inner_iterations);
    f.push("gradient", join_floats(r.final_gradient.as_deref().unwrap_or(&[])));
    f.push("final_gap", r.final_gap.map_or("none".to_string(), |g| g.to_string()));
    f.push("cost_history", join_floats(&r.cost_history));
    if let Some(reference) = &bench.reference {
        f.push("reference_cost", reference.cost);
        f.push("reference_times", join_floats(reference.times.as_slice()));
    }
    f.push("initial_times", join_floats(initial.as_slice()));
    f.push("nodes_per_mode", cfg.nodes_per_mode());
    f.push("l_min", s.slq.l_min);
    f.push("max_iterations", s.slq.max_iterations);
    f.push("max_outer", s.max_outer_iterations);
    f.push("gap_tol", s.gap_tol);
    f.push("step_tol", s.step_tol);
    f.push("gammas", join_floats(&s.gammas));
    f.push("warm_start", s.warm_start);
    f.push("wall_time_ms", format!("{:.3}", r.wall_time.as_secs_f64() * 1e3));
    f
}

fn solve(cfg: &Config, out: &mut dyn Write) -> std::result::Result<i32, Failure> {
    let (bench, times, grid) = load_benchmark(cfg)?;
    let report = ocs2_solve(&bench.problem, &times, grid, &cfg.ocs2_settings()).map_err(|e| solver(e.into()))?;
    let dir = cfg.output_dir();
    let mut write = || -> Result<()> {
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let csv = std::fs::File::create(dir.join("trajectory.csv"))?;
        TrajectoryTable::from_trajectory(&report.optimal_trajectory).write(csv)?;
        std::fs::write(dir.join("report.txt"), solve_report(&bench, &times, cfg, &report).render())?;
        writeln!(
            out,
            "{}: J = {:.6} at t = [{}], {} outer iterations, {} function calls, {}",
            bench.name,
            report.optimal_cost,
            join_floats(report.optimal_times.as_slice()),
            report.outer_iterations,
            report.function_calls,
            if report.converged { "converged" } else { "not converged" }
        )?;
        writeln!(out, "wrote {}", dir.display())?;
        Ok(())
    };
    write().map_err(usage)?;
    Ok(if report.converged { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradRow {
    pub switch: usize,
    pub analytic: f64,
    pub oracle: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub rows: Vec<GradRow>,
    pub converged: bool,
}

impl GradCheck {
    /// Relative error with the denominator floored at `1e-4`.
    pub fn passes(&self, tolerance: f64) -> bool {
        self.converged && self.rows.iter().all(|r| r.rel_error <= tolerance)
    }
}

/// Analytic gradient against the reconverged finite-difference oracle.
pub fn grad_check(
    problem: &SwitchedProblem,
    times: &SwitchingTimes,
    grid: NormalizedGrid,
    slq: &SlqSettings,
    h: f64,
) -> switched_slq::Result<GradCheck> {
    let report = cold_solve(problem, times, grid, slq)?.report;
    let g = gradient(problem, times, &report, &GradientSettings::default())?;
    let fd = fd_gradient_oracle(problem, times, &report.final_policy, h, FdMode::Reconverged, &oracle_settings())?;
    let rows = g
        .values
        .iter()
        .zip(&fd)
        .enumerate()
        .map(|(j, (&analytic, &oracle))| GradRow {
            switch: j + 1,
            analytic,
            oracle,
            rel_error: (analytic - oracle).abs() / oracle.abs().max(1e-4),
        })
        .collect();
    Ok(GradCheck {
        rows,
        converged: g.converged,
    })
}

/// Inner settings of grad-check when none are given.
pub fn grad_check_defaults() -> SlqSettings {
    SlqSettings {
        l_min: 1e-6,
        max_iterations: 1000,
        ..SlqSettings::default()
    }
}

fn grad_check_command(cfg: &Config, out: &mut dyn Write) -> std::result::Result<i32, Failure> {
    let (bench, times, grid) = load_benchmark(cfg)?;
    let h = cfg.h.unwrap_or(DEFAULT_FD_STEP);
    let tolerance = cfg.tolerance.unwrap_or(DEFAULT_GRADIENT_TOLERANCE);
    if !(h > 0.0) {
        return Err(usage(anyhow!("--h must be positive")));
    }
    let check = grad_check(&bench.problem, &times, grid, &cfg.slq_settings(grad_check_defaults()), h)
        .map_err(|e| solver(e.into()))?;
    let mut print = || -> std::io::Result<()> {
        writeln!(out, "{} at t = [{}], h = {h}, tolerance = {tolerance}", bench.name, join_floats(times.as_slice()))?;
        writeln!(out, "{:>6}  {:>22}  {:>22}  {:>10}", "switch", "analytic", "oracle", "rel_error")?;
        for r in &check.rows {
            writeln!(out, "{:>6}  {:>22.14e}  {:>22.14e}  {:>10.3e}", r.switch, r.analytic, r.oracle, r.rel_error)?;
        }
        if !check.converged {
            writeln!(out, "inner solve did not converge")?;
        }
        Ok(())
    };
    print().map_err(|e| usage(e.into()))?;
    Ok(if check.passes(tolerance) { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

fn scaling(cfg: &Config, out: &mut dyn Write) -> std::result::Result<i32, Failure> {
    let (bench, times, _) = load_benchmark(cfg)?;
    let nodes = cfg.nodes.clone().unwrap_or_else(|| vec![100, 200, 400]);
    let slq = cfg.slq_settings(SlqSettings::default());
    let mut rows = Vec::new();
    for &n in &nodes {
        let grid = NormalizedGrid::new(bench.problem.modes(), n).map_err(|e| usage(e.into()))?;
        let mut best = f64::INFINITY;
        for _ in 0..3 {
            let start = Instant::now();
            cold_solve(&bench.problem, &times, grid, &slq).map_err(|e| solver(e.into()))?;
            best = best.min(start.elapsed().as_secs_f64() * 1e3);
        }
        rows.push((n, best));
    }
    let mut print = || -> std::io::Result<()> {
        writeln!(out, "{:>14}  {:>12}  {:>8}", "nodes_per_mode", "wall_ms", "ratio")?;
        for (k, (n, ms)) in rows.iter().enumerate() {
            let ratio = if k == 0 { "-".to_string() } else { format!("{:.3}", ms / rows[k - 1].1) };
            writeln!(out, "{n:>14}  {ms:>12.3}  {ratio:>8}")?;
        }
        Ok(())
    };
    print().map_err(|e| usage(e.into()))?;
    Ok(EXIT_OK)
}

fn list_benchmarks(out: &mut dyn Write) -> Result<()> {
    for name in BENCHMARK_NAMES {
        let b = builtin(name)?;
        let p = &b.problem;
        write!(
            out,
            "{name}: {} modes, {} states, {} inputs, horizon [{}, {}], initial times [{}]",
            p.modes(),
            p.state_dim(),
            p.input_dim(),
            p.t_start(),
            p.t_end(),
            join_floats(b.initial_times.as_slice())
        )?;
        if let Some(r) = &b.reference {
            write!(out, ", reference J = {} at [{}]", r.cost, join_floats(r.times.as_slice()))?;
        }
        writeln!(out)?;
    }
    Ok(())
}
