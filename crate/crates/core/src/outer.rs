//! Outer loop over the switching times: inner SLQ solves alternate with
//! Frank-Wolfe steps over the ordered-times polytope, warm-started from a bag
//! of earlier solutions.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::gradient::{gradient, GradientSettings};
use crate::problem::{polytope_vertices, NormalizedGrid, SwitchedProblem, SwitchingTimes};
use crate::rollout::{default_operating_points, initial_controller, initial_controller_with_feedforward, SlqPolicy, Trajectory};
use crate::slq::{slq_solve, SlqReport, SlqSettings};

#[derive(Debug, Clone)]
pub struct SolutionBagEntry {
    pub times: SwitchingTimes,
    pub policy: SlqPolicy,
    pub cost: f64,
}

/// Converged inner solutions keyed by their switching times.
#[derive(Debug, Clone, Default)]
pub struct SolutionBag {
    entries: Vec<SolutionBagEntry>,
}

impl SolutionBag {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, times: SwitchingTimes, policy: SlqPolicy, cost: f64) {
        self.entries.push(SolutionBagEntry { times, policy, cost });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[SolutionBagEntry] {
        &self.entries
    }

    /// Entry with the smallest sum of squared time differences to `times`;
    /// ties go to the lower cost, then to the earlier insertion.
    pub fn warm_start_lookup(&self, times: &SwitchingTimes) -> Option<&SolutionBagEntry> {
        let mut best: Option<(&SolutionBagEntry, f64)> = None;
        for e in &self.entries {
            let d = e.times.squared_distance(times);
            best = match best {
                Some((b, bd)) if bd < d || (bd == d && b.cost <= e.cost) => Some((b, bd)),
                _ => Some((e, d)),
            };
        }
        best.map(|(e, _)| e)
    }
}

/// Polytope vertex minimizing `<gradient, v>`, lowest index on ties.
pub fn fw_linear_minimizer(gradient: &[f64], modes: usize, t_start: f64, t_end: f64) -> Result<SwitchingTimes> {
    if gradient.len() + 1 != modes {
        return Err(Error::Dimension(format!(
            "gradient has {} entries for {modes} modes",
            gradient.len()
        )));
    }
    let mut best: Option<(SwitchingTimes, f64)> = None;
    for v in polytope_vertices(modes, t_start, t_end) {
        let score: f64 = v.as_slice().iter().zip(gradient).map(|(a, b)| a * b).sum();
        if best.as_ref().is_none_or(|(_, s)| score < *s) {
            best = Some((v, score));
        }
    }
    Ok(best.expect("a polytope has at least one vertex").0)
}

/// `(1 - gamma) times + gamma vertex`, clamped to the horizon.
pub fn fw_candidate(times: &SwitchingTimes, vertex: &SwitchingTimes, gamma: f64, t_start: f64, t_end: f64) -> SwitchingTimes {
    SwitchingTimes::new(
        times
            .as_slice()
            .iter()
            .zip(vertex.as_slice())
            .map(|(t, v)| ((1.0 - gamma) * t + gamma * v).clamp(t_start, t_end))
            .collect(),
    )
}

/// One evaluated step-size candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateRecord {
    pub gamma: f64,
    pub times: SwitchingTimes,
    pub cost: Option<f64>,
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug)]
pub struct FwStep<T> {
    /// Accepted step size, times and evaluation, if any candidate improved.
    pub accepted: Option<(f64, SwitchingTimes, T)>,
    pub function_calls: usize,
    pub candidates: Vec<CandidateRecord>,
}

/// Outcome of evaluating the cost at a candidate.
#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    pub cost: f64,
    pub converged: bool,
    pub value: T,
}

/// Backtracking over `gammas`: returns the first candidate whose evaluation
/// converged to a cost strictly below `current_cost`. Failed evaluations
/// are recorded and skipped. Each call of `eval` is one function call.
pub fn fw_step<T>(
    times: &SwitchingTimes,
    vertex: &SwitchingTimes,
    current_cost: f64,
    gammas: &[f64],
    (t_start, t_end): (f64, f64),
    mut eval: impl FnMut(&SwitchingTimes) -> Result<Evaluation<T>>,
) -> FwStep<T> {
    let mut out = FwStep {
        accepted: None,
        function_calls: 0,
        candidates: Vec::new(),
    };
    if times == vertex {
        return out;
    }
    for &gamma in gammas {
        let cand = fw_candidate(times, vertex, gamma, t_start, t_end);
        out.function_calls += 1;
        match eval(&cand) {
            Ok(e) => {
                out.candidates.push(CandidateRecord {
                    gamma,
                    times: cand.clone(),
                    cost: Some(e.cost),
                    converged: e.converged,
                    error: None,
                });
                if e.converged && e.cost < current_cost {
                    out.accepted = Some((gamma, cand, e.value));
                    return out;
                }
            }
            Err(err) => out.candidates.push(CandidateRecord {
                gamma,
                times: cand,
                cost: None,
                converged: false,
                error: Some(err.to_string()),
            }),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ocs2Settings {
    /// Stop when the Frank-Wolfe gap is at most `gap_tol (1 + |J|)`.
    pub gap_tol: f64,
    /// Stop when an outer step moves no time by more than this.
    pub step_tol: f64,
    pub max_outer_iterations: usize,
    pub gammas: Vec<f64>,
    pub warm_start: bool,
    pub slq: SlqSettings,
    pub gradient: GradientSettings,
}

impl Default for Ocs2Settings {
    fn default() -> Self {
        Ocs2Settings {
            gap_tol: 1e-3,
            step_tol: 1e-4,
            max_outer_iterations: 30,
            gammas: vec![1.0, 0.5, 0.25, 0.125, 0.0625],
            warm_start: true,
            slq: SlqSettings::default(),
            gradient: GradientSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OuterTermination {
    GapSmall,
    StepSmall,
    MaxOuterIterations,
}

/// One outer iteration: the point it started from and what it did.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterIteration {
    pub times: SwitchingTimes,
    pub cost: f64,
    pub gradient: Vec<f64>,
    pub vertex: SwitchingTimes,
    pub gap: f64,
    pub gamma: Option<f64>,
    pub candidates: Vec<CandidateRecord>,
}

#[derive(Debug, Clone)]
pub struct Ocs2Report {
    pub optimal_times: SwitchingTimes,
    pub optimal_policy: SlqPolicy,
    pub optimal_trajectory: Trajectory,
    pub optimal_cost: f64,
    pub outer_iterations: usize,
    /// Inner SLQ solves, including rejected candidates and cold-start retries.
    pub function_calls: usize,
    /// Accepted SLQ policy updates summed over every inner solve.
    pub inner_iterations: usize,
    /// Cost history of every inner solve, in the order they ran.
    pub inner_cost_histories: Vec<Vec<f64>>,
    pub gradient_history: Vec<Vec<f64>>,
    pub cost_history: Vec<f64>,
    pub times_history: Vec<SwitchingTimes>,
    pub log: Vec<OuterIteration>,
    pub final_gradient: Option<Vec<f64>>,
    /// Frank-Wolfe gap at the last gradient evaluation.
    pub final_gap: Option<f64>,
    pub converged: bool,
    pub termination: OuterTermination,
    pub wall_time: Duration,
}

/// Result of [`cold_solve`].
#[derive(Debug, Clone)]
pub struct ColdSolve {
    pub report: SlqReport,
    /// SLQ solves run, one or two.
    pub solves: usize,
    /// Accepted policy updates summed over those solves.
    pub iterations: usize,
    pub cost_histories: Vec<Vec<f64>>,
}

/// Solve from the default operating-point controller, retrying with its
/// feedforward kept when the first solve does not converge. A converged
/// result is preferred, then the lower cost.
pub fn cold_solve(
    problem: &SwitchedProblem,
    times: &SwitchingTimes,
    grid: NormalizedGrid,
    settings: &SlqSettings,
) -> Result<ColdSolve> {
    let ops = default_operating_points(problem);
    let first = initial_controller(problem, times, &ops, grid).and_then(|p| slq_solve(problem, times, &p, settings));
    if let Ok(r) = &first {
        if r.converged {
            let (iterations, cost_histories) = (r.iterations, vec![r.cost_history.clone()]);
            return Ok(ColdSolve {
                report: first.unwrap(),
                solves: 1,
                iterations,
                cost_histories,
            });
        }
    }
    let second =
        initial_controller_with_feedforward(problem, times, &ops, grid).and_then(|p| slq_solve(problem, times, &p, settings));
    let ran: Vec<&SlqReport> = first.iter().chain(second.iter()).collect();
    let iterations = ran.iter().map(|r| r.iterations).sum();
    let cost_histories = ran.iter().map(|r| r.cost_history.clone()).collect();
    let report = match (first, second) {
        (Ok(a), Ok(b)) => {
            if b.converged && !a.converged || (b.converged == a.converged && b.cost() < a.cost()) {
                b
            } else {
                a
            }
        }
        (Ok(a), Err(_)) => a,
        (Err(_), Ok(b)) => b,
        (Err(e), Err(_)) => return Err(e),
    };
    Ok(ColdSolve {
        report,
        solves: 2,
        iterations,
        cost_histories,
    })
}

pub fn ocs2_solve(
    problem: &SwitchedProblem,
    initial_times: &SwitchingTimes,
    grid: NormalizedGrid,
    settings: &Ocs2Settings,
) -> Result<Ocs2Report> {
    let start = Instant::now();
    problem.check_times(initial_times)?;
    if grid.modes() != problem.modes() {
        return Err(Error::Dimension(format!(
            "grid has {} modes, problem has {}",
            grid.modes(),
            problem.modes()
        )));
    }
    let (t0, tf) = (problem.t_start(), problem.t_end());
    let mut bag = SolutionBag::new();
    let cold = cold_solve(problem, initial_times, grid, &settings.slq).map_err(|e| e.at_outer(0))?;
    let mut report = cold.report;
    let mut function_calls = cold.solves;
    let mut inner_iterations = cold.iterations;
    let mut inner_cost_histories = cold.cost_histories;
    let mut times = initial_times.clone();
    if report.converged {
        bag.insert(times.clone(), report.final_policy.clone(), report.cost());
    }
    let mut cost_history = vec![report.cost()];
    let mut times_history = vec![times.clone()];
    let mut gradient_history = Vec::new();
    let mut log = Vec::new();
    let mut outer_iterations = 0;
    let mut final_gradient = None;
    let mut final_gap = None;
    let termination = loop {
        if outer_iterations >= settings.max_outer_iterations {
            break OuterTermination::MaxOuterIterations;
        }
        outer_iterations += 1;
        let k = outer_iterations;
        let g = gradient(problem, &times, &report, &settings.gradient).map_err(|e| e.at_outer(k))?;
        gradient_history.push(g.values.clone());
        final_gradient = Some(g.values.clone());
        let vertex = fw_linear_minimizer(&g.values, problem.modes(), t0, tf).map_err(|e| e.at_outer(k))?;
        let gap: f64 = g
            .values
            .iter()
            .zip(times.as_slice().iter().zip(vertex.as_slice()))
            .map(|(gi, (t, v))| gi * (t - v))
            .sum();
        final_gap = Some(gap);
        let cost = report.cost();
        let mut entry = OuterIteration {
            times: times.clone(),
            cost,
            gradient: g.values,
            vertex: vertex.clone(),
            gap,
            gamma: None,
            candidates: Vec::new(),
        };
        if gap <= settings.gap_tol * (1.0 + cost.abs()) {
            log.push(entry);
            break OuterTermination::GapSmall;
        }
        let mut eval = |cand: &SwitchingTimes| -> Result<Evaluation<SlqReport>> {
            let warm = if settings.warm_start {
                bag.warm_start_lookup(cand).map(|e| e.policy.clone())
            } else {
                None
            };
            let r = match warm {
                Some(policy) => {
                    let r = slq_solve(problem, cand, &policy, &settings.slq)?;
                    inner_iterations += r.iterations;
                    inner_cost_histories.push(r.cost_history.clone());
                    r
                }
                None => {
                    let cold = cold_solve(problem, cand, grid, &settings.slq)?;
                    inner_iterations += cold.iterations;
                    function_calls += cold.solves - 1;
                    inner_cost_histories.extend(cold.cost_histories);
                    cold.report
                }
            };
            if r.converged {
                bag.insert(cand.clone(), r.final_policy.clone(), r.cost());
            }
            Ok(Evaluation {
                cost: r.cost(),
                converged: r.converged,
                value: r,
            })
        };
        let step = fw_step(&times, &vertex, cost, &settings.gammas, (t0, tf), &mut eval);
        function_calls += step.function_calls;
        entry.candidates = step.candidates;
        let moved = match step.accepted {
            Some((gamma, new_times, new_report)) => {
                entry.gamma = Some(gamma);
                let moved = new_times.max_abs_difference(&times);
                times = new_times;
                report = new_report;
                cost_history.push(report.cost());
                times_history.push(times.clone());
                moved
            }
            None => 0.0,
        };
        log.push(entry);
        if moved <= settings.step_tol {
            break OuterTermination::StepSmall;
        }
    };
    Ok(Ocs2Report {
        optimal_cost: report.cost(),
        optimal_policy: report.final_policy,
        optimal_trajectory: report.final_trajectory,
        optimal_times: times,
        outer_iterations,
        function_calls,
        inner_iterations,
        inner_cost_histories,
        gradient_history,
        cost_history,
        times_history,
        log,
        final_gradient,
        final_gap,
        converged: termination != OuterTermination::MaxOuterIterations,
        termination,
        wall_time: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmarks::builtin;
    use crate::models::{LinearSubsystem, QuadraticCost, QuadraticTerminal};
    use crate::problem::Subsystem;
    use nalgebra::{DMatrix, DVector};
    use std::sync::{Arc, OnceLock};

    fn t(v: &[f64]) -> SwitchingTimes {
        SwitchingTimes::new(v.to_vec())
    }

    fn bag_of(entries: &[(&[f64], f64)]) -> SolutionBag {
        let grid = NormalizedGrid::new(3, 2).unwrap();
        let mut bag = SolutionBag::new();
        for (times, cost) in entries {
            bag.insert(t(times), SlqPolicy::constant_input(grid, 1, &DVector::zeros(1)), *cost);
        }
        bag
    }

    #[test]
    fn lookup_in_empty_bag_is_none() {
        assert!(SolutionBag::new().warm_start_lookup(&t(&[1.0, 2.0])).is_none());
    }

    #[test]
    fn lookup_examples() {
        let bag = bag_of(&[(&[1.0, 2.0], 5.0)]);
        assert_eq!(bag.warm_start_lookup(&t(&[1.1, 2.0])).unwrap().times, t(&[1.0, 2.0]));
        let bag = bag_of(&[(&[1.0, 2.0], 5.0), (&[1.0, 2.0], 4.0)]);
        assert_eq!(bag.warm_start_lookup(&t(&[1.0, 2.0])).unwrap().cost, 4.0);
        let bag = bag_of(&[(&[0.5, 1.0], 1.0), (&[1.0, 2.5], 9.0)]);
        assert_eq!(bag.warm_start_lookup(&t(&[0.9, 2.4])).unwrap().times, t(&[1.0, 2.5]));
    }

    #[test]
    fn lookup_ties_keep_first_insertion() {
        let bag = bag_of(&[(&[1.0, 2.0], 3.0), (&[1.0, 2.0], 3.0)]);
        let e = bag.warm_start_lookup(&t(&[1.0, 2.0])).unwrap();
        assert!(std::ptr::eq(e, &bag.entries()[0]));
    }

    #[test]
    fn linear_minimizer_examples() {
        assert_eq!(fw_linear_minimizer(&[1.0, -1.0], 3, 0.0, 3.0).unwrap(), t(&[0.0, 3.0]));
        assert_eq!(fw_linear_minimizer(&[-1.0, -1.0], 3, 0.0, 3.0).unwrap(), t(&[3.0, 3.0]));
        assert_eq!(fw_linear_minimizer(&[0.0, 0.0], 3, 0.0, 3.0).unwrap(), t(&[3.0, 3.0]));
        assert!(fw_linear_minimizer(&[0.0], 3, 0.0, 3.0).is_err());
    }

    fn quadratic_eval(target: f64) -> impl FnMut(&SwitchingTimes) -> Result<Evaluation<()>> {
        move |c: &SwitchingTimes| {
            Ok(Evaluation {
                cost: (c.as_slice()[0] - target).powi(2),
                converged: true,
                value: (),
            })
        }
    }

    #[test]
    fn step_towards_own_vertex_does_nothing() {
        let step = fw_step(&t(&[0.0]), &t(&[0.0]), 1.0, &Ocs2Settings::default().gammas, (0.0, 2.0), quadratic_eval(0.5));
        assert!(step.accepted.is_none());
        assert_eq!(step.function_calls, 0);
    }

    #[test]
    fn step_accepts_first_improving_gamma() {
        // from t = 1 towards 0 only t = 0.75 beats J(1) = 0.0625
        let step = fw_step(&t(&[1.0]), &t(&[0.0]), 0.0625, &Ocs2Settings::default().gammas, (0.0, 2.0), quadratic_eval(0.75));
        let (gamma, times, _) = step.accepted.unwrap();
        assert_eq!(gamma, 0.25);
        assert_eq!(times, t(&[0.75]));
        assert_eq!(step.function_calls, 3);
    }

    #[test]
    fn step_skips_failures_and_unconverged_candidates() {
        let mut calls = 0;
        let eval = |c: &SwitchingTimes| {
            calls += 1;
            match calls {
                1 => Err(Error::LineSearchDiverged),
                2 => Ok(Evaluation {
                    cost: -1.0,
                    converged: false,
                    value: (),
                }),
                _ => Ok(Evaluation {
                    cost: c.as_slice()[0],
                    converged: true,
                    value: (),
                }),
            }
        };
        let step = fw_step(&t(&[1.0]), &t(&[0.0]), 1.0, &[1.0, 0.5, 0.25], (0.0, 2.0), eval);
        assert_eq!(step.accepted.unwrap().0, 0.25);
        assert_eq!(step.function_calls, 3);
        assert!(step.candidates[0].error.is_some());
        assert!(!step.candidates[1].converged);
    }

    #[test]
    fn candidates_stay_ordered() {
        let c = fw_candidate(&t(&[0.3, 0.3, 2.9]), &t(&[0.0, 3.0, 3.0]), 0.0625, 0.0, 3.0);
        assert!(c.in_polytope(0.0, 3.0));
    }

    fn identical_modes() -> SwitchedProblem {
        let cost = QuadraticCost::new(
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DVector::zeros(1),
        );
        let sys: Arc<dyn Subsystem> = Arc::new(LinearSubsystem::new(
            DMatrix::from_element(1, 1, -0.5),
            DMatrix::identity(1, 1),
            cost,
        ));
        SwitchedProblem::new(
            vec![sys; 3],
            Arc::new(QuadraticTerminal::new(DMatrix::identity(1, 1), DVector::zeros(1))),
            0.0,
            3.0,
            DVector::from_element(1, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn identical_modes_stop_after_one_iteration() {
        let p = identical_modes();
        let grid = NormalizedGrid::new(3, 50).unwrap();
        let r = ocs2_solve(&p, &t(&[1.0, 2.0]), grid, &Ocs2Settings::default()).unwrap();
        assert_eq!(r.outer_iterations, 1);
        assert_eq!(r.termination, OuterTermination::GapSmall);
        assert_eq!(r.optimal_times, t(&[1.0, 2.0]));
        assert!(r.final_gradient.unwrap().iter().all(|g| g.abs() < 1e-8));
    }

    #[test]
    fn zero_outer_iterations_is_not_converged() {
        let p = identical_modes();
        let grid = NormalizedGrid::new(3, 20).unwrap();
        let settings = Ocs2Settings {
            max_outer_iterations: 0,
            ..Ocs2Settings::default()
        };
        let r = ocs2_solve(&p, &t(&[1.0, 2.0]), grid, &settings).unwrap();
        assert!(!r.converged);
        assert_eq!(r.outer_iterations, 0);
        assert_eq!(r.function_calls, 1);
    }

    #[test]
    fn rejects_infeasible_start() {
        let p = identical_modes();
        let grid = NormalizedGrid::new(3, 20).unwrap();
        let err = ocs2_solve(&p, &t(&[2.0, 1.0]), grid, &Ocs2Settings::default()).unwrap_err();
        assert!(matches!(err, Error::NotInPolytope { .. }));
    }

    fn ex1_run() -> &'static Ocs2Report {
        static RUN: OnceLock<Ocs2Report> = OnceLock::new();
        RUN.get_or_init(|| {
            let b = builtin("ex1").unwrap();
            let grid = NormalizedGrid::new(3, 200).unwrap();
            ocs2_solve(&b.problem, &b.initial_times, grid, &Ocs2Settings::default()).unwrap()
        })
    }

    #[test]
    fn first_example_descends_monotonically_inside_the_polytope() {
        let r = ex1_run();
        assert!(r.cost_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.cost_history[1] < r.cost_history[0]);
        assert!(r.log[0].gamma.is_some());
        assert!(r.times_history.iter().all(|t| t.in_polytope(0.0, 3.0)));
        for it in &r.log {
            assert!(it.candidates.iter().all(|c| c.times.in_polytope(0.0, 3.0)));
        }
        assert!(r.function_calls >= r.outer_iterations);
    }

    #[test]
    fn runs_are_deterministic() {
        let b = builtin("ex1").unwrap();
        let grid = NormalizedGrid::new(3, 200).unwrap();
        let again = ocs2_solve(&b.problem, &b.initial_times, grid, &Ocs2Settings::default()).unwrap();
        let first = ex1_run();
        assert_eq!(again.cost_history, first.cost_history);
        assert_eq!(again.times_history, first.times_history);
        assert_eq!(again.gradient_history, first.gradient_history);
        assert_eq!(again.function_calls, first.function_calls);
    }

    #[test]
    fn warm_start_needs_no_more_inner_iterations() {
        let b = builtin("ex1").unwrap();
        let grid = NormalizedGrid::new(3, 200).unwrap();
        let cold = Ocs2Settings {
            warm_start: false,
            ..Ocs2Settings::default()
        };
        let without = ocs2_solve(&b.problem, &b.initial_times, grid, &cold).unwrap();
        assert!(ex1_run().inner_iterations <= without.inner_iterations);
    }
}
