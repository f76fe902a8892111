//! Sequential linear-quadratic solver for fixed switching times.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lq::{linearize, symmetrize, LqModel, LqPoint};
use crate::ode::rk4_step_bounded;
use crate::problem::{ModeSamples, SwitchedProblem, SwitchingTimes};
use crate::rollout::{rollout, SlqPolicy, Trajectory};

/// Value-function coefficients and gains at every sample.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub s_mat: ModeSamples<DMatrix<f64>>,
    pub s_vec: ModeSamples<DVector<f64>>,
    /// Scalar part, which alone depends on `alpha`.
    pub s_scalar: ModeSamples<f64>,
    pub gain: ModeSamples<DMatrix<f64>>,
    pub feedforward: ModeSamples<DVector<f64>>,
    pub alpha: f64,
}

impl RiccatiSolution {
    /// Predicted cost `s(0)`.
    pub fn value_at_start(&self) -> f64 {
        *self.s_scalar.get(0, 0)
    }

    /// Recomputes only the scalar part for another step size.
    pub fn with_alpha(&self, model: &LqModel, alpha: f64) -> Self {
        RiccatiSolution {
            s_scalar: integrate_scalar(model, &self.feedforward, alpha),
            alpha,
            ..self.clone()
        }
    }

    /// Root mean square over grid nodes of `|l(z)|`.
    pub fn feedforward_rms(&self) -> f64 {
        let grid = self.feedforward.grid();
        let sum: f64 = self.feedforward.nodes().map(|l| l.norm_squared()).sum();
        (sum / grid.node_count() as f64).sqrt()
    }
}

/// `W = Q + A'S + SA - L'RL` and `w = q + A's - L'Rl` with the gains formed
/// from the supplied `S`, `s`.
pub(crate) fn riccati_rhs(pt: &LqPoint, s_mat: &DMatrix<f64>, s_vec: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let gain = pt.feedback_gain(s_mat);
    let ff = pt.feedforward(s_vec);
    let lt_r = gain.transpose() * &pt.r_mat;
    let at_s = pt.a.transpose() * s_mat;
    let w_mat = &pt.q_mat + &at_s + at_s.transpose() - &lt_r * &gain;
    let w_vec = &pt.q_vec + pt.a.transpose() * s_vec - lt_r * ff;
    (w_mat, w_vec)
}

fn all_finite(m: &DMatrix<f64>, v: &DVector<f64>) -> bool {
    m.iter().chain(v.iter()).all(|x| x.is_finite())
}

/// Backward pass of the matrix, vector and scalar Riccati equations. `S` and
/// the vector part are independent of `alpha`.
pub fn solve_riccati(model: &LqModel, alpha: f64) -> Result<RiccatiSolution> {
    let grid = model.grid();
    let nx = model.terminal.hessian.nrows();
    let n = grid.nodes_per_mode();
    let h = grid.step();
    let last = grid.samples_per_mode() - 1;
    let mut s_mat = ModeSamples::filled(grid, DMatrix::zeros(nx, nx));
    let mut s_vec = ModeSamples::filled(grid, DVector::zeros(nx));

    let mut sm = model.terminal.hessian.clone();
    let mut sv = model.terminal.gradient.clone();
    if !all_finite(&sm, &sv) {
        return Err(Error::RiccatiDiverged {
            node: grid.node_count() - 1,
        });
    }
    let pack = |s: &DMatrix<f64>, v: &DVector<f64>| {
        DVector::from_iterator(nx * nx + nx, s.iter().chain(v.iter()).copied())
    };
    let unpack = |y: &DVector<f64>| {
        (
            DMatrix::from_column_slice(nx, nx, &y.as_slice()[..nx * nx]),
            DVector::from_column_slice(&y.as_slice()[nx * nx..]),
        )
    };
    for m in (0..grid.modes()).rev() {
        let dur = model.durations[m];
        // dS/dz = -dur W
        let rhs = |pt: &LqPoint, y: &DVector<f64>| {
            let (s, v) = unpack(y);
            let (w_mat, w_vec) = riccati_rhs(pt, &s, &v);
            pack(&(w_mat * -dur), &(w_vec * -dur))
        };
        s_mat.set(m, last, sm.clone());
        s_vec.set(m, last, sv.clone());
        let mut y = pack(&sm, &sv);
        let mut k_a = rhs(model.points.get(m, last), &y);
        for k in (0..n).rev() {
            let (jm, jb) = (2 * k + 1, 2 * k);
            let mut f = |tau: f64, y: &DVector<f64>| rhs(&model.point_between(m, jb as f64 + 2.0 * tau), y);
            // the Jacobian of the pair is dS -> -(Acl' dS + dS Acl), s -> -Acl' s
            let mut bound = |tau: f64, y: &DVector<f64>| {
                let pt = model.point_between(m, jb as f64 + 2.0 * tau);
                let (s, _) = unpack(y);
                2.0 * dur * (&pt.a + &pt.b * pt.feedback_gain(&s)).norm()
            };
            let step = rk4_step_bounded(&mut f, &mut bound, -h, &y, &k_a);
            let (s_b, sv_b) = unpack(&step.end);
            let sm_b = symmetrize(&s_b);
            if !all_finite(&sm_b, &sv_b) {
                return Err(Error::RiccatiDiverged {
                    node: grid.global_node(m, jb),
                });
            }
            let y_b = pack(&sm_b, &sv_b);
            let k_b = rhs(model.points.get(m, jb), &y_b);
            let y_mid = step
                .mid
                .unwrap_or_else(|| (&y + &y_b) * 0.5 - (&k_a - &k_b) * (h / 8.0));
            let (mid_m, mid_v) = unpack(&y_mid);
            s_mat.set(m, jm, symmetrize(&mid_m));
            s_vec.set(m, jm, mid_v);
            s_mat.set(m, jb, sm_b);
            s_vec.set(m, jb, sv_b);
            y = y_b;
            k_a = k_b;
        }
        let (s_0, v_0) = unpack(&y);
        sm = s_0;
        sv = v_0;
    }

    let gain = ModeSamples::from_fn(grid, |m, j| model.points.get(m, j).feedback_gain(s_mat.get(m, j)));
    let feedforward = ModeSamples::from_fn(grid, |m, j| model.points.get(m, j).feedforward(s_vec.get(m, j)));
    let s_scalar = integrate_scalar(model, &feedforward, alpha);
    Ok(RiccatiSolution {
        s_mat,
        s_vec,
        s_scalar,
        gain,
        feedforward,
        alpha,
    })
}

/// `w = q - 0.5 alpha (2 - alpha) l'Rl`
pub(crate) fn scalar_rate(pt: &LqPoint, ff: &DVector<f64>, alpha: f64) -> f64 {
    pt.q - 0.5 * alpha * (2.0 - alpha) * ff.dot(&(&pt.r_mat * ff))
}

fn integrate_scalar(model: &LqModel, feedforward: &ModeSamples<DVector<f64>>, alpha: f64) -> ModeSamples<f64> {
    let grid = model.grid();
    let h = grid.step();
    let last = grid.samples_per_mode() - 1;
    let mut out = ModeSamples::filled(grid, 0.0);
    let mut s = model.terminal.value;
    for m in (0..grid.modes()).rev() {
        let dur = model.durations[m];
        let rate = |j: usize| dur * scalar_rate(model.points.get(m, j), feedforward.get(m, j), alpha);
        out.set(m, last, s);
        let mut da = rate(last);
        for k in (0..grid.nodes_per_mode()).rev() {
            let dm = rate(2 * k + 1);
            let db = rate(2 * k);
            let sb = s + h / 6.0 * (da + 4.0 * dm + db);
            out.set(m, 2 * k + 1, 0.5 * (s + sb) + h / 8.0 * (da - db));
            out.set(m, 2 * k, sb);
            s = sb;
            da = db;
        }
    }
    out
}

/// New policy around `nominal`: `u = u_nom + alpha l + L (x - x_nom)`.
pub fn update_policy(nominal: &Trajectory, riccati: &RiccatiSolution, alpha: f64) -> SlqPolicy {
    SlqPolicy {
        nominal_input: nominal.input.clone(),
        feedforward: riccati.feedforward.clone(),
        gain: riccati.gain.clone(),
        reference_state: nominal.state.clone(),
        alpha,
    }
}

/// Step sizes `1, shrink, shrink^2, ...`.
pub fn alpha_schedule(shrink: f64, depth: usize) -> Vec<f64> {
    (0..depth).map(|k| shrink.powi(k as i32)).collect()
}

/// Backtracking on the rollout cost. Returns the first step whose rollout is
/// strictly cheaper than the nominal, or `None` when no candidate improves.
pub fn line_search(
    problem: &SwitchedProblem,
    times: &SwitchingTimes,
    nominal: &Trajectory,
    riccati: &RiccatiSolution,
    alphas: &[f64],
) -> Result<Option<(f64, SlqPolicy, Trajectory)>> {
    let mut any_finite = false;
    for &alpha in alphas {
        let policy = update_policy(nominal, riccati, alpha);
        match rollout(problem, times, &policy) {
            Ok(traj) => {
                any_finite = true;
                if traj.cost < nominal.cost {
                    return Ok(Some((alpha, policy, traj)));
                }
            }
            Err(Error::RolloutDiverged { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    if any_finite || alphas.is_empty() {
        Ok(None)
    } else {
        Err(Error::LineSearchDiverged)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlqSettings {
    /// Convergence threshold on the RMS feedforward norm.
    pub l_min: f64,
    pub max_iterations: usize,
    pub line_search_shrink: f64,
    pub line_search_depth: usize,
}

impl Default for SlqSettings {
    fn default() -> Self {
        SlqSettings {
            l_min: 1e-3,
            max_iterations: 50,
            line_search_shrink: 0.5,
            line_search_depth: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    FeedforwardSmall,
    MaxIterations,
    LineSearchFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlqIteration {
    /// Rollout cost of the nominal the iteration started from.
    pub cost: f64,
    /// `s(0)` predicted for the accepted step (full step when none accepted).
    pub predicted_cost: f64,
    pub feedforward_rms: f64,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SlqReport {
    /// Accepted policy updates.
    pub iterations: usize,
    pub cost_history: Vec<f64>,
    pub log: Vec<SlqIteration>,
    pub final_policy: SlqPolicy,
    pub final_trajectory: Trajectory,
    /// LQ model and Riccati pass along the final trajectory.
    pub final_model: LqModel,
    pub final_riccati: RiccatiSolution,
    pub converged: bool,
    pub termination: Termination,
}

impl SlqReport {
    pub fn cost(&self) -> f64 {
        self.final_trajectory.cost
    }
}

/// Decrease still predicted by a full step below which a failed line search
/// counts as convergence, relative to `1 + |J|`.
const STALL_TOLERANCE: f64 = 1e-9;

pub fn slq_solve(
    problem: &SwitchedProblem,
    times: &SwitchingTimes,
    init_policy: &SlqPolicy,
    settings: &SlqSettings,
) -> Result<SlqReport> {
    let alphas = alpha_schedule(settings.line_search_shrink, settings.line_search_depth);
    let mut policy = init_policy.clone();
    let mut nominal = rollout(problem, times, &policy).map_err(|e| e.at_iteration(0))?;
    let mut cost_history = vec![nominal.cost];
    let mut log = Vec::new();
    let mut iterations = 0;
    loop {
        let model = linearize(problem, times, &nominal).map_err(|e| e.at_iteration(iterations))?;
        let riccati = solve_riccati(&model, 1.0).map_err(|e| e.at_iteration(iterations))?;
        let rms = riccati.feedforward_rms();
        let predicted_full = riccati.value_at_start();
        let finish = |termination, converged, log, cost_history, policy, nominal, model, riccati| SlqReport {
            iterations,
            cost_history,
            log,
            final_policy: policy,
            final_trajectory: nominal,
            final_model: model,
            final_riccati: riccati,
            converged,
            termination,
        };
        if rms < settings.l_min {
            log.push(SlqIteration {
                cost: nominal.cost,
                predicted_cost: predicted_full,
                feedforward_rms: rms,
                alpha: None,
            });
            return Ok(finish(
                Termination::FeedforwardSmall,
                true,
                log,
                cost_history,
                policy,
                nominal,
                model,
                riccati,
            ));
        }
        if iterations >= settings.max_iterations {
            log.push(SlqIteration {
                cost: nominal.cost,
                predicted_cost: predicted_full,
                feedforward_rms: rms,
                alpha: None,
            });
            return Ok(finish(
                Termination::MaxIterations,
                false,
                log,
                cost_history,
                policy,
                nominal,
                model,
                riccati,
            ));
        }
        match line_search(problem, times, &nominal, &riccati, &alphas).map_err(|e| e.at_iteration(iterations))? {
            Some((alpha, new_policy, traj)) => {
                let predicted = riccati.with_alpha(&model, alpha).value_at_start();
                log.push(SlqIteration {
                    cost: nominal.cost,
                    predicted_cost: predicted,
                    feedforward_rms: rms,
                    alpha: Some(alpha),
                });
                cost_history.push(traj.cost);
                policy = new_policy;
                nominal = traj;
                iterations += 1;
            }
            None => {
                let predicted_decrease = riccati.with_alpha(&model, 0.0).value_at_start() - predicted_full;
                let converged = predicted_decrease <= STALL_TOLERANCE * (1.0 + nominal.cost.abs());
                log.push(SlqIteration {
                    cost: nominal.cost,
                    predicted_cost: predicted_full,
                    feedforward_rms: rms,
                    alpha: None,
                });
                return Ok(finish(
                    Termination::LineSearchFailed,
                    converged,
                    log,
                    cost_history,
                    policy,
                    nominal,
                    model,
                    riccati,
                ));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{LinearSubsystem, QuadraticCost, QuadraticTerminal};
    use crate::problem::{NormalizedGrid, Subsystem};
    use crate::rollout::initial_controller;
    use std::sync::Arc;

    fn scalar_integrator(q: f64, q_f: f64, modes: usize) -> SwitchedProblem {
        let cost = QuadraticCost::new(
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
            DVector::zeros(1),
        );
        let sys: Arc<dyn Subsystem> = Arc::new(LinearSubsystem::new(
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 1.0),
            cost,
        ));
        SwitchedProblem::new(
            vec![sys; modes],
            Arc::new(QuadraticTerminal::new(DMatrix::from_element(1, 1, q_f), DVector::zeros(1))),
            0.0,
            1.0,
            DVector::from_element(1, 1.0),
        )
        .unwrap()
    }

    fn model_for(problem: &SwitchedProblem, times: &SwitchingTimes, n: usize) -> (LqModel, Trajectory) {
        let grid = NormalizedGrid::new(problem.modes(), n).unwrap();
        let policy = SlqPolicy::constant_input(grid, problem.state_dim(), &DVector::zeros(problem.input_dim()));
        let traj = rollout(problem, times, &policy).unwrap();
        (linearize(problem, times, &traj).unwrap(), traj)
    }

    #[test]
    fn scalar_riccati_closed_form() {
        // S(z) = 1 / (1 + (1 - z)) for x' = u, R = 1, Q_f = 1
        let p = scalar_integrator(0.0, 1.0, 1);
        let (model, _) = model_for(&p, &SwitchingTimes::new(vec![]), 200);
        let sol = solve_riccati(&model, 1.0).unwrap();
        let grid = model.grid();
        for j in 0..grid.samples_per_mode() {
            let z = grid.sample_z(0, j);
            assert!((sol.s_mat.get(0, j)[(0, 0)] - 1.0 / (2.0 - z)).abs() < 1e-9);
        }
        assert!((sol.s_mat.get(0, 0)[(0, 0)] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn zero_dynamics_keep_terminal_weight() {
        let cost = QuadraticCost::new(
            DMatrix::zeros(2, 2),
            DMatrix::identity(1, 1),
            DVector::zeros(2),
            DVector::zeros(1),
        );
        let sys: Arc<dyn Subsystem> = Arc::new(LinearSubsystem::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 1), cost));
        let q_f = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let p = SwitchedProblem::new(
            vec![sys.clone(), sys],
            Arc::new(QuadraticTerminal::new(q_f.clone(), DVector::zeros(2))),
            0.0,
            2.0,
            DVector::zeros(2),
        )
        .unwrap();
        let (model, _) = model_for(&p, &p.uniform_times(), 20);
        let sol = solve_riccati(&model, 1.0).unwrap();
        for s in sol.s_mat.iter() {
            assert_eq!(*s, q_f);
        }
        assert!(sol.feedforward.iter().all(|l| l.amax() == 0.0));
        assert!(sol.gain.iter().all(|l| l.amax() == 0.0));
    }

    #[test]
    fn zero_duration_mode_is_flat() {
        let p = scalar_integrator(1.0, 1.0, 3);
        let times = SwitchingTimes::new(vec![0.4, 0.4]);
        let (model, _) = model_for(&p, &times, 30);
        let sol = solve_riccati(&model, 1.0).unwrap();
        let first = sol.s_mat.get(1, 0).clone();
        for j in 0..model.grid().samples_per_mode() {
            assert_eq!(*sol.s_mat.get(1, j), first);
        }
    }

    #[test]
    fn matrix_and_vector_parts_ignore_alpha() {
        let p = scalar_integrator(1.0, 2.0, 2);
        let (model, _) = model_for(&p, &SwitchingTimes::new(vec![0.3]), 40);
        let a = solve_riccati(&model, 0.5).unwrap();
        let b = solve_riccati(&model, 1.0).unwrap();
        assert_eq!(a.s_mat, b.s_mat);
        assert_eq!(a.s_vec, b.s_vec);
        assert_ne!(a.value_at_start(), b.value_at_start());
        let c = a.with_alpha(&model, 1.0);
        assert_eq!(c.s_scalar, b.s_scalar);
    }

    #[test]
    fn zero_feedforward_policy_replays_nominal() {
        let p = scalar_integrator(1.0, 1.0, 2);
        let times = SwitchingTimes::new(vec![0.6]);
        let grid = NormalizedGrid::new(2, 50).unwrap();
        let ops = vec![(DVector::from_element(1, 0.5), DVector::from_element(1, -0.2)); 2];
        let policy = initial_controller(&p, &times, &ops, grid).unwrap();
        let nominal = rollout(&p, &times, &policy).unwrap();
        let model = linearize(&p, &times, &nominal).unwrap();
        let mut riccati = solve_riccati(&model, 1.0).unwrap();
        riccati.gain = policy.gain.clone();
        riccati.feedforward = ModeSamples::filled(grid, DVector::zeros(1));
        let replay = rollout(&p, &times, &update_policy(&nominal, &riccati, 1.0)).unwrap();
        for (a, b) in replay.x_nodes().iter().zip(nominal.x_nodes()) {
            assert!((a - b).amax() <= 1e-12);
        }
    }

    #[test]
    fn full_step_open_loop_applies_feedforward() {
        let p = scalar_integrator(1.0, 1.0, 1);
        let times = SwitchingTimes::new(vec![]);
        let (model, nominal) = model_for(&p, &times, 10);
        let mut riccati = solve_riccati(&model, 1.0).unwrap();
        let grid = model.grid();
        riccati.gain = ModeSamples::filled(grid, DMatrix::zeros(1, 1));
        riccati.feedforward = ModeSamples::filled(grid, DVector::from_element(1, 0.25));
        let policy = update_policy(&nominal, &riccati, 1.0);
        for j in 0..grid.samples_per_mode() {
            assert_eq!(policy.input(0, j, &DVector::from_element(1, 7.0))[0], 0.25);
        }
    }

    #[test]
    fn lq_problem_line_search_takes_full_step() {
        let p = scalar_integrator(1.0, 1.0, 1);
        let times = SwitchingTimes::new(vec![]);
        let (model, nominal) = model_for(&p, &times, 100);
        let riccati = solve_riccati(&model, 1.0).unwrap();
        let (alpha, _, traj) = line_search(&p, &times, &nominal, &riccati, &alpha_schedule(0.5, 10))
            .unwrap()
            .unwrap();
        assert_eq!(alpha, 1.0);
        assert!((traj.cost - riccati.value_at_start()).abs() < 1e-8 * traj.cost);
    }

    #[test]
    fn optimal_nominal_admits_no_strict_decrease() {
        let p = scalar_integrator(1.0, 1.0, 1);
        let times = SwitchingTimes::new(vec![]);
        let grid = NormalizedGrid::new(1, 100).unwrap();
        let init = SlqPolicy::constant_input(grid, 1, &DVector::zeros(1));
        let settings = SlqSettings {
            l_min: 0.0,
            ..SlqSettings::default()
        };
        let report = slq_solve(&p, &times, &init, &settings).unwrap();
        assert_eq!(report.termination, Termination::LineSearchFailed);
        assert!(report.converged);
        assert_eq!(report.iterations, 1);
    }

    #[test]
    fn cost_history_is_monotone() {
        let p = scalar_integrator(1.0, 1.0, 3);
        let times = SwitchingTimes::new(vec![0.2, 0.7]);
        let grid = NormalizedGrid::new(3, 50).unwrap();
        let init = SlqPolicy::constant_input(grid, 1, &DVector::from_element(1, 2.0));
        let report = slq_solve(&p, &times, &init, &SlqSettings::default()).unwrap();
        assert!(report.converged);
        for w in report.cost_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }
}
