//! Forward simulation of the normalized-time system under a feedback policy.
//!
//! Each mode is integrated with RK4 on the uniform `z` grid, bisecting only
//! steps flagged as stiff. The running cost rides
//! along as an extra state, so the reported cost carries RK4 accuracy. Step
//! midpoints are filled in by cubic Hermite interpolation so that downstream
//! RK4 passes find their stage coefficients at stored samples.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lq::{LqModel, LqPoint};
use crate::ode::{rk4_step, rk4_step_bounded};
use crate::problem::{ModeSamples, NormalizedGrid, SwitchedProblem, SwitchingTimes};
use crate::slq::solve_riccati;

/// Rollouts abort once any state component exceeds this magnitude.
pub const DIVERGENCE_BOUND: f64 = 1e8;

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: SwitchingTimes,
    pub t_start: f64,
    pub durations: Vec<f64>,
    pub state: ModeSamples<DVector<f64>>,
    pub input: ModeSamples<DVector<f64>>,
    pub cost: f64,
}

impl Trajectory {
    pub fn grid(&self) -> NormalizedGrid {
        self.state.grid()
    }

    pub fn z_nodes(&self) -> Vec<f64> {
        self.grid().z_nodes()
    }

    pub fn t_nodes(&self) -> Vec<f64> {
        let grid = self.grid();
        let mut starts = Vec::with_capacity(self.durations.len());
        let mut acc = self.t_start;
        for d in &self.durations {
            starts.push(acc);
            acc += d;
        }
        (0..grid.node_count())
            .map(|k| {
                let (m, j) = grid.node_sample(k);
                starts[m] + self.durations[m] * (j as f64 / (2 * grid.nodes_per_mode()) as f64)
            })
            .collect()
    }

    pub fn x_nodes(&self) -> Vec<DVector<f64>> {
        self.state.nodes().cloned().collect()
    }

    pub fn u_nodes(&self) -> Vec<DVector<f64>> {
        self.input.nodes().cloned().collect()
    }

    pub fn final_state(&self) -> &DVector<f64> {
        let grid = self.grid();
        self.state.get(grid.modes() - 1, grid.samples_per_mode() - 1)
    }
}

/// Affine feedback policy `u = u_nom + alpha * l + L (x - x_ref)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlqPolicy {
    pub nominal_input: ModeSamples<DVector<f64>>,
    pub feedforward: ModeSamples<DVector<f64>>,
    pub gain: ModeSamples<DMatrix<f64>>,
    pub reference_state: ModeSamples<DVector<f64>>,
    pub alpha: f64,
}

impl SlqPolicy {
    /// Open-loop constant input, no feedback.
    pub fn constant_input(grid: NormalizedGrid, state_dim: usize, u: &DVector<f64>) -> Self {
        let nu = u.len();
        SlqPolicy {
            nominal_input: ModeSamples::filled(grid, u.clone()),
            feedforward: ModeSamples::filled(grid, DVector::zeros(nu)),
            gain: ModeSamples::filled(grid, DMatrix::zeros(nu, state_dim)),
            reference_state: ModeSamples::filled(grid, DVector::zeros(state_dim)),
            alpha: 0.0,
        }
    }

    pub fn grid(&self) -> NormalizedGrid {
        self.nominal_input.grid()
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    /// Policy output at a stored sample.
    pub fn input(&self, mode: usize, sample: usize, x: &DVector<f64>) -> DVector<f64> {
        let mut u = self.nominal_input.get(mode, sample).clone();
        if self.alpha != 0.0 {
            u.axpy(self.alpha, self.feedforward.get(mode, sample), 1.0);
        }
        let dx = x - self.reference_state.get(mode, sample);
        u += self.gain.get(mode, sample) * dx;
        u
    }

    /// Policy output at a fractional sample position of `mode`, linear
    /// between the neighbouring samples.
    pub fn input_between(&self, mode: usize, position: f64, x: &DVector<f64>) -> DVector<f64> {
        let last = self.grid().samples_per_mode() - 1;
        let lo = (position.floor().max(0.0) as usize).min(last);
        let w = position - lo as f64;
        if w <= 0.0 || lo == last {
            return self.input(mode, lo, x);
        }
        self.input(mode, lo, x) * (1.0 - w) + self.input(mode, lo + 1, x) * w
    }

    /// Feedback gain at a fractional sample position of `mode`.
    pub fn gain_between(&self, mode: usize, position: f64) -> DMatrix<f64> {
        let last = self.grid().samples_per_mode() - 1;
        let lo = (position.floor().max(0.0) as usize).min(last);
        let w = position - lo as f64;
        if w <= 0.0 || lo == last {
            return self.gain.get(mode, lo).clone();
        }
        self.gain.get(mode, lo) * (1.0 - w) + self.gain.get(mode, lo + 1) * w
    }

    /// Policy output at arbitrary `z`, linearly interpolating the stored
    /// samples of the mode that owns `z` (left-closed at switches).
    pub fn evaluate(&self, z: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let grid = self.grid();
        let modes = grid.modes();
        if !(0.0..=modes as f64).contains(&z) {
            return Err(Error::Domain { z, modes });
        }
        let mode = (z.floor() as usize).min(modes - 1);
        let position = (z - mode as f64) * (2 * grid.nodes_per_mode()) as f64;
        Ok(self.input_between(mode, position, x))
    }
}

fn diverged(x: &DVector<f64>) -> bool {
    x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_BOUND)
}

/// Integrates the duration-scaled dynamics and running cost under `policy`.
pub fn rollout(problem: &SwitchedProblem, times: &SwitchingTimes, policy: &SlqPolicy) -> Result<Trajectory> {
    let durations = problem.mode_durations(times)?;
    let grid = policy.grid();
    if grid.modes() != problem.modes() {
        return Err(Error::Dimension(format!(
            "policy has {} modes, problem has {}",
            grid.modes(),
            problem.modes()
        )));
    }
    let nx = problem.state_dim();
    let nu = problem.input_dim();
    let n = grid.nodes_per_mode();
    let h = grid.step();
    let mut state = ModeSamples::filled(grid, DVector::zeros(nx));
    let mut input = ModeSamples::filled(grid, DVector::zeros(nu));

    let mut x = problem.x0().clone();
    let mut running = 0.0;
    for m in 0..grid.modes() {
        let sys = problem.subsystem(m);
        let dur = durations[m];
        let augmented = |x: &DVector<f64>, u: &DVector<f64>| {
            let mut y = DVector::zeros(nx + 1);
            y.rows_mut(0, nx).copy_from(&(sys.flow(x, u) * dur));
            y[nx] = sys.running_cost(x, u) * dur;
            y
        };

        let mut u = policy.input(m, 0, &x);
        let mut k0 = augmented(&x, &u);
        state.set(m, 0, x.clone());
        input.set(m, 0, u);
        for k in 0..n {
            let j = 2 * k;
            let mut f = |tau: f64, y: &DVector<f64>| {
                let xs = y.rows(0, nx).into_owned();
                let us = policy.input_between(m, j as f64 + 2.0 * tau, &xs);
                augmented(&xs, &us)
            };
            let mut y0 = x.clone().insert_row(nx, running);
            let step = if sys.has_analytic_derivatives() {
                // closed-loop Jacobian of the state part
                let mut bound = |tau: f64, y: &DVector<f64>| {
                    let position = j as f64 + 2.0 * tau;
                    let xs = y.rows(0, nx).into_owned();
                    let us = policy.input_between(m, position, &xs);
                    let (a, b) = sys.flow_jacobians(&xs, &us);
                    dur * (a + b * policy.gain_between(m, position)).norm()
                };
                rk4_step_bounded(&mut f, &mut bound, h, &y0, &k0)
            } else {
                rk4_step(&mut f, h, &y0, &k0)
            };
            let x1 = step.end.rows(0, nx).into_owned();
            running = step.end[nx];
            if diverged(&x1) || !running.is_finite() {
                return Err(Error::RolloutDiverged {
                    last_valid_node: grid.global_node(m, j),
                });
            }
            u = policy.input(m, j + 2, &x1);
            let k1 = augmented(&x1, &u);
            let x_mid = match step.mid {
                Some(mid) => mid.rows(0, nx).into_owned(),
                None => {
                    y0 = (&y0 + &step.end) * 0.5 + (&k0 - &k1) * (h / 8.0);
                    y0.rows(0, nx).into_owned()
                }
            };
            let u_mid = policy.input(m, j + 1, &x_mid);
            state.set(m, j + 1, x_mid);
            input.set(m, j + 1, u_mid);
            state.set(m, j + 2, x1.clone());
            input.set(m, j + 2, u);
            x = x1;
            k0 = k1;
        }
    }
    let cost = running + problem.terminal().value(&x);
    if !cost.is_finite() {
        return Err(Error::RolloutDiverged {
            last_valid_node: grid.node_count() - 1,
        });
    }
    Ok(Trajectory {
        times: times.clone(),
        t_start: problem.t_start(),
        durations,
        state,
        input,
        cost,
    })
}

/// Recomputes the cost of a stored trajectory with the composite trapezoid
/// rule over the nodes of each mode. Independent of the RK4 accumulation.
pub fn evaluate_cost(problem: &SwitchedProblem, times: &SwitchingTimes, trajectory: &Trajectory) -> Result<f64> {
    let durations = problem.mode_durations(times)?;
    let grid = trajectory.grid();
    let h = grid.step();
    let mut total = 0.0;
    for (m, &dur) in durations.iter().enumerate() {
        if dur == 0.0 {
            continue;
        }
        let sys = problem.subsystem(m);
        let last = grid.samples_per_mode() - 1;
        let mut integral = 0.0;
        for j in (0..=last).step_by(2) {
            let w = if j == 0 || j == last { 0.5 } else { 1.0 };
            integral += w * sys.running_cost(trajectory.state.get(m, j), trajectory.input.get(m, j));
        }
        total += dur * h * integral;
    }
    Ok(total + problem.terminal().value(trajectory.final_state()))
}

/// Operating point `(x, u)` per mode.
pub type OperatingPoint = (DVector<f64>, DVector<f64>);

/// `(x0, 0)` for every mode.
pub fn default_operating_points(problem: &SwitchedProblem) -> Vec<OperatingPoint> {
    vec![(problem.x0().clone(), DVector::zeros(problem.input_dim())); problem.modes()]
}

/// Stabilizing initial policy from an LQ design around one operating point
/// per mode. The feedforward is zero and the nominal input is the operating
/// input.
pub fn initial_controller(
    problem: &SwitchedProblem,
    times: &SwitchingTimes,
    operating_points: &[OperatingPoint],
    grid: NormalizedGrid,
) -> Result<SlqPolicy> {
    let (mut policy, _) = operating_point_design(problem, times, operating_points, grid)?;
    let nu = problem.input_dim();
    policy.feedforward = ModeSamples::filled(grid, DVector::zeros(nu));
    Ok(policy)
}

/// Same LQ design as [`initial_controller`] but keeping its feedforward,
/// applied with `alpha = 1`.
pub fn initial_controller_with_feedforward(
    problem: &SwitchedProblem,
    times: &SwitchingTimes,
    operating_points: &[OperatingPoint],
    grid: NormalizedGrid,
) -> Result<SlqPolicy> {
    let (policy, _) = operating_point_design(problem, times, operating_points, grid)?;
    Ok(policy.with_alpha(1.0))
}

fn operating_point_design(
    problem: &SwitchedProblem,
    times: &SwitchingTimes,
    operating_points: &[OperatingPoint],
    grid: NormalizedGrid,
) -> Result<(SlqPolicy, crate::slq::RiccatiSolution)> {
    if operating_points.len() != problem.modes() || grid.modes() != problem.modes() {
        return Err(Error::Dimension(format!(
            "{} operating points and a {}-mode grid for {} modes",
            operating_points.len(),
            grid.modes(),
            problem.modes()
        )));
    }
    let durations = problem.mode_durations(times)?;
    let mut per_mode = Vec::with_capacity(problem.modes());
    for (m, (x, u)) in operating_points.iter().enumerate() {
        let pt = LqPoint::at(problem.subsystem(m), x, u, grid.global_node(m, 0)).map_err(|e| {
            Error::Initialization {
                mode: m,
                reason: e.to_string(),
            }
        })?;
        per_mode.push(pt);
    }
    let (x_last, _) = &operating_points[problem.modes() - 1];
    let mut terminal = problem.terminal().expansion(x_last);
    terminal.hessian = crate::lq::symmetrize(&terminal.hessian);
    let model = LqModel {
        points: ModeSamples::from_fn(grid, |m, _| per_mode[m].clone()),
        terminal,
        durations,
    };
    let riccati = solve_riccati(&model, 0.0).map_err(|e| {
        let mode = match e {
            Error::RiccatiDiverged { node } => grid.mode_of_node(node),
            _ => 0,
        };
        Error::Initialization {
            mode,
            reason: e.to_string(),
        }
    })?;
    let policy = SlqPolicy {
        nominal_input: ModeSamples::from_fn(grid, |m, _| operating_points[m].1.clone()),
        feedforward: riccati.feedforward.clone(),
        gain: riccati.gain.clone(),
        reference_state: ModeSamples::from_fn(grid, |m, _| operating_points[m].0.clone()),
        alpha: 0.0,
    };
    Ok((policy, riccati))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{LinearSubsystem, QuadraticCost, QuadraticTerminal};
    use std::sync::Arc;

    fn scalar_linear(a: f64, q: f64, q_f: f64, horizon: f64, modes: usize, x0: f64) -> SwitchedProblem {
        let cost = QuadraticCost::new(
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, 1.0),
            DVector::zeros(1),
            DVector::zeros(1),
        );
        let sys: Arc<dyn crate::problem::Subsystem> = Arc::new(LinearSubsystem::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, 1.0),
            cost,
        ));
        SwitchedProblem::new(
            vec![sys; modes],
            Arc::new(QuadraticTerminal::new(DMatrix::from_element(1, 1, q_f), DVector::zeros(1))),
            0.0,
            horizon,
            DVector::from_element(1, x0),
        )
        .unwrap()
    }

    #[test]
    fn zero_vector_field_keeps_state() {
        let cost = QuadraticCost::new(
            DMatrix::zeros(2, 2),
            DMatrix::identity(1, 1),
            DVector::zeros(2),
            DVector::zeros(1),
        );
        let sys: Arc<dyn crate::problem::Subsystem> =
            Arc::new(LinearSubsystem::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 1), cost));
        let p = SwitchedProblem::new(
            vec![sys.clone(), sys.clone(), sys],
            Arc::new(QuadraticTerminal::new(DMatrix::identity(2, 2), DVector::zeros(2))),
            0.0,
            3.0,
            DVector::from_vec(vec![1.0, -1.0]),
        )
        .unwrap();
        let grid = NormalizedGrid::new(3, 20).unwrap();
        let policy = SlqPolicy::constant_input(grid, 2, &DVector::from_element(1, 0.7));
        let traj = rollout(&p, &p.uniform_times(), &policy).unwrap();
        for x in traj.x_nodes() {
            assert_eq!(x, *p.x0());
        }
    }

    #[test]
    fn constant_input_integrates_exactly() {
        let p = scalar_linear(0.0, 0.0, 0.0, 1.0, 1, 0.0);
        let grid = NormalizedGrid::new(1, 200).unwrap();
        let policy = SlqPolicy::constant_input(grid, 1, &DVector::from_element(1, 1.0));
        let traj = rollout(&p, &SwitchingTimes::new(vec![]), &policy).unwrap();
        assert!((traj.final_state()[0] - 1.0).abs() < 1e-10);
        // running cost 0.5 u^2 over one second
        assert!((traj.cost - 0.5).abs() < 1e-12);
        assert_eq!(traj.x_nodes()[0][0], 0.0);
    }

    #[test]
    fn trapezoid_cost_of_terminal_only() {
        let cost = QuadraticCost::new(
            DMatrix::zeros(2, 2),
            DMatrix::zeros(1, 1),
            DVector::zeros(2),
            DVector::zeros(1),
        );
        let sys: Arc<dyn crate::problem::Subsystem> =
            Arc::new(LinearSubsystem::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 1), cost));
        // Phi(x) = |x|^2
        let p = SwitchedProblem::new(
            vec![sys],
            Arc::new(QuadraticTerminal::new(DMatrix::identity(2, 2) * 2.0, DVector::zeros(2))),
            0.0,
            1.0,
            DVector::from_vec(vec![1.0, -1.0]),
        )
        .unwrap();
        let grid = NormalizedGrid::new(1, 10).unwrap();
        let policy = SlqPolicy::constant_input(grid, 2, &DVector::zeros(1));
        let times = SwitchingTimes::new(vec![]);
        let traj = rollout(&p, &times, &policy).unwrap();
        assert_eq!(evaluate_cost(&p, &times, &traj).unwrap(), 2.0);
    }

    #[test]
    fn zero_duration_mode_adds_nothing() {
        let p = scalar_linear(-1.0, 1.0, 1.0, 2.0, 3, 1.0);
        let grid = NormalizedGrid::new(3, 50).unwrap();
        let policy = SlqPolicy::constant_input(grid, 1, &DVector::from_element(1, 0.5));
        let times = SwitchingTimes::new(vec![1.0, 1.0]);
        let traj = rollout(&p, &times, &policy).unwrap();
        // the middle mode is frozen
        assert_eq!(traj.state.get(1, 0), traj.state.get(1, 100));
        let p2 = scalar_linear(-1.0, 1.0, 1.0, 2.0, 2, 1.0);
        let grid2 = NormalizedGrid::new(2, 50).unwrap();
        let policy2 = SlqPolicy::constant_input(grid2, 1, &DVector::from_element(1, 0.5));
        let traj2 = rollout(&p2, &SwitchingTimes::new(vec![1.0]), &policy2).unwrap();
        assert_eq!(traj.cost, traj2.cost);
        assert_eq!(
            evaluate_cost(&p, &times, &traj).unwrap(),
            evaluate_cost(&p2, &SwitchingTimes::new(vec![1.0]), &traj2).unwrap()
        );
    }

    #[test]
    fn divergence_is_reported() {
        let p = scalar_linear(1.0, 0.0, 0.0, 40.0, 1, 1.0);
        let grid = NormalizedGrid::new(1, 200).unwrap();
        let policy = SlqPolicy::constant_input(grid, 1, &DVector::zeros(1));
        match rollout(&p, &SwitchingTimes::new(vec![]), &policy) {
            Err(Error::RolloutDiverged { last_valid_node }) => {
                // e^{40 t} crosses 1e8 near t = 18.4 of 40
                assert!(last_valid_node > 80 && last_valid_node < 100, "{last_valid_node}");
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn stable_mode_initial_controller() {
        let p = scalar_linear(-1.0, 1.0, 1.0, 1.0, 1, 1.0);
        let grid = NormalizedGrid::new(1, 100).unwrap();
        let times = SwitchingTimes::new(vec![]);
        let ops = vec![(DVector::zeros(1), DVector::zeros(1))];
        let policy = initial_controller(&p, &times, &ops, grid).unwrap();
        assert!(policy.gain.iter().all(|l| l[0].is_finite() && l[0] <= 0.0));
        assert!(policy.feedforward.iter().all(|l| l[0] == 0.0));
        let traj = rollout(&p, &times, &policy).unwrap();
        assert!(traj.x_nodes().iter().all(|x| x[0].abs() <= 1.0));
    }

    #[test]
    fn feedforward_initializer_steers_to_goal() {
        // goal 0, operating point 1: the affine design pushes u negative
        let p = scalar_linear(0.0, 1.0, 1.0, 1.0, 1, 1.0);
        let grid = NormalizedGrid::new(1, 50).unwrap();
        let times = SwitchingTimes::new(vec![]);
        let ops = default_operating_points(&p);
        let plain = initial_controller(&p, &times, &ops, grid).unwrap();
        let with_ff = initial_controller_with_feedforward(&p, &times, &ops, grid).unwrap();
        assert_eq!(plain.gain, with_ff.gain);
        assert_eq!(with_ff.alpha, 1.0);
        assert!(with_ff.input(0, 0, p.x0())[0] < 0.0);
        let a = rollout(&p, &times, &plain).unwrap();
        let b = rollout(&p, &times, &with_ff).unwrap();
        assert!(b.cost < a.cost);
    }

    #[test]
    fn zero_cost_gives_zero_gain_and_long_horizons_diverge() {
        let p = scalar_linear(1.0, 0.0, 0.0, 30.0, 1, 1.0);
        let grid = NormalizedGrid::new(1, 200).unwrap();
        let times = SwitchingTimes::new(vec![]);
        let policy = initial_controller(&p, &times, &default_operating_points(&p), grid).unwrap();
        assert!(policy.gain.iter().all(|l| l[0] == 0.0));
        assert!(matches!(
            rollout(&p, &times, &policy),
            Err(Error::RolloutDiverged { .. })
        ));
    }

    #[test]
    fn policy_reference_point_reproduces_nominal_input() {
        let grid = NormalizedGrid::new(2, 4).unwrap();
        let policy = SlqPolicy {
            nominal_input: ModeSamples::from_fn(grid, |m, j| DVector::from_element(1, (m * 10 + j) as f64)),
            feedforward: ModeSamples::filled(grid, DVector::from_element(1, 3.0)),
            gain: ModeSamples::filled(grid, DMatrix::from_element(1, 1, -2.0)),
            reference_state: ModeSamples::from_fn(grid, |_, j| DVector::from_element(1, j as f64)),
            alpha: 0.0,
        };
        for m in 0..2 {
            // the last sample of mode 0 sits at z = 1, which mode 1 owns
            for j in 0..(if m == 0 { 8 } else { 9 }) {
                let z = grid.sample_z(m, j);
                let x = DVector::from_element(1, j as f64);
                let u = policy.evaluate(z, &x).unwrap();
                assert_eq!(u[0], (m * 10 + j) as f64);
            }
        }
        // left-closed at the switch: z = 1 belongs to the second mode
        assert_eq!(policy.evaluate(1.0, &DVector::zeros(1)).unwrap()[0], 10.0);
        let full = policy.clone().with_alpha(1.0);
        assert_eq!(full.input(0, 0, &DVector::zeros(1))[0], 3.0);
        assert!(policy.evaluate(2.5, &DVector::zeros(1)).is_err());
    }
}
