//! Derivative of the optimized cost with respect to the switching times.
//!
//! For each switch `j` a forward sweep integrates the state sensitivity
//! `dx` under the fixed feedback of the final policy, and a backward sweep
//! integrates the derivatives of the Riccati quantities. The gradient entry
//! is the scalar sensitivity at `z = 0`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lq::{LqModel, LqPoint};
use crate::ode::rk4_step_bounded;
use crate::problem::{ModeSamples, SwitchedProblem, SwitchingTimes};
use crate::rollout::{rollout, SlqPolicy};
use crate::slq::{riccati_rhs, scalar_rate, slq_solve, RiccatiSolution, SlqReport, SlqSettings};

/// `d duration_i / d t_j` for 1-based mode `i` and switch `j`.
pub fn switch_indicator(mode: usize, switch: usize, modes: usize) -> Result<f64> {
    if mode == 0 || mode > modes {
        return Err(Error::IndexOutOfRange(format!("mode {mode} not in 1..={modes}")));
    }
    if switch == 0 || switch >= modes {
        return Err(Error::IndexOutOfRange(format!(
            "switch {switch} not in 1..={}",
            modes.saturating_sub(1)
        )));
    }
    Ok(if mode == switch {
        1.0
    } else if mode == switch + 1 {
        -1.0
    } else {
        0.0
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSettings {
    /// Step size used in the scalar part of the backward sweep.
    pub alpha: f64,
    /// Sign applied to the policy gain when closing `du = sign L dx`.
    pub feedback_sign: f64,
}

impl Default for GradientSettings {
    fn default() -> Self {
        GradientSettings {
            alpha: 1.0,
            feedback_sign: 1.0,
        }
    }
}

/// State and input sensitivities to one switching time.
#[derive(Debug, Clone)]
pub struct StateSensitivity {
    pub dx: ModeSamples<DVector<f64>>,
    pub du: ModeSamples<DVector<f64>>,
}

/// Sensitivities of the running-cost expansion `(q_vec, r_vec, q)`.
#[derive(Debug, Clone)]
pub struct CostSensitivity {
    pub dq_vec: ModeSamples<DVector<f64>>,
    pub dr_vec: ModeSamples<DVector<f64>>,
    pub dq: ModeSamples<f64>,
}

/// Sensitivities of the value-function coefficients `(S, s, s_0)`.
#[derive(Debug, Clone)]
pub struct ValueSensitivity {
    pub ds_mat: ModeSamples<DMatrix<f64>>,
    pub ds_vec: ModeSamples<DVector<f64>>,
    pub ds_scalar: ModeSamples<f64>,
}

#[derive(Debug, Clone)]
pub struct SwitchSensitivity {
    /// 1-based switch index.
    pub switch: usize,
    pub state: StateSensitivity,
    pub cost: CostSensitivity,
    pub value: ValueSensitivity,
}

impl SwitchSensitivity {
    pub fn gradient_entry(&self) -> f64 {
        *self.value.ds_scalar.get(0, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchGradient {
    pub values: Vec<f64>,
    /// Whether the SLQ solve behind the gradient converged.
    pub converged: bool,
}

fn lerp_weights(samples: usize, position: f64) -> (usize, f64) {
    let last = samples - 1;
    let lo = (position.floor().max(0.0) as usize).min(last);
    let w = position - lo as f64;
    if w <= 0.0 || lo == last {
        (lo, 0.0)
    } else {
        (lo, w)
    }
}

fn lerp_vec(s: &ModeSamples<DVector<f64>>, mode: usize, position: f64) -> DVector<f64> {
    let (lo, w) = lerp_weights(s.grid().samples_per_mode(), position);
    if w == 0.0 {
        s.get(mode, lo).clone()
    } else {
        s.get(mode, lo) * (1.0 - w) + s.get(mode, lo + 1) * w
    }
}

fn lerp_scalar(s: &ModeSamples<f64>, mode: usize, position: f64) -> f64 {
    let (lo, w) = lerp_weights(s.grid().samples_per_mode(), position);
    if w == 0.0 {
        *s.get(mode, lo)
    } else {
        s.get(mode, lo) * (1.0 - w) + s.get(mode, lo + 1) * w
    }
}

fn finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Forward sweep from `dx(0) = 0`:
/// `d(dx)/dz = ind_j f + dur (A dx + B du)`, `du = sign L dx`.
pub fn forward_sensitivity(
    model: &LqModel,
    policy: &SlqPolicy,
    switch: usize,
    feedback_sign: f64,
) -> Result<StateSensitivity> {
    let grid = model.grid();
    if policy.grid() != grid {
        return Err(Error::Dimension("policy and LQ model use different grids".into()));
    }
    let nx = model.terminal.hessian.nrows();
    let n = grid.nodes_per_mode();
    let h = grid.step();
    let mut dx = ModeSamples::filled(grid, DVector::zeros(nx));
    let mut y = DVector::zeros(nx);
    for m in 0..grid.modes() {
        let dur = model.durations[m];
        let ind = switch_indicator(m + 1, switch, grid.modes())?;
        let rhs = |pt: &LqPoint, gain: &DMatrix<f64>, y: &DVector<f64>| {
            let du = gain * y * feedback_sign;
            &pt.flow * ind + (&pt.a * y + &pt.b * du) * dur
        };
        dx.set(m, 0, y.clone());
        let mut k_a = rhs(model.points.get(m, 0), policy.gain.get(m, 0), &y);
        for k in 0..n {
            let (ja, jm, jb) = (2 * k, 2 * k + 1, 2 * k + 2);
            let mut f = |tau: f64, y: &DVector<f64>| {
                let pos = ja as f64 + 2.0 * tau;
                rhs(&model.point_between(m, pos), &policy.gain_between(m, pos), y)
            };
            let mut bound = |tau: f64, _: &DVector<f64>| {
                let pos = ja as f64 + 2.0 * tau;
                let pt = model.point_between(m, pos);
                dur * (&pt.a + &pt.b * policy.gain_between(m, pos) * feedback_sign).norm()
            };
            let step = rk4_step_bounded(&mut f, &mut bound, h, &y, &k_a);
            if !finite(&step.end) {
                return Err(Error::SensitivityDiverged {
                    node: grid.global_node(m, jb),
                });
            }
            let k_b = rhs(model.points.get(m, jb), policy.gain.get(m, jb), &step.end);
            let mid = step
                .mid
                .unwrap_or_else(|| (&y + &step.end) * 0.5 + (&k_a - &k_b) * (h / 8.0));
            dx.set(m, jm, mid);
            dx.set(m, jb, step.end.clone());
            y = step.end;
            k_a = k_b;
        }
    }
    let du = ModeSamples::from_fn(grid, |m, j| policy.gain.get(m, j) * dx.get(m, j) * feedback_sign);
    Ok(StateSensitivity { dx, du })
}

/// `dq_vec = Q dx + P du`, `dr_vec = P' dx + R du`, `dq = q_vec' dx + r_vec' du`.
pub fn cost_coefficient_sensitivity(model: &LqModel, state: &StateSensitivity) -> CostSensitivity {
    let grid = model.grid();
    let pt = |m, j| model.points.get(m, j);
    CostSensitivity {
        dq_vec: ModeSamples::from_fn(grid, |m, j| {
            &pt(m, j).q_mat * state.dx.get(m, j) + &pt(m, j).p_mat * state.du.get(m, j)
        }),
        dr_vec: ModeSamples::from_fn(grid, |m, j| {
            pt(m, j).p_mat.transpose() * state.dx.get(m, j) + &pt(m, j).r_mat * state.du.get(m, j)
        }),
        dq: ModeSamples::from_fn(grid, |m, j| {
            pt(m, j).q_vec.dot(state.dx.get(m, j)) + pt(m, j).r_vec.dot(state.du.get(m, j))
        }),
    }
}

/// Per-sample quantities of the backward sweep that do not depend on `j`.
#[derive(Debug, Clone)]
struct ValueCoefficients {
    a: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    r_inv_bt: DMatrix<f64>,
    lt_r: DMatrix<f64>,
    r_ff: DVector<f64>,
    w_mat: DMatrix<f64>,
    w_vec: DVector<f64>,
    w: f64,
    closed_loop_norm: f64,
}

impl ValueCoefficients {
    fn at(pt: &LqPoint, riccati: &RiccatiSolution, m: usize, j: usize, alpha: f64) -> Self {
        let gain = riccati.gain.get(m, j);
        let ff = riccati.feedforward.get(m, j);
        let (w_mat, w_vec) = riccati_rhs(pt, riccati.s_mat.get(m, j), riccati.s_vec.get(m, j));
        let nu = pt.r_mat.nrows();
        ValueCoefficients {
            a: pt.a.clone(),
            r_inv: pt.solve_r(&DMatrix::identity(nu, nu)),
            r_inv_bt: pt.solve_r(&pt.b.transpose()),
            lt_r: gain.transpose() * &pt.r_mat,
            r_ff: &pt.r_mat * ff,
            w_mat,
            w_vec,
            w: scalar_rate(pt, ff, alpha),
            closed_loop_norm: (&pt.a + &pt.b * gain).norm(),
        }
    }

    fn lerp(&self, o: &Self, w: f64) -> Self {
        let v = 1.0 - w;
        ValueCoefficients {
            a: &self.a * v + &o.a * w,
            r_inv: &self.r_inv * v + &o.r_inv * w,
            r_inv_bt: &self.r_inv_bt * v + &o.r_inv_bt * w,
            lt_r: &self.lt_r * v + &o.lt_r * w,
            r_ff: &self.r_ff * v + &o.r_ff * w,
            w_mat: &self.w_mat * v + &o.w_mat * w,
            w_vec: &self.w_vec * v + &o.w_vec * w,
            w: self.w * v + o.w * w,
            closed_loop_norm: self.closed_loop_norm * v + o.closed_loop_norm * w,
        }
    }
}

struct ValueTable {
    coeffs: ModeSamples<ValueCoefficients>,
    alpha: f64,
}

impl ValueTable {
    fn new(model: &LqModel, riccati: &RiccatiSolution, alpha: f64) -> Result<Self> {
        if riccati.s_mat.grid() != model.grid() {
            return Err(Error::Dimension("Riccati solution and LQ model use different grids".into()));
        }
        let coeffs = ModeSamples::from_fn(model.grid(), |m, j| {
            ValueCoefficients::at(model.points.get(m, j), riccati, m, j, alpha)
        });
        Ok(ValueTable { coeffs, alpha })
    }

    fn between(&self, mode: usize, position: f64) -> std::borrow::Cow<'_, ValueCoefficients> {
        let (lo, w) = lerp_weights(self.coeffs.grid().samples_per_mode(), position);
        if w == 0.0 {
            std::borrow::Cow::Borrowed(self.coeffs.get(mode, lo))
        } else {
            std::borrow::Cow::Owned(self.coeffs.get(mode, lo).lerp(self.coeffs.get(mode, lo + 1), w))
        }
    }
}

/// Backward sweep of the differentiated Riccati equations from
/// `dS(I) = 0`, `ds(I) = Q_f dx(I)`, `ds_0(I) = q_f' dx(I)`.
pub fn backward_sensitivity(
    model: &LqModel,
    riccati: &RiccatiSolution,
    alpha: f64,
    switch: usize,
    cost: &CostSensitivity,
    dx_terminal: &DVector<f64>,
) -> Result<ValueSensitivity> {
    let table = ValueTable::new(model, riccati, alpha)?;
    backward_with(model, &table, switch, cost, dx_terminal)
}

fn backward_with(
    model: &LqModel,
    table: &ValueTable,
    switch: usize,
    cost: &CostSensitivity,
    dx_terminal: &DVector<f64>,
) -> Result<ValueSensitivity> {
    let grid = model.grid();
    let nx = model.terminal.hessian.nrows();
    let n = grid.nodes_per_mode();
    let h = grid.step();
    let last = grid.samples_per_mode() - 1;
    let ns = nx * nx + nx + 1;
    let kappa = 0.5 * table.alpha * (2.0 - table.alpha);
    let pack = |s: &DMatrix<f64>, v: &DVector<f64>, c: f64| {
        DVector::from_iterator(ns, s.iter().chain(v.iter()).copied().chain(std::iter::once(c)))
    };
    let unpack = |y: &DVector<f64>| {
        let y = y.as_slice();
        (
            DMatrix::from_column_slice(nx, nx, &y[..nx * nx]),
            DVector::from_column_slice(&y[nx * nx..nx * nx + nx]),
            y[ns - 1],
        )
    };
    let mut ds_mat = ModeSamples::filled(grid, DMatrix::zeros(nx, nx));
    let mut ds_vec = ModeSamples::filled(grid, DVector::zeros(nx));
    let mut ds_scalar = ModeSamples::filled(grid, 0.0);
    let mut y = pack(
        &DMatrix::zeros(nx, nx),
        &(&model.terminal.hessian * dx_terminal),
        model.terminal.gradient.dot(dx_terminal),
    );
    for m in (0..grid.modes()).rev() {
        let dur = model.durations[m];
        let ind = switch_indicator(m + 1, switch, grid.modes())?;
        // d/dz of (dS, ds, ds_0) is minus the bracketed rates
        let rhs = |c: &ValueCoefficients, dq_vec: &DVector<f64>, dr_vec: &DVector<f64>, dq: f64, y: &DVector<f64>| {
            let (s, v, _) = unpack(y);
            let d_gain = -(&c.r_inv_bt * &s);
            let d_ff = -(&c.r_inv * dr_vec + &c.r_inv_bt * &v);
            let at_s = c.a.transpose() * &s;
            let dlt_rl = d_gain.transpose() * c.lt_r.transpose();
            let d_mat = &c.w_mat * ind + (&at_s + at_s.transpose() - &dlt_rl - dlt_rl.transpose()) * dur;
            let d_vec = &c.w_vec * ind
                + (dq_vec + c.a.transpose() * &v - d_gain.transpose() * &c.r_ff - &c.lt_r * &d_ff) * dur;
            let d_scalar = c.w * ind + (dq - kappa * 2.0 * c.r_ff.dot(&d_ff)) * dur;
            pack(&(-d_mat), &(-d_vec), -d_scalar)
        };
        let at_sample = |j: usize, y: &DVector<f64>| {
            rhs(
                table.coeffs.get(m, j),
                cost.dq_vec.get(m, j),
                cost.dr_vec.get(m, j),
                *cost.dq.get(m, j),
                y,
            )
        };
        let store = |ds_mat: &mut ModeSamples<DMatrix<f64>>,
                     ds_vec: &mut ModeSamples<DVector<f64>>,
                     ds_scalar: &mut ModeSamples<f64>,
                     j: usize,
                     y: &DVector<f64>| {
            let (s, v, c) = unpack(y);
            ds_mat.set(m, j, crate::lq::symmetrize(&s));
            ds_vec.set(m, j, v);
            ds_scalar.set(m, j, c);
        };
        store(&mut ds_mat, &mut ds_vec, &mut ds_scalar, last, &y);
        let mut k_a = at_sample(last, &y);
        for k in (0..n).rev() {
            let (jm, jb) = (2 * k + 1, 2 * k);
            let mut f = |tau: f64, y: &DVector<f64>| {
                let pos = jb as f64 + 2.0 * tau;
                rhs(
                    &table.between(m, pos),
                    &lerp_vec(&cost.dq_vec, m, pos),
                    &lerp_vec(&cost.dr_vec, m, pos),
                    lerp_scalar(&cost.dq, m, pos),
                    y,
                )
            };
            let mut bound =
                |tau: f64, _: &DVector<f64>| 2.0 * dur * table.between(m, jb as f64 + 2.0 * tau).closed_loop_norm;
            let step = rk4_step_bounded(&mut f, &mut bound, -h, &y, &k_a);
            if !finite(&step.end) {
                return Err(Error::SensitivityDiverged {
                    node: grid.global_node(m, jb),
                });
            }
            let k_b = at_sample(jb, &step.end);
            let mid = step
                .mid
                .unwrap_or_else(|| (&y + &step.end) * 0.5 - (&k_a - &k_b) * (h / 8.0));
            store(&mut ds_mat, &mut ds_vec, &mut ds_scalar, jm, &mid);
            store(&mut ds_mat, &mut ds_vec, &mut ds_scalar, jb, &step.end);
            y = step.end;
            k_a = k_b;
        }
    }
    Ok(ValueSensitivity {
        ds_mat,
        ds_vec,
        ds_scalar,
    })
}

fn check_report(problem: &SwitchedProblem, times: &SwitchingTimes, report: &SlqReport) -> Result<()> {
    problem.check_times(times)?;
    if report.final_model.grid().modes() != problem.modes() {
        return Err(Error::Dimension(format!(
            "report has {} modes, problem has {}",
            report.final_model.grid().modes(),
            problem.modes()
        )));
    }
    if report.final_trajectory.times != *times {
        return Err(Error::InvalidProblem(format!(
            "report was computed at {:?}, not {:?}",
            report.final_trajectory.times.as_slice(),
            times.as_slice()
        )));
    }
    Ok(())
}

fn sweep(report: &SlqReport, table: &ValueTable, switch: usize, feedback_sign: f64) -> Result<SwitchSensitivity> {
    let model = &report.final_model;
    let state = forward_sensitivity(model, &report.final_policy, switch, feedback_sign)?;
    let cost = cost_coefficient_sensitivity(model, &state);
    let grid = model.grid();
    let dx_terminal = state.dx.get(grid.modes() - 1, grid.samples_per_mode() - 1).clone();
    let value = backward_with(model, table, switch, &cost, &dx_terminal)?;
    Ok(SwitchSensitivity {
        switch,
        state,
        cost,
        value,
    })
}

/// Sensitivities for one 1-based switch index.
pub fn switch_sensitivity(
    problem: &SwitchedProblem,
    times: &SwitchingTimes,
    report: &SlqReport,
    switch: usize,
    settings: &GradientSettings,
) -> Result<SwitchSensitivity> {
    check_report(problem, times, report)?;
    switch_indicator(1, switch, problem.modes())?;
    let table = ValueTable::new(&report.final_model, &report.final_riccati, settings.alpha)?;
    sweep(report, &table, switch, settings.feedback_sign)
}

/// Sensitivities for every switch, computed in parallel.
pub fn sensitivities(
    problem: &SwitchedProblem,
    times: &SwitchingTimes,
    report: &SlqReport,
    settings: &GradientSettings,
) -> Result<Vec<SwitchSensitivity>> {
    check_report(problem, times, report)?;
    if problem.modes() < 2 {
        return Ok(Vec::new());
    }
    let table = ValueTable::new(&report.final_model, &report.final_riccati, settings.alpha)?;
    (1..problem.modes())
        .into_par_iter()
        .map(|j| sweep(report, &table, j, settings.feedback_sign))
        .collect()
}

/// Gradient of the cost with respect to the switching times at the solution
/// held in `report`. Works on unconverged reports too; `converged` records
/// which case applies.
pub fn gradient(
    problem: &SwitchedProblem,
    times: &SwitchingTimes,
    report: &SlqReport,
    settings: &GradientSettings,
) -> Result<SwitchGradient> {
    let values = sensitivities(problem, times, report, settings)?
        .iter()
        .map(SwitchSensitivity::gradient_entry)
        .collect();
    Ok(SwitchGradient {
        values,
        converged: report.converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdMode {
    /// Re-roll the given policy at the perturbed times.
    FrozenPolicy,
    /// Re-solve SLQ at the perturbed times, warm-started from the policy.
    Reconverged,
}

/// SLQ settings for the reconverged oracle.
pub fn oracle_settings() -> SlqSettings {
    SlqSettings {
        l_min: 1e-8,
        max_iterations: 200,
        ..SlqSettings::default()
    }
}

/// Finite-difference gradient. Central differences with step `h` where both
/// perturbed points stay ordered inside `[t_start, t_end]`, one-sided ones
/// otherwise (with the step clipped to the room available).
pub fn fd_gradient_oracle(
    problem: &SwitchedProblem,
    times: &SwitchingTimes,
    policy: &SlqPolicy,
    h: f64,
    mode: FdMode,
    settings: &SlqSettings,
) -> Result<Vec<f64>> {
    problem.check_times(times)?;
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidProblem(format!("finite-difference step {h} must be positive")));
    }
    let bounds = times.boundaries(problem.t_start(), problem.t_end());
    let cost_at = |t: SwitchingTimes| -> Result<f64> {
        match mode {
            FdMode::FrozenPolicy => Ok(rollout(problem, &t, policy)?.cost),
            FdMode::Reconverged => Ok(slq_solve(problem, &t, policy, settings)?.cost()),
        }
    };
    let shifted = |j: usize, delta: f64| {
        let mut t = times.as_slice().to_vec();
        t[j] += delta;
        SwitchingTimes::new(t)
    };
    let base = std::sync::OnceLock::new();
    (0..times.len())
        .into_par_iter()
        .map(|j| {
            let oracle_err = |e: Error| Error::Oracle {
                index: j + 1,
                source: Box::new(e),
            };
            let up = h.min(bounds[j + 2] - bounds[j + 1]);
            let down = h.min(bounds[j + 1] - bounds[j]);
            let base_cost = || base.get_or_init(|| cost_at(times.clone())).clone();
            let (up, down) = if up == h && down == h {
                (h, h)
            } else if up == h {
                (h, 0.0)
            } else if down == h {
                (0.0, h)
            } else {
                (up, down)
            };
            if up <= 0.0 && down <= 0.0 {
                return Err(oracle_err(Error::NotInPolytope {
                    times: times.as_slice().to_vec(),
                    t_start: problem.t_start(),
                    t_end: problem.t_end(),
                }));
            }
            let j_up = if up > 0.0 { cost_at(shifted(j, up)) } else { base_cost() }.map_err(oracle_err)?;
            let j_down = if down > 0.0 { cost_at(shifted(j, -down)) } else { base_cost() }.map_err(oracle_err)?;
            Ok((j_up - j_down) / (up + down))
        })
        .collect()
}
