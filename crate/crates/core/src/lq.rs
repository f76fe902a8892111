//! Time-varying LQ approximation of the normalized-time problem along a
//! nominal trajectory.

use std::borrow::Cow;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::problem::{ModeSamples, Subsystem, SwitchedProblem, SwitchingTimes, TerminalExpansion};
use crate::rollout::Trajectory;

/// Smallest eigenvalue allowed in the input weight before it is shifted.
pub const R_MIN_EIGENVALUE: f64 = 1e-6;

/// Linearized dynamics and quadratized running cost at one sample.
#[derive(Debug, Clone)]
pub struct LqPoint {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Nominal vector field `f_i(x, u)`, unscaled by the mode duration.
    pub flow: DVector<f64>,
    pub q: f64,
    pub q_vec: DVector<f64>,
    pub r_vec: DVector<f64>,
    pub q_mat: DMatrix<f64>,
    pub p_mat: DMatrix<f64>,
    pub r_mat: DMatrix<f64>,
    r_chol: Cholesky<f64, Dyn>,
}

impl LqPoint {
    /// Expands `sys` at `(x, u)`. `node` only labels errors.
    pub fn at(sys: &dyn Subsystem, x: &DVector<f64>, u: &DVector<f64>, node: usize) -> Result<Self> {
        let (a, b) = sys.flow_jacobians(x, u);
        let flow = sys.flow(x, u);
        let ce = sys.cost_expansion(x, u);
        let q_mat = symmetrize(&ce.state_hessian);
        let mut r_mat = symmetrize(&ce.input_hessian);
        if !r_mat.iter().all(|v| v.is_finite()) {
            return Err(Error::NotPositiveDefinite { node });
        }
        let lambda_min = r_mat.clone().symmetric_eigenvalues().min();
        if lambda_min < R_MIN_EIGENVALUE {
            let shift = R_MIN_EIGENVALUE - lambda_min;
            for d in 0..r_mat.nrows() {
                r_mat[(d, d)] += shift;
            }
        }
        let r_chol = Cholesky::new(r_mat.clone()).ok_or(Error::NotPositiveDefinite { node })?;
        Ok(LqPoint {
            a,
            b,
            flow,
            q: ce.value,
            q_vec: ce.state_gradient,
            r_vec: ce.input_gradient,
            q_mat,
            p_mat: ce.cross,
            r_mat,
            r_chol,
        })
    }

    /// Coefficients linearly interpolated towards `other` by weight `w`.
    pub fn lerp(&self, other: &LqPoint, w: f64) -> LqPoint {
        let v = 1.0 - w;
        let r_mat = &self.r_mat * v + &other.r_mat * w;
        let r_chol = Cholesky::new(r_mat.clone()).unwrap_or_else(|| self.r_chol.clone());
        LqPoint {
            a: &self.a * v + &other.a * w,
            b: &self.b * v + &other.b * w,
            flow: &self.flow * v + &other.flow * w,
            q: self.q * v + other.q * w,
            q_vec: &self.q_vec * v + &other.q_vec * w,
            r_vec: &self.r_vec * v + &other.r_vec * w,
            q_mat: &self.q_mat * v + &other.q_mat * w,
            p_mat: &self.p_mat * v + &other.p_mat * w,
            r_mat,
            r_chol,
        }
    }

    /// `R^{-1} m` via the Cholesky factor.
    pub fn solve_r(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.r_chol.solve(m)
    }

    pub fn solve_r_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        self.r_chol.solve(v)
    }

    /// `L = -R^{-1}(P' + B' S)`
    pub fn feedback_gain(&self, s_mat: &DMatrix<f64>) -> DMatrix<f64> {
        -self.solve_r(&(self.p_mat.transpose() + self.b.transpose() * s_mat))
    }

    /// `l = -R^{-1}(r + B' s)`
    pub fn feedforward(&self, s_vec: &DVector<f64>) -> DVector<f64> {
        -self.solve_r_vec(&(&self.r_vec + self.b.transpose() * s_vec))
    }
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

#[derive(Debug, Clone)]
pub struct LqModel {
    pub points: ModeSamples<LqPoint>,
    pub terminal: TerminalExpansion,
    pub durations: Vec<f64>,
}

impl LqModel {
    pub fn grid(&self) -> crate::problem::NormalizedGrid {
        self.points.grid()
    }

    /// Coefficients at a fractional sample position of `mode`.
    pub fn point_between(&self, mode: usize, position: f64) -> Cow<'_, LqPoint> {
        let last = self.grid().samples_per_mode() - 1;
        let lo = (position.floor().max(0.0) as usize).min(last);
        let w = position - lo as f64;
        if w <= 0.0 || lo == last {
            Cow::Borrowed(self.points.get(mode, lo))
        } else {
            Cow::Owned(self.points.get(mode, lo).lerp(self.points.get(mode, lo + 1), w))
        }
    }
}

/// Linearizes the dynamics and quadratizes the costs at every sample of the
/// nominal trajectory. Switch nodes are expanded once per adjacent mode.
pub fn linearize(problem: &SwitchedProblem, times: &SwitchingTimes, nominal: &Trajectory) -> Result<LqModel> {
    let durations = problem.mode_durations(times)?;
    let grid = nominal.grid();
    if grid.modes() != problem.modes() {
        return Err(Error::Dimension(format!(
            "trajectory has {} modes, problem has {}",
            grid.modes(),
            problem.modes()
        )));
    }
    let mut points = Vec::with_capacity(grid.modes() * grid.samples_per_mode());
    for m in 0..grid.modes() {
        let sys = problem.subsystem(m);
        for j in 0..grid.samples_per_mode() {
            points.push(LqPoint::at(
                sys,
                nominal.state.get(m, j),
                nominal.input.get(m, j),
                grid.global_node(m, j),
            )?);
        }
    }
    let mut iter = points.into_iter();
    let points = ModeSamples::from_fn(grid, |_, _| iter.next().expect("sized above"));
    let mut terminal = problem.terminal().expansion(nominal.final_state());
    terminal.hessian = symmetrize(&terminal.hessian);
    Ok(LqModel {
        points,
        terminal,
        durations,
    })
}
