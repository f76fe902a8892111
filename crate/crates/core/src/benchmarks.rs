//! Builtin benchmark problems.
//!
//! `ex1` is a three-mode nonlinear switched system with two states and one
//! input on `[0, 3]`. `ex2` augments every mode with two more states driven
//! by a second input.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::models::{QuadraticCost, QuadraticTerminal};
use crate::problem::{CostExpansion, Subsystem, SwitchedProblem, SwitchingTimes};

pub const BENCHMARK_NAMES: [&str; 2] = ["ex1", "ex2"];

/// Published optimum with the tolerances it is checked against.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub cost: f64,
    pub times: SwitchingTimes,
    pub cost_rel_tol: f64,
    pub times_abs_tol: f64,
}

#[derive(Debug, Clone)]
pub struct Benchmark {
    pub name: String,
    pub problem: SwitchedProblem,
    pub initial_times: SwitchingTimes,
    pub reference: Option<Reference>,
}

/// Coefficients `(a3, b3, a4, b4)` of the augmented states:
/// `x3' = a3 x3 + b3 x3 u2`, `x4' = a4 x4 + b4 x4 u2`.
const AUGMENTED: [[f64; 4]; 3] = [[-1.0, 2.0, 1.0, 1.0], [1.0, -3.0, 2.0, -2.0], [2.0, 1.0, -1.0, 3.0]];

#[derive(Debug, Clone)]
pub struct ExampleMode {
    mode: usize,
    augmented: bool,
    cost: QuadraticCost,
}

impl ExampleMode {
    pub fn new(mode: usize, augmented: bool, cost: QuadraticCost) -> Self {
        assert!(mode < 3, "example systems have three modes");
        ExampleMode { mode, augmented, cost }
    }
}

impl Subsystem for ExampleMode {
    fn state_dim(&self) -> usize {
        if self.augmented {
            4
        } else {
            2
        }
    }

    fn input_dim(&self) -> usize {
        if self.augmented {
            2
        } else {
            1
        }
    }

    fn flow(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let (x1, x2, u1) = (x[0], x[1], u[0]);
        let (f1, f2) = match self.mode {
            0 => (x1 + u1 * x1.sin(), -x2 + u1 * x2.cos()),
            1 => (x2 + u1 * x2.sin(), -x1 - u1 * x1.cos()),
            _ => (-x1 - u1 * x1.sin(), x2 + u1 * x2.cos()),
        };
        if !self.augmented {
            return DVector::from_vec(vec![f1, f2]);
        }
        let [a3, b3, a4, b4] = AUGMENTED[self.mode];
        let (x3, x4, u2) = (x[2], x[3], u[1]);
        DVector::from_vec(vec![f1, f2, a3 * x3 + b3 * x3 * u2, a4 * x4 + b4 * x4 * u2])
    }

    fn flow_jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let nx = self.state_dim();
        let nu = self.input_dim();
        let (x1, x2, u1) = (x[0], x[1], u[0]);
        let mut a = DMatrix::zeros(nx, nx);
        let mut b = DMatrix::zeros(nx, nu);
        match self.mode {
            0 => {
                a[(0, 0)] = 1.0 + u1 * x1.cos();
                a[(1, 1)] = -1.0 - u1 * x2.sin();
                b[(0, 0)] = x1.sin();
                b[(1, 0)] = x2.cos();
            }
            1 => {
                a[(0, 1)] = 1.0 + u1 * x2.cos();
                a[(1, 0)] = -1.0 + u1 * x1.sin();
                b[(0, 0)] = x2.sin();
                b[(1, 0)] = -x1.cos();
            }
            _ => {
                a[(0, 0)] = -1.0 - u1 * x1.cos();
                a[(1, 1)] = 1.0 - u1 * x2.sin();
                b[(0, 0)] = -x1.sin();
                b[(1, 0)] = x2.cos();
            }
        }
        if self.augmented {
            let [a3, b3, a4, b4] = AUGMENTED[self.mode];
            let (x3, x4, u2) = (x[2], x[3], u[1]);
            a[(2, 2)] = a3 + b3 * u2;
            a[(3, 3)] = a4 + b4 * u2;
            b[(2, 1)] = b3 * x3;
            b[(3, 1)] = b4 * x4;
        }
        (a, b)
    }

    fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.cost.value(x, u)
    }

    fn cost_expansion(&self, x: &DVector<f64>, u: &DVector<f64>) -> CostExpansion {
        self.cost.expansion(x, u)
    }

    fn has_analytic_derivatives(&self) -> bool {
        true
    }
}

fn example(augmented: bool, cost_scale: f64) -> SwitchedProblem {
    let (x0, x_goal) = if augmented {
        (vec![2.0, 3.0, 1.0, 1.0], vec![1.0, -1.0, 2.0, 2.0])
    } else {
        (vec![2.0, 3.0], vec![1.0, -1.0])
    };
    let nx = x0.len();
    let nu = if augmented { 2 } else { 1 };
    let x_goal = DVector::from_vec(x_goal);
    let cost = QuadraticCost::new(
        DMatrix::identity(nx, nx),
        DMatrix::identity(nu, nu),
        x_goal.clone(),
        DVector::zeros(nu),
    )
    .scaled(cost_scale);
    let modes: Vec<Arc<dyn Subsystem>> = (0..3)
        .map(|m| Arc::new(ExampleMode::new(m, augmented, cost.clone())) as Arc<dyn Subsystem>)
        .collect();
    let terminal = QuadraticTerminal::new(DMatrix::identity(nx, nx), x_goal).scaled(cost_scale);
    SwitchedProblem::new(modes, Arc::new(terminal), 0.0, 3.0, DVector::from_vec(x0)).expect("static problem is valid")
}

/// `ex1` with every cost weight multiplied by `cost_scale`.
pub fn example1_problem(cost_scale: f64) -> SwitchedProblem {
    example(false, cost_scale)
}

/// `ex2` with every cost weight multiplied by `cost_scale`.
pub fn example2_problem(cost_scale: f64) -> SwitchedProblem {
    example(true, cost_scale)
}

pub fn builtin(name: &str) -> Result<Benchmark> {
    let (problem, cost, times) = match name {
        "ex1" => (example1_problem(1.0), 5.4438, vec![0.2324, 1.0236]),
        "ex2" => (example2_problem(1.0), 10.3888, vec![0.2973, 1.5978]),
        _ => {
            return Err(Error::UnknownBenchmark {
                name: name.to_string(),
                available: BENCHMARK_NAMES.iter().map(|s| s.to_string()).collect(),
            })
        }
    };
    let initial_times = problem.uniform_times();
    Ok(Benchmark {
        name: name.to_string(),
        problem,
        initial_times,
        reference: Some(Reference {
            cost,
            times: SwitchingTimes::new(times),
            cost_rel_tol: 0.01,
            times_abs_tol: 0.05,
        }),
    })
}
