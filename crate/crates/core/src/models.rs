//! Reusable building blocks: quadratic tracking costs and linear subsystems.

use nalgebra::{DMatrix, DVector};

use crate::problem::{CostExpansion, Subsystem, TerminalCost, TerminalExpansion};

/// `0.5 (x - x_g)' Q (x - x_g) + 0.5 (u - u_g)' R (u - u_g) + (x - x_g)' P (u - u_g)`
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub x_goal: DVector<f64>,
    pub u_goal: DVector<f64>,
}

impl QuadraticCost {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, x_goal: DVector<f64>, u_goal: DVector<f64>) -> Self {
        let p = DMatrix::zeros(q.nrows(), r.nrows());
        QuadraticCost {
            q,
            r,
            p,
            x_goal,
            u_goal,
        }
    }

    pub fn with_cross(mut self, p: DMatrix<f64>) -> Self {
        self.p = p;
        self
    }

    pub fn scaled(&self, c: f64) -> Self {
        QuadraticCost {
            q: &self.q * c,
            r: &self.r * c,
            p: &self.p * c,
            x_goal: self.x_goal.clone(),
            u_goal: self.u_goal.clone(),
        }
    }

    pub fn value(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let dx = x - &self.x_goal;
        let du = u - &self.u_goal;
        0.5 * dx.dot(&(&self.q * &dx)) + 0.5 * du.dot(&(&self.r * &du)) + dx.dot(&(&self.p * &du))
    }

    pub fn expansion(&self, x: &DVector<f64>, u: &DVector<f64>) -> CostExpansion {
        let dx = x - &self.x_goal;
        let du = u - &self.u_goal;
        CostExpansion {
            value: self.value(x, u),
            state_gradient: &self.q * &dx + &self.p * &du,
            input_gradient: &self.r * &du + self.p.transpose() * &dx,
            state_hessian: self.q.clone(),
            cross: self.p.clone(),
            input_hessian: self.r.clone(),
        }
    }
}

/// `0.5 (x - x_g)' Q_f (x - x_g)`
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticTerminal {
    pub q_f: DMatrix<f64>,
    pub x_goal: DVector<f64>,
}

impl QuadraticTerminal {
    pub fn new(q_f: DMatrix<f64>, x_goal: DVector<f64>) -> Self {
        QuadraticTerminal { q_f, x_goal }
    }

    pub fn scaled(&self, c: f64) -> Self {
        QuadraticTerminal {
            q_f: &self.q_f * c,
            x_goal: self.x_goal.clone(),
        }
    }
}

impl TerminalCost for QuadraticTerminal {
    fn value(&self, x: &DVector<f64>) -> f64 {
        let dx = x - &self.x_goal;
        0.5 * dx.dot(&(&self.q_f * &dx))
    }

    fn expansion(&self, x: &DVector<f64>) -> TerminalExpansion {
        let dx = x - &self.x_goal;
        TerminalExpansion {
            value: self.value(x),
            gradient: &self.q_f * dx,
            hessian: self.q_f.clone(),
        }
    }
}

/// `x' = A x + B u` with a quadratic running cost.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSubsystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub cost: QuadraticCost,
}

impl LinearSubsystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, cost: QuadraticCost) -> Self {
        LinearSubsystem { a, b, cost }
    }
}

impl Subsystem for LinearSubsystem {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn flow(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.cost.value(x, u)
    }

    fn flow_jacobians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.a.clone(), self.b.clone())
    }

    fn cost_expansion(&self, x: &DVector<f64>, u: &DVector<f64>) -> CostExpansion {
        self.cost.expansion(x, u)
    }

    fn has_analytic_derivatives(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::fd_cost_expansion;

    #[test]
    fn quadratic_expansion_matches_finite_differences() {
        let cost = QuadraticCost::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
            DMatrix::from_element(1, 1, 0.5),
            DVector::from_vec(vec![1.0, -1.0]),
            DVector::from_vec(vec![0.2]),
        )
        .with_cross(DMatrix::from_column_slice(2, 1, &[0.1, -0.4]));
        let sys = LinearSubsystem::new(DMatrix::identity(2, 2), DMatrix::zeros(2, 1), cost);
        let x = DVector::from_vec(vec![0.3, 2.0]);
        let u = DVector::from_vec(vec![-1.5]);
        let exact = sys.cost_expansion(&x, &u);
        let fd = fd_cost_expansion(&sys, &x, &u);
        assert!((exact.state_gradient - fd.state_gradient).amax() < 1e-7);
        assert!((exact.input_gradient - fd.input_gradient).amax() < 1e-7);
        assert!((exact.state_hessian - fd.state_hessian).amax() < 1e-5);
        assert!((exact.cross - fd.cross).amax() < 1e-5);
        assert!((exact.input_hessian - fd.input_hessian).amax() < 1e-5);
    }
}
