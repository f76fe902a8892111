//! Central finite differences.
//!
//! First derivatives use the step `1e-6 * (1 + |v|)` per coordinate. Second
//! derivatives use `1e-4 * (1 + |v|)`: the second difference divides by the
//! squared step, so the first-derivative step would leave only a few digits.

use nalgebra::{DMatrix, DVector};

const FIRST_ORDER_STEP: f64 = 1e-6;
const SECOND_ORDER_STEP: f64 = 1e-4;

fn step(scale: f64, value: f64) -> f64 {
    scale * (1.0 + value.abs())
}

/// Jacobian of a vector map by central differences.
pub fn jacobian<F>(f: F, at: &DVector<f64>) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let rows = f(at).len();
    let mut jac = DMatrix::zeros(rows, at.len());
    let mut probe = at.clone();
    for k in 0..at.len() {
        let h = step(FIRST_ORDER_STEP, at[k]);
        probe[k] = at[k] + h;
        let plus = f(&probe);
        probe[k] = at[k] - h;
        let minus = f(&probe);
        probe[k] = at[k];
        jac.set_column(k, &((plus - minus) / (2.0 * h)));
    }
    jac
}

/// Gradient of a scalar map by central differences.
pub fn gradient<F>(f: F, at: &DVector<f64>) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let mut grad = DVector::zeros(at.len());
    let mut probe = at.clone();
    for k in 0..at.len() {
        let h = step(FIRST_ORDER_STEP, at[k]);
        probe[k] = at[k] + h;
        let plus = f(&probe);
        probe[k] = at[k] - h;
        let minus = f(&probe);
        probe[k] = at[k];
        grad[k] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Symmetric Hessian of a scalar map by second central differences.
pub fn hessian<F>(f: F, at: &DVector<f64>) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    let n = at.len();
    let mut hess = DMatrix::zeros(n, n);
    let mut probe = at.clone();
    let center = f(at);
    for a in 0..n {
        let ha = step(SECOND_ORDER_STEP, at[a]);
        probe[a] = at[a] + ha;
        let plus = f(&probe);
        probe[a] = at[a] - ha;
        let minus = f(&probe);
        probe[a] = at[a];
        hess[(a, a)] = (plus - 2.0 * center + minus) / (ha * ha);
        for b in 0..a {
            let hb = step(SECOND_ORDER_STEP, at[b]);
            let mut eval = |da: f64, db: f64| {
                probe[a] = at[a] + da;
                probe[b] = at[b] + db;
                let v = f(&probe);
                probe[a] = at[a];
                probe[b] = at[b];
                v
            };
            let mixed = (eval(ha, hb) - eval(ha, -hb) - eval(-ha, hb) + eval(-ha, -hb))
                / (4.0 * ha * hb);
            hess[(a, b)] = mixed;
            hess[(b, a)] = mixed;
        }
    }
    hess
}
