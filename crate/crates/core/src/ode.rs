//! One RK4 step over a grid interval, halved recursively where the local
//! Lipschitz estimate puts the step outside the stable region.

use nalgebra::DVector;

/// Largest accepted `|dz| * rho`, with `rho` the stage-slope estimate.
pub(crate) const STIFFNESS_LIMIT: f64 = 1.0;
/// Bisection depth cap, so one grid step is never cut into more than 65536 pieces.
pub(crate) const MAX_DEPTH: u32 = 16;

/// Result of integrating across one grid step.
pub(crate) struct Step {
    pub end: DVector<f64>,
    /// State at the step midpoint when the step was subdivided.
    pub mid: Option<DVector<f64>>,
}

/// Integrates `y' = f(tau, y)` from local position `tau = 0` to `tau = 1`
/// (or backwards when `dz < 0`), where one unit of `tau` spans `|dz|` in `z`.
/// `k_start` is the slope at the starting end. A single classical step is
/// taken unless `|dz| * rho > STIFFNESS_LIMIT`, where `rho` is the largest
/// slope-difference ratio `|f(c, Y) - f(c, Y')| / |Y - Y'|` over the pairs
/// `(y0, Y2)` and `(Y2, Y3)` at the midpoint position `c`, or the increment
/// outgrows both `|y0|` and twice the Euler increment.
pub(crate) fn rk4_step<F>(f: &mut F, dz: f64, y0: &DVector<f64>, k_start: &DVector<f64>) -> Step
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
{
    rk4_step_bounded(f, &mut |_: f64, _: &DVector<f64>| 0.0, dz, y0, k_start)
}

/// As [`rk4_step`], with `bound(tau, y)` an upper bound on the spectral
/// radius of `df/dy` (per unit `z`), checked at both ends of every piece.
pub(crate) fn rk4_step_bounded<F, B>(f: &mut F, bound: &mut B, dz: f64, y0: &DVector<f64>, k_start: &DVector<f64>) -> Step
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
    B: FnMut(f64, &DVector<f64>) -> f64,
{
    let (a, b) = if dz >= 0.0 { (0.0, 1.0) } else { (1.0, 0.0) };
    let mut sys = Pieces { f, bound };
    if let Some(end) = sys.attempt(a, b, dz, y0, k_start) {
        return Step { end, mid: None };
    }
    let mid = sys.split(a, 0.5, dz * 0.5, y0, k_start, 1);
    let k_mid = (sys.f)(0.5, &mid);
    let end = sys.split(0.5, b, dz * 0.5, &mid, &k_mid, 1);
    Step { end, mid: Some(mid) }
}

struct Pieces<'a, F, B> {
    f: &'a mut F,
    bound: &'a mut B,
}

impl<F, B> Pieces<'_, F, B>
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
    B: FnMut(f64, &DVector<f64>) -> f64,
{
    /// Classical step over `[a, b]`; `None` when it must be split.
    fn attempt(&mut self, a: f64, b: f64, dz: f64, y0: &DVector<f64>, k1: &DVector<f64>) -> Option<DVector<f64>> {
        let (end, stiffness) = self.stage_states(a, b, dz, y0, k1);
        let finite = end.iter().all(|v| v.is_finite());
        (finite && stiffness <= STIFFNESS_LIMIT).then_some(end)
    }

    fn stage_states(&mut self, a: f64, b: f64, dz: f64, y0: &DVector<f64>, k1: &DVector<f64>) -> (DVector<f64>, f64) {
        let f = &mut *self.f;
        let c = 0.5 * (a + b);
        let y2 = y0 + k1 * (0.5 * dz);
        let k2 = f(c, &y2);
        let y3 = y0 + &k2 * (0.5 * dz);
        let k3 = f(c, &y3);
        let y4 = y0 + &k3 * dz;
        let k4 = f(b, &y4);
        let k_c = f(c, y0);
        let ratio = |dk: DVector<f64>, dy: DVector<f64>| {
            let dy = dy.norm();
            if dy > 0.0 {
                dk.norm() / dy
            } else {
                0.0
            }
        };
        let estimate = ratio(&k2 - k_c, &y2 - y0).max(ratio(&k3 - &k2, &y3 - &y2));
        let end = y0 + (k1 + (k2 + k3) * 2.0 + k4) * (dz / 6.0);
        let growth = (&end - y0).norm();
        if growth > y0.norm() + 2.0 * dz.abs() * k1.norm() || !end.iter().all(|v| v.is_finite()) {
            return (end, f64::INFINITY);
        }
        let rho = estimate.max((self.bound)(a, y0)).max((self.bound)(b, &end));
        (end, dz.abs() * rho)
    }

    fn split(&mut self, a: f64, b: f64, dz: f64, y0: &DVector<f64>, k1: &DVector<f64>, depth: u32) -> DVector<f64> {
        if depth >= MAX_DEPTH {
            return self.stage_states(a, b, dz, y0, k1).0;
        }
        if let Some(end) = self.attempt(a, b, dz, y0, k1) {
            return end;
        }
        let c = 0.5 * (a + b);
        let mid = self.split(a, c, dz * 0.5, y0, k1, depth + 1);
        let k_mid = (self.f)(c, &mid);
        self.split(c, b, dz * 0.5, &mid, &k_mid, depth + 1)
    }
}
