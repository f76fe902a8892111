//! Switched optimal-control problem definition, the normalized time axis and
//! the switching-time polytope.
//!
//! Mode `i` (zero based here) is active on the normalized interval `[i, i + 1)`
//! and the physical time maps affinely onto `[t_i, t_{i+1}]`, so the switching
//! times enter the dynamics only as per-mode duration factors.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fd;

/// Second-order expansion of a running cost at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct CostExpansion {
    pub value: f64,
    /// `dL/dx`
    pub state_gradient: DVector<f64>,
    /// `dL/du`
    pub input_gradient: DVector<f64>,
    /// `d2L/dx2`
    pub state_hessian: DMatrix<f64>,
    /// `d2L/dxdu`, `n_x x n_u`
    pub cross: DMatrix<f64>,
    /// `d2L/du2`
    pub input_hessian: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalExpansion {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// One continuous subsystem: its vector field and running cost.
///
/// The derivative methods default to central finite differences; models with
/// closed-form derivatives override them and report it through
/// [`Subsystem::has_analytic_derivatives`].
pub trait Subsystem: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;

    fn flow(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;

    fn running_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64;

    /// Returns `(df/dx, df/du)`.
    fn flow_jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        fd_flow_jacobians(self, x, u)
    }

    fn cost_expansion(&self, x: &DVector<f64>, u: &DVector<f64>) -> CostExpansion {
        fd_cost_expansion(self, x, u)
    }

    fn has_analytic_derivatives(&self) -> bool {
        false
    }
}

pub trait TerminalCost: Send + Sync {
    fn value(&self, x: &DVector<f64>) -> f64;

    fn expansion(&self, x: &DVector<f64>) -> TerminalExpansion {
        TerminalExpansion {
            value: self.value(x),
            gradient: fd::gradient(|v| self.value(v), x),
            hessian: fd::hessian(|v| self.value(v), x),
        }
    }
}

pub fn fd_flow_jacobians<S: Subsystem + ?Sized>(
    sys: &S,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let a = fd::jacobian(|xp| sys.flow(xp, u), x);
    let b = fd::jacobian(|up| sys.flow(x, up), u);
    (a, b)
}

pub fn fd_cost_expansion<S: Subsystem + ?Sized>(
    sys: &S,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> CostExpansion {
    let nx = x.len();
    let nu = u.len();
    let mut joint = DVector::zeros(nx + nu);
    joint.rows_mut(0, nx).copy_from(x);
    joint.rows_mut(nx, nu).copy_from(u);
    let split = |v: &DVector<f64>| {
        let xs = v.rows(0, nx).into_owned();
        let us = v.rows(nx, nu).into_owned();
        sys.running_cost(&xs, &us)
    };
    let grad = fd::gradient(split, &joint);
    let hess = fd::hessian(split, &joint);
    CostExpansion {
        value: sys.running_cost(x, u),
        state_gradient: grad.rows(0, nx).into_owned(),
        input_gradient: grad.rows(nx, nu).into_owned(),
        state_hessian: hess.view((0, 0), (nx, nx)).into_owned(),
        cross: hess.view((0, nx), (nx, nu)).into_owned(),
        input_hessian: hess.view((nx, nx), (nu, nu)).into_owned(),
    }
}

/// Ordered switching times `t_1 <= ... <= t_{I-1}`, excluding the fixed
/// horizon endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchingTimes(Vec<f64>);

impl SwitchingTimes {
    pub fn new(times: Vec<f64>) -> Self {
        SwitchingTimes(times)
    }

    /// Evenly spaced switching times for `modes` modes.
    pub fn uniform(modes: usize, t_start: f64, t_end: f64) -> Self {
        let span = t_end - t_start;
        SwitchingTimes(
            (1..modes)
                .map(|i| t_start + span * i as f64 / modes as f64)
                .collect(),
        )
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn in_polytope(&self, t_start: f64, t_end: f64) -> bool {
        let mut prev = t_start;
        for &t in &self.0 {
            if !(t >= prev) {
                return false;
            }
            prev = t;
        }
        prev <= t_end
    }

    pub fn check(&self, t_start: f64, t_end: f64) -> Result<()> {
        if self.in_polytope(t_start, t_end) {
            Ok(())
        } else {
            Err(Error::NotInPolytope {
                times: self.0.clone(),
                t_start,
                t_end,
            })
        }
    }

    /// `[t_start, t_1, ..., t_{I-1}, t_end]`.
    pub fn boundaries(&self, t_start: f64, t_end: f64) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.0.len() + 2);
        b.push(t_start);
        b.extend_from_slice(&self.0);
        b.push(t_end);
        b
    }

    /// Sum of squared differences, the warm-start similarity measure.
    pub fn squared_distance(&self, other: &SwitchingTimes) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    pub fn max_abs_difference(&self, other: &SwitchingTimes) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl From<Vec<f64>> for SwitchingTimes {
    fn from(v: Vec<f64>) -> Self {
        SwitchingTimes(v)
    }
}

/// Physical time for normalized time `z`.
pub fn map_z_to_t(z: f64, times: &SwitchingTimes, t_start: f64, t_end: f64) -> Result<f64> {
    times.check(t_start, t_end)?;
    let modes = times.len() + 1;
    if !(0.0..=modes as f64).contains(&z) {
        return Err(Error::Domain { z, modes });
    }
    let b = times.boundaries(t_start, t_end);
    let mode = (z.floor() as usize).min(modes - 1);
    Ok(b[mode] + (b[mode + 1] - b[mode]) * (z - mode as f64))
}

pub fn mode_durations(times: &SwitchingTimes, t_start: f64, t_end: f64) -> Result<Vec<f64>> {
    times.check(t_start, t_end)?;
    let b = times.boundaries(t_start, t_end);
    Ok(b.windows(2).map(|w| w[1] - w[0]).collect())
}

/// Extreme points of the ordered-times polytope. Vertex `k` puts its first
/// `k` entries at `t_start` and the rest at `t_end`.
pub fn polytope_vertices(modes: usize, t_start: f64, t_end: f64) -> Vec<SwitchingTimes> {
    let dim = modes.saturating_sub(1);
    (0..modes.max(1))
        .map(|k| {
            SwitchingTimes(
                (0..dim)
                    .map(|e| if e < k { t_start } else { t_end })
                    .collect(),
            )
        })
        .collect()
}

/// Uniform normalized-time grid with `nodes_per_mode` steps in each mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormalizedGrid {
    modes: usize,
    nodes_per_mode: usize,
}

pub const DEFAULT_NODES_PER_MODE: usize = 200;

impl NormalizedGrid {
    pub fn new(modes: usize, nodes_per_mode: usize) -> Result<Self> {
        if modes == 0 || nodes_per_mode == 0 {
            return Err(Error::InvalidProblem(
                "grid needs at least one mode and one step per mode".into(),
            ));
        }
        Ok(NormalizedGrid {
            modes,
            nodes_per_mode,
        })
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn nodes_per_mode(&self) -> usize {
        self.nodes_per_mode
    }

    pub fn step(&self) -> f64 {
        1.0 / self.nodes_per_mode as f64
    }

    pub fn node_count(&self) -> usize {
        self.modes * self.nodes_per_mode + 1
    }

    pub fn z_node(&self, node: usize) -> f64 {
        node as f64 / self.nodes_per_mode as f64
    }

    pub fn z_nodes(&self) -> Vec<f64> {
        (0..self.node_count()).map(|k| self.z_node(k)).collect()
    }

    /// Samples per mode: every node plus every step midpoint.
    pub fn samples_per_mode(&self) -> usize {
        2 * self.nodes_per_mode + 1
    }

    pub fn sample_z(&self, mode: usize, sample: usize) -> f64 {
        mode as f64 + sample as f64 / (2 * self.nodes_per_mode) as f64
    }

    /// Mode owning a node. Integer nodes belong to the mode that starts there;
    /// the final node belongs to the last mode.
    pub fn mode_of_node(&self, node: usize) -> usize {
        (node / self.nodes_per_mode).min(self.modes - 1)
    }

    /// `(mode, sample)` location of a node under the left-closed convention.
    pub fn node_sample(&self, node: usize) -> (usize, usize) {
        let mode = self.mode_of_node(node);
        (mode, 2 * (node - mode * self.nodes_per_mode))
    }

    pub fn global_node(&self, mode: usize, sample: usize) -> usize {
        mode * self.nodes_per_mode + sample / 2
    }
}

/// Values stored per mode at every node and step midpoint. Switch nodes are
/// stored twice (end of one mode, start of the next) so quantities that jump
/// across a switch keep both one-sided limits.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSamples<T> {
    grid: NormalizedGrid,
    data: Vec<T>,
}

impl<T> ModeSamples<T> {
    pub fn from_fn(grid: NormalizedGrid, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let per = grid.samples_per_mode();
        let mut data = Vec::with_capacity(grid.modes() * per);
        for m in 0..grid.modes() {
            for j in 0..per {
                data.push(f(m, j));
            }
        }
        ModeSamples { grid, data }
    }

    pub fn grid(&self) -> NormalizedGrid {
        self.grid
    }

    pub fn get(&self, mode: usize, sample: usize) -> &T {
        &self.data[mode * self.grid.samples_per_mode() + sample]
    }

    pub fn get_mut(&mut self, mode: usize, sample: usize) -> &mut T {
        let per = self.grid.samples_per_mode();
        &mut self.data[mode * per + sample]
    }

    pub fn set(&mut self, mode: usize, sample: usize, value: T) {
        *self.get_mut(mode, sample) = value;
    }

    /// Node value under the left-closed convention.
    pub fn node(&self, node: usize) -> &T {
        let (m, j) = self.grid.node_sample(node);
        self.get(m, j)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &T> + '_ {
        (0..self.grid.node_count()).map(move |k| self.node(k))
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> + '_ {
        self.data.iter()
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModeSamples<U> {
        ModeSamples {
            grid: self.grid,
            data: self.data.iter().map(&mut f).collect(),
        }
    }
}

impl<T: Clone> ModeSamples<T> {
    pub fn filled(grid: NormalizedGrid, value: T) -> Self {
        ModeSamples {
            grid,
            data: vec![value; grid.modes() * grid.samples_per_mode()],
        }
    }
}

/// A switched optimal-control problem with a fixed mode sequence.
#[derive(Clone)]
pub struct SwitchedProblem {
    subsystems: Vec<Arc<dyn Subsystem>>,
    terminal: Arc<dyn TerminalCost>,
    t_start: f64,
    t_end: f64,
    x0: DVector<f64>,
}

impl fmt::Debug for SwitchedProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SwitchedProblem")
            .field("modes", &self.subsystems.len())
            .field("state_dim", &self.state_dim())
            .field("input_dim", &self.input_dim())
            .field("t_start", &self.t_start)
            .field("t_end", &self.t_end)
            .field("x0", &self.x0.as_slice())
            .finish()
    }
}

impl SwitchedProblem {
    pub fn new(
        subsystems: Vec<Arc<dyn Subsystem>>,
        terminal: Arc<dyn TerminalCost>,
        t_start: f64,
        t_end: f64,
        x0: DVector<f64>,
    ) -> Result<Self> {
        if subsystems.is_empty() {
            return Err(Error::InvalidProblem("at least one mode is required".into()));
        }
        if !(t_start < t_end) {
            return Err(Error::InvalidProblem(format!(
                "horizon [{t_start}, {t_end}] is empty"
            )));
        }
        let nx = subsystems[0].state_dim();
        let nu = subsystems[0].input_dim();
        if x0.len() != nx {
            return Err(Error::Dimension(format!(
                "x0 has {} entries, subsystems expect {nx}",
                x0.len()
            )));
        }
        for (i, s) in subsystems.iter().enumerate() {
            if s.state_dim() != nx || s.input_dim() != nu {
                return Err(Error::Dimension(format!(
                    "mode {i} is ({}, {}), mode 0 is ({nx}, {nu})",
                    s.state_dim(),
                    s.input_dim()
                )));
            }
        }
        Ok(SwitchedProblem {
            subsystems,
            terminal,
            t_start,
            t_end,
            x0,
        })
    }

    pub fn modes(&self) -> usize {
        self.subsystems.len()
    }

    pub fn subsystem(&self, mode: usize) -> &dyn Subsystem {
        self.subsystems[mode].as_ref()
    }

    pub fn subsystems(&self) -> &[Arc<dyn Subsystem>] {
        &self.subsystems
    }

    pub fn terminal_arc(&self) -> Arc<dyn TerminalCost> {
        self.terminal.clone()
    }

    pub fn terminal(&self) -> &dyn TerminalCost {
        self.terminal.as_ref()
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.x0
    }

    pub fn state_dim(&self) -> usize {
        self.x0.len()
    }

    pub fn input_dim(&self) -> usize {
        self.subsystems[0].input_dim()
    }

    pub fn check_times(&self, times: &SwitchingTimes) -> Result<()> {
        if times.len() + 1 != self.modes() {
            return Err(Error::Dimension(format!(
                "{} switching times for {} modes",
                times.len(),
                self.modes()
            )));
        }
        times.check(self.t_start, self.t_end)
    }

    pub fn mode_durations(&self, times: &SwitchingTimes) -> Result<Vec<f64>> {
        self.check_times(times)?;
        mode_durations(times, self.t_start, self.t_end)
    }

    pub fn map_z_to_t(&self, z: f64, times: &SwitchingTimes) -> Result<f64> {
        self.check_times(times)?;
        map_z_to_t(z, times, self.t_start, self.t_end)
    }

    pub fn uniform_times(&self) -> SwitchingTimes {
        SwitchingTimes::uniform(self.modes(), self.t_start, self.t_end)
    }

    pub fn vertices(&self) -> Vec<SwitchingTimes> {
        polytope_vertices(self.modes(), self.t_start, self.t_end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagnosticKind {
    DimensionMismatch,
    NonFinite,
    JacobianMismatch,
    CostExpansionMismatch,
    RNotPositiveDefinite,
    QNotSymmetric,
    TerminalNotPositiveSemidefinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub severity: Severity,
    pub kind: DiagnosticKind,
    /// `None` for the terminal cost.
    pub mode: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub diagnostics: Vec<Diagnostic>,
}

impl ValidationReport {
    pub fn error_count(&self) -> usize {
        self.diagnostics
            .iter()
            .filter(|d| d.severity == Severity::Error)
            .count()
    }

    pub fn is_ok(&self) -> bool {
        self.error_count() == 0
    }

    pub fn has(&self, kind: DiagnosticKind) -> bool {
        self.diagnostics.iter().any(|d| d.kind == kind)
    }
}

/// Relative tolerance for analytic-vs-finite-difference derivative audits.
pub const DERIVATIVE_AUDIT_TOLERANCE: f64 = 1e-5;
const AUDIT_SAMPLES: usize = 8;
const AUDIT_SEED: u64 = 0x5eed;

fn relative_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    (a - b).amax() / b.amax().max(1.0)
}

fn symmetric_min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min()
}

/// Audits dimensions, derivatives and weight definiteness of every mode at
/// `x0` and at seeded random points around it. Never fails; problems are
/// reported as diagnostics.
pub fn validate_problem(problem: &SwitchedProblem) -> ValidationReport {
    let mut report = ValidationReport::default();
    let nx = problem.state_dim();
    let nu = problem.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(AUDIT_SEED);

    let mut points = vec![(problem.x0().clone(), DVector::zeros(nu))];
    for _ in 0..AUDIT_SAMPLES {
        let x = problem.x0() + DVector::from_fn(nx, |_, _| rng.random_range(-1.0..1.0));
        let u = DVector::from_fn(nu, |_, _| rng.random_range(-1.0..1.0));
        points.push((x, u));
    }

    let mut push = |severity, kind, mode, message: String| {
        report.diagnostics.push(Diagnostic {
            severity,
            kind,
            mode,
            message,
        })
    };

    'modes: for mode in 0..problem.modes() {
        let sys = problem.subsystem(mode);
        for (x, u) in &points {
            let f = sys.flow(x, u);
            if f.len() != nx {
                push(
                    Severity::Error,
                    DiagnosticKind::DimensionMismatch,
                    Some(mode),
                    format!("flow returned {} entries, expected {nx}", f.len()),
                );
                continue 'modes;
            }
            if !f.iter().all(|v| v.is_finite()) || !sys.running_cost(x, u).is_finite() {
                push(
                    Severity::Error,
                    DiagnosticKind::NonFinite,
                    Some(mode),
                    format!("non-finite flow or cost at x={:?}", x.as_slice()),
                );
                continue 'modes;
            }
            let (a, b) = sys.flow_jacobians(x, u);
            if a.shape() != (nx, nx) || b.shape() != (nx, nu) {
                push(
                    Severity::Error,
                    DiagnosticKind::DimensionMismatch,
                    Some(mode),
                    format!("Jacobian shapes {:?} and {:?}", a.shape(), b.shape()),
                );
                continue 'modes;
            }
            let (a_fd, b_fd) = fd_flow_jacobians(sys, x, u);
            let err = relative_error(&a, &a_fd).max(relative_error(&b, &b_fd));
            if err > DERIVATIVE_AUDIT_TOLERANCE {
                push(
                    Severity::Error,
                    DiagnosticKind::JacobianMismatch,
                    Some(mode),
                    format!(
                        "Jacobian differs from finite differences by {err:.3e} at x={:?}",
                        x.as_slice()
                    ),
                );
                continue 'modes;
            }

            let ce = sys.cost_expansion(x, u);
            if ce.state_hessian.shape() != (nx, nx)
                || ce.cross.shape() != (nx, nu)
                || ce.input_hessian.shape() != (nu, nu)
                || ce.state_gradient.len() != nx
                || ce.input_gradient.len() != nu
            {
                push(
                    Severity::Error,
                    DiagnosticKind::DimensionMismatch,
                    Some(mode),
                    "cost expansion has wrong shapes".into(),
                );
                continue 'modes;
            }
            if sys.has_analytic_derivatives() {
                let fd_ce = fd_cost_expansion(sys, x, u);
                let grad_err = relative_error(
                    &DMatrix::from_column_slice(nx, 1, ce.state_gradient.as_slice()),
                    &DMatrix::from_column_slice(nx, 1, fd_ce.state_gradient.as_slice()),
                )
                .max(relative_error(
                    &DMatrix::from_column_slice(nu, 1, ce.input_gradient.as_slice()),
                    &DMatrix::from_column_slice(nu, 1, fd_ce.input_gradient.as_slice()),
                ));
                // second differences carry about 1e-7 relative noise
                let hess_err = relative_error(&ce.state_hessian, &fd_ce.state_hessian)
                    .max(relative_error(&ce.input_hessian, &fd_ce.input_hessian))
                    .max(relative_error(&ce.cross, &fd_ce.cross));
                if grad_err > DERIVATIVE_AUDIT_TOLERANCE || hess_err > 1e-4 {
                    push(
                        Severity::Error,
                        DiagnosticKind::CostExpansionMismatch,
                        Some(mode),
                        format!(
                            "cost expansion differs from finite differences \
                             (gradient {grad_err:.3e}, Hessian {hess_err:.3e})"
                        ),
                    );
                    continue 'modes;
                }
            }
            let asym = (&ce.state_hessian - ce.state_hessian.transpose()).amax();
            if asym > 1e-8 * ce.state_hessian.amax().max(1.0) {
                push(
                    Severity::Warning,
                    DiagnosticKind::QNotSymmetric,
                    Some(mode),
                    format!("Q asymmetric by {asym:.3e}; it will be symmetrized"),
                );
            }
            let r_min = symmetric_min_eigenvalue(&ce.input_hessian);
            let r_sym = (&ce.input_hessian - ce.input_hessian.transpose()).amax();
            if !(r_min > 0.0) || r_sym > 1e-8 * ce.input_hessian.amax().max(1.0) {
                push(
                    Severity::Error,
                    DiagnosticKind::RNotPositiveDefinite,
                    Some(mode),
                    format!(
                        "R not positive definite (min eigenvalue {r_min:.3e}) at x={:?}",
                        x.as_slice()
                    ),
                );
                continue 'modes;
            }
        }
    }

    for (x, _) in &points {
        let te = problem.terminal().expansion(x);
        if te.gradient.len() != nx || te.hessian.shape() != (nx, nx) {
            push(
                Severity::Error,
                DiagnosticKind::DimensionMismatch,
                None,
                "terminal expansion has wrong shapes".into(),
            );
            break;
        }
        let lambda = symmetric_min_eigenvalue(&te.hessian);
        if lambda < -1e-8 * te.hessian.amax().max(1.0) {
            push(
                Severity::Error,
                DiagnosticKind::TerminalNotPositiveSemidefinite,
                None,
                format!("terminal Hessian has eigenvalue {lambda:.3e}"),
            );
            break;
        }
    }
    report
}
