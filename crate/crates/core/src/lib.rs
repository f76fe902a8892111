//! Optimal control of switched systems with a fixed mode sequence.
//!
//! The switching times are optimized in an outer loop; for fixed times the
//! continuous input is synthesized by a sequential linear-quadratic (SLQ)
//! solver on a normalized time axis in which every mode spans a unit
//! interval. Gradients of the optimal cost with respect to the switching
//! times come from sensitivity equations of the SLQ value function.

pub mod benchmarks;
pub mod error;
pub mod fd;
pub mod gradient;
pub mod lq;
pub mod models;
mod ode;
pub mod outer;
pub mod problem;
pub mod rollout;
pub mod slq;

pub use error::{Error, Result};
pub use problem::{NormalizedGrid, SwitchedProblem, SwitchingTimes};
pub use rollout::{SlqPolicy, Trajectory};
pub use slq::{slq_solve, SlqReport, SlqSettings};
