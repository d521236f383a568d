//! Gait optimization for dry-friction crawlers driven by a polyhedral
//! sweeping process.
//!
//! The crate is organized bottom up:
//!
//! * [`polytope`]: half-space polyhedra, metric projection, normal cones.
//! * [`sweeping`]: the catching-up discretization of the sweeping process
//!   and periodic orbits of its period map.
//! * [`crawler`]: the multi-block dry-friction crawler reduced to a sweeping
//!   process, its locomotion speed function and subdifferential.
//! * [`transcription`]: discrete periodic optimal control problems over one
//!   period, plain and proximal-regularized.
//! * [`optimizer`]: multistart projected subgradient search over periodic
//!   controls.
//! * [`stationarity`]: discrete adjoint certificates and their residuals.
//! * [`linprog`]: the dense simplex and nonnegative least squares kernels
//!   the other modules share.

pub mod crawler;
pub mod linprog;
pub mod optimizer;
pub mod polytope;
pub mod stationarity;
pub mod sweeping;
pub mod transcription;

pub use crawler::{CrawlerModel, ModelConfig, ModelError, OneLink};
pub use optimizer::{SolveReport, SolverConfig};
pub use polytope::{ActiveSet, ConeDecomposition, Polyhedron, PolytopeError};
pub use stationarity::{DegeneracyClass, ResidualReport, StationarityCertificate};
pub use sweeping::{ControlGrid, DiscreteTrajectory, Dynamics};
pub use transcription::{CostSpec, PmProblem, ProcessProblem, RunningCost, SpeedFn};

/// Formats a float with 17 significant digits, enough to reproduce the
/// exact bit pattern on read-back, independent of locale.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}
