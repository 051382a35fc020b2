//! State-estimation workbench: full-information, truncated-window,
//! pinned-endpoint and moving-horizon estimation for nonlinear discrete-time
//! systems, the stitched approximate estimator built from parallel window
//! solves, and turnpike/performance diagnostics.
//!
//! All numerics are generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the bottom of this file fix the scalar to `f64`.

// Negated comparisons are deliberate: they also reject NaN. Index loops
// mirror the matrix formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cost;
pub mod error;
pub mod estimators;
pub mod experiment;
pub mod linalg;
pub mod performance;
pub mod scalar;
pub mod solver;
pub mod system_model;
pub mod turnpike;

pub use cost::{CostWeights, EstimateTrajectory, TerminalMode};
pub use error::{Error, Result};
pub use performance::{PerfReport, SummaryRow};
pub use estimators::{ApproxEstimate, EstimationSetup, MheEstimate, WindowCache, WindowSolution};
pub use scalar::Scalar;
pub use solver::{solve, ProblemSpec, SolveReport, SolveStatus, ToleranceConfig};
pub use system_model::{ConstraintSets, DataBatch, Scenario, SystemModel};
pub use turnpike::{EnvelopeFit, GapProfile, Side, SideSelector};

pub type SystemModel64 = SystemModel<f64>;
pub type Scenario64 = Scenario<f64>;
pub type DataBatch64 = DataBatch<f64>;
pub type CostWeights64 = CostWeights<f64>;
pub type Trajectory64 = EstimateTrajectory<f64>;
pub type ProblemSpec64 = ProblemSpec<f64>;
pub type SolveReport64 = SolveReport<f64>;
pub type EstimationSetup64 = EstimationSetup<f64>;
pub type GapProfile64 = turnpike::GapProfile<f64>;
pub type EnvelopeFit64 = turnpike::EnvelopeFit<f64>;
pub type PerfReport64 = performance::PerfReport<f64>;
