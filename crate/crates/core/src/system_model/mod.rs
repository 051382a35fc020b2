//! System class, constraint boxes, built-in example systems and scenario
//! simulation.

mod builtin;
mod data;
mod model;
mod scenario;
mod sets;

pub use builtin::{BatchReactor, ModelSpec, SaturatingScalar, ScalarIntegrator};
pub use data::DataBatch;
pub use model::{estimate_lipschitz, lipschitz_audit, Dims, LipschitzAudit, ModelFunctions, SystemModel};
pub use scenario::{
    batch_reactor_scenario, motivating_scenario, reactor_reset_times, simulate, InputLaw, InputLawDoc, NoiseLaw,
    NoiseLawDoc, Scenario, ScenarioDoc, Simulation,
};
pub use sets::{BoxDoc, BoxSet, ConstraintSets, SetsDoc};
