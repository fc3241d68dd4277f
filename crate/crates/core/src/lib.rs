//! Multi-level primal-dual optimal power flow for radial multi-phase
//! distribution feeders.
//!
//! The crate builds the linearized voltage model of a feeder, solves the
//! voltage-regulation OPF with a projected primal-dual gradient iteration,
//! and evaluates the expensive dual-weighted coupling term with one of three
//! interchangeable engines: a flat dense product, or bi-/tri-level engines
//! that exploit subtree structure so that areas only exchange aggregates.

pub mod coupling;
pub mod error;
pub mod feedergen;
pub mod network;
pub mod opf;
pub mod partition;
pub mod powerflow;
pub mod sensitivity;
pub mod solver;

pub use coupling::{CouplingEngine, CouplingResult, EngineKind};
pub use error::{Error, Result};
pub use network::{Network, Phase, PhaseSet};
pub use opf::{Device, DualState, OpfProblem, SolverConfig, VoltageBounds};
pub use partition::PartitionHierarchy;
pub use sensitivity::SensitivityMatrices;
pub use solver::{SolverState, Trace, VoltageModel};
