//! Dual-weighted sensitivity sums added to the primal gradients:
//! `g_p = R^T (mu_over - mu_under)` and `g_q = X^T (mu_over - mu_under)`.
//!
//! Three engines compute the same quantity. [`FlatEngine`] multiplies the
//! dense matrices. [`MultilevelEngine`] walks a scope hierarchy (areas, and
//! optionally subareas) in which buses of two disjoint subtrees interact only
//! through the common path of the subtree roots, so each scope exchanges
//! per-phase dual sums instead of per-bus values.

mod audit;
mod flat;
mod multilevel;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Network;
use crate::opf::DualState;
use crate::partition::PartitionHierarchy;
use crate::sensitivity::SensitivityMatrices;

pub use audit::{
    privacy_audit, AccessKind, AggregateMessage, AuditRecord, AuditReport, ScopeId, ScopeMap,
};
pub use flat::FlatEngine;
pub use multilevel::MultilevelEngine;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    Flat,
    Bilevel,
    Trilevel,
}

impl EngineKind {
    pub const ALL: [EngineKind; 3] = [EngineKind::Flat, EngineKind::Bilevel, EngineKind::Trilevel];

    pub fn name(self) -> &'static str {
        match self {
            EngineKind::Flat => "flat",
            EngineKind::Bilevel => "bilevel",
            EngineKind::Trilevel => "trilevel",
        }
    }
}

impl fmt::Display for EngineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EngineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(EngineKind::Flat),
            "bilevel" => Ok(EngineKind::Bilevel),
            "trilevel" => Ok(EngineKind::Trilevel),
            other => Err(Error::Validation(format!("unknown engine {other:?}"))),
        }
    }
}

/// Work attributed to one top-level scope (the coordinator or one area,
/// including its subareas).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScopeCost {
    pub scope: ScopeId,
    pub ops: u64,
    pub nanos: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingResult {
    pub g_p: DVector<f64>,
    pub g_q: DVector<f64>,
    /// Multiply-accumulate count under the engine's declared cost model.
    pub op_count: u64,
    pub scope_costs: Vec<ScopeCost>,
}

pub trait CouplingEngine: Send + Sync {
    fn kind(&self) -> EngineKind;

    fn dim(&self) -> usize;

    /// Coupling terms at the given duals. When `audit` is supplied, every
    /// per-bus dual read is logged against the scope performing it.
    fn compute(&self, duals: &DualState, audit: Option<&mut AuditRecord>)
        -> Result<CouplingResult>;

    /// Fresh record preloaded with the topology reads made while planning.
    fn new_audit_record(&self) -> AuditRecord;
}

pub(crate) fn check_duals(dim: usize, duals: &DualState) -> Result<()> {
    for len in [duals.over.len(), duals.under.len()] {
        if len != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: len,
            });
        }
    }
    if !duals.is_nonnegative() {
        return Err(Error::Validation(
            "dual variables must be nonnegative".into(),
        ));
    }
    Ok(())
}

/// Builds an engine of the requested kind. The flat engine needs `sens`;
/// the partition is used by the multilevel engines and for audit ownership.
pub fn build_engine(
    kind: EngineKind,
    net: &Network,
    sens: Option<Arc<SensitivityMatrices>>,
    part: &PartitionHierarchy,
    threads: usize,
) -> Result<Box<dyn CouplingEngine>> {
    Ok(match kind {
        EngineKind::Flat => {
            let sens = sens.unwrap_or_else(|| Arc::new(SensitivityMatrices::build(net)));
            Box::new(FlatEngine::with_partition(sens, net, part)?)
        }
        EngineKind::Bilevel => {
            Box::new(MultilevelEngine::bilevel(net, part)?.with_threads(threads))
        }
        EngineKind::Trilevel => {
            Box::new(MultilevelEngine::trilevel(net, part)?.with_threads(threads))
        }
    })
}

/// One-shot dense evaluation.
pub fn coupling_flat(
    sens: &SensitivityMatrices,
    mu_over: &DVector<f64>,
    mu_under: &DVector<f64>,
) -> Result<CouplingResult> {
    FlatEngine::new(Arc::new(sens.clone())).compute(
        &DualState {
            over: mu_over.clone(),
            under: mu_under.clone(),
        },
        None,
    )
}

/// One-shot area-level evaluation.
pub fn coupling_bilevel(
    net: &Network,
    part: &PartitionHierarchy,
    mu_over: &DVector<f64>,
    mu_under: &DVector<f64>,
) -> Result<CouplingResult> {
    MultilevelEngine::bilevel(net, part)?.compute(
        &DualState {
            over: mu_over.clone(),
            under: mu_under.clone(),
        },
        None,
    )
}

/// One-shot area- and subarea-level evaluation.
pub fn coupling_trilevel(
    net: &Network,
    part: &PartitionHierarchy,
    mu_over: &DVector<f64>,
    mu_under: &DVector<f64>,
) -> Result<CouplingResult> {
    MultilevelEngine::trilevel(net, part)?.compute(
        &DualState {
            over: mu_over.clone(),
            under: mu_under.clone(),
        },
        None,
    )
}
