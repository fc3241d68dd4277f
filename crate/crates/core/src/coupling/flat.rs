use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;

use super::audit::{AccessKind, AuditRecord, ScopeId, ScopeMap};
use super::{check_duals, CouplingEngine, CouplingResult, EngineKind, ScopeCost};
use crate::error::Result;
use crate::network::Network;
use crate::opf::DualState;
use crate::partition::PartitionHierarchy;
use crate::sensitivity::SensitivityMatrices;

/// Direct dense products `R^T d`, `X^T d`; `2 N^2` multiply-adds per call.
pub struct FlatEngine {
    sens: Arc<SensitivityMatrices>,
    scopes: ScopeMap,
    flat_bus: Vec<usize>,
}

impl FlatEngine {
    pub fn new(sens: Arc<SensitivityMatrices>) -> Self {
        let n = sens.dim();
        FlatEngine {
            sens,
            scopes: ScopeMap::default(),
            flat_bus: (0..n).collect(),
        }
    }

    /// Keeps the partition only to attribute accesses in audit records.
    pub fn with_partition(
        sens: Arc<SensitivityMatrices>,
        net: &Network,
        part: &PartitionHierarchy,
    ) -> Result<Self> {
        let n = sens.dim();
        if net.n_flat() != n {
            return Err(crate::Error::Dimension {
                expected: n,
                got: net.n_flat(),
            });
        }
        Ok(FlatEngine {
            sens,
            scopes: ScopeMap::for_engine(part, false),
            flat_bus: net.flat_entries().iter().map(|&(b, _)| b).collect(),
        })
    }
}

impl CouplingEngine for FlatEngine {
    fn kind(&self) -> EngineKind {
        EngineKind::Flat
    }

    fn dim(&self) -> usize {
        self.sens.dim()
    }

    fn compute(
        &self,
        duals: &DualState,
        audit: Option<&mut AuditRecord>,
    ) -> Result<CouplingResult> {
        let n = self.dim();
        check_duals(n, duals)?;
        let start = Instant::now();
        let d = duals.difference();
        if let Some(rec) = audit {
            for &bus in &self.flat_bus {
                rec.record(ScopeId::Global, AccessKind::Dual { bus });
            }
        }
        let mut g_p = DVector::zeros(n);
        let mut g_q = DVector::zeros(n);
        g_p.gemv_tr(1.0, &self.sens.r, &d, 0.0);
        g_q.gemv_tr(1.0, &self.sens.x, &d, 0.0);
        let op_count = 2 * (n as u64) * (n as u64);
        Ok(CouplingResult {
            g_p,
            g_q,
            op_count,
            scope_costs: vec![ScopeCost {
                scope: ScopeId::Global,
                ops: op_count,
                nanos: start.elapsed().as_nanos() as u64,
            }],
        })
    }

    fn new_audit_record(&self) -> AuditRecord {
        let mut rec = AuditRecord::new(EngineKind::Flat, self.scopes.clone());
        // The dense matrices encode the whole topology.
        rec.record(ScopeId::Global, AccessKind::FullTopology);
        rec
    }
}
