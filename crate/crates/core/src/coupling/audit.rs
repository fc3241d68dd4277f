//! Information-flow recording for coupling engines.
//!
//! A scope may read per-bus duals only of buses it owns, and impedances only
//! between buses it owns or roots of its direct child scopes. Everything a
//! child contributes reaches its parent as an [`AggregateMessage`].

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::EngineKind;
use crate::partition::{Owner, PartitionHierarchy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScopeId {
    /// A single computation with access to everything.
    Global,
    /// Central scope owning the unclustered buses.
    Coordinator,
    Area(usize),
    Subarea(usize, usize),
}

impl fmt::Display for ScopeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScopeId::Global => write!(f, "global"),
            ScopeId::Coordinator => write!(f, "coordinator"),
            ScopeId::Area(k) => write!(f, "area {k}"),
            ScopeId::Subarea(k, m) => write!(f, "subarea {k}_{m}"),
        }
    }
}

/// Per-phase dual sum a scope publishes to its parent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMessage {
    pub scope: ScopeId,
    pub root: usize,
    pub sums: [f64; 3],
}

/// Ownership and nesting of scopes for one engine configuration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScopeMap {
    pub owner: HashMap<usize, ScopeId>,
    pub root_of: BTreeMap<ScopeId, usize>,
    pub parent: BTreeMap<ScopeId, ScopeId>,
}

impl ScopeMap {
    /// Scopes as a multilevel engine sees them; with `subareas == false`
    /// an area owns all of its members.
    pub fn for_engine(part: &PartitionHierarchy, subareas: bool) -> Self {
        let mut map = ScopeMap::default();
        for (bus, owner) in part.owners() {
            let scope = match owner {
                Owner::Unclustered => ScopeId::Coordinator,
                Owner::AreaRemainder(k) => ScopeId::Area(k),
                Owner::Subarea(k, m) if subareas => ScopeId::Subarea(k, m),
                Owner::Subarea(k, _) => ScopeId::Area(k),
            };
            map.owner.insert(bus, scope);
        }
        for a in &part.areas {
            map.root_of.insert(ScopeId::Area(a.index), a.root);
            map.parent
                .insert(ScopeId::Area(a.index), ScopeId::Coordinator);
            if subareas {
                for s in &a.subareas {
                    map.root_of
                        .insert(ScopeId::Subarea(a.index, s.index), s.root);
                    map.parent
                        .insert(ScopeId::Subarea(a.index, s.index), ScopeId::Area(a.index));
                }
            }
        }
        map
    }

    fn owner_of(&self, bus: usize) -> ScopeId {
        self.owner
            .get(&bus)
            .copied()
            .unwrap_or(ScopeId::Coordinator)
    }

    /// Bus is owned by `accessor` or is the published root of one of its children.
    fn visible_topology(&self, accessor: ScopeId, bus: usize) -> bool {
        if self.owner_of(bus) == accessor {
            return true;
        }
        self.root_of
            .iter()
            .any(|(scope, &root)| root == bus && self.parent.get(scope) == Some(&accessor))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AccessKind {
    /// Per-bus dual value of `bus`.
    Dual { bus: usize },
    /// Common-path impedance between two buses.
    Impedance { a: usize, b: usize },
    /// Aggregate message received from a child scope.
    Aggregate { from: ScopeId },
    /// Dense sensitivity matrices covering the whole feeder.
    FullTopology,
}

/// Counted accesses of one engine run.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditRecord {
    pub engine: EngineKind,
    pub scopes: ScopeMap,
    pub counts: BTreeMap<(ScopeId, AccessKind), u64>,
}

#[derive(Serialize)]
struct AuditLine<'a> {
    accessor: String,
    #[serde(flatten)]
    access: &'a AccessKind,
    count: u64,
    allowed: bool,
}

impl AuditRecord {
    pub fn new(engine: EngineKind, scopes: ScopeMap) -> Self {
        AuditRecord {
            engine,
            scopes,
            counts: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, accessor: ScopeId, access: AccessKind) {
        *self.counts.entry((accessor, access)).or_insert(0) += 1;
    }

    pub fn merge(&mut self, other: AuditRecord) {
        for (key, n) in other.counts {
            *self.counts.entry(key).or_insert(0) += n;
        }
    }

    fn allowed(&self, accessor: ScopeId, access: &AccessKind) -> bool {
        let s = &self.scopes;
        match (accessor, access) {
            (ScopeId::Global, _) => true,
            (_, AccessKind::FullTopology) => false,
            (_, AccessKind::Dual { bus }) => s.owner_of(*bus) == accessor,
            (_, AccessKind::Impedance { a, b }) => {
                s.visible_topology(accessor, *a) && s.visible_topology(accessor, *b)
            }
            (_, AccessKind::Aggregate { from }) => s.parent.get(from) == Some(&accessor),
        }
    }

    /// One JSON object per distinct (accessor, access) pair.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ((accessor, access), &count) in &self.counts {
            let line = AuditLine {
                accessor: accessor.to_string(),
                access,
                count,
                allowed: self.allowed(*accessor, access),
            };
            out.push_str(&serde_json::to_string(&line).expect("audit lines serialize"));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub engine: Option<EngineKind>,
    /// Some computation read the whole feeder's data in one place.
    pub global_access: bool,
    pub dual_reads: u64,
    pub foreign_dual_reads: u64,
    pub topology_reads: u64,
    pub foreign_topology_reads: u64,
    pub aggregate_reads: u64,
    pub violations: Vec<String>,
}

impl AuditReport {
    /// No scope saw another scope's per-bus data and no global view was used.
    pub fn is_private(&self) -> bool {
        !self.global_access && self.violations.is_empty()
    }
}

/// Classifies every recorded access against the scope rules.
pub fn privacy_audit(record: &AuditRecord) -> AuditReport {
    let mut report = AuditReport {
        engine: Some(record.engine),
        ..AuditReport::default()
    };
    let mut foreign: BTreeMap<(ScopeId, ScopeId, &'static str), u64> = BTreeMap::new();
    for ((accessor, access), &n) in &record.counts {
        if *accessor == ScopeId::Global {
            report.global_access = true;
        }
        let allowed = record.allowed(*accessor, access);
        match access {
            AccessKind::Dual { bus } => {
                report.dual_reads += n;
                if !allowed {
                    report.foreign_dual_reads += n;
                    *foreign
                        .entry((*accessor, record.scopes.owner_of(*bus), "dual"))
                        .or_insert(0) += n;
                }
            }
            AccessKind::Impedance { a, b } => {
                report.topology_reads += n;
                if !allowed {
                    report.foreign_topology_reads += n;
                    let other = if record.scopes.visible_topology(*accessor, *a) {
                        *b
                    } else {
                        *a
                    };
                    *foreign
                        .entry((*accessor, record.scopes.owner_of(other), "impedance"))
                        .or_insert(0) += n;
                }
            }
            AccessKind::Aggregate { from } => {
                report.aggregate_reads += n;
                if !allowed {
                    *foreign.entry((*accessor, *from, "aggregate")).or_insert(0) += n;
                }
            }
            AccessKind::FullTopology => {
                report.topology_reads += n;
                if !allowed {
                    report.foreign_topology_reads += n;
                    *foreign
                        .entry((*accessor, ScopeId::Global, "full topology"))
                        .or_insert(0) += n;
                }
            }
        }
    }
    report.violations = foreign
        .into_iter()
        .map(|((accessor, owner, what), n)| {
            format!("{accessor} read {n} {what} value(s) owned by {owner}")
        })
        .collect();
    report
}
