//! Two-level clustering of a feeder into subtree areas and subsubtree
//! subareas.
//!
//! An area is a bus together with all of its descendants. Within an area,
//! subareas are again full subtrees; the buses of an area outside every
//! subarea form its remainder. Buses outside every area are unclustered.

use std::collections::{BTreeSet, HashMap};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, PhaseSet, SUBSTATION};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subarea {
    pub index: usize,
    pub root: usize,
    pub members: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Area {
    pub index: usize,
    pub root: usize,
    pub members: Vec<usize>,
    pub subareas: Vec<Subarea>,
    pub remainder: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PartitionHierarchy {
    pub areas: Vec<Area>,
    pub unclustered: Vec<usize>,
}

/// Which scope a bus belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Owner {
    Unclustered,
    AreaRemainder(usize),
    Subarea(usize, usize),
}

impl Owner {
    pub fn area(self) -> Option<usize> {
        match self {
            Owner::Unclustered => None,
            Owner::AreaRemainder(k) | Owner::Subarea(k, _) => Some(k),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ViolationKind {
    UnknownBus,
    Substation,
    SubtreeClosure,
    Overlap,
    Coverage,
    RootPhase,
    Remainder,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub buses: Vec<usize>,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, kind: ViolationKind, buses: Vec<usize>, message: impl Into<String>) {
        self.violations.push(Violation {
            kind,
            buses,
            message: message.into(),
        });
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "partition is valid");
        }
        for v in &self.violations {
            writeln!(f, "{:?}: {} (buses {:?})", v.kind, v.message, v.buses)?;
        }
        Ok(())
    }
}

fn sorted_subtree(net: &Network, root: usize) -> Result<Vec<usize>> {
    let mut s = net.subtree(root)?;
    s.sort_unstable();
    Ok(s)
}

impl PartitionHierarchy {
    /// Every non-substation bus unclustered.
    pub fn trivial(net: &Network) -> Self {
        PartitionHierarchy {
            areas: Vec::new(),
            unclustered: net
                .buses()
                .iter()
                .map(|b| b.id)
                .filter(|&id| id != SUBSTATION)
                .collect(),
        }
    }

    /// Derives member sets from area and subarea roots and validates the result.
    pub fn from_roots(net: &Network, roots: &[(usize, Vec<usize>)]) -> Result<Self> {
        let mut areas = Vec::with_capacity(roots.len());
        let mut clustered = BTreeSet::new();
        for (k, (root, sub_roots)) in roots.iter().enumerate() {
            let members = sorted_subtree(net, *root)?;
            let mut subareas = Vec::with_capacity(sub_roots.len());
            let mut in_sub = BTreeSet::new();
            for (m, &sr) in sub_roots.iter().enumerate() {
                let sm = sorted_subtree(net, sr)?;
                in_sub.extend(sm.iter().copied());
                subareas.push(Subarea {
                    index: m,
                    root: sr,
                    members: sm,
                });
            }
            let remainder = members
                .iter()
                .copied()
                .filter(|b| !in_sub.contains(b))
                .collect();
            clustered.extend(members.iter().copied());
            areas.push(Area {
                index: k,
                root: *root,
                members,
                subareas,
                remainder,
            });
        }
        let unclustered = net
            .buses()
            .iter()
            .map(|b| b.id)
            .filter(|id| *id != SUBSTATION && !clustered.contains(id))
            .collect();
        let part = PartitionHierarchy { areas, unclustered };
        let report = validate_partition(net, &part);
        if !report.is_valid() {
            return Err(Error::Partition(report.to_string()));
        }
        Ok(part)
    }

    pub fn from_json(net: &Network, text: &str) -> Result<Self> {
        let doc: PartitionDocument = serde_json::from_str(text)?;
        Self::from_roots(net, &doc.roots())
    }

    pub fn to_document(&self) -> PartitionDocument {
        PartitionDocument {
            areas: self
                .areas
                .iter()
                .map(|a| AreaDocument {
                    root: a.root,
                    subareas: a
                        .subareas
                        .iter()
                        .map(|s| SubareaDocument { root: s.root })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn area_count(&self) -> usize {
        self.areas.len()
    }

    pub fn subarea_count(&self) -> usize {
        self.areas.iter().map(|a| a.subareas.len()).sum()
    }

    /// Owner of every bus, keyed by bus id. The substation is absent.
    pub fn owners(&self) -> HashMap<usize, Owner> {
        let mut out = HashMap::new();
        for &b in &self.unclustered {
            out.insert(b, Owner::Unclustered);
        }
        for a in &self.areas {
            for &b in &a.remainder {
                out.insert(b, Owner::AreaRemainder(a.index));
            }
            for s in &a.subareas {
                for &b in &s.members {
                    out.insert(b, Owner::Subarea(a.index, s.index));
                }
            }
        }
        out
    }

    /// Same areas with all subareas removed.
    pub fn without_subareas(&self) -> Self {
        let mut part = self.clone();
        for a in &mut part.areas {
            a.subareas.clear();
            a.remainder = a.members.clone();
        }
        part
    }
}

/// Checks subtree closure, disjointness, coverage and root-phase coverage.
pub fn validate_partition(net: &Network, part: &PartitionHierarchy) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut seen: HashMap<usize, String> = HashMap::new();
    let mut claim = |report: &mut ValidationReport, bus: usize, who: String| {
        if let Some(prev) = seen.insert(bus, who.clone()) {
            report.push(
                ViolationKind::Overlap,
                vec![bus],
                format!("bus {bus} claimed by {prev} and {who}"),
            );
        }
    };

    let check_scope =
        |report: &mut ValidationReport, label: &str, root: usize, members: &[usize]| -> bool {
            if !net.contains_bus(root) {
                report.push(
                    ViolationKind::UnknownBus,
                    vec![root],
                    format!("{label} root {root} is not a bus"),
                );
                return false;
            }
            if root == SUBSTATION {
                report.push(
                    ViolationKind::Substation,
                    vec![root],
                    format!("{label} cannot be rooted at the substation"),
                );
                return false;
            }
            let unknown: Vec<usize> = members
                .iter()
                .copied()
                .filter(|&b| !net.contains_bus(b))
                .collect();
            if !unknown.is_empty() {
                report.push(
                    ViolationKind::UnknownBus,
                    unknown,
                    format!("{label} lists unknown buses"),
                );
                return false;
            }
            let expected: BTreeSet<usize> = net
                .subtree(root)
                .expect("root checked")
                .into_iter()
                .collect();
            let listed: BTreeSet<usize> = members.iter().copied().collect();
            let missing: Vec<usize> = expected.difference(&listed).copied().collect();
            let extra: Vec<usize> = listed.difference(&expected).copied().collect();
            if !missing.is_empty() {
                report.push(
                    ViolationKind::SubtreeClosure,
                    missing,
                    format!("subtree closure: {label} rooted at {root} omits descendants"),
                );
            }
            if !extra.is_empty() {
                report.push(
                    ViolationKind::SubtreeClosure,
                    extra,
                    format!("subtree closure: {label} rooted at {root} lists non-descendants"),
                );
            }
            let root_phases = net.phases(root).expect("root checked");
            let stray: Vec<usize> = listed
                .iter()
                .copied()
                .filter(|&b| !net.phases(b).expect("checked").is_subset_of(root_phases))
                .collect();
            if !stray.is_empty() {
                report.push(
                    ViolationKind::RootPhase,
                    stray,
                    format!("{label} root {root} lacks a phase present in its subtree"),
                );
            }
            true
        };

    for area in &part.areas {
        let label = format!("area {}", area.index);
        if !check_scope(&mut report, &label, area.root, &area.members) {
            continue;
        }
        for &b in &area.members {
            claim(&mut report, b, label.clone());
        }
        let area_set: BTreeSet<usize> = area.members.iter().copied().collect();
        let mut in_sub: HashMap<usize, usize> = HashMap::new();
        for sub in &area.subareas {
            let sl = format!("subarea {}_{}", area.index, sub.index);
            if !area_set.contains(&sub.root) {
                report.push(
                    ViolationKind::SubtreeClosure,
                    vec![sub.root],
                    format!("{sl} root lies outside area {}", area.index),
                );
                continue;
            }
            if !check_scope(&mut report, &sl, sub.root, &sub.members) {
                continue;
            }
            for &b in &sub.members {
                if let Some(prev) = in_sub.insert(b, sub.index) {
                    report.push(
                        ViolationKind::Overlap,
                        vec![b],
                        format!("bus {b} in subareas {}_{prev} and {sl}", area.index),
                    );
                }
            }
        }
        let expected_rem: BTreeSet<usize> = area
            .members
            .iter()
            .copied()
            .filter(|b| !in_sub.contains_key(b))
            .collect();
        let rem: BTreeSet<usize> = area.remainder.iter().copied().collect();
        if rem != expected_rem {
            let diff: Vec<usize> = rem.symmetric_difference(&expected_rem).copied().collect();
            report.push(
                ViolationKind::Remainder,
                diff,
                format!("remainder of area {} is inconsistent", area.index),
            );
        }
    }
    for &b in &part.unclustered {
        if !net.contains_bus(b) {
            report.push(
                ViolationKind::UnknownBus,
                vec![b],
                "unclustered set lists an unknown bus",
            );
        } else if b == SUBSTATION {
            report.push(
                ViolationKind::Substation,
                vec![b],
                "the substation is not part of the index space",
            );
        } else {
            claim(&mut report, b, "unclustered".into());
        }
    }
    let uncovered: Vec<usize> = net
        .buses()
        .iter()
        .map(|b| b.id)
        .filter(|id| *id != SUBSTATION && !seen.contains_key(id))
        .collect();
    if !uncovered.is_empty() {
        report.push(
            ViolationKind::Coverage,
            uncovered,
            "buses in neither an area nor the unclustered set",
        );
    }
    report
}

/// Deterministic greedy partition by subtree size.
///
/// Walking buses in post-order (children by ascending id), a bus becomes an
/// area root as soon as its full subtree reaches `target_area_size`, provided
/// no descendant was already taken and the subtree holds at most twice the
/// target. A bus whose subtree jumps past twice the target in one step
/// instead takes those of its children holding at least half the target.
/// Any bus with a taken descendant can no longer be a root, so areas remain
/// full subtrees. Subareas come from the same rule applied below each area
/// root with `target_subarea_size`.
pub fn auto_partition(
    net: &Network,
    target_area_size: usize,
    target_subarea_size: usize,
) -> PartitionHierarchy {
    let target_area_size = target_area_size.max(1);
    let target_subarea_size = target_subarea_size.max(1);
    let root = net.idx(SUBSTATION).expect("network has a substation");
    let area_roots = greedy_cuts(net, root, target_area_size);
    let roots: Vec<(usize, Vec<usize>)> = area_roots
        .into_iter()
        .map(|r| {
            let subs = greedy_cuts(net, r, target_subarea_size);
            (
                net.id_of(r),
                subs.into_iter().map(|s| net.id_of(s)).collect(),
            )
        })
        .collect();
    PartitionHierarchy::from_roots(net, &roots).expect("greedy cuts are full disjoint subtrees")
}

/// Cut points strictly below `top` (internal indices), sorted by bus id.
fn greedy_cuts(net: &Network, top: usize, target: usize) -> Vec<usize> {
    // Post-order of the subtree under `top`, children visited by ascending id.
    let mut order = Vec::new();
    let mut stack = vec![(top, false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        stack.push((v, true));
        let mut kids: Vec<usize> = net.children_idx(v).to_vec();
        kids.sort_by_key(|&c| std::cmp::Reverse(net.id_of(c)));
        stack.extend(kids.into_iter().map(|c| (c, false)));
    }

    let half = target.div_ceil(2);
    let mut size: HashMap<usize, usize> = HashMap::with_capacity(order.len());
    let mut blocked: HashMap<usize, bool> = HashMap::with_capacity(order.len());
    let mut cuts = Vec::new();
    for &v in &order {
        if v == top {
            break;
        }
        let kids = net.children_idx(v);
        let s = 1 + kids.iter().map(|c| size[c]).sum::<usize>();
        size.insert(v, s);
        let mut is_blocked = kids.iter().any(|c| blocked[c]);
        if !is_blocked && s >= target {
            if s <= 2 * target {
                cuts.push(v);
            } else {
                let mut sorted: Vec<usize> = kids.to_vec();
                sorted.sort_by_key(|&c| net.id_of(c));
                cuts.extend(sorted.into_iter().filter(|c| size[c] >= half));
            }
            is_blocked = true;
        }
        blocked.insert(v, is_blocked);
    }
    cuts.sort_by_key(|&c| net.id_of(c));
    cuts
}

/// Per-phase sums of `mu_over - mu_under` for one scope.
pub type PhaseSums = [f64; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateTable {
    pub areas: Vec<PhaseSums>,
    pub subareas: Vec<Vec<PhaseSums>>,
}

/// Per-area and per-subarea, per-phase sums of the dual difference.
pub fn area_dual_aggregates(
    net: &Network,
    part: &PartitionHierarchy,
    mu_over: &DVector<f64>,
    mu_under: &DVector<f64>,
) -> Result<AggregateTable> {
    let n = net.n_flat();
    for len in [mu_over.len(), mu_under.len()] {
        if len != n {
            return Err(Error::Dimension {
                expected: n,
                got: len,
            });
        }
    }
    let sum_over = |buses: &[usize]| -> Result<PhaseSums> {
        let mut s = [0.0; 3];
        let mut sorted = buses.to_vec();
        sorted.sort_unstable();
        for b in sorted {
            for (k, phase) in net.phases(b)?.iter().enumerate() {
                let idx = net.flat_range(b)?.start + k;
                s[phase.code()] += mu_over[idx] - mu_under[idx];
            }
        }
        Ok(s)
    };
    let mut areas = Vec::with_capacity(part.areas.len());
    let mut subareas = Vec::with_capacity(part.areas.len());
    for a in &part.areas {
        areas.push(sum_over(&a.members)?);
        subareas.push(
            a.subareas
                .iter()
                .map(|s| sum_over(&s.members))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(AggregateTable { areas, subareas })
}

/// Union of the phases carried by a set of buses.
pub fn phases_of(net: &Network, buses: &[usize]) -> Result<PhaseSet> {
    buses
        .iter()
        .try_fold(PhaseSet::EMPTY, |acc, &b| Ok(acc.union(net.phases(b)?)))
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SubareaDocument {
    pub root: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AreaDocument {
    pub root: usize,
    #[serde(default)]
    pub subareas: Vec<SubareaDocument>,
}

/// On-disk partition: roots only, members follow from subtree closure.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PartitionDocument {
    pub areas: Vec<AreaDocument>,
}

impl PartitionDocument {
    pub fn roots(&self) -> Vec<(usize, Vec<usize>)> {
        self.areas
            .iter()
            .map(|a| (a.root, a.subareas.iter().map(|s| s.root).collect()))
            .collect()
    }
}
