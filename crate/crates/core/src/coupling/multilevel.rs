//! Bi- and tri-level coupling engines.
//!
//! Every scope (the coordinator, an area, a subarea) owns a set of buses and
//! has child scopes that are disjoint subtrees. For a target bus `i` owned by
//! a scope, the coupling sum splits into
//!
//! * exact pairwise terms against the scope's own buses,
//! * one term per child scope using the child root's impedance to `i` and the
//!   child's per-phase dual sum,
//! * a per-phase field inherited from the parent, identical for every bus of
//!   the scope because all of them share the same common path with anything
//!   outside the scope.
//!
//! The field a child receives is its parent's field plus the parent's own
//! buses and the other children, evaluated at the child root. With only
//! areas this reproduces the bi-level decomposition; adding subareas inside
//! each area gives the tri-level one.

use std::time::Instant;

use nalgebra::DVector;
use num_complex::Complex64;
use rayon::prelude::*;

use super::audit::{AccessKind, AuditRecord, ScopeId, ScopeMap};
use super::{check_duals, CouplingEngine, CouplingResult, EngineKind, ScopeCost};
use crate::error::{Error, Result};
use crate::network::{Network, Phase, PhaseMatrix};
use crate::opf::DualState;
use crate::partition::{validate_partition, PartitionHierarchy};
use crate::sensitivity::rotated_conj;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Per-phase complex field, indexed by phase code.
type Field = [Complex64; 3];

struct ScopePlan {
    id: ScopeId,
    /// Owned flat indices, ascending.
    own: Vec<usize>,
    own_phase: Vec<Phase>,
    own_bus: Vec<usize>,
    children: Vec<usize>,
    /// Slot = (child, phase of the child root); `slots[k]` lists them in order.
    slots: Vec<(usize, Phase)>,
    /// own x own, target-major.
    k_own: Vec<Complex64>,
    /// own x slots: child roots acting on own buses.
    k_child_own: Vec<Complex64>,
    /// slots x slots: other children acting on a child root (same-child block unused).
    k_child_child: Vec<Complex64>,
    /// slots x own: own buses acting on a child root.
    k_own_child: Vec<Complex64>,
}

impl ScopePlan {
    fn ops_per_call(&self) -> u64 {
        let own = self.own.len() as u64;
        let slots = self.slots.len() as u64;
        let same_child: u64 = self
            .children
            .iter()
            .map(|&c| {
                let k = self.slots.iter().filter(|s| s.0 == c).count() as u64;
                k * k
            })
            .sum();
        // A complex kernel times a real dual costs two real multiply-adds,
        // the same as one entry of R and one of X in the dense product.
        let products = own * own + 2 * own * slots + (slots * slots - same_child);
        let aggregation = own + 3 * self.children.len() as u64;
        2 * products + aggregation + 2 * slots + 2 * own
    }
}

/// Hierarchical engine over an area partition, with or without subareas.
pub struct MultilevelEngine {
    kind: EngineKind,
    dim: usize,
    plans: Vec<ScopePlan>,
    scopes: ScopeMap,
    plan_reads: AuditRecord,
    threads: usize,
}

impl MultilevelEngine {
    /// Areas only; subareas in `part` are ignored.
    pub fn bilevel(net: &Network, part: &PartitionHierarchy) -> Result<Self> {
        Self::build(net, &part.without_subareas(), EngineKind::Bilevel)
    }

    /// Areas and their subareas.
    pub fn trilevel(net: &Network, part: &PartitionHierarchy) -> Result<Self> {
        Self::build(net, part, EngineKind::Trilevel)
    }

    /// Worker threads for per-area work; 1 runs inline.
    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    fn build(net: &Network, part: &PartitionHierarchy, kind: EngineKind) -> Result<Self> {
        let report = validate_partition(net, part);
        if !report.is_valid() {
            return Err(Error::Partition(report.to_string()));
        }
        let subareas = kind == EngineKind::Trilevel;
        let scopes = ScopeMap::for_engine(part, subareas);
        let mut plan_reads = AuditRecord::new(kind, scopes.clone());

        // Scope tree in pre-order: coordinator, then each area followed by its subareas.
        struct Spec {
            id: ScopeId,
            buses: Vec<usize>,
            children: Vec<usize>,
            root: Option<usize>,
        }
        let mut specs = vec![Spec {
            id: ScopeId::Coordinator,
            buses: part.unclustered.clone(),
            children: vec![],
            root: None,
        }];
        for area in &part.areas {
            let k = specs.len();
            specs[0].children.push(k);
            let (own, subs): (Vec<usize>, &[_]) = if subareas {
                (area.remainder.clone(), &area.subareas)
            } else {
                (area.members.clone(), &[])
            };
            specs.push(Spec {
                id: ScopeId::Area(area.index),
                buses: own,
                children: vec![],
                root: Some(area.root),
            });
            for sub in subs {
                let m = specs.len();
                specs[k].children.push(m);
                specs.push(Spec {
                    id: ScopeId::Subarea(area.index, sub.index),
                    buses: sub.members.clone(),
                    children: vec![],
                    root: Some(sub.root),
                });
            }
        }

        let mut plans = Vec::with_capacity(specs.len());
        for spec in &specs {
            let mut buses = spec.buses.clone();
            buses.sort_unstable();
            let mut own = Vec::new();
            let mut own_phase = Vec::new();
            let mut own_bus = Vec::new();
            for &b in &buses {
                let range = net.flat_range(b)?;
                for (a, phase) in range.zip(net.phases(b)?.iter()) {
                    own.push(a);
                    own_phase.push(phase);
                    own_bus.push(b);
                }
            }
            let mut slots = Vec::new();
            for &c in &spec.children {
                let root = specs[c].root.expect("child scopes have roots");
                slots.extend(net.phases(root)?.iter().map(|p| (c, p)));
            }
            let child_root = |c: usize| specs[c].root.expect("child scopes have roots");

            let mut zread = |a: usize, b: usize| -> Result<PhaseMatrix> {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                plan_reads.record(spec.id, AccessKind::Impedance { a: lo, b: hi });
                Ok(*net.common_path_matrix_idx(net.idx(a)?, net.idx(b)?))
            };
            // Kernel entry for target (i, phi) and source (j, psi).
            let mut kernel = |i: usize, phi: Phase, j: usize, psi: Phase| -> Result<Complex64> {
                let z = zread(j, i)?[psi.code()][phi.code()];
                Ok(rotated_conj(z, psi, phi))
            };

            let n_own = own.len();
            let n_slots = slots.len();
            let mut k_own = vec![ZERO; n_own * n_own];
            for t in 0..n_own {
                for s in 0..n_own {
                    k_own[t * n_own + s] =
                        kernel(own_bus[t], own_phase[t], own_bus[s], own_phase[s])?;
                }
            }
            let mut k_child_own = vec![ZERO; n_own * n_slots];
            let mut k_own_child = vec![ZERO; n_slots * n_own];
            for t in 0..n_own {
                for (s, &(c, psi)) in slots.iter().enumerate() {
                    k_child_own[t * n_slots + s] =
                        kernel(own_bus[t], own_phase[t], child_root(c), psi)?;
                    k_own_child[s * n_own + t] =
                        kernel(child_root(c), psi, own_bus[t], own_phase[t])?;
                }
            }
            let mut k_child_child = vec![ZERO; n_slots * n_slots];
            for (t, &(ct, phi)) in slots.iter().enumerate() {
                for (s, &(cs, psi)) in slots.iter().enumerate() {
                    if ct != cs {
                        k_child_child[t * n_slots + s] =
                            kernel(child_root(ct), phi, child_root(cs), psi)?;
                    }
                }
            }
            plans.push(ScopePlan {
                id: spec.id,
                own,
                own_phase,
                own_bus,
                children: spec.children.clone(),
                slots,
                k_own,
                k_child_own,
                k_child_child,
                k_own_child,
            });
        }

        // Collapse repeated reads of the same pair into a single planning read.
        for n in plan_reads.counts.values_mut() {
            *n = 1;
        }

        Ok(MultilevelEngine {
            kind,
            dim: net.n_flat(),
            plans,
            scopes,
            plan_reads,
            threads: 1,
        })
    }

    /// Reads the scope's own duals (the only per-bus values it may see).
    fn gather(&self, s: usize, d: &DVector<f64>, audit: &mut Option<AuditRecord>) -> Vec<f64> {
        let plan = &self.plans[s];
        if let Some(rec) = audit.as_mut() {
            for &bus in &plan.own_bus {
                rec.record(plan.id, AccessKind::Dual { bus });
            }
        }
        plan.own.iter().map(|&a| d[a]).collect()
    }

    /// Bottom-up pass: per-phase dual sums of scope `s` and all its descendants.
    /// Fills `sums[s]` for the subtree of scopes under `s`.
    fn aggregate(
        &self,
        s: usize,
        d: &DVector<f64>,
        local: &mut [Vec<f64>],
        sums: &mut [[f64; 3]],
        audit: &mut Option<AuditRecord>,
    ) {
        let plan = &self.plans[s];
        for &c in &plan.children {
            self.aggregate(c, d, local, sums, audit);
        }
        local[s] = self.gather(s, d, audit);
        let mut total = [0.0; 3];
        for (k, phase) in plan.own_phase.iter().enumerate() {
            total[phase.code()] += local[s][k];
        }
        for &c in &plan.children {
            if let Some(rec) = audit.as_mut() {
                rec.record(
                    plan.id,
                    AccessKind::Aggregate {
                        from: self.plans[c].id,
                    },
                );
            }
            for (t, v) in total.iter_mut().zip(sums[c]) {
                *t += v;
            }
        }
        sums[s] = total;
    }

    /// Own-bus outputs of scope `s` and the fields handed to its children.
    fn evaluate(
        &self,
        s: usize,
        field: &Field,
        local: &[f64],
        sums: &[[f64; 3]],
    ) -> (Vec<(usize, Complex64)>, Vec<Field>) {
        let plan = &self.plans[s];
        let n_own = plan.own.len();
        let n_slots = plan.slots.len();
        let slot_sum: Vec<f64> = plan
            .slots
            .iter()
            .map(|&(c, psi)| sums[c][psi.code()])
            .collect();

        let mut out = Vec::with_capacity(n_own);
        for t in 0..n_own {
            let mut acc = field[plan.own_phase[t].code()];
            let row = &plan.k_own[t * n_own..(t + 1) * n_own];
            for (k, dv) in row.iter().zip(local) {
                acc += k * dv;
            }
            let row = &plan.k_child_own[t * n_slots..(t + 1) * n_slots];
            for (k, sv) in row.iter().zip(&slot_sum) {
                acc += k * sv;
            }
            out.push((plan.own[t], acc));
        }

        let mut fields = vec![*field; plan.children.len()];
        for (t, &(ct, phi)) in plan.slots.iter().enumerate() {
            let child_pos = plan
                .children
                .iter()
                .position(|&c| c == ct)
                .expect("slot child");
            let mut acc = ZERO;
            let row = &plan.k_child_child[t * n_slots..(t + 1) * n_slots];
            for ((k, sv), &(cs, _)) in row.iter().zip(&slot_sum).zip(&plan.slots) {
                if cs != ct {
                    acc += k * sv;
                }
            }
            let row = &plan.k_own_child[t * n_own..(t + 1) * n_own];
            for (k, dv) in row.iter().zip(local) {
                acc += k * dv;
            }
            fields[child_pos][phi.code()] += acc;
        }
        (out, fields)
    }

    /// Top-down pass over the scope subtree rooted at `s`.
    fn descend(
        &self,
        s: usize,
        field: &Field,
        local: &[Vec<f64>],
        sums: &[[f64; 3]],
        out: &mut Vec<(usize, Complex64)>,
    ) {
        let (mine, fields) = self.evaluate(s, field, &local[s], sums);
        out.extend(mine);
        for (&c, f) in self.plans[s].children.iter().zip(&fields) {
            self.descend(c, f, local, sums, out);
        }
    }

    fn subtree_ops(&self, s: usize) -> u64 {
        self.plans[s].ops_per_call()
            + self.plans[s]
                .children
                .iter()
                .map(|&c| self.subtree_ops(c))
                .sum::<u64>()
    }

    fn run(&self, duals: &DualState, audit: Option<&mut AuditRecord>) -> Result<CouplingResult> {
        check_duals(self.dim, duals)?;
        let d = duals.difference();
        let n_scopes = self.plans.len();
        let areas = self.plans[0].children.clone();

        // Upward pass per area (independent), then the coordinator.
        struct AreaWork {
            local: Vec<(usize, Vec<f64>)>,
            sums: Vec<(usize, [f64; 3])>,
            audit: Option<AuditRecord>,
            nanos: u64,
        }
        let with_audit = audit.is_some();
        let up = |a: usize| -> AreaWork {
            let start = Instant::now();
            let mut local = vec![Vec::new(); n_scopes];
            let mut sums = vec![[0.0; 3]; n_scopes];
            let mut rec = with_audit.then(|| AuditRecord::new(self.kind, ScopeMap::default()));
            self.aggregate(a, &d, &mut local, &mut sums, &mut rec);
            let touched = self.scope_subtree(a);
            AreaWork {
                local: touched
                    .iter()
                    .map(|&s| (s, std::mem::take(&mut local[s])))
                    .collect(),
                sums: touched.iter().map(|&s| (s, sums[s])).collect(),
                audit: rec,
                nanos: start.elapsed().as_nanos() as u64,
            }
        };
        let upward: Vec<AreaWork> = self.par_map(&areas, |&a| up(a));

        let mut local = vec![Vec::new(); n_scopes];
        let mut sums = vec![[0.0; 3]; n_scopes];
        let mut area_nanos = Vec::with_capacity(areas.len());
        let mut merged = with_audit.then(|| AuditRecord::new(self.kind, ScopeMap::default()));
        for w in upward {
            for (s, l) in w.local {
                local[s] = l;
            }
            for (s, v) in w.sums {
                sums[s] = v;
            }
            if let (Some(m), Some(r)) = (merged.as_mut(), w.audit) {
                m.merge(r);
            }
            area_nanos.push(w.nanos);
        }

        let coord_start = Instant::now();
        local[0] = self.gather(0, &d, &mut merged);
        if let Some(rec) = merged.as_mut() {
            for &c in &areas {
                rec.record(
                    ScopeId::Coordinator,
                    AccessKind::Aggregate {
                        from: self.plans[c].id,
                    },
                );
            }
        }
        let (coord_out, fields) = self.evaluate(0, &[ZERO; 3], &local[0], &sums);
        let coord_nanos = coord_start.elapsed().as_nanos() as u64;

        // Downward pass per area.
        let jobs: Vec<(usize, Field)> = areas.iter().copied().zip(fields).collect();
        let down = |(a, f): (usize, Field)| -> (Vec<(usize, Complex64)>, u64) {
            let start = Instant::now();
            let mut out = Vec::new();
            self.descend(a, &f, &local, &sums, &mut out);
            (out, start.elapsed().as_nanos() as u64)
        };
        let downward: Vec<(Vec<(usize, Complex64)>, u64)> = self.par_map(&jobs, |job| down(*job));

        let mut g_p = DVector::zeros(self.dim);
        let mut g_q = DVector::zeros(self.dim);
        let mut scatter = |vals: &[(usize, Complex64)]| {
            for &(a, acc) in vals {
                g_p[a] = 2.0 * acc.re;
                g_q[a] = -2.0 * acc.im;
            }
        };
        scatter(&coord_out);
        let mut scope_costs = vec![ScopeCost {
            scope: ScopeId::Coordinator,
            ops: self.plans[0].ops_per_call(),
            nanos: coord_nanos,
        }];
        for ((&a, (vals, nanos)), up_nanos) in areas.iter().zip(&downward).zip(&area_nanos) {
            scatter(vals);
            scope_costs.push(ScopeCost {
                scope: self.plans[a].id,
                ops: self.subtree_ops(a),
                nanos: nanos + up_nanos,
            });
        }
        let op_count = scope_costs.iter().map(|c| c.ops).sum();

        if let (Some(rec), Some(m)) = (audit, merged) {
            rec.merge(m);
        }
        Ok(CouplingResult {
            g_p,
            g_q,
            op_count,
            scope_costs,
        })
    }

    fn scope_subtree(&self, s: usize) -> Vec<usize> {
        let mut out = vec![s];
        let mut k = 0;
        while k < out.len() {
            out.extend(self.plans[out[k]].children.iter().copied());
            k += 1;
        }
        out
    }

    fn par_map<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
        if self.threads <= 1 || items.len() <= 1 {
            return items.iter().map(f).collect();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build();
        match pool {
            Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
            Err(_) => items.iter().map(f).collect(),
        }
    }

    /// Messages the areas publish for the given duals.
    pub fn area_messages(&self, duals: &DualState) -> Result<Vec<super::AggregateMessage>> {
        check_duals(self.dim, duals)?;
        let d = duals.difference();
        let n = self.plans.len();
        let mut local = vec![Vec::new(); n];
        let mut sums = vec![[0.0; 3]; n];
        let mut none = None;
        let roots = &self.scopes.root_of;
        Ok(self.plans[0]
            .children
            .iter()
            .map(|&a| {
                self.aggregate(a, &d, &mut local, &mut sums, &mut none);
                let id = self.plans[a].id;
                super::AggregateMessage {
                    scope: id,
                    root: roots[&id],
                    sums: sums[a],
                }
            })
            .collect())
    }
}

impl CouplingEngine for MultilevelEngine {
    fn kind(&self) -> EngineKind {
        self.kind
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn compute(
        &self,
        duals: &DualState,
        audit: Option<&mut AuditRecord>,
    ) -> Result<CouplingResult> {
        self.run(duals, audit)
    }

    fn new_audit_record(&self) -> AuditRecord {
        let mut rec = self.plan_reads.clone();
        rec.scopes = self.scopes.clone();
        rec
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::{coupling_bilevel, coupling_flat, coupling_trilevel};
    use crate::network::{Bus, Line, PhaseSet, ZERO_MATRIX};
    use crate::sensitivity::SensitivityMatrices;

    fn star_of_two() -> Network {
        let a = PhaseSet::single(Phase::A);
        let z = |re, im| {
            let mut m = ZERO_MATRIX;
            m[0][0] = Complex64::new(re, im);
            m
        };
        Network::new(
            1.0,
            vec![
                Bus {
                    id: 0,
                    phases: PhaseSet::ABC,
                    parent: None,
                },
                Bus {
                    id: 1,
                    phases: a,
                    parent: Some(0),
                },
                Bus {
                    id: 2,
                    phases: a,
                    parent: Some(0),
                },
            ],
            vec![
                Line {
                    from: 0,
                    to: 1,
                    z: z(0.01, 0.02),
                },
                Line {
                    from: 0,
                    to: 2,
                    z: z(0.03, 0.01),
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn single_bus_areas_off_substation() {
        let net = star_of_two();
        let part = PartitionHierarchy::from_roots(&net, &[(1, vec![]), (2, vec![])]).unwrap();
        let over = DVector::from_vec(vec![0.3, 0.9]);
        let under = DVector::zeros(2);
        let bi = coupling_bilevel(&net, &part, &over, &under).unwrap();
        // Each area only sees itself: the root-to-root impedance is zero.
        assert!((bi.g_p[0] - 2.0 * 0.01 * 0.3).abs() < 1e-16);
        assert!((bi.g_p[1] - 2.0 * 0.03 * 0.9).abs() < 1e-16);
        let flat = coupling_flat(&SensitivityMatrices::build(&net), &over, &under).unwrap();
        assert!((flat.g_q - bi.g_q).amax() < 1e-16);
    }

    #[test]
    fn degenerate_partitions() {
        let net = star_of_two();
        let trivial = PartitionHierarchy::trivial(&net);
        let over = DVector::from_vec(vec![0.3, 0.9]);
        let under = DVector::from_vec(vec![0.1, 0.0]);
        let flat = coupling_flat(&SensitivityMatrices::build(&net), &over, &under).unwrap();
        let bi = coupling_bilevel(&net, &trivial, &over, &under).unwrap();
        assert!((&flat.g_p - &bi.g_p).amax() <= 1e-12 * flat.g_p.amax());
        let part = PartitionHierarchy::from_roots(&net, &[(1, vec![])]).unwrap();
        let bi = coupling_bilevel(&net, &part, &over, &under).unwrap();
        let tri = coupling_trilevel(&net, &part, &over, &under).unwrap();
        assert_eq!(bi.g_p, tri.g_p);
        assert_eq!(bi.op_count, tri.op_count);
    }

    #[test]
    fn zero_duals_give_exact_zero() {
        let net = star_of_two();
        let part = PartitionHierarchy::from_roots(&net, &[(1, vec![])]).unwrap();
        let mu = DVector::from_vec(vec![0.4, 0.2]);
        let out = coupling_trilevel(&net, &part, &mu, &mu).unwrap();
        assert!(out.g_p.iter().chain(out.g_q.iter()).all(|&g| g == 0.0));
        assert!(out.op_count > 0);
    }

    #[test]
    fn invalid_partition_rejected() {
        let net = star_of_two();
        let bad = PartitionHierarchy {
            areas: vec![],
            unclustered: vec![1],
        };
        assert!(matches!(
            MultilevelEngine::bilevel(&net, &bad),
            Err(Error::Partition(_))
        ));
    }
}
