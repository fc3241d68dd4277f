//! Projected primal-dual gradient iteration.
//!
//! One step updates everything simultaneously from the current iterate: the
//! primal setpoints move against the cost gradient plus the coupling term at
//! the current duals, the duals move with the current voltage excursions, and
//! the voltages are then recomputed at the new setpoints.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::coupling::{AuditRecord, CouplingEngine, CouplingResult};
use crate::error::{Error, Result};
use crate::network::Network;
use crate::opf::{dual_update, DualState, OpfProblem, SolverConfig};
use crate::powerflow::{SweepPlan, DEFAULT_MAX_SWEEPS, DEFAULT_TOLERANCE};
use crate::sensitivity::{voltage_linear_tree, SensitivityMatrices};

#[derive(Clone, Debug, PartialEq)]
pub struct SolverState {
    pub p: DVector<f64>,
    pub q: DVector<f64>,
    pub duals: DualState,
    /// Squared voltage magnitudes at `(p, q)`.
    pub v: DVector<f64>,
    pub iteration: usize,
}

/// How voltages follow from setpoints.
#[derive(Clone)]
pub enum VoltageModel {
    /// `v = v_tilde + R p + X q` with the dense matrices.
    Linear(Arc<SensitivityMatrices>),
    /// The same linear model evaluated by recursion over the tree.
    LinearTree(Arc<Network>),
    /// Nonlinear power flow. With `refresh > 1` the sweep runs every
    /// `refresh` evaluations and the linear model bridges the gap from the
    /// last sweep.
    Sweep {
        net: Arc<Network>,
        tol: f64,
        max_sweeps: usize,
        refresh: usize,
    },
}

impl VoltageModel {
    pub fn sweep(net: Arc<Network>, refresh: usize) -> Self {
        VoltageModel::Sweep {
            net,
            tol: DEFAULT_TOLERANCE,
            max_sweeps: DEFAULT_MAX_SWEEPS,
            refresh: refresh.max(1),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            VoltageModel::Linear(_) | VoltageModel::LinearTree(_) => "linear",
            VoltageModel::Sweep { .. } => "sweep",
        }
    }

    fn dim(&self) -> usize {
        match self {
            VoltageModel::Linear(s) => s.dim(),
            VoltageModel::LinearTree(net) | VoltageModel::Sweep { net, .. } => net.n_flat(),
        }
    }
}

struct Anchor {
    v: DVector<f64>,
    p: DVector<f64>,
    q: DVector<f64>,
}

/// Stateful voltage evaluator; remembers the last full sweep.
struct VoltageOracle {
    model: VoltageModel,
    plan: Option<SweepPlan>,
    calls: usize,
    anchor: Option<Anchor>,
}

impl VoltageOracle {
    fn eval(&mut self, p: &DVector<f64>, q: &DVector<f64>) -> Result<DVector<f64>> {
        let call = self.calls;
        self.calls += 1;
        match &self.model {
            VoltageModel::Linear(sens) => sens.voltage_linear(p, q),
            VoltageModel::LinearTree(net) => voltage_linear_tree(net, p, q),
            VoltageModel::Sweep {
                net,
                tol,
                max_sweeps,
                refresh,
            } => {
                if call.is_multiple_of(*refresh) || self.anchor.is_none() {
                    if self.plan.is_none() {
                        self.plan = Some(SweepPlan::new(net)?);
                    }
                    let plan = self.plan.as_ref().expect("plan built above");
                    let sol = plan.solve(p, q, *tol, *max_sweeps)?;
                    self.anchor = Some(Anchor {
                        v: sol.v.clone(),
                        p: p.clone(),
                        q: q.clone(),
                    });
                    return Ok(sol.v);
                }
                let a = self.anchor.as_ref().expect("anchor set above");
                let shift = voltage_linear_tree(net, &(p - &a.p), &(q - &a.q))?;
                Ok(&a.v + shift.add_scalar(-net.base_v_squared()))
            }
        }
    }
}

/// One row of the convergence trace, describing iterate `iter`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub objective: f64,
    pub lagrangian: f64,
    pub max_over_violation: f64,
    pub max_under_violation: f64,
    pub residual: f64,
    /// Operations of the coupling evaluation at this iterate.
    pub coupling_ops: u64,
    /// Wall time of the step that produced this iterate (0 for the start).
    pub step_ns: u64,
    pub coupling_ns: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub const COLUMNS: [&'static str; 8] = [
        "iter",
        "objective",
        "lagrangian",
        "max_over_violation",
        "max_under_violation",
        "residual",
        "coupling_ops",
        "step_ns",
    ];

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn total_coupling_ops(&self) -> u64 {
        self.records.iter().map(|r| r.coupling_ops).sum()
    }

    pub fn total_coupling_ns(&self) -> u64 {
        self.records.iter().map(|r| r.coupling_ns).sum()
    }

    pub fn total_step_ns(&self) -> u64 {
        self.records.iter().map(|r| r.step_ns).sum()
    }

    pub fn objectives(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.objective).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::COLUMNS.join(","))?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.iter,
                r.objective,
                r.lagrangian,
                r.max_over_violation,
                r.max_under_violation,
                r.residual,
                r.coupling_ops,
                r.step_ns
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    MaxIterations,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub state: SolverState,
    pub trace: Trace,
    pub status: RunStatus,
    pub residual: f64,
    pub wall_ns: u64,
}

pub struct Solver<'a> {
    problem: &'a OpfProblem,
    engine: &'a dyn CouplingEngine,
    cfg: SolverConfig,
    voltages: VoltageOracle,
    audit: Option<AuditRecord>,
}

impl<'a> Solver<'a> {
    pub fn new(
        problem: &'a OpfProblem,
        engine: &'a dyn CouplingEngine,
        model: VoltageModel,
        cfg: SolverConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if engine.dim() != problem.dim() {
            return Err(Error::Dimension {
                expected: problem.dim(),
                got: engine.dim(),
            });
        }
        let model_dim = model.dim();
        if model_dim != problem.dim() {
            return Err(Error::Dimension {
                expected: problem.dim(),
                got: model_dim,
            });
        }
        Ok(Solver {
            problem,
            engine,
            cfg,
            voltages: VoltageOracle {
                model,
                plan: None,
                calls: 0,
                anchor: None,
            },
            audit: None,
        })
    }

    /// Log every access the engine makes from now on.
    pub fn enable_audit(&mut self) {
        self.audit = Some(self.engine.new_audit_record());
    }

    pub fn audit_record(&self) -> Option<&AuditRecord> {
        self.audit.as_ref()
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    /// Setpoints at preference, zero duals, voltages from the model.
    pub fn initial_state(&mut self) -> Result<SolverState> {
        let (p, q) = self.problem.preferred();
        let v = self.voltages.eval(&p, &q)?;
        Ok(SolverState {
            p,
            q,
            duals: DualState::zeros(self.problem.dim()),
            v,
            iteration: 0,
        })
    }

    fn coupling(&mut self, state: &SolverState) -> Result<(CouplingResult, u64)> {
        let start = Instant::now();
        let out = self.engine.compute(&state.duals, self.audit.as_mut())?;
        Ok((out, start.elapsed().as_nanos() as u64))
    }

    fn advance(&mut self, state: &SolverState, coupling: &CouplingResult) -> Result<SolverState> {
        let prob = self.problem;
        let eps = self.cfg.step_primal;
        let (cp, cq) = prob.cost_gradient(&state.p, &state.q);
        let n = prob.dim();
        let mut p = DVector::zeros(n);
        let mut q = DVector::zeros(n);
        for a in 0..n {
            let (pa, qa) = prob.project(
                a,
                state.p[a] - eps * (cp[a] + coupling.g_p[a]),
                state.q[a] - eps * (cq[a] + coupling.g_q[a]),
            );
            p[a] = pa;
            q[a] = qa;
        }
        let duals = dual_update(&state.duals, &state.v, &prob.bounds, &self.cfg)?;
        let v = self.voltages.eval(&p, &q)?;
        Ok(SolverState {
            p,
            q,
            duals,
            v,
            iteration: state.iteration + 1,
        })
    }

    /// One primal-dual step from `state`.
    pub fn step(&mut self, state: &SolverState) -> Result<SolverState> {
        self.check_state(state)?;
        let (coupling, _) = self.coupling(state)?;
        self.advance(state, &coupling)
    }

    fn check_state(&self, s: &SolverState) -> Result<()> {
        let n = self.problem.dim();
        for len in [
            s.p.len(),
            s.q.len(),
            s.v.len(),
            s.duals.over.len(),
            s.duals.under.len(),
        ] {
            if len != n {
                return Err(Error::Dimension {
                    expected: n,
                    got: len,
                });
            }
        }
        Ok(())
    }

    fn record(
        &self,
        state: &SolverState,
        coupling: &CouplingResult,
        coupling_ns: u64,
        step_ns: u64,
    ) -> Result<TraceRecord> {
        let prob = self.problem;
        let (over, under) = prob.bounds.violations(&state.v);
        Ok(TraceRecord {
            iter: state.iteration,
            objective: prob.objective(&state.p, &state.q),
            lagrangian: prob.lagrangian_value(
                &state.p,
                &state.q,
                &state.duals,
                &state.v,
                self.cfg.eta,
            )?,
            max_over_violation: over,
            max_under_violation: under,
            residual: prob.saddle_residual(
                &state.p,
                &state.q,
                &state.duals,
                &state.v,
                &coupling.g_p,
                &coupling.g_q,
                &self.cfg,
            )?,
            coupling_ops: coupling.op_count,
            step_ns,
            coupling_ns,
        })
    }

    /// Iterates from `init` until the saddle residual drops below the
    /// tolerance or `max_iters` steps have been taken. The trace holds the
    /// starting iterate followed by one record per step.
    pub fn run(&mut self, init: SolverState) -> Result<RunOutcome> {
        self.check_state(&init)?;
        let started = Instant::now();
        let mut trace = Trace::default();
        let mut state = init;
        let mut step_ns = 0;
        let mut taken = 0;
        loop {
            let (coupling, coupling_ns) = self.coupling(&state)?;
            let rec = self.record(&state, &coupling, coupling_ns, step_ns)?;
            let residual = rec.residual;
            trace.records.push(rec);
            let status = if residual < self.cfg.tolerance {
                Some(RunStatus::Converged)
            } else if taken >= self.cfg.max_iters {
                Some(RunStatus::MaxIterations)
            } else {
                None
            };
            if let Some(status) = status {
                return Ok(RunOutcome {
                    state,
                    trace,
                    status,
                    residual,
                    wall_ns: started.elapsed().as_nanos() as u64,
                });
            }
            let t0 = Instant::now();
            state = self.advance(&state, &coupling)?;
            step_ns = t0.elapsed().as_nanos() as u64 + coupling_ns;
            taken += 1;
        }
    }
}
