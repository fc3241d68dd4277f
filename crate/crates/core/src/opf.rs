//! Voltage-regulation OPF data: device costs and boxes, voltage bounds, the
//! regularized Lagrangian, the dual update and the saddle-point residual.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, Phase};

/// A controllable device on one phase of one bus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Device {
    pub bus: usize,
    pub phase: Phase,
    pub p0: f64,
    pub q0: f64,
    #[serde(rename = "pmin")]
    pub p_min: f64,
    #[serde(rename = "pmax")]
    pub p_max: f64,
    #[serde(rename = "qmin")]
    pub q_min: f64,
    #[serde(rename = "qmax")]
    pub q_max: f64,
    #[serde(rename = "wp", default = "unit")]
    pub w_p: f64,
    #[serde(rename = "wq", default = "unit")]
    pub w_q: f64,
}

fn unit() -> f64 {
    1.0
}

impl Device {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.p0, self.q0, self.p_min, self.p_max, self.q_min, self.q_max, self.w_p, self.w_q,
        ]
        .iter()
        .all(|x| x.is_finite());
        let fail = |msg: &str| {
            Err(Error::Validation(format!(
                "device at bus {} phase {}: {msg}",
                self.bus, self.phase
            )))
        };
        if !finite {
            return fail("non-finite field");
        }
        if self.p_min > self.p_max || self.q_min > self.q_max {
            return fail("empty box");
        }
        if !(self.p_min..=self.p_max).contains(&self.p0)
            || !(self.q_min..=self.q_max).contains(&self.q0)
        {
            return fail("preferred setpoint outside its box");
        }
        if self.w_p <= 0.0 || self.w_q <= 0.0 {
            return fail("cost weights must be positive");
        }
        Ok(())
    }

    /// `w_p (p - p0)^2 + w_q (q - q0)^2` and its gradient.
    pub fn cost_and_gradient(&self, p: f64, q: f64) -> (f64, f64, f64) {
        let (dp, dq) = (p - self.p0, q - self.q0);
        (
            self.w_p * dp * dp + self.w_q * dq * dq,
            2.0 * self.w_p * dp,
            2.0 * self.w_q * dq,
        )
    }

    pub fn project_box(&self, p: f64, q: f64) -> (f64, f64) {
        (
            p.clamp(self.p_min, self.p_max),
            q.clamp(self.q_min, self.q_max),
        )
    }
}

/// Free-standing form of [`Device::cost_and_gradient`].
pub fn cost_and_gradient(dev: &Device, p: f64, q: f64) -> (f64, f64, f64) {
    dev.cost_and_gradient(p, q)
}

/// Free-standing form of [`Device::project_box`].
pub fn project_box(dev: &Device, p: f64, q: f64) -> (f64, f64) {
    dev.project_box(p, q)
}

/// Squared-magnitude voltage limits per flat index.
#[derive(Clone, Debug, PartialEq)]
pub struct VoltageBounds {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl VoltageBounds {
    /// Uniform bounds given as magnitudes; stored squared.
    pub fn from_magnitudes(n: usize, vmin: f64, vmax: f64) -> Result<Self> {
        if !(vmin > 0.0 && vmin < vmax && vmax.is_finite()) {
            return Err(Error::Validation(format!(
                "need 0 < vmin < vmax, got {vmin} / {vmax}"
            )));
        }
        Ok(VoltageBounds {
            lower: DVector::from_element(n, vmin * vmin),
            upper: DVector::from_element(n, vmax * vmax),
        })
    }

    /// Largest excursion above the upper bound and below the lower bound (0 when inside).
    pub fn violations(&self, v: &DVector<f64>) -> (f64, f64) {
        let over = v
            .iter()
            .zip(self.upper.iter())
            .map(|(v, u)| v - u)
            .fold(0.0, f64::max);
        let under = v
            .iter()
            .zip(self.lower.iter())
            .map(|(v, l)| l - v)
            .fold(0.0, f64::max);
        (over, under)
    }
}

/// Multipliers of the upper (`over`) and lower (`under`) voltage limits.
#[derive(Clone, Debug, PartialEq)]
pub struct DualState {
    pub over: DVector<f64>,
    pub under: DVector<f64>,
}

impl DualState {
    pub fn zeros(n: usize) -> Self {
        DualState {
            over: DVector::zeros(n),
            under: DVector::zeros(n),
        }
    }

    /// `mu_over - mu_under`, the weight vector of the coupling term.
    pub fn difference(&self) -> DVector<f64> {
        &self.over - &self.under
    }

    pub fn is_nonnegative(&self) -> bool {
        self.over.iter().chain(self.under.iter()).all(|&m| m >= 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub step_primal: f64,
    pub step_dual: f64,
    pub eta: f64,
    pub max_iters: usize,
    /// Residual below which a run stops; 0 runs all `max_iters` steps.
    pub tolerance: f64,
    /// Nonlinear voltage model: full sweep every this many iterations.
    pub sweep_refresh: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            step_primal: 3.5e-4,
            step_dual: 3.5e-3,
            eta: 1e-4,
            max_iters: 3000,
            tolerance: 1e-8,
            sweep_refresh: 1,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.step_primal, self.step_dual, self.eta]
            .iter()
            .all(|x| x.is_finite() && *x > 0.0)
            && self.tolerance.is_finite()
            && self.tolerance >= 0.0
            && self.sweep_refresh >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "solver settings must be positive: {self:?}"
            )))
        }
    }
}

/// `[mu + eps (drift - eta mu)]_+` for both multipliers, drift evaluated at `v`.
pub fn dual_update(
    state: &DualState,
    v: &DVector<f64>,
    bounds: &VoltageBounds,
    cfg: &SolverConfig,
) -> Result<DualState> {
    let n = state.over.len();
    for len in [
        v.len(),
        state.under.len(),
        bounds.lower.len(),
        bounds.upper.len(),
    ] {
        if len != n {
            return Err(Error::Dimension {
                expected: n,
                got: len,
            });
        }
    }
    let (eps, eta) = (cfg.step_dual, cfg.eta);
    let mut under = state.under.clone();
    let mut over = state.over.clone();
    for a in 0..n {
        under[a] = (under[a] + eps * (bounds.lower[a] - v[a] - eta * under[a])).max(0.0);
        over[a] = (over[a] + eps * (v[a] - bounds.upper[a] - eta * over[a])).max(0.0);
    }
    Ok(DualState { over, under })
}

/// Problem data over the flat index space. Indices without a device carry a
/// singleton box at their background injection and no cost.
#[derive(Clone, Debug)]
pub struct OpfProblem {
    pub bounds: VoltageBounds,
    pub p_min: DVector<f64>,
    pub p_max: DVector<f64>,
    pub q_min: DVector<f64>,
    pub q_max: DVector<f64>,
    pub p_pref: DVector<f64>,
    pub q_pref: DVector<f64>,
    pub w_p: DVector<f64>,
    pub w_q: DVector<f64>,
    device_at: Vec<Option<usize>>,
    devices: Vec<Device>,
}

impl OpfProblem {
    pub fn new(
        net: &Network,
        devices: Vec<Device>,
        background: &[Background],
        bounds: VoltageBounds,
    ) -> Result<Self> {
        let n = net.n_flat();
        for len in [bounds.lower.len(), bounds.upper.len()] {
            if len != n {
                return Err(Error::Dimension {
                    expected: n,
                    got: len,
                });
            }
        }
        if bounds
            .lower
            .iter()
            .zip(bounds.upper.iter())
            .any(|(l, u)| !(*l > 0.0 && l < u))
        {
            return Err(Error::Validation(
                "voltage bounds need 0 < lower < upper".into(),
            ));
        }
        let locate = |bus: usize, phase: Phase| {
            net.flat_index(bus, phase).ok_or_else(|| {
                if net.contains_bus(bus) {
                    Error::PhaseNotAtBus { bus, phase }
                } else {
                    Error::UnknownBus(bus)
                }
            })
        };
        let mut prob = OpfProblem {
            bounds,
            p_min: DVector::zeros(n),
            p_max: DVector::zeros(n),
            q_min: DVector::zeros(n),
            q_max: DVector::zeros(n),
            p_pref: DVector::zeros(n),
            q_pref: DVector::zeros(n),
            w_p: DVector::zeros(n),
            w_q: DVector::zeros(n),
            device_at: vec![None; n],
            devices: Vec::with_capacity(devices.len()),
        };
        for (k, dev) in devices.into_iter().enumerate() {
            dev.validate()?;
            let a = locate(dev.bus, dev.phase)?;
            if prob.device_at[a].is_some() {
                return Err(Error::Validation(format!(
                    "two devices at bus {} phase {}",
                    dev.bus, dev.phase
                )));
            }
            prob.device_at[a] = Some(k);
            prob.p_min[a] = dev.p_min;
            prob.p_max[a] = dev.p_max;
            prob.q_min[a] = dev.q_min;
            prob.q_max[a] = dev.q_max;
            prob.p_pref[a] = dev.p0;
            prob.q_pref[a] = dev.q0;
            prob.w_p[a] = dev.w_p;
            prob.w_q[a] = dev.w_q;
            prob.devices.push(dev);
        }
        let mut has_background = vec![false; n];
        for bg in background {
            let a = locate(bg.bus, bg.phase)?;
            if prob.device_at[a].is_some() {
                return Err(Error::Validation(format!(
                    "background injection given at device location bus {} phase {}",
                    bg.bus, bg.phase
                )));
            }
            if std::mem::replace(&mut has_background[a], true) {
                return Err(Error::Validation(format!(
                    "background injection listed twice for bus {} phase {}",
                    bg.bus, bg.phase
                )));
            }
            if !(bg.p.is_finite() && bg.q.is_finite()) {
                return Err(Error::Validation("non-finite background injection".into()));
            }
            for v in [&mut prob.p_min, &mut prob.p_max, &mut prob.p_pref] {
                v[a] = bg.p;
            }
            for v in [&mut prob.q_min, &mut prob.q_max, &mut prob.q_pref] {
                v[a] = bg.q;
            }
        }
        Ok(prob)
    }

    pub fn from_json(net: &Network, text: &str) -> Result<Self> {
        let doc: DeviceDocument = serde_json::from_str(text)?;
        let bounds = VoltageBounds::from_magnitudes(net.n_flat(), doc.vmin, doc.vmax)?;
        OpfProblem::new(net, doc.devices, &doc.background, bounds)
    }

    pub fn dim(&self) -> usize {
        self.p_pref.len()
    }

    pub fn devices(&self) -> &[Device] {
        &self.devices
    }

    pub fn device_at(&self, a: usize) -> Option<&Device> {
        self.device_at[a].map(|k| &self.devices[k])
    }

    /// Preferred setpoints, the natural starting point.
    pub fn preferred(&self) -> (DVector<f64>, DVector<f64>) {
        (self.p_pref.clone(), self.q_pref.clone())
    }

    pub fn objective(&self, p: &DVector<f64>, q: &DVector<f64>) -> f64 {
        (0..self.dim())
            .map(|a| {
                let (dp, dq) = (p[a] - self.p_pref[a], q[a] - self.q_pref[a]);
                self.w_p[a] * dp * dp + self.w_q[a] * dq * dq
            })
            .sum()
    }

    pub fn cost_gradient(
        &self,
        p: &DVector<f64>,
        q: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        let gp = DVector::from_fn(self.dim(), |a, _| {
            2.0 * self.w_p[a] * (p[a] - self.p_pref[a])
        });
        let gq = DVector::from_fn(self.dim(), |a, _| {
            2.0 * self.w_q[a] * (q[a] - self.q_pref[a])
        });
        (gp, gq)
    }

    pub fn project(&self, a: usize, p: f64, q: f64) -> (f64, f64) {
        (
            p.clamp(self.p_min[a], self.p_max[a]),
            q.clamp(self.q_min[a], self.q_max[a]),
        )
    }

    pub fn in_box(&self, p: &DVector<f64>, q: &DVector<f64>) -> bool {
        (0..self.dim()).all(|a| {
            (self.p_min[a]..=self.p_max[a]).contains(&p[a])
                && (self.q_min[a]..=self.q_max[a]).contains(&q[a])
        })
    }

    fn check_dims(&self, vs: &[&DVector<f64>]) -> Result<()> {
        let n = self.dim();
        match vs.iter().find(|v| v.len() != n) {
            Some(v) => Err(Error::Dimension {
                expected: n,
                got: v.len(),
            }),
            None => Ok(()),
        }
    }

    /// Regularized Lagrangian at `(p, q, mu)` with voltages `v`.
    pub fn lagrangian_value(
        &self,
        p: &DVector<f64>,
        q: &DVector<f64>,
        duals: &DualState,
        v: &DVector<f64>,
        eta: f64,
    ) -> Result<f64> {
        self.check_dims(&[p, q, &duals.over, &duals.under, v])?;
        let b = &self.bounds;
        let mut total = self.objective(p, q);
        for a in 0..self.dim() {
            total += duals.under[a] * (b.lower[a] - v[a]) + duals.over[a] * (v[a] - b.upper[a]);
        }
        total -= 0.5 * eta * (duals.over.norm_squared() + duals.under.norm_squared());
        Ok(total)
    }

    /// Infinity norm of the projected-gradient fixed-point map. `g_p`, `g_q`
    /// are the coupling terms at the current duals, `v` the current voltages.
    #[allow(clippy::too_many_arguments)]
    pub fn saddle_residual(
        &self,
        p: &DVector<f64>,
        q: &DVector<f64>,
        duals: &DualState,
        v: &DVector<f64>,
        g_p: &DVector<f64>,
        g_q: &DVector<f64>,
        cfg: &SolverConfig,
    ) -> Result<f64> {
        self.check_dims(&[p, q, &duals.over, &duals.under, v, g_p, g_q])?;
        let (ep, ed, eta) = (cfg.step_primal, cfg.step_dual, cfg.eta);
        let (cp, cq) = self.cost_gradient(p, q);
        let b = &self.bounds;
        let mut worst: f64 = 0.0;
        for a in 0..self.dim() {
            let (pp, qp) = self.project(
                a,
                p[a] - ep * (cp[a] + g_p[a]),
                q[a] - ep * (cq[a] + g_q[a]),
            );
            worst = worst
                .max((p[a] - pp).abs() / ep)
                .max((q[a] - qp).abs() / ep);
            let under = (duals.under[a] + ed * (b.lower[a] - v[a] - eta * duals.under[a])).max(0.0);
            let over = (duals.over[a] + ed * (v[a] - b.upper[a] - eta * duals.over[a])).max(0.0);
            worst = worst
                .max((duals.under[a] - under).abs() / ed)
                .max((duals.over[a] - over).abs() / ed);
        }
        Ok(worst)
    }
}

/// Fixed injection at a (bus, phase) without a device.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub bus: usize,
    pub phase: Phase,
    pub p: f64,
    pub q: f64,
}

/// On-disk device description; bounds are voltage magnitudes in p.u.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceDocument {
    #[serde(default)]
    pub devices: Vec<Device>,
    #[serde(default)]
    pub background: Vec<Background>,
    #[serde(default = "default_vmin")]
    pub vmin: f64,
    #[serde(default = "default_vmax")]
    pub vmax: f64,
}

fn default_vmin() -> f64 {
    0.95
}

fn default_vmax() -> f64 {
    1.05
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev(p0: f64, q0: f64) -> Device {
        Device {
            bus: 1,
            phase: Phase::A,
            p0,
            q0,
            p_min: -1.0,
            p_max: 1.0,
            q_min: -1.0,
            q_max: 1.0,
            w_p: 1.0,
            w_q: 1.0,
        }
    }

    fn one_bus() -> Network {
        Network::from_json(
            r#"{"buses":[{"id":0,"phases":["a","b","c"]},{"id":1,"phases":["a"]}],
                "lines":[{"from":0,"to":1,"z":{"aa":[0.01,0.02]}}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn cost_examples() {
        assert_eq!(dev(0.3, -0.1).cost_and_gradient(0.3, -0.1), (0.0, 0.0, 0.0));
        let (c, gp, gq) = cost_and_gradient(&dev(0.0, 0.0), 0.1, -0.2);
        assert!((c - 0.05).abs() < 1e-15 && (gp - 0.2).abs() < 1e-15 && (gq + 0.4).abs() < 1e-15);
        let mut heavy = dev(0.0, 0.0);
        heavy.w_p = 2.0;
        let (c2, gp2, gq2) = heavy.cost_and_gradient(0.1, -0.2);
        assert!((c2 - (0.05 + 0.01)).abs() < 1e-15);
        assert!((gp2 - 0.4).abs() < 1e-15 && gq2 == gq);
    }

    #[test]
    fn projection() {
        let d = dev(0.0, 0.0);
        assert_eq!(project_box(&d, 0.2, -0.3), (0.2, -0.3));
        assert_eq!(d.project_box(1.7, -0.3), (1.0, -0.3));
        assert_eq!(d.project_box(-4.0, 9.0), (-1.0, 1.0));
    }

    #[test]
    fn device_validation() {
        let mut d = dev(0.0, 0.0);
        d.p0 = 2.0;
        assert!(d.validate().is_err());
        let mut d = dev(0.0, 0.0);
        d.w_q = 0.0;
        assert!(d.validate().is_err());
        let mut d = dev(0.0, 0.0);
        d.p_min = 2.0;
        assert!(d.validate().is_err());
    }

    #[test]
    fn dual_update_examples() {
        let cfg = SolverConfig {
            eta: 0.0,
            ..SolverConfig::default()
        };
        let bounds = VoltageBounds {
            lower: DVector::from_element(1, 0.9025),
            upper: DVector::from_element(1, 1.1025),
        };
        let state = DualState {
            over: DVector::from_element(1, 0.0),
            under: DVector::from_element(1, 0.4),
        };
        let next = dual_update(&state, &bounds.lower.clone(), &bounds, &cfg).unwrap();
        assert_eq!(next.under[0], 0.4);

        let cfg = SolverConfig {
            step_dual: 3.5e-3,
            eta: 1e-4,
            ..SolverConfig::default()
        };
        let state = DualState {
            over: DVector::from_element(1, 0.1),
            under: DVector::from_element(1, 0.0),
        };
        let next = dual_update(&state, &DVector::from_element(1, 1.11), &bounds, &cfg).unwrap();
        let expected = 0.1 + 3.5e-3 * (1.11 - 1.1025 - 1e-4 * 0.1);
        assert!((next.over[0] - expected).abs() < 1e-15);
        assert!((next.over[0] - 0.100_026_215).abs() < 1e-9);

        let state = DualState::zeros(1);
        let next = dual_update(&state, &DVector::from_element(1, 1.0), &bounds, &cfg).unwrap();
        assert_eq!(next.over[0], 0.0);
        assert!(dual_update(&state, &DVector::zeros(2), &bounds, &cfg).is_err());
    }

    #[test]
    fn lagrangian_examples() {
        let net = one_bus();
        let bounds = VoltageBounds::from_magnitudes(1, 0.95, 1.05).unwrap();
        let prob = OpfProblem::new(&net, vec![dev(0.2, 0.1)], &[], bounds).unwrap();
        let (p, q) = prob.preferred();
        let v = DVector::from_element(1, 0.93);
        let zero = DualState::zeros(1);
        assert_eq!(prob.lagrangian_value(&p, &q, &zero, &v, 1e-4).unwrap(), 0.0);

        let p2 = DVector::from_element(1, 0.5);
        let q2 = DVector::from_element(1, -0.2);
        let total = prob.objective(&p2, &q2);
        assert_eq!(
            prob.lagrangian_value(&p2, &q2, &zero, &v, 1e-4).unwrap(),
            total
        );

        // Term by term: cost + under (vlo - v) + over (v - vhi) - eta/2 (over^2 + under^2).
        let duals = DualState {
            over: DVector::from_element(1, 0.3),
            under: DVector::from_element(1, 0.7),
        };
        let cost = (0.5f64 - 0.2).powi(2) + (-0.2f64 - 0.1).powi(2);
        let expected =
            cost + 0.7 * (0.9025 - 0.93) + 0.3 * (0.93 - 1.1025) - 0.5 * 1e-4 * (0.09 + 0.49);
        let got = prob.lagrangian_value(&p2, &q2, &duals, &v, 1e-4).unwrap();
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn residual_of_constructed_fixed_point() {
        let net = one_bus();
        let bounds = VoltageBounds::from_magnitudes(1, 0.95, 1.05).unwrap();
        let cfg = SolverConfig::default();
        let prob = OpfProblem::new(&net, vec![dev(0.0, 0.0)], &[], bounds).unwrap();
        // Overvoltage v held fixed: the dual fixed point is (v - vhi) / eta.
        let v = DVector::from_element(1, 1.1025 + 2e-4);
        let over = (v[0] - 1.1025) / cfg.eta;
        let duals = DualState {
            over: DVector::from_element(1, over),
            under: DVector::zeros(1),
        };
        // Primal fixed point for a coupling term g: 2 (p - p0) + g = 0.
        let g = DVector::from_element(1, 0.3);
        let p = DVector::from_element(1, -0.15);
        let q = DVector::from_element(1, -0.15);
        let res = prob
            .saddle_residual(&p, &q, &duals, &v, &g, &g, &cfg)
            .unwrap();
        assert!(res < 1e-9, "{res}");
        let res_again = prob
            .saddle_residual(&p, &q, &duals, &v, &g, &g, &cfg)
            .unwrap();
        assert_eq!(res, res_again);
        let off = prob
            .saddle_residual(&(&p * 0.5), &q, &duals, &v, &g, &g, &cfg)
            .unwrap();
        assert!(off > 0.1);
    }

    #[test]
    fn problem_document() {
        let net = one_bus();
        let prob = OpfProblem::from_json(
            &net,
            r#"{"devices":[{"bus":1,"phase":"a","p0":0.1,"q0":0.0,"pmin":-0.5,"pmax":0.5,"qmin":-0.5,"qmax":0.5,"wp":1,"wq":1}],
                "vmin":0.95,"vmax":1.05}"#,
        )
        .unwrap();
        assert!((prob.bounds.lower[0] - 0.9025).abs() < 1e-15);
        assert!(prob.device_at(0).is_some());
        let bg_only = OpfProblem::from_json(
            &net,
            r#"{"background":[{"bus":1,"phase":"a","p":-0.2,"q":-0.1}]}"#,
        )
        .unwrap();
        assert_eq!(bg_only.project(0, 5.0, 5.0), (-0.2, -0.1));
        assert_eq!(
            bg_only.objective(
                &DVector::from_element(1, -0.2),
                &DVector::from_element(1, -0.1)
            ),
            0.0
        );
        assert!(OpfProblem::from_json(
            &net,
            r#"{"background":[{"bus":1,"phase":"b","p":0,"q":0}]}"#
        )
        .is_err());
        assert!(OpfProblem::from_json(&net, r#"{"vmin":1.1,"vmax":1.0}"#).is_err());
    }
}
