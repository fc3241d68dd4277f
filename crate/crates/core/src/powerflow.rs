//! Unbalanced backward/forward sweep power flow with constant-power injections.

use std::io::Write;

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, Phase, PhaseMatrix, SUBSTATION};
use crate::sensitivity::{omega_pow, SensitivityMatrices};

pub const DEFAULT_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_MAX_SWEEPS: usize = 100;

/// Converged sweep result over the flat index space.
#[derive(Clone, Debug, PartialEq)]
pub struct VoltageSolution {
    pub phasors: Vec<Complex64>,
    /// Squared magnitudes of `phasors`.
    pub v: DVector<f64>,
    pub sweeps: usize,
    /// Largest complex power mismatch over all bus/phase pairs (p.u.).
    pub mismatch: f64,
}

/// Phasor of the substation on `phase`.
pub fn substation_phasor(net: &Network, phase: Phase) -> Complex64 {
    omega_pow(phase.code() as i32) * net.base_v_squared().sqrt()
}

#[derive(Clone)]
struct BusStep {
    bus: usize,
    id: usize,
    parent: usize,
    start: usize,
    phases: Vec<Phase>,
    z: PhaseMatrix,
}

/// Precomputed sweep order for one network; reusable across solves.
#[derive(Clone)]
pub struct SweepPlan {
    n_flat: usize,
    n_bus: usize,
    root: usize,
    root_phasors: [Complex64; 3],
    /// Non-root buses in pre-order.
    steps: Vec<BusStep>,
    /// For each step, the step positions of its children.
    children: Vec<Vec<usize>>,
    flat_bus: Vec<(usize, usize)>,
}

impl SweepPlan {
    pub fn new(net: &Network) -> Result<Self> {
        let root = net.idx(SUBSTATION)?;
        let pre = net.pre_order_idx();
        let mut pos = vec![usize::MAX; net.bus_count()];
        let mut steps = Vec::with_capacity(pre.len());
        for &v in &pre {
            let Some(parent) = net.parent_idx(v) else {
                continue;
            };
            pos[v] = steps.len();
            steps.push(BusStep {
                bus: v,
                id: net.id_of(v),
                parent,
                start: net.flat_start_idx(v),
                phases: net.buses()[v].phases.iter().collect(),
                z: *net.feeder_z_idx(v),
            });
        }
        let children = steps
            .iter()
            .map(|s| net.children_idx(s.bus).iter().map(|&c| pos[c]).collect())
            .collect();
        let mut root_phasors = [Complex64::new(0.0, 0.0); 3];
        for phase in Phase::ALL {
            root_phasors[phase.code()] = substation_phasor(net, phase);
        }
        let flat_bus = net
            .flat_entries()
            .iter()
            .map(|&(bus, phase)| Ok((net.idx(bus)?, phase.code())))
            .collect::<Result<_>>()?;
        Ok(SweepPlan {
            n_flat: net.n_flat(),
            n_bus: net.bus_count(),
            root,
            root_phasors,
            steps,
            children,
            flat_bus,
        })
    }

    /// Solves for bus voltages given per-index injections `p + iq` (loads negative).
    ///
    /// Starts from the no-load profile; each sweep accumulates branch
    /// currents from the leaves up and then recomputes voltage drops from the
    /// substation down. Stops when the injections implied by the new voltages
    /// and the currents used match the requested ones within `tol`.
    pub fn solve(
        &self,
        p: &DVector<f64>,
        q: &DVector<f64>,
        tol: f64,
        max_sweeps: usize,
    ) -> Result<VoltageSolution> {
        let n = self.n_flat;
        for len in [p.len(), q.len()] {
            if len != n {
                return Err(Error::Dimension {
                    expected: n,
                    got: len,
                });
            }
        }
        if p.iter().chain(q.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Validation("injections must be finite".into()));
        }
        let zero = Complex64::new(0.0, 0.0);
        let s: Vec<Complex64> = (0..n).map(|a| Complex64::new(p[a], q[a])).collect();
        let mut volts = vec![[zero; 3]; self.n_bus];
        volts[self.root] = self.root_phasors;
        for st in &self.steps {
            for &phase in &st.phases {
                volts[st.bus][phase.code()] = self.root_phasors[phase.code()];
            }
        }
        let mut injected = vec![zero; n];
        let mut branch = vec![[zero; 3]; self.steps.len()];
        let mut mismatch = f64::INFINITY;
        for sweep in 1..=max_sweeps.max(1) {
            for st in &self.steps {
                for (k, &phase) in st.phases.iter().enumerate() {
                    let vv = volts[st.bus][phase.code()];
                    if vv.norm_sqr() == 0.0 {
                        return Err(Error::ZeroVoltage { bus: st.id, phase });
                    }
                    injected[st.start + k] = (s[st.start + k] / vv).conj();
                }
            }
            // Backward: current into each bus is its load plus everything below.
            for (i, st) in self.steps.iter().enumerate().rev() {
                let mut j = [zero; 3];
                for (k, &phase) in st.phases.iter().enumerate() {
                    j[phase.code()] = -injected[st.start + k];
                }
                for &c in &self.children[i] {
                    for (jj, bc) in j.iter_mut().zip(branch[c]) {
                        *jj += bc;
                    }
                }
                branch[i] = j;
            }
            // Forward: subtract the drop across the feeding line.
            for (i, st) in self.steps.iter().enumerate() {
                for &phi in &st.phases {
                    let mut drop = zero;
                    for &psi in &st.phases {
                        drop += st.z[phi.code()][psi.code()] * branch[i][psi.code()];
                    }
                    volts[st.bus][phi.code()] = volts[st.parent][phi.code()] - drop;
                }
            }
            mismatch = 0.0;
            for st in &self.steps {
                for (k, &phase) in st.phases.iter().enumerate() {
                    let implied = volts[st.bus][phase.code()] * injected[st.start + k].conj();
                    mismatch = f64::max(mismatch, (s[st.start + k] - implied).norm());
                }
            }
            if !mismatch.is_finite() {
                return Err(Error::SweepDiverged {
                    sweeps: sweep,
                    mismatch,
                });
            }
            if mismatch < tol {
                let phasors: Vec<Complex64> =
                    self.flat_bus.iter().map(|&(v, c)| volts[v][c]).collect();
                let v = DVector::from_iterator(n, phasors.iter().map(|x| x.norm_sqr()));
                return Ok(VoltageSolution {
                    phasors,
                    v,
                    sweeps: sweep,
                    mismatch,
                });
            }
        }
        Err(Error::SweepDiverged {
            sweeps: max_sweeps,
            mismatch,
        })
    }
}

/// One-off sweep; see [`SweepPlan::solve`].
pub fn backward_forward_sweep(
    net: &Network,
    p: &DVector<f64>,
    q: &DVector<f64>,
    tol: f64,
    max_sweeps: usize,
) -> Result<VoltageSolution> {
    SweepPlan::new(net)?.solve(p, q, tol, max_sweeps)
}

/// Linear and nonlinear voltages side by side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelComparison {
    pub v_linear: Vec<f64>,
    pub v_nonlinear: Vec<f64>,
    /// `v_nonlinear - v_linear` per flat index.
    pub diff: Vec<f64>,
    pub max_abs_diff: f64,
    pub rms_diff: f64,
    pub sweeps: usize,
    pub mismatch: f64,
}

impl ModelComparison {
    /// Columns: flat_index, v_linear, v_nonlinear, diff.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "flat_index,v_linear,v_nonlinear,diff")?;
        for (a, ((l, nl), d)) in self
            .v_linear
            .iter()
            .zip(&self.v_nonlinear)
            .zip(&self.diff)
            .enumerate()
        {
            writeln!(w, "{a},{l},{nl},{d}")?;
        }
        Ok(())
    }
}

pub fn compare_models(
    net: &Network,
    sens: &SensitivityMatrices,
    p: &DVector<f64>,
    q: &DVector<f64>,
) -> Result<ModelComparison> {
    let linear = sens.voltage_linear(p, q)?;
    let sol = backward_forward_sweep(net, p, q, DEFAULT_TOLERANCE, DEFAULT_MAX_SWEEPS)?;
    let diff: Vec<f64> = sol
        .v
        .iter()
        .zip(linear.iter())
        .map(|(a, b)| a - b)
        .collect();
    let max_abs_diff = diff.iter().fold(0.0, |m: f64, d| m.max(d.abs()));
    let rms_diff = if diff.is_empty() {
        0.0
    } else {
        (diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64).sqrt()
    };
    Ok(ModelComparison {
        v_linear: linear.iter().copied().collect(),
        v_nonlinear: sol.v.iter().copied().collect(),
        diff,
        max_abs_diff,
        rms_diff,
        sweeps: sol.sweeps,
        mismatch: sol.mismatch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Bus, Line, PhaseSet, ZERO_MATRIX};

    fn two_bus(z: Complex64) -> Network {
        let mut m = ZERO_MATRIX;
        m[0][0] = z;
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
                    phases: PhaseSet::single(Phase::A),
                    parent: Some(0),
                },
            ],
            vec![Line {
                from: 0,
                to: 1,
                z: m,
            }],
        )
        .unwrap()
    }

    /// Squared magnitude at the end of one line feeding load `P + iQ`,
    /// from u^2 + (2(rP + xQ) - |V0|^2) u + |z|^2 |S|^2 = 0.
    fn single_line_oracle(z: Complex64, load: Complex64) -> f64 {
        let a = z.re * load.re + z.im * load.im;
        let b = 2.0 * a - 1.0;
        let c = z.norm_sqr() * load.norm_sqr();
        (-b + (b * b - 4.0 * c).sqrt()) / 2.0
    }

    #[test]
    fn unit_load_matches_closed_form() {
        let z = Complex64::new(0.01, 0.02);
        let net = two_bus(z);
        let sol = backward_forward_sweep(
            &net,
            &DVector::from_element(1, -1.0),
            &DVector::zeros(1),
            1e-12,
            200,
        )
        .unwrap();
        let expected = single_line_oracle(z, Complex64::new(1.0, 0.0));
        assert!(sol.v[0] < 1.0);
        assert!(
            (sol.v[0] - expected).abs() < 1e-10,
            "{} vs {expected}",
            sol.v[0]
        );
        assert!((sol.v[0] - sol.phasors[0].norm_sqr()).abs() < 1e-14);
    }

    #[test]
    fn no_load_is_flat() {
        let net = two_bus(Complex64::new(0.01, 0.02));
        let sol =
            backward_forward_sweep(&net, &DVector::zeros(1), &DVector::zeros(1), 1e-8, 10).unwrap();
        assert_eq!(sol.sweeps, 1);
        assert_eq!(sol.mismatch, 0.0);
        assert_eq!(sol.phasors[0], substation_phasor(&net, Phase::A));
    }

    #[test]
    fn overload_reports_divergence() {
        let net = two_bus(Complex64::new(0.5, 0.5));
        let err = backward_forward_sweep(
            &net,
            &DVector::from_element(1, -5.0),
            &DVector::zeros(1),
            1e-8,
            50,
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::SweepDiverged { .. } | Error::ZeroVoltage { .. }),
            "{err:?}"
        );
    }

    #[test]
    fn comparison_csv() {
        let net = two_bus(Complex64::new(0.01, 0.02));
        let sens = SensitivityMatrices::build(&net);
        let cmp = compare_models(&net, &sens, &DVector::zeros(1), &DVector::zeros(1)).unwrap();
        assert!(cmp.max_abs_diff <= 1e-12);
        let mut buf = Vec::new();
        cmp.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next(),
            Some("flat_index,v_linear,v_nonlinear,diff")
        );
        assert_eq!(text.lines().count(), 2);
    }
}
