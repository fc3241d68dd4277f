//! Linearized multi-phase voltage model `v = R p + X q + v_tilde`.
//!
//! Every entry reduces to the common-path impedance of the two buses rotated
//! by the 120-degree phase separation:
//! `dv_i^phi/dp_j^psi = 2 Re{conj(Z_ij^{phi psi}) w^(phi-psi)}` and
//! `dv_i^phi/dq_j^psi = -2 Im{conj(Z_ij^{phi psi}) w^(phi-psi)}` with
//! `w = exp(-i 2 pi / 3)`.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::{Network, Phase};

const SQRT3_2: f64 = 0.866_025_403_784_438_6;

/// The rotation constant `exp(-i 2 pi / 3)`.
pub fn omega() -> Complex64 {
    Complex64::new(-0.5, -SQRT3_2)
}

/// `omega^k` for a signed phase-code difference in -2..=2.
pub fn omega_pow(k: i32) -> Complex64 {
    match k.rem_euclid(3) {
        0 => Complex64::new(1.0, 0.0),
        1 => Complex64::new(-0.5, -SQRT3_2),
        _ => Complex64::new(-0.5, SQRT3_2),
    }
}

/// `omega^(code(phi) - code(psi))`.
pub fn rotation(phi: Phase, psi: Phase) -> Complex64 {
    omega_pow(phi.code() as i32 - psi.code() as i32)
}

/// `conj(Z) * omega^(phi - psi)`; its `2 Re` and `-2 Im` are the R and X entries.
pub(crate) fn rotated_conj(z: Complex64, phi: Phase, psi: Phase) -> Complex64 {
    z.conj() * rotation(phi, psi)
}

fn check_phase(net: &Network, bus: usize, phase: Phase) -> Result<()> {
    if net.phases(bus)?.contains(phase) {
        Ok(())
    } else {
        Err(Error::PhaseNotAtBus { bus, phase })
    }
}

fn entry_kernel(net: &Network, i: usize, phi: Phase, j: usize, psi: Phase) -> Result<Complex64> {
    check_phase(net, i, phi)?;
    check_phase(net, j, psi)?;
    let z = net.common_path_impedance(i, j, phi, psi)?;
    Ok(rotated_conj(z, phi, psi))
}

/// `R p + X q + v_tilde` without forming the matrices.
///
/// With `s = p + iq`, `v_i^phi = v_tilde + 2 Re sum_j conj(Z_ij) w^(phi-psi) s_j`.
/// Splitting the common path into lines, each line contributes its own
/// impedance times the injections below it, so one pass up the tree (subtree
/// sums) and one pass down (prefix sums along the path) cover every bus.
pub fn voltage_linear_tree(
    net: &Network,
    p: &DVector<f64>,
    q: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = net.n_flat();
    for len in [p.len(), q.len()] {
        if len != n {
            return Err(Error::Dimension {
                expected: n,
                got: len,
            });
        }
    }
    let pre = net.pre_order_idx();
    let nb = net.bus_count();
    let phases: Vec<Vec<Phase>> = (0..nb)
        .map(|v| net.buses()[v].phases.iter().collect())
        .collect();
    let zero = Complex64::new(0.0, 0.0);

    let mut below = vec![[zero; 3]; nb];
    for &v in pre.iter().rev() {
        if net.parent_idx(v).is_none() {
            continue;
        }
        let start = net.flat_start_idx(v);
        let mut t = [zero; 3];
        for (k, phase) in phases[v].iter().enumerate() {
            t[phase.code()] = Complex64::new(p[start + k], q[start + k]);
        }
        for &c in net.children_idx(v) {
            for (tt, bc) in t.iter_mut().zip(below[c]) {
                *tt += bc;
            }
        }
        below[v] = t;
    }

    let mut acc = vec![[zero; 3]; nb];
    let mut v_out = DVector::from_element(n, net.base_v_squared());
    for &v in &pre {
        let Some(parent) = net.parent_idx(v) else {
            continue;
        };
        let z = net.feeder_z_idx(v);
        let mut w = acc[parent];
        for &phi in &phases[v] {
            for &psi in &phases[v] {
                w[phi.code()] +=
                    rotated_conj(z[phi.code()][psi.code()], phi, psi) * below[v][psi.code()];
            }
        }
        acc[v] = w;
        let start = net.flat_start_idx(v);
        for (k, phase) in phases[v].iter().enumerate() {
            v_out[start + k] += 2.0 * w[phase.code()].re;
        }
    }
    Ok(v_out)
}

/// Sensitivity of `v_i^phi` to real injection `p_j^psi`.
pub fn dv_dp_entry(net: &Network, i: usize, phi: Phase, j: usize, psi: Phase) -> Result<f64> {
    Ok(2.0 * entry_kernel(net, i, phi, j, psi)?.re)
}

/// Sensitivity of `v_i^phi` to reactive injection `q_j^psi`.
pub fn dv_dq_entry(net: &Network, i: usize, phi: Phase, j: usize, psi: Phase) -> Result<f64> {
    Ok(-2.0 * entry_kernel(net, i, phi, j, psi)?.im)
}

/// Dense R, X and the constant offset of the linear voltage model.
#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityMatrices {
    pub r: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub v_tilde: DVector<f64>,
}

const MAGIC: &[u8; 8] = b"OPFSENS1";

impl SensitivityMatrices {
    /// Materializes R and X for every pair of flat indices. Rows are built
    /// in parallel; each entry depends only on its own pair, so the result
    /// does not depend on the worker count.
    pub fn build(net: &Network) -> SensitivityMatrices {
        let n = net.n_flat();
        let entries = net.flat_entries();
        let idx: Vec<usize> = entries
            .iter()
            .map(|&(bus, _)| net.idx(bus).expect("flat bus"))
            .collect();
        let mut r_rows = vec![0.0; n * n];
        let mut x_rows = vec![0.0; n * n];
        r_rows
            .par_chunks_mut(n.max(1))
            .zip(x_rows.par_chunks_mut(n.max(1)))
            .enumerate()
            .for_each(|(a, (r_row, x_row))| {
                let (u, phi) = (idx[a], entries[a].1);
                for b in 0..n {
                    let (v, psi) = (idx[b], entries[b].1);
                    let z = net.common_path_matrix_idx(u, v)[phi.code()][psi.code()];
                    let k = rotated_conj(z, phi, psi);
                    r_row[b] = 2.0 * k.re;
                    x_row[b] = -2.0 * k.im;
                }
            });
        SensitivityMatrices {
            r: DMatrix::from_row_slice(n, n, &r_rows),
            x: DMatrix::from_row_slice(n, n, &x_rows),
            v_tilde: DVector::from_element(n, net.base_v_squared()),
        }
    }

    pub fn dim(&self) -> usize {
        self.v_tilde.len()
    }

    /// `R p + X q + v_tilde`.
    pub fn voltage_linear(&self, p: &DVector<f64>, q: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.dim();
        for len in [p.len(), q.len()] {
            if len != n {
                return Err(Error::Dimension {
                    expected: n,
                    got: len,
                });
            }
        }
        let mut v = self.v_tilde.clone();
        v.gemv(1.0, &self.r, p, 1.0);
        v.gemv(1.0, &self.x, q, 1.0);
        Ok(v)
    }

    /// Binary dump: 16-byte header (magic, u32 N, 4 reserved bytes) followed
    /// by R and X row-major as little-endian f64. `v_tilde` is not stored.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.dim();
        let n32 =
            u32::try_from(n).map_err(|_| Error::Validation(format!("dimension {n} too large")))?;
        w.write_all(MAGIC)?;
        w.write_all(&n32.to_le_bytes())?;
        w.write_all(&[0u8; 4])?;
        for m in [&self.r, &self.x] {
            for row in 0..n {
                for col in 0..n {
                    w.write_all(&m[(row, col)].to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R, base_v_squared: f64) -> Result<SensitivityMatrices> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if &header[..8] != MAGIC {
            return Err(Error::Validation(
                "not a sensitivity dump (bad magic)".into(),
            ));
        }
        let n = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) as usize;
        let read_matrix = |r: &mut R| -> Result<DMatrix<f64>> {
            let mut buf = vec![0u8; n * n * 8];
            r.read_exact(&mut buf)?;
            let vals: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            Ok(DMatrix::from_row_slice(n, n, &vals))
        };
        let rm = read_matrix(&mut r)?;
        let xm = read_matrix(&mut r)?;
        Ok(SensitivityMatrices {
            r: rm,
            x: xm,
            v_tilde: DVector::from_element(n, base_v_squared),
        })
    }
}
