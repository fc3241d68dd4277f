//! Seeded synthetic feeders with devices, loads and a suggested partition.

use num_complex::Complex64;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Bus, Line, Network, Phase, PhaseSet, ZERO_MATRIX};
use crate::opf::{Background, Device, DeviceDocument, OpfProblem, VoltageBounds};
use crate::partition::{auto_partition, PartitionHierarchy};

/// Mean real load per bus and phase at unit load scale (p.u.).
pub const BASE_LOAD: f64 = 0.0025;

/// Load scale of the undervoltage scenario.
pub const HEAVY_LOAD_SCALE: f64 = 2.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeederSpec {
    /// Total buses including the substation.
    pub buses: usize,
    /// Leading chain of three-phase buses below the substation.
    pub trunk_depth: usize,
    /// Chance that a new bus attaches to a random earlier bus instead of the
    /// previous one.
    pub branch_prob: f64,
    pub max_children: usize,
    /// Chance that a bus carries a strict subset of its parent's phases.
    pub phase_drop_prob: f64,
    pub r_range: [f64; 2],
    pub x_range: [f64; 2],
    /// Off-diagonal impedance as a fraction of the self impedance.
    pub mutual_fraction: f64,
    /// Fraction of flat indices that get a controllable device.
    pub device_density: f64,
    pub load_scale: f64,
    /// Half-width of the device boxes around their preference.
    pub box_half_width: f64,
    /// Target area size in buses; 0 picks an eighth of the feeder.
    pub area_size: usize,
    /// Target subarea size in buses; 0 picks a third of the area size.
    pub subarea_size: usize,
    pub vmin: f64,
    pub vmax: f64,
    pub seed: u64,
}

impl Default for FeederSpec {
    fn default() -> Self {
        FeederSpec {
            buses: 300,
            trunk_depth: 8,
            branch_prob: 0.7,
            max_children: 3,
            phase_drop_prob: 0.1,
            r_range: [0.003, 0.015],
            x_range: [0.006, 0.03],
            mutual_fraction: 0.3,
            device_density: 0.3,
            load_scale: 1.0,
            box_half_width: 0.5,
            area_size: 0,
            subarea_size: 0,
            vmin: 0.95,
            vmax: 1.05,
            seed: 0,
        }
    }
}

impl FeederSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Spec(msg));
        if self.buses < 2 {
            return bad(format!("need at least 2 buses, got {}", self.buses));
        }
        if self.max_children == 0 {
            return bad("max_children = 0 cannot grow past the substation".into());
        }
        if self.trunk_depth >= self.buses {
            return bad(format!(
                "trunk depth {} leaves no room in {} buses",
                self.trunk_depth, self.buses
            ));
        }
        for (name, p) in [
            ("branch_prob", self.branch_prob),
            ("phase_drop_prob", self.phase_drop_prob),
            ("device_density", self.device_density),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        for (name, [lo, hi]) in [("r_range", self.r_range), ("x_range", self.x_range)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!(
                    "{name} must be a positive interval, got [{lo}, {hi}]"
                ));
            }
        }
        if !(0.0..1.0).contains(&self.mutual_fraction) {
            return bad(format!(
                "mutual_fraction must lie in [0, 1), got {}",
                self.mutual_fraction
            ));
        }
        if !(self.load_scale >= 0.0 && self.load_scale.is_finite()) {
            return bad(format!(
                "load_scale must be nonnegative, got {}",
                self.load_scale
            ));
        }
        if !(self.box_half_width >= 0.0 && self.box_half_width.is_finite()) {
            return bad(format!(
                "box_half_width must be nonnegative, got {}",
                self.box_half_width
            ));
        }
        if !(self.vmin > 0.0 && self.vmin < self.vmax) {
            return bad(format!(
                "need 0 < vmin < vmax, got {} / {}",
                self.vmin, self.vmax
            ));
        }
        Ok(())
    }

    /// The undervoltage scenario: default shape at heavy load.
    pub fn heavy(buses: usize, seed: u64) -> Self {
        FeederSpec {
            buses,
            seed,
            load_scale: HEAVY_LOAD_SCALE,
            ..FeederSpec::default()
        }
    }
}

/// A generated feeder with everything needed for a solve.
#[derive(Clone, Debug)]
pub struct GeneratedFeeder {
    pub network: Network,
    pub devices: DeviceDocument,
    pub partition: PartitionHierarchy,
}

impl GeneratedFeeder {
    pub fn problem(&self) -> Result<OpfProblem> {
        let bounds = VoltageBounds::from_magnitudes(
            self.network.n_flat(),
            self.devices.vmin,
            self.devices.vmax,
        )?;
        OpfProblem::new(
            &self.network,
            self.devices.devices.clone(),
            &self.devices.background,
            bounds,
        )
    }

    pub fn network_json(&self) -> String {
        serde_json::to_string_pretty(&self.network.to_document())
            .expect("network documents serialize")
    }

    pub fn devices_json(&self) -> String {
        serde_json::to_string_pretty(&self.devices).expect("device documents serialize")
    }

    pub fn partition_json(&self) -> String {
        serde_json::to_string_pretty(&self.partition.to_document())
            .expect("partition documents serialize")
    }
}

/// Draws a random feeder from `spec`.
pub fn generate(spec: &FeederSpec) -> Result<GeneratedFeeder> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // (parent, phases) for buses 1..buses; index 0 is the substation.
    let mut shape: Vec<(usize, PhaseSet)> = vec![(0, PhaseSet::ABC)];
    let mut child_count = vec![0usize; spec.buses];
    for i in 1..spec.buses {
        let parent = if i <= spec.trunk_depth || !rng.gen_bool(spec.branch_prob) {
            i - 1
        } else {
            let open: Vec<usize> = (0..i)
                .filter(|&j| child_count[j] < spec.max_children)
                .collect();
            if open.is_empty() {
                i - 1
            } else {
                open[rng.gen_range(0..open.len())]
            }
        };
        child_count[parent] += 1;
        let inherited = shape[parent].1;
        let phases =
            if i > spec.trunk_depth && inherited.len() > 1 && rng.gen_bool(spec.phase_drop_prob) {
                let proper: Vec<PhaseSet> = (1u8..7)
                    .map(|mask| {
                        PhaseSet::from_phases(
                            Phase::ALL
                                .into_iter()
                                .filter(|p| mask & (1 << p.code()) != 0),
                        )
                    })
                    .filter(|s| s.is_subset_of(inherited) && *s != inherited)
                    .collect();
                proper[rng.gen_range(0..proper.len())]
            } else {
                inherited
            };
        shape.push((parent, phases));
    }

    let network = assemble(&shape, spec, &mut rng)?;
    let devices = place_devices(&network, spec, &mut rng);
    let area_size = if spec.area_size == 0 {
        (spec.buses / 8).max(2)
    } else {
        spec.area_size
    };
    let subarea_size = if spec.subarea_size == 0 {
        (area_size / 3).max(1)
    } else {
        spec.subarea_size
    };
    let partition = auto_partition(&network, area_size, subarea_size);
    Ok(GeneratedFeeder {
        network,
        devices,
        partition,
    })
}

/// A regular benchmark feeder with exactly `n_flat` flat indices.
///
/// A three-phase trunk of `areas` buses carries one single-phase lateral per
/// trunk bus (phases rotating a, b, c). Each lateral is an area: a root bus
/// feeding `subareas` chains of near-equal length, each chain a subarea.
/// Laterals share the remaining indices as evenly as possible.
pub fn balanced_feeder(
    n_flat: usize,
    areas: usize,
    subareas: usize,
    seed: u64,
) -> Result<GeneratedFeeder> {
    if areas == 0 || subareas == 0 {
        return Err(Error::Spec(
            "balanced feeder needs at least one area and one subarea".into(),
        ));
    }
    let trunk = 3 * areas;
    let per_lateral_min = areas * (1 + subareas);
    if n_flat < trunk + per_lateral_min {
        return Err(Error::Spec(format!(
            "{n_flat} indices cannot hold {areas} areas of {subareas} subareas"
        )));
    }
    let spec = FeederSpec {
        buses: 0,
        seed,
        ..FeederSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut shape: Vec<(usize, PhaseSet)> = vec![(0, PhaseSet::ABC)];
    for k in 0..areas {
        shape.push((k, PhaseSet::ABC));
    }
    let rest = n_flat - trunk;
    let mut roots = Vec::with_capacity(areas);
    for k in 0..areas {
        let size = rest / areas + usize::from(k < rest % areas);
        let phase = PhaseSet::single(Phase::ALL[k % 3]);
        let root = shape.len();
        shape.push((k + 1, phase));
        let below = size - 1;
        let mut heads = Vec::with_capacity(subareas);
        for m in 0..subareas {
            let len = below / subareas + usize::from(m < below % subareas);
            let mut prev = root;
            for step in 0..len {
                let id = shape.len();
                shape.push((prev, phase));
                if step == 0 {
                    heads.push(id);
                }
                prev = id;
            }
        }
        roots.push((root, heads));
    }

    let network = assemble(&shape, &spec, &mut rng)?;
    let devices = place_devices(&network, &spec, &mut rng);
    let partition = PartitionHierarchy::from_roots(&network, &roots)?;
    Ok(GeneratedFeeder {
        network,
        devices,
        partition,
    })
}

/// Builds the network for a (parent, phases) list with random impedances.
fn assemble(
    shape: &[(usize, PhaseSet)],
    spec: &FeederSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Network> {
    let mut buses = Vec::with_capacity(shape.len());
    let mut lines = Vec::with_capacity(shape.len().saturating_sub(1));
    for (id, &(parent, phases)) in shape.iter().enumerate() {
        if id == 0 {
            buses.push(Bus {
                id,
                phases,
                parent: None,
            });
            continue;
        }
        buses.push(Bus {
            id,
            phases,
            parent: Some(parent),
        });
        let self_z = Complex64::new(
            rng.gen_range(spec.r_range[0]..=spec.r_range[1]),
            rng.gen_range(spec.x_range[0]..=spec.x_range[1]),
        );
        let mut z = ZERO_MATRIX;
        for r in phases.iter() {
            for c in phases.iter() {
                z[r.code()][c.code()] = if r == c {
                    self_z
                } else {
                    self_z * spec.mutual_fraction
                };
            }
        }
        lines.push(Line {
            from: parent,
            to: id,
            z,
        });
    }
    Network::new(1.0, buses, lines)
}

/// Loads on every flat index; a random subset of them become devices whose
/// preference is that load.
fn place_devices(net: &Network, spec: &FeederSpec, rng: &mut ChaCha8Rng) -> DeviceDocument {
    let n = net.n_flat();
    let loads: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            let p = -spec.load_scale * BASE_LOAD * rng.gen_range(0.5..1.5);
            (p, p * rng.gen_range(0.3..0.5))
        })
        .collect();
    let count = (spec.device_density * n as f64).round() as usize;
    let mut chosen = sample(rng, n, count.min(n)).into_vec();
    chosen.sort_unstable();
    let mut is_device = vec![false; n];
    let w = spec.box_half_width;
    let mut devices = Vec::with_capacity(chosen.len());
    for a in chosen {
        is_device[a] = true;
        let (bus, phase) = net.flat_entries()[a];
        let (p0, q0) = loads[a];
        devices.push(Device {
            bus,
            phase,
            p0,
            q0,
            p_min: p0 - w,
            p_max: p0 + w,
            q_min: q0 - w,
            q_max: q0 + w,
            w_p: 1.0,
            w_q: 1.0,
        });
    }
    let background = (0..n)
        .filter(|&a| !is_device[a])
        .map(|a| {
            let (bus, phase) = net.flat_entries()[a];
            Background {
                bus,
                phase,
                p: loads[a].0,
                q: loads[a].1,
            }
        })
        .collect();
    DeviceDocument {
        devices,
        background,
        vmin: spec.vmin,
        vmax: spec.vmax,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::validate_partition;

    #[test]
    fn same_seed_same_documents() {
        let spec = FeederSpec {
            buses: 37,
            seed: 7,
            ..FeederSpec::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.network_json(), b.network_json());
        assert_eq!(a.devices_json(), b.devices_json());
        assert_eq!(a.partition_json(), b.partition_json());
        let c = generate(&FeederSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.network_json(), c.network_json());
    }

    #[test]
    fn no_phase_drop_means_three_phase_everywhere() {
        let spec = FeederSpec {
            buses: 50,
            phase_drop_prob: 0.0,
            ..FeederSpec::default()
        };
        let f = generate(&spec).unwrap();
        assert_eq!(f.network.n_flat(), 3 * 49);
    }

    #[test]
    fn infeasible_specs_rejected() {
        for spec in [
            FeederSpec {
                buses: 1,
                ..FeederSpec::default()
            },
            FeederSpec {
                max_children: 0,
                ..FeederSpec::default()
            },
            FeederSpec {
                branch_prob: 1.5,
                ..FeederSpec::default()
            },
            FeederSpec {
                r_range: [0.0, 0.01],
                ..FeederSpec::default()
            },
            FeederSpec {
                trunk_depth: 300,
                ..FeederSpec::default()
            },
        ] {
            assert!(matches!(generate(&spec), Err(Error::Spec(_))), "{spec:?}");
        }
    }

    #[test]
    fn balanced_feeder_has_exact_size() {
        for (n, k) in [(256, 16), (512, 23), (1024, 32), (2048, 45)] {
            let f = balanced_feeder(n, k, 4, 1).unwrap();
            assert_eq!(f.network.n_flat(), n);
            assert_eq!(f.partition.area_count(), k);
            assert_eq!(f.partition.subarea_count(), 4 * k);
            assert!(validate_partition(&f.network, &f.partition).is_valid());
        }
        assert!(balanced_feeder(20, 16, 4, 1).is_err());
    }

    #[test]
    fn devices_sit_inside_their_boxes() {
        let f = generate(&FeederSpec {
            buses: 60,
            ..FeederSpec::default()
        })
        .unwrap();
        let prob = f.problem().unwrap();
        let (p, q) = prob.preferred();
        assert!(prob.in_box(&p, &q));
        assert_eq!(
            f.devices.devices.len() + f.devices.background.len(),
            f.network.n_flat()
        );
    }
}
