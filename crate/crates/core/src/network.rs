//! Rooted multi-phase radial network model.
//!
//! Bus 0 is the substation (slack) and is excluded from the flat index space.
//! Every other bus contributes one flat index per phase, ordered by bus id
//! and then a < b < c within a bus.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SUBSTATION: usize = 0;

/// One of the three conductors. The numeric code enters the phase-rotation
/// exponent of the sensitivity formulas.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Phase> {
        Phase::ALL.get(code).copied()
    }

    pub fn from_char(c: char) -> Option<Phase> {
        match c {
            'a' => Some(Phase::A),
            'b' => Some(Phase::B),
            'c' => Some(Phase::C),
            _ => None,
        }
    }

    pub fn as_char(self) -> char {
        ['a', 'b', 'c'][self.code()]
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

/// Subset of {a, b, c} stored as a bitmask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct PhaseSet(u8);

impl PhaseSet {
    pub const ABC: PhaseSet = PhaseSet(0b111);
    pub const EMPTY: PhaseSet = PhaseSet(0);

    pub fn single(p: Phase) -> Self {
        PhaseSet(1 << p.code())
    }

    pub fn from_phases<I: IntoIterator<Item = Phase>>(phases: I) -> Self {
        phases.into_iter().fold(PhaseSet::EMPTY, |s, p| s.with(p))
    }

    pub fn with(self, p: Phase) -> Self {
        PhaseSet(self.0 | (1 << p.code()))
    }

    pub fn contains(self, p: Phase) -> bool {
        self.0 & (1 << p.code()) != 0
    }

    pub fn is_subset_of(self, other: PhaseSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn union(self, other: PhaseSet) -> Self {
        PhaseSet(self.0 | other.0)
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Phase> {
        Phase::ALL.into_iter().filter(move |&p| self.contains(p))
    }
}

impl fmt::Display for PhaseSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in self.iter() {
            write!(f, "{p}")?;
        }
        Ok(())
    }
}

/// 3x3 complex impedance indexed by phase codes. Entries for phases a line
/// does not carry are zero.
pub type PhaseMatrix = [[Complex64; 3]; 3];

pub const ZERO_MATRIX: PhaseMatrix = [[Complex64::new(0.0, 0.0); 3]; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct Bus {
    pub id: usize,
    pub phases: PhaseSet,
    pub parent: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub z: PhaseMatrix,
}

/// Validated radial network. Immutable after construction.
#[derive(Clone, Debug)]
pub struct Network {
    base_v_squared: f64,
    buses: Vec<Bus>,
    lines: Vec<Line>,
    index_of: HashMap<usize, usize>,
    // Everything below is keyed by internal index (position in `buses`).
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    depth: Vec<usize>,
    // ancestors[k][v] is the 2^k-th ancestor of v (root maps to itself).
    ancestors: Vec<Vec<usize>>,
    // Summed impedance from the substation down to each bus.
    path_z: Vec<PhaseMatrix>,
    // Impedance of the line feeding each bus (zero for the root).
    feeder_z: Vec<PhaseMatrix>,
    flat: Vec<(usize, Phase)>,
    flat_start: Vec<usize>,
}

impl Network {
    /// Validates and indexes a bus/line description.
    pub fn new(base_v_squared: f64, mut buses: Vec<Bus>, lines: Vec<Line>) -> Result<Self> {
        if !(base_v_squared.is_finite() && base_v_squared > 0.0) {
            return Err(Error::Validation(format!(
                "base_v_squared must be positive, got {base_v_squared}"
            )));
        }
        buses.sort_by_key(|b| b.id);
        let mut index_of = HashMap::with_capacity(buses.len());
        for (k, b) in buses.iter().enumerate() {
            if index_of.insert(b.id, k).is_some() {
                return Err(Error::Validation(format!("duplicate bus id {}", b.id)));
            }
            if b.phases.is_empty() {
                return Err(Error::Validation(format!("bus {} has no phases", b.id)));
            }
        }
        let Some(&root) = index_of.get(&SUBSTATION) else {
            return Err(Error::Validation("substation bus 0 is missing".into()));
        };
        if buses[root].phases != PhaseSet::ABC {
            return Err(Error::Validation(
                "substation bus 0 must carry phases abc".into(),
            ));
        }
        if buses[root].parent.is_some() {
            return Err(Error::Validation(
                "substation bus 0 cannot have a parent".into(),
            ));
        }
        if lines.len() + 1 != buses.len() {
            return Err(Error::Validation(format!(
                "not a tree: {} buses need {} lines, found {}",
                buses.len(),
                buses.len() - 1,
                lines.len()
            )));
        }

        let n = buses.len();
        let mut parent = vec![None; n];
        let mut feeder_z = vec![ZERO_MATRIX; n];
        for line in &lines {
            let from = *index_of
                .get(&line.from)
                .ok_or(Error::UnknownBus(line.from))?;
            let to = *index_of.get(&line.to).ok_or(Error::UnknownBus(line.to))?;
            if to == root {
                return Err(Error::Validation(
                    "not a tree: a line feeds the substation".into(),
                ));
            }
            if from == to {
                return Err(Error::Validation(format!(
                    "not a tree: self-loop at bus {}",
                    line.from
                )));
            }
            if parent[to].is_some() {
                return Err(Error::Validation(format!(
                    "not a tree: bus {} is fed by more than one line",
                    line.to
                )));
            }
            parent[to] = Some(from);
            feeder_z[to] = line.z;
        }
        for (k, b) in buses.iter().enumerate() {
            if k == root {
                continue;
            }
            let Some(p) = parent[k] else {
                return Err(Error::Validation(format!(
                    "not a tree: bus {} is disconnected",
                    b.id
                )));
            };
            match b.parent {
                Some(declared) if declared != buses[p].id => {
                    return Err(Error::Validation(format!(
                        "bus {} declares parent {} but is fed from bus {}",
                        b.id, declared, buses[p].id
                    )));
                }
                _ => {}
            }
        }

        // Depth by walking up; a walk longer than n means a cycle that never reaches the root.
        let mut depth = vec![usize::MAX; n];
        depth[root] = 0;
        for (start, bus) in buses.iter().enumerate() {
            let mut chain = Vec::new();
            let mut v = start;
            while depth[v] == usize::MAX {
                chain.push(v);
                if chain.len() > n {
                    return Err(Error::Validation(format!(
                        "not a tree: cycle through bus {}",
                        bus.id
                    )));
                }
                match parent[v] {
                    Some(p) => v = p,
                    None => unreachable!("non-root buses all have parents here"),
                }
            }
            let mut d = depth[v];
            for &u in chain.iter().rev() {
                d += 1;
                depth[u] = d;
            }
        }

        for (k, b) in buses.iter().enumerate() {
            if let Some(p) = parent[k] {
                let pp = buses[p].phases;
                for phase in b.phases.iter() {
                    if !pp.contains(phase) {
                        return Err(Error::Validation(format!(
                            "phase not present on parent: bus {} has phase {} but parent {} carries {}",
                            b.id, phase, buses[p].id, pp
                        )));
                    }
                }
                let z = &feeder_z[k];
                for (r, row) in z.iter().enumerate() {
                    for (c, entry) in row.iter().enumerate() {
                        let carried =
                            b.phases.contains(Phase::ALL[r]) && b.phases.contains(Phase::ALL[c]);
                        if !carried && *entry != Complex64::new(0.0, 0.0) {
                            return Err(Error::Validation(format!(
                                "line into bus {} has impedance entry {}{} for a phase it does not carry",
                                b.id,
                                Phase::ALL[r],
                                Phase::ALL[c]
                            )));
                        }
                        if !(entry.re.is_finite() && entry.im.is_finite()) {
                            return Err(Error::Validation(format!(
                                "line into bus {} has a non-finite impedance",
                                b.id
                            )));
                        }
                    }
                    if z[r][r].re < 0.0 {
                        return Err(Error::Validation(format!(
                            "line into bus {} has negative resistance on phase {}",
                            b.id,
                            Phase::ALL[r]
                        )));
                    }
                }
            }
        }
        let ids: Vec<usize> = buses.iter().map(|b| b.id).collect();
        for (k, b) in buses.iter_mut().enumerate() {
            b.parent = parent[k].map(|p| ids[p]);
        }

        let mut children = vec![Vec::new(); n];
        for (v, p) in parent.iter().enumerate() {
            if let Some(p) = *p {
                children[p].push(v);
            }
        }

        let levels = (usize::BITS - n.leading_zeros()).max(1) as usize;
        let mut ancestors = Vec::with_capacity(levels);
        ancestors.push((0..n).map(|v| parent[v].unwrap_or(v)).collect::<Vec<_>>());
        for k in 1..levels {
            let prev = &ancestors[k - 1];
            let next = (0..n).map(|v| prev[prev[v]]).collect();
            ancestors.push(next);
        }

        // Prefix sums of line impedance along each root path, filled top-down.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&v| depth[v]);
        let mut path_z = vec![ZERO_MATRIX; n];
        for &v in &order {
            if let Some(p) = parent[v] {
                path_z[v] = add_matrix(&path_z[p], &feeder_z[v]);
            }
        }

        let mut flat = Vec::new();
        let mut flat_start = vec![0; n];
        for (k, b) in buses.iter().enumerate() {
            flat_start[k] = flat.len();
            if k != root {
                flat.extend(b.phases.iter().map(|p| (b.id, p)));
            }
        }

        let mut lines = lines;
        lines.sort_by_key(|l| l.to);

        Ok(Network {
            base_v_squared,
            buses,
            lines,
            index_of,
            parent,
            children,
            depth,
            ancestors,
            path_z,
            feeder_z,
            flat,
            flat_start,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: NetworkDocument = serde_json::from_str(text)?;
        doc.into_network()
    }

    pub fn to_document(&self) -> NetworkDocument {
        NetworkDocument::from_network(self)
    }

    pub fn base_v_squared(&self) -> f64 {
        self.base_v_squared
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn lines(&self) -> &[Line] {
        &self.lines
    }

    pub fn bus_count(&self) -> usize {
        self.buses.len()
    }

    /// Number of (bus, phase) pairs excluding the substation.
    pub fn n_flat(&self) -> usize {
        self.flat.len()
    }

    pub fn contains_bus(&self, id: usize) -> bool {
        self.index_of.contains_key(&id)
    }

    pub(crate) fn idx(&self, id: usize) -> Result<usize> {
        self.index_of.get(&id).copied().ok_or(Error::UnknownBus(id))
    }

    pub(crate) fn id_of(&self, idx: usize) -> usize {
        self.buses[idx].id
    }

    pub fn phases(&self, bus: usize) -> Result<PhaseSet> {
        Ok(self.buses[self.idx(bus)?].phases)
    }

    pub fn parent(&self, bus: usize) -> Result<Option<usize>> {
        Ok(self.parent[self.idx(bus)?].map(|p| self.buses[p].id))
    }

    pub fn children(&self, bus: usize) -> Result<Vec<usize>> {
        Ok(self.children[self.idx(bus)?]
            .iter()
            .map(|&c| self.buses[c].id)
            .collect())
    }

    pub fn depth(&self, bus: usize) -> Result<usize> {
        Ok(self.depth[self.idx(bus)?])
    }

    /// Impedance of the line feeding `bus` (zeros for the substation).
    pub fn feeder_impedance(&self, bus: usize) -> Result<&PhaseMatrix> {
        Ok(&self.feeder_z[self.idx(bus)?])
    }

    /// The (bus, phase) pair at each flat index.
    pub fn flat_entries(&self) -> &[(usize, Phase)] {
        &self.flat
    }

    pub fn flat_index(&self, bus: usize, phase: Phase) -> Option<usize> {
        let k = *self.index_of.get(&bus)?;
        let b = &self.buses[k];
        if k == self.index_of[&SUBSTATION] || !b.phases.contains(phase) {
            return None;
        }
        Some(self.flat_start[k] + b.phases.iter().take_while(|&p| p != phase).count())
    }

    /// Flat indices belonging to one bus, in phase order.
    pub fn flat_range(&self, bus: usize) -> Result<std::ops::Range<usize>> {
        let k = self.idx(bus)?;
        if bus == SUBSTATION {
            return Ok(0..0);
        }
        let start = self.flat_start[k];
        Ok(start..start + self.buses[k].phases.len())
    }

    /// Lines on the unique path from the substation to `bus`, substation first.
    pub fn path_to_root(&self, bus: usize) -> Result<Vec<(usize, usize)>> {
        let mut v = self.idx(bus)?;
        let mut path = Vec::with_capacity(self.depth[v]);
        while let Some(p) = self.parent[v] {
            path.push((self.buses[p].id, self.buses[v].id));
            v = p;
        }
        path.reverse();
        Ok(path)
    }

    pub(crate) fn lca_idx(&self, mut u: usize, mut v: usize) -> usize {
        if self.depth[u] < self.depth[v] {
            std::mem::swap(&mut u, &mut v);
        }
        let mut diff = self.depth[u] - self.depth[v];
        let mut k = 0;
        while diff > 0 {
            if diff & 1 == 1 {
                u = self.ancestors[k][u];
            }
            diff >>= 1;
            k += 1;
        }
        if u == v {
            return u;
        }
        for k in (0..self.ancestors.len()).rev() {
            let (au, av) = (self.ancestors[k][u], self.ancestors[k][v]);
            if au != av {
                u = au;
                v = av;
            }
        }
        self.parent[u].expect("distinct buses at equal depth share a proper ancestor")
    }

    /// Lowest common ancestor of two buses.
    pub fn lca(&self, i: usize, j: usize) -> Result<usize> {
        let (u, v) = (self.idx(i)?, self.idx(j)?);
        Ok(self.buses[self.lca_idx(u, v)].id)
    }

    /// True when `a` lies on the root path of `b` (a bus is its own ancestor).
    pub fn is_ancestor(&self, a: usize, b: usize) -> Result<bool> {
        let (u, v) = (self.idx(a)?, self.idx(b)?);
        Ok(self.lca_idx(u, v) == u)
    }

    pub(crate) fn common_path_matrix_idx(&self, u: usize, v: usize) -> &PhaseMatrix {
        &self.path_z[self.lca_idx(u, v)]
    }

    /// Summed (mutual) impedance over the lines shared by the root paths of
    /// `i` and `j`. Lines that do not carry `phi` or `psi` contribute zero.
    pub fn common_path_impedance(
        &self,
        i: usize,
        j: usize,
        phi: Phase,
        psi: Phase,
    ) -> Result<Complex64> {
        let (u, v) = (self.idx(i)?, self.idx(j)?);
        Ok(self.common_path_matrix_idx(u, v)[phi.code()][psi.code()])
    }

    /// All buses in the subtree rooted at `bus`, in pre-order with children by ascending id.
    pub fn subtree(&self, bus: usize) -> Result<Vec<usize>> {
        let start = self.idx(bus)?;
        let mut out = Vec::new();
        let mut stack = vec![start];
        while let Some(v) = stack.pop() {
            out.push(self.buses[v].id);
            stack.extend(self.children[v].iter().rev());
        }
        Ok(out)
    }

    /// Internal indices in pre-order (parents before children).
    pub(crate) fn pre_order_idx(&self) -> Vec<usize> {
        let root = self.index_of[&SUBSTATION];
        let mut out = Vec::with_capacity(self.buses.len());
        let mut stack = vec![root];
        while let Some(v) = stack.pop() {
            out.push(v);
            stack.extend(self.children[v].iter().rev());
        }
        out
    }

    pub(crate) fn parent_idx(&self, v: usize) -> Option<usize> {
        self.parent[v]
    }

    pub(crate) fn children_idx(&self, v: usize) -> &[usize] {
        &self.children[v]
    }

    pub(crate) fn feeder_z_idx(&self, v: usize) -> &PhaseMatrix {
        &self.feeder_z[v]
    }

    pub(crate) fn flat_start_idx(&self, v: usize) -> usize {
        self.flat_start[v]
    }

    /// Copy of this network with every impedance multiplied by `alpha`.
    pub fn scaled_impedances(&self, alpha: f64) -> Result<Network> {
        let lines = self
            .lines
            .iter()
            .map(|l| Line {
                from: l.from,
                to: l.to,
                z: scale_matrix(&l.z, alpha),
            })
            .collect();
        Network::new(self.base_v_squared, self.buses.clone(), lines)
    }
}

pub(crate) fn add_matrix(a: &PhaseMatrix, b: &PhaseMatrix) -> PhaseMatrix {
    let mut out = *a;
    for r in 0..3 {
        for c in 0..3 {
            out[r][c] += b[r][c];
        }
    }
    out
}

fn scale_matrix(a: &PhaseMatrix, alpha: f64) -> PhaseMatrix {
    let mut out = *a;
    for row in out.iter_mut() {
        for e in row.iter_mut() {
            *e *= alpha;
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BusDocument {
    pub id: usize,
    pub phases: Vec<Phase>,
    #[serde(default)]
    pub parent: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LineDocument {
    pub from: usize,
    pub to: usize,
    #[serde(default)]
    pub z: BTreeMap<String, [f64; 2]>,
}

/// On-disk network description.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NetworkDocument {
    #[serde(default = "default_base")]
    pub base_v_squared: f64,
    pub buses: Vec<BusDocument>,
    pub lines: Vec<LineDocument>,
}

fn default_base() -> f64 {
    1.0
}

impl NetworkDocument {
    pub fn into_network(self) -> Result<Network> {
        let mut buses = Vec::with_capacity(self.buses.len());
        for b in self.buses {
            let phases = PhaseSet::from_phases(b.phases.iter().copied());
            if phases.len() != b.phases.len() {
                return Err(Error::Validation(format!(
                    "bus {} lists a phase twice",
                    b.id
                )));
            }
            buses.push(Bus {
                id: b.id,
                phases,
                parent: b.parent,
            });
        }
        let mut lines = Vec::with_capacity(self.lines.len());
        for l in self.lines {
            let mut z = ZERO_MATRIX;
            for (key, [re, im]) in &l.z {
                let mut chars = key.chars();
                let pair = (
                    chars.next().and_then(Phase::from_char),
                    chars.next().and_then(Phase::from_char),
                );
                let (Some(r), Some(c), None) = (pair.0, pair.1, chars.next()) else {
                    return Err(Error::Validation(format!(
                        "line ({}, {}) has malformed phase-pair key {key:?}",
                        l.from, l.to
                    )));
                };
                z[r.code()][c.code()] = Complex64::new(*re, *im);
            }
            lines.push(Line {
                from: l.from,
                to: l.to,
                z,
            });
        }
        Network::new(self.base_v_squared, buses, lines)
    }

    pub fn from_network(net: &Network) -> Self {
        let buses = net
            .buses
            .iter()
            .map(|b| BusDocument {
                id: b.id,
                phases: b.phases.iter().collect(),
                parent: b.parent,
            })
            .collect();
        let lines = net
            .lines
            .iter()
            .map(|l| {
                let mut z = BTreeMap::new();
                for r in Phase::ALL {
                    for c in Phase::ALL {
                        let e = l.z[r.code()][c.code()];
                        if e != Complex64::new(0.0, 0.0) {
                            z.insert(format!("{r}{c}"), [e.re, e.im]);
                        }
                    }
                }
                LineDocument {
                    from: l.from,
                    to: l.to,
                    z,
                }
            })
            .collect();
        NetworkDocument {
            base_v_squared: net.base_v_squared,
            buses,
            lines,
        }
    }
}
