//! The ambient graph: a d-dimensional torus lattice, and paths on it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Node index in row-major order: `index = Σ c_i · m^(d−1−i)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// `{0..m}^d` with wraparound nearest-neighbour adjacency.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LatticeShape", into = "LatticeShape")]
pub struct TorusLattice {
    d: usize,
    m: usize,
    n: usize,
    // strides[i] = m^(d-1-i)
    strides: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeShape {
    pub d: usize,
    pub m: usize,
}

impl TryFrom<LatticeShape> for TorusLattice {
    type Error = Error;

    fn try_from(s: LatticeShape) -> Result<Self> {
        TorusLattice::new(s.d, s.m)
    }
}

impl From<TorusLattice> for LatticeShape {
    fn from(l: TorusLattice) -> Self {
        LatticeShape { d: l.d, m: l.m }
    }
}

impl TorusLattice {
    pub fn new(d: usize, m: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::domain("lattice dimension d must be at least 1"));
        }
        if m < 2 {
            return Err(Error::domain("lattice side m must be at least 2"));
        }
        let n = (0..d)
            .try_fold(1usize, |acc, _| acc.checked_mul(m))
            .filter(|&n| n <= u32::MAX as usize)
            .ok_or_else(|| Error::domain(format!("lattice {m}^{d} has too many nodes")))?;
        let mut strides = vec![1; d];
        for i in (0..d.saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * m;
        }
        Ok(Self { d, m, n, strides })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn side(&self) -> usize {
        self.m
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn contains(&self, v: NodeId) -> bool {
        v.index() < self.n
    }

    fn check(&self, v: NodeId) -> Result<()> {
        if self.contains(v) {
            Ok(())
        } else {
            Err(Error::domain(format!(
                "node {v} out of range for a lattice with {} nodes",
                self.n
            )))
        }
    }

    pub fn encode(&self, coords: &[usize]) -> Result<NodeId> {
        if coords.len() != self.d {
            return Err(Error::domain(format!(
                "expected {} coordinates, got {}",
                self.d,
                coords.len()
            )));
        }
        let mut ix = 0;
        for (&c, &s) in coords.iter().zip(&self.strides) {
            if c >= self.m {
                return Err(Error::domain(format!(
                    "coordinate {c} not below side {}",
                    self.m
                )));
            }
            ix += c * s;
        }
        Ok(NodeId(ix as u32))
    }

    pub fn decode(&self, v: NodeId) -> Result<Vec<usize>> {
        self.check(v)?;
        Ok((0..self.d).map(|axis| self.coord(v, axis)).collect())
    }

    #[inline]
    pub fn coord(&self, v: NodeId, axis: usize) -> usize {
        (v.index() / self.strides[axis]) % self.m
    }

    /// One unit step along `axis`, forward or backward, with wraparound.
    #[inline]
    pub fn step(&self, v: NodeId, axis: usize, forward: bool) -> NodeId {
        let s = self.strides[axis];
        let c = self.coord(v, axis);
        let ix = v.index();
        let next = if forward {
            if c + 1 == self.m {
                ix - c * s
            } else {
                ix + s
            }
        } else if c == 0 {
            ix + (self.m - 1) * s
        } else {
            ix - s
        };
        NodeId(next as u32)
    }

    /// Translate `v` by a displacement vector (entries taken mod m).
    pub fn translate(&self, v: NodeId, delta: &[usize]) -> NodeId {
        let mut ix = 0;
        for (axis, &step) in delta.iter().enumerate().take(self.d) {
            let c = (self.coord(v, axis) + step) % self.m;
            ix += c * self.strides[axis];
        }
        NodeId(ix as u32)
    }

    /// Wraparound neighbours in step order (axis 0 forward, axis 0 backward, axis 1 ...),
    /// duplicates removed (only possible when m = 2).
    pub fn neighbors(&self, v: NodeId) -> Result<Vec<NodeId>> {
        self.check(v)?;
        let mut out = Vec::with_capacity(2 * self.d);
        self.for_each_neighbor(v, |w| out.push(w));
        Ok(out)
    }

    #[inline]
    pub(crate) fn for_each_neighbor(&self, v: NodeId, mut f: impl FnMut(NodeId)) {
        for axis in 0..self.d {
            let fw = self.step(v, axis, true);
            f(fw);
            let bw = self.step(v, axis, false);
            if bw != fw {
                f(bw);
            }
        }
    }

    pub fn are_adjacent(&self, u: NodeId, v: NodeId) -> bool {
        if !self.contains(u) || !self.contains(v) || u == v {
            return false;
        }
        let mut differing = 0;
        for axis in 0..self.d {
            let (a, b) = (self.coord(u, axis), self.coord(v, axis));
            if a != b {
                differing += 1;
                let diff = (a + self.m - b) % self.m;
                if diff != 1 && diff != self.m - 1 {
                    return false;
                }
            }
        }
        differing == 1
    }

    /// True iff `u → v` is a forward unit step along one of the first `axes` axes.
    pub fn is_forward_step(&self, u: NodeId, v: NodeId, axes: usize) -> bool {
        (0..axes.min(self.d)).any(|axis| self.step(u, axis, true) == v)
    }

    /// Consecutive-adjacent, pairwise distinct, length ≥ 2, all nodes in range.
    pub fn is_valid_path(&self, nodes: &[NodeId]) -> bool {
        if nodes.len() < 2 || nodes.iter().any(|&v| !self.contains(v)) {
            return false;
        }
        if !nodes.windows(2).all(|w| self.are_adjacent(w[0], w[1])) {
            return false;
        }
        let mut sorted = nodes.to_vec();
        sorted.sort_unstable();
        sorted.windows(2).all(|w| w[0] != w[1])
    }
}

/// A self-avoiding path on a lattice (the anomaly support).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Path {
    nodes: Vec<NodeId>,
}

impl Path {
    pub fn new(lattice: &TorusLattice, nodes: Vec<NodeId>) -> Result<Self> {
        if lattice.is_valid_path(&nodes) {
            Ok(Self { nodes })
        } else {
            Err(Error::domain(format!(
                "not a self-avoiding path of length ≥ 2 on the lattice: {}",
                Self { nodes }
            )))
        }
    }

    /// Caller guarantees validity.
    pub(crate) fn from_trusted(nodes: Vec<NodeId>) -> Self {
        debug_assert!(nodes.len() >= 2);
        Self { nodes }
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn start(&self) -> NodeId {
        self.nodes[0]
    }

    pub fn is_valid_on(&self, lattice: &TorusLattice) -> bool {
        lattice.is_valid_path(&self.nodes)
    }

    pub fn is_oriented(&self, lattice: &TorusLattice, axes: usize) -> bool {
        self.nodes
            .windows(2)
            .all(|w| lattice.is_forward_step(w[0], w[1], axes))
    }

    /// |set(self) ∩ set(other)|.
    pub fn intersection_size(&self, other: &Path) -> usize {
        intersection_size(&self.nodes, &other.nodes)
    }
}

/// Node-set intersection size of two node sequences (each assumed duplicate-free).
pub fn intersection_size(a: &[NodeId], b: &[NodeId]) -> usize {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable();
    b.sort_unstable();
    let (mut i, mut j, mut count) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                count += 1;
                i += 1;
                j += 1;
            }
        }
    }
    count
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.nodes.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Parses the comma-separated node list only; validate with [`Path::new`].
impl FromStr for Path {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let nodes = s
            .trim()
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<u32>()
                    .map(NodeId)
                    .map_err(|e| Error::Parse(format!("bad node index {tok:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { nodes })
    }
}

/// One path per line, comma-separated node indices.
pub fn write_paths<'a>(paths: impl IntoIterator<Item = &'a Path>) -> String {
    let mut out = String::new();
    for p in paths {
        out.push_str(&p.to_string());
        out.push('\n');
    }
    out
}

pub fn read_paths(lattice: &TorusLattice, text: &str) -> Result<Vec<Path>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let raw: Path = l.parse()?;
            Path::new(lattice, raw.nodes)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn node(l: &TorusLattice, c: &[usize]) -> NodeId {
        l.encode(c).unwrap()
    }

    #[test]
    fn neighbors_wrap_in_3d() {
        let l = TorusLattice::new(3, 5).unwrap();
        let mut got = l.neighbors(node(&l, &[0, 0, 0])).unwrap();
        got.sort();
        let mut want: Vec<_> = [
            [4, 0, 0],
            [1, 0, 0],
            [0, 4, 0],
            [0, 1, 0],
            [0, 0, 4],
            [0, 0, 1],
        ]
        .iter()
        .map(|c| node(&l, c))
        .collect();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn neighbors_on_a_cycle() {
        let l = TorusLattice::new(1, 4).unwrap();
        let mut got = l.neighbors(NodeId(1)).unwrap();
        got.sort();
        assert_eq!(got, vec![NodeId(0), NodeId(2)]);
    }

    #[test]
    fn three_by_three_torus_has_degree_four() {
        let l = TorusLattice::new(2, 3).unwrap();
        for v in 0..9 {
            let nb = l.neighbors(NodeId(v)).unwrap();
            // brute force: all u with exactly one coordinate differing by ±1 mod 3
            let brute = (0..9)
                .filter(|&u| {
                    let (a, b) = (l.decode(NodeId(u)).unwrap(), l.decode(NodeId(v)).unwrap());
                    let diffs: Vec<usize> = (0..2)
                        .map(|i| (a[i] + 3 - b[i]) % 3)
                        .filter(|&x| x != 0)
                        .collect();
                    diffs.len() == 1
                })
                .count();
            assert_eq!(nb.len(), 4);
            assert_eq!(brute, 4);
        }
    }

    #[test]
    fn side_two_collapses_duplicates() {
        let l = TorusLattice::new(2, 2).unwrap();
        assert_eq!(l.neighbors(NodeId(0)).unwrap().len(), 2);
    }

    #[test]
    fn invalid_node_is_a_domain_error() {
        let l = TorusLattice::new(2, 3).unwrap();
        assert!(matches!(l.neighbors(NodeId(9)), Err(Error::Domain(_))));
        assert!(TorusLattice::new(0, 3).is_err());
        assert!(TorusLattice::new(2, 1).is_err());
    }

    #[test]
    fn path_validity() {
        let l = TorusLattice::new(3, 5).unwrap();
        let p = |cs: &[[usize; 3]]| cs.iter().map(|c| node(&l, c)).collect::<Vec<_>>();
        assert!(l.is_valid_path(&p(&[[0, 0, 0], [1, 0, 0], [1, 1, 0]])));
        assert!(!l.is_valid_path(&p(&[[0, 0, 0], [1, 1, 0]])));
        assert!(!l.is_valid_path(&p(&[[0, 0, 0], [1, 0, 0], [0, 0, 0]])));
        assert!(!l.is_valid_path(&p(&[[0, 0, 0]])));
        assert!(l.is_valid_path(&p(&[[4, 0, 0], [0, 0, 0]])));
    }

    #[test]
    fn intersections() {
        let l = TorusLattice::new(3, 5).unwrap();
        let mk =
            |cs: &[[usize; 3]]| Path::new(&l, cs.iter().map(|c| node(&l, c)).collect()).unwrap();
        let s = mk(&[[0, 0, 0], [1, 0, 0], [1, 1, 0]]);
        let t = mk(&[[1, 0, 0], [2, 0, 0]]);
        assert_eq!(s.intersection_size(&s), 3);
        assert_eq!(s.intersection_size(&t), 1);
        let far = mk(&[[3, 3, 3], [3, 3, 4]]);
        assert_eq!(s.intersection_size(&far), 0);
    }

    #[test]
    fn path_text_round_trip() {
        let l = TorusLattice::new(2, 4).unwrap();
        let a = Path::new(&l, vec![NodeId(0), NodeId(1), NodeId(5)]).unwrap();
        let b = Path::new(&l, vec![NodeId(3), NodeId(7)]).unwrap();
        let text = write_paths([&a, &b]);
        assert_eq!(text, "0,1,5\n3,7\n");
        assert_eq!(read_paths(&l, &text).unwrap(), vec![a, b]);
        assert!(read_paths(&l, "0,2\n").is_err());
        assert!(read_paths(&l, "0,x\n").is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(d in 1usize..5, m in 2usize..12, seed in any::<u64>()) {
            let l = TorusLattice::new(d, m).unwrap();
            let v = NodeId((seed % l.node_count() as u64) as u32);
            let c = l.decode(v).unwrap();
            prop_assert_eq!(l.encode(&c).unwrap(), v);
        }

        #[test]
        fn neighbors_symmetric(d in 1usize..4, m in 2usize..7, seed in any::<u64>()) {
            let l = TorusLattice::new(d, m).unwrap();
            let v = NodeId((seed % l.node_count() as u64) as u32);
            for u in l.neighbors(v).unwrap() {
                prop_assert!(l.neighbors(u).unwrap().contains(&v));
                prop_assert!(l.are_adjacent(u, v));
            }
        }

        #[test]
        fn intersection_symmetric_and_bounded(
            a in proptest::collection::vec(0u32..30, 1..8),
            b in proptest::collection::vec(0u32..30, 1..8),
        ) {
            let mut a: Vec<NodeId> = a.into_iter().map(NodeId).collect();
            let mut b: Vec<NodeId> = b.into_iter().map(NodeId).collect();
            a.sort(); a.dedup(); b.sort(); b.dedup();
            let x = intersection_size(&a, &b);
            prop_assert_eq!(x, intersection_size(&b, &a));
            prop_assert!(x <= a.len().min(b.len()));
        }
    }

    #[test]
    fn round_trip_all_nodes_of_a_large_lattice() {
        let l = TorusLattice::new(3, 100).unwrap();
        for v in 0..l.node_count() as u32 {
            let c = l.decode(NodeId(v)).unwrap();
            assert_eq!(l.encode(&c).unwrap(), NodeId(v));
        }
    }
}
