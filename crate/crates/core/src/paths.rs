//! Path classes, their cardinality, exhaustive enumeration, and the priors used by the
//! lower-bound constructions (uniform oriented paths, hypercube-partition mixture).

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FitFailure, Result};
use crate::graph::{NodeId, Path, TorusLattice};
use crate::rng::{CounterRng, Domain};

/// Default cap on the number of paths an exact routine may visit.
pub const DEFAULT_BUDGET: u64 = 10_000_000;

/// Number of lattice axes used by the oriented prior (d = 3 embedded when d > 3).
pub const PRIOR_AXES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Start {
    Known(NodeId),
    Unknown,
}

/// A class C of self-avoiding paths with `k` nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathClass {
    lattice: TorusLattice,
    k: usize,
    start: Start,
    oriented: bool,
    budget: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountKind {
    Exact,
    UpperBound,
}

/// |C|, exact or bounded. `value` is `None` when it does not fit in a `u128`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathCount {
    pub kind: CountKind,
    pub log_value: f64,
    pub value: Option<u128>,
}

impl PathCount {
    pub fn is_exact(&self) -> bool {
        self.kind == CountKind::Exact
    }
}

impl PathClass {
    pub fn new(lattice: TorusLattice, k: usize, start: Start, oriented: bool) -> Result<Self> {
        if k < 2 {
            return Err(Error::domain(format!(
                "path length k must be at least 2, got {k}"
            )));
        }
        if let Start::Known(v) = start {
            if !lattice.contains(v) {
                return Err(Error::domain(format!(
                    "start node {v} is not on the lattice"
                )));
            }
        }
        Ok(Self {
            lattice,
            k,
            start,
            oriented,
            budget: DEFAULT_BUDGET,
        })
    }

    pub fn with_budget(mut self, budget: u64) -> Self {
        self.budget = budget;
        self
    }

    pub fn lattice(&self) -> &TorusLattice {
        &self.lattice
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn start(&self) -> Start {
        self.start
    }

    pub fn is_oriented(&self) -> bool {
        self.oriented
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    fn start_count(&self) -> usize {
        match self.start {
            Start::Known(_) => 1,
            Start::Unknown => self.lattice.node_count(),
        }
    }

    pub fn starts(&self) -> Vec<NodeId> {
        match self.start {
            Start::Known(v) => vec![v],
            Start::Unknown => (0..self.lattice.node_count() as u32).map(NodeId).collect(),
        }
    }

    /// log of (2d)^{k−1} (d^{k−1} for oriented classes), plus log n for an unknown start.
    pub fn log_count_bound(&self) -> f64 {
        let d = self.lattice.dim() as f64;
        let per_step = if self.oriented {
            d.ln()
        } else {
            (2.0 * d).ln()
        };
        let starts = (self.start_count() as f64).ln();
        (self.k - 1) as f64 * per_step + starts
    }

    fn within_budget(&self) -> bool {
        self.log_count_bound() <= (self.budget as f64).ln()
    }

    /// Oriented paths with k ≤ m cannot wrap, so every forward step sequence is self-avoiding.
    fn oriented_closed_form(&self) -> bool {
        self.oriented && self.k <= self.lattice.side()
    }

    pub fn count(&self) -> PathCount {
        let log_bound = self.log_count_bound();
        if self.oriented_closed_form() {
            let d = self.lattice.dim() as u128;
            let value =
                (0..self.k - 1).try_fold(self.start_count() as u128, |acc, _| acc.checked_mul(d));
            return PathCount {
                kind: CountKind::Exact,
                log_value: log_bound,
                value,
            };
        }
        if self.within_budget() {
            // the torus is vertex-transitive, so every start has the same count
            let origin = match self.start {
                Start::Known(v) => v,
                Start::Unknown => NodeId(0),
            };
            let mut visited = vec![false; self.lattice.node_count()];
            visited[origin.index()] = true;
            let per_start = self.count_from(origin, 1, &mut visited);
            let total = per_start as u128 * self.start_count() as u128;
            return PathCount {
                kind: CountKind::Exact,
                log_value: (total as f64).ln(),
                value: Some(total),
            };
        }
        PathCount {
            kind: CountKind::UpperBound,
            log_value: log_bound,
            value: None,
        }
    }

    fn count_from(&self, v: NodeId, len: usize, visited: &mut [bool]) -> u64 {
        if len == self.k {
            return 1;
        }
        let mut total = 0;
        for c in 0..2 * self.lattice.dim() {
            if let Some(w) = self.choice(v, c) {
                if !visited[w.index()] {
                    visited[w.index()] = true;
                    total += self.count_from(w, len + 1, visited);
                    visited[w.index()] = false;
                }
            }
        }
        total
    }

    /// log|C| when affordable, else the log of the upper bound (never below log|C|).
    pub fn log_cardinality(&self) -> f64 {
        self.count().log_value
    }

    /// Step choice `c` from `v`: axis `c / 2`, forward when `c` is even. Oriented classes
    /// only accept forward choices; the backward choice is dropped when it duplicates the
    /// forward one (m = 2).
    #[inline]
    pub(crate) fn choice(&self, v: NodeId, c: usize) -> Option<NodeId> {
        let axis = c / 2;
        if c.is_multiple_of(2) {
            Some(self.lattice.step(v, axis, true))
        } else if self.oriented {
            None
        } else {
            let bw = self.lattice.step(v, axis, false);
            (bw != self.lattice.step(v, axis, true)).then_some(bw)
        }
    }

    /// Successors of `v` allowed by the class, sorted by node index.
    pub(crate) fn sorted_moves(&self, v: NodeId, out: &mut Vec<NodeId>) {
        out.clear();
        for c in 0..2 * self.lattice.dim() {
            if let Some(w) = self.choice(v, c) {
                out.push(w);
            }
        }
        out.sort_unstable();
    }

    pub fn contains(&self, path: &Path) -> bool {
        if path.len() != self.k || !path.is_valid_on(&self.lattice) {
            return false;
        }
        if let Start::Known(v) = self.start {
            if path.start() != v {
                return false;
            }
        }
        !self.oriented || path.is_oriented(&self.lattice, self.lattice.dim())
    }

    /// Every path in C exactly once, in lexicographic order of step choices
    /// (starts in index order for an unknown start).
    pub fn paths(&self) -> Result<PathIter<'_>> {
        if !self.within_budget() {
            return Err(Error::Budget {
                what: "path enumeration".into(),
                bound: self.log_count_bound().exp(),
                budget: self.budget,
            });
        }
        Ok(PathIter {
            class: self,
            starts: self.starts(),
            next_start: 0,
            stack: Vec::with_capacity(self.k),
            visited: vec![false; self.lattice.node_count()],
        })
    }

    /// Nodes any path of the class can visit, sorted by index.
    pub fn region(&self) -> Vec<u32> {
        let origin = match self.start {
            Start::Known(v) => v,
            Start::Unknown => return (0..self.lattice.node_count() as u32).collect(),
        };
        let mut seen = vec![false; self.lattice.node_count()];
        seen[origin.index()] = true;
        let mut frontier = vec![origin];
        let mut all = vec![origin.0];
        for _ in 1..self.k {
            let mut next = Vec::new();
            for &v in &frontier {
                for c in 0..2 * self.lattice.dim() {
                    if let Some(w) = self.choice(v, c) {
                        if !seen[w.index()] {
                            seen[w.index()] = true;
                            next.push(w);
                            all.push(w.0);
                        }
                    }
                }
            }
            frontier = next;
        }
        all.sort_unstable();
        all
    }

    /// A uniform draw from C: uniform forward steps for oriented classes (exact when k ≤ m),
    /// rejection of simple random walks otherwise (uniform over self-avoiding walks).
    pub fn random_path(&self, rng: &mut impl Rng, max_attempts: u64) -> Result<Path> {
        let d = self.lattice.dim();
        let mut nodes = Vec::with_capacity(self.k);
        let mut visited = vec![false; self.lattice.node_count()];
        'attempt: for _ in 0..max_attempts {
            for &v in &nodes {
                visited[NodeId::index(v)] = false;
            }
            nodes.clear();
            let start = match self.start {
                Start::Known(v) => v,
                Start::Unknown => NodeId(rng.random_range(0..self.lattice.node_count() as u32)),
            };
            nodes.push(start);
            visited[start.index()] = true;
            let mut v = start;
            for _ in 1..self.k {
                let w = if self.oriented {
                    self.lattice.step(v, rng.random_range(0..d), true)
                } else {
                    let axis = rng.random_range(0..d);
                    self.lattice.step(v, axis, rng.random_bool(0.5))
                };
                if visited[w.index()] {
                    continue 'attempt;
                }
                visited[w.index()] = true;
                nodes.push(w);
                v = w;
            }
            return Ok(Path::from_trusted(nodes));
        }
        Err(Error::Budget {
            what: "self-avoiding walk rejection sampling".into(),
            bound: max_attempts as f64,
            budget: max_attempts,
        })
    }
}

/// Depth-first enumeration of a [`PathClass`].
pub struct PathIter<'a> {
    class: &'a PathClass,
    starts: Vec<NodeId>,
    next_start: usize,
    stack: Vec<(NodeId, usize)>,
    visited: Vec<bool>,
}

impl Iterator for PathIter<'_> {
    type Item = Path;

    fn next(&mut self) -> Option<Path> {
        let k = self.class.k;
        let choices = 2 * self.class.lattice.dim();
        loop {
            if self.stack.is_empty() {
                let &s = self.starts.get(self.next_start)?;
                self.next_start += 1;
                self.stack.push((s, 0));
                self.visited[s.index()] = true;
            }
            if self.stack.len() == k {
                let path = Path::from_trusted(self.stack.iter().map(|&(v, _)| v).collect());
                let (v, _) = self.stack.pop().unwrap();
                self.visited[v.index()] = false;
                return Some(path);
            }
            let (v, c0) = *self.stack.last().unwrap();
            let mut pushed = false;
            for c in c0..choices {
                if let Some(w) = self.class.choice(v, c) {
                    if !self.visited[w.index()] {
                        self.stack.last_mut().unwrap().1 = c + 1;
                        self.visited[w.index()] = true;
                        self.stack.push((w, 0));
                        pushed = true;
                        break;
                    }
                }
            }
            if !pushed {
                let (v, _) = self.stack.pop().unwrap();
                self.visited[v.index()] = false;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PriorKind {
    /// Uniform forward steps among the first min(d, 3) axes from a fixed start.
    OrientedUniform { start: NodeId },
    /// Even mixture over hypercube blocks of side 2k of oriented priors started at the
    /// block centres.
    HypercubeMixture { centers: Vec<NodeId> },
    /// Always the same path.
    PointMass(Path),
}

/// Seeded prior over paths; draw `i` is a pure function of `(seed, i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSampler {
    lattice: TorusLattice,
    k: usize,
    kind: PriorKind,
    seed: u64,
}

impl PriorSampler {
    pub fn oriented_uniform(
        lattice: TorusLattice,
        start: NodeId,
        k: usize,
        seed: u64,
    ) -> Result<Self> {
        if k < 2 {
            return Err(Error::domain("prior path length k must be at least 2"));
        }
        if k > lattice.side() {
            return Err(Error::domain(format!(
                "oriented prior needs k ≤ m for self-avoidance (k = {k}, m = {})",
                lattice.side()
            )));
        }
        if !lattice.contains(start) {
            return Err(Error::domain(format!(
                "start node {start} is not on the lattice"
            )));
        }
        Ok(Self {
            lattice,
            k,
            kind: PriorKind::OrientedUniform { start },
            seed,
        })
    }

    pub fn hypercube_mixture(lattice: TorusLattice, k: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::domain("prior path length k must be at least 2"));
        }
        let m = lattice.side();
        if !m.is_multiple_of(2 * k) {
            return Err(Error::domain(format!(
                "hypercube mixture needs m divisible by 2k (m = {m}, 2k = {})",
                2 * k
            )));
        }
        let per_axis = m / (2 * k);
        let d = lattice.dim();
        let blocks = per_axis.pow(d as u32);
        let mut centers = Vec::with_capacity(blocks);
        let mut coords = vec![0usize; d];
        for j in 0..blocks {
            let mut rest = j;
            for axis in (0..d).rev() {
                coords[axis] = (rest % per_axis) * 2 * k + (k - 1);
                rest /= per_axis;
            }
            centers.push(lattice.encode(&coords)?);
        }
        Ok(Self {
            lattice,
            k,
            kind: PriorKind::HypercubeMixture { centers },
            seed,
        })
    }

    pub fn point_mass(lattice: TorusLattice, path: Path, seed: u64) -> Result<Self> {
        if !path.is_valid_on(&lattice) {
            return Err(Error::domain(
                "point-mass prior path is not valid on the lattice",
            ));
        }
        Ok(Self {
            lattice,
            k: path.len(),
            kind: PriorKind::PointMass(path),
            seed,
        })
    }

    pub fn lattice(&self) -> &TorusLattice {
        &self.lattice
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn kind(&self) -> &PriorKind {
        &self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// |J| for the mixture, 1 otherwise.
    pub fn block_count(&self) -> usize {
        match &self.kind {
            PriorKind::HypercubeMixture { centers } => centers.len(),
            _ => 1,
        }
    }

    fn oriented_from(&self, start: NodeId, rng: &mut CounterRng) -> Path {
        let axes = PRIOR_AXES.min(self.lattice.dim());
        let mut nodes = Vec::with_capacity(self.k);
        let mut v = start;
        nodes.push(v);
        for _ in 1..self.k {
            v = self.lattice.step(v, rng.random_range(0..axes), true);
            nodes.push(v);
        }
        Path::from_trusted(nodes)
    }

    /// Draw `index` together with its mixture block (0 for non-mixture priors).
    pub fn draw_with_block(&self, index: u64) -> (usize, Path) {
        let mut rng = CounterRng::new(self.seed, Domain::Prior, index);
        match &self.kind {
            PriorKind::OrientedUniform { start } => (0, self.oriented_from(*start, &mut rng)),
            PriorKind::HypercubeMixture { centers } => {
                let j = rng.random_range(0..centers.len());
                (j, self.oriented_from(centers[j], &mut rng))
            }
            PriorKind::PointMass(p) => (0, p.clone()),
        }
    }

    pub fn draw(&self, index: u64) -> Path {
        self.draw_with_block(index).1
    }

    /// Draws `0..count`.
    pub fn sample(&self, count: usize) -> Vec<Path> {
        (0..count as u64).map(|i| self.draw(i)).collect()
    }
}

/// Counts of |S ∩ T| over i.i.d. pairs; `counts[ℓ]` for ℓ = 0..=k.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntersectionTable {
    pub counts: Vec<u64>,
    pub trials: u64,
}

impl IntersectionTable {
    /// Pair `i` is `(s.draw(2i), t.draw(2i + 1))`.
    pub fn sample(s: &PriorSampler, t: &PriorSampler, trials: u64) -> Self {
        let k = s.k().max(t.k());
        let counts = (0..trials)
            .into_par_iter()
            .fold(
                || vec![0u64; k + 1],
                |mut acc, i| {
                    let a = s.draw(2 * i);
                    let b = t.draw(2 * i + 1);
                    acc[a.intersection_size(&b)] += 1;
                    acc
                },
            )
            .reduce(
                || vec![0u64; k + 1],
                |mut x, y| {
                    for (a, b) in x.iter_mut().zip(y) {
                        *a += b;
                    }
                    x
                },
            );
        Self { counts, trials }
    }

    /// Empirical P(|S ∩ T| ≥ ℓ) for ℓ = 1..=k.
    pub fn tail(&self) -> Vec<f64> {
        let k = self.counts.len() - 1;
        let mut out = vec![0.0; k];
        let mut above = 0u64;
        for l in (1..=k).rev() {
            above += self.counts[l];
            out[l - 1] = above as f64 / self.trials as f64;
        }
        out
    }

    fn tail_hits(&self) -> Vec<u64> {
        let k = self.counts.len() - 1;
        let mut out = vec![0; k];
        let mut above = 0u64;
        for l in (1..=k).rev() {
            above += self.counts[l];
            out[l - 1] = above;
        }
        out
    }
}

/// Exponential-intersection-tail certificate: c0 · eta^ℓ dominates the empirical tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EitFit {
    pub eta: f64,
    pub c0: f64,
    /// `tail[ℓ − 1]` = empirical P(|S ∩ T| ≥ ℓ).
    pub tail: Vec<f64>,
    pub trials: u64,
}

/// Levels with at least this many hits drive the slope fit.
const MIN_FIT_HITS: u64 = 5;

impl EitFit {
    pub fn envelope(&self, level: usize) -> f64 {
        self.c0 * self.eta.powi(level as i32)
    }

    /// Least-squares slope of log-tail over ℓ, then the smallest prefactor that makes the
    /// envelope dominate every recorded level.
    pub fn from_table(table: &IntersectionTable) -> Result<Self> {
        let tail = table.tail();
        let hits = table.tail_hits();
        let fail = |kind| Error::Fit {
            kind,
            tail: tail.clone(),
        };
        let positive: Vec<(f64, f64)> = tail
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, &p)| ((i + 1) as f64, p.ln()))
            .collect();
        if positive.is_empty() {
            return Err(fail(FitFailure::NoIntersections));
        }
        if tail.iter().all(|&p| p >= 1.0) {
            return Err(fail(FitFailure::NoDecay));
        }
        let reliable: Vec<(f64, f64)> = tail
            .iter()
            .zip(&hits)
            .enumerate()
            .filter(|(_, (_, &h))| h >= MIN_FIT_HITS)
            .map(|(i, (&p, _))| ((i + 1) as f64, p.ln()))
            .collect();
        let points = if reliable.len() >= 2 {
            &reliable
        } else {
            &positive
        };
        if points.len() < 2 {
            return Err(fail(FitFailure::InsufficientLevels));
        }
        let n = points.len() as f64;
        let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
        let my = points.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let slope = sxy / sxx;
        let eta = slope.exp();
        if !(eta < 1.0) {
            return Err(fail(FitFailure::NoDecay));
        }
        let c0 = positive
            .iter()
            .map(|&(l, lp)| (lp - l * slope).exp())
            .fold(0.0, f64::max);
        Ok(Self {
            eta,
            c0,
            tail,
            trials: table.trials,
        })
    }
}

/// Draws `trials` i.i.d. pairs from `sampler` and fits the EIT envelope.
pub fn estimate_eit(sampler: &PriorSampler, trials: u64) -> Result<EitFit> {
    estimate_eit_between(sampler, sampler, trials)
}

/// As [`estimate_eit`] with S drawn from `s` and T from `t`.
pub fn estimate_eit_between(s: &PriorSampler, t: &PriorSampler, trials: u64) -> Result<EitFit> {
    if trials < 1000 {
        return Err(Error::domain(format!(
            "EIT estimation needs at least 1000 trials, got {trials}"
        )));
    }
    EitFit::from_table(&IntersectionTable::sample(s, t, trials))
}
