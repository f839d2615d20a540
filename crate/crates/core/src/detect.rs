//! The pair-count scan test: for a threshold `t`, each path `S` scores
//! `V_{t,S} = #{j : |X_{s_{j+1}} − X_{s_j}| ≤ √2 t}` (the sum replaces the difference
//! for negative correlation), `V* = max_{S∈C} V_{t,S}`, and the test rejects when
//! `V* > k/2`. The threshold is calibrated from `log|C|` so the type-I error is at most
//! `2e^{−k/8}`.
//!
//! Computing `V*` is a prize-collecting path problem. Three engines are provided:
//! exhaustive depth-first search with an optimistic bound, an exact dynamic program for
//! oriented classes, and beam search (lower bound only).

use std::f64::consts::SQRT_2;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NodeId, Path};
use crate::model::{gather, ArCovariance, CorrelationModel};
use crate::normal;
use crate::paths::{PathClass, Start};
use crate::rng;

/// p_t = 2Φ(t) − 1, the null probability that one pair is declared similar.
pub fn pt(t: f64) -> f64 {
    normal::central_mass(t)
}

/// h(x) = x − log x − 1.
pub fn h(x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::domain(format!("h(x) needs x > 0, got {x}")));
    }
    Ok(x - x.ln() - 1.0)
}

/// max((8/k) log|C|, 1).
pub fn calibration_target(k: usize, log_card: f64) -> f64 {
    (8.0 / k as f64 * log_card).max(1.0)
}

/// The largest `t` with `h(2 p_t) ≥ max((8/k) log|C|, 1)` on the branch `p_t < 1/2`.
///
/// `t ↦ h(2 p_t)` decreases from +∞ to 0 on `(0, Φ⁻¹(3/4))`, so the admissible set is an
/// interval `(0, t*]` and `t*` is found by bisection, run to a relative width of 1e−15.
pub fn calibrate(k: usize, log_card: f64) -> Result<f64> {
    if k < 2 {
        return Err(Error::domain(format!("calibration needs k ≥ 2, got {k}")));
    }
    if !(log_card >= 0.0) {
        return Err(Error::domain(format!("log|C| must be ≥ 0, got {log_card}")));
    }
    let target = calibration_target(k, log_card);
    let f = |t: f64| 2.0 * pt(t) - (2.0 * pt(t)).ln() - 1.0 - target;
    let mut hi = normal::quantile(0.75);
    let mut lo = hi;
    // shrink until f(lo) > 0; h(2 p_t) ≈ −log(1.6 t) for small t
    while f(lo) <= 0.0 {
        lo *= 0.5;
        if lo < 1e-300 {
            return Err(Error::domain(
                "calibration target out of floating-point range",
            ));
        }
    }
    if lo == hi {
        hi = lo;
    }
    for _ in 0..4000 {
        let mid = 0.5 * (lo + hi);
        if f(mid) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * lo {
            break;
        }
    }
    Ok(lo)
}

/// ψ_min(t) = 1 − (t / Φ⁻¹(4/5))².
pub fn psi_min(t: f64) -> f64 {
    let q = normal::quantile(0.8);
    1.0 - (t / q).powi(2)
}

/// Which pair statistic to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSign {
    /// |X_{s_{j+1}} − X_{s_j}|, for ψ > 0.
    Plus,
    /// |X_{s_{j+1}} + X_{s_j}|, for ψ < 0.
    Minus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignMode {
    Plus,
    Minus,
    /// Both signs, Bonferroni-combined.
    Both,
}

impl SignMode {
    pub fn signs(self) -> &'static [PairSign] {
        match self {
            SignMode::Plus => &[PairSign::Plus],
            SignMode::Minus => &[PairSign::Minus],
            SignMode::Both => &[PairSign::Plus, PairSign::Minus],
        }
    }
}

impl FromStr for SignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plus" => Ok(SignMode::Plus),
            "minus" => Ok(SignMode::Minus),
            "both" => Ok(SignMode::Both),
            _ => Err(Error::Parse(format!(
                "unknown sign mode {s:?} (plus|minus|both)"
            ))),
        }
    }
}

#[inline]
fn similar(a: f64, b: f64, thr: f64, sign: PairSign) -> bool {
    match sign {
        PairSign::Plus => (b - a).abs() <= thr,
        PairSign::Minus => (b + a).abs() <= thr,
    }
}

/// V_{t,S}: number of consecutive pairs along `nodes` within √2·t.
pub fn pair_score(values: &[f64], nodes: &[NodeId], t: f64, sign: PairSign) -> usize {
    let thr = SQRT_2 * t;
    nodes
        .windows(2)
        .filter(|w| similar(values[w[0].index()], values[w[1].index()], thr, sign))
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ScanEngine {
    Exhaustive,
    OrientedDp,
    Beam(usize),
}

impl fmt::Display for ScanEngine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScanEngine::Exhaustive => f.write_str("exhaustive"),
            ScanEngine::OrientedDp => f.write_str("dp"),
            ScanEngine::Beam(w) => write!(f, "beam:{w}"),
        }
    }
}

impl TryFrom<String> for ScanEngine {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ScanEngine> for String {
    fn from(e: ScanEngine) -> String {
        e.to_string()
    }
}

impl FromStr for ScanEngine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exhaustive" => Ok(ScanEngine::Exhaustive),
            "dp" => Ok(ScanEngine::OrientedDp),
            _ => {
                let width = s
                    .strip_prefix("beam:")
                    .and_then(|w| w.parse::<usize>().ok())
                    .filter(|&w| w > 0)
                    .ok_or_else(|| {
                        Error::Parse(format!("unknown engine {s:?} (exhaustive|dp|beam:<width>)"))
                    })?;
                Ok(ScanEngine::Beam(width))
            }
        }
    }
}

/// Result of one scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionOutcome {
    pub v_star: usize,
    pub argmax_path: Path,
    pub rejected: bool,
    /// False when the engine only certifies a lower bound on V*.
    pub exact: bool,
    pub k: usize,
    pub t: f64,
    pub sign: PairSign,
}

/// Layered successor tables for the oriented dynamic program.
#[derive(Debug)]
struct DpPlan {
    layers: Vec<Vec<NodeId>>,
    // succ[j][i * d + a]: index in layer j+1 of the a-th successor (sorted by node id)
    succ: Vec<Vec<u32>>,
    d: usize,
}

/// Cap on DP table entries (k · layer size · d).
const DP_TABLE_LIMIT: f64 = 4e8;

impl DpPlan {
    fn build(class: &PathClass) -> Result<Self> {
        let lattice = class.lattice();
        let d = lattice.dim();
        let n = lattice.node_count();
        let k = class.k();
        let layer_bound = match class.start() {
            Start::Known(_) => n.min(k.pow(d.min(8) as u32)),
            Start::Unknown => n,
        };
        let size = (k * layer_bound * d) as f64;
        if size > DP_TABLE_LIMIT {
            return Err(Error::Budget {
                what: "oriented DP tables".into(),
                bound: size,
                budget: DP_TABLE_LIMIT as u64,
            });
        }
        let mut layers = vec![class.starts()];
        let mut succ = Vec::with_capacity(k - 1);
        let mut pos = vec![u32::MAX; n];
        let mut moves = Vec::with_capacity(d);
        for _ in 1..k {
            let cur = layers.last().unwrap();
            let mut next: Vec<NodeId> = Vec::new();
            for &v in cur {
                class.sorted_moves(v, &mut moves);
                for &w in &moves {
                    if pos[w.index()] == u32::MAX {
                        pos[w.index()] = 0;
                        next.push(w);
                    }
                }
            }
            next.sort_unstable();
            for (i, w) in next.iter().enumerate() {
                pos[w.index()] = i as u32;
            }
            let mut table = Vec::with_capacity(cur.len() * d);
            for &v in cur {
                class.sorted_moves(v, &mut moves);
                table.extend(moves.iter().map(|w| pos[w.index()]));
            }
            for w in &next {
                pos[w.index()] = u32::MAX;
            }
            succ.push(table);
            layers.push(next);
        }
        Ok(Self { layers, succ, d })
    }

    fn run(&self, values: &[f64], thr: f64, sign: PairSign) -> (usize, Vec<NodeId>) {
        let k = self.layers.len();
        let d = self.d;
        // best[j][i]: best score collectable from node i of layer j to the end
        let mut best: Vec<Vec<u16>> = Vec::with_capacity(k);
        best.resize_with(k, Vec::new);
        best[k - 1] = vec![0; self.layers[k - 1].len()];
        for j in (0..k - 1).rev() {
            let (cur, next) = (&self.layers[j], &self.layers[j + 1]);
            let table = &self.succ[j];
            let later = &best[j + 1];
            let layer: Vec<u16> = cur
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let xv = values[v.index()];
                    table[i * d..(i + 1) * d]
                        .iter()
                        .map(|&w| {
                            let w = w as usize;
                            later[w] + similar(xv, values[next[w].index()], thr, sign) as u16
                        })
                        .max()
                        .unwrap()
                })
                .collect();
            best[j] = layer;
        }
        // smallest start among maximisers, then smallest successor that keeps the optimum
        let (mut i, &v_star) = best[0]
            .iter()
            .enumerate()
            .rev()
            .max_by_key(|&(_, s)| *s)
            .unwrap();
        let mut nodes = Vec::with_capacity(k);
        nodes.push(self.layers[0][i]);
        for j in 0..k - 1 {
            let v = self.layers[j][i];
            let need = best[j][i];
            let xv = values[v.index()];
            let next = &self.layers[j + 1];
            i = self.succ[j][i * d..(i + 1) * d]
                .iter()
                .map(|&w| w as usize)
                .find(|&w| {
                    best[j + 1][w] + similar(xv, values[next[w].index()], thr, sign) as u16 == need
                })
                .unwrap();
            nodes.push(next[i]);
        }
        (v_star as usize, nodes)
    }
}

/// A class paired with an engine, with any per-class preprocessing done once.
#[derive(Debug)]
pub struct Scanner<'a> {
    class: &'a PathClass,
    engine: ScanEngine,
    plan: Option<DpPlan>,
}

impl<'a> Scanner<'a> {
    pub fn new(class: &'a PathClass, engine: ScanEngine) -> Result<Self> {
        let plan = match engine {
            ScanEngine::OrientedDp => {
                if !class.is_oriented() {
                    return Err(Error::domain(
                        "the oriented DP engine needs an oriented class",
                    ));
                }
                if class.k() > class.lattice().side() {
                    return Err(Error::domain(format!(
                        "the oriented DP is exact only for k ≤ m (k = {}, m = {})",
                        class.k(),
                        class.lattice().side()
                    )));
                }
                Some(DpPlan::build(class)?)
            }
            ScanEngine::Exhaustive => {
                let bound = class.log_count_bound().exp();
                if bound > class.budget() as f64 {
                    return Err(Error::Budget {
                        what: "exhaustive scan".into(),
                        bound,
                        budget: class.budget(),
                    });
                }
                None
            }
            ScanEngine::Beam(w) => {
                if w == 0 {
                    return Err(Error::domain("beam width must be positive"));
                }
                None
            }
        };
        Ok(Self {
            class,
            engine,
            plan,
        })
    }

    pub fn class(&self) -> &PathClass {
        self.class
    }

    pub fn engine(&self) -> ScanEngine {
        self.engine
    }

    pub fn is_exact(&self) -> bool {
        !matches!(self.engine, ScanEngine::Beam(_))
    }

    pub fn scan(&self, values: &[f64], t: f64, sign: PairSign) -> DetectionOutcome {
        let thr = SQRT_2 * t;
        let (v_star, nodes) = match (&self.engine, &self.plan) {
            (ScanEngine::OrientedDp, Some(plan)) => plan.run(values, thr, sign),
            (ScanEngine::Exhaustive, _) => exhaustive(self.class, values, thr, sign),
            (ScanEngine::Beam(w), _) => beam(self.class, values, thr, sign, *w),
            (ScanEngine::OrientedDp, None) => unreachable!("plan built in Scanner::new"),
        };
        let k = self.class.k();
        DetectionOutcome {
            v_star,
            argmax_path: Path::from_trusted(nodes),
            rejected: 2 * v_star > k,
            exact: self.is_exact(),
            k,
            t,
            sign,
        }
    }
}

/// V* and its (lexicographically smallest) maximiser over `class`.
pub fn scan(
    values: &[f64],
    class: &PathClass,
    t: f64,
    sign: PairSign,
    engine: ScanEngine,
) -> Result<DetectionOutcome> {
    Ok(Scanner::new(class, engine)?.scan(values, t, sign))
}

struct Dfs<'a> {
    class: &'a PathClass,
    values: &'a [f64],
    thr: f64,
    sign: PairSign,
    k: usize,
    visited: Vec<bool>,
    stack: Vec<NodeId>,
    moves: Vec<Vec<NodeId>>,
    best: Option<usize>,
    best_path: Vec<NodeId>,
}

impl Dfs<'_> {
    fn visit(&mut self, score: usize) {
        let len = self.stack.len();
        if len == self.k {
            if self.best.is_none_or(|b| score > b) {
                self.best = Some(score);
                self.best_path.clone_from(&self.stack);
            }
            return;
        }
        if let Some(b) = self.best {
            if score + (self.k - len) <= b {
                return;
            }
        }
        let v = *self.stack.last().unwrap();
        let mut moves = std::mem::take(&mut self.moves[len]);
        self.class.sorted_moves(v, &mut moves);
        let xv = self.values[v.index()];
        for &w in &moves {
            if self.visited[w.index()] {
                continue;
            }
            let gain = similar(xv, self.values[w.index()], self.thr, self.sign) as usize;
            self.visited[w.index()] = true;
            self.stack.push(w);
            self.visit(score + gain);
            self.stack.pop();
            self.visited[w.index()] = false;
        }
        self.moves[len] = moves;
    }
}

fn exhaustive(class: &PathClass, values: &[f64], thr: f64, sign: PairSign) -> (usize, Vec<NodeId>) {
    let k = class.k();
    let mut dfs = Dfs {
        class,
        values,
        thr,
        sign,
        k,
        visited: vec![false; class.lattice().node_count()],
        stack: Vec::with_capacity(k),
        moves: vec![Vec::new(); k],
        best: None,
        best_path: Vec::new(),
    };
    for s in class.starts() {
        dfs.visited[s.index()] = true;
        dfs.stack.push(s);
        dfs.visit(0);
        dfs.stack.pop();
        dfs.visited[s.index()] = false;
        if dfs.best == Some(k - 1) {
            break;
        }
    }
    let best = dfs
        .best
        .expect("class has at least one path (k ≤ n on a torus)");
    (best, dfs.best_path)
}

fn beam(
    class: &PathClass,
    values: &[f64],
    thr: f64,
    sign: PairSign,
    width: usize,
) -> (usize, Vec<NodeId>) {
    let mut states: Vec<(usize, Vec<NodeId>)> =
        class.starts().into_iter().map(|s| (0, vec![s])).collect();
    let mut moves = Vec::new();
    let order = |a: &(usize, Vec<NodeId>), b: &(usize, Vec<NodeId>)| {
        b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1))
    };
    if states.len() > width {
        states.truncate(width);
    }
    for _ in 1..class.k() {
        let mut next = Vec::with_capacity(states.len() * 2 * class.lattice().dim());
        for (score, nodes) in &states {
            let v = *nodes.last().unwrap();
            let xv = values[v.index()];
            class.sorted_moves(v, &mut moves);
            for &w in &moves {
                if nodes.contains(&w) {
                    continue;
                }
                let gain = similar(xv, values[w.index()], thr, sign) as usize;
                let mut path = nodes.clone();
                path.push(w);
                next.push((score + gain, path));
            }
        }
        if next.len() > width {
            next.select_nth_unstable_by(width - 1, order);
            next.truncate(width);
        }
        next.sort_by(order);
        states = next;
    }
    states
        .into_iter()
        .next()
        .expect("beam search keeps at least one complete path")
}

/// Outcome of the (possibly Bonferroni-combined) calibrated test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub t: f64,
    pub rejected: bool,
    pub outcomes: Vec<DetectionOutcome>,
}

/// Threshold for `class`: calibrated with log|C|, plus log 2 when both signs are combined.
pub fn test_threshold(class: &PathClass, mode: SignMode) -> Result<f64> {
    let extra = if mode == SignMode::Both {
        2f64.ln()
    } else {
        0.0
    };
    calibrate(class.k(), class.log_cardinality() + extra)
}

/// Run the scan(s) of `mode` at threshold `t`.
pub fn run_scans(scanner: &Scanner<'_>, values: &[f64], mode: SignMode, t: f64) -> TestResult {
    let outcomes: Vec<DetectionOutcome> = mode
        .signs()
        .iter()
        .map(|&s| scanner.scan(values, t, s))
        .collect();
    TestResult {
        t,
        rejected: outcomes.iter().any(|o| o.rejected),
        outcomes,
    }
}

/// Calibrate, scan, and decide.
pub fn run_test(
    values: &[f64],
    class: &PathClass,
    mode: SignMode,
    engine: ScanEngine,
) -> Result<TestResult> {
    let t = test_threshold(class, mode)?;
    let scanner = Scanner::new(class, engine)?;
    Ok(run_scans(&scanner, values, mode, t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlrtOutcome {
    pub statistic: f64,
    pub argmax_path: Path,
}

/// max_{S∈C} x_Sᵀ(I − Γ_S⁻¹)x_S over the enumerated class (ties: smallest path).
pub fn glrt_scan(
    values: &[f64],
    class: &PathClass,
    model: CorrelationModel,
) -> Result<GlrtOutcome> {
    let cov = ArCovariance::new(class.k(), model)?;
    let mut best: Option<(f64, Path)> = None;
    for p in class.paths()? {
        let stat = cov.complement_quadratic_form(&gather(values, p.nodes()));
        let better = match &best {
            None => true,
            Some((b, bp)) => stat > *b || (stat == *b && p < *bp),
        };
        if better {
            best = Some((stat, p));
        }
    }
    let (statistic, argmax_path) = best.ok_or_else(|| Error::domain("class contains no paths"))?;
    Ok(GlrtOutcome {
        statistic,
        argmax_path,
    })
}

/// Empirical `level`-quantile of the GLRT statistic under the null.
pub fn glrt_null_quantile(
    class: &PathClass,
    model: CorrelationModel,
    level: f64,
    trials: u64,
    seed: u64,
) -> Result<f64> {
    if !(0.0..1.0).contains(&level) || trials == 0 {
        return Err(Error::domain(
            "quantile level must be in [0, 1) with trials > 0",
        ));
    }
    let paths: Vec<Path> = class.paths()?.collect();
    let cov = ArCovariance::new(class.k(), model)?;
    let region = class.region();
    let n = class.lattice().node_count();
    let mut stats: Vec<f64> = (0..trials)
        .into_par_iter()
        .map_init(
            || vec![0.0; n],
            |buf, i| {
                rng::fill_node_normals(rng::derive_seed(seed, &[i]), &region, buf);
                paths
                    .iter()
                    .map(|p| cov.complement_quadratic_form(&gather(buf, p.nodes())))
                    .fold(f64::NEG_INFINITY, f64::max)
            },
        )
        .collect();
    stats.sort_by(f64::total_cmp);
    let ix = ((level * trials as f64).ceil() as usize).clamp(1, stats.len()) - 1;
    Ok(stats[ix])
}
