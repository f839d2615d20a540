//! Experiment orchestration: configuration, seeded Monte Carlo risk estimation, moment
//! checks, and report emission (CSV, JSON, SVG).
//!
//! Every trial draws its node field from a seed derived from `(master seed, cell, trial)`,
//! and reductions only count, so results do not depend on the number of worker threads.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path as FsPath, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::bounds::{self, critical_psi, known_start_bound, unknown_start_bound};
use crate::detect::{
    pair_score, psi_min, run_scans, test_threshold, PairSign, ScanEngine, Scanner, SignMode,
};
use crate::error::{Error, Result};
use crate::graph::{NodeId, Path, TorusLattice};
use crate::model::{plant, CorrelationModel};
use crate::normal;
use crate::paths::{estimate_eit, CountKind, PathClass, PriorSampler, Start, DEFAULT_BUDGET};
use crate::rng::{self, CounterRng, Domain};
use crate::stats::{Moments, Proportion};

pub const VERSION: &str = match option_env!("CORRPATH_GIT_DESCRIBE") {
    Some(v) => v,
    None => concat!("v", env!("CARGO_PKG_VERSION")),
};

const MIN_PANEL: usize = 32;
const WALK_ATTEMPTS: u64 = 1_000_000;
/// Standard errors allowed between a Monte Carlo moment and its target.
const CHECK_SE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    pub d: usize,
    pub m: usize,
}

/// Start node as written in a config: a node index or `"unknown"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "StartRepr", into = "StartRepr")]
pub enum StartSpec {
    Node(u32),
    Unknown,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum StartRepr {
    Node(u32),
    Word(String),
}

impl TryFrom<StartRepr> for StartSpec {
    type Error = String;

    fn try_from(r: StartRepr) -> std::result::Result<Self, String> {
        match r {
            StartRepr::Node(v) => Ok(StartSpec::Node(v)),
            StartRepr::Word(w) => w.parse().map_err(|e: Error| e.to_string()),
        }
    }
}

impl From<StartSpec> for StartRepr {
    fn from(s: StartSpec) -> Self {
        match s {
            StartSpec::Node(v) => StartRepr::Node(v),
            StartSpec::Unknown => StartRepr::Word("unknown".into()),
        }
    }
}

impl FromStr for StartSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "unknown" {
            return Ok(StartSpec::Unknown);
        }
        s.parse().map(StartSpec::Node).map_err(|_| {
            Error::Parse(format!(
                "start must be a node index or \"unknown\", got {s:?}"
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassConfig {
    pub k: usize,
    pub start: StartSpec,
    #[serde(default)]
    pub oriented: bool,
    #[serde(default = "default_budget")]
    pub budget: u64,
}

fn default_budget() -> u64 {
    DEFAULT_BUDGET
}

impl FromStr for ClassConfig {
    type Err = Error;

    /// `k=32,start=0,oriented`; `start` defaults to node 0.
    fn from_str(s: &str) -> Result<Self> {
        let mut k = None;
        let mut class = ClassConfig {
            k: 0,
            start: StartSpec::Node(0),
            oriented: false,
            budget: DEFAULT_BUDGET,
        };
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let bad = || Error::Parse(format!("bad class token {tok:?}"));
            match tok.split_once('=') {
                Some(("k", v)) => k = Some(v.parse().map_err(|_| bad())?),
                Some(("start", v)) => class.start = v.parse()?,
                Some(("budget", v)) => class.budget = v.parse().map_err(|_| bad())?,
                None if tok == "oriented" => class.oriented = true,
                None if tok == "unoriented" => class.oriented = false,
                _ => return Err(bad()),
            }
        }
        class.k = k.ok_or_else(|| Error::Parse(format!("class spec {s:?} has no k=")))?;
        Ok(class)
    }
}

impl ClassConfig {
    pub fn build(&self, lattice: TorusLattice) -> Result<PathClass> {
        let start = match self.start {
            StartSpec::Node(v) => Start::Known(NodeId(v)),
            StartSpec::Unknown => Start::Unknown,
        };
        Ok(PathClass::new(lattice, self.k, start, self.oriented)?.with_budget(self.budget))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundPrior {
    /// Uniform oriented walks from the class start.
    Oriented,
    /// Even mixture over hypercube blocks (unknown start).
    Mixture,
}

/// Adds a lower-bound column (rows with |ψ| < 1/9) from a fitted EIT certificate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LowerBoundConfig {
    pub prior: BoundPrior,
    #[serde(default = "default_eit_trials")]
    pub eit_trials: u64,
}

fn default_eit_trials() -> u64 {
    100_000
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub csv: Option<PathBuf>,
    pub json: Option<PathBuf>,
    pub svg: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub lattice: LatticeConfig,
    pub class: ClassConfig,
    pub psi: Vec<f64>,
    pub trials: u64,
    #[serde(default = "default_panel")]
    pub panel: usize,
    #[serde(default = "default_sign")]
    pub sign: SignMode,
    #[serde(default = "default_engine")]
    pub engine: ScanEngine,
    #[serde(default)]
    pub seed: u64,
    /// Fixed threshold; calibrated from the class when absent.
    #[serde(default)]
    pub t: Option<f64>,
    #[serde(default)]
    pub lower_bound: Option<LowerBoundConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_panel() -> usize {
    MIN_PANEL
}

fn default_sign() -> SignMode {
    SignMode::Plus
}

fn default_engine() -> ScanEngine {
    ScanEngine::Exhaustive
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

/// Parse the right-hand side of `key=value` as a TOML value, falling back to a string.
fn parse_scalar(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .and_then(|v| serde_json::to_value(v).ok())
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Apply a dotted `key=value` override to a JSON tree.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| invalid(format!("override {assignment:?} is not key=value")))?;
    let mut node = root;
    let parts: Vec<&str> = key.trim().split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(invalid(format!(
                "override key {key:?} has an empty segment"
            )));
        }
        if !node.is_object() {
            *node = Value::Object(Default::default());
        }
        let map = node.as_object_mut().unwrap();
        if i + 1 == parts.len() {
            let value = if *part == "engine" || *part == "sign" {
                Value::String(raw.trim().to_string())
            } else {
                parse_scalar(raw.trim())
            };
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Read a TOML (or `.json`) file, apply `key=value` overrides, and validate.
    pub fn load(path: Option<&FsPath>, overrides: &[String]) -> Result<Self> {
        let mut tree = match path {
            None => Value::Object(Default::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                if p.extension().is_some_and(|e| e == "json") {
                    serde_json::from_str(&text)
                        .map_err(|e| invalid(format!("{}: {e}", p.display())))?
                } else {
                    let table: toml::Table = toml::from_str(&text)
                        .map_err(|e| invalid(format!("{}: {e}", p.display())))?;
                    serde_json::to_value(table).map_err(|e| invalid(e.to_string()))?
                }
            }
        };
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        Self::from_value(tree)
    }

    pub fn from_value(tree: Value) -> Result<Self> {
        let config: Self =
            serde_json::from_value(tree).map_err(|e| invalid(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        Self::from_value(serde_json::to_value(table).map_err(|e| invalid(e.to_string()))?)
    }

    pub fn build_lattice(&self) -> Result<TorusLattice> {
        TorusLattice::new(self.lattice.d, self.lattice.m)
            .map_err(|e| invalid(format!("lattice: {e}")))
    }

    pub fn build_class(&self) -> Result<PathClass> {
        self.class
            .build(self.build_lattice()?)
            .map_err(|e| invalid(format!("class: {e}")))
    }

    /// Check every precondition before any compute; budget refusals keep their own kind.
    pub fn validate(&self) -> Result<()> {
        let lattice = self.build_lattice()?;
        let m = lattice.side();
        let k = self.class.k;
        if let StartSpec::Node(v) = self.class.start {
            if k > m {
                return Err(invalid(format!(
                    "known-start classes need k ≤ m (k = {k}, m = {m})"
                )));
            }
            if v as usize >= lattice.node_count() {
                return Err(invalid(format!("start node {v} is not on the lattice")));
            }
        }
        let class = self.build_class()?;
        if self.psi.is_empty() {
            return Err(invalid("psi grid is empty"));
        }
        if let Some(p) = self.psi.iter().find(|p| !(p.abs() < 1.0)) {
            return Err(invalid(format!("every ψ must satisfy |ψ| < 1, got {p}")));
        }
        if self.trials == 0 {
            return Err(invalid("trials must be positive"));
        }
        if self.panel < MIN_PANEL {
            return Err(invalid(format!(
                "panel must hold at least {MIN_PANEL} paths"
            )));
        }
        if let Some(t) = self.t {
            if !(t > 0.0 && t.is_finite()) {
                return Err(invalid(format!("threshold t must be positive, got {t}")));
            }
        }
        if let Some(lb) = &self.lower_bound {
            if lattice.dim() < 3 {
                return Err(invalid("lower bounds need d ≥ 3"));
            }
            if lb.eit_trials < 1000 {
                return Err(invalid("lower_bound.eit_trials must be at least 1000"));
            }
            match lb.prior {
                BoundPrior::Oriented if self.class.start == StartSpec::Unknown => {
                    return Err(invalid("the oriented bound prior needs a known start"));
                }
                BoundPrior::Mixture if m % (2 * k) != 0 => {
                    return Err(invalid(format!(
                        "mixture prior needs m divisible by 2k (m = {m}, k = {k})"
                    )));
                }
                _ => {}
            }
        }
        Scanner::new(&class, self.engine).map_err(|e| match e {
            Error::Domain(msg) => invalid(format!("engine {}: {msg}", self.engine)),
            other => other,
        })?;
        Ok(())
    }

    /// ψ grid in increasing order.
    pub fn sorted_psi(&self) -> Vec<f64> {
        let mut g = self.psi.clone();
        g.sort_by(f64::total_cmp);
        g.dedup();
        g
    }
}

fn null_seed(seed: u64, trial: u64) -> u64 {
    rng::derive_seed(seed, &[0, trial])
}

fn alt_seed(seed: u64, cell: u64, path: u64, trial: u64) -> u64 {
    rng::derive_seed(seed, &[1, cell, path, trial])
}

/// Null rejection frequency of the calibrated test.
pub fn estimate_type1(
    scanner: &Scanner<'_>,
    mode: SignMode,
    t: f64,
    trials: u64,
    seed: u64,
) -> Proportion {
    let region = scanner.class().region();
    let n = scanner.class().lattice().node_count();
    let rejected: Vec<bool> = (0..trials)
        .into_par_iter()
        .map_init(
            || vec![0.0; n],
            |buf, i| {
                rng::fill_node_normals(null_seed(seed, i), &region, buf);
                run_scans(scanner, buf, mode, t).rejected
            },
        )
        .collect();
    Proportion::new(rejected.iter().filter(|&&r| r).count() as u64, trials)
}

/// Miss frequency for each planted path; `cell` separates the streams of grid points.
#[allow(clippy::too_many_arguments)]
pub fn estimate_type2(
    scanner: &Scanner<'_>,
    mode: SignMode,
    t: f64,
    panel: &[Path],
    model: CorrelationModel,
    trials: u64,
    seed: u64,
    cell: u64,
) -> Vec<Proportion> {
    let region = scanner.class().region();
    let n = scanner.class().lattice().node_count();
    let jobs = panel.len() as u64 * trials;
    let missed: Vec<bool> = (0..jobs)
        .into_par_iter()
        .map_init(
            || vec![0.0; n],
            |buf, job| {
                let (p, i) = (job / trials, job % trials);
                let path = &panel[p as usize];
                rng::fill_node_normals(alt_seed(seed, cell, p, i), &region, buf);
                plant(buf, path.nodes(), model);
                !run_scans(scanner, buf, mode, t).rejected
            },
        )
        .collect();
    missed
        .chunks(trials as usize)
        .map(|c| Proportion::new(c.iter().filter(|&&m| m).count() as u64, trials))
        .collect()
}

/// All class paths when there are at most `size`, else `size` seeded uniform draws.
pub fn planted_panel(class: &PathClass, size: usize, seed: u64) -> Result<(Vec<Path>, bool)> {
    let count = class.count();
    if count.kind == CountKind::Exact && count.value.is_some_and(|v| v <= size as u128) {
        return Ok((class.paths()?.collect(), true));
    }
    let mut rng = CounterRng::new(seed, Domain::Aux, 0);
    let paths = (0..size)
        .map(|_| class.random_path(&mut rng, WALK_ATTEMPTS))
        .collect::<Result<Vec<_>>>()?;
    Ok((paths, false))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskRow {
    pub psi: f64,
    pub type1: Proportion,
    pub type2_worst: Proportion,
    pub type2_mean: Proportion,
    pub worst_path: usize,
    /// type1 + type2_worst, with the interval endpoints added.
    pub risk: f64,
    pub risk_ci_lo: f64,
    pub risk_ci_hi: f64,
    /// 2e^{−k/8}.
    pub null_bound: f64,
    /// 1/(log k)²; the guarantee applies when ψ ≥ ψ_min(t).
    pub type2_bound: f64,
    pub psi_min: f64,
    pub lower_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub size: usize,
    /// True when the panel is all of C, so the worst case is exact.
    pub exhaustive: bool,
}

/// Measured bracket for the detection boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bracket {
    /// Largest ψ where the Ξ-route bound still certifies risk ≥ 1/2.
    pub lower: f64,
    /// Smallest grid ψ with total risk < 0.1.
    pub upper: Option<f64>,
}

impl Bracket {
    pub fn is_ordered(&self) -> bool {
        self.upper.is_some_and(|u| self.lower <= u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub version: String,
    pub config: ExperimentConfig,
    pub t: f64,
    pub log_cardinality: f64,
    pub cardinality_exact: bool,
    pub engine_exact: bool,
    pub panel: Panel,
    pub seed: u64,
    pub rows: Vec<RiskRow>,
    pub bracket: Option<Bracket>,
}

fn lower_bound_fit(
    config: &ExperimentConfig,
    class: &PathClass,
) -> Result<Option<(crate::paths::EitFit, usize)>> {
    let Some(lb) = &config.lower_bound else {
        return Ok(None);
    };
    let lattice = class.lattice().clone();
    let k = class.k();
    let seed = rng::derive_seed(config.seed, &[2]);
    let (sampler, blocks) = match lb.prior {
        BoundPrior::Oriented => {
            let Start::Known(start) = class.start() else {
                unreachable!("validated")
            };
            (PriorSampler::oriented_uniform(lattice, start, k, seed)?, 1)
        }
        BoundPrior::Mixture => {
            let mixture = PriorSampler::hypercube_mixture(lattice.clone(), k, seed)?;
            let blocks = mixture.block_count();
            let crate::paths::PriorKind::HypercubeMixture { centers } = mixture.kind() else {
                unreachable!()
            };
            (
                PriorSampler::oriented_uniform(lattice, centers[0], k, seed)?,
                blocks,
            )
        }
    };
    Ok(Some((estimate_eit(&sampler, lb.eit_trials)?, blocks)))
}

pub fn run_risk_curve(config: &ExperimentConfig) -> Result<RiskReport> {
    config.validate()?;
    let class = config.build_class()?;
    let scanner = Scanner::new(&class, config.engine)?;
    let k = class.k();
    let t = match config.t {
        Some(t) => t,
        None => test_threshold(&class, config.sign)?,
    };
    let (panel, exhaustive) = planted_panel(&class, config.panel, config.seed)?;
    let fit = lower_bound_fit(config, &class)?;

    let type1 = estimate_type1(&scanner, config.sign, t, config.trials, config.seed);
    let null_bound = 2.0 * (-(k as f64) / 8.0).exp();
    let type2_bound = 1.0 / (k as f64).ln().powi(2);
    let pmin = psi_min(t);

    let mut rows = Vec::new();
    for (cell, &psi) in config.sorted_psi().iter().enumerate() {
        let model = CorrelationModel::new(psi)?;
        let misses = estimate_type2(
            &scanner,
            config.sign,
            t,
            &panel,
            model,
            config.trials,
            config.seed,
            cell as u64,
        );
        let (worst_path, worst) = misses
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.estimate.total_cmp(&b.1.estimate).then(b.0.cmp(&a.0)))
            .map(|(i, p)| (i, *p))
            .unwrap();
        let pooled = Proportion::new(
            misses.iter().map(|p| p.successes).sum(),
            misses.iter().map(|p| p.trials).sum(),
        );
        let lower_bound = match &fit {
            Some((eit, blocks)) if psi.abs() < bounds::PSI_LIMIT => Some(
                if *blocks > 1 {
                    unknown_start_bound(psi, eit, *blocks)?
                } else {
                    known_start_bound(psi, eit)?
                }
                .risk_bound,
            ),
            _ => None,
        };
        rows.push(RiskRow {
            psi,
            type1,
            type2_worst: worst,
            type2_mean: pooled,
            worst_path,
            risk: type1.estimate + worst.estimate,
            risk_ci_lo: type1.ci_lo + worst.ci_lo,
            risk_ci_hi: (type1.ci_hi + worst.ci_hi).min(2.0),
            null_bound,
            type2_bound,
            psi_min: pmin,
            lower_bound,
        });
    }
    let bracket = match &fit {
        Some((eit, _)) => Some(Bracket {
            lower: critical_psi(eit, 2.0)?,
            upper: rows.iter().find(|r| r.risk < 0.1).map(|r| r.psi),
        }),
        None => None,
    };
    let count = class.count();
    Ok(RiskReport {
        version: VERSION.to_string(),
        config: config.clone(),
        t,
        log_cardinality: count.log_value,
        cardinality_exact: count.kind == CountKind::Exact,
        engine_exact: scanner.is_exact(),
        panel: Panel {
            size: panel.len(),
            exhaustive,
        },
        seed: config.seed,
        rows,
        bracket,
    })
}

/// Moments of V_{t,S} on one planted path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub psi: f64,
    /// 2Φ(t/√(1−ψ)) − 1.
    pub q: f64,
    pub expected_mean: f64,
    pub mean: f64,
    pub mean_ci_lo: f64,
    pub mean_ci_hi: f64,
    pub variance: f64,
    pub variance_se: f64,
    pub ratio: f64,
    pub mean_ok: bool,
    pub variance_ok: bool,
    /// q ≥ 3/5; only asserted when ψ ≥ ψ_min(t).
    pub q_ok: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub version: String,
    pub config: ExperimentConfig,
    pub t: f64,
    pub psi_min: f64,
    pub path: Path,
    pub rows: Vec<MomentRow>,
}

impl MomentReport {
    pub fn passed(&self) -> bool {
        self.rows
            .iter()
            .all(|r| r.mean_ok && r.variance_ok && r.q_ok != Some(false))
    }
}

/// The straight path along the first axis from the class start.
pub fn straight_path(class: &PathClass) -> Path {
    let origin = match class.start() {
        Start::Known(v) => v,
        Start::Unknown => NodeId(0),
    };
    let mut nodes = vec![origin];
    for _ in 1..class.k() {
        nodes.push(class.lattice().step(*nodes.last().unwrap(), 0, true));
    }
    Path::new(class.lattice(), nodes).expect("k ≤ m keeps a straight walk simple")
}

/// Monte Carlo mean and variance of V_{t,S} on a fixed planted path across the ψ grid.
pub fn run_moment_check(config: &ExperimentConfig) -> Result<MomentReport> {
    config.validate()?;
    if let Some(p) = config.psi.iter().find(|p| !(**p >= 0.0)) {
        return Err(invalid(format!("moment check needs ψ ≥ 0, got {p}")));
    }
    if config.trials < 2 {
        return Err(invalid("moment check needs at least 2 trials"));
    }
    let class = config.build_class()?;
    if class.k() > class.lattice().side() {
        return Err(invalid("moment check needs k ≤ m"));
    }
    let t = match config.t {
        Some(t) => t,
        None => test_threshold(&class, SignMode::Plus)?,
    };
    let path = straight_path(&class);
    let k = class.k();
    let pmin = psi_min(t);
    let mut rows = Vec::new();
    for (cell, &psi) in config.sorted_psi().iter().enumerate() {
        let model = CorrelationModel::new(psi)?;
        let q = normal::central_mass(t / (1.0 - psi).sqrt());
        let expected = (k - 1) as f64 * q;
        let raw: Vec<u32> = path.nodes().iter().map(|v| v.0).collect();
        let local: Vec<NodeId> = (0..k as u32).map(NodeId).collect();
        let scores: Vec<f64> = (0..config.trials)
            .into_par_iter()
            .map_init(
                || vec![0.0; k],
                |buf, i| {
                    // path values only: node j of the path stored at slot j
                    let s = rng::derive_seed(config.seed, &[3, cell as u64, i]);
                    for (slot, &v) in raw.iter().enumerate() {
                        buf[slot] = rng::node_normal(s, v as u64);
                    }
                    plant(buf, &local, model);
                    pair_score(buf, &local, t, PairSign::Plus) as f64
                },
            )
            .collect();
        let mut mo = Moments::default();
        for &x in &scores {
            mo.push(x);
        }
        let est = mo.mean_estimate();
        let mean = est.estimate;
        let var = mo.variance();
        let n = scores.len() as f64;
        let m4 = scores.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
        let var_se = ((m4 - var * var).max(0.0) / n).sqrt();
        // with rare similar pairs the sample can be all zeros; floor the standard error
        // at the binomial value (k−1)q(1−q)
        let se = est.std_error.max((expected * (1.0 - q) / n).sqrt());
        rows.push(MomentRow {
            psi,
            q,
            expected_mean: expected,
            mean,
            mean_ci_lo: est.ci_lo,
            mean_ci_hi: est.ci_hi,
            variance: var,
            variance_se: var_se,
            ratio: if mean > 0.0 { var / mean } else { 0.0 },
            mean_ok: (mean - expected).abs() <= CHECK_SE * se,
            variance_ok: var <= 3.0 * mean + CHECK_SE * (var_se + 3.0 * se),
            // at ψ = ψ_min exactly q = 3/5; allow for rounding of 1 − ψ
            q_ok: (psi >= pmin).then_some(q >= 0.6 - 1e-6),
        });
    }
    Ok(MomentReport {
        version: VERSION.to_string(),
        config: config.clone(),
        t,
        psi_min: pmin,
        path,
        rows,
    })
}

/// One CSV line of a risk report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRecord {
    pub psi: f64,
    pub metric: String,
    pub estimate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub theory: Option<f64>,
    pub trials: u64,
}

pub const CSV_HEADER: &str = "psi,metric,estimate,ci_lo,ci_hi,theory,trials";

pub const METRICS: [&str; 4] = ["type1", "type2_worst", "type2_mean", "risk"];

impl RiskReport {
    pub fn csv_records(&self) -> Vec<CsvRecord> {
        let mut out = Vec::with_capacity(self.rows.len() * METRICS.len());
        for r in &self.rows {
            let type2_theory = (r.psi >= r.psi_min).then_some(r.type2_bound);
            let rec = |metric: &str, p: &Proportion, theory: Option<f64>| CsvRecord {
                psi: r.psi,
                metric: metric.to_string(),
                estimate: p.estimate,
                ci_lo: p.ci_lo,
                ci_hi: p.ci_hi,
                theory,
                trials: p.trials,
            };
            out.push(rec("type1", &r.type1, Some(r.null_bound)));
            out.push(rec("type2_worst", &r.type2_worst, type2_theory));
            out.push(rec("type2_mean", &r.type2_mean, type2_theory));
            out.push(CsvRecord {
                psi: r.psi,
                metric: "risk".into(),
                estimate: r.risk,
                ci_lo: r.risk_ci_lo,
                ci_hi: r.risk_ci_hi,
                theory: r.lower_bound,
                trials: r.type2_worst.trials,
            });
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in self.csv_records() {
            let theory = r.theory.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.psi, r.metric, r.estimate, r.ci_lo, r.ci_hi, theory, r.trials
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }

    /// Risk against ψ: one polyline per metric, theory curves dashed.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (640.0, 400.0, 50.0);
        let psis: Vec<f64> = self.rows.iter().map(|r| r.psi).collect();
        let (lo, hi) = psis
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &p| {
                (a.min(p), b.max(p))
            });
        let span = if hi > lo { hi - lo } else { 1.0 };
        let ymax = self
            .rows
            .iter()
            .map(|r| r.risk.max(1.0))
            .fold(1.0, f64::max);
        let x = |p: f64| pad + (p - lo) / span * (w - 2.0 * pad);
        let y = |v: f64| h - pad - v / ymax * (h - 2.0 * pad);
        let colours = ["#1f77b4", "#d62728", "#ff7f0e", "#2ca02c"];
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
        );
        let _ = writeln!(
            s,
            r##"<rect x="{pad}" y="{pad}" width="{}" height="{}" fill="none" stroke="#999"/>"##,
            w - 2.0 * pad,
            h - 2.0 * pad
        );
        let records = self.csv_records();
        let line = |pts: Vec<(f64, f64)>| {
            pts.iter()
                .map(|&(p, v)| format!("{:.2},{:.2}", x(p), y(v)))
                .collect::<Vec<_>>()
                .join(" ")
        };
        for (metric, colour) in METRICS.iter().zip(colours) {
            let pts: Vec<(f64, f64)> = records
                .iter()
                .filter(|r| r.metric == *metric)
                .map(|r| (r.psi, r.estimate))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline class="metric" data-metric="{metric}" fill="none" stroke="{colour}" points="{}"/>"#,
                line(pts)
            );
            let theory: Vec<(f64, f64)> = records
                .iter()
                .filter(|r| r.metric == *metric)
                .filter_map(|r| r.theory.map(|v| (r.psi, v)))
                .collect();
            if theory.len() >= 2 {
                let _ = writeln!(
                    s,
                    r#"<polyline class="theory" data-metric="{metric}" fill="none" stroke="{colour}" stroke-dasharray="4 3" points="{}"/>"#,
                    line(theory)
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">psi</text>"#,
            w / 2.0,
            h - 15.0
        );
        for (i, metric) in METRICS.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" font-size="11" fill="{}">{metric}</text>"#,
                pad + 10.0,
                pad + 15.0 + 14.0 * i as f64,
                colours[i]
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Parse CSV written by [`RiskReport::to_csv`].
pub fn read_csv(text: &str) -> Result<Vec<CsvRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Parse("unexpected CSV header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Parse(format!("CSV line {}: {l:?}", i + 2));
            if f.len() != 7 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(CsvRecord {
                psi: num(f[0])?,
                metric: f[1].to_string(),
                estimate: num(f[2])?,
                ci_lo: num(f[3])?,
                ci_hi: num(f[4])?,
                theory: if f[5].is_empty() {
                    None
                } else {
                    Some(num(f[5])?)
                },
                trials: f[6].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
    Svg,
}

pub fn emit(report: &RiskReport, format: Format, path: &FsPath) -> Result<()> {
    let body = match format {
        Format::Csv => report.to_csv(),
        Format::Json => report.to_json(),
        Format::Svg => report.to_svg(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Write every output named in the config; returns the paths written.
pub fn write_outputs(report: &RiskReport, out: &OutputConfig) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (p, f) in [
        (&out.csv, Format::Csv),
        (&out.json, Format::Json),
        (&out.svg, Format::Svg),
    ] {
        if let Some(p) = p {
            emit(report, f, p)?;
            written.push(p.clone());
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig::from_toml(
            r#"
            psi = [0.9, 0.0, 0.5]
            trials = 200
            seed = 11
            engine = "dp"
            [lattice]
            d = 3
            m = 8
            [class]
            k = 6
            start = 0
            oriented = true
            "#,
        )
        .unwrap()
    }

    #[test]
    fn class_spec_parsing() {
        let c: ClassConfig = "k=32,start=0,oriented".parse().unwrap();
        assert_eq!((c.k, c.start, c.oriented), (32, StartSpec::Node(0), true));
        let c: ClassConfig = "k=5,start=unknown".parse().unwrap();
        assert_eq!(c.start, StartSpec::Unknown);
        assert!(!c.oriented);
        assert!("start=0".parse::<ClassConfig>().is_err());
        assert!("k=4,colour=red".parse::<ClassConfig>().is_err());
    }

    #[test]
    fn overrides() {
        let mut v = serde_json::json!({"class": {"k": 4}});
        apply_override(&mut v, "class.k=9").unwrap();
        apply_override(&mut v, "psi=[0.1, 0.2]").unwrap();
        apply_override(&mut v, "engine=beam:8").unwrap();
        apply_override(&mut v, "lattice.d=3").unwrap();
        assert_eq!(v["class"]["k"], 9);
        assert_eq!(v["psi"], serde_json::json!([0.1, 0.2]));
        assert_eq!(v["engine"], "beam:8");
        assert_eq!(v["lattice"]["d"], 3);
        assert!(apply_override(&mut v, "nothing").is_err());
    }

    #[test]
    fn validation_errors_are_named() {
        let base = serde_json::to_value(small()).unwrap();
        let cases: [(&str, &str); 6] = [
            ("class.k=9", "k ≤ m"),
            ("psi=[]", "empty"),
            ("psi=[1.5]", "|ψ| < 1"),
            ("panel=4", "panel"),
            ("class.oriented=false", "engine"),
            ("trials=0", "trials"),
        ];
        for (o, needle) in cases {
            let mut v = base.clone();
            apply_override(&mut v, o).unwrap();
            let e = ExperimentConfig::from_value(v).unwrap_err();
            assert!(matches!(e, Error::Validation(_)), "{o}: {e}");
            assert!(e.to_string().contains(needle), "{o}: {e}");
            assert_eq!(e.exit_code(), 2);
        }
        let mut v = base.clone();
        apply_override(&mut v, "lower_bound.prior=\"mixture\"").unwrap();
        assert!(ExperimentConfig::from_value(v).is_err());
        let mut v = base;
        apply_override(&mut v, "engine=exhaustive").unwrap();
        apply_override(&mut v, "class.budget=10").unwrap();
        assert_eq!(ExperimentConfig::from_value(v).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn risk_curve_shape() {
        let r = run_risk_curve(&small()).unwrap();
        let psis: Vec<f64> = r.rows.iter().map(|r| r.psi).collect();
        assert_eq!(psis, vec![0.0, 0.5, 0.9]);
        assert!(r.panel.exhaustive || r.panel.size == 32);
        for row in &r.rows {
            for p in [row.type1, row.type2_worst, row.type2_mean] {
                assert!((0.0..=1.0).contains(&p.estimate));
                assert!(p.ci_lo <= p.estimate && p.estimate <= p.ci_hi);
            }
            assert!(row.type2_worst.estimate >= row.type2_mean.estimate - 1e-12);
        }
        // ψ = 0: the alternative is the null
        let z = &r.rows[0];
        assert!((1.0 - z.type2_mean.estimate - z.type1.estimate).abs() < 0.1);
    }

    #[test]
    fn deterministic_across_threads() {
        let cfg = small();
        let runs: Vec<String> = [1, 3]
            .iter()
            .map(|&n| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .unwrap()
                    .install(|| run_risk_curve(&cfg).unwrap().to_csv())
            })
            .collect();
        assert_eq!(runs[0], runs[1]);
    }

    #[test]
    fn csv_round_trip() {
        let r = run_risk_curve(&small()).unwrap();
        let text = r.to_csv();
        assert!(text.starts_with(CSV_HEADER));
        assert_eq!(read_csv(&text).unwrap(), r.csv_records());
        assert!(read_csv("a,b\n").is_err());
    }

    #[test]
    fn json_echo_and_svg() {
        let cfg = small();
        let r = run_risk_curve(&cfg).unwrap();
        let v: Value = serde_json::from_str(&r.to_json()).unwrap();
        let echo: ExperimentConfig = serde_json::from_value(v["config"].clone()).unwrap();
        assert_eq!(echo, cfg);
        assert_eq!(v["version"], VERSION);
        let svg = r.to_svg();
        assert_eq!(
            svg.matches(r#"<polyline class="metric""#).count(),
            METRICS.len()
        );
    }

    #[test]
    fn emit_reports_path_on_failure() {
        let r = run_risk_curve(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, "x").unwrap();
        let err = emit(&r, Format::Csv, &blocker.join("out.csv")).unwrap_err();
        assert!(err.to_string().contains("file"), "{err}");
        let ok = dir.path().join("nested/r.json");
        emit(&r, Format::Json, &ok).unwrap();
        assert!(ok.exists());
    }

    #[test]
    fn moment_check_small() {
        let mut cfg = small();
        cfg.psi = vec![0.0, 0.5, 1.0 - 1e-12];
        cfg.trials = 4000;
        let r = run_moment_check(&cfg).unwrap();
        assert!(r.passed(), "{:#?}", r.rows);
        let last = r.rows.last().unwrap();
        assert!(last.q > 0.99 && last.mean > 4.9);
    }

    #[test]
    fn lower_bound_column() {
        let mut cfg = small();
        cfg.psi = vec![0.0, 0.05, 0.5];
        cfg.lower_bound = Some(LowerBoundConfig {
            prior: BoundPrior::Oriented,
            eit_trials: 20_000,
        });
        cfg.validate().unwrap();
        let r = run_risk_curve(&cfg).unwrap();
        assert_eq!(r.rows[0].lower_bound, Some(1.0));
        assert!(r.rows[1].lower_bound.is_some());
        assert!(r.rows[2].lower_bound.is_none());
        assert!(r.bracket.as_ref().unwrap().lower > 0.0);
    }
}
