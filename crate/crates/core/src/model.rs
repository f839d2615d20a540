//! Data model under both hypotheses, AR(1) covariance algebra along a path, and
//! likelihood ratios.
//!
//! Under the null every node carries an independent standard normal. Under the alternative
//! indexed by a path `S = (s_1, …, s_k)` the values along `S` form a stationary AR(1)
//! sequence with coefficient ψ, so that `Γ_S = (ψ^{|i−j|})`. Its inverse is tridiagonal:
//!
//! ```text
//! (Γ_S⁻¹)_{ii} = 1/(1−ψ²)       i ∈ {1, k}
//! (Γ_S⁻¹)_{ii} = 1/σ²_φ         1 < i < k,   σ²_φ = (1−ψ²)/(1+ψ²)
//! (Γ_S⁻¹)_{i,i±1} = −φ/σ²_φ     φ = ψ/(1+ψ²)
//! ```
//!
//! and `log det Γ_S = (k−1) log(1−ψ²)`.

use std::fs;
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{LatticeShape, NodeId, Path, TorusLattice};
use crate::rng;

/// Correlation coefficient ψ with the derived GMRF parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct CorrelationModel {
    psi: f64,
}

impl TryFrom<f64> for CorrelationModel {
    type Error = Error;

    fn try_from(psi: f64) -> Result<Self> {
        Self::new(psi)
    }
}

impl From<CorrelationModel> for f64 {
    fn from(m: CorrelationModel) -> f64 {
        m.psi
    }
}

impl CorrelationModel {
    pub fn new(psi: f64) -> Result<Self> {
        if !(psi.abs() < 1.0) {
            return Err(Error::domain(format!(
                "correlation ψ must lie in (−1, 1), got {psi}"
            )));
        }
        Ok(Self { psi })
    }

    pub fn psi(&self) -> f64 {
        self.psi
    }

    /// φ = ψ / (1 + ψ²).
    pub fn phi(&self) -> f64 {
        self.psi / (1.0 + self.psi * self.psi)
    }

    /// σ²_φ = (1 − ψ²) / (1 + ψ²).
    pub fn sigma2_phi(&self) -> f64 {
        self.one_minus_psi2() / (1.0 + self.psi * self.psi)
    }

    /// 1 − ψ², computed as (1 − ψ)(1 + ψ) to keep precision near |ψ| = 1.
    pub fn one_minus_psi2(&self) -> f64 {
        (1.0 - self.psi) * (1.0 + self.psi)
    }
}

/// Covariance of the AR(1) block on a path with `k` nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArCovariance {
    k: usize,
    model: CorrelationModel,
}

impl ArCovariance {
    pub fn new(k: usize, model: CorrelationModel) -> Result<Self> {
        if k < 2 {
            return Err(Error::domain("AR covariance needs k ≥ 2"));
        }
        Ok(Self { k, model })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.model.psi.powi(i.abs_diff(j) as i32)
    }

    pub fn dense(&self) -> Vec<Vec<f64>> {
        (0..self.k)
            .map(|i| (0..self.k).map(|j| self.entry(i, j)).collect())
            .collect()
    }

    /// Entry of Γ⁻¹ from the closed form.
    pub fn inverse_entry(&self, i: usize, j: usize) -> f64 {
        let m = &self.model;
        match i.abs_diff(j) {
            0 if i == 0 || i == self.k - 1 => 1.0 / m.one_minus_psi2(),
            0 => 1.0 / m.sigma2_phi(),
            1 => -m.phi() / m.sigma2_phi(),
            _ => 0.0,
        }
    }

    /// Γ⁻¹ as a dense matrix (tridiagonal entries, zeros elsewhere).
    pub fn inverse_dense(&self) -> Vec<Vec<f64>> {
        (0..self.k)
            .map(|i| (0..self.k).map(|j| self.inverse_entry(i, j)).collect())
            .collect()
    }

    pub fn log_det(&self) -> f64 {
        (self.k - 1) as f64 * self.model.one_minus_psi2().ln()
    }

    /// xᵀ(I − Γ⁻¹)x in O(k):
    /// `[2ψ Σ x_i x_{i+1} − ψ²(x_1² + x_k²) − 2ψ² Σ_{1<i<k} x_i²] / (1 − ψ²)`.
    pub fn complement_quadratic_form(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.k);
        let psi = self.model.psi;
        let psi2 = psi * psi;
        let k = x.len();
        let cross: f64 = x.windows(2).map(|w| w[0] * w[1]).sum();
        let ends = x[0] * x[0] + x[k - 1] * x[k - 1];
        let interior: f64 = x[1..k - 1].iter().map(|v| v * v).sum();
        (2.0 * psi * cross - psi2 * ends - 2.0 * psi2 * interior) / self.model.one_minus_psi2()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Null,
    Alternative { path: Path, psi: f64 },
}

/// One realisation of the field `X`, indexed by node.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub values: Vec<f64>,
    pub provenance: Provenance,
    pub seed: u64,
}

/// n i.i.d. standard normals; node `v` always receives the same value for a given seed.
pub fn simulate_null(lattice: &TorusLattice, seed: u64) -> Sample {
    let n = lattice.node_count();
    let mut values = vec![0.0; n];
    let nodes: Vec<u32> = (0..n as u32).collect();
    rng::fill_node_normals(seed, &nodes, &mut values);
    Sample {
        values,
        provenance: Provenance::Null,
        seed,
    }
}

/// Null field with an AR(1) block planted along `path`.
///
/// The planted values reuse the null noise at the path nodes as innovations:
/// `X_{s_1} = Z_{s_1}` and `X_{s_{j+1}} = ψ X_{s_j} + √(1−ψ²) Z_{s_{j+1}}`, so off-path
/// coordinates coincide with [`simulate_null`] under the same seed and ψ = 0 reproduces it.
pub fn simulate_alternative(
    lattice: &TorusLattice,
    path: &Path,
    model: CorrelationModel,
    seed: u64,
) -> Result<Sample> {
    if !path.is_valid_on(lattice) {
        return Err(Error::domain(format!(
            "path {path} is not valid on the lattice"
        )));
    }
    let mut sample = simulate_null(lattice, seed);
    plant(&mut sample.values, path.nodes(), model);
    sample.provenance = Provenance::Alternative {
        path: path.clone(),
        psi: model.psi(),
    };
    Ok(sample)
}

/// Turn i.i.d. N(0,1) values along `nodes` into the AR(1) sequence in place.
pub fn plant(values: &mut [f64], nodes: &[NodeId], model: CorrelationModel) {
    let psi = model.psi();
    let innovation_scale = model.one_minus_psi2().sqrt();
    let mut prev = values[nodes[0].index()];
    for &v in &nodes[1..] {
        let x = psi * prev + innovation_scale * values[v.index()];
        values[v.index()] = x;
        prev = x;
    }
}

/// Values of `values` along a node sequence.
pub fn gather(values: &[f64], nodes: &[NodeId]) -> Vec<f64> {
    nodes.iter().map(|v| values[v.index()]).collect()
}

/// log L_S(x) = ½ x_Sᵀ(I − Γ_S⁻¹)x_S − ½ log det Γ_S.
pub fn log_likelihood_ratio(values: &[f64], path: &Path, model: CorrelationModel) -> f64 {
    let cov = ArCovariance {
        k: path.len(),
        model,
    };
    let x = gather(values, path.nodes());
    0.5 * cov.complement_quadratic_form(&x) - 0.5 * cov.log_det()
}

/// log Σ_S ν(S) L_S(x), stabilised by shifting with the running maximum.
///
/// Weights need not be normalised; they are used as given.
pub fn mixture_log_likelihood_ratio<'a>(
    values: &[f64],
    prior: impl IntoIterator<Item = (&'a Path, f64)>,
    model: CorrelationModel,
) -> f64 {
    let mut acc = LogSumExp::default();
    for (path, w) in prior {
        if w > 0.0 {
            acc.push(w.ln() + log_likelihood_ratio(values, path, model));
        }
    }
    acc.value()
}

/// Streaming log-sum-exp.
#[derive(Debug, Clone, Copy)]
pub struct LogSumExp {
    max: f64,
    sum: f64,
}

impl Default for LogSumExp {
    fn default() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }
}

impl LogSumExp {
    pub fn push(&mut self, x: f64) {
        if x <= self.max {
            self.sum += (x - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - x).exp() + 1.0;
            self.max = x;
        }
    }

    pub fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleSidecar {
    d: usize,
    m: usize,
    seed: u64,
    provenance: Provenance,
}

fn sidecar_path(bin: &FsPath) -> std::path::PathBuf {
    let mut p = bin.as_os_str().to_owned();
    p.push(".json");
    p.into()
}

/// Writes `values` as little-endian f64 to `bin` and `{d, m, seed, provenance}` to
/// `<bin>.json`.
pub fn write_sample(bin: &FsPath, lattice: &TorusLattice, sample: &Sample) -> Result<()> {
    let bytes: Vec<u8> = sample.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(bin, bytes).map_err(|e| Error::io(bin, e))?;
    let side = SampleSidecar {
        d: lattice.dim(),
        m: lattice.side(),
        seed: sample.seed,
        provenance: sample.provenance.clone(),
    };
    let json = sidecar_path(bin);
    let text = serde_json::to_string_pretty(&side).expect("sidecar serialises");
    fs::write(&json, text).map_err(|e| Error::io(&json, e))
}

pub fn read_sample(bin: &FsPath) -> Result<(TorusLattice, Sample)> {
    let json = sidecar_path(bin);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let side: SampleSidecar = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: json.clone(),
        source: e,
    })?;
    let lattice = TorusLattice::try_from(LatticeShape {
        d: side.d,
        m: side.m,
    })?;
    let bytes = fs::read(bin).map_err(|e| Error::io(bin, e))?;
    if bytes.len() != 8 * lattice.node_count() {
        return Err(Error::Parse(format!(
            "{}: expected {} f64 values, found {} bytes",
            bin.display(),
            lattice.node_count(),
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((
        lattice,
        Sample {
            values,
            provenance: side.provenance,
            seed: side.seed,
        },
    ))
}
