//! Monte Carlo summaries: binomial proportions with Wilson intervals, and sample means.

use serde::{Deserialize, Serialize};

/// Two-sided 95% normal quantile Φ⁻¹(0.975).
pub const Z95: f64 = 1.959_963_984_540_054;

/// A Monte Carlo frequency with its 95% Wilson score interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub successes: u64,
    pub trials: u64,
    pub estimate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl Proportion {
    pub fn new(successes: u64, trials: u64) -> Self {
        assert!(trials > 0 && successes <= trials);
        let (ci_lo, ci_hi) = wilson(successes, trials, Z95);
        Self {
            successes,
            trials,
            estimate: successes as f64 / trials as f64,
            ci_lo,
            ci_hi,
        }
    }

    /// Half-width of the Wilson interval.
    pub fn radius(&self) -> f64 {
        0.5 * (self.ci_hi - self.ci_lo)
    }
}

/// Wilson score interval for `successes / trials` at normal quantile `z`.
pub fn wilson(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let lo = if successes == 0 {
        0.0
    } else {
        (centre - half).max(0.0)
    };
    let hi = if successes == trials {
        1.0
    } else {
        (centre + half).min(1.0)
    };
    (lo, hi)
}

/// Sample mean with standard error and a normal-approximation 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub trials: u64,
}

impl MeanEstimate {
    pub fn radius(&self) -> f64 {
        0.5 * (self.ci_hi - self.ci_lo)
    }
}

/// Running first and second moments.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    pub n: u64,
    pub sum: f64,
    pub sum_sq: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    pub fn merge(mut self, other: Moments) -> Moments {
        self.n += other.n;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
        self
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.n as f64
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        let n = self.n as f64;
        ((self.sum_sq - self.sum * self.sum / n) / (n - 1.0)).max(0.0)
    }

    pub fn mean_estimate(&self) -> MeanEstimate {
        let mean = self.mean();
        let se = (self.variance() / self.n as f64).sqrt();
        MeanEstimate {
            estimate: mean,
            std_error: se,
            ci_lo: mean - Z95 * se,
            ci_hi: mean + Z95 * se,
            trials: self.n,
        }
    }
}
