//! Lower bounds on the Bayes risk against a prior ν over paths.
//!
//! For independent S, T ~ ν the optimal risk is at least `1 − ½√(E[e^{λ(ψ)|S∩T|}] − 1)`.
//! The exponential moment is obtained either from the closed-form envelope Ξ of a fitted
//! EIT certificate, or directly by Monte Carlo over pairs drawn from the sampler.

use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Path;
use crate::model::{mixture_log_likelihood_ratio, CorrelationModel};
use crate::paths::{EitFit, IntersectionTable, PathClass, PriorSampler};
use crate::rng::{self, CounterRng, Domain};
use crate::stats::{MeanEstimate, Moments};

/// λ(ψ) is only defined for |ψ| below this.
pub const PSI_LIMIT: f64 = 1.0 / 9.0;

fn check_psi(psi: f64) -> Result<()> {
    if !(psi.abs() < PSI_LIMIT) {
        return Err(Error::domain(format!(
            "the lower bound needs |ψ| < 1/9, got ψ = {psi}"
        )));
    }
    Ok(())
}

/// λ(ψ) = ¼[√((1−|ψ|)/(1−9|ψ|)) − (1+|ψ|)/(1−|ψ|)].
pub fn lambda(psi: f64) -> Result<f64> {
    check_psi(psi)?;
    let p = psi.abs();
    Ok(0.25 * (((1.0 - p) / (1.0 - 9.0 * p)).sqrt() - (1.0 + p) / (1.0 - p)))
}

/// Ξ(a) = e^a + c0(e^a − 1)e^a η² / (1 − e^a η).
///
/// Level one counts with probability one (known start); levels ℓ ≥ 2 use the envelope
/// c0·η^ℓ, summed as a geometric series.
pub fn xi(a: f64, eta: f64, c0: f64) -> Result<f64> {
    if !(a >= 0.0) || !(eta > 0.0 && eta < 1.0) || !(c0 >= 0.0) {
        return Err(Error::domain(format!(
            "Ξ needs a ≥ 0, η ∈ (0, 1), c0 ≥ 0 (a = {a}, η = {eta}, c0 = {c0})"
        )));
    }
    let ea = a.exp();
    if ea * eta >= 1.0 {
        return Err(Error::domain(format!(
            "geometric series diverges: e^a·η = {} ≥ 1",
            ea * eta
        )));
    }
    Ok(ea + c0 * (ea - 1.0) * ea * eta * eta / (1.0 - ea * eta))
}

/// max(0, 1 − ½√(E − 1)).
pub fn risk_lower_bound(psi: f64, exp_moment: f64) -> Result<f64> {
    check_psi(psi)?;
    if !(exp_moment >= 1.0) {
        return Err(Error::domain(format!(
            "exponential moment must be ≥ 1, got {exp_moment}"
        )));
    }
    Ok((1.0 - 0.5 * (exp_moment - 1.0).sqrt()).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "route", rename_all = "snake_case")]
pub enum MomentRoute {
    ClosedFormXi { eta: f64, c0: f64 },
    MonteCarlo { trials: u64, ci_lo: f64, ci_hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "snake_case")]
pub enum Regime {
    KnownStart,
    UnknownStart { blocks: usize },
    Generic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundReport {
    pub psi: f64,
    pub lambda_val: f64,
    /// None when the envelope series diverges at this ψ.
    pub exp_moment: Option<f64>,
    pub moment: MomentRoute,
    pub risk_bound: f64,
    pub regime: Regime,
    pub vacuous: bool,
}

impl LowerBoundReport {
    fn vacuous(psi: f64, lambda_val: f64, eit: &EitFit, regime: Regime) -> Self {
        Self {
            psi,
            lambda_val,
            exp_moment: None,
            moment: MomentRoute::ClosedFormXi {
                eta: eit.eta,
                c0: eit.c0,
            },
            risk_bound: 0.0,
            regime,
            vacuous: true,
        }
    }
}

fn check_eit(eit: &EitFit) -> Result<()> {
    if !(eit.eta > 0.0 && eit.eta < 1.0) || !(eit.c0 >= 0.0) {
        return Err(Error::domain(format!(
            "invalid EIT certificate (η = {}, c0 = {})",
            eit.eta, eit.c0
        )));
    }
    Ok(())
}

/// Bound through Ξ(λ(ψ)) for a known-start prior certified by `eit`.
pub fn known_start_bound(psi: f64, eit: &EitFit) -> Result<LowerBoundReport> {
    check_eit(eit)?;
    let a = lambda(psi)?;
    if a.exp() * eit.eta >= 1.0 {
        return Ok(LowerBoundReport::vacuous(psi, a, eit, Regime::KnownStart));
    }
    let e = xi(a, eit.eta, eit.c0)?;
    Ok(LowerBoundReport {
        psi,
        lambda_val: a,
        exp_moment: Some(e),
        moment: MomentRoute::ClosedFormXi {
            eta: eit.eta,
            c0: eit.c0,
        },
        risk_bound: risk_lower_bound(psi, e)?,
        regime: Regime::KnownStart,
        vacuous: false,
    })
}

/// Bound for an even mixture over `blocks` disjoint copies of a prior certified by `eit`,
/// using E ≤ 1 + Ξ(λ(ψ))/|J|.
pub fn unknown_start_bound(psi: f64, eit: &EitFit, blocks: usize) -> Result<LowerBoundReport> {
    check_eit(eit)?;
    if blocks == 0 {
        return Err(Error::domain("the mixture needs at least one block"));
    }
    let a = lambda(psi)?;
    let regime = Regime::UnknownStart { blocks };
    if a.exp() * eit.eta >= 1.0 {
        return Ok(LowerBoundReport::vacuous(psi, a, eit, regime));
    }
    let e = 1.0 + xi(a, eit.eta, eit.c0)? / blocks as f64;
    Ok(LowerBoundReport {
        psi,
        lambda_val: a,
        exp_moment: Some(e),
        moment: MomentRoute::ClosedFormXi {
            eta: eit.eta,
            c0: eit.c0,
        },
        risk_bound: risk_lower_bound(psi, e)?,
        regime,
        vacuous: false,
    })
}

/// Largest ψ ∈ [0, 1/9) with e^{λ(ψ)}η < 1 and Ξ(λ(ψ)) ≤ `level` (2 gives risk ≥ 1/2).
pub fn critical_psi(eit: &EitFit, level: f64) -> Result<f64> {
    check_eit(eit)?;
    if !(level > 1.0) {
        return Err(Error::domain(format!("Ξ level must exceed 1, got {level}")));
    }
    let ok = |psi: f64| -> bool {
        let a = match lambda(psi) {
            Ok(a) => a,
            Err(_) => return false,
        };
        a.exp() * eit.eta < 1.0 && xi(a, eit.eta, eit.c0).is_ok_and(|x| x <= level)
    };
    let (mut lo, mut hi) = (0.0f64, PSI_LIMIT);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    Ok(lo)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpMomentEstimate {
    pub estimate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub trials: u64,
    /// The top decile of summands carries more than half the total.
    pub heavy_tail: bool,
}

impl ExpMomentEstimate {
    pub fn radius(&self) -> f64 {
        0.5 * (self.ci_hi - self.ci_lo)
    }
}

const BOOTSTRAP_REPLICATES: usize = 2000;

/// Monte Carlo of E[exp(a|S∩T|)] over i.i.d. pairs from `sampler`, with a 95% percentile
/// bootstrap interval.
pub fn empirical_exp_moment(
    sampler: &PriorSampler,
    a: f64,
    trials: u64,
) -> Result<ExpMomentEstimate> {
    if trials < 1000 {
        return Err(Error::domain(format!(
            "exponential moment estimation needs at least 1000 trials, got {trials}"
        )));
    }
    if !a.is_finite() {
        return Err(Error::domain("exponent must be finite"));
    }
    let table = IntersectionTable::sample(sampler, sampler, trials);
    Ok(exp_moment_from_table(&table, a, sampler.seed()))
}

pub(crate) fn exp_moment_from_table(
    table: &IntersectionTable,
    a: f64,
    seed: u64,
) -> ExpMomentEstimate {
    let weights: Vec<f64> = (0..table.counts.len())
        .map(|l| (a * l as f64).exp())
        .collect();
    let n = table.trials;
    let mean_of = |counts: &[u64]| -> f64 {
        counts
            .iter()
            .zip(&weights)
            .map(|(&c, &w)| c as f64 * w)
            .sum::<f64>()
            / n as f64
    };
    let estimate = mean_of(&table.counts);

    // resample the category counts: a multinomial draw is the bootstrap of the summands
    let mut reps: Vec<f64> = (0..BOOTSTRAP_REPLICATES)
        .into_par_iter()
        .map(|b| {
            let mut rng = CounterRng::new(seed, Domain::Bootstrap, b as u64);
            let mut left = n;
            let mut mass = 1.0;
            let mut counts = vec![0u64; table.counts.len()];
            for (l, &c) in table.counts.iter().enumerate() {
                if left == 0 {
                    break;
                }
                let p = (c as f64 / n as f64 / mass).clamp(0.0, 1.0);
                let draw = if p >= 1.0 {
                    left
                } else {
                    Binomial::new(left, p).unwrap().sample(&mut rng)
                };
                counts[l] = draw;
                left -= draw;
                mass -= c as f64 / n as f64;
            }
            mean_of(&counts)
        })
        .collect();
    reps.sort_by(f64::total_cmp);
    let at = |q: f64| reps[((q * reps.len() as f64) as usize).min(reps.len() - 1)];

    let top = n.div_ceil(10);
    let mut left = top;
    let mut top_mass = 0.0;
    for (l, &c) in table.counts.iter().enumerate().rev() {
        let take = c.min(left);
        top_mass += take as f64 * weights[l];
        left -= take;
        if left == 0 {
            break;
        }
    }
    ExpMomentEstimate {
        estimate,
        ci_lo: at(0.025).min(estimate),
        ci_hi: at(0.975).max(estimate),
        trials: n,
        heavy_tail: top_mass > 0.5 * estimate * n as f64,
    }
}

/// Risk lower bound with the exponential moment measured directly.
pub fn monte_carlo_bound(
    psi: f64,
    sampler: &PriorSampler,
    trials: u64,
) -> Result<LowerBoundReport> {
    let a = lambda(psi)?;
    let m = empirical_exp_moment(sampler, a, trials)?;
    let regime = match sampler.block_count() {
        1 => Regime::KnownStart,
        blocks => Regime::UnknownStart { blocks },
    };
    Ok(LowerBoundReport {
        psi,
        lambda_val: a,
        exp_moment: Some(m.estimate),
        moment: MomentRoute::MonteCarlo {
            trials,
            ci_lo: m.ci_lo,
            ci_hi: m.ci_hi,
        },
        risk_bound: risk_lower_bound(psi, m.estimate.max(1.0))?,
        regime,
        vacuous: false,
    })
}

/// Monte Carlo of the Bayes risk 1 − ½E₀|L_ν − 1| for the prior putting `weights` on the
/// enumerated paths of `class` (uniform when `None`).
///
/// Since E₀L_ν = 1, the risk also equals E₀[min(L_ν, 1)]; averaging that bounded summand
/// avoids the rare huge values of L_ν that dominate |L_ν − 1| under the null.
pub fn bayes_risk_estimate(
    class: &PathClass,
    weights: Option<&[f64]>,
    model: CorrelationModel,
    trials: u64,
    seed: u64,
) -> Result<MeanEstimate> {
    if trials < 2 {
        return Err(Error::domain(
            "Bayes risk estimation needs at least 2 trials",
        ));
    }
    let paths: Vec<Path> = class.paths()?.collect();
    let w: Vec<f64> = match weights {
        None => vec![1.0 / paths.len() as f64; paths.len()],
        Some(w) => {
            if w.len() != paths.len() {
                return Err(Error::domain(format!(
                    "{} prior weights for {} paths",
                    w.len(),
                    paths.len()
                )));
            }
            let total: f64 = w.iter().sum();
            if w.iter().any(|&x| !(x >= 0.0)) || !(total > 0.0) {
                return Err(Error::domain(
                    "prior weights must be non-negative with positive sum",
                ));
            }
            w.iter().map(|x| x / total).collect()
        }
    };
    let region = class.region();
    let n = class.lattice().node_count();
    let terms: Vec<f64> = (0..trials)
        .into_par_iter()
        .map_init(
            || vec![0.0; n],
            |buf, i| {
                rng::fill_node_normals(rng::derive_seed(seed, &[i]), &region, buf);
                let log_l =
                    mixture_log_likelihood_ratio(buf, paths.iter().zip(w.iter().copied()), model);
                log_l.exp().min(1.0)
            },
        )
        .collect();
    let mut m = Moments::default();
    for x in terms {
        m.push(x);
    }
    Ok(m.mean_estimate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{NodeId, TorusLattice};
    use crate::model::{log_likelihood_ratio, simulate_alternative, simulate_null};
    use crate::paths::{estimate_eit, Start};

    #[test]
    fn lambda_anchor_and_shape() {
        assert!((lambda(0.1).unwrap() - 4.0 / 9.0).abs() < 1e-15);
        assert_eq!(lambda(0.0).unwrap(), 0.0);
        assert_eq!(lambda(-0.07).unwrap(), lambda(0.07).unwrap());
        let grid: Vec<f64> = (0..100)
            .map(|i| lambda(i as f64 / 100.0 / 9.0).unwrap())
            .collect();
        assert!(grid.windows(2).all(|w| w[0] < w[1]));
        assert!(lambda(1.0 / 9.0).is_err());
        assert!(lambda(-0.2).is_err());
    }

    #[test]
    fn lambda_at_005() {
        // same arithmetic in f32, as an independent evaluation
        let p = 0.05f32;
        let lo = 0.25 * (((1.0 - p) / (1.0 - 9.0 * p)).sqrt() - (1.0 + p) / (1.0 - p));
        let v = lambda(0.05).unwrap();
        assert!((v - lo as f64).abs() < 1e-6);
        assert!((v - 0.052_248_580_862_7).abs() < 1e-12, "{v}");
    }

    fn series(a: f64, eta: f64, c0: f64) -> f64 {
        let mut s = a.exp();
        for l in 2..400 {
            s += (a.exp() - 1.0) * c0 * (a * (l - 1) as f64 + l as f64 * eta.ln()).exp();
        }
        s
    }

    #[test]
    fn xi_examples() {
        assert!((xi(1e-12, 0.3, 4.0).unwrap() - 1.0).abs() < 1e-10);
        assert_eq!(xi(0.7, 0.3, 0.0).unwrap(), 0.7f64.exp());
        for &(eta, c0) in &[(0.3f64, 2.0), (0.05, 20.0), (0.45, 1.0)] {
            let a = (1.0 / (2.0 * eta)).ln();
            let x = xi(a, eta, c0).unwrap();
            assert!((x - series(a, eta, c0)).abs() < 1e-9 * x);
        }
        assert!(xi(2.0, 0.5, 1.0).is_err());
        assert!(xi(0.1, 1.0, 1.0).is_err());
    }

    #[test]
    fn risk_bound_examples() {
        assert_eq!(risk_lower_bound(0.05, 1.0).unwrap(), 1.0);
        assert_eq!(risk_lower_bound(0.05, 2.0).unwrap(), 0.5);
        assert_eq!(risk_lower_bound(0.05, 5.0).unwrap(), 0.0);
        assert!(risk_lower_bound(0.05, 0.5).is_err());
        assert!(risk_lower_bound(0.2, 1.5).is_err());
        let xs: Vec<f64> = (0..50)
            .map(|i| risk_lower_bound(0.0, 1.0 + i as f64 * 0.1).unwrap())
            .collect();
        assert!(xs.windows(2).all(|w| w[0] >= w[1]));
    }

    fn fit(eta: f64, c0: f64) -> EitFit {
        EitFit {
            eta,
            c0,
            tail: vec![],
            trials: 0,
        }
    }

    #[test]
    fn known_start_reports() {
        let r = known_start_bound(0.0, &fit(0.4, 2.5)).unwrap();
        assert_eq!(r.risk_bound, 1.0);
        assert!(!r.vacuous);
        // η ≥ e^{−λ}: vacuous
        let a = lambda(0.1).unwrap();
        let r = known_start_bound(0.1, &fit((-a).exp() + 1e-3, 2.0)).unwrap();
        assert!(r.vacuous && r.exp_moment.is_none() && r.risk_bound == 0.0);
    }

    #[test]
    fn unknown_start_reports() {
        // choose c0 so Ξ(λ) = 2 exactly at ψ = 0.05
        let a = lambda(0.05).unwrap();
        let eta = 0.2;
        let ea = a.exp();
        let c0 = (2.0 - ea) * (1.0 - ea * eta) / ((ea - 1.0) * ea * eta * eta);
        let r = unknown_start_bound(0.05, &fit(eta, c0), 8).unwrap();
        assert!((r.risk_bound - 0.75).abs() < 1e-12);
        let far = unknown_start_bound(0.05, &fit(eta, c0), 1_000_000).unwrap();
        assert!(far.risk_bound > 0.999);
        assert!(r.risk_bound >= 1.0 - 0.5 * (2.0f64 / 8.0).sqrt() - 1e-12);
    }

    #[test]
    fn critical_psi_solves_level() {
        let f = fit(0.35, 3.0);
        let psi = critical_psi(&f, 2.0).unwrap();
        assert!(psi > 0.0 && psi < PSI_LIMIT);
        let x = xi(lambda(psi).unwrap(), f.eta, f.c0).unwrap();
        assert!((x - 2.0).abs() < 1e-6, "Ξ = {x}");
        for i in 0..20 {
            let p = psi * i as f64 / 20.0;
            assert!(known_start_bound(p, &f).unwrap().risk_bound >= 0.5);
        }
    }

    #[test]
    fn exp_moment_examples() {
        let l = TorusLattice::new(3, 8).unwrap();
        let s = PriorSampler::oriented_uniform(l.clone(), NodeId(0), 5, 3).unwrap();
        let m = empirical_exp_moment(&s, 0.0, 2000).unwrap();
        assert_eq!(m.estimate, 1.0);
        let a = 0.4;
        let m = empirical_exp_moment(&s, a, 20_000).unwrap();
        assert!(m.ci_lo <= m.estimate && m.estimate <= m.ci_hi);
        assert!(m.estimate >= a.exp());
        let f = estimate_eit(&s, 20_000).unwrap();
        assert!(m.estimate <= xi(a, f.eta, f.c0).unwrap() + m.radius());
        assert!(empirical_exp_moment(&s, a, 10).is_err());
    }

    #[test]
    fn heavy_tail_flag() {
        let table = IntersectionTable {
            counts: vec![950, 0, 0, 0, 0, 50],
            trials: 1000,
        };
        assert!(exp_moment_from_table(&table, 3.0, 0).heavy_tail);
        assert!(!exp_moment_from_table(&table, 0.0, 0).heavy_tail);
    }

    #[test]
    fn bayes_risk_examples() {
        let c = PathClass::new(
            TorusLattice::new(3, 6).unwrap(),
            3,
            Start::Known(NodeId(0)),
            true,
        )
        .unwrap();
        let zero =
            bayes_risk_estimate(&c, None, CorrelationModel::new(0.0).unwrap(), 100, 1).unwrap();
        assert!((zero.estimate - 1.0).abs() < 1e-12);

        let line = PathClass::new(
            TorusLattice::new(1, 20).unwrap(),
            16,
            Start::Known(NodeId(0)),
            true,
        )
        .unwrap();
        let strong =
            bayes_risk_estimate(&line, None, CorrelationModel::new(0.9).unwrap(), 4000, 2).unwrap();
        assert!(strong.estimate < 0.2, "{strong:?}");
        // the likelihood-ratio test attains the Bayes risk
        let m = CorrelationModel::new(0.9).unwrap();
        let path = line.paths().unwrap().next().unwrap();
        let trials = 4000u64;
        let mut errors = 0u64;
        for i in 0..trials {
            let null = simulate_null(line.lattice(), 10_000 + i);
            let alt = simulate_alternative(line.lattice(), &path, m, 20_000 + i).unwrap();
            errors += (log_likelihood_ratio(&null.values, &path, m) > 0.0) as u64;
            errors += (log_likelihood_ratio(&alt.values, &path, m) <= 0.0) as u64;
        }
        let lr_risk = errors as f64 / trials as f64;
        assert!(
            (lr_risk - strong.estimate).abs() < 0.03,
            "{lr_risk} vs {strong:?}"
        );
        assert!(
            bayes_risk_estimate(&c, Some(&[1.0]), CorrelationModel::new(0.1).unwrap(), 10, 1)
                .is_err()
        );
    }
}
