//! Synthetic market generation.
//!
//! Values are i.i.d. across buyers and items from a bounded distribution.
//! Budgets are either given explicitly or derived from a paced-fraction rule:
//! the first `floor(alpha n)` buyers get an effectively infinite budget
//! (`vbar * t`), the rest start from a random draw and are halved until a
//! trial solve paces them strictly below one.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::MarketInstance;
use crate::rng::{self, StreamRng};
use crate::solver::{solve_fppe, SolverConfig};

/// Value distribution for generated markets. All variants are bounded so the
/// max value stays finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueDist {
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// Exponential with the given rate, truncated at `cap`; a missing cap
    /// defaults to the 0.999 quantile.
    Exponential {
        rate: f64,
        cap: Option<f64>,
    },
    TruncatedNormal {
        mean: f64,
        sd: f64,
        lo: f64,
        hi: f64,
    },
}

impl ValueDist {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            ValueDist::Uniform { lo, hi } => {
                lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi
            }
            ValueDist::Exponential { rate, cap } => {
                rate > 0.0 && cap.map_or(true, |c| c.is_finite() && c > 0.0)
            }
            ValueDist::TruncatedNormal { sd, lo, hi, .. } => {
                sd > 0.0 && lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo < hi
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("bad value distribution {self:?}")))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ValueDist::Uniform { lo, hi } => {
                if hi > lo {
                    lo + (hi - lo) * rng.random::<f64>()
                } else {
                    lo
                }
            }
            ValueDist::Exponential { rate, cap } => {
                // inverse CDF restricted to [0, cap]
                let cap = cap.unwrap_or_else(|| -(0.001f64).ln() / rate);
                let fcap = 1.0 - (-rate * cap).exp();
                let u = rng.random::<f64>() * fcap;
                -(1.0 - u).ln() / rate
            }
            ValueDist::TruncatedNormal { mean, sd, lo, hi } => {
                let d = Normal::new(mean, sd).expect("validated");
                for _ in 0..10_000 {
                    let x = d.sample(rng);
                    if x >= lo && x <= hi {
                        return x;
                    }
                }
                // pathological truncation window; fall back to the midpoint
                0.5 * (lo + hi)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetRule {
    Explicit {
        budgets: Vec<f64>,
    },
    /// Fraction of buyers (the leading ones) forced unpaced.
    PacedFraction {
        alpha: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub n: usize,
    pub t: usize,
    pub value_dist: ValueDist,
    pub budget_rule: BudgetRule,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.t == 0 {
            return Err(Error::Invalid("n and t must be positive".into()));
        }
        self.value_dist.validate()?;
        match &self.budget_rule {
            BudgetRule::Explicit { budgets } => {
                if budgets.len() != self.n {
                    return Err(Error::DimensionMismatch(format!(
                        "{} budgets for {} buyers",
                        budgets.len(),
                        self.n
                    )));
                }
                if budgets.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
                    return Err(Error::Invalid("budgets must be positive".into()));
                }
            }
            BudgetRule::PacedFraction { alpha } => {
                if !(0.0..=1.0).contains(alpha) {
                    return Err(Error::Invalid("paced fraction must lie in [0,1]".into()));
                }
            }
        }
        Ok(())
    }
}

/// Value matrix draw (`n x t`) on the given stream.
pub fn draw_values(dist: &ValueDist, n: usize, t: usize, rng: &mut StreamRng) -> DMatrix<f64> {
    DMatrix::from_fn(n, t, |_, _| dist.sample(rng))
}

const TRIAL_SOLVE_TOL: f64 = 1e-7;
const PACING_MARGIN: f64 = 1e-3;
const MAX_HALVINGS: usize = 60;

/// Generate a market instance. Deterministic in the spec.
pub fn generate_market(spec: &GeneratorSpec) -> Result<MarketInstance> {
    spec.validate()?;
    let mut value_rng = rng::stream(spec.seed, 0);
    let values = draw_values(&spec.value_dist, spec.n, spec.t, &mut value_rng);

    let budgets = match &spec.budget_rule {
        BudgetRule::Explicit { budgets } => DVector::from_vec(budgets.clone()),
        BudgetRule::PacedFraction { alpha } => calibrate_paced_budgets(spec, &values, *alpha)?,
    };
    MarketInstance::new(budgets, values)
}

/// Same spec, same budgets, fresh value columns on stream `stream_id`.
/// Used by experiment drivers that need independent draws of one market.
pub fn redraw_instance(
    spec: &GeneratorSpec,
    budgets: &DVector<f64>,
    t: usize,
    stream_id: u64,
) -> Result<MarketInstance> {
    let mut value_rng = rng::stream(spec.seed, stream_id);
    let values = draw_values(&spec.value_dist, spec.n, t, &mut value_rng);
    MarketInstance::new(budgets.clone(), values)
}

fn calibrate_paced_budgets(
    spec: &GeneratorSpec,
    values: &DMatrix<f64>,
    alpha: f64,
) -> Result<DVector<f64>> {
    let n = spec.n;
    let unpaced = ((alpha * n as f64).floor() as usize).min(n);
    let vbar = values.iter().cloned().fold(0.0f64, f64::max);
    if vbar <= 0.0 {
        return Err(Error::GenerationFailed(
            "all sampled values are zero".into(),
        ));
    }

    let mut budget_rng = rng::stream(spec.seed, 1);
    let mut budgets = DVector::<f64>::zeros(n);
    for i in 0..unpaced {
        budgets[i] = vbar * spec.t as f64;
    }
    for i in unpaced..n {
        let mean_i: f64 = (0..spec.t).map(|tau| values[(i, tau)]).sum::<f64>() / spec.t as f64;
        budgets[i] = (0.2 + 0.6 * budget_rng.random::<f64>()) * mean_i.max(1e-12);
    }
    if unpaced == n {
        return Ok(budgets);
    }

    let cfg = SolverConfig {
        tol: TRIAL_SOLVE_TOL,
        ..SolverConfig::default()
    };
    for _ in 0..MAX_HALVINGS {
        let trial = MarketInstance::new(budgets.clone(), values.clone())?;
        let eq = solve_fppe(&trial, &cfg)?;
        let offenders: Vec<usize> = (unpaced..n)
            .filter(|&i| eq.beta[i] >= 1.0 - PACING_MARGIN)
            .collect();
        if offenders.is_empty() {
            return Ok(budgets);
        }
        for i in offenders {
            budgets[i] *= 0.5;
        }
    }
    Err(Error::GenerationFailed(format!(
        "budget halving failed to pace buyers after {MAX_HALVINGS} rounds"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::solve_fppe;

    fn uniform_spec(n: usize, t: usize, seed: u64, alpha: f64) -> GeneratorSpec {
        GeneratorSpec {
            n,
            t,
            value_dist: ValueDist::Uniform { lo: 0.0, hi: 1.0 },
            budget_rule: BudgetRule::PacedFraction { alpha },
            seed,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = uniform_spec(4, 200, 7, 0.25);
        let a = generate_market(&spec).unwrap();
        let b = generate_market(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_buyer_shapes() {
        let spec = GeneratorSpec {
            n: 1,
            t: 50,
            value_dist: ValueDist::Exponential {
                rate: 1.0,
                cap: None,
            },
            budget_rule: BudgetRule::Explicit { budgets: vec![0.4] },
            seed: 3,
        };
        let m = generate_market(&spec).unwrap();
        assert_eq!((m.n(), m.t()), (1, 50));
        assert_eq!(m.budgets().len(), 1);
    }

    #[test]
    fn paced_fraction_rule_pins_leading_buyers() {
        let spec = uniform_spec(8, 1000, 11, 3.0 / 8.0);
        let m = generate_market(&spec).unwrap();
        let eq = solve_fppe(&m, &SolverConfig::default()).unwrap();
        for i in 0..3 {
            assert_eq!(eq.beta[i], 1.0, "buyer {i} should be unpaced");
            assert!(eq.delta[i] > 0.0, "buyer {i} should have leftover budget");
        }
        for i in 3..8 {
            assert!(
                eq.beta[i] < 1.0 - 1e-3,
                "buyer {i} should be paced, beta = {}",
                eq.beta[i]
            );
        }
    }

    #[test]
    fn value_distributions_are_bounded() {
        let mut r = rng::stream(9, 0);
        let dists = [
            ValueDist::Uniform { lo: 0.2, hi: 0.9 },
            ValueDist::Exponential {
                rate: 2.0,
                cap: None,
            },
            ValueDist::TruncatedNormal {
                mean: 0.5,
                sd: 0.25,
                lo: 0.0,
                hi: 1.0,
            },
        ];
        for d in dists {
            d.validate().unwrap();
            for _ in 0..2000 {
                let x = d.sample(&mut r);
                assert!(x.is_finite() && x >= 0.0);
                match d {
                    ValueDist::Uniform { lo, hi } => assert!(x >= lo && x <= hi),
                    ValueDist::Exponential { rate, .. } => {
                        assert!(x <= -(0.001f64).ln() / rate + 1e-12)
                    }
                    ValueDist::TruncatedNormal { lo, hi, .. } => assert!(x >= lo && x <= hi),
                }
            }
        }
    }

    #[test]
    fn point_mass_uniform_is_allowed() {
        let d = ValueDist::Uniform { lo: 0.5, hi: 0.5 };
        let mut r = rng::stream(10, 0);
        assert_eq!(d.sample(&mut r), 0.5);
    }

    #[test]
    fn redraw_keeps_budgets() {
        let spec = uniform_spec(3, 100, 12, 0.0);
        let m = generate_market(&spec).unwrap();
        let m2 = redraw_instance(&spec, m.budgets(), 150, 77).unwrap();
        assert_eq!(m2.budgets(), m.budgets());
        assert_eq!(m2.t(), 150);
        assert_ne!(m2.values().column(0), m.values().column(0));
    }

    #[test]
    fn spec_validation() {
        let mut spec = uniform_spec(3, 100, 1, 0.5);
        spec.n = 0;
        assert!(spec.validate().is_err());
        let spec = GeneratorSpec {
            n: 2,
            t: 10,
            value_dist: ValueDist::Uniform { lo: 0.0, hi: 1.0 },
            budget_rule: BudgetRule::Explicit { budgets: vec![1.0] },
            seed: 0,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn spec_json_roundtrip() {
        let spec = uniform_spec(5, 300, 99, 0.2);
        let s = serde_json::to_string(&spec).unwrap();
        let back: GeneratorSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(spec, back);
    }
}
