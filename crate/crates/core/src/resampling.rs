//! Exchangeable bootstrap weight schemes.
//!
//! All schemes draw a non-negative weight vector `W` of length `t` with
//! `sum W = t` exactly, and expose their variance constant
//! `c^2 = plim (1/t) sum (W_tau - 1)^2`.

use rand::Rng;
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::market::{eval_weighted_objective_unchecked, MarketInstance};

/// Base distribution for normalized i.i.d. weights. The distribution must
/// have a finite 2+eps moment and positive mean; that is the caller's
/// responsibility for anything beyond these built-ins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IidDist {
    Exponential { rate: f64 },
    Poisson { lambda: f64 },
}

impl IidDist {
    fn mean(&self) -> f64 {
        match *self {
            IidDist::Exponential { rate } => 1.0 / rate,
            IidDist::Poisson { lambda } => lambda,
        }
    }

    fn variance(&self) -> f64 {
        match *self {
            IidDist::Exponential { rate } => 1.0 / (rate * rate),
            IidDist::Poisson { lambda } => lambda,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    /// Sampling with replacement: multinomial counts with equal cells.
    Multinomial,
    /// Leave out `floor(alpha t)` positions, upweight the rest to `t/(t-h)`.
    WithoutReplacement { alpha: f64 },
    /// I.i.d. draws rescaled by their sample mean.
    IidNormalized { dist: IidDist },
}

impl WeightScheme {
    pub fn validate(&self) -> Result<()> {
        match *self {
            WeightScheme::Multinomial => Ok(()),
            WeightScheme::WithoutReplacement { alpha } => {
                if alpha > 0.0 && alpha < 1.0 {
                    Ok(())
                } else {
                    Err(Error::Invalid(
                        "without_replacement alpha must lie in (0,1)".into(),
                    ))
                }
            }
            WeightScheme::IidNormalized { dist } => match dist {
                IidDist::Exponential { rate } if rate > 0.0 => Ok(()),
                IidDist::Poisson { lambda } if lambda > 0.0 => Ok(()),
                _ => Err(Error::Invalid(
                    "iid weight distribution parameter must be positive".into(),
                )),
            },
        }
    }
}

/// Variance constant `c^2` of a scheme.
pub fn scheme_c_squared(scheme: &WeightScheme) -> f64 {
    match *scheme {
        WeightScheme::Multinomial => 1.0,
        WeightScheme::WithoutReplacement { alpha } => alpha / (1.0 - alpha),
        WeightScheme::IidNormalized { dist } => {
            let m = dist.mean();
            dist.variance() / (m * m)
        }
    }
}

/// Draw one weight vector. Non-negative, sums to `t` exactly (up to the
/// rescaling arithmetic for i.i.d. weights).
pub fn draw_weights<R: Rng + ?Sized>(
    scheme: &WeightScheme,
    t: usize,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if t == 0 {
        return Err(Error::Invalid("t must be at least 1".into()));
    }
    scheme.validate()?;
    match *scheme {
        WeightScheme::Multinomial => {
            let mut counts = vec![0.0f64; t];
            for _ in 0..t {
                counts[rng.random_range(0..t)] += 1.0;
            }
            Ok(DVector::from_vec(counts))
        }
        WeightScheme::WithoutReplacement { alpha } => {
            let h = ((alpha * t as f64).floor() as usize).min(t - 1);
            let kept = t - h;
            let w = t as f64 / kept as f64;
            // choose `kept` positions by partial Fisher-Yates
            let mut idx: Vec<usize> = (0..t).collect();
            let mut weights = vec![0.0f64; t];
            for k in 0..kept {
                let j = rng.random_range(k..t);
                idx.swap(k, j);
                weights[idx[k]] = w;
            }
            Ok(DVector::from_vec(weights))
        }
        WeightScheme::IidNormalized { dist } => {
            for attempt in 1..=10 {
                let raw: Vec<f64> = match dist {
                    IidDist::Exponential { rate } => {
                        let d = Exp::new(rate).map_err(|e| Error::Invalid(e.to_string()))?;
                        (0..t).map(|_| d.sample(rng)).collect()
                    }
                    IidDist::Poisson { lambda } => {
                        let d = Poisson::new(lambda).map_err(|e| Error::Invalid(e.to_string()))?;
                        (0..t).map(|_| d.sample(rng)).collect()
                    }
                };
                let mean: f64 = raw.iter().sum::<f64>() / t as f64;
                if mean > 0.0 {
                    return Ok(DVector::from_vec(raw.iter().map(|w| w / mean).collect()));
                }
                if attempt == 10 {
                    return Err(Error::DegenerateWeights { attempts: attempt });
                }
            }
            unreachable!()
        }
    }
}

/// `(1/t) sum_tau W_tau F(theta^tau, beta)`.
pub fn weighted_objective(
    market: &MarketInstance,
    weights: &DVector<f64>,
    beta: &DVector<f64>,
) -> Result<f64> {
    if weights.len() != market.t() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} items",
            weights.len(),
            market.t()
        )));
    }
    if beta.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
        return Err(Error::NonPositiveBeta);
    }
    Ok(eval_weighted_objective_unchecked(
        market,
        Some(weights),
        beta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::eval_empirical_objective;
    use crate::rng;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::Rng;

    #[test]
    fn multinomial_support() {
        let mut r = rng::stream(41, 0);
        let w = draw_weights(&WeightScheme::Multinomial, 4, &mut r).unwrap();
        let sum: f64 = w.iter().sum();
        assert_eq!(sum, 4.0);
        assert!(w.iter().all(|x| *x >= 0.0 && x.fract() == 0.0));
    }

    #[test]
    fn without_replacement_pattern() {
        let mut r = rng::stream(42, 0);
        let w = draw_weights(&WeightScheme::WithoutReplacement { alpha: 0.5 }, 10, &mut r).unwrap();
        let twos = w.iter().filter(|x| **x == 2.0).count();
        let zeros = w.iter().filter(|x| **x == 0.0).count();
        assert_eq!((twos, zeros), (5, 5));
    }

    #[test]
    fn iid_normalization_identity() {
        let mut r = rng::stream(43, 0);
        let scheme = WeightScheme::IidNormalized {
            dist: IidDist::Exponential { rate: 1.0 },
        };
        let w = draw_weights(&scheme, 1000, &mut r).unwrap();
        let sum: f64 = w.iter().sum();
        assert!((sum - 1000.0).abs() < 1e-9);
        assert!(w.iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn c_squared_values() {
        assert_eq!(scheme_c_squared(&WeightScheme::Multinomial), 1.0);
        assert_relative_eq!(
            scheme_c_squared(&WeightScheme::WithoutReplacement { alpha: 0.5 }),
            1.0
        );
        assert_relative_eq!(
            scheme_c_squared(&WeightScheme::IidNormalized {
                dist: IidDist::Exponential { rate: 1.0 }
            }),
            1.0
        );
        assert_relative_eq!(
            scheme_c_squared(&WeightScheme::IidNormalized {
                dist: IidDist::Poisson { lambda: 1.0 }
            }),
            1.0
        );
    }

    #[test]
    fn empirical_variance_matches_c_squared() {
        let t = 10_000;
        let schemes = [
            WeightScheme::Multinomial,
            WeightScheme::WithoutReplacement { alpha: 0.5 },
            WeightScheme::IidNormalized {
                dist: IidDist::Exponential { rate: 1.0 },
            },
        ];
        for (k, scheme) in schemes.iter().enumerate() {
            let mut acc = 0.0;
            let reps = 20;
            for rep in 0..reps {
                let mut r = rng::stream(44, (k * 100 + rep) as u64);
                let w = draw_weights(scheme, t, &mut r).unwrap();
                acc += w.iter().map(|x| (x - 1.0) * (x - 1.0)).sum::<f64>() / t as f64;
            }
            let emp = acc / reps as f64;
            let c2 = scheme_c_squared(scheme);
            assert!(
                (emp - c2).abs() < 0.05 * c2,
                "scheme {scheme:?}: {emp} vs {c2}"
            );
        }
    }

    #[test]
    fn exchangeability_moment_check() {
        // mean weight at a fixed position should not depend on the position
        let t = 40;
        let reps = 4000;
        let mut sums = vec![0.0f64; t];
        for rep in 0..reps {
            let mut r = rng::stream(45, rep as u64);
            let w =
                draw_weights(&WeightScheme::WithoutReplacement { alpha: 0.3 }, t, &mut r).unwrap();
            for i in 0..t {
                sums[i] += w[i];
            }
        }
        for i in 0..t {
            let m = sums[i] / reps as f64;
            assert!((m - 1.0).abs() < 0.05, "position {i} biased: {m}");
        }
    }

    #[test]
    fn weighted_objective_identities() {
        let mut r = rng::stream(46, 0);
        let values = DMatrix::from_fn(2, 6, |_, _| r.random::<f64>());
        let m = MarketInstance::new(DVector::from_vec(vec![0.5, 0.7]), values).unwrap();
        let beta = DVector::from_vec(vec![0.6, 0.9]);

        let ones = DVector::from_element(6, 1.0);
        assert_relative_eq!(
            weighted_objective(&m, &ones, &beta).unwrap(),
            eval_empirical_objective(&m, &beta).unwrap(),
            epsilon = 1e-14
        );

        // two items, weights (2, 0): objective is F(theta_1, beta)
        let m2 = MarketInstance::new(
            DVector::from_vec(vec![0.5, 0.7]),
            DMatrix::from_fn(2, 2, |i, j| m.values()[(i, j)]),
        )
        .unwrap();
        let w = DVector::from_vec(vec![2.0, 0.0]);
        let f1 = crate::market::eval_item_objective(&m2.item(0).into_owned(), &beta, m2.budgets())
            .unwrap();
        assert_relative_eq!(
            weighted_objective(&m2, &w, &beta).unwrap(),
            f1,
            epsilon = 1e-14
        );

        // linearity in the weights
        let w1 = DVector::from_vec(vec![1.5, 0.5]);
        let w2 = DVector::from_vec(vec![0.5, 1.5]);
        let avg = (&w1 + &w2) * 0.5;
        let lhs = weighted_objective(&m2, &avg, &beta).unwrap();
        let rhs = 0.5 * weighted_objective(&m2, &w1, &beta).unwrap()
            + 0.5 * weighted_objective(&m2, &w2, &beta).unwrap();
        assert_relative_eq!(lhs, rhs, epsilon = 1e-13);
    }

    #[test]
    fn scheme_validation() {
        assert!(WeightScheme::WithoutReplacement { alpha: 0.0 }
            .validate()
            .is_err());
        assert!(WeightScheme::WithoutReplacement { alpha: 1.0 }
            .validate()
            .is_err());
        assert!(WeightScheme::IidNormalized {
            dist: IidDist::Exponential { rate: 0.0 }
        }
        .validate()
        .is_err());
    }
}
