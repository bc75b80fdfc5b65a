//! Bootstrap estimators for the distribution of pacing multipliers.
//!
//! Every estimator produces a `BootstrapRun`: a `B x n` matrix of scaled
//! replicate deviations targeting the limit distribution, plus the
//! configuration needed to reproduce it. Replicates are embarrassingly
//! parallel; replicate `k` always draws from stream `k` of the run's seed,
//! so results do not depend on scheduling.

pub mod fppe;
pub mod lfm;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::market::{subgradient_matrix, MarketInstance};
use crate::resampling::WeightScheme;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapMethod {
    Exchangeable,
    Numerical,
    Proximal,
    ConstrainedProximal,
}

/// How raw replicate differences `beta^b - beta_gamma` were scaled into the
/// stored samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingConvention {
    /// `sqrt(t) / c` with `c` the weight scheme's variance constant.
    SqrtTOverC,
    /// `1 / eps` for perturbation-based estimators.
    InverseEps,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub method: BootstrapMethod,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scheme: Option<WeightScheme>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_t: Option<f64>,
    pub replicates: usize,
    pub seed: u64,
}

/// A completed bootstrap run.
#[derive(Debug, Clone)]
pub struct BootstrapRun {
    pub config: BootstrapConfig,
    /// `B x n`: row `k` is the scaled deviation of replicate `k`.
    pub samples: DMatrix<f64>,
    /// Multiplier applied to `beta^b - beta_gamma`.
    pub scaling: f64,
    pub convention: ScalingConvention,
    /// Replicates whose perturbed item weights went negative.
    pub negative_mass: Vec<usize>,
    /// Set when the estimator's intended regime looked violated (estimated
    /// unpaced buyers present where the theory assumes none).
    pub regime_warning: bool,
}

impl BootstrapRun {
    /// Raw replicate multipliers `beta^b` for each row.
    pub fn raw_betas(&self, beta_gamma: &DVector<f64>) -> DMatrix<f64> {
        let mut out = self.samples.clone() / self.scaling;
        for k in 0..out.nrows() {
            for i in 0..out.ncols() {
                out[(k, i)] += beta_gamma[i];
            }
        }
        out
    }

    pub fn to_json_string(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            config: &'a BootstrapConfig,
            scaling: f64,
            convention: ScalingConvention,
            samples: Vec<Vec<f64>>,
            negative_mass: &'a [usize],
            regime_warning: bool,
        }
        serde_json::to_string_pretty(&Doc {
            config: &self.config,
            scaling: self.scaling,
            convention: self.convention,
            samples: linalg::to_rows(&self.samples),
            negative_mass: &self.negative_mass,
            regime_warning: self.regime_warning,
        })
        .expect("bootstrap run serialization cannot fail")
    }

    /// Column of scaled deviations for one buyer.
    pub fn coordinate_samples(&self, i: usize) -> Vec<f64> {
        self.samples.column(i).iter().cloned().collect()
    }
}

/// Bootstrap score `G^b = sqrt(t) (P^b_t - P_t) D_F(., beta)`, i.e.
/// `sqrt(t) * (1/t) * sum_tau (W_tau - 1) D_F(theta^tau, beta)`.
pub fn compute_score_bootstrap(
    market: &MarketInstance,
    beta: &DVector<f64>,
    weights: &DVector<f64>,
) -> Result<DVector<f64>> {
    if weights.len() != market.t() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} items",
            weights.len(),
            market.t()
        )));
    }
    let d = subgradient_matrix(market, beta)?;
    Ok(score_from_subgradients(&d, weights))
}

/// Same as [`compute_score_bootstrap`] with the subgradient matrix already
/// in hand (shared across replicates).
pub(crate) fn score_from_subgradients(
    subgradients: &DMatrix<f64>,
    weights: &DVector<f64>,
) -> DVector<f64> {
    let t = subgradients.ncols() as f64;
    let centered = weights.map(|w| w - 1.0);
    (subgradients * centered) * (t.sqrt() / t)
}

/// Run `B` replicates in parallel, each on its own rng stream, propagating
/// the first failure with its replicate index. `flagged` collects replicate
/// indices marked by the worker.
pub(crate) fn run_replicates<F>(
    n: usize,
    replicates: usize,
    worker: F,
) -> Result<(DMatrix<f64>, Vec<usize>)>
where
    F: Fn(usize) -> Result<(DVector<f64>, bool)> + Sync,
{
    let rows: Vec<Result<(DVector<f64>, bool)>> =
        (0..replicates).into_par_iter().map(|k| worker(k)).collect();
    let mut samples = DMatrix::zeros(replicates, n);
    let mut flagged = Vec::new();
    for (k, row) in rows.into_iter().enumerate() {
        match row {
            Ok((dev, flag)) => {
                samples.set_row(k, &dev.transpose());
                if flag {
                    flagged.push(k);
                }
            }
            Err(e) => {
                return Err(Error::Replicate {
                    index: k,
                    source: Box::new(e),
                })
            }
        }
    }
    Ok((samples, flagged))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use nalgebra::DMatrix;
    use rand::Rng;

    #[test]
    fn score_is_zero_for_unit_weights() {
        let mut r = rng::stream(61, 0);
        let values = DMatrix::from_fn(3, 50, |_, _| r.random::<f64>());
        let m = MarketInstance::new(DVector::from_element(3, 0.4), values).unwrap();
        let beta = DVector::from_element(3, 0.7);
        let w = DVector::from_element(50, 1.0);
        let g = compute_score_bootstrap(&m, &beta, &w).unwrap();
        assert_eq!(g.amax(), 0.0);
    }

    #[test]
    fn score_two_item_arithmetic() {
        // t = 2, weights (2, 0): G^b = (D_1 - D_2)/sqrt(2)
        let m =
            MarketInstance::from_item_rows(vec![0.5, 0.5], vec![vec![1.0, 0.2], vec![0.3, 0.8]])
                .unwrap();
        let beta = DVector::from_vec(vec![0.9, 0.8]);
        let d = subgradient_matrix(&m, &beta).unwrap();
        let w = DVector::from_vec(vec![2.0, 0.0]);
        let g = compute_score_bootstrap(&m, &beta, &w).unwrap();
        let expect = (d.column(0) - d.column(1)) / (2.0f64).sqrt();
        assert!((g - expect).amax() < 1e-14);
    }

    #[test]
    fn score_mean_over_multinomial_draws_vanishes() {
        let mut r = rng::stream(62, 0);
        let t = 300;
        let values = DMatrix::from_fn(2, t, |_, _| r.random::<f64>());
        let m = MarketInstance::new(DVector::from_element(2, 0.3), values).unwrap();
        let beta = DVector::from_vec(vec![0.6, 0.9]);
        let d = subgradient_matrix(&m, &beta).unwrap();
        let reps = 3000;
        let mut acc = DVector::<f64>::zeros(2);
        for k in 0..reps {
            let mut rr = rng::stream(63, k);
            let w =
                crate::resampling::draw_weights(&WeightScheme::Multinomial, t, &mut rr).unwrap();
            acc += score_from_subgradients(&d, &w);
        }
        acc /= reps as f64;
        assert!(acc.amax() < 0.05, "mean score {:?}", acc.as_slice());
    }

    #[test]
    fn replicate_errors_carry_index() {
        let r = run_replicates(2, 4, |k| {
            if k == 2 {
                Err(Error::NotPd)
            } else {
                Ok((DVector::zeros(2), false))
            }
        });
        match r {
            Err(Error::Replicate { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected replicate error, got {other:?}"),
        }
    }
}
