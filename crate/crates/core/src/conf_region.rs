//! Test-inversion confidence regions for general FPPE.
//!
//! The statistic compares the sample Lagrangian at a candidate `(beta, delta)`
//! with its best local improvement over a ball of `sqrt(t)`-scaled
//! directions; its bootstrap analogue replaces the Lagrangian by the prox
//! quadratic model. A candidate is in the region when its statistic does not
//! exceed the bootstrap quantile.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::market::{subgradient_matrix, MarketInstance};
use crate::resampling::{draw_weights, WeightScheme};
use crate::rng;
use crate::stats;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RegionConfig {
    /// Ball radius for the local-improvement search; `f64::INFINITY` is
    /// realized as `10 sqrt(n)`.
    pub kappa: f64,
    /// Miscoverage level.
    pub alpha: f64,
    /// Bootstrap stepsize.
    pub eps: f64,
    pub replicates: usize,
}

impl RegionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0) {
            return Err(Error::Invalid("kappa must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Invalid("alpha must lie in (0,1)".into()));
        }
        crate::bootstrap::lfm::check_eps(self.eps)?;
        if self.replicates == 0 {
            return Err(Error::Invalid("need at least one replicate".into()));
        }
        Ok(())
    }
}

/// Finite stand-in for an unbounded search radius.
pub fn default_kappa(n: usize) -> f64 {
    10.0 * (n as f64).sqrt()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TGammaStat {
    pub value: f64,
    /// Radius actually searched after keeping `beta + h/sqrt(t)` positive.
    pub kappa_effective: f64,
    pub radius_clipped: bool,
}

fn lagrangian(market: &MarketInstance, beta: &DVector<f64>, delta: &DVector<f64>) -> Result<f64> {
    let h = crate::market::eval_empirical_objective(market, beta)?;
    let penalty: f64 = (0..market.n()).map(|i| delta[i] * (1.0 - beta[i])).sum();
    Ok(h - penalty)
}

fn lagrangian_subgradient(
    market: &MarketInstance,
    beta: &DVector<f64>,
    delta: &DVector<f64>,
) -> DVector<f64> {
    let n = market.n();
    let t = market.t();
    let mut g = DVector::from_fn(n, |i, _| -market.budgets()[i] / beta[i] + delta[i]);
    for tau in 0..t {
        let col = market.values().column(tau);
        let win = crate::market::winner(col, beta);
        g[win] += col[win] / t as f64;
    }
    g
}

/// `T_gamma(beta, delta) = -inf over the ball of the scaled Lagrangian
/// difference`; non-negative by construction since `h = 0` is feasible.
/// The inner problem is convex and solved by projected subgradient descent
/// (2000 steps) from the origin plus five deterministic random restarts.
pub fn statistic_t_gamma(
    market: &MarketInstance,
    beta: &DVector<f64>,
    delta: &DVector<f64>,
    kappa: f64,
) -> Result<TGammaStat> {
    let n = market.n();
    if beta.len() != n || delta.len() != n {
        return Err(Error::DimensionMismatch("beta/delta length".into()));
    }
    if beta.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
        return Err(Error::NonPositiveBeta);
    }
    if !(kappa > 0.0) {
        return Err(Error::Invalid("kappa must be positive".into()));
    }
    let root_t = (market.t() as f64).sqrt();
    // keep every search point strictly positive
    let kappa_effective = kappa.min(0.999 * root_t * beta.min());
    let radius_clipped = kappa_effective < kappa;

    let base = lagrangian(market, beta, delta)?;
    let eval = |h: &DVector<f64>| -> f64 {
        let shifted = DVector::from_fn(n, |i, _| beta[i] + h[i] / root_t);
        let l = lagrangian(market, &shifted, delta).expect("search stays positive");
        market.t() as f64 * (l - base)
    };

    let project = |h: &mut DVector<f64>| {
        let norm = h.norm();
        if norm > kappa_effective {
            *h *= kappa_effective / norm;
        }
    };

    let mut best = 0.0f64; // h = 0
    let mut restart_rng = rng::stream(0x7e57_ba11, 0);
    for restart in 0..6 {
        let mut h = if restart == 0 {
            DVector::zeros(n)
        } else {
            let mut p = DVector::from_fn(n, |_, _| restart_rng.sample::<f64, _>(StandardNormal));
            let norm = p.norm().max(1e-12);
            p *= kappa_effective * restart_rng.random::<f64>() / norm;
            p
        };
        let mut val = eval(&h);
        best = best.min(val);
        for k in 0..2000 {
            let shifted = DVector::from_fn(n, |i, _| beta[i] + h[i] / root_t);
            let g = lagrangian_subgradient(market, &shifted, delta) * root_t;
            let gn = g.norm();
            if gn == 0.0 {
                break;
            }
            let step = kappa_effective / ((k + 1) as f64).sqrt() / gn;
            h.axpy(-step, &g, 1.0);
            project(&mut h);
            val = eval(&h);
            if val < best {
                best = val;
            }
        }
    }
    Ok(TGammaStat {
        value: -best,
        kappa_effective,
        radius_clipped,
    })
}

/// Bootstrap statistic `T^b = -inf over the nonnegative orthant of the
/// eps^-2-scaled prox model`. The unconstrained minimizer gives the closed
/// form `0.5 (G^b)' H^{-1} G^b` whenever it stays nonnegative; otherwise the
/// QP is solved with the lower bounds active.
pub fn statistic_t_boot(
    g_boot: &DVector<f64>,
    hessian_hat: &DMatrix<f64>,
    beta_gamma: &DVector<f64>,
    eps: f64,
) -> Result<f64> {
    crate::bootstrap::lfm::check_eps(eps)?;
    let n = beta_gamma.len();
    let chol = linalg::cholesky(hessian_hat)?;
    let hinv_g = chol.solve(g_boot);
    let interior = (0..n).all(|i| beta_gamma[i] - eps * hinv_g[i] >= 0.0);
    if interior {
        return Ok(0.5 * g_boot.dot(&hinv_g));
    }
    let lo = DVector::from_fn(n, |i, _| -beta_gamma[i]);
    let up = DVector::from_element(n, f64::INFINITY);
    let d = linalg::box_qp(hessian_hat, &(g_boot * eps), &lo, &up, &DVector::zeros(n))?;
    let x = eps * g_boot.dot(&d) + 0.5 * (d.transpose() * hessian_hat * &d)[(0, 0)];
    Ok(-x / (eps * eps))
}

/// Conditional `(1 - alpha)` quantile of `T^b` over multinomial draws.
pub fn region_quantile(
    market: &MarketInstance,
    beta_gamma: &DVector<f64>,
    hessian_hat: &DMatrix<f64>,
    config: &RegionConfig,
    seed: u64,
) -> Result<f64> {
    config.validate()?;
    linalg::cholesky(hessian_hat)?;
    let subgradients = subgradient_matrix(market, beta_gamma)?;
    let draws: Vec<Result<f64>> = (0..config.replicates)
        .into_par_iter()
        .map(|k| {
            let mut r = rng::stream(seed, k as u64);
            let w = draw_weights(&WeightScheme::Multinomial, market.t(), &mut r)?;
            let g_boot = crate::bootstrap::score_from_subgradients(&subgradients, &w);
            statistic_t_boot(&g_boot, hessian_hat, beta_gamma, config.eps)
        })
        .collect();
    let mut xs = Vec::with_capacity(config.replicates);
    for (k, d) in draws.into_iter().enumerate() {
        xs.push(d.map_err(|e| Error::Replicate {
            index: k,
            source: Box::new(e),
        })?);
    }
    Ok(stats::quantile_inverted_cdf(&xs, 1.0 - config.alpha))
}

/// Membership oracle for the region: the box constraints must hold and the
/// statistic must not exceed the threshold `c`.
pub fn region_membership(
    market: &MarketInstance,
    beta: &DVector<f64>,
    delta: &DVector<f64>,
    kappa: f64,
    c: f64,
) -> Result<bool> {
    let n = market.n();
    let boxed = (0..n).all(|i| {
        beta[i] > 0.0
            && beta[i] <= 1.0 + 1e-12
            && delta[i] >= -1e-12
            && delta[i] <= market.budgets()[i] + 1e-12
    });
    if !boxed {
        return Ok(false);
    }
    if c < 0.0 {
        return Ok(false);
    }
    let stat = statistic_t_gamma(market, beta, delta, kappa)?;
    Ok(stat.value <= c)
}
