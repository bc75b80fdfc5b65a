//! Bootstrap estimators for the LFM utility prices.

use nalgebra::{DMatrix, DVector};

use crate::bootstrap::{
    run_replicates, score_from_subgradients, BootstrapConfig, BootstrapMethod, BootstrapRun,
    ScalingConvention,
};
use crate::error::{Error, Result};
use crate::linalg;
use crate::market::{subgradient_matrix, MarketInstance};
use crate::resampling::{draw_weights, scheme_c_squared, WeightScheme};
use crate::rng;
use crate::solver::{solve_weighted, Mode, SolverConfig};

/// Re-solve the market under exchangeable weights; samples are
/// `sqrt(t) (beta^b - beta_gamma) / c`.
pub fn exchangeable_bootstrap(
    market: &MarketInstance,
    beta_gamma: &DVector<f64>,
    scheme: &WeightScheme,
    replicates: usize,
    seed: u64,
) -> Result<BootstrapRun> {
    scheme.validate()?;
    let t = market.t();
    let c = scheme_c_squared(scheme).sqrt();
    let scaling = (t as f64).sqrt() / c;
    let cfg = SolverConfig::default();
    let (samples, _) = run_replicates(market.n(), replicates, |k| {
        let mut r = rng::stream(seed, k as u64);
        let w = draw_weights(scheme, t, &mut r)?;
        let eq = solve_weighted(market, Some(&w), Mode::Lfm, &cfg, Some(beta_gamma))?;
        Ok(((eq.beta - beta_gamma) * scaling, false))
    })?;
    Ok(BootstrapRun {
        config: BootstrapConfig {
            method: BootstrapMethod::Exchangeable,
            scheme: Some(*scheme),
            eps: None,
            eta: None,
            delta_t: None,
            replicates,
            seed,
        },
        samples,
        scaling,
        convention: ScalingConvention::SqrtTOverC,
        negative_mass: Vec::new(),
        regime_warning: false,
    })
}

/// Perturbed item weights `1 + eps sqrt(t) (W - 1)` for one multinomial
/// draw; flags whether any went negative.
pub(crate) fn perturbed_weights<R: rand::Rng + ?Sized>(
    t: usize,
    eps: f64,
    rng: &mut R,
) -> Result<(DVector<f64>, bool)> {
    let w = draw_weights(&WeightScheme::Multinomial, t, rng)?;
    let root_t = (t as f64).sqrt();
    let m = DVector::from_fn(t, |tau, _| 1.0 + eps * root_t * (w[tau] - 1.0));
    let negative = m.iter().any(|x| *x < 0.0);
    Ok((m, negative))
}

/// Re-solve under multinomial weights damped by `eps`; samples are
/// `(beta^b - beta_gamma) / eps`. Setting `eps = 1/sqrt(t)` recovers the
/// plain multinomial bootstrap objective.
pub fn numerical_bootstrap_lfm(
    market: &MarketInstance,
    beta_gamma: &DVector<f64>,
    eps: f64,
    replicates: usize,
    seed: u64,
) -> Result<BootstrapRun> {
    check_eps(eps)?;
    let t = market.t();
    let cfg = SolverConfig::default();
    let (samples, negative_mass) = run_replicates(market.n(), replicates, |k| {
        let mut r = rng::stream(seed, k as u64);
        let (m, negative) = perturbed_weights(t, eps, &mut r)?;
        let eq = solve_weighted(market, Some(&m), Mode::Lfm, &cfg, Some(beta_gamma))?;
        Ok(((eq.beta - beta_gamma) / eps, negative))
    })?;
    Ok(BootstrapRun {
        config: BootstrapConfig {
            method: BootstrapMethod::Numerical,
            scheme: Some(WeightScheme::Multinomial),
            eps: Some(eps),
            eta: None,
            delta_t: None,
            replicates,
            seed,
        },
        samples,
        scaling: 1.0 / eps,
        convention: ScalingConvention::InverseEps,
        negative_mass,
        regime_warning: false,
    })
}

/// Replace the re-solve by one prox step: minimize
/// `eps (G^b)'(beta - beta_gamma) + 0.5 ||beta - beta_gamma||_H^2` over the
/// nonnegative orthant. Costs `O(n^3 + t n)` per replicate and never calls
/// the equilibrium solver.
pub fn proximal_bootstrap_lfm(
    market: &MarketInstance,
    beta_gamma: &DVector<f64>,
    hessian_hat: &DMatrix<f64>,
    eps: f64,
    replicates: usize,
    seed: u64,
) -> Result<BootstrapRun> {
    check_eps(eps)?;
    linalg::cholesky(hessian_hat)?;
    let t = market.t();
    let n = market.n();
    let subgradients = subgradient_matrix(market, beta_gamma)?;
    let lo = DVector::from_fn(n, |i, _| -beta_gamma[i]);
    let up = DVector::from_element(n, f64::INFINITY);
    let (samples, _) = run_replicates(n, replicates, |k| {
        let mut r = rng::stream(seed, k as u64);
        let w = draw_weights(&WeightScheme::Multinomial, t, &mut r)?;
        let g_boot = score_from_subgradients(&subgradients, &w);
        let d = linalg::box_qp(hessian_hat, &(&g_boot * eps), &lo, &up, &DVector::zeros(n))?;
        Ok((d / eps, false))
    })?;
    Ok(BootstrapRun {
        config: BootstrapConfig {
            method: BootstrapMethod::Proximal,
            scheme: Some(WeightScheme::Multinomial),
            eps: Some(eps),
            eta: None,
            delta_t: None,
            replicates,
            seed,
        },
        samples,
        scaling: 1.0 / eps,
        convention: ScalingConvention::InverseEps,
        negative_mass: Vec::new(),
        regime_warning: false,
    })
}

pub(crate) fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps <= 1.0 {
        Ok(())
    } else {
        Err(Error::Invalid("eps must lie in (0, 1]".into()))
    }
}
