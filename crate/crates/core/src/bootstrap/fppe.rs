//! Bootstrap estimators for FPPE pacing multipliers, and the demonstration
//! that plain multinomial resampling fails on constrained equilibria.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::bootstrap::lfm::{check_eps, perturbed_weights};
use crate::bootstrap::{
    run_replicates, score_from_subgradients, BootstrapConfig, BootstrapMethod, BootstrapRun,
    ScalingConvention,
};
use crate::error::{Error, Result};
use crate::linalg;
use crate::market::{subgradient_matrix, MarketInstance};
use crate::resampling::{draw_weights, WeightScheme};
use crate::rng;
use crate::solver::{classify_buyers, default_delta_t, solve_weighted, Mode, SolverConfig};
use crate::stats;

/// True when the solved market has estimated unpaced-with-leftover buyers,
/// where the budget-exhausted theory behind the plain perturbation
/// estimators does not apply.
fn violates_budget_exhausted_regime(market: &MarketInstance, beta_gamma: &DVector<f64>) -> bool {
    let Ok((delta, pay)) = crate::solver::recover_duals(market, beta_gamma) else {
        return false;
    };
    let eq = crate::solver::EquilibriumResult {
        beta: beta_gamma.clone(),
        delta,
        pay,
        utilities: DVector::from_fn(market.n(), |i, _| market.budgets()[i] / beta_gamma[i]),
        revenue: 0.0,
        objective: 0.0,
        mode: Mode::Fppe,
        iterations: 0,
        gap: 0.0,
    };
    let sets = classify_buyers(&eq, default_delta_t(market.t()));
    !sets.i_plus().is_empty()
}

/// Re-solve under damped multinomial perturbations over `(0,1]^n`; samples
/// are `(beta^b - beta_gamma) / eps`. Intended for budget-exhausted markets;
/// a violated regime only sets `regime_warning`.
pub fn numerical_bootstrap_fppe(
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
        let eq = solve_weighted(market, Some(&m), Mode::Fppe, &cfg, Some(beta_gamma))?;
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
        regime_warning: violates_budget_exhausted_regime(market, beta_gamma),
    })
}

/// One prox step per replicate on the box `[0,1]^n`:
/// minimize `eps (G^b)'(beta - beta_gamma) + 0.5 ||beta - beta_gamma||_H^2`.
pub fn proximal_bootstrap_fppe(
    market: &MarketInstance,
    beta_gamma: &DVector<f64>,
    hessian_hat: &DMatrix<f64>,
    eps: f64,
    replicates: usize,
    seed: u64,
) -> Result<BootstrapRun> {
    check_eps(eps)?;
    linalg::cholesky(hessian_hat)?;
    let n = market.n();
    let subgradients = subgradient_matrix(market, beta_gamma)?;
    let lo = DVector::from_fn(n, |i, _| -beta_gamma[i]);
    let up = DVector::from_fn(n, |i, _| 1.0 - beta_gamma[i]);
    let (samples, _) = run_replicates(n, replicates, |k| {
        let mut r = rng::stream(seed, k as u64);
        let w = draw_weights(&WeightScheme::Multinomial, market.t(), &mut r)?;
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
        regime_warning: violates_budget_exhausted_regime(market, beta_gamma),
    })
}

/// Prox step on the reduced feasible set that pins the estimated unpaced
/// buyers (`beta_gamma_i > 1 - delta_t`) at one. Valid in markets with
/// leftover budgets, unlike the two estimators above.
pub fn constrained_proximal_bootstrap(
    market: &MarketInstance,
    beta_gamma: &DVector<f64>,
    hessian_hat: &DMatrix<f64>,
    eps: f64,
    delta_t: f64,
    replicates: usize,
    seed: u64,
) -> Result<BootstrapRun> {
    check_eps(eps)?;
    if !(delta_t > 0.0) {
        return Err(Error::Invalid("delta_t must be positive".into()));
    }
    linalg::cholesky(hessian_hat)?;
    let n = market.n();
    let subgradients = subgradient_matrix(market, beta_gamma)?;
    // d = beta - beta_gamma; pinned coordinates have d fixed at 1 - beta_gamma
    let mut lo = DVector::from_fn(n, |i, _| -beta_gamma[i]);
    let mut up = DVector::from_fn(n, |i, _| 1.0 - beta_gamma[i]);
    for i in 0..n {
        if beta_gamma[i] > 1.0 - delta_t {
            lo[i] = 1.0 - beta_gamma[i];
            up[i] = 1.0 - beta_gamma[i];
        }
    }
    let (samples, _) = run_replicates(n, replicates, |k| {
        let mut r = rng::stream(seed, k as u64);
        let w = draw_weights(&WeightScheme::Multinomial, market.t(), &mut r)?;
        let g_boot = score_from_subgradients(&subgradients, &w);
        let d = linalg::box_qp(hessian_hat, &(&g_boot * eps), &lo, &up, &DVector::zeros(n))?;
        Ok((d / eps, false))
    })?;
    Ok(BootstrapRun {
        config: BootstrapConfig {
            method: BootstrapMethod::ConstrainedProximal,
            scheme: Some(WeightScheme::Multinomial),
            eps: Some(eps),
            eta: None,
            delta_t: Some(delta_t),
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

/// Outcome of the one-buyer multinomial-failure construction.
#[derive(Debug, Clone, Serialize)]
pub struct FailureReport {
    pub true_mass_at_zero: f64,
    pub boot_mass_at_zero: f64,
    pub sup_cdf_distance: f64,
    pub chosen_seed: u64,
    pub t: usize,
    #[serde(rename = "B")]
    pub replicates: usize,
}

impl FailureReport {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

/// One-buyer market with budget 1 and values uniform on (0, 2), so the
/// population mean value is 1 and the limit multiplier sits exactly at the
/// degenerate corner: the limit law of `sqrt(t)(beta - 1)` is `min(Z, 0)`
/// with `Z ~ N(0, 1/3)`, putting mass 1/2 at zero. Plain multinomial
/// resampling of a dataset with `sqrt(t)(1 - vbar_t) >= 1` (found by seed
/// search) concentrates strictly more than half its mass at zero, so its
/// conditional law cannot converge to the truth.
pub fn multinomial_failure_demo(t: usize, seed: u64, replicates: usize) -> Result<FailureReport> {
    const VAR_V: f64 = 4.0 / 12.0; // variance of U(0, 2)
    let mut chosen = None;
    for s in seed..seed.saturating_add(10_000) {
        let mut r = rng::stream(s, 0);
        let mut sum = 0.0;
        for _ in 0..t {
            sum += 2.0 * rand::Rng::random::<f64>(&mut r);
        }
        let vbar = sum / t as f64;
        if (t as f64).sqrt() * (1.0 - vbar) >= 1.0 {
            chosen = Some(s);
            break;
        }
    }
    let Some(chosen_seed) = chosen else {
        return Err(Error::SeedSearchFailed { tried: 10_000 });
    };

    let mut r = rng::stream(chosen_seed, 0);
    let values: Vec<f64> = (0..t)
        .map(|_| 2.0 * rand::Rng::random::<f64>(&mut r))
        .collect();
    let vbar: f64 = values.iter().sum::<f64>() / t as f64;
    let beta_gamma = (1.0f64 / vbar).min(1.0);

    // conditional multinomial bootstrap of sqrt(t) (beta^b - beta_gamma)
    let root_t = (t as f64).sqrt();
    let devs: Vec<f64> = (0..replicates)
        .map(|k| {
            let mut rr = rng::stream(chosen_seed, 1 + k as u64);
            let mut sum = 0.0;
            for _ in 0..t {
                sum += values[rand::Rng::random_range(&mut rr, 0..t)];
            }
            let vbar_b = sum / t as f64;
            let beta_b = (1.0f64 / vbar_b).min(1.0);
            root_t * (beta_b - beta_gamma)
        })
        .collect();

    let boot_mass_at_zero =
        devs.iter().filter(|d| d.abs() <= 1e-12).count() as f64 / replicates as f64;
    let sigma = VAR_V.sqrt();
    let true_cdf = |x: f64| {
        if x >= 0.0 {
            1.0
        } else {
            stats::normal_cdf(x / sigma)
        }
    };
    let sup_cdf_distance = stats::sup_cdf_distance(&devs, true_cdf);
    Ok(FailureReport {
        true_mass_at_zero: 0.5,
        boot_mass_at_zero,
        sup_cdf_distance,
        chosen_seed,
        t,
        replicates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asymptotics::{
        estimate_hessian, estimate_score_cov, sample_limit_distribution, ActiveSets, LimitModel,
    };
    use crate::generator::{generate_market, BudgetRule, GeneratorSpec, ValueDist};
    use crate::solver::solve_fppe;
    use rand::Rng;

    fn uniform02_market(t: usize, seed: u64) -> MarketInstance {
        let mut r = rng::stream(seed, 0);
        let rows: Vec<Vec<f64>> = (0..t).map(|_| vec![2.0 * r.random::<f64>()]).collect();
        MarketInstance::from_item_rows(vec![1.0], rows).unwrap()
    }

    #[test]
    fn unit_weights_fix_the_solution() {
        let m = uniform02_market(300, 81);
        let eq = solve_fppe(&m, &SolverConfig::default()).unwrap();
        let w = DVector::from_element(300, 1.0);
        let eq2 = solve_weighted(
            &m,
            Some(&w),
            Mode::Fppe,
            &SolverConfig::default(),
            Some(&eq.beta),
        )
        .unwrap();
        assert!((eq2.beta - &eq.beta).amax() < 1e-9);
    }

    #[test]
    fn degenerate_one_buyer_matches_limit_law() {
        // E[v] = 1, b = 1: I0 = {1}; the limit is min(Z, 0), Z ~ N(0, 1/3).
        // Use a dataset with sample mean below one so the solved multiplier
        // sits exactly at the bound, matching the degenerate-corner shape.
        let t = 2000;
        let seed = (82..)
            .find(|s| {
                let m = uniform02_market(t, *s);
                m.mean_values()[0] < 1.0
            })
            .unwrap();
        let m = uniform02_market(t, seed);
        let eq = solve_fppe(&m, &SolverConfig::default()).unwrap();
        assert_eq!(eq.beta[0], 1.0);
        let eps = (t as f64).powf(-0.3);
        let run = numerical_bootstrap_fppe(&m, &eq.beta, eps, 500, 5).unwrap();
        let devs = run.coordinate_samples(0);
        // no positive deviations (box), positive frequency of exact zeros
        // when the sample multiplier sits at one
        assert!(devs.iter().all(|d| *d <= 1e-9));
        let zeros = devs.iter().filter(|d| **d == 0.0).count();
        assert!(zeros > 0, "expected an atom at zero");

        let h = estimate_hessian(&m, &eq.beta, 0.2 * eq.beta.min()).unwrap();
        let cov = estimate_score_cov(&m, &eq.beta).unwrap();
        let sets = ActiveSets::new(1, vec![], vec![0], vec![]).unwrap();
        let model = LimitModel::new(h, cov, sets, eq.beta.clone()).unwrap();
        let mut rr = rng::stream(83, 0);
        let limit = sample_limit_distribution(&model, 500, &mut rr, Mode::Fppe).unwrap();
        let limit_col: Vec<f64> = limit.column(0).iter().cloned().collect();
        let ks = stats::ks_two_sample(&devs, &limit_col);
        assert!(
            ks.p_value > 0.01,
            "p = {}, D = {}",
            ks.p_value,
            ks.statistic
        );
        let zero_share = limit_col.iter().filter(|d| **d == 0.0).count() as f64 / 500.0;
        assert!((zero_share - 0.5).abs() < 0.12, "mass at zero {zero_share}");
    }

    #[test]
    fn proximal_interior_and_bound_behavior() {
        let t = 1500;
        let m = uniform02_market(t, 84);
        let eq = solve_fppe(&m, &SolverConfig::default()).unwrap();
        let h = estimate_hessian(&m, &eq.beta, 0.2 * eq.beta.min()).unwrap();
        let eps = (t as f64).powf(-0.3);
        let run = proximal_bootstrap_fppe(&m, &eq.beta, &h, eps, 400, 7).unwrap();
        let devs = run.coordinate_samples(0);
        if eq.beta[0] >= 1.0 - 1e-12 {
            assert!(devs.iter().all(|d| *d <= 1e-12), "box violated above one");
        }
        // agreement with the numerical estimator on the same instance
        let run_nu = numerical_bootstrap_fppe(&m, &eq.beta, eps, 400, 8).unwrap();
        let ks = stats::ks_two_sample(&devs, &run_nu.coordinate_samples(0));
        assert!(ks.p_value > 0.01, "p = {}", ks.p_value);
    }

    #[test]
    fn constrained_pins_estimated_unpaced_buyers() {
        let spec = GeneratorSpec {
            n: 4,
            t: 500,
            value_dist: ValueDist::Uniform { lo: 0.0, hi: 1.0 },
            budget_rule: BudgetRule::PacedFraction { alpha: 0.5 },
            seed: 42,
        };
        let m = generate_market(&spec).unwrap();
        let eq = solve_fppe(&m, &SolverConfig::default()).unwrap();
        let h = estimate_hessian(&m, &eq.beta, 0.2 * eq.beta.min()).unwrap();
        let eps = (m.t() as f64).powf(-0.3);
        let delta_t = default_delta_t(m.t());
        let run = constrained_proximal_bootstrap(&m, &eq.beta, &h, eps, delta_t, 100, 17).unwrap();
        for i in 0..4 {
            let devs = run.coordinate_samples(i);
            if eq.beta[i] > 1.0 - delta_t {
                let expect = (1.0 - eq.beta[i]) / eps;
                assert!(
                    devs.iter().all(|d| (d - expect).abs() < 1e-12),
                    "pinned coordinate {i} should be constant"
                );
            } else {
                let sd = stats::std_dev(&devs);
                assert!(sd > 0.0, "paced coordinate {i} should vary");
            }
        }
        // feasibility is exact
        let raw = run.raw_betas(&eq.beta);
        for k in 0..raw.nrows() {
            for i in 0..raw.ncols() {
                assert!(raw[(k, i)] >= -1e-15 && raw[(k, i)] <= 1.0 + 1e-15);
            }
        }
    }

    #[test]
    fn constrained_interior_reduces_to_sandwich_step() {
        // all budgets tiny: no buyer near one, constraint set is the full box
        let mut r = rng::stream(85, 0);
        let values = DMatrix::from_fn(3, 600, |_, _| r.random::<f64>());
        let m = MarketInstance::new(DVector::from_vec(vec![0.02, 0.03, 0.025]), values).unwrap();
        let eq = solve_fppe(&m, &SolverConfig::default()).unwrap();
        let h = estimate_hessian(&m, &eq.beta, 0.2 * eq.beta.min()).unwrap();
        let eps = 0.05;
        let run =
            constrained_proximal_bootstrap(&m, &eq.beta, &h, eps, default_delta_t(m.t()), 30, 19)
                .unwrap();
        let subg = subgradient_matrix(&m, &eq.beta).unwrap();
        let chol = linalg::cholesky(&h).unwrap();
        for k in 0..30 {
            let mut rr = rng::stream(19, k as u64);
            let w = draw_weights(&WeightScheme::Multinomial, m.t(), &mut rr).unwrap();
            let g_boot = score_from_subgradients(&subg, &w);
            let expect = -chol.solve(&g_boot);
            let row = run.samples.row(k).transpose();
            assert!((row - expect).amax() < 1e-8);
        }
    }

    #[test]
    fn eps_scaled_deviations_stable_across_stepsize() {
        let spec = GeneratorSpec {
            n: 3,
            t: 2000,
            value_dist: ValueDist::Uniform { lo: 0.0, hi: 1.0 },
            budget_rule: BudgetRule::PacedFraction { alpha: 1.0 / 3.0 },
            seed: 7,
        };
        let m = generate_market(&spec).unwrap();
        let eq = solve_fppe(&m, &SolverConfig::default()).unwrap();
        let h = estimate_hessian(&m, &eq.beta, 0.2 * eq.beta.min()).unwrap();
        let delta_t = default_delta_t(m.t());
        let t = m.t() as f64;
        let run_a =
            constrained_proximal_bootstrap(&m, &eq.beta, &h, t.powf(-0.2), delta_t, 400, 23)
                .unwrap();
        let run_b =
            constrained_proximal_bootstrap(&m, &eq.beta, &h, t.powf(-0.3), delta_t, 400, 23)
                .unwrap();
        // raw spread grows with eps, scaled distributions agree
        for i in 0..3 {
            if eq.beta[i] > 1.0 - delta_t {
                continue;
            }
            let xs = run_a.coordinate_samples(i);
            let ys = run_b.coordinate_samples(i);
            let raw_a = stats::std_dev(&xs) * run_a.config.eps.unwrap();
            let raw_b = stats::std_dev(&ys) * run_b.config.eps.unwrap();
            assert!(
                raw_a >= raw_b - 1e-9,
                "raw spread should weakly grow with eps"
            );
            let ks = stats::ks_two_sample(&xs, &ys);
            assert!(ks.p_value > 0.01, "coordinate {i}: p = {}", ks.p_value);
        }
    }

    #[test]
    fn failure_demo_reproduces_inconsistency() {
        let report = multinomial_failure_demo(4000, 11, 600).unwrap();
        assert_eq!(report.true_mass_at_zero, 0.5);
        assert!(
            report.boot_mass_at_zero >= 0.6,
            "bootstrap zero mass {}",
            report.boot_mass_at_zero
        );
        assert!(
            report.sup_cdf_distance > 0.05,
            "sup distance {}",
            report.sup_cdf_distance
        );
    }

    #[test]
    fn regime_warning_fires_with_leftover_budgets() {
        let spec = GeneratorSpec {
            n: 4,
            t: 400,
            value_dist: ValueDist::Uniform { lo: 0.0, hi: 1.0 },
            budget_rule: BudgetRule::PacedFraction { alpha: 0.5 },
            seed: 43,
        };
        let m = generate_market(&spec).unwrap();
        let eq = solve_fppe(&m, &SolverConfig::default()).unwrap();
        let eps = (m.t() as f64).powf(-0.3);
        let run = numerical_bootstrap_fppe(&m, &eq.beta, eps, 5, 3).unwrap();
        assert!(
            run.regime_warning,
            "unpaced buyers should trigger the warning"
        );
    }
}
