//! Experiment drivers: true-resampling reference distributions and coverage
//! experiments, with deterministic stream bookkeeping.
//!
//! Stream layout on the generator seed: streams 0 and 1 belong to market
//! generation, stream 2 draws the large reference instance, stream
//! `10_000 + r` draws repetition `r`, and the bootstrap inside repetition
//! `r` runs on a seed derived with tag `20_000 + r`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::asymptotics::estimate_hessian;
use crate::bootstrap::fppe::{
    constrained_proximal_bootstrap, numerical_bootstrap_fppe, proximal_bootstrap_fppe,
};
use crate::bootstrap::{BootstrapMethod, BootstrapRun};
use crate::error::{Error, Result};
use crate::generator::{generate_market, redraw_instance, BudgetRule, GeneratorSpec};
use crate::linalg;
use crate::market::MarketInstance;
use crate::rng;
use crate::solver::{solve_weighted, Mode, SolverConfig};
use crate::stats;

const REF_STREAM: u64 = 2;
const REP_STREAM_BASE: u64 = 10_000;
const BOOT_SEED_TAG: u64 = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoverageTarget {
    SumBeta,
    PerCoordinate,
}

fn default_alpha() -> f64 {
    0.05
}
fn default_t_ref() -> usize {
    100_000
}
fn default_eta_exponent() -> f64 {
    1.0 / 6.0
}
fn default_delta_scale() -> f64 {
    1.0
}
fn default_target() -> CoverageTarget {
    CoverageTarget::SumBeta
}
fn default_method() -> BootstrapMethod {
    BootstrapMethod::ConstrainedProximal
}
fn default_mode() -> Mode {
    Mode::Fppe
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub generator: GeneratorSpec,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_method")]
    pub method: BootstrapMethod,
    /// Bootstrap stepsize exponent: `eps = t^-d`.
    pub d: f64,
    /// Bootstrap replicates per repetition.
    pub replicates: usize,
    /// Outer repetitions.
    pub repetitions: usize,
    #[serde(default = "default_alpha")]
    pub alpha_nominal: f64,
    #[serde(default = "default_target")]
    pub target: CoverageTarget,
    /// Item count of the reference solve approximating the limit market.
    #[serde(default = "default_t_ref")]
    pub t_ref: usize,
    /// Hessian differencing stepsize exponent: `eta = t^-e` (clipped to the
    /// stencil domain).
    #[serde(default = "default_eta_exponent")]
    pub eta_exponent: f64,
    /// `delta_t = delta_scale / sqrt(t)`.
    #[serde(default = "default_delta_scale")]
    pub delta_scale: f64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        if self.replicates == 0 || self.repetitions == 0 {
            return Err(Error::Invalid(
                "replicates and repetitions must be >= 1".into(),
            ));
        }
        if !(self.d > 0.0 && self.d < 0.5) {
            return Err(Error::Invalid(
                "stepsize exponent d must lie in (0, 0.5)".into(),
            ));
        }
        if !(self.alpha_nominal > 0.0 && self.alpha_nominal < 1.0) {
            return Err(Error::Invalid("alpha_nominal must lie in (0,1)".into()));
        }
        if self.t_ref == 0 {
            return Err(Error::Invalid("t_ref must be >= 1".into()));
        }
        Ok(())
    }

    pub fn eps(&self) -> f64 {
        (self.generator.t as f64).powf(-self.d)
    }

    pub fn delta_t(&self) -> f64 {
        self.delta_scale / (self.generator.t as f64).sqrt()
    }
}

/// Differencing stepsize `t^-e`, clipped so all stencil points stay strictly
/// positive at `beta`.
pub fn clipped_eta(t: usize, eta_exponent: f64, beta: &DVector<f64>) -> f64 {
    let eta = (t as f64).powf(-eta_exponent);
    eta.min(0.45 * beta.min())
}

/// Make a symmetric matrix positive definite by flooring its eigenvalues.
/// Returns the repaired matrix and whether flooring was needed.
pub fn ensure_pd(h: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    if linalg::cholesky(h).is_ok() {
        return (h.clone(), false);
    }
    let eig = h.clone().symmetric_eigen();
    let lmax = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let floor = (1e-6 * lmax.abs()).max(1e-10);
    let clamped = DVector::from_fn(eig.eigenvalues.len(), |i, _| eig.eigenvalues[i].max(floor));
    let repaired =
        &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    (linalg::sym_part(&repaired), true)
}

/// Reference multipliers from one large solve with the calibrated budgets.
pub fn reference_beta(
    spec: &GeneratorSpec,
    budgets: &DVector<f64>,
    t_ref: usize,
    mode: Mode,
) -> Result<DVector<f64>> {
    let reference = redraw_instance(spec, budgets, t_ref, REF_STREAM)?;
    let eq = solve_weighted(&reference, None, mode, &SolverConfig::default(), None)?;
    Ok(eq.beta)
}

/// Result of the true-resampling protocol: the reference multipliers and an
/// `R x n` matrix whose rows are `sqrt(t) (beta^gamma_r - beta*)`.
#[derive(Debug, Clone)]
pub struct TruthRun {
    pub beta_star: DVector<f64>,
    pub samples: DMatrix<f64>,
}

impl TruthRun {
    pub fn to_json_string(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            beta_star: &'a [f64],
            samples: Vec<Vec<f64>>,
        }
        serde_json::to_string_pretty(&Doc {
            beta_star: self.beta_star.as_slice(),
            samples: linalg::to_rows(&self.samples),
        })
        .expect("truth serialization cannot fail")
    }
}

/// Repeatedly draw and solve independent instances of the same market,
/// recording scaled deviations from the large-sample reference.
pub fn run_true_resampling(config: &ExperimentConfig) -> Result<TruthRun> {
    config.validate()?;
    let spec = &config.generator;
    let master = generate_market(spec)?;
    let budgets = master.budgets().clone();
    let beta_star = reference_beta(spec, &budgets, config.t_ref, config.mode)?;
    let root_t = (spec.t as f64).sqrt();
    let rows: Vec<Result<DVector<f64>>> = (0..config.repetitions)
        .into_par_iter()
        .map(|r| {
            let inst = redraw_instance(spec, &budgets, spec.t, REP_STREAM_BASE + r as u64)?;
            let eq = solve_weighted(&inst, None, config.mode, &SolverConfig::default(), None)?;
            Ok((eq.beta - &beta_star) * root_t)
        })
        .collect();
    let mut samples = DMatrix::zeros(config.repetitions, spec.n);
    for (r, row) in rows.into_iter().enumerate() {
        let row = row.map_err(|e| Error::Replicate {
            index: r,
            source: Box::new(e),
        })?;
        samples.set_row(r, &row.transpose());
    }
    Ok(TruthRun { beta_star, samples })
}

/// One bootstrap run inside a coverage repetition.
fn coverage_bootstrap(
    config: &ExperimentConfig,
    market: &MarketInstance,
    beta_gamma: &DVector<f64>,
    rep: usize,
) -> Result<(BootstrapRun, bool)> {
    let seed = rng::derive_seed(config.generator.seed, BOOT_SEED_TAG + rep as u64);
    let eps = config.eps();
    match config.method {
        BootstrapMethod::Numerical => Ok((
            numerical_bootstrap_fppe(market, beta_gamma, eps, config.replicates, seed)?,
            false,
        )),
        BootstrapMethod::Proximal | BootstrapMethod::ConstrainedProximal => {
            let eta = clipped_eta(market.t(), config.eta_exponent, beta_gamma);
            let raw = estimate_hessian(market, beta_gamma, eta)?;
            let (h, floored) = ensure_pd(&raw);
            let run = match config.method {
                BootstrapMethod::Proximal => {
                    proximal_bootstrap_fppe(market, beta_gamma, &h, eps, config.replicates, seed)?
                }
                _ => constrained_proximal_bootstrap(
                    market,
                    beta_gamma,
                    &h,
                    eps,
                    config.delta_t(),
                    config.replicates,
                    seed,
                )?,
            };
            Ok((run, floored))
        }
        BootstrapMethod::Exchangeable => Err(Error::Invalid(
            "coverage experiments use the perturbation estimators".into(),
        )),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageCell {
    pub t: usize,
    pub n: usize,
    pub d: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paced_fraction: Option<f64>,
    pub covered: usize,
    pub repetitions: usize,
    pub coverage: f64,
    pub mean_width: f64,
    pub replicates: usize,
    pub hessian_floored: usize,
    pub runtime_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageReport {
    pub cells: Vec<CoverageCell>,
}

impl CoverageReport {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    /// Wide table: one row per (d, t), one column per (paced_fraction, n),
    /// each holding `coverage (width)`.
    pub fn to_csv_table(&self) -> String {
        let mut cols: Vec<(String, f64, usize)> = Vec::new();
        for c in &self.cells {
            let pf = c.paced_fraction.unwrap_or(f64::NAN);
            let key = (format!("alpha={};n={}", pf, c.n), pf, c.n);
            if !cols.iter().any(|k| k.0 == key.0) {
                cols.push(key);
            }
        }
        cols.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.2.cmp(&b.2)));
        let mut rows: Vec<(f64, usize)> = self.cells.iter().map(|c| (c.d, c.t)).collect();
        rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        rows.dedup();
        let mut out = String::from("d,t");
        for (name, _, _) in &cols {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (d, t) in rows {
            out.push_str(&format!("{d},{t}"));
            for (name, _, _) in &cols {
                let cell = self.cells.iter().find(|c| {
                    c.d == d
                        && c.t == t
                        && format!("alpha={};n={}", c.paced_fraction.unwrap_or(f64::NAN), c.n)
                            == *name
                });
                match cell {
                    Some(c) => out.push_str(&format!(",{:.2} ({:.2})", c.coverage, c.mean_width)),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Percentile confidence interval for the nominal level.
fn percentile_ci(samples: &[f64], alpha: f64) -> (f64, f64) {
    (
        stats::quantile_inverted_cdf(samples, alpha / 2.0),
        stats::quantile_inverted_cdf(samples, 1.0 - alpha / 2.0),
    )
}

/// Coverage experiment for one parameter cell: per repetition, draw a fresh
/// instance, solve it, bootstrap it, and check whether the percentile
/// interval covers the reference target.
pub fn run_coverage_experiment(config: &ExperimentConfig) -> Result<CoverageCell> {
    config.validate()?;
    let start = std::time::Instant::now();
    let spec = &config.generator;
    let master = generate_market(spec)?;
    let budgets = master.budgets().clone();
    let beta_star = reference_beta(spec, &budgets, config.t_ref, config.mode)?;
    let sum_star: f64 = beta_star.iter().sum();

    let outcomes: Vec<Result<(bool, f64, bool)>> = (0..config.repetitions)
        .into_par_iter()
        .map(|r| {
            let inst = redraw_instance(spec, &budgets, spec.t, REP_STREAM_BASE + r as u64)?;
            let eq = solve_weighted(&inst, None, config.mode, &SolverConfig::default(), None)?;
            let (run, floored) = coverage_bootstrap(config, &inst, &eq.beta, r)?;
            let raw = run.raw_betas(&eq.beta);
            match config.target {
                CoverageTarget::SumBeta => {
                    let sums: Vec<f64> = (0..raw.nrows())
                        .map(|k| raw.row(k).iter().sum::<f64>())
                        .collect();
                    let (lo, hi) = percentile_ci(&sums, config.alpha_nominal);
                    Ok((lo <= sum_star && sum_star <= hi, hi - lo, floored))
                }
                CoverageTarget::PerCoordinate => {
                    // simultaneous coverage: every coordinate interval must
                    // contain its reference value
                    let mut hits = 0usize;
                    let mut width = 0.0;
                    for i in 0..spec.n {
                        let col: Vec<f64> = raw.column(i).iter().cloned().collect();
                        let (lo, hi) = percentile_ci(&col, config.alpha_nominal);
                        if lo <= beta_star[i] && beta_star[i] <= hi {
                            hits += 1;
                        }
                        width += hi - lo;
                    }
                    Ok((hits == spec.n, width / spec.n as f64, floored))
                }
            }
        })
        .collect();

    let mut covered = 0usize;
    let mut width_sum = 0.0;
    let mut floored_count = 0usize;
    for (r, o) in outcomes.into_iter().enumerate() {
        let (hit, width, floored) = o.map_err(|e| Error::Replicate {
            index: r,
            source: Box::new(e),
        })?;
        if hit {
            covered += 1;
        }
        if floored {
            floored_count += 1;
        }
        width_sum += width;
    }
    let paced_fraction = match &spec.budget_rule {
        BudgetRule::PacedFraction { alpha } => Some(*alpha),
        BudgetRule::Explicit { .. } => None,
    };
    Ok(CoverageCell {
        t: spec.t,
        n: spec.n,
        d: config.d,
        paced_fraction,
        covered,
        repetitions: config.repetitions,
        coverage: covered as f64 / config.repetitions as f64,
        mean_width: width_sum / config.repetitions as f64,
        replicates: config.replicates,
        hessian_floored: floored_count,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

/// Histogram CSV (`coordinate,bin_left,bin_right,count`) for the columns of
/// a sample matrix, with `bins` equal-width bins per coordinate.
pub fn histogram_csv(samples: &DMatrix<f64>, bins: usize) -> String {
    let mut out = String::from("coordinate,bin_left,bin_right,count\n");
    for i in 0..samples.ncols() {
        let col: Vec<f64> = samples.column(i).iter().cloned().collect();
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo {
            (hi - lo) / bins as f64
        } else {
            1.0
        };
        let mut counts = vec![0usize; bins];
        for x in &col {
            let k = (((x - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
        for (k, c) in counts.iter().enumerate() {
            let left = lo + k as f64 * width;
            out.push_str(&format!("{i},{left},{},{c}\n", left + width));
        }
    }
    out
}
