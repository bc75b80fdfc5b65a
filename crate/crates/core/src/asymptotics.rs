//! Limit-model ingredients and the limit quadratic program.
//!
//! The fluctuation of solved multipliers around their population value is
//! governed by a Gaussian score pushed through a cone projection: with
//! Hessian `H`, score `G`, strongly-active set `I+` and degenerate set `I0`,
//! the limit draw is
//!
//! ```text
//!     h(G) = argmin { ||h + H^{-1} G||_H^2 : h_i = 0 on I+, h_i <= 0 on I0 }
//! ```
//!
//! solved here in closed form by enumerating the 2^|I0| candidate equality
//! patterns, plus a slow projected-gradient reference used for verification.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::market::{eval_empirical_objective, subgradient_matrix, MarketInstance};
use crate::solver::Mode;

const ENUMERATION_MAX: usize = 20;

/// Disjoint partition of buyers into strongly active (`beta* = 1`,
/// leftover > 0), degenerate (`beta* = 1`, leftover = 0), and paced sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveSets {
    n: usize,
    i_plus: Vec<usize>,
    i_zero: Vec<usize>,
    i_c: Vec<usize>,
}

impl ActiveSets {
    pub fn new(
        n: usize,
        mut i_plus: Vec<usize>,
        mut i_zero: Vec<usize>,
        mut i_c: Vec<usize>,
    ) -> Result<Self> {
        i_plus.sort_unstable();
        i_zero.sort_unstable();
        i_c.sort_unstable();
        let mut seen = vec![false; n];
        for &i in i_plus.iter().chain(&i_zero).chain(&i_c) {
            if i >= n || seen[i] {
                return Err(Error::Invalid(
                    "active sets must disjointly cover the buyers".into(),
                ));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Invalid(
                "active sets must disjointly cover the buyers".into(),
            ));
        }
        Ok(Self {
            n,
            i_plus,
            i_zero,
            i_c,
        })
    }

    /// All buyers paced (no active constraints).
    pub fn all_paced(n: usize) -> Self {
        Self {
            n,
            i_plus: Vec::new(),
            i_zero: Vec::new(),
            i_c: (0..n).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn i_plus(&self) -> &[usize] {
        &self.i_plus
    }
    pub fn i_zero(&self) -> &[usize] {
        &self.i_zero
    }
    pub fn i_c(&self) -> &[usize] {
        &self.i_c
    }
}

/// Everything needed to sample the limit distribution at a reference point.
#[derive(Debug, Clone)]
pub struct LimitModel {
    hessian: DMatrix<f64>,
    score_cov: DMatrix<f64>,
    active: ActiveSets,
    beta_ref: DVector<f64>,
}

impl LimitModel {
    /// Validates symmetry (1e-10), positive-definiteness of the Hessian, and
    /// positive semidefiniteness of the score covariance (1e-10 relative).
    pub fn new(
        hessian: DMatrix<f64>,
        score_cov: DMatrix<f64>,
        active: ActiveSets,
        beta_ref: DVector<f64>,
    ) -> Result<Self> {
        let n = active.n();
        if hessian.nrows() != n
            || hessian.ncols() != n
            || score_cov.nrows() != n
            || score_cov.ncols() != n
            || beta_ref.len() != n
        {
            return Err(Error::DimensionMismatch(
                "limit model pieces disagree on n".into(),
            ));
        }
        let hscale = hessian.amax().max(1.0);
        if (&hessian - hessian.transpose()).amax() > 1e-10 * hscale {
            return Err(Error::Invalid("hessian is not symmetric".into()));
        }
        let cscale = score_cov.amax().max(1.0);
        if (&score_cov - score_cov.transpose()).amax() > 1e-10 * cscale {
            return Err(Error::Invalid("score covariance is not symmetric".into()));
        }
        linalg::cholesky(&hessian)?;
        let min_eig = score_cov
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -1e-10 * cscale {
            return Err(Error::Invalid(format!(
                "score covariance has eigenvalue {min_eig:.3e} < 0"
            )));
        }
        Ok(Self {
            hessian,
            score_cov,
            active,
            beta_ref,
        })
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.hessian
    }
    pub fn score_cov(&self) -> &DMatrix<f64> {
        &self.score_cov
    }
    pub fn active(&self) -> &ActiveSets {
        &self.active
    }
    pub fn beta_ref(&self) -> &DVector<f64> {
        &self.beta_ref
    }

    pub fn to_json_string(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            hessian: Vec<Vec<f64>>,
            score_cov: Vec<Vec<f64>>,
            active: &'a ActiveSets,
            beta_ref: &'a [f64],
        }
        serde_json::to_string_pretty(&Doc {
            hessian: linalg::to_rows(&self.hessian),
            score_cov: linalg::to_rows(&self.score_cov),
            active: &self.active,
            beta_ref: self.beta_ref.as_slice(),
        })
        .expect("limit model serialization cannot fail")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            hessian: Vec<Vec<f64>>,
            score_cov: Vec<Vec<f64>>,
            active: ActiveSets,
            beta_ref: Vec<f64>,
        }
        let doc: Doc = serde_json::from_str(s)?;
        Self::new(
            linalg::from_rows(&doc.hessian)?,
            linalg::from_rows(&doc.score_cov)?,
            doc.active,
            DVector::from_vec(doc.beta_ref),
        )
    }
}

/// Four-point central-difference estimate of the Hessian of `f` at `beta`:
/// entry (k, l) differences `f` at `beta +- eta e_k +- eta e_l`, and the
/// result is symmetrized. Exact on quadratics.
pub fn estimate_hessian_of<F>(f: F, beta: &DVector<f64>, eta: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> f64 + Sync,
{
    let n = beta.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|k| (k..n).map(move |l| (k, l))).collect();
    let entries: Vec<((usize, usize), f64)> = pairs
        .par_iter()
        .map(|&(k, l)| {
            let at = |sk: f64, sl: f64| {
                let mut b = beta.clone();
                b[k] += sk * eta;
                b[l] += sl * eta;
                f(&b)
            };
            let v =
                (at(1.0, 1.0) - at(-1.0, 1.0) - at(1.0, -1.0) + at(-1.0, -1.0)) / (4.0 * eta * eta);
            ((k, l), v)
        })
        .collect();
    let mut h = DMatrix::zeros(n, n);
    for ((k, l), v) in entries {
        h[(k, l)] = v;
        h[(l, k)] = v;
    }
    h
}

/// Default differencing stepsize `t^{-1/6}`.
pub fn default_eta(t: usize) -> f64 {
    (t as f64).powf(-1.0 / 6.0)
}

/// Finite-difference Hessian of the sample dual objective at `beta`.
/// All stencil points must stay strictly positive.
pub fn estimate_hessian(
    market: &MarketInstance,
    beta: &DVector<f64>,
    eta: f64,
) -> Result<DMatrix<f64>> {
    if !(eta > 0.0) {
        return Err(Error::Invalid("eta must be positive".into()));
    }
    if beta.iter().any(|&b| b - 2.0 * eta <= 0.0) {
        return Err(Error::StencilOutOfDomain { eta });
    }
    let f = |b: &DVector<f64>| eval_empirical_objective(market, b).expect("stencil point valid");
    Ok(estimate_hessian_of(f, beta, eta))
}

/// Demeaned empirical covariance of the per-item subgradients at `beta`.
pub fn estimate_score_cov(market: &MarketInstance, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let d = subgradient_matrix(market, beta)?;
    let t = market.t() as f64;
    let mean = d.column_sum() / t;
    let mut cov = DMatrix::zeros(market.n(), market.n());
    for tau in 0..market.t() {
        let c = d.column(tau) - &mean;
        cov.syger(1.0 / t, &c, &c, 1.0);
    }
    Ok(linalg::sym_part(&cov))
}

/// Solve the limit projection program by enumerating equality patterns on
/// the degenerate set: for each subset `B` of `I0`, project `-H^{-1} xi`
/// onto `{h_i = 0, i in I+ union B}` in the `H`-norm (closed form via the
/// corresponding submatrix of `H^{-1}`), keep the feasible candidate with
/// the smallest projection cost, breaking numerical ties toward fewer
/// equalities.
pub fn solve_limit_qp(model: &LimitModel, xi: &DVector<f64>) -> Result<DVector<f64>> {
    let n = model.active.n();
    if xi.len() != n {
        return Err(Error::DimensionMismatch("xi length".into()));
    }
    let n0 = model.active.i_zero.len();
    if n0 > ENUMERATION_MAX {
        return Err(Error::EnumerationBudget {
            degenerate: n0,
            max: ENUMERATION_MAX,
        });
    }
    let chol = linalg::cholesky(&model.hessian)?;
    let k_inv = chol.inverse();
    let y = chol.solve(xi); // H^{-1} xi

    let mut best: Option<(f64, usize, DVector<f64>)> = None; // (Q, |B|, h)
    for mask in 0..(1usize << n0) {
        let mut s: Vec<usize> = model.active.i_plus.clone();
        for (bit, &i) in model.active.i_zero.iter().enumerate() {
            if mask & (1 << bit) != 0 {
                s.push(i);
            }
        }
        s.sort_unstable();
        let (q_val, h) = if s.is_empty() {
            (0.0, -&y)
        } else {
            let r = s.len();
            let m = DMatrix::from_fn(r, r, |a, b| k_inv[(s[a], s[b])]);
            let ys = DVector::from_fn(r, |a, _| y[s[a]]);
            let u = match linalg::cholesky(&m) {
                Ok(c) => c.solve(&ys),
                Err(_) => continue, // numerically singular pattern
            };
            let q_val = ys.dot(&u);
            // h = -(y - K[:, s] u)
            let mut h = -y.clone();
            for row in 0..n {
                let mut corr = 0.0;
                for (a, &j) in s.iter().enumerate() {
                    corr += k_inv[(row, j)] * u[a];
                }
                h[row] += corr;
            }
            for &i in &s {
                h[i] = 0.0;
            }
            (q_val, h)
        };
        let feas_tol = 1e-10 * (1.0 + h.amax());
        if model.active.i_zero.iter().any(|&i| h[i] > feas_tol) {
            continue;
        }
        let nb = mask.count_ones() as usize;
        let better = match &best {
            None => true,
            Some((bq, bn, _)) => q_val < bq - 1e-12 || ((q_val - bq).abs() <= 1e-12 && nb < *bn),
        };
        if better {
            best = Some((q_val, nb, h));
        }
    }
    best.map(|(_, _, h)| h).ok_or_else(|| {
        Error::Invalid("no feasible equality pattern (numerically singular model)".into())
    })
}

/// Slow reference solution of the same projection program: projected
/// gradient on the cone with fixed step `1/lambda_max(H)`, 1e5 iterations.
pub fn solve_limit_qp_oracle(model: &LimitModel, xi: &DVector<f64>) -> DVector<f64> {
    let n = model.active.n();
    let step = 1.0 / linalg::max_eigenvalue_sym(&model.hessian);
    let i_plus = model.active.i_plus.clone();
    let i_zero = model.active.i_zero.clone();
    let project = move |h: &mut DVector<f64>| {
        for &i in &i_plus {
            h[i] = 0.0;
        }
        for &i in &i_zero {
            h[i] = h[i].min(0.0);
        }
    };
    linalg::projected_gradient_qp(
        &model.hessian,
        xi,
        project,
        &DVector::zeros(n),
        step,
        100_000,
    )
}

/// Draw `m` samples of the limit distribution.
///
/// The Gaussian score uses a pivoted Cholesky factor of the (possibly
/// singular) score covariance. FPPE mode pushes each draw through the cone
/// projection; LFM mode returns `-H^{-1} G`.
pub fn sample_limit_distribution<R: Rng + ?Sized>(
    model: &LimitModel,
    m: usize,
    rng: &mut R,
    mode: Mode,
) -> Result<DMatrix<f64>> {
    let n = model.active.n();
    let factor = linalg::pivoted_cholesky(&model.score_cov, 1e-12);
    let rank = factor.ncols();
    let chol = linalg::cholesky(&model.hessian)?;
    let draws: Vec<DVector<f64>> = (0..m)
        .map(|_| {
            let z = DVector::from_fn(rank, |_, _| rng.sample::<f64, _>(StandardNormal));
            &factor * z
        })
        .collect();
    let rows: Vec<Result<DVector<f64>>> = draws
        .par_iter()
        .map(|g| match mode {
            Mode::Lfm => Ok(-chol.solve(g)),
            Mode::Fppe => solve_limit_qp(model, g),
        })
        .collect();
    let mut out = DMatrix::zeros(m, n);
    for (k, row) in rows.into_iter().enumerate() {
        out.set_row(k, &row?.transpose());
    }
    Ok(out)
}
