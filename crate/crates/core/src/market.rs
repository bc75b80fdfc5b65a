//! Finite markets and the per-item dual objective.
//!
//! A market holds `n` buyer budgets and a `t x n` matrix of item values. The
//! per-item dual objective is
//!
//! ```text
//!     F(theta, beta) = max_i beta_i v_i(theta) - sum_i b_i log beta_i
//! ```
//!
//! and the sample objective `H_t(beta)` averages `F` over the `t` observed
//! items. Both LFM and first-price pacing equilibria arise as minimizers of
//! `H_t` over different boxes; everything downstream (solver, bootstrap,
//! limit distributions) consumes these evaluations.

use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A finite market: `n` buyers with positive budgets, `t` items with
/// non-negative values. Immutable after construction; cheap to share.
///
/// Values are stored buyer-major per item: `values` is `n x t` with column
/// `tau` holding item `tau`'s value vector, which keeps the per-item scans
/// contiguous. The on-disk formats remain item-major (`t x n`).
#[derive(Debug, Clone, PartialEq)]
pub struct MarketInstance {
    n: usize,
    t: usize,
    budgets: DVector<f64>,
    values: DMatrix<f64>,
    vbar: f64,
}

impl MarketInstance {
    /// Build a market from budgets and an `n x t` value matrix
    /// (column `tau` = item `tau`).
    pub fn new(budgets: DVector<f64>, values: DMatrix<f64>) -> Result<Self> {
        let n = budgets.len();
        let t = values.ncols();
        if values.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "values have {} buyer rows, budgets have {}",
                values.nrows(),
                n
            )));
        }
        if n == 0 || t == 0 {
            return Err(Error::Invalid(
                "market needs at least one buyer and one item".into(),
            ));
        }
        if budgets.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
            return Err(Error::Invalid(
                "budgets must be finite and strictly positive".into(),
            ));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Invalid(
                "values must be finite and non-negative".into(),
            ));
        }
        for i in 0..n {
            if (0..t).all(|tau| values[(i, tau)] == 0.0) {
                return Err(Error::Invalid(format!(
                    "buyer {i} values no item; its multiplier is unidentified"
                )));
            }
        }
        let vbar = values.iter().cloned().fold(0.0f64, f64::max);
        Ok(Self {
            n,
            t,
            budgets,
            values,
            vbar,
        })
    }

    /// Item-major constructor (`t x n` rows of per-item values).
    pub fn from_item_rows(budgets: Vec<f64>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = budgets.len();
        let t = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::DimensionMismatch(
                "item rows must all have one value per buyer".into(),
            ));
        }
        let values = DMatrix::from_fn(n, t, |i, tau| rows[tau][i]);
        Self::new(DVector::from_vec(budgets), values)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn budgets(&self) -> &DVector<f64> {
        &self.budgets
    }

    /// Max value over all buyers and items.
    pub fn vbar(&self) -> f64 {
        self.vbar
    }

    /// Value vector of item `tau` (length n).
    pub fn item(&self, tau: usize) -> nalgebra::DVectorView<'_, f64> {
        self.values.column(tau)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Mean value per buyer, `(1/t) sum_tau v_i^tau`.
    pub fn mean_values(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.n);
        for tau in 0..self.t {
            m += self.item(tau);
        }
        m / self.t as f64
    }

    /// Same buyers/budgets, new sampled value columns.
    pub fn with_values(&self, values: DMatrix<f64>) -> Result<Self> {
        Self::new(self.budgets.clone(), values)
    }
}

fn check_beta(beta: &DVector<f64>) -> Result<()> {
    if beta.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
        return Err(Error::NonPositiveBeta);
    }
    Ok(())
}

/// Per-item dual objective `max_i beta_i v_i - sum_i b_i log beta_i`.
pub fn eval_item_objective(
    item_values: &DVector<f64>,
    beta: &DVector<f64>,
    budgets: &DVector<f64>,
) -> Result<f64> {
    check_beta(beta)?;
    let mut best = f64::NEG_INFINITY;
    for i in 0..beta.len() {
        best = best.max(beta[i] * item_values[i]);
    }
    let barrier: f64 = (0..beta.len()).map(|i| budgets[i] * beta[i].ln()).sum();
    Ok(best - barrier)
}

/// Sample dual objective `H_t(beta) = (1/t) sum_tau F(theta^tau, beta)`.
pub fn eval_empirical_objective(market: &MarketInstance, beta: &DVector<f64>) -> Result<f64> {
    check_beta(beta)?;
    Ok(eval_weighted_objective_unchecked(market, None, beta))
}

/// `(1/t) sum_tau w_tau F(theta^tau, beta)`; `weights = None` means all ones.
/// Callers validate `beta` beforehand.
pub(crate) fn eval_weighted_objective_unchecked(
    market: &MarketInstance,
    weights: Option<&DVector<f64>>,
    beta: &DVector<f64>,
) -> f64 {
    let n = market.n;
    let t = market.t;
    let mut max_part = 0.0f64;
    let mut wbar = 1.0f64;
    match weights {
        None => {
            for tau in 0..t {
                let col = market.values.column(tau);
                let mut best = f64::NEG_INFINITY;
                for i in 0..n {
                    best = best.max(beta[i] * col[i]);
                }
                max_part += best;
            }
        }
        Some(w) => {
            let mut wsum = 0.0;
            for tau in 0..t {
                let col = market.values.column(tau);
                let mut best = f64::NEG_INFINITY;
                for i in 0..n {
                    best = best.max(beta[i] * col[i]);
                }
                max_part += w[tau] * best;
                wsum += w[tau];
            }
            wbar = wsum / t as f64;
        }
    }
    let barrier: f64 = (0..n).map(|i| market.budgets[i] * beta[i].ln()).sum();
    max_part / t as f64 - wbar * barrier
}

/// Winning buyer of an item under multipliers `beta`: the smallest index
/// attaining `max_k beta_k v_k`.
pub(crate) fn winner(item_values: nalgebra::DVectorView<'_, f64>, beta: &DVector<f64>) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0usize;
    for i in 0..beta.len() {
        let bid = beta[i] * item_values[i];
        if bid > best {
            best = bid;
            arg = i;
        }
    }
    arg
}

/// Deterministic subgradient selection `D_F(theta, beta)`:
/// entry `i` is `v_i 1{i = i*} - b_i / beta_i` with `i*` the smallest
/// index attaining the maximum bid.
pub fn subgradient(
    item_values: &DVector<f64>,
    beta: &DVector<f64>,
    budgets: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_beta(beta)?;
    let win = winner(item_values.as_view(), beta);
    let mut g = DVector::from_fn(beta.len(), |i, _| -budgets[i] / beta[i]);
    g[win] += item_values[win];
    Ok(g)
}

/// `n x t` matrix whose column `tau` is `D_F(theta^tau, beta)`.
pub fn subgradient_matrix(market: &MarketInstance, beta: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_beta(beta)?;
    let n = market.n;
    let mut d = DMatrix::zeros(n, market.t);
    for tau in 0..market.t {
        let col = market.values.column(tau);
        let win = winner(col, beta);
        for i in 0..n {
            d[(i, tau)] = -market.budgets[i] / beta[i];
        }
        d[(win, tau)] += col[win];
    }
    Ok(d)
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct MarketJson {
    n: usize,
    t: usize,
    budgets: Vec<f64>,
    values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarketFormat {
    Csv,
    Json,
}

impl fmt::Display for MarketFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MarketFormat::Csv => write!(f, "csv"),
            MarketFormat::Json => write!(f, "json"),
        }
    }
}

impl MarketInstance {
    pub fn to_json_string(&self) -> String {
        let doc = MarketJson {
            n: self.n,
            t: self.t,
            budgets: self.budgets.iter().cloned().collect(),
            values: (0..self.t)
                .map(|tau| self.values.column(tau).iter().cloned().collect())
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("market serialization cannot fail")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let doc: MarketJson = serde_json::from_str(s)?;
        if doc.budgets.len() != doc.n || doc.values.len() != doc.t {
            return Err(Error::DimensionMismatch(
                "declared n/t do not match budgets/values".into(),
            ));
        }
        Self::from_item_rows(doc.budgets, doc.values)
    }

    /// CSV layout: header `budgets,b_1,...,b_n`, then one line of `n`
    /// values per item.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("budgets");
        for b in self.budgets.iter() {
            out.push(',');
            out.push_str(&format!("{b}"));
        }
        out.push('\n');
        for tau in 0..self.t {
            let col = self.values.column(tau);
            for (i, v) in col.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&format!("{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv_str(s: &str) -> Result<Self> {
        let mut lines = s.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::Parse {
            line: 1,
            col: 1,
            msg: "empty file".into(),
        })?;
        let mut cells = header.split(',');
        match cells.next() {
            Some(tag) if tag.trim() == "budgets" => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    col: 1,
                    msg: "expected header starting with 'budgets'".into(),
                })
            }
        }
        let mut budgets = Vec::new();
        for (col, cell) in cells.enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line: 1,
                col: col + 2,
                msg: format!("bad budget '{}'", cell.trim()),
            })?;
            budgets.push(v);
        }
        let n = budgets.len();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut row = Vec::with_capacity(n);
            for (col, cell) in line.split(',').enumerate() {
                let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                    line: idx + 1,
                    col: col + 1,
                    msg: format!("bad value '{}'", cell.trim()),
                })?;
                row.push(v);
            }
            if row.len() != n {
                return Err(Error::Parse {
                    line: idx + 1,
                    col: row.len().min(n) + 1,
                    msg: format!("expected {} values, found {}", n, row.len()),
                });
            }
            rows.push(row);
        }
        Self::from_item_rows(budgets, rows)
    }
}

/// Read a market from disk in the given format.
pub fn load_market(path: &Path, format: MarketFormat) -> Result<MarketInstance> {
    let body = fs::read_to_string(path)?;
    match format {
        MarketFormat::Json => MarketInstance::from_json_str(&body),
        MarketFormat::Csv => MarketInstance::from_csv_str(&body),
    }
}

/// Write a market to disk in the given format.
pub fn save_market(market: &MarketInstance, path: &Path, format: MarketFormat) -> Result<()> {
    let body = match format {
        MarketFormat::Json => market.to_json_string(),
        MarketFormat::Csv => market.to_csv_string(),
    };
    fs::write(path, body)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn vec(v: &[f64]) -> DVector<f64> {
        DVector::from_vec(v.to_vec())
    }

    #[test]
    fn item_objective_examples() {
        let f = eval_item_objective(&vec(&[1.0]), &vec(&[1.0]), &vec(&[1.0])).unwrap();
        assert_relative_eq!(f, 1.0, epsilon = 1e-15);

        let f = eval_item_objective(&vec(&[2.0]), &vec(&[0.5]), &vec(&[1.0])).unwrap();
        assert_relative_eq!(f, 1.0 + std::f64::consts::LN_2, epsilon = 1e-12);

        let f =
            eval_item_objective(&vec(&[1.0, 3.0]), &vec(&[1.0, 0.5]), &vec(&[1.0, 1.0])).unwrap();
        assert_relative_eq!(f, 1.5 + std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn item_objective_rejects_nonpositive_beta() {
        let e = eval_item_objective(&vec(&[1.0]), &vec(&[0.0]), &vec(&[1.0]));
        assert!(matches!(e, Err(Error::NonPositiveBeta)));
        let e = eval_item_objective(&vec(&[1.0]), &vec(&[-0.3]), &vec(&[1.0]));
        assert!(matches!(e, Err(Error::NonPositiveBeta)));
    }

    #[test]
    fn empirical_objective_examples() {
        let m = MarketInstance::from_item_rows(vec![1.0], vec![vec![1.0]]).unwrap();
        assert_relative_eq!(
            eval_empirical_objective(&m, &vec(&[1.0])).unwrap(),
            1.0,
            epsilon = 1e-15
        );

        let m = MarketInstance::from_item_rows(vec![1.0], vec![vec![1.0], vec![3.0]]).unwrap();
        assert_relative_eq!(
            eval_empirical_objective(&m, &vec(&[0.5])).unwrap(),
            1.0 + std::f64::consts::LN_2,
            epsilon = 1e-12
        );
    }

    #[test]
    fn subgradient_examples() {
        let g = subgradient(&vec(&[1.0]), &vec(&[1.0]), &vec(&[1.0])).unwrap();
        assert_eq!(g, vec(&[0.0]));

        // tie resolved to buyer 1 (lowest index)
        let g = subgradient(&vec(&[1.0, 1.0]), &vec(&[1.0, 1.0]), &vec(&[1.0, 1.0])).unwrap();
        assert_eq!(g, vec(&[0.0, -1.0]));

        let g = subgradient(&vec(&[1.0, 3.0]), &vec(&[1.0, 0.5]), &vec(&[2.0, 1.0])).unwrap();
        assert_eq!(g, vec(&[-2.0, 1.0]));
    }

    fn random_market(n: usize, t: usize, seed: u64) -> MarketInstance {
        let mut r = rng::stream(seed, 0);
        let values = DMatrix::from_fn(n, t, |_, _| r.random::<f64>());
        let budgets = DVector::from_fn(n, |_, _| 0.2 + r.random::<f64>());
        MarketInstance::new(budgets, values).unwrap()
    }

    #[test]
    fn convexity_probe() {
        let m = random_market(4, 60, 11);
        let mut r = rng::stream(11, 1);
        for _ in 0..200 {
            let b1 = DVector::from_fn(4, |_, _| 0.05 + r.random::<f64>());
            let b2 = DVector::from_fn(4, |_, _| 0.05 + r.random::<f64>());
            let lam: f64 = r.random();
            let mix = &b1 * lam + &b2 * (1.0 - lam);
            let lhs = eval_empirical_objective(&m, &mix).unwrap();
            let rhs = lam * eval_empirical_objective(&m, &b1).unwrap()
                + (1.0 - lam) * eval_empirical_objective(&m, &b2).unwrap();
            assert!(lhs <= rhs + 1e-12, "convexity violated: {lhs} > {rhs}");
        }
    }

    #[test]
    fn subgradient_inequality() {
        let m = random_market(3, 40, 12);
        let mut r = rng::stream(12, 1);
        for _ in 0..200 {
            let beta = DVector::from_fn(3, |_, _| 0.05 + r.random::<f64>());
            let beta2 = DVector::from_fn(3, |_, _| 0.05 + r.random::<f64>());
            for tau in 0..m.t() {
                let iv = m.item(tau).into_owned();
                let f1 = eval_item_objective(&iv, &beta, m.budgets()).unwrap();
                let f2 = eval_item_objective(&iv, &beta2, m.budgets()).unwrap();
                let g = subgradient(&iv, &beta, m.budgets()).unwrap();
                let lin = g.dot(&(&beta2 - &beta));
                assert!(f2 >= f1 + lin - 1e-10, "subgradient inequality violated");
            }
        }
    }

    #[test]
    fn objective_invariant_to_item_permutation() {
        let m = random_market(3, 50, 13);
        let beta = vec(&[0.7, 0.4, 0.9]);
        let h = eval_empirical_objective(&m, &beta).unwrap();
        // rotate items
        let rows: Vec<Vec<f64>> = (0..m.t())
            .map(|tau| m.item((tau + 17) % m.t()).iter().cloned().collect())
            .collect();
        let m2 =
            MarketInstance::from_item_rows(m.budgets().iter().cloned().collect(), rows).unwrap();
        let h2 = eval_empirical_objective(&m2, &beta).unwrap();
        assert_relative_eq!(h, h2, epsilon = 1e-12);
    }

    #[test]
    fn validation_catches_bad_inputs() {
        // buyer with no positive value
        let e = MarketInstance::from_item_rows(vec![1.0, 1.0], vec![vec![1.0, 0.0]]);
        assert!(e.is_err());
        // non-positive budget
        let e = MarketInstance::from_item_rows(vec![0.0], vec![vec![1.0]]);
        assert!(e.is_err());
        // vbar is the max entry
        let m = MarketInstance::from_item_rows(vec![1.0, 1.0], vec![vec![0.3, 2.5]]).unwrap();
        assert_eq!(m.vbar(), 2.5);
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let m = random_market(3, 20, 14);
        let s = m.to_json_string();
        let back = MarketInstance::from_json_str(&s).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn csv_roundtrip_and_errors() {
        let m = random_market(2, 2, 15);
        let s = m.to_csv_string();
        let back = MarketInstance::from_csv_str(&s).unwrap();
        assert_eq!(m, back);

        let ragged = "budgets,1.0,2.0\n0.5,0.25\n0.5\n";
        match MarketInstance::from_csv_str(ragged) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }

        let two_by_two = "budgets,1.0,2.0\n0.5,0.25\n0.1,0.9\n";
        let m = MarketInstance::from_csv_str(two_by_two).unwrap();
        assert_eq!((m.n(), m.t()), (2, 2));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = random_market(3, 7, 16);
        for fmt in [MarketFormat::Json, MarketFormat::Csv] {
            let p = dir.path().join(format!("m.{fmt}"));
            save_market(&m, &p, fmt).unwrap();
            let back = load_market(&p, fmt).unwrap();
            assert_eq!(m, back, "round trip in {fmt}");
        }
    }
}
