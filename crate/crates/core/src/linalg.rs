//! Dense linear-algebra kernels for small (n <= ~50) symmetric systems:
//! SPD solves, a rank-revealing pivoted Cholesky for PSD covariance factors,
//! and a primal active-set solver for box-constrained convex QPs.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Symmetrize as (M + M')/2.
pub fn sym_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Cholesky factorization, mapping failure to `NotPd`.
pub fn cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or(Error::NotPd)
}

/// Solve `M x = rhs` for symmetric positive-definite `M`.
pub fn solve_spd(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(cholesky(m)?.solve(rhs))
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eigenvalue_sym(m: &DMatrix<f64>) -> f64 {
    m.symmetric_eigenvalues()
        .iter()
        .cloned()
        .fold(f64::MIN, f64::max)
}

/// Rank-revealing pivoted Cholesky of a PSD matrix.
///
/// Returns an n x r factor `L` (rows in original order) with `L L' ~ A`,
/// stopping when the largest remaining diagonal falls below
/// `rel_tol * max(diag A)`.
pub fn pivoted_cholesky(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut d: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    let scale = d.iter().cloned().fold(0.0f64, f64::max).max(0.0);
    let threshold = rel_tol * scale.max(f64::MIN_POSITIVE);
    let mut l = DMatrix::<f64>::zeros(n, n);
    let mut chosen = vec![false; n];
    let mut rank = 0usize;
    for k in 0..n {
        let mut piv = usize::MAX;
        let mut best = threshold;
        for j in 0..n {
            if !chosen[j] && d[j] > best {
                best = d[j];
                piv = j;
            }
        }
        if piv == usize::MAX {
            break;
        }
        let s = d[piv].sqrt();
        for i in 0..n {
            if chosen[i] {
                continue;
            }
            let mut v = a[(i, piv)];
            for m in 0..k {
                v -= l[(i, m)] * l[(piv, m)];
            }
            l[(i, k)] = v / s;
        }
        l[(piv, k)] = s;
        chosen[piv] = true;
        for i in 0..n {
            if !chosen[i] {
                d[i] -= l[(i, k)] * l[(i, k)];
            }
        }
        rank = k + 1;
    }
    l.columns(0, rank).into_owned()
}

/// Projected-gradient minimization of `0.5 x'Qx + c'x` over a closed convex
/// set given by `project` (applied in place). Fixed step; the caller supplies
/// `step <= 1/lambda_max(Q)`.
pub fn projected_gradient_qp<P: Fn(&mut DVector<f64>)>(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    project: P,
    x0: &DVector<f64>,
    step: f64,
    iters: usize,
) -> DVector<f64> {
    let mut x = x0.clone();
    project(&mut x);
    for _ in 0..iters {
        let grad = q * &x + c;
        x.axpy(-step, &grad, 1.0);
        project(&mut x);
    }
    x
}

/// Minimize `0.5 x'Qx + c'x` subject to `lo <= x <= up` for symmetric
/// positive-definite `Q` by a primal active-set method with Cholesky
/// sub-solves. Coordinates with `lo[i] == up[i]` stay pinned. Bounds may be
/// infinite. Falls back to projected gradient if the active-set loop fails
/// to terminate.
pub fn box_qp(
    q: &DMatrix<f64>,
    c: &DVector<f64>,
    lo: &DVector<f64>,
    up: &DVector<f64>,
    x0: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = q.nrows();
    assert_eq!(q.ncols(), n);
    assert_eq!(c.len(), n);
    assert_eq!(lo.len(), n);
    assert_eq!(up.len(), n);

    #[derive(Clone, Copy, PartialEq)]
    enum St {
        Free,
        Lower,
        Upper,
        Pinned,
    }

    let mut x = x0.clone();
    let mut st = vec![St::Free; n];
    for i in 0..n {
        debug_assert!(lo[i] <= up[i]);
        if lo[i] == up[i] {
            x[i] = lo[i];
            st[i] = St::Pinned;
        } else if x[i] <= lo[i] {
            x[i] = lo[i];
            st[i] = St::Lower;
        } else if x[i] >= up[i] {
            x[i] = up[i];
            st[i] = St::Upper;
        }
    }

    let scale = 1.0 + c.amax() + q.amax();
    let kkt_tol = 1e-11 * scale;
    let max_iter = (5 * n).max(30);

    for _ in 0..max_iter {
        let free: Vec<usize> = (0..n).filter(|&i| st[i] == St::Free).collect();
        let mut target = x.clone();
        if !free.is_empty() {
            let nf = free.len();
            let mut qff = DMatrix::<f64>::zeros(nf, nf);
            let mut rhs = DVector::<f64>::zeros(nf);
            for (a, &i) in free.iter().enumerate() {
                for (b, &j) in free.iter().enumerate() {
                    qff[(a, b)] = q[(i, j)];
                }
                let mut v = c[i];
                for j in 0..n {
                    if st[j] != St::Free {
                        v += q[(i, j)] * x[j];
                    }
                }
                rhs[a] = -v;
            }
            let sol = cholesky(&qff)?.solve(&rhs);
            for (a, &i) in free.iter().enumerate() {
                target[i] = sol[a];
            }
        }

        let p = &target - &x;
        if p.amax() <= 1e-13 * (1.0 + x.amax()) {
            // At the equality-constrained optimum for this working set; check
            // bound multipliers and release the worst violator if any.
            let g = q * &x + c;
            let mut worst = kkt_tol;
            let mut worst_i = usize::MAX;
            for i in 0..n {
                let viol = match st[i] {
                    St::Lower => -g[i],
                    St::Upper => g[i],
                    _ => continue,
                };
                if viol > worst {
                    worst = viol;
                    worst_i = i;
                }
            }
            if worst_i == usize::MAX {
                return Ok(x);
            }
            st[worst_i] = St::Free;
            continue;
        }

        // Step toward the sub-solve target, stopping at the first blocking bound.
        let mut alpha = 1.0f64;
        let mut blocker: Option<(usize, St)> = None;
        for &i in &free {
            if p[i] > 0.0 && up[i].is_finite() {
                let a = (up[i] - x[i]) / p[i];
                if a < alpha {
                    alpha = a;
                    blocker = Some((i, St::Upper));
                }
            } else if p[i] < 0.0 && lo[i].is_finite() {
                let a = (lo[i] - x[i]) / p[i];
                if a < alpha {
                    alpha = a;
                    blocker = Some((i, St::Lower));
                }
            }
        }
        x.axpy(alpha, &p, 1.0);
        if let Some((i, side)) = blocker {
            x[i] = if side == St::Upper { up[i] } else { lo[i] };
            st[i] = side;
        }
        // keep strictly inside bounds against rounding
        for &i in &free {
            if st[i] == St::Free {
                x[i] = x[i].max(lo[i]).min(up[i]);
            }
        }
    }

    // Rare cycling fallback: projected gradient is slow but safe.
    let step = 1.0 / max_eigenvalue_sym(q).max(f64::MIN_POSITIVE);
    let lo_c = lo.clone();
    let up_c = up.clone();
    Ok(projected_gradient_qp(
        q,
        c,
        move |v: &mut DVector<f64>| {
            for i in 0..v.len() {
                v[i] = v[i].max(lo_c[i]).min(up_c[i]);
            }
        },
        &x,
        step,
        200_000,
    ))
}

/// Matrix -> row-major nested vectors (for JSON emission).
pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Row-major nested vectors -> matrix. Errors on ragged input.
pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != nc) {
        return Err(Error::DimensionMismatch("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_spd(n: usize, rng: &mut rng::StreamRng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        sym_part(&(&a * a.transpose())) + DMatrix::identity(n, n) * 0.3
    }

    #[test]
    fn spd_solve_roundtrip() {
        let mut r = rng::stream(1, 0);
        let m = random_spd(6, &mut r);
        let x = DVector::from_fn(6, |i, _| (i as f64 + 1.0) / 3.0);
        let b = &m * &x;
        let sol = solve_spd(&m, &b).unwrap();
        assert!((sol - x).amax() < 1e-10);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(cholesky(&m), Err(Error::NotPd)));
    }

    #[test]
    fn pivoted_cholesky_reconstructs_low_rank() {
        let mut r = rng::stream(2, 0);
        let b = DMatrix::from_fn(6, 3, |_, _| r.random::<f64>() - 0.5);
        let a = &b * b.transpose();
        let l = pivoted_cholesky(&a, 1e-12);
        assert!(l.ncols() <= 3);
        assert!((&l * l.transpose() - &a).amax() < 1e-10);
    }

    #[test]
    fn pivoted_cholesky_zero_matrix() {
        let a = DMatrix::<f64>::zeros(4, 4);
        let l = pivoted_cholesky(&a, 1e-12);
        assert_eq!(l.ncols(), 0);
    }

    #[test]
    fn box_qp_matches_projected_gradient() {
        let mut r = rng::stream(3, 0);
        for trial in 0..200 {
            let n = 1 + (trial % 6);
            let q = random_spd(n, &mut r);
            let c = DVector::from_fn(n, |_, _| 2.0 * (r.random::<f64>() - 0.5));
            let lo = DVector::from_fn(n, |_, _| {
                if r.random::<f64>() < 0.3 {
                    f64::NEG_INFINITY
                } else {
                    -r.random::<f64>()
                }
            });
            let up = DVector::from_fn(n, |i, _| {
                let base = if lo[i].is_finite() { lo[i] } else { -1.0 };
                if r.random::<f64>() < 0.3 {
                    f64::INFINITY
                } else {
                    base + 0.1 + r.random::<f64>()
                }
            });
            let x0 = DVector::zeros(n);
            let x = box_qp(&q, &c, &lo, &up, &x0).unwrap();
            let step = 0.9 / max_eigenvalue_sym(&q);
            let lo2 = lo.clone();
            let up2 = up.clone();
            let y = projected_gradient_qp(
                &q,
                &c,
                move |v: &mut DVector<f64>| {
                    for i in 0..v.len() {
                        v[i] = v[i].max(lo2[i]).min(up2[i]);
                    }
                },
                &x0,
                step,
                60_000,
            );
            assert!(
                (&x - &y).amax() < 1e-6,
                "trial {trial}: active-set {x:?} vs pg {y:?}"
            );
            for i in 0..n {
                assert!(x[i] >= lo[i] - 1e-12 && x[i] <= up[i] + 1e-12);
            }
        }
    }

    #[test]
    fn box_qp_respects_pinned_coordinates() {
        let q = DMatrix::identity(3, 3);
        let c = DVector::from_vec(vec![1.0, -5.0, 0.3]);
        let lo = DVector::from_vec(vec![0.25, -1.0, f64::NEG_INFINITY]);
        let up = DVector::from_vec(vec![0.25, 1.0, f64::INFINITY]);
        let x = box_qp(&q, &c, &lo, &up, &DVector::zeros(3)).unwrap();
        assert_eq!(x[0], 0.25);
        assert_eq!(x[1], 1.0);
        assert!((x[2] + 0.3).abs() < 1e-12);
    }

    #[test]
    fn rows_roundtrip() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let rows = to_rows(&m);
        let back = from_rows(&rows).unwrap();
        assert_eq!(m, back);
        assert!(from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
