//! Minimization of the sample dual objective over the pacing box.
//!
//! `H_t` is strictly convex (the log barrier has Hessian `diag(b_i/beta_i^2)`)
//! and piecewise smooth: kinks occur only where two buyers tie on an item.
//! The solver runs a damped winner-assignment fixed point — given the current
//! winner of every item, the coordinatewise minimizer is
//! `clamp(b_i / won_value_mass_i)` — with a descent line search on `H_t`, and
//! falls back to projected subgradient steps when the fixed-point direction
//! stalls. Convergence is certified on the minimal-norm projected subgradient:
//! tied items may split their mass among tied buyers, and we search that
//! (tiny) simplex-product for the split that best satisfies stationarity.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::Serialize;

use crate::asymptotics::ActiveSets;
use crate::error::{Error, Result};
use crate::market::{eval_weighted_objective_unchecked, MarketInstance};

/// Which box the dual objective is minimized over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Utility prices over the positive orthant (budgets always exhausted).
    Lfm,
    /// Pacing multipliers over `(0, 1]^n`.
    Fppe,
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Optimality-gap target: the solve certifies a minimal-norm projected
    /// subgradient below `tol * (1 + ||b||_1)`.
    pub tol: f64,
    /// Outer iteration cap (each outer round is O(t n)).
    pub max_iters: usize,
    /// Bids within `tie_rel * vbar` of an item's best bid count as tied.
    pub tie_rel: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: 300,
            tie_rel: 1e-9,
        }
    }
}

/// Threshold `delta_t = 1/sqrt(t)` used to classify nearly-unpaced buyers.
pub fn default_delta_t(t: usize) -> f64 {
    1.0 / (t as f64).sqrt()
}

/// A solved equilibrium.
#[derive(Debug, Clone)]
pub struct EquilibriumResult {
    pub beta: DVector<f64>,
    /// Leftover budgets `delta_i = b_i - pay_i` (identically zero in LFM).
    pub delta: DVector<f64>,
    /// Per-buyer spend in budget units.
    pub pay: DVector<f64>,
    /// `u_i = b_i / beta_i`.
    pub utilities: DVector<f64>,
    /// `(1/t) sum_tau max_i beta_i v_i^tau`.
    pub revenue: f64,
    /// Objective value at `beta`.
    pub objective: f64,
    pub mode: Mode,
    pub iterations: usize,
    /// Final stationarity residual divided by `1 + ||b||_1`. A successful
    /// solve certifies an objective gap of at most `tol`, either through
    /// this residual directly or through the strong-convexity bound
    /// `residual^2 / (2 m) <= tol`.
    pub gap: f64,
}

#[derive(Serialize)]
struct ResultJson<'a> {
    beta: &'a [f64],
    delta: &'a [f64],
    pay: &'a [f64],
    revenue: f64,
    objective: f64,
    iterations: usize,
    gap: f64,
}

impl EquilibriumResult {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&ResultJson {
            beta: self.beta.as_slice(),
            delta: self.delta.as_slice(),
            pay: self.pay.as_slice(),
            revenue: self.revenue,
            objective: self.objective,
            iterations: self.iterations,
            gap: self.gap,
        })
        .expect("result serialization cannot fail")
    }
}

/// Solve the LFM dual program over the positive orthant.
pub fn solve_lfm(market: &MarketInstance, config: &SolverConfig) -> Result<EquilibriumResult> {
    solve_weighted(market, None, Mode::Lfm, config, None)
}

/// Solve the FPPE dual program over `(0, 1]^n`.
pub fn solve_fppe(market: &MarketInstance, config: &SolverConfig) -> Result<EquilibriumResult> {
    solve_weighted(market, None, Mode::Fppe, config, None)
}

/// Box for the solve. The floor never truncates the optimum: utilities are
/// bounded by `vbar` under unit supply, so `beta_i = b_i/u_i >= b_i/vbar`.
/// The LFM ceiling uses the proportional-share utility bound
/// `u_i >= (b_i / sum b) * mean_i v` computed with the solve's item weights,
/// padded so that the optimum stays strictly inside.
fn solve_box(market: &MarketInstance, weights: Option<&DVector<f64>>, mode: Mode) -> (f64, f64) {
    let b = market.budgets();
    let bsum: f64 = b.iter().sum();
    let bmin = b.iter().cloned().fold(f64::INFINITY, f64::min);
    let floor = bmin / (market.vbar() + bsum);
    let hi = match mode {
        Mode::Fppe => 1.0,
        Mode::Lfm => {
            let n = market.n();
            let t = market.t();
            let mut means = DVector::<f64>::zeros(n);
            for tau in 0..t {
                let w = weights.map_or(1.0, |w| w[tau]);
                means.axpy(w / t as f64, &market.values().column(tau), 1.0);
            }
            let mmin = means.iter().cloned().fold(f64::INFINITY, f64::min);
            if mmin > 0.0 {
                (4.0 * bsum / mmin).max(1.0)
            } else {
                // degenerate weighting; fall back to a generous cap
                (1e6 * bsum / market.vbar()).max(1.0)
            }
        }
    };
    (floor, hi)
}

/// Winner-split stationarity certificate at `beta`.
struct Certificate {
    /// Aggregate gradient of the weighted objective under the best tie split.
    grad: DVector<f64>,
    /// Max KKT violation in gradient units (absolute), including the bid
    /// slack charged for any near-tie widening.
    residual: f64,
}

/// Relative tie widths tried by the certificate, narrowest first. An item's
/// runner-up bids within `width * vbar` of its best bid may take a share of
/// the item; the certified residual is charged the bid slack this introduces,
/// so widening never fakes optimality. Wider widths expose the smooth
/// structure when the optimum sits on (or the iterate hovers near) a tie.
const TIE_WIDTH_LADDER: [f64; 6] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

fn certificate(
    market: &MarketInstance,
    weights: Option<&DVector<f64>>,
    beta: &DVector<f64>,
    mode: Mode,
    tie_rel: f64,
) -> Certificate {
    let n = market.n();
    let t = market.t();
    let vbar = market.vbar();
    let wbar = weights.map_or(1.0, |w| w.iter().sum::<f64>() / t as f64);
    let widest = TIE_WIDTH_LADDER[TIE_WIDTH_LADDER.len() - 1].max(tie_rel) * vbar;

    // One pass: value mass won outright at the widest width, plus the
    // near-tied items with their contenders and bid margins.
    struct NearItem {
        weight: f64,
        best: f64,
        contenders: Vec<(usize, f64)>, // (buyer, margin = best - bid)
    }
    let mut forced_base = DVector::<f64>::zeros(n);
    let mut near: Vec<NearItem> = Vec::new();
    for tau in 0..t {
        let col = market.values().column(tau);
        let w = weights.map_or(1.0, |w| w[tau]);
        let mut best = f64::NEG_INFINITY;
        for i in 0..n {
            best = best.max(beta[i] * col[i]);
        }
        if best <= 0.0 {
            continue;
        }
        let contenders: Vec<(usize, f64)> = (0..n)
            .filter_map(|i| {
                let margin = best - beta[i] * col[i];
                (margin <= widest).then_some((i, margin))
            })
            .collect();
        if contenders.len() == 1 {
            forced_base[contenders[0].0] += w * col[contenders[0].0] / t as f64;
        } else {
            near.push(NearItem {
                weight: w,
                best,
                contenders,
            });
        }
    }

    // Buyers at the true upper bound (FPPE only) get one-sided stationarity.
    let at_one: Vec<bool> = (0..n)
        .map(|i| mode == Mode::Fppe && beta[i] >= 1.0 - 1e-9)
        .collect();
    let beta_min = beta.min();

    let mut best_cert: Option<Certificate> = None;
    for &width in &TIE_WIDTH_LADDER {
        let width_abs = width.max(tie_rel) * vbar;
        let mut forced = forced_base.clone();
        let mut groups: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
        let mut slack = 0.0f64;
        for item in &near {
            let tied: Vec<usize> = item
                .contenders
                .iter()
                .filter(|(_, m)| *m <= width_abs)
                .map(|(i, _)| *i)
                .collect();
            if tied.len() <= 1 {
                // winner has margin zero by construction
                let win = item
                    .contenders
                    .iter()
                    .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
                let win = win.expect("non-empty contender list").0;
                let v = item.best / beta[win];
                forced[win] += item.weight * v / t as f64;
            } else {
                let max_margin = item
                    .contenders
                    .iter()
                    .filter(|(_, m)| *m <= width_abs)
                    .map(|(_, m)| *m)
                    .fold(0.0f64, f64::max);
                slack += item.weight.abs() * max_margin / t as f64;
                *groups.entry(tied).or_insert(0.0) += item.weight * item.best / t as f64;
            }
        }
        let r: Vec<f64> = (0..n)
            .map(|i| wbar * market.budgets()[i] - beta[i] * forced[i])
            .collect();
        let group_list: Vec<(&Vec<usize>, f64)> = groups.iter().map(|(k, &m)| (k, m)).collect();
        let intake = if group_list.is_empty() {
            vec![0.0; n]
        } else {
            split_tied_mass(&group_list, &r, &at_one, beta)
        };
        let mut grad = DVector::<f64>::zeros(n);
        let mut residual = slack / beta_min;
        for i in 0..n {
            let g = forced[i] + intake[i] / beta[i] - wbar * market.budgets()[i] / beta[i];
            grad[i] = g;
            let viol = if at_one[i] { g.max(0.0) } else { g.abs() };
            residual = residual.max(viol + slack / beta_min);
        }
        if best_cert.as_ref().is_none_or(|c| residual < c.residual) {
            best_cert = Some(Certificate { grad, residual });
        }
        if near.is_empty() {
            break; // widening cannot change anything
        }
    }
    best_cert.expect("ladder is non-empty")
}

/// Buyer blocks that are near-tied on some item at the given absolute bid
/// width: multi-contender item groups merged into disjoint blocks, padded
/// with singletons.
fn near_tie_blocks(
    market: &MarketInstance,
    beta: &DVector<f64>,
    width_abs: f64,
) -> Vec<Vec<usize>> {
    let n = market.n();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for tau in 0..market.t() {
        let col = market.values().column(tau);
        let mut best = f64::NEG_INFINITY;
        for i in 0..n {
            best = best.max(beta[i] * col[i]);
        }
        if best <= 0.0 {
            continue;
        }
        let tied: Vec<usize> = (0..n)
            .filter(|&i| best - beta[i] * col[i] <= width_abs)
            .collect();
        if tied.len() > 1 {
            groups.push(tied);
        }
    }
    merge_groups(n, &groups)
}

/// Merge overlapping buyer groups into disjoint blocks and pad with
/// singletons, so the whole buyer set is partitioned.
fn merge_groups(n: usize, groups: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, i: usize) -> usize {
        if parent[i] != i {
            let root = find(parent, parent[i]);
            parent[i] = root;
        }
        parent[i]
    }
    for g in groups {
        for w in g.windows(2) {
            let (a, b) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
            if a != b {
                parent[a] = b;
            }
        }
    }
    let mut blocks: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        blocks.entry(root).or_default().push(i);
    }
    blocks.into_values().collect()
}

/// Distribute tied price mass among tied buyers to best satisfy
/// stationarity: minimize a convex penalty on the per-buyer intake residuals
/// over the product of group simplices by projected gradient with
/// backtracking.
fn split_tied_mass(
    groups: &[(&Vec<usize>, f64)],
    r: &[f64],
    at_bound: &[bool],
    beta: &DVector<f64>,
) -> Vec<f64> {
    let n = r.len();
    let scale: Vec<f64> = (0..n).map(|i| 1.0 / beta[i]).collect();
    // z[g] lives on the simplex of group g's members.
    let mut z: Vec<Vec<f64>> = groups
        .iter()
        .map(|(members, _)| vec![1.0 / members.len() as f64; members.len()])
        .collect();

    let intake_of = |z: &[Vec<f64>]| -> Vec<f64> {
        let mut t_ = vec![0.0; n];
        for ((members, mass), zg) in groups.iter().zip(z) {
            for (k, &i) in members.iter().enumerate() {
                t_[i] += mass * zg[k];
            }
        }
        t_
    };
    let penalty = |intake: &[f64]| -> f64 {
        let mut p = 0.0;
        for i in 0..n {
            let d = (intake[i] - r[i]) * scale[i];
            let d = if at_bound[i] { d.max(0.0) } else { d };
            p += 0.5 * d * d;
        }
        p
    };

    let mut cur = penalty(&intake_of(&z));
    let mut step = 1.0f64;
    for _ in 0..3000 {
        if cur <= 1e-26 {
            break;
        }
        let intake = intake_of(&z);
        // gradient wrt z[g][k]
        let mut gz: Vec<Vec<f64>> = Vec::with_capacity(groups.len());
        for ((members, mass), _) in groups.iter().zip(&z) {
            let mut gg = Vec::with_capacity(members.len());
            for &i in members.iter() {
                let d = (intake[i] - r[i]) * scale[i];
                let d = if at_bound[i] { d.max(0.0) } else { d };
                gg.push(mass * scale[i] * d);
            }
            gz.push(gg);
        }
        let mut accepted = false;
        for _ in 0..80 {
            let mut cand: Vec<Vec<f64>> = z
                .iter()
                .zip(&gz)
                .map(|(zg, gg)| {
                    let moved: Vec<f64> = zg.iter().zip(gg).map(|(v, g)| v - step * g).collect();
                    project_simplex(&moved)
                })
                .collect();
            let val = penalty(&intake_of(&cand));
            if val < cur - 1e-30 {
                std::mem::swap(&mut z, &mut cand);
                cur = val;
                step = (step * 1.3).min(1e6);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    intake_of(&z)
}

/// Euclidean projection onto the probability simplex.
fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut css = 0.0;
    let mut theta = 0.0;
    for (k, &uk) in u.iter().enumerate() {
        css += uk;
        let cand = (css - 1.0) / (k as f64 + 1.0);
        if uk - cand > 0.0 {
            theta = cand;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

/// One cycle of exact blockwise minimization.
///
/// Each block of buyers is rescaled jointly by a factor `s > 0`, which keeps
/// within-block bid ratios intact; a singleton block is ordinary coordinate
/// descent. With group bid `gv_tau = max_{i in block} beta_i v_i^tau` and
/// rival bid `p_tau = max_{k not in block} beta_k v_k^tau`, the restriction is
/// piecewise `(W s + P)/t - wbar (sum_block b_i) ln s` with breakpoints at
/// `p_tau / gv_tau`; sorting breakpoints and keeping prefix sums makes every
/// candidate (breakpoints, interval stationary points, box edges) evaluable
/// in O(1), so the exact global minimizer of the restriction is found even
/// under signed weights. Returns the largest bid move.
fn block_sweep(
    market: &MarketInstance,
    weights: Option<&DVector<f64>>,
    beta: &mut DVector<f64>,
    blocks: &[Vec<usize>],
    lo: f64,
    hi: f64,
    wbar: f64,
) -> f64 {
    let n = market.n();
    let t = market.t();
    let mut max_move = 0.0f64;
    let mut bps: Vec<(f64, f64, f64)> = Vec::with_capacity(t); // (s breakpoint, w*gv, w*p)
    let mut in_block = vec![false; n];
    for block in blocks {
        for &i in block {
            in_block[i] = true;
        }
        let mut s_lo = 0.0f64;
        let mut s_hi = f64::INFINITY;
        let mut b_eff = 0.0f64;
        for &i in block {
            s_lo = s_lo.max(lo / beta[i]);
            s_hi = s_hi.min(hi / beta[i]);
            b_eff += market.budgets()[i];
        }
        b_eff *= wbar;
        if s_lo > s_hi {
            s_lo = s_hi;
        }
        bps.clear();
        let mut base_slope = 0.0f64; // won for every s > 0 (no positive rival bid)
        for tau in 0..t {
            let col = market.values().column(tau);
            let w = weights.map_or(1.0, |w| w[tau]);
            let mut gv = 0.0f64;
            let mut p = 0.0f64;
            for k in 0..n {
                let bid = beta[k] * col[k];
                if in_block[k] {
                    gv = gv.max(bid);
                } else {
                    p = p.max(bid);
                }
            }
            if gv <= 0.0 {
                continue; // constant contribution w*p
            }
            if p <= 0.0 {
                base_slope += w * gv;
            } else {
                bps.push((p / gv, w * gv, w * p));
            }
        }
        bps.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let m = bps.len();
        // prefix slope won when s is above the first k breakpoints; suffix
        // level of rival prices still winning
        let mut slope = vec![0.0f64; m + 1];
        let mut level = vec![0.0f64; m + 1];
        slope[0] = base_slope;
        let mut tail: f64 = bps.iter().map(|b| b.2).sum();
        level[0] = tail;
        for k in 0..m {
            slope[k + 1] = slope[k] + bps[k].1;
            tail -= bps[k].2;
            level[k + 1] = tail;
        }
        let phi = |s: f64, k: usize| (slope[k] * s + level[k]) / t as f64 - b_eff * s.ln();
        let idx_of = |s: f64| bps.partition_point(|b| b.0 < s);
        let mut best_s = 1.0f64;
        let mut best_val = phi(1.0, idx_of(1.0));
        let consider = |s: f64, k: usize, best_s: &mut f64, best_val: &mut f64| {
            let v = phi(s, k);
            if v < *best_val {
                *best_val = v;
                *best_s = s;
            }
        };
        consider(s_lo, idx_of(s_lo), &mut best_s, &mut best_val);
        consider(s_hi, idx_of(s_hi), &mut best_s, &mut best_val);
        for k in 0..m {
            let s = bps[k].0;
            if s > s_lo && s < s_hi {
                consider(s, idx_of(s), &mut best_s, &mut best_val);
            }
        }
        // interval stationary points s* = b_eff t / slope_k
        for k in 0..=m {
            if slope[k] <= 0.0 {
                continue;
            }
            let s = b_eff * t as f64 / slope[k];
            let left = if k == 0 { 0.0 } else { bps[k - 1].0 };
            let right = if k == m { f64::INFINITY } else { bps[k].0 };
            if s >= left && s <= right && s > s_lo && s < s_hi {
                consider(s, k, &mut best_s, &mut best_val);
            }
        }
        if best_s != 1.0 {
            for &i in block {
                let old = beta[i];
                beta[i] = (old * best_s).max(lo).min(hi);
                max_move = max_move.max((beta[i] - old).abs());
            }
        }
        for &i in block {
            in_block[i] = false;
        }
    }
    max_move
}

fn singleton_blocks(n: usize) -> Vec<Vec<usize>> {
    (0..n).map(|i| vec![i]).collect()
}

/// Last-resort polish through dense tie webs: damped Newton on the
/// softmax-smoothed objective with temperature continuation.
///
/// The max term is replaced by `mu log sum_i exp(bid_i / mu)`; as `mu`
/// shrinks the smoothed optimum approaches the true one, and the softmax
/// weights converge to the optimal tie split. Items whose runner-up bids
/// trail by more than `40 mu` contribute nothing to the curvature (their
/// softmax is a point mass), so each Hessian costs `O(t n)` plus `O(n^2)`
/// per near-tied item.
fn smoothed_polish(
    market: &MarketInstance,
    weights: Option<&DVector<f64>>,
    beta: &mut DVector<f64>,
    lo: f64,
    hi: f64,
    wbar: f64,
    mode: Mode,
    tie_rel: f64,
) {
    let n = market.n();
    let t = market.t();
    let vbar = market.vbar();
    let budgets = market.budgets();
    let mut best_beta = beta.clone();
    let mut best_resid = certificate(market, weights, beta, mode, tie_rel).residual;

    let smooth_eval = |b: &DVector<f64>, mu: f64| -> f64 {
        let mut acc = 0.0;
        for tau in 0..t {
            let col = market.values().column(tau);
            let w = weights.map_or(1.0, |w| w[tau]);
            let mut m = f64::NEG_INFINITY;
            for i in 0..n {
                m = m.max(b[i] * col[i]);
            }
            let mut z = 0.0;
            for i in 0..n {
                let gap = b[i] * col[i] - m;
                if gap > -40.0 * mu {
                    z += (gap / mu).exp();
                }
            }
            acc += w * (m + mu * z.ln());
        }
        let barrier: f64 = (0..n).map(|i| budgets[i] * b[i].ln()).sum();
        acc / t as f64 - wbar * barrier
    };

    // Sup-norm of the smoothed gradient over coordinates free to move; the
    // line-search merit once objective differences fall below f64 resolution.
    let free_grad_norm = |b: &DVector<f64>, mu: f64| -> f64 {
        let mut grad = DVector::<f64>::zeros(n);
        for i in 0..n {
            grad[i] = -wbar * budgets[i] / b[i];
        }
        let mut raw = vec![0.0f64; n];
        for tau in 0..t {
            let col = market.values().column(tau);
            let w = weights.map_or(1.0, |w| w[tau]);
            let mut m = f64::NEG_INFINITY;
            for i in 0..n {
                m = m.max(b[i] * col[i]);
            }
            if m <= 0.0 {
                continue;
            }
            let mut z = 0.0;
            for i in 0..n {
                let gap = b[i] * col[i] - m;
                raw[i] = if gap > -40.0 * mu {
                    (gap / mu).exp()
                } else {
                    0.0
                };
                z += raw[i];
            }
            for i in 0..n {
                if raw[i] > 0.0 {
                    grad[i] += w / t as f64 * raw[i] / z * col[i];
                }
            }
        }
        let mut norm = 0.0f64;
        for i in 0..n {
            let at_lo = b[i] <= lo * (1.0 + 1e-12);
            let at_hi = b[i] >= hi * (1.0 - 1e-12);
            if (!at_lo || grad[i] < 0.0) && (!at_hi || grad[i] > 0.0) {
                norm = norm.max(grad[i].abs());
            }
        }
        norm
    };

    let mut mu = 1e-3 * vbar;
    let mu_floor = 1e-12 * vbar;
    while mu >= mu_floor {
        for _ in 0..12 {
            // gradient and Hessian of the smoothed objective
            let mut grad = DVector::<f64>::zeros(n);
            let mut hess = DMatrix::<f64>::zeros(n, n);
            for i in 0..n {
                grad[i] = -wbar * budgets[i] / beta[i];
                hess[(i, i)] = wbar * budgets[i] / (beta[i] * beta[i]);
            }
            let mut pi: Vec<(usize, f64)> = Vec::with_capacity(n);
            for tau in 0..t {
                let col = market.values().column(tau);
                let w = weights.map_or(1.0, |w| w[tau]);
                let mut m = f64::NEG_INFINITY;
                for i in 0..n {
                    m = m.max(beta[i] * col[i]);
                }
                if m <= 0.0 {
                    continue;
                }
                pi.clear();
                let mut z = 0.0;
                for i in 0..n {
                    let gap = beta[i] * col[i] - m;
                    if gap > -40.0 * mu {
                        let e = (gap / mu).exp();
                        z += e;
                        pi.push((i, e));
                    }
                }
                let wt = w / t as f64;
                if pi.len() == 1 {
                    let (i, _) = pi[0];
                    grad[i] += wt * col[i];
                    continue;
                }
                for &(i, ref e) in &pi {
                    let p_i = e / z;
                    grad[i] += wt * p_i * col[i];
                    hess[(i, i)] += wt * p_i * col[i] * col[i] / mu;
                    for &(j, ref f) in &pi {
                        let p_j = f / z;
                        hess[(i, j)] -= wt * p_i * col[i] * p_j * col[j] / mu;
                    }
                }
            }
            // free set: inactive bounds, or active bounds pulled inward
            let free: Vec<usize> = (0..n)
                .filter(|&i| {
                    let at_lo = beta[i] <= lo * (1.0 + 1e-12);
                    let at_hi = beta[i] >= hi * (1.0 - 1e-12);
                    (!at_lo || grad[i] < 0.0) && (!at_hi || grad[i] > 0.0)
                })
                .collect();
            if free.is_empty() {
                break;
            }
            let nf = free.len();
            let g_f = DVector::from_fn(nf, |a, _| grad[free[a]]);
            if g_f.amax() <= 1e-16 * (1.0 + wbar.abs()) {
                break;
            }
            let mut h_f = DMatrix::from_fn(nf, nf, |a, b| hess[(free[a], free[b])]);
            let mut d_f = None;
            let mut ridge = 0.0;
            for _ in 0..8 {
                match Cholesky::new(h_f.clone()) {
                    Some(c) => {
                        d_f = Some(-c.solve(&g_f));
                        break;
                    }
                    None => {
                        let bump = if ridge == 0.0 {
                            1e-10 * (1.0 + h_f.amax())
                        } else {
                            ridge * 100.0
                        };
                        for a in 0..nf {
                            h_f[(a, a)] += bump - ridge;
                        }
                        ridge = bump;
                    }
                }
            }
            let Some(d_f) = d_f else { break };
            // Accept on objective decrease while it is resolvable in f64;
            // once steps are that small, accept on gradient-norm decrease.
            let h_here = smooth_eval(beta, mu);
            let g_here = free_grad_norm(beta, mu);
            let mut step = 1.0f64;
            let mut accepted = false;
            for _ in 0..40 {
                let mut trial = beta.clone();
                for (a, &i) in free.iter().enumerate() {
                    trial[i] = (trial[i] + step * d_f[a]).max(lo).min(hi);
                }
                let h_trial = smooth_eval(&trial, mu);
                let ok = if h_trial < h_here {
                    true
                } else if h_trial == h_here {
                    free_grad_norm(&trial, mu) < g_here
                } else {
                    false
                };
                if ok {
                    *beta = trial;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        // The ground-truth metric across temperature levels is the
        // stationarity certificate; tiny temperatures can be numerically
        // worse than moderate ones, so keep the best point seen.
        let resid = certificate(market, weights, beta, mode, tie_rel).residual;
        if resid < best_resid {
            best_resid = resid;
            best_beta = beta.clone();
        }
        mu *= 0.1;
    }
    *beta = best_beta;
}

fn weighted_revenue(
    market: &MarketInstance,
    weights: Option<&DVector<f64>>,
    beta: &DVector<f64>,
) -> f64 {
    let mut rev = 0.0;
    for tau in 0..market.t() {
        let col = market.values().column(tau);
        let w = weights.map_or(1.0, |w| w[tau]);
        let mut best = f64::NEG_INFINITY;
        for i in 0..market.n() {
            best = best.max(beta[i] * col[i]);
        }
        rev += w * best;
    }
    rev / market.t() as f64
}

/// Minimize the (optionally weighted) dual objective over the mode's box.
///
/// `weights` may contain zeros or — for perturbation bootstraps — negative
/// entries; in the latter case the objective can lose convexity and the
/// result is the stationary point reached by descent from the warm start.
pub fn solve_weighted(
    market: &MarketInstance,
    weights: Option<&DVector<f64>>,
    mode: Mode,
    config: &SolverConfig,
    warm_start: Option<&DVector<f64>>,
) -> Result<EquilibriumResult> {
    if let Some(w) = weights {
        if w.len() != market.t() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} items",
                w.len(),
                market.t()
            )));
        }
    }
    let n = market.n();
    let (lo, hi) = solve_box(market, weights, mode);
    let bsum1 = 1.0 + market.budgets().iter().map(|b| b.abs()).sum::<f64>();
    let target = config.tol * bsum1;
    let wbar = weights.map_or(1.0, |w| w.iter().sum::<f64>() / market.t() as f64);

    let clamp = |b: &mut DVector<f64>| {
        for i in 0..n {
            b[i] = b[i].max(lo).min(hi);
        }
    };

    let mut beta = match warm_start {
        Some(b) => b.clone(),
        None => {
            let means = market.mean_values();
            DVector::from_fn(n, |i, _| market.budgets()[i] / means[i])
        }
    };
    clamp(&mut beta);

    let mut best_beta = beta.clone();
    let mut best_gap = f64::INFINITY;
    let mut iterations = 0usize;
    let mut polish_budget = 3usize;

    // The contract is an objective gap of at most `tol`. Two certificates
    // imply it: the stationarity residual itself below `tol * (1 + ||b||_1)`,
    // or — for convex solves (non-negative weights) — the strong-convexity
    // bound residual^2 / (2 m) <= tol, with m the barrier curvature floor
    // wbar * min_i b_i / hi^2.
    let convex = weights.is_none_or(|w| w.iter().all(|x| *x >= 0.0)) && wbar > 0.0;
    let bmin = market.budgets().min();
    let m_curv = wbar.abs() * bmin / (hi * hi);
    let certified = |residual: f64| -> bool {
        residual <= target || (convex && residual * residual / (2.0 * m_curv) <= config.tol)
    };

    for outer in 0..config.max_iters {
        iterations += 1;
        let cert = certificate(market, weights, &beta, mode, config.tie_rel);
        if cert.residual < best_gap {
            best_gap = cert.residual;
            best_beta = beta.clone();
        }
        if certified(cert.residual) {
            return Ok(finish(market, weights, beta, mode, iterations, cert, wbar));
        }

        let moved = block_sweep(
            market,
            weights,
            &mut beta,
            &singleton_blocks(n),
            lo,
            hi,
            wbar,
        );
        // Micro-moves mean the sweep is wedged against tie manifolds and
        // crawling; bring in the joint moves early rather than only at a
        // full stop.
        if moved > 1e-5 * (hi - lo) && outer % 8 != 7 {
            continue;
        }

        // Coordinate moves are exhausted: the iterate is wedged against tie
        // manifolds. Try joint rescalings that single coordinates cannot
        // express: near-tied blocks at escalating widths (preserving the
        // ties), leave-one-out sub-blocks (breaking one tie at a junction),
        // and whole-market rescalings (the all-wedged "traffic jam" mode).
        // Every candidate is an exact restricted minimization, so applying
        // them all keeps the descent monotone.
        let move_eps = 1e-14 * (1.0 + beta.amax());
        let mut moved_block = 0.0f64;
        for width in [1e-9, 1e-7, 1e-5, 1e-3] {
            let blocks = near_tie_blocks(market, &beta, width * market.vbar());
            if blocks.iter().all(|b| b.len() == 1) {
                continue;
            }
            moved_block = moved_block.max(block_sweep(
                market, weights, &mut beta, &blocks, lo, hi, wbar,
            ));
            // Leave-one-out moves target small junctions; for big merged
            // blocks the joint and whole-market rescalings below are the
            // productive directions and these sub-sweeps only burn time.
            for block in blocks.iter().filter(|b| b.len() >= 2 && b.len() <= 8) {
                for skip in 0..block.len() {
                    let sub: Vec<usize> = block
                        .iter()
                        .enumerate()
                        .filter(|&(k, _)| k != skip)
                        .map(|(_, &i)| i)
                        .collect();
                    moved_block = moved_block.max(block_sweep(
                        market,
                        weights,
                        &mut beta,
                        &[sub],
                        lo,
                        hi,
                        wbar,
                    ));
                }
            }
        }
        let everyone: Vec<usize> = (0..n).collect();
        let interior: Vec<usize> = (0..n).filter(|&i| beta[i] < hi).collect();
        for cand in [everyone, interior] {
            if cand.len() >= 2 {
                moved_block = moved_block.max(block_sweep(
                    market,
                    weights,
                    &mut beta,
                    &[cand],
                    lo,
                    hi,
                    wbar,
                ));
            }
        }
        if moved_block > move_eps {
            continue;
        }

        // Joint moves are exhausted too: polish through the tie web on the
        // smoothed objective, then loop back to re-certify. Progress is
        // judged on the certificate; the polish may trade a sliver of
        // objective for a much better stationarity residual.
        if polish_budget == 0 {
            break;
        }
        polish_budget -= 1;
        smoothed_polish(
            market,
            weights,
            &mut beta,
            lo,
            hi,
            wbar,
            mode,
            config.tie_rel,
        );
        clamp(&mut beta);
        let after = certificate(market, weights, &beta, mode, config.tie_rel);
        if after.residual >= best_gap {
            break;
        }
    }

    let cert = certificate(market, weights, &best_beta, mode, config.tie_rel);
    if certified(cert.residual) {
        return Ok(finish(
            market, weights, best_beta, mode, iterations, cert, wbar,
        ));
    }
    Err(Error::NotConverged {
        beta: best_beta.as_slice().to_vec(),
        gap: cert.residual / bsum1,
        tol: config.tol,
    })
}

fn finish(
    market: &MarketInstance,
    weights: Option<&DVector<f64>>,
    beta: DVector<f64>,
    mode: Mode,
    iterations: usize,
    cert: Certificate,
    wbar: f64,
) -> EquilibriumResult {
    let n = market.n();
    let b = market.budgets();
    let bsum1 = 1.0 + b.iter().map(|x| x.abs()).sum::<f64>();
    let (delta, pay) = match mode {
        Mode::Lfm => (DVector::zeros(n), b.clone() * wbar),
        Mode::Fppe => {
            let mut delta = DVector::zeros(n);
            for i in 0..n {
                if beta[i] >= 1.0 - 1e-7 {
                    delta[i] = (beta[i] * (-cert.grad[i]).max(0.0)).min(wbar * b[i]);
                }
            }
            let pay = DVector::from_fn(n, |i, _| wbar * b[i] - delta[i]);
            (delta, pay)
        }
    };
    let utilities = DVector::from_fn(n, |i, _| b[i] / beta[i]);
    let revenue = weighted_revenue(market, weights, &beta);
    let objective = eval_weighted_objective_unchecked(market, weights, &beta);
    EquilibriumResult {
        beta,
        delta,
        pay,
        utilities,
        revenue,
        objective,
        mode,
        iterations,
        gap: cert.residual / bsum1,
    }
}

/// Leftover budgets and payments from an (approximate) FPPE minimizer.
///
/// Finds per-item convex tie splits so that the aggregate gradient vanishes
/// for paced buyers and is non-positive for unpaced ones, then reads
/// `delta_i = -beta_i * g_i` (clamped to `[0, b_i]`) and `pay = b - delta`.
pub fn recover_duals(
    market: &MarketInstance,
    beta: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if beta.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(Error::NonPositiveBeta);
    }
    let cfg = SolverConfig::default();
    let bsum1 = 1.0 + market.budgets().iter().sum::<f64>();
    let cert = certificate(market, None, beta, Mode::Fppe, cfg.tie_rel);
    let tol = 1e-6 * bsum1;
    if cert.residual > tol {
        return Err(Error::InfeasibleTieSplit {
            residual: cert.residual,
            tol,
        });
    }
    let n = market.n();
    let b = market.budgets();
    let mut delta = DVector::zeros(n);
    for i in 0..n {
        if beta[i] >= 1.0 - 1e-7 {
            delta[i] = (beta[i] * (-cert.grad[i]).max(0.0)).clamp(0.0, b[i]);
        }
    }
    let pay = DVector::from_fn(n, |i, _| b[i] - delta[i]);
    Ok((delta, pay))
}

/// Split buyers into estimated unpaced-with-leftover, estimated degenerate,
/// and paced sets using the threshold `delta_t`.
pub fn classify_buyers(result: &EquilibriumResult, delta_t: f64) -> ActiveSets {
    let n = result.beta.len();
    let mut i_plus = Vec::new();
    let mut i_zero = Vec::new();
    let mut i_c = Vec::new();
    for i in 0..n {
        let budget = result.delta[i] + result.pay[i];
        if result.beta[i] > 1.0 - delta_t {
            if result.delta[i] > delta_t * budget {
                i_plus.push(i);
            } else {
                i_zero.push(i);
            }
        } else {
            i_c.push(i);
        }
    }
    ActiveSets::new(n, i_plus, i_zero, i_c).expect("classification partitions buyers")
}
