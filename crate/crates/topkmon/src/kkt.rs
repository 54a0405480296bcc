//! Closed-form switch times for the rate-budgeted tail allocation, and a
//! small linear-program oracle that validates them.
//!
//! Each source n receives an active prefix of length `T_n`: updates on both
//! mismatch states for `t <= T_n`, one-sided afterwards. The closed form
//! scans a multiplier `theta`, placing sources whose breakpoint
//! `alpha_n (1/(2 omega_n) - 1)` exceeds `theta` on full time and splitting
//! the leftover budget evenly across the boundary set. The oracle solves the
//! underlying linear program exactly by vertex enumeration and is used only
//! in tests and verification runs.

use itertools::Itertools;
use serde::Serialize;

use crate::model::{AlphaTable, SystemConfig};
use crate::{Error, Result};

/// Solution of the closed-form switch-time recipe.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KktSolution {
    /// Rate-constraint multiplier the recipe settled on.
    pub theta: f64,
    /// Sources on full time (1-based indices), `theta` strictly below their
    /// breakpoints and inside the admissible prefix.
    pub set_a: Vec<usize>,
    /// Sources allowed any time share (non-strict breakpoint comparison,
    /// wider admissible prefix). Contains `set_a`.
    pub set_b: Vec<usize>,
    /// Smallest cut index minimizing `tau` over `1..=N+1`, where the
    /// out-of-range entry is exactly zero; `N + 1` when every in-range value
    /// is positive.
    pub n_tilde: usize,
    /// Largest such index; differs from `n_tilde` only when the minimum is
    /// tied, which happens precisely at zero crossings of `tau`.
    pub n_tilde_max: usize,
    /// `tau(theta, m)` for m = 1..N at the returned multiplier.
    pub tau_of_m: Vec<f64>,
    /// Continuous boundary time share before flooring.
    pub t_prime: f64,
    /// Per-source active-prefix lengths `T_n`.
    pub switch_times: Vec<usize>,
    /// Per-source critical multipliers `alpha_n (1/(2 omega_n) - 1)`.
    pub breakpoints: Vec<f64>,
}

/// Feasible point of the validation linear program.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LpPoint {
    /// Per-source both-update time shares.
    pub s: Vec<f64>,
    /// Per-source one-sided time shares.
    pub z: Vec<f64>,
    /// Total approximate error `Σ_n epsilon_n(s, z)`.
    pub objective: f64,
}

/// Per-source critical multipliers `alpha_n (1/(2 omega_n) - 1)`; positive
/// because every kernel rate is below one half.
pub fn compute_breakpoints(cfg: &SystemConfig, alpha: &AlphaTable) -> Vec<f64> {
    (1..=cfg.n_sources)
        .map(|n| {
            let p = cfg.source(n);
            alpha.alpha(n) * (1.0 / (2.0 * p.omega) - 1.0)
        })
        .collect()
}

/// Approximate per-source error contribution at a linear-program point.
///
/// `alpha_n (nu_n / zeta_n)(2 omega_n s_n + z_n)` charges the active and
/// one-sided shares at their stationary mismatch odds; the remainder
/// `alpha_n (s_{n-1} + z_{n-1} - s_n - z_n)` charges abandoned time at full
/// weight. The chain starts at `s_0 + z_0 = T`.
pub fn epsilon_n(cfg: &SystemConfig, alpha: &AlphaTable, n: usize, s: &[f64], z: &[f64]) -> f64 {
    let p = cfg.source(n);
    let a = alpha.alpha(n);
    let prev = if n == 1 {
        cfg.horizon as f64
    } else {
        s[n - 2] + z[n - 2]
    };
    a * (p.nu / p.zeta) * (2.0 * p.omega * s[n - 1] + z[n - 1])
        + a * (prev - s[n - 1] - z[n - 1])
}

/// Objective of the validation linear program at `(s, z)`.
pub fn lp_objective(cfg: &SystemConfig, alpha: &AlphaTable, s: &[f64], z: &[f64]) -> f64 {
    (1..=cfg.n_sources).map(|n| epsilon_n(cfg, alpha, n, s, z)).sum()
}

/// `tau(theta, m) = alpha_m - Σ_{n=m}^{N} (nu_n/zeta_n) min(alpha_n,
/// (alpha_n + theta) 2 omega_n)`, the net tail error of cutting the ranking
/// at m. The out-of-range weight is zero, so extending the sum one past N
/// would not change it.
pub fn tau_profile(cfg: &SystemConfig, alpha: &AlphaTable, theta: f64) -> Vec<f64> {
    let terms: Vec<f64> = (1..=cfg.n_sources)
        .map(|n| {
            let p = cfg.source(n);
            let a = alpha.alpha(n);
            (p.nu / p.zeta) * a.min((a + theta) * 2.0 * p.omega)
        })
        .collect();
    let mut suffix = 0.0;
    let mut tau = vec![0.0; cfg.n_sources];
    for m in (1..=cfg.n_sources).rev() {
        suffix += terms[m - 1];
        tau[m - 1] = alpha.alpha(m) - suffix;
    }
    tau
}

struct SetsAtTheta {
    set_a: Vec<usize>,
    set_b: Vec<usize>,
    n_tilde: usize,
    n_tilde_max: usize,
    tau: Vec<f64>,
    rate_a: f64,
    rate_b: f64,
}

/// Ties in the cut argmin within this margin are kept as a set, so that the
/// multiplier sitting exactly on a zero crossing of `tau` exposes both the
/// short prefix (for the full-time set) and the long one (for the boundary
/// set). The crossing is where fractional allocations appear, so this is
/// where mid-range budgets become feasible.
const TAU_TIE_TOL: f64 = 1e-9;

fn sets_at(cfg: &SystemConfig, alpha: &AlphaTable, breakpoints: &[f64], theta: f64) -> SetsAtTheta {
    let tau = tau_profile(cfg, alpha, theta);
    // The cut index ranges over 1..=N+1; the out-of-range entry has weight
    // zero and an empty sum, so its tau is exactly zero.
    let min_tau = tau.iter().copied().fold(0.0f64, f64::min);
    let mut ties: Vec<usize> = tau
        .iter()
        .enumerate()
        .filter(|(_, &v)| v <= min_tau + TAU_TIE_TOL)
        .map(|(i, _)| i + 1)
        .collect();
    if 0.0 <= min_tau + TAU_TIE_TOL {
        ties.push(cfg.n_sources + 1);
    }
    let (n_tilde, n_tilde_max) = (ties[0], *ties.last().unwrap());
    let set_a: Vec<usize> = (1..n_tilde)
        .filter(|&n| theta < breakpoints[n - 1])
        .collect();
    let set_b: Vec<usize> = (1..n_tilde_max)
        .filter(|&n| theta <= breakpoints[n - 1])
        .collect();
    let rate_of = |set: &[usize]| {
        set.iter()
            .map(|&n| cfg.source(n).always_update_rate())
            .sum::<f64>()
    };
    let rate_a = rate_of(&set_a);
    let rate_b = rate_of(&set_b);
    SetsAtTheta {
        set_a,
        set_b,
        n_tilde,
        n_tilde_max,
        tau,
        rate_a,
        rate_b,
    }
}

/// Root of the line through `(lo, f_lo)` and `(hi, f_hi)` if the sign
/// changes inside the segment.
fn segment_root(lo: f64, hi: f64, f_lo: f64, f_hi: f64) -> Option<f64> {
    if f_lo == 0.0 {
        return Some(lo);
    }
    if f_lo * f_hi >= 0.0 || f_lo == f_hi {
        return None;
    }
    let root = lo + (hi - lo) * f_lo / (f_lo - f_hi);
    (lo..=hi).contains(&root).then_some(root)
}

const RATE_TOL: f64 = 1e-12;

/// Largest multiplier at which the rate budget sits between the full-time
/// set's rate and the boundary set's rate.
///
/// The candidate set contains every point where the sets can change: the
/// breakpoints, the roots of each `tau(., m)` within a breakpoint segment
/// (the minimum crossing zero changes the admissible prefix), the pairwise
/// crossings of `tau` lines (the minimizing index changes), zero, and a
/// sentinel above every breakpoint. Midpoints of consecutive candidates
/// cover open regions whose endpoints fail; within a region the sets, and
/// hence the resulting switch times, are constant.
///
/// The multiplier can be negative: the budget is an equality, so when even
/// the cheapest cut beats full monitoring at price zero (`tau(0, m) < 0` for
/// some m), the forced spending carries a negative shadow price and the
/// relevant root of `tau` sits below zero. Every `tau(., m)` is a single
/// line on the negative axis (all saturation kinks are positive), so one
/// extra segment down to a sentinel below the lowest such root covers it.
pub fn solve_theta(cfg: &SystemConfig, alpha: &AlphaTable, r: f64) -> Result<f64> {
    let full = cfg.full_update_rate();
    if !(0.0..=full * (1.0 + RATE_TOL)).contains(&r) {
        return Err(Error::InfeasibleRate(format!(
            "budget {r} outside [0, {full}]"
        )));
    }
    let breakpoints = compute_breakpoints(cfg, alpha);
    let max_bp = breakpoints.iter().copied().fold(0.0f64, f64::max);
    let sentinel = max_bp + 1.0;
    let tau_zero = tau_profile(cfg, alpha, 0.0);
    let mut slope_suffix = 0.0;
    let mut floor_sentinel = 0.0f64;
    for m in (1..=cfg.n_sources).rev() {
        let p = cfg.source(m);
        slope_suffix += (p.nu / p.zeta) * 2.0 * p.omega;
        if tau_zero[m - 1] < 0.0 {
            floor_sentinel = floor_sentinel.min(tau_zero[m - 1] / slope_suffix);
        }
    }
    let floor_sentinel = floor_sentinel - 1.0;

    let mut base: Vec<f64> = breakpoints.iter().copied().collect();
    base.push(floor_sentinel);
    base.push(0.0);
    base.push(sentinel);
    base.sort_by(|a, b| a.partial_cmp(b).unwrap());
    base.dedup();

    let mut candidates = base.clone();
    for pair in base.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        let tau_lo = tau_profile(cfg, alpha, lo);
        let tau_hi = tau_profile(cfg, alpha, hi);
        for m in 0..cfg.n_sources {
            if let Some(root) = segment_root(lo, hi, tau_lo[m], tau_hi[m]) {
                candidates.push(root);
            }
            for m2 in m + 1..cfg.n_sources {
                let d_lo = tau_lo[m] - tau_lo[m2];
                let d_hi = tau_hi[m] - tau_hi[m2];
                if let Some(root) = segment_root(lo, hi, d_lo, d_hi) {
                    candidates.push(root);
                }
            }
        }
    }
    candidates.retain(|&c| (floor_sentinel..=sentinel).contains(&c));
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();
    let mut probes = candidates.clone();
    for pair in candidates.windows(2) {
        probes.push(0.5 * (pair[0] + pair[1]));
    }
    probes.sort_by(|a, b| a.partial_cmp(b).unwrap());

    for &theta in probes.iter().rev() {
        let sets = sets_at(cfg, alpha, &breakpoints, theta);
        if sets.rate_a <= r + RATE_TOL && r <= sets.rate_b + RATE_TOL {
            return Ok(theta);
        }
    }
    Err(Error::NoFeasibleTheta(format!(
        "no multiplier satisfies the rate sandwich for budget {r}"
    )))
}

/// Full closed-form recipe: multiplier, sets, boundary share, and the
/// per-source switch times `T_n` (`T` on the full-time set, `floor(T')` on
/// the boundary set, 0 elsewhere). A budget at or above the full update rate
/// short-circuits to `T_n = T` for every source.
pub fn compute_tn(cfg: &SystemConfig, alpha: &AlphaTable, r: f64) -> Result<KktSolution> {
    if r < 0.0 {
        return Err(Error::InfeasibleRate(format!("budget {r} is negative")));
    }
    let n = cfg.n_sources;
    let t = cfg.horizon;
    let breakpoints = compute_breakpoints(cfg, alpha);
    let full = cfg.full_update_rate();
    if r >= full {
        return Ok(KktSolution {
            theta: 0.0,
            set_a: (1..=n).collect(),
            set_b: (1..=n).collect(),
            n_tilde: n + 1,
            n_tilde_max: n + 1,
            tau_of_m: tau_profile(cfg, alpha, 0.0),
            t_prime: t as f64,
            switch_times: vec![t; n],
            breakpoints,
        });
    }

    let theta = solve_theta(cfg, alpha, r)?;
    let sets = sets_at(cfg, alpha, &breakpoints, theta);
    let boundary: Vec<usize> = sets
        .set_b
        .iter()
        .copied()
        .filter(|i| !sets.set_a.contains(i))
        .collect();
    let t_prime = if boundary.is_empty() {
        if (r - sets.rate_a).abs() > 1e-9 * full.max(1.0) {
            return Err(Error::Domain(format!(
                "empty boundary set with residual budget {} at theta {theta}",
                r - sets.rate_a
            )));
        }
        0.0
    } else {
        let denom: f64 = boundary
            .iter()
            .map(|&i| cfg.source(i).always_update_rate())
            .sum();
        (t as f64) * (r - sets.rate_a) / denom
    };
    let switch_times: Vec<usize> = (1..=n)
        .map(|i| {
            if sets.set_a.contains(&i) {
                t
            } else if boundary.contains(&i) {
                (t_prime.floor() as usize).min(t)
            } else {
                0
            }
        })
        .collect();
    Ok(KktSolution {
        theta,
        set_a: sets.set_a,
        set_b: sets.set_b,
        n_tilde: sets.n_tilde,
        n_tilde_max: sets.n_tilde_max,
        tau_of_m: sets.tau,
        t_prime,
        switch_times,
        breakpoints,
    })
}

/// Embeds a closed-form solution as a linear-program point. The always-update
/// shares follow the solution with the boundary share kept continuous: `s_n`
/// is `T` on the full-time set, `T'` on the boundary set, 0 elsewhere, which
/// pins the rate equality exactly. The one-sided shares are then chosen to
/// minimize the objective: with `s` fixed each total time enters linearly
/// (raising it saves the drop lump but pays the one-sided steady error), so
/// the best totals sit at a vertex of the chain `T >= t_1 >= ... >= t_N`,
/// `t_n >= s_n`, and a small exact search recovers them. Topping every
/// source up to total `T` instead can be worse by a margin growing with `T`
/// whenever a drop lump is cheaper than the steady error it would replace.
pub fn embed_three_stage(cfg: &SystemConfig, alpha: &AlphaTable, sol: &KktSolution) -> LpPoint {
    let n = cfg.n_sources;
    let t = cfg.horizon as f64;
    let mut s = vec![0.0; n];
    for i in 1..=n {
        if sol.set_a.contains(&i) {
            s[i - 1] = t;
        } else if sol.set_b.contains(&i) {
            s[i - 1] = sol.t_prime;
        }
    }
    let gain: Vec<f64> = (1..=n)
        .map(|i| {
            let p = cfg.source(i);
            (alpha.alpha(i) - alpha.alpha(i + 1)) - alpha.alpha(i) * p.nu / p.zeta
        })
        .collect();
    let totals = best_totals(&gain, &s, t);
    let z: Vec<f64> = (0..n).map(|i| (totals[i] - s[i]).max(0.0)).collect();
    let objective = lp_objective(cfg, alpha, &s, &z);
    LpPoint { s, z, objective }
}

/// Maximizes `sum(gain_n * t_n)` over non-increasing totals starting at
/// `cap` with `t_n >= floor_n`. At a vertex every total either glues to its
/// predecessor or sits on some later floor, so the distinct floor values at
/// or above the current one (plus the cap) are the only levels worth trying;
/// the source count is small enough for exhaustive recursion.
fn best_totals(gain: &[f64], floors: &[f64], cap: f64) -> Vec<f64> {
    fn rec(gain: &[f64], floors: &[f64], i: usize, cap: f64, out: &mut Vec<f64>) -> f64 {
        if i == gain.len() {
            return 0.0;
        }
        let mut levels: Vec<f64> = floors[i..]
            .iter()
            .copied()
            .chain(std::iter::once(cap))
            .filter(|&v| floors[i] <= v && v <= cap)
            .collect();
        levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        levels.dedup();
        let mut best = f64::NEG_INFINITY;
        for &v in &levels {
            let mut tail = Vec::new();
            let value = gain[i] * v + rec(gain, floors, i + 1, v, &mut tail);
            if value > best {
                best = value;
                tail.insert(0, v);
                *out = tail;
            }
        }
        best
    }
    let mut totals = Vec::with_capacity(gain.len());
    let value = rec(gain, floors, 0, cap, &mut totals);
    debug_assert!(value.is_finite(), "chain of totals had no feasible vertex");
    totals
}

/// Checks every linear-program constraint at a point; returns the first
/// violation as text.
pub fn check_lp_feasibility(
    cfg: &SystemConfig,
    point: &LpPoint,
    r: f64,
    tol: f64,
) -> Option<String> {
    let n = cfg.n_sources;
    let t = cfg.horizon as f64;
    for i in 0..n {
        if point.s[i] < -tol {
            return Some(format!("s_{} = {} negative", i + 1, point.s[i]));
        }
        if point.z[i] < -tol {
            return Some(format!("z_{} = {} negative", i + 1, point.z[i]));
        }
        let prev = if i == 0 {
            t
        } else {
            point.s[i - 1] + point.z[i - 1]
        };
        if point.s[i] + point.z[i] > prev + tol {
            return Some(format!(
                "total at {} exceeds predecessor: {} > {prev}",
                i + 1,
                point.s[i] + point.z[i]
            ));
        }
    }
    let rate: f64 = (0..n)
        .map(|i| cfg.sources[i].always_update_rate() * point.s[i])
        .sum();
    let target = t * r;
    if (rate - target).abs() > tol * (1.0 + target.abs()) {
        return Some(format!("rate {rate} differs from {target}"));
    }
    None
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting; `None` on
/// a (near-)singular system.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale: f64 = a
        .iter()
        .flat_map(|row| row.iter().map(|v| v.abs()))
        .fold(0.0, f64::max)
        .max(1.0);
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()
        })?;
        if a[pivot][col].abs() < 1e-11 * scale {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in col + 1..n {
            acc -= a[col][k] * x[k];
        }
        x[col] = acc / a[col][col];
    }
    Some(x)
}

/// Exact minimizer of the validation linear program by enumeration of basic
/// feasible points. Test oracle only; capped at six sources (31824 bases).
pub fn lp_oracle(cfg: &SystemConfig, alpha: &AlphaTable, r: f64) -> Result<LpPoint> {
    let n = cfg.n_sources;
    if n > 6 {
        return Err(Error::InstanceTooLarge(format!(
            "vertex enumeration supports at most 6 sources (got {n})"
        )));
    }
    let full = cfg.full_update_rate();
    if !(0.0..=full * (1.0 + RATE_TOL)).contains(&r) {
        return Err(Error::InfeasibleRate(format!(
            "budget {r} outside [0, {full}]"
        )));
    }
    let t = cfg.horizon as f64;
    let dim = 2 * n;
    // Inequality rows g . v <= h over v = (s_1..s_N, z_1..z_N).
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::with_capacity(3 * n);
    for i in 0..n {
        let mut g = vec![0.0; dim];
        g[i] = -1.0;
        rows.push((g, 0.0)); // s_i >= 0
    }
    for i in 0..n {
        let mut g = vec![0.0; dim];
        g[n + i] = -1.0;
        rows.push((g, 0.0)); // z_i >= 0
    }
    for i in 0..n {
        let mut g = vec![0.0; dim];
        g[i] = 1.0;
        g[n + i] = 1.0;
        let h = if i == 0 {
            t
        } else {
            g[i - 1] = -1.0;
            g[n + i - 1] = -1.0;
            0.0
        };
        rows.push((g, h)); // chain: totals non-increasing from T
    }
    let mut eq = vec![0.0; dim];
    for i in 0..n {
        eq[i] = cfg.sources[i].always_update_rate();
    }
    let eq_rhs = t * r;

    let tol = 1e-8 * t.max(1.0);
    let mut best: Option<LpPoint> = None;
    for active in (0..rows.len()).combinations(dim - 1) {
        let mut a: Vec<Vec<f64>> = Vec::with_capacity(dim);
        let mut b: Vec<f64> = Vec::with_capacity(dim);
        a.push(eq.clone());
        b.push(eq_rhs);
        for &i in &active {
            a.push(rows[i].0.clone());
            b.push(rows[i].1);
        }
        let Some(v) = solve_dense(a, b) else {
            continue;
        };
        let feasible = rows.iter().all(|(g, h)| {
            let lhs: f64 = g.iter().zip(&v).map(|(gi, vi)| gi * vi).sum();
            lhs <= h + tol
        });
        if !feasible {
            continue;
        }
        let s = v[..n].to_vec();
        let z = v[n..].to_vec();
        let objective = lp_objective(cfg, alpha, &s, &z);
        if best.as_ref().map_or(true, |p| objective < p.objective) {
            best = Some(LpPoint { s, z, objective });
        }
    }
    best.ok_or_else(|| Error::Domain("no feasible basic point found".to_string()))
}
