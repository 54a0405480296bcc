//! Exact (non-Monte-Carlo) analysis: pair-state distribution propagation for
//! a single monitored source, per-slot mismatch and update probabilities, the
//! prioritized error approximation with its sandwich bounds, and the quadratic
//! envelope of the cross-term mass program.

use std::io::Write;

use crate::model::{transition_prob, AlphaTable, SourceParams};
use crate::policy::{pair_index, SourceDecisionTable};
use crate::{sig12, Error, Result};

/// Exact evolution of one source's joint pair state `(X(t), Y(t))`.
///
/// All vectors are indexed by `t = 0..=T`. Slot 0 is the initialization slot:
/// no decision is taken there, so `beta[0] = 0` and `expected_update[0] = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairChainSeries {
    /// `dist[t]` is the distribution over pairs, indexed by
    /// [`pair_index`](crate::policy::pair_index); each entry sums to 1.
    pub dist: Vec<[f64; 4]>,
    /// `beta[t]` is the mismatch probability `Pr(X(t) != Y(t))`.
    pub beta: Vec<f64>,
    /// `expected_update[t]` is `E[U(t)]`, taken before the slot-t transition.
    pub expected_update: Vec<f64>,
}

impl PairChainSeries {
    /// Horizon T covered by the series.
    pub fn horizon(&self) -> usize {
        self.beta.len() - 1
    }

    /// Mismatch probability at slot `t` (`0..=T`).
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    /// Expected update indicator at slot `t` (`0..=T`).
    pub fn expected_update(&self, t: usize) -> f64 {
        self.expected_update[t]
    }

    /// Time-averaged expected update frequency `(1/T) Σ_t E[U(t)]`.
    pub fn update_rate(&self) -> f64 {
        let t_max = self.horizon();
        self.expected_update[1..].iter().sum::<f64>() / t_max as f64
    }
}

/// Evolves the joint pair `(X(t), Y(t))` of one source exactly for
/// `t = 0..=horizon` under a per-source decision table.
///
/// The pair starts matched: `X(0)` is drawn from the stationary distribution
/// and `Y(0) = X(0)`, the unique initialization making the first mismatch
/// probability independent of an arbitrary prior. At slot `t >= 1`, from pair
/// `(x, y)`: with `u = u(t, x, y)` the monitor moves to `x` if `u = 1` (else
/// stays at `y`), and the source moves by its kernel row `x`.
pub fn propagate_pair_chain(
    p: &SourceParams,
    table: &SourceDecisionTable,
    horizon: usize,
) -> Result<PairChainSeries> {
    if table.horizon() < horizon {
        return Err(Error::InvalidPolicy(format!(
            "decision table covers {} slots, horizon is {horizon}",
            table.horizon()
        )));
    }
    let free = p.mu / p.zeta;
    let mut dist = Vec::with_capacity(horizon + 1);
    let mut beta = Vec::with_capacity(horizon + 1);
    let mut expected_update = Vec::with_capacity(horizon + 1);

    let mut cur = [0.0; 4];
    cur[pair_index(0, 0)] = 1.0 - free;
    cur[pair_index(1, 1)] = free;
    dist.push(cur);
    beta.push(0.0);
    expected_update.push(0.0);

    for t in 1..=horizon {
        let row = table.row(t);
        let mut eu = 0.0;
        let mut next = [0.0; 4];
        for (pair, &mass) in cur.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let x = (pair >> 1) as u8;
            let y = (pair & 1) as u8;
            let y_next = if row[pair] {
                eu += mass;
                x
            } else {
                y
            };
            next[pair_index(x, y_next)] += mass * transition_prob(p, x, x);
            next[pair_index(1 - x, y_next)] += mass * transition_prob(p, x, 1 - x);
        }
        debug_assert!((next.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        cur = next;
        dist.push(cur);
        beta.push(cur[pair_index(0, 1)] + cur[pair_index(1, 0)]);
        expected_update.push(eu);
    }

    Ok(PairChainSeries {
        dist,
        beta,
        expected_update,
    })
}

/// Stationary mismatch probability `nu/zeta` of the policy that updates in a
/// single persistent mismatch state and nowhere else.
pub fn beta_steady_state_one_sided(p: &SourceParams) -> f64 {
    p.nu / p.zeta
}

/// System-wide analytic update rate `Σ_n (1/T) Σ_t E[U_n(t)]`.
pub fn analytic_update_rate(series: &[PairChainSeries]) -> f64 {
    series.iter().map(PairChainSeries::update_rate).sum()
}

/// Error approximation at one slot: the candidate values, their minimum, and
/// the sandwich bounds on the true selection-error probability.
#[derive(Debug, Clone, PartialEq)]
pub struct RhoResult {
    /// `rho_per_m[m - 1]` is `alpha_m + Σ_{n<m} alpha_n beta_n(t)` for
    /// m in 1..=N+1. The last candidate has no tail term (`alpha_{N+1} = 0`)
    /// and is the plain union bound `Σ_n alpha_n beta_n(t)`.
    pub rho_per_m: Vec<f64>,
    /// Minimum candidate value.
    pub rho: f64,
    /// Smallest minimizing index m (1-based); sources `n >= m_star` are the
    /// tail whose errors are absorbed into the single alpha term. `m_star`
    /// of N+1 means no source is lumped into a tail.
    pub m_star: usize,
    /// Lower bound `rho / 4` on the selection-error probability.
    pub lower: f64,
    /// Upper bound `rho` on the selection-error probability.
    pub upper: f64,
}

impl RhoResult {
    /// Whether source `n` (1-based) is in the tail.
    pub fn is_tail(&self, n: usize) -> bool {
        n >= self.m_star
    }
}

/// Evaluates the error approximation from per-source mismatch probabilities
/// at one slot, ordered by preference (source 1 first).
///
/// The candidate list includes the cut at m = N+1: dropping no source into
/// the tail leaves the plain union bound. Without it the lower bound
/// `rho / 4` fails whenever every prefix is likely decision-relevant yet
/// all mismatch probabilities are small (for example K = N with a
/// synchronized start), since every truncated candidate then carries an
/// `alpha_m` bounded away from zero while the true error vanishes.
pub fn rho_at(alpha: &AlphaTable, betas: &[f64]) -> Result<RhoResult> {
    let n_sources = alpha.n_sources();
    if betas.len() != n_sources {
        return Err(Error::Domain(format!(
            "got {} mismatch probabilities for {n_sources} sources",
            betas.len()
        )));
    }
    let mut rho_per_m = Vec::with_capacity(n_sources + 1);
    let mut prefix = 0.0;
    for m in 1..=n_sources + 1 {
        rho_per_m.push(alpha.alpha(m) + prefix);
        if m <= n_sources {
            prefix += alpha.alpha(m) * betas[m - 1];
        }
    }
    let (mut m_star, mut rho) = (1, rho_per_m[0]);
    for (i, &v) in rho_per_m.iter().enumerate().skip(1) {
        if v < rho {
            rho = v;
            m_star = i + 1;
        }
    }
    Ok(RhoResult {
        rho_per_m,
        rho,
        m_star,
        lower: rho / 4.0,
        upper: rho,
    })
}

/// Time-averaged error approximation `(1/T) Σ_{t=1}^{T} rho(t)` for the
/// per-source series of one policy.
pub fn approx_objective(alpha: &AlphaTable, series: &[PairChainSeries]) -> Result<f64> {
    let n_sources = alpha.n_sources();
    if series.len() != n_sources {
        return Err(Error::Domain(format!(
            "got {} series for {n_sources} sources",
            series.len()
        )));
    }
    let t_max = series
        .first()
        .map(PairChainSeries::horizon)
        .ok_or_else(|| Error::Domain("no sources".to_string()))?;
    if t_max == 0 || series.iter().any(|s| s.horizon() != t_max) {
        return Err(Error::Domain(
            "series must share a positive horizon".to_string(),
        ));
    }
    let mut betas = vec![0.0; n_sources];
    let mut sum = 0.0;
    for t in 1..=t_max {
        for (b, s) in betas.iter_mut().zip(series) {
            *b = s.beta(t);
        }
        sum += rho_at(alpha, &betas)?.rho;
    }
    Ok(sum / t_max as f64)
}

/// Writes the per-slot analysis table as CSV: `t`, per-source `beta`,
/// per-source `expected_update`, then `rho`, `m_star`, `lower`, `upper`.
pub fn write_analysis_csv<W: Write>(
    out: &mut W,
    alpha: &AlphaTable,
    series: &[PairChainSeries],
) -> Result<()> {
    let n_sources = alpha.n_sources();
    if series.len() != n_sources {
        return Err(Error::Domain(format!(
            "got {} series for {n_sources} sources",
            series.len()
        )));
    }
    let t_max = series.first().map_or(0, PairChainSeries::horizon);
    write!(out, "t")?;
    for n in 1..=n_sources {
        write!(out, ",beta_{n}")?;
    }
    for n in 1..=n_sources {
        write!(out, ",expected_update_{n}")?;
    }
    writeln!(out, ",rho,m_star,lower,upper")?;
    let mut betas = vec![0.0; n_sources];
    for t in 1..=t_max {
        for (b, s) in betas.iter_mut().zip(series) {
            *b = s.beta(t);
        }
        let r = rho_at(alpha, &betas)?;
        write!(out, "{t}")?;
        for s in series {
            write!(out, ",{}", sig12(s.beta(t)))?;
        }
        for s in series {
            write!(out, ",{}", sig12(s.expected_update(t)))?;
        }
        writeln!(
            out,
            ",{},{},{},{}",
            sig12(r.rho),
            r.m_star,
            sig12(r.lower),
            sig12(r.upper)
        )?;
    }
    Ok(())
}

/// Coefficients `c_2..c_k` of the quadratic envelope `w^2 / c_k`, built by
/// `c_2 = 4 alpha_2`, `c_i = 4 alpha_i (1 - alpha_i / c_{i-1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcavityCoeffs {
    /// `c[i]` is `c_{i+2}`.
    pub c: Vec<f64>,
}

impl ConcavityCoeffs {
    /// Builds the coefficients for weights `alphas = [alpha_1, .., alpha_k]`.
    /// Fails if the recursion leaves the positive domain.
    pub fn build(alphas: &[f64]) -> Result<Self> {
        if alphas.len() < 2 {
            return Err(Error::Domain(
                "envelope coefficients need at least two weights".to_string(),
            ));
        }
        let mut c = Vec::with_capacity(alphas.len() - 1);
        let mut prev = 4.0 * alphas[1];
        if prev <= 0.0 {
            return Err(Error::Domain(format!(
                "degenerate envelope coefficient c_2 = {prev}"
            )));
        }
        c.push(prev);
        for (i, &a) in alphas.iter().enumerate().skip(2) {
            let next = 4.0 * a * (1.0 - a / prev);
            if next <= 0.0 {
                return Err(Error::Domain(format!(
                    "degenerate envelope coefficient c_{} = {next}",
                    i + 1
                )));
            }
            c.push(next);
            prev = next;
        }
        Ok(Self { c })
    }

    /// The final coefficient `c_k`.
    pub fn last(&self) -> f64 {
        *self.c.last().expect("nonempty by construction")
    }
}

fn validate_weights(alphas: &[f64]) -> Result<()> {
    for (i, &a) in alphas.iter().enumerate() {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::Domain(format!(
                "weight {} = {a} outside [0, 1]",
                i + 1
            )));
        }
    }
    Ok(())
}

/// Closed form `w^2 / c_k` of the cross-term mass envelope.
///
/// Valid for non-increasing positive weights and `w` in `[0, alpha_k]`; on
/// that domain it equals [`fk_numeric_max`] and never exceeds `w / 2`.
pub fn fk_closed_form(alphas: &[f64], w: f64) -> Result<f64> {
    validate_weights(alphas)?;
    if alphas.len() < 2 {
        return Err(Error::Domain(
            "closed-form envelope needs at least two weights".to_string(),
        ));
    }
    if alphas.windows(2).any(|p| p[1] > p[0]) {
        return Err(Error::Domain(
            "closed-form envelope requires non-increasing weights".to_string(),
        ));
    }
    let a_k = *alphas.last().expect("nonempty");
    if !(0.0..=a_k).contains(&w) {
        return Err(Error::Domain(format!(
            "mass {w} outside [0, {a_k}]"
        )));
    }
    Ok(w * w / ConcavityCoeffs::build(alphas)?.last())
}

/// Uniform grid over `[0, ub]` with step `h`; the last node is exactly `ub`.
fn grid_nodes(ub: f64, h: f64) -> Vec<f64> {
    if ub <= 0.0 {
        return vec![0.0];
    }
    let mut nodes = Vec::new();
    let mut j = 0usize;
    loop {
        let x = j as f64 * h;
        if x >= ub - 1e-12 {
            break;
        }
        nodes.push(x);
        j += 1;
    }
    nodes.push(ub);
    nodes
}

/// One stage of the envelope maximization: best value of
/// `v (w - v) / alpha_i + g_prev(v)` over `v` in `[lo, hi]`, where `g_prev`
/// is piecewise linear on `nodes`/`values`. Each segment restricts to a
/// concave quadratic in `v`, maximized at its clamped vertex or endpoints.
fn stage_max(
    nodes: &[f64],
    values: &[f64],
    alpha_i: f64,
    w: f64,
    lo: f64,
    hi: f64,
) -> f64 {
    let cross = |v: f64| {
        if alpha_i > 0.0 {
            v * (w - v) / alpha_i
        } else {
            0.0
        }
    };
    if nodes.len() == 1 {
        return cross(nodes[0]) + values[0];
    }
    let mut best = f64::NEG_INFINITY;
    for seg in 0..nodes.len() - 1 {
        let (va, vb) = (nodes[seg], nodes[seg + 1]);
        if vb < lo || va > hi {
            continue;
        }
        let (clip_a, clip_b) = (va.max(lo), vb.min(hi));
        let slope = (values[seg + 1] - values[seg]) / (vb - va);
        let eval = |v: f64| cross(v) + values[seg] + slope * (v - va);
        let mut cands = [clip_a, clip_b, clip_a];
        if alpha_i > 0.0 {
            cands[2] = ((w + slope * alpha_i) / 2.0).clamp(clip_a, clip_b);
        }
        for v in cands {
            let val = eval(v);
            if val > best {
                best = val;
            }
        }
    }
    best
}

/// Grid maximization of the cross-term mass program
/// `max Σ_{i=2}^{k} (Σ_{j<i} alpha_j beta_j) beta_i` subject to
/// `Σ alpha_i beta_i = w`, the per-stage prefix caps, and `beta_i` in [0, 1].
///
/// Dynamic program over the cumulative mass `w_i = Σ_{j<=i} alpha_j beta_j`
/// with piecewise-linear value interpolation; grid error is `O(h^2)`. Test
/// oracle only, limited to `k <= 4`.
pub fn fk_numeric_max(alphas: &[f64], w: f64, grid_resolution: f64) -> Result<f64> {
    validate_weights(alphas)?;
    let k = alphas.len();
    if k == 0 {
        return Err(Error::Domain("no weights".to_string()));
    }
    if k > 4 {
        return Err(Error::InstanceTooLarge(format!(
            "numeric envelope oracle supports k <= 4 (got {k})"
        )));
    }
    if !(grid_resolution > 0.0) {
        return Err(Error::Domain(format!(
            "grid resolution must be positive (got {grid_resolution})"
        )));
    }
    if w < 0.0 {
        return Err(Error::Domain(format!("mass {w} is negative")));
    }
    // Reachable cumulative mass after each stage: entering stage i caps the
    // prefix at alpha_i, the stage itself adds at most alpha_i.
    let mut ub = alphas[0];
    for &a in &alphas[1..] {
        ub = ub.min(a) + a;
    }
    if w > ub + 1e-12 {
        return Err(Error::Domain(format!(
            "mass {w} infeasible (reachable maximum {ub})"
        )));
    }
    if k == 1 {
        return Ok(0.0);
    }

    let h = grid_resolution;
    let mut nodes = grid_nodes(alphas[0], h);
    let mut values = vec![0.0; nodes.len()];
    let mut prev_ub = alphas[0];
    for (i, &a) in alphas.iter().enumerate().skip(1) {
        let cap = prev_ub.min(a);
        let stage_ub = cap + a;
        let last = i == k - 1;
        let targets = if last {
            vec![w]
        } else {
            grid_nodes(stage_ub, h)
        };
        let new_values: Vec<f64> = targets
            .iter()
            .map(|&wi| {
                let lo = (wi - a).max(0.0).min(cap);
                let hi = wi.min(cap);
                stage_max(&nodes, &values, a, wi, lo, hi)
            })
            .collect();
        if last {
            return Ok(new_values[0].max(0.0));
        }
        nodes = targets;
        values = new_values;
        prev_ub = stage_ub;
    }
    unreachable!("loop returns at the final stage");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{alpha_table, validate_config, SystemConfig};
    use crate::policy::{
        always_update_policy, compile_three_stage, never_update_policy, ThreeStageSpec,
    };
    use proptest::prelude::*;

    fn cfg(n: usize, k: usize, t: usize, rates: &[(f64, f64)]) -> SystemConfig {
        let sources = rates
            .iter()
            .map(|&(mu, lambda)| SourceParams::new(mu, lambda).unwrap())
            .collect();
        validate_config(SystemConfig {
            n_sources: n,
            k_select: k,
            horizon: t,
            rate_budget: 0.1,
            sources,
        })
        .unwrap()
    }

    #[test]
    fn always_update_beta_is_flip_probability() {
        let c = cfg(1, 1, 40, &[(0.12, 0.31)]);
        let p = c.source(1);
        let policy = always_update_policy(&c);
        let s = propagate_pair_chain(p, policy.source(1), c.horizon).unwrap();
        let flip = 2.0 * p.mu * p.lambda / p.zeta;
        assert_eq!(s.expected_update(1), 0.0);
        for t in 1..=c.horizon {
            assert!((s.beta(t) - flip).abs() < 1e-12, "t = {t}");
            if t >= 2 {
                assert!((s.expected_update(t) - flip).abs() < 1e-12, "t = {t}");
            }
        }
    }

    #[test]
    fn never_update_beta_follows_geometric_recursion() {
        let c = cfg(1, 1, 200, &[(0.2, 0.35)]);
        let p = c.source(1);
        let policy = never_update_policy(&c);
        let s = propagate_pair_chain(p, policy.source(1), c.horizon).unwrap();
        let step = 2.0 * p.mu * p.lambda / p.zeta;
        let mut expected = 0.0;
        for t in 1..=c.horizon {
            expected = expected * (1.0 - p.zeta) + step;
            assert!((s.beta(t) - expected).abs() < 1e-12, "t = {t}");
            assert_eq!(s.expected_update(t), 0.0);
        }
        let limit = step / p.zeta;
        assert!((s.beta(c.horizon) - limit).abs() < 1e-9);
    }

    #[test]
    fn one_sided_policy_converges_to_stationary_mismatch() {
        let c = cfg(1, 1, 400, &[(0.15, 0.3)]);
        let p = c.source(1);
        let spec = ThreeStageSpec::for_config(&c, vec![0]).unwrap();
        let policy = compile_three_stage(&c, &spec).unwrap();
        let s = propagate_pair_chain(p, policy.source(1), c.horizon).unwrap();
        assert!((s.beta(c.horizon) - beta_steady_state_one_sided(p)).abs() < 1e-9);
    }

    #[test]
    fn one_sided_stationary_examples() {
        let p = SourceParams::new(0.2, 0.2).unwrap();
        assert!((beta_steady_state_one_sided(&p) - 0.5).abs() < 1e-15);
        let p = SourceParams::new(0.1, 0.3).unwrap();
        assert!((beta_steady_state_one_sided(&p) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn rho_examples() {
        // Two sources, each free with stationary probability 1/2, K = 1.
        let c = cfg(2, 1, 4, &[(0.2, 0.2), (0.2, 0.2)]);
        let alpha = alpha_table(&c);
        assert!((alpha.alpha(2) - 0.5).abs() < 1e-15);

        // Candidates: 1, 0.5 + 1*0.2, and the union bound 1*0.2 + 0.5*0.9.
        let r = rho_at(&alpha, &[0.2, 0.9]).unwrap();
        assert_eq!(r.rho_per_m.len(), 3);
        assert!((r.rho_per_m[0] - 1.0).abs() < 1e-15);
        assert!((r.rho_per_m[1] - 0.7).abs() < 1e-15);
        assert!((r.rho_per_m[2] - 0.65).abs() < 1e-15);
        assert!((r.rho - 0.65).abs() < 1e-15);
        assert_eq!(r.m_star, 3);
        assert_eq!(r.lower, r.rho / 4.0);
        assert_eq!(r.upper, r.rho);
        assert!(!r.is_tail(1));
        assert!(!r.is_tail(2));

        // Zero mismatch everywhere: a synchronized monitor never errs, and
        // only the no-tail candidate reaches zero.
        let r = rho_at(&alpha, &[0.0, 0.0]).unwrap();
        assert_eq!(r.rho, 0.0);
        assert_eq!(r.m_star, 3);

        // Single source with K = 1: the error probability is exactly beta_1
        // and the union-bound candidate reproduces it.
        let c = cfg(1, 1, 4, &[(0.2, 0.2)]);
        let r = rho_at(&alpha_table(&c), &[0.3]).unwrap();
        assert!((r.rho - 0.3).abs() < 1e-15);
        assert_eq!(r.m_star, 2);

        // Three sources: lumping sources 2 and 3 into the tail beats keeping
        // them once their combined weighted mismatch exceeds alpha_2.
        let c = cfg(3, 1, 4, &[(0.2, 0.2), (0.2, 0.2), (0.2, 0.2)]);
        let alpha = alpha_table(&c);
        assert!((alpha.alpha(3) - 0.25).abs() < 1e-15);
        let r = rho_at(&alpha, &[0.1, 0.9, 0.9]).unwrap();
        assert!((r.rho_per_m[0] - 1.0).abs() < 1e-15);
        assert!((r.rho_per_m[1] - 0.6).abs() < 1e-15);
        assert!((r.rho_per_m[2] - 0.8).abs() < 1e-15);
        assert!((r.rho_per_m[3] - 0.775).abs() < 1e-15);
        assert!((r.rho - 0.6).abs() < 1e-15);
        assert_eq!(r.m_star, 2);
        assert!(!r.is_tail(1));
        assert!(r.is_tail(2));
        assert!(r.is_tail(3));
    }

    #[test]
    fn rho_ties_break_to_smallest_m() {
        // beta_2 = 1 makes the m = 2 cut and the union bound coincide.
        let c = cfg(2, 1, 4, &[(0.2, 0.2), (0.2, 0.2)]);
        let alpha = alpha_table(&c);
        let r = rho_at(&alpha, &[0.2, 1.0]).unwrap();
        assert!((r.rho_per_m[1] - 0.7).abs() < 1e-15);
        assert!((r.rho_per_m[2] - 0.7).abs() < 1e-15);
        assert!((r.rho - 0.7).abs() < 1e-15);
        assert_eq!(r.m_star, 2);
    }

    #[test]
    fn approx_objective_matches_constant_slot_value() {
        let c = cfg(2, 1, 30, &[(0.12, 0.3), (0.25, 0.4)]);
        let alpha = alpha_table(&c);
        let policy = always_update_policy(&c);
        let series: Vec<_> = (1..=2)
            .map(|n| propagate_pair_chain(c.source(n), policy.source(n), c.horizon).unwrap())
            .collect();
        let obj = approx_objective(&alpha, &series).unwrap();
        let at_t1 = rho_at(&alpha, &[series[0].beta(1), series[1].beta(1)])
            .unwrap()
            .rho;
        assert!((obj - at_t1).abs() < 1e-12);
    }

    #[test]
    fn analysis_csv_has_row_per_slot() {
        let c = cfg(2, 1, 5, &[(0.12, 0.3), (0.25, 0.4)]);
        let alpha = alpha_table(&c);
        let policy = always_update_policy(&c);
        let series: Vec<_> = (1..=2)
            .map(|n| propagate_pair_chain(c.source(n), policy.source(n), c.horizon).unwrap())
            .collect();
        let mut buf = Vec::new();
        write_analysis_csv(&mut buf, &alpha, &series).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(
            lines[0],
            "t,beta_1,beta_2,expected_update_1,expected_update_2,rho,m_star,lower,upper"
        );
        assert!(lines[1].starts_with("1,"));
    }

    #[test]
    fn envelope_closed_form_examples() {
        let v = fk_closed_form(&[1.0, 0.5], 0.5).unwrap();
        assert!((v - 0.125).abs() < 1e-15);

        let v = fk_closed_form(&[1.0, 0.6, 0.4], 0.3).unwrap();
        let oracle = fk_numeric_max(&[1.0, 0.6, 0.4], 0.3, 1e-3).unwrap();
        assert!((v - oracle).abs() < 1e-6, "closed {v} vs oracle {oracle}");
    }

    #[test]
    fn envelope_rejects_bad_domains() {
        assert!(fk_closed_form(&[1.0, 0.5], 0.6).is_err());
        assert!(fk_closed_form(&[1.0, 0.5], -0.1).is_err());
        assert!(fk_closed_form(&[0.5, 0.8], 0.1).is_err());
        assert!(fk_closed_form(&[1.0], 0.0).is_err());
        assert!(fk_numeric_max(&[1.0, 0.5], 2.0, 1e-3).is_err());
        assert!(fk_numeric_max(&[1.0; 5], 0.1, 1e-3).is_err());
    }

    #[test]
    fn envelope_numeric_zero_mass_is_zero() {
        let v = fk_numeric_max(&[1.0, 0.6, 0.4], 0.0, 1e-3).unwrap();
        assert_eq!(v, 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn pair_chain_distributions_stay_on_simplex(
            mu in 0.01f64..0.49,
            lambda in 0.01f64..0.49,
            decisions in prop::collection::vec((any::<bool>(), any::<bool>()), 1..=20),
        ) {
            let p = SourceParams::new(mu, lambda).unwrap();
            let table = crate::policy::SourceDecisionTable::from_mismatch_decisions(&decisions);
            let s = propagate_pair_chain(&p, &table, decisions.len()).unwrap();
            for t in 0..=decisions.len() {
                let d = s.dist[t];
                prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(d.iter().all(|&m| (-1e-15..=1.0 + 1e-12).contains(&m)));
                prop_assert!((0.0..=1.0 + 1e-12).contains(&s.beta(t)));
                prop_assert!((0.0..=1.0 + 1e-12).contains(&s.expected_update(t)));
            }
        }

        #[test]
        fn rho_is_monotone_in_pointwise_beta_decrease(
            betas in prop::collection::vec(0.0f64..1.0, 3),
            shrink in prop::collection::vec(0.0f64..=1.0, 3),
        ) {
            let c = cfg(3, 2, 4, &[(0.1, 0.3), (0.2, 0.2), (0.3, 0.15)]);
            let alpha = alpha_table(&c);
            let smaller: Vec<f64> =
                betas.iter().zip(&shrink).map(|(b, s)| b * s).collect();
            let hi = rho_at(&alpha, &betas).unwrap().rho;
            let lo = rho_at(&alpha, &smaller).unwrap().rho;
            prop_assert!(lo <= hi + 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn envelope_closed_form_tracks_numeric_oracle(
            k in 2usize..=4,
            steps in prop::collection::vec(0.4f64..1.0, 3),
            frac in 0.0f64..=1.0,
        ) {
            let mut alphas = vec![1.0];
            for i in 1..k {
                let last = *alphas.last().unwrap();
                alphas.push(last * steps[i - 1]);
            }
            let w = frac * alphas[k - 1];
            let closed = fk_closed_form(&alphas, w).unwrap();
            let numeric = fk_numeric_max(&alphas, w, 2e-3).unwrap();
            prop_assert!((closed - numeric).abs() < 1e-4,
                "closed {closed} vs numeric {numeric} (alphas {alphas:?}, w {w})");
            prop_assert!(closed <= w / 2.0 + 1e-12);
            prop_assert!(numeric <= w / 2.0 + 1e-12);
        }
    }
}
