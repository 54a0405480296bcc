//! System parameters, the per-source Markov law, steady-state quantities, the
//! prefix relevance weights `alpha`, and reproducible trajectory sampling.
//!
//! Each source n is a two-state Markov chain on {0 = busy, 1 = free} with
//! per-slot transition probabilities `mu` (busy to free) and `lambda` (free to
//! busy). Sources are listed in preference order: index 1 is the most desirable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One source's Markov parameters together with the derived quantities used
/// throughout the crate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(try_from = "RawSourceParams")]
pub struct SourceParams {
    /// Per-slot probability of a busy-to-free transition.
    pub mu: f64,
    /// Per-slot probability of a free-to-busy transition.
    pub lambda: f64,
    /// `mu + lambda`; the pair chain mixes at geometric rate `1 - zeta`.
    pub zeta: f64,
    /// `min(mu, lambda)`; `nu / zeta` is the one-sided policy's stationary mismatch.
    pub nu: f64,
    /// `max(mu, lambda)`.
    pub omega: f64,
}

/// Wire form of [`SourceParams`]: only `mu` and `lambda` are read; the derived
/// fields are recomputed so documents cannot smuggle inconsistent values.
#[derive(Debug, Clone, Copy, Deserialize)]
struct RawSourceParams {
    mu: f64,
    lambda: f64,
}

impl TryFrom<RawSourceParams> for SourceParams {
    type Error = Error;

    fn try_from(raw: RawSourceParams) -> Result<Self> {
        SourceParams::new(raw.mu, raw.lambda)
    }
}

impl SourceParams {
    /// Builds validated parameters. Both rates must lie strictly inside
    /// (0, 0.5): strict positivity keeps `zeta > 0` (steady state defined, no
    /// absorbing states) and the upper bound keeps every breakpoint positive.
    pub fn new(mu: f64, lambda: f64) -> Result<Self> {
        let mut problems = Vec::new();
        if !(mu > 0.0) {
            problems.push(format!("mu must be > 0 (got {mu})"));
        }
        if !(mu < 0.5) {
            problems.push(format!("mu must be < 0.5 (got {mu})"));
        }
        if !(lambda > 0.0) {
            problems.push(format!("lambda must be > 0 (got {lambda})"));
        }
        if !(lambda < 0.5) {
            problems.push(format!("lambda must be < 0.5 (got {lambda})"));
        }
        if !problems.is_empty() {
            return Err(Error::InvalidConfig(problems));
        }
        Ok(Self {
            mu,
            lambda,
            zeta: mu + lambda,
            nu: mu.min(lambda),
            omega: mu.max(lambda),
        })
    }

    /// Expected number of updates per slot when reporting every state change:
    /// `2 * mu * lambda / zeta`.
    pub fn always_update_rate(&self) -> f64 {
        2.0 * self.mu * self.lambda / self.zeta
    }
}

/// Stationary probability that a source is free: `mu / (mu + lambda)`.
pub fn steady_state_free_prob(p: &SourceParams) -> f64 {
    p.mu / p.zeta
}

/// Entry of the 2x2 transition kernel. States: 0 = busy, 1 = free.
/// Rows: busy -> free with probability `mu`; free -> busy with probability `lambda`.
pub fn transition_prob(p: &SourceParams, from_state: u8, to_state: u8) -> f64 {
    match (from_state, to_state) {
        (0, 0) => 1.0 - p.mu,
        (0, 1) => p.mu,
        (1, 0) => p.lambda,
        (1, 1) => 1.0 - p.lambda,
        _ => panic!("states must be 0 or 1, got ({from_state}, {to_state})"),
    }
}

/// Full system description: N prioritized sources, selection size K, horizon T,
/// and the reporting-rate budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Number of sources N.
    pub n_sources: usize,
    /// Selection size K (the destination wants the top K free sources).
    pub k_select: usize,
    /// Horizon T (slots 1..=T are scored; slot 0 is initialization).
    pub horizon: usize,
    /// Average update budget r: expected updates per slot, summed over sources.
    pub rate_budget: f64,
    /// Sources in preference order; index 1 is the most desirable.
    pub sources: Vec<SourceParams>,
}

impl SystemConfig {
    /// Source n (1-based).
    pub fn source(&self, n: usize) -> &SourceParams {
        &self.sources[n - 1]
    }

    /// Sum of the per-source always-update rates: the budget at which the
    /// rate constraint becomes slack.
    pub fn full_update_rate(&self) -> f64 {
        self.sources.iter().map(|p| p.always_update_rate()).sum()
    }
}

/// Returns the configuration unchanged if all invariants hold; otherwise lists
/// every violated invariant with the offending field.
pub fn validate_config(cfg: SystemConfig) -> Result<SystemConfig> {
    let mut problems = Vec::new();
    if cfg.n_sources == 0 {
        problems.push("n_sources must be >= 1".to_string());
    }
    if cfg.k_select == 0 {
        problems.push("k_select must be >= 1".to_string());
    }
    if cfg.k_select > cfg.n_sources {
        problems.push(format!(
            "k_select exceeds n_sources ({} > {})",
            cfg.k_select, cfg.n_sources
        ));
    }
    if cfg.horizon == 0 {
        problems.push("horizon must be >= 1".to_string());
    }
    if !(cfg.rate_budget >= 0.0) {
        problems.push(format!("rate_budget must be >= 0 (got {})", cfg.rate_budget));
    }
    if cfg.sources.len() != cfg.n_sources {
        problems.push(format!(
            "sources list has {} entries but n_sources is {}",
            cfg.sources.len(),
            cfg.n_sources
        ));
    }
    for (i, s) in cfg.sources.iter().enumerate() {
        if let Err(Error::InvalidConfig(ps)) = SourceParams::new(s.mu, s.lambda) {
            for p in ps {
                problems.push(format!("source {}: {}", i + 1, p));
            }
        }
    }
    if problems.is_empty() {
        Ok(cfg)
    } else {
        Err(Error::InvalidConfig(problems))
    }
}

/// Prefix relevance weights. `alpha(n)` is the stationary probability that
/// fewer than K of the first n-1 sources are free, i.e. the probability that
/// source n is still decision-relevant. `alpha(1) = 1` (empty prefix) and the
/// sentinel `alpha(N+1) = 0` closes telescoping sums.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlphaTable {
    /// `values[i]` holds `alpha(i + 1)` for `i = 0..=N`, so the vector covers
    /// `alpha(1)..=alpha(N + 1)`.
    values: Vec<f64>,
}

impl AlphaTable {
    /// `alpha(n)` for n in 1..=N+1.
    pub fn alpha(&self, n: usize) -> f64 {
        self.values[n - 1]
    }

    /// Number of sources N the table was built for.
    pub fn n_sources(&self) -> usize {
        self.values.len() - 1
    }

    /// `alpha(1)..=alpha(N + 1)` as a slice (index 0 holds `alpha(1)`).
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// Exact Poisson-binomial lower tails via the count-capped prefix recursion.
///
/// `alpha(n) = Pr(B_1 + ... + B_(n-1) < K)` with independent
/// `B_i ~ Bernoulli(mu_i / zeta_i)`. The recursion tracks the distribution of
/// the free-count capped at K (mass at K or above is dropped as it can never
/// return below K), costing O(N * K).
pub fn alpha_table(cfg: &SystemConfig) -> AlphaTable {
    let n = cfg.n_sources;
    let k = cfg.k_select;
    let mut values = Vec::with_capacity(n + 1);
    // Distribution of the prefix free-count over 0..K (counts >= K dropped).
    let mut dist = vec![0.0f64; k];
    dist[0] = 1.0;
    values.push(1.0);
    for i in 1..n {
        let p = steady_state_free_prob(cfg.source(i));
        for j in (0..k).rev() {
            let carried = if j > 0 { dist[j - 1] * p } else { 0.0 };
            dist[j] = dist[j] * (1.0 - p) + carried;
        }
        // The exact sequence is non-increasing in [0, 1]; capping by the
        // previous entry removes summation rounding of order one ulp.
        let prev = *values.last().expect("seeded with alpha(1)");
        values.push(dist.iter().sum::<f64>().min(prev));
    }
    values.push(0.0);
    AlphaTable { values }
}

/// Identifies the RNG stream a trajectory was drawn from, so any single
/// trajectory can be regenerated without replaying the whole batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    /// Master seed shared by the batch.
    pub master: u64,
    /// Stream index of this trajectory within the batch.
    pub stream: u64,
}

/// One sampled availability matrix `X_n(t)` for `t = 0..=T`, `n = 1..=N`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// `availability[t][n - 1]` is `X_n(t)`; row 0 is drawn from steady state.
    pub availability: Vec<Vec<u8>>,
    /// The stream that produced this trajectory.
    pub seed: SeedRecord,
}

/// Per-stream RNG used everywhere sampling occurs: identical (master, stream)
/// pairs produce identical draws, and distinct streams are independent, so
/// parallel and serial generation agree.
pub fn stream_rng(master: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng
}

fn sample_one_trajectory(cfg: &SystemConfig, seed: SeedRecord) -> Trajectory {
    let mut rng = stream_rng(seed.master, seed.stream);
    let n = cfg.n_sources;
    let t_max = cfg.horizon;
    let mut availability = Vec::with_capacity(t_max + 1);
    let mut row = vec![0u8; n];
    for (j, x) in row.iter_mut().enumerate() {
        *x = u8::from(rng.random::<f64>() < steady_state_free_prob(&cfg.sources[j]));
    }
    availability.push(row.clone());
    for _ in 1..=t_max {
        for (j, x) in row.iter_mut().enumerate() {
            let stay = transition_prob(&cfg.sources[j], *x, *x);
            if rng.random::<f64>() >= stay {
                *x = 1 - *x;
            }
        }
        availability.push(row.clone());
    }
    Trajectory { availability, seed }
}

/// Independent trajectories on streams `0..count` of `seed`. Identical
/// `(cfg, count, seed)` produce bit-identical output.
pub fn sample_trajectories(
    cfg: &SystemConfig,
    count: u64,
    seed: u64,
) -> impl Iterator<Item = Trajectory> + '_ {
    (0..count).map(move |stream| {
        sample_one_trajectory(
            cfg,
            SeedRecord {
                master: seed,
                stream,
            },
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(mu: f64, lambda: f64) -> SourceParams {
        SourceParams::new(mu, lambda).expect("valid params")
    }

    fn uniform_cfg(n: usize, k: usize, t: usize, mu: f64, lambda: f64) -> SystemConfig {
        SystemConfig {
            n_sources: n,
            k_select: k,
            horizon: t,
            rate_budget: 0.1,
            sources: vec![params(mu, lambda); n],
        }
    }

    #[test]
    fn validate_accepts_well_formed_config() {
        let cfg = uniform_cfg(3, 1, 10, 0.2, 0.2);
        assert!(validate_config(cfg).is_ok());
    }

    #[test]
    fn validate_reports_k_exceeding_n() {
        let cfg = uniform_cfg(2, 3, 10, 0.2, 0.2);
        let err = validate_config(cfg).unwrap_err();
        assert!(err.to_string().contains("k_select exceeds n_sources"));
    }

    #[test]
    fn validate_reports_mu_bound() {
        let mut cfg = uniform_cfg(2, 1, 10, 0.2, 0.2);
        cfg.sources[0].mu = 0.6;
        let err = validate_config(cfg).unwrap_err();
        assert!(err.to_string().contains("mu must be < 0.5"));
    }

    #[test]
    fn validate_collects_multiple_violations() {
        let mut cfg = uniform_cfg(2, 3, 0, 0.2, 0.2);
        cfg.sources[1].lambda = -0.1;
        let err = validate_config(cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("k_select exceeds n_sources"));
        assert!(msg.contains("horizon"));
        assert!(msg.contains("source 2"));
    }

    #[test]
    fn steady_state_examples() {
        assert_eq!(steady_state_free_prob(&params(0.2, 0.2)), 0.5);
        assert_eq!(steady_state_free_prob(&params(0.1, 0.3)), 0.25);
        assert!((steady_state_free_prob(&params(0.3, 0.1)) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn transition_kernel_entries() {
        let p = params(0.1, 0.3);
        assert_eq!(transition_prob(&p, 1, 0), 0.3);
        assert_eq!(transition_prob(&p, 0, 1), 0.1);
        assert_eq!(transition_prob(&p, 1, 1) + transition_prob(&p, 1, 0), 1.0);
        assert_eq!(transition_prob(&p, 0, 0) + transition_prob(&p, 0, 1), 1.0);
    }

    #[test]
    fn alpha_first_entry_is_one_and_sentinel_zero() {
        let cfg = uniform_cfg(3, 2, 5, 0.1, 0.3);
        let a = alpha_table(&cfg);
        assert_eq!(a.alpha(1), 1.0);
        assert_eq!(a.alpha(4), 0.0);
    }

    #[test]
    fn alpha_single_fair_prefix() {
        let cfg = uniform_cfg(2, 1, 5, 0.2, 0.2);
        let a = alpha_table(&cfg);
        assert!((a.alpha(2) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn alpha_two_source_prefix_below_two() {
        // Prefix free probabilities 0.25 and 0.5; below 2 free unless both free.
        let cfg = SystemConfig {
            n_sources: 3,
            k_select: 2,
            horizon: 5,
            rate_budget: 0.0,
            sources: vec![params(0.1, 0.3), params(0.2, 0.2), params(0.2, 0.2)],
        };
        let a = alpha_table(&cfg);
        assert!((a.alpha(3) - 0.875).abs() < 1e-15);
    }

    /// Exhaustive Poisson-binomial lower tail over all prefix outcomes.
    fn alpha_brute(probs: &[f64], k: usize) -> f64 {
        let m = probs.len();
        let mut total = 0.0;
        for mask in 0u32..(1 << m) {
            let free = mask.count_ones() as usize;
            if free >= k {
                continue;
            }
            let mut w = 1.0;
            for (i, p) in probs.iter().enumerate() {
                w *= if mask >> i & 1 == 1 { *p } else { 1.0 - *p };
            }
            total += w;
        }
        total
    }

    proptest! {
        #[test]
        fn alpha_matches_brute_force_and_is_non_increasing(
            rates in prop::collection::vec((0.01f64..0.49, 0.01f64..0.49), 1..=8),
            k_raw in 1usize..=4,
        ) {
            let n = rates.len();
            let k = k_raw.min(n);
            let sources: Vec<SourceParams> =
                rates.iter().map(|&(m, l)| params(m, l)).collect();
            let cfg = SystemConfig {
                n_sources: n,
                k_select: k,
                horizon: 3,
                rate_budget: 0.0,
                sources,
            };
            let a = alpha_table(&cfg);
            let probs: Vec<f64> =
                cfg.sources.iter().map(steady_state_free_prob).collect();
            for m in 1..=n {
                let brute = alpha_brute(&probs[..m - 1], k);
                prop_assert!((a.alpha(m) - brute).abs() <= 1e-12,
                    "alpha({m}) = {} vs brute {}", a.alpha(m), brute);
                prop_assert!(a.alpha(m) >= 0.0 && a.alpha(m) <= 1.0);
            }
            for m in 1..n {
                prop_assert!(a.alpha(m + 1) <= a.alpha(m) + 1e-15);
            }
            prop_assert_eq!(a.alpha(n + 1), 0.0);
        }
    }

    #[test]
    fn trajectories_are_deterministic_per_seed() {
        let cfg = uniform_cfg(3, 1, 50, 0.1, 0.3);
        let a: Vec<_> = sample_trajectories(&cfg, 4, 99).collect();
        let b: Vec<_> = sample_trajectories(&cfg, 4, 99).collect();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.availability, y.availability);
            assert_eq!(x.seed, y.seed);
        }
        let c: Vec<_> = sample_trajectories(&cfg, 4, 100).collect();
        assert!(a.iter().zip(&c).any(|(x, y)| x.availability != y.availability));
    }

    #[test]
    fn trajectory_marginals_match_steady_state_and_flip_rate() {
        let cfg = uniform_cfg(1, 1, 100_000, 0.1, 0.3);
        let traj = sample_trajectories(&cfg, 1, 7).next().unwrap();
        let t = cfg.horizon;
        let free: usize = traj.availability.iter().map(|r| r[0] as usize).sum();
        let pi = steady_state_free_prob(cfg.source(1));
        let se = (pi * (1.0 - pi) / (t as f64 + 1.0)).sqrt();
        let freq = free as f64 / (t as f64 + 1.0);
        assert!(
            (freq - pi).abs() <= 3.0 * se,
            "stationary frequency {freq} vs {pi} (se {se})"
        );

        let mut from_free = 0usize;
        let mut flips = 0usize;
        for w in traj.availability.windows(2) {
            if w[0][0] == 1 {
                from_free += 1;
                flips += usize::from(w[1][0] == 0);
            }
        }
        let lam = cfg.source(1).lambda;
        let se_f = (lam * (1.0 - lam) / from_free as f64).sqrt();
        let f = flips as f64 / from_free as f64;
        assert!(
            (f - lam).abs() <= 3.0 * se_f,
            "flip frequency {f} vs {lam} (se {se_f})"
        );
    }

    #[test]
    fn initial_state_mean_matches_steady_state() {
        let cfg = uniform_cfg(1, 1, 1, 0.1, 0.3);
        let trials = 100_000u64;
        let free: u64 = sample_trajectories(&cfg, trials, 11)
            .map(|tr| tr.availability[0][0] as u64)
            .sum();
        let pi = steady_state_free_prob(cfg.source(1));
        let se = (pi * (1.0 - pi) / trials as f64).sqrt();
        let freq = free as f64 / trials as f64;
        assert!((freq - pi).abs() <= 3.0 * se);
    }
}
