//! Monte Carlo and exact small-instance evaluation of the operational
//! measures: the time-averaged top-K error probability and the update rate
//! of any tabular policy.
//!
//! Episodes are independent units of work on private RNG streams, and the
//! aggregation is a sum of integer counters, so parallel and serial runs
//! produce bit-identical estimates.

use crate::model::{steady_state_free_prob, stream_rng, SeedRecord, SystemConfig};
use crate::policy::{decide, TabularPolicy};
use crate::{Error, Result};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

/// Error event for one time slot: the ranked availability prefix ending at
/// the K-th free source differs anywhere between truth and the monitor's
/// copy. Compares the full prefixes `1..V`, with `V` the smallest index
/// whose prefix holds K free sources (the whole vector when fewer than K
/// are free), so a mismatch at a busy position inside the prefix counts.
pub fn top_k_error_at(x_vec: &[u8], y_vec: &[u8], k: usize) -> bool {
    debug_assert_eq!(x_vec.len(), y_vec.len());
    let mut v = x_vec.len();
    let mut free = 0usize;
    for (i, &x) in x_vec.iter().enumerate() {
        free += usize::from(x);
        if free >= k {
            v = i + 1;
            break;
        }
    }
    x_vec[..v] != y_vec[..v]
}

/// One simulated horizon under a fixed policy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeResult {
    /// `per_t_error[t - 1]` is the top-K error event at slot `t`; slot 0 is
    /// error-free by construction and carries no entry.
    pub per_t_error: Vec<bool>,
    /// Total updates sent across all sources and slots; at most `N * T`.
    pub update_count: u64,
    /// The stream that produced this episode.
    pub seed: SeedRecord,
}

/// Simulates `t = 0..=T`: the truth starts from steady state with the
/// monitor synchronized, each slot decides from the previous pair state,
/// applies accepted updates, then advances the truth. The draw order (one
/// uniform per source for the start, one per source per slot) matches the
/// trajectory sampler, so a shared seed yields the same truth path.
pub fn run_episode(
    cfg: &SystemConfig,
    policy: &TabularPolicy,
    seed: SeedRecord,
) -> Result<EpisodeResult> {
    let mut rng = stream_rng(seed.master, seed.stream);
    let n = cfg.n_sources;
    let mut x = vec![0u8; n];
    for (i, xi) in x.iter_mut().enumerate() {
        *xi = u8::from(rng.random::<f64>() < steady_state_free_prob(&cfg.sources[i]));
    }
    let mut y = x.clone();
    let mut per_t_error = Vec::with_capacity(cfg.horizon);
    let mut update_count = 0u64;
    for t in 1..=cfg.horizon {
        for i in 0..n {
            if decide(policy, i + 1, t, x[i], y[i])? {
                y[i] = x[i];
                update_count += 1;
            }
        }
        for (i, xi) in x.iter_mut().enumerate() {
            let p = &cfg.sources[i];
            let flip = if *xi == 1 { p.lambda } else { p.mu };
            if rng.random::<f64>() < flip {
                *xi = 1 - *xi;
            }
        }
        per_t_error.push(top_k_error_at(&x, &y, cfg.k_select));
    }
    Ok(EpisodeResult {
        per_t_error,
        update_count,
        seed,
    })
}

/// A mean with its standard error under the normal approximation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

/// Aggregated Monte Carlo estimates over independent episodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McEstimate {
    /// Time-averaged error probability `(1/T) sum_t 1{error at t}`.
    pub error_prob: MeanSe,
    /// Update rate `(1/T) sum_t sum_n U_n(t)`.
    pub update_rate: MeanSe,
    /// `per_t_error_freq[t - 1]` is the empirical error frequency at slot `t`.
    pub per_t_error_freq: Vec<f64>,
    pub trials: u64,
}

/// Integer counters summed across episodes. Addition of counters commutes,
/// so any reduction order gives the same totals.
#[derive(Debug, Clone)]
struct TrialTotals {
    err_slots: u64,
    err_slots_sq: u64,
    updates: u64,
    updates_sq: u64,
    per_t: Vec<u64>,
}

impl TrialTotals {
    fn zero(horizon: usize) -> Self {
        TrialTotals {
            err_slots: 0,
            err_slots_sq: 0,
            updates: 0,
            updates_sq: 0,
            per_t: vec![0; horizon],
        }
    }

    fn absorb(mut self, episode: &EpisodeResult) -> Self {
        let errs = episode.per_t_error.iter().filter(|&&e| e).count() as u64;
        self.err_slots += errs;
        self.err_slots_sq += errs * errs;
        self.updates += episode.update_count;
        self.updates_sq += episode.update_count * episode.update_count;
        for (slot, &e) in self.per_t.iter_mut().zip(&episode.per_t_error) {
            *slot += u64::from(e);
        }
        self
    }

    fn merge(mut self, other: &TrialTotals) -> Self {
        self.err_slots += other.err_slots;
        self.err_slots_sq += other.err_slots_sq;
        self.updates += other.updates;
        self.updates_sq += other.updates_sq;
        for (slot, &o) in self.per_t.iter_mut().zip(&other.per_t) {
            *slot += o;
        }
        self
    }
}

/// Mean and standard error of per-episode values `count / horizon` given
/// integer sums of counts and squared counts.
fn mean_se(sum: u64, sum_sq: u64, trials: u64, horizon: usize) -> MeanSe {
    let m = trials as f64;
    let t = horizon as f64;
    let mean = sum as f64 / (m * t);
    let se = if trials > 1 {
        let sq_mean = sum_sq as f64 / (m * t * t);
        let var = ((sq_mean - mean * mean) * m / (m - 1.0)).max(0.0);
        (var / m).sqrt()
    } else {
        0.0
    };
    MeanSe { mean, se }
}

fn finalize(totals: TrialTotals, trials: u64, horizon: usize) -> McEstimate {
    McEstimate {
        error_prob: mean_se(totals.err_slots, totals.err_slots_sq, trials, horizon),
        update_rate: mean_se(totals.updates, totals.updates_sq, trials, horizon),
        per_t_error_freq: totals
            .per_t
            .iter()
            .map(|&c| c as f64 / trials as f64)
            .collect(),
        trials,
    }
}

/// Independent episodes on streams `0..trials` of `seed`, aggregated into
/// means and standard errors. Identical `(cfg, policy, trials, seed)`
/// produce bit-identical output regardless of thread count.
pub fn monte_carlo(
    cfg: &SystemConfig,
    policy: &TabularPolicy,
    trials: u64,
    seed: u64,
) -> Result<McEstimate> {
    if trials == 0 {
        return Err(Error::Domain("trial count must be at least 1".into()));
    }
    let totals = (0..trials)
        .into_par_iter()
        .try_fold(
            || TrialTotals::zero(cfg.horizon),
            |acc, stream| {
                let episode = run_episode(
                    cfg,
                    policy,
                    SeedRecord {
                        master: seed,
                        stream,
                    },
                )?;
                Ok::<_, Error>(acc.absorb(&episode))
            },
        )
        .try_reduce(
            || TrialTotals::zero(cfg.horizon),
            |a, b| Ok(a.merge(&b)),
        )?;
    Ok(finalize(totals, trials, cfg.horizon))
}

/// Exact evaluation of a small instance by propagating the joint
/// distribution over all `4^N` pair states.
#[derive(Debug, Clone, Serialize)]
pub struct ExactJoint {
    /// `per_t_error[t - 1]` is the exact top-K error probability at slot `t`.
    pub per_t_error: Vec<f64>,
    /// Time average of the per-slot error probabilities.
    pub error_prob: f64,
    /// Exact expected update rate `(1/T) sum_t sum_n E[U_n(t)]`.
    pub update_rate: f64,
}

const MAX_EXACT_SOURCES: usize = 4;
const MAX_EXACT_HORIZON: usize = 12;

fn joint_pair(code: usize, i: usize) -> usize {
    (code >> (2 * i)) & 3
}

/// Ground-truth oracle for the error probability itself: propagates the
/// exact joint pair-state distribution slot by slot and sums the top-K
/// error event over joint states, with no sampling error. The state space
/// is `4^N`, so the instance is capped at 4 sources and horizon 12.
pub fn exact_joint_evaluation(cfg: &SystemConfig, policy: &TabularPolicy) -> Result<ExactJoint> {
    let n = cfg.n_sources;
    if n > MAX_EXACT_SOURCES || cfg.horizon > MAX_EXACT_HORIZON {
        return Err(Error::InstanceTooLarge(format!(
            "exact joint evaluation supports at most {MAX_EXACT_SOURCES} sources and \
             horizon {MAX_EXACT_HORIZON} (got {n} and {})",
            cfg.horizon
        )));
    }
    let states = 1usize << (2 * n);
    let error_event: Vec<bool> = (0..states)
        .map(|code| {
            let x: Vec<u8> = (0..n).map(|i| (joint_pair(code, i) >> 1) as u8).collect();
            let y: Vec<u8> = (0..n).map(|i| (joint_pair(code, i) & 1) as u8).collect();
            top_k_error_at(&x, &y, cfg.k_select)
        })
        .collect();

    // Y(0) = X(0): each source starts matched, free with its steady
    // probability.
    let mut dist = vec![0.0f64; states];
    for (code, slot) in dist.iter_mut().enumerate() {
        let mut p = 1.0;
        for i in 0..n {
            let f = steady_state_free_prob(&cfg.sources[i]);
            p *= match joint_pair(code, i) {
                0 => 1.0 - f,
                3 => f,
                _ => 0.0,
            };
        }
        *slot = p;
    }

    let mut per_t_error = Vec::with_capacity(cfg.horizon);
    let mut update_total = 0.0;
    let mut next = vec![0.0f64; states];
    for t in 1..=cfg.horizon {
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let mut row = [false; 4];
            for (pair, slot) in row.iter_mut().enumerate() {
                *slot = decide(policy, i + 1, t, (pair >> 1) as u8, (pair & 1) as u8)?;
            }
            rows.push(row);
        }
        for (code, &p) in dist.iter().enumerate() {
            if p > 0.0 {
                update_total += p
                    * (0..n)
                        .filter(|&i| rows[i][joint_pair(code, i)])
                        .count() as f64;
            }
        }
        // One source at a time: accepted updates move y to the old x, then
        // the truth either stays or flips.
        for i in 0..n {
            let p = &cfg.sources[i];
            next.fill(0.0);
            for (code, &mass) in dist.iter().enumerate() {
                if mass == 0.0 {
                    continue;
                }
                let pair = joint_pair(code, i);
                let (x, y) = ((pair >> 1) as u8, (pair & 1) as u8);
                let y_next = if rows[i][pair] { x } else { y };
                let flip = if x == 1 { p.lambda } else { p.mu };
                let base = code - (pair << (2 * i));
                let stay_pair = ((x as usize) << 1) | y_next as usize;
                let flip_pair = ((1 - x as usize) << 1) | y_next as usize;
                next[base + (stay_pair << (2 * i))] += mass * (1.0 - flip);
                next[base + (flip_pair << (2 * i))] += mass * flip;
            }
            std::mem::swap(&mut dist, &mut next);
        }
        per_t_error.push(
            dist.iter()
                .zip(&error_event)
                .filter(|(_, &e)| e)
                .map(|(&p, _)| p)
                .sum(),
        );
    }
    let t = cfg.horizon as f64;
    Ok(ExactJoint {
        error_prob: per_t_error.iter().sum::<f64>() / t,
        update_rate: update_total / t,
        per_t_error,
    })
}
