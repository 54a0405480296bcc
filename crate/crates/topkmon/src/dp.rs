//! Per-source finite-horizon Lagrangian dynamic program.
//!
//! For one source with per-slot weights `alpha_star(t)` in `{0, alpha}` and a
//! multiplier `gamma >= 0`, the program minimizes
//! `Σ_t alpha_star(t) beta(t) + gamma E[U(t)]` over per-slot mismatch update
//! decisions. A backward recursion over the four pair states yields the value,
//! the optimal decision table, and the gap series whose thresholds define the
//! policy. The module also machine-checks the structural properties of that
//! policy (mismatch dominance, the gap bound, update persistence, tail
//! silence, and the both-update prefix) and provides an exhaustive oracle and
//! a rate calibration over `gamma`.

use serde::Serialize;

use crate::analysis::propagate_pair_chain;
use crate::model::SourceParams;
use crate::policy::{pair_index, SourceDecisionTable};
use crate::{Error, Result};

const P00: usize = pair_index(0, 0);
const P01: usize = pair_index(0, 1);
const P10: usize = pair_index(1, 0);
const P11: usize = pair_index(1, 1);

/// Per-slot error weights of one source: `alpha` while the source is outside
/// the tail, exactly 0 inside it.
#[derive(Debug, Clone, PartialEq)]
pub struct TailProfile {
    alpha: f64,
    /// `values[t - 1]` is `alpha_star(t)`, each exactly `0` or `alpha`.
    values: Vec<f64>,
}

impl TailProfile {
    /// Builds a profile, requiring every entry to be exactly 0 or `alpha`.
    pub fn new(alpha: f64, values: Vec<f64>) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Domain(format!("weight {alpha} outside [0, 1]")));
        }
        if values.is_empty() {
            return Err(Error::Domain("tail profile has no slots".to_string()));
        }
        if let Some(t) = values.iter().position(|&v| v != 0.0 && v != alpha) {
            return Err(Error::Domain(format!(
                "alpha_star({}) = {} is neither 0 nor {alpha}",
                t + 1,
                values[t]
            )));
        }
        Ok(Self { alpha, values })
    }

    /// Profile equal to `alpha` for `t <= active` and 0 afterwards.
    pub fn constant_then_zero(alpha: f64, active: usize, horizon: usize) -> Result<Self> {
        if active > horizon {
            return Err(Error::Domain(format!(
                "active prefix {active} exceeds horizon {horizon}"
            )));
        }
        let mut values = vec![alpha; active];
        values.resize(horizon, 0.0);
        Self::new(alpha, values)
    }

    /// The out-of-tail weight `alpha`.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Number of slots T.
    pub fn horizon(&self) -> usize {
        self.values.len()
    }

    /// `alpha_star(t)` for `t` in `1..=T`.
    pub fn alpha_star(&self, t: usize) -> f64 {
        self.values[t - 1]
    }

    /// Whether the profile is an `alpha`-prefix followed by a zero suffix
    /// (all-`alpha` and all-zero both qualify).
    pub fn is_constant_then_zero(&self) -> bool {
        let first_zero = self
            .values
            .iter()
            .position(|&v| v == 0.0)
            .unwrap_or(self.values.len());
        self.values[first_zero..].iter().all(|&v| v == 0.0)
            && (self.alpha != 0.0 || first_zero == 0)
    }

    /// First slot from which every later weight is zero (`T + 1` if none).
    pub fn zero_suffix_start(&self) -> usize {
        let mut start = self.values.len() + 1;
        for (i, &v) in self.values.iter().enumerate().rev() {
            if v != 0.0 {
                break;
            }
            start = i + 1;
        }
        start
    }
}

/// Backward-recursion tables of the per-source program, exposed for the
/// structural property checks.
#[derive(Debug, Clone, PartialEq)]
pub struct DpTables {
    /// `tau[t - 1][pair]` is the cost-to-go of pair state `pair` at slot `t`.
    pub tau: Vec<[f64; 4]>,
    /// `delta01[t - 1]` is the gap `tau(01) - tau(00)` at slot `t`, computed
    /// by its own recursion `alpha_star(t) + min(gamma, omega(t + 1))`.
    pub delta01: Vec<f64>,
    /// `delta10[t - 1]` is the gap `tau(10) - tau(11)` at slot `t`.
    pub delta10: Vec<f64>,
    /// `delta[t - 1] = delta01[t - 1] + delta10[t - 1]`.
    pub delta: Vec<f64>,
    /// Multiplier the tables were built with.
    pub gamma: f64,
    /// `omega_series[t - 1] = delta01(t) - mu * delta(t)`; the slot-t update
    /// threshold for the (0, 1) pair.
    pub omega_series: Vec<f64>,
    /// `upsilon_series[t - 1] = delta10(t) - lambda * delta(t)`.
    pub upsilon_series: Vec<f64>,
}

/// Output of [`solve_single_source_dp`].
#[derive(Debug, Clone)]
pub struct DpSolution {
    pub tables: DpTables,
    /// Optimal decision table: update in `(0, 1)` at slot t iff
    /// `gamma < omega(t)`, in `(1, 0)` iff `gamma < upsilon(t)`; ties keep
    /// silent; matched pairs never update.
    pub policy: SourceDecisionTable,
    /// Minimum Lagrangian cost `Σ_t alpha_star(t) beta(t) + gamma E[U(t)]`.
    pub value: f64,
}

/// Solves the per-source program by backward recursion from `t = T`.
///
/// Terminal condition: mismatched pairs cost `alpha_star(T)`, matched pairs
/// cost 0. For `t < T` the recursion adds the slot cost, the expected
/// continuation under the kernel row of the current source state, and the
/// cheaper of updating (`gamma`) versus staying (the gap threshold).
pub fn solve_single_source_dp(
    p: &SourceParams,
    tail: &TailProfile,
    gamma: f64,
) -> Result<DpSolution> {
    if !(gamma >= 0.0) {
        return Err(Error::Domain(format!(
            "multiplier gamma must be nonnegative (got {gamma})"
        )));
    }
    let t_max = tail.horizon();
    let (mu, lambda) = (p.mu, p.lambda);

    let mut tau = vec![[0.0f64; 4]; t_max];
    let mut delta01 = vec![0.0f64; t_max];
    let mut delta10 = vec![0.0f64; t_max];
    let a_term = tail.alpha_star(t_max);
    tau[t_max - 1] = [0.0, a_term, a_term, 0.0];
    delta01[t_max - 1] = a_term;
    delta10[t_max - 1] = a_term;

    for s in (1..t_max).rev() {
        let next = tau[s];
        let d = delta01[s] + delta10[s];
        let omega = delta01[s] - mu * d;
        let upsilon = delta10[s] - lambda * d;
        let a = tail.alpha_star(s);
        let busy_row = (1.0 - mu) * next[P00] + mu * next[P10];
        let free_row = (1.0 - lambda) * next[P11] + lambda * next[P01];
        let mut cur = [0.0; 4];
        cur[P00] = busy_row;
        cur[P01] = a + busy_row + gamma.min(omega);
        cur[P10] = a + free_row + gamma.min(upsilon);
        cur[P11] = free_row;
        tau[s - 1] = cur;
        delta01[s - 1] = a + gamma.min(omega);
        delta10[s - 1] = a + gamma.min(upsilon);
    }

    let delta: Vec<f64> = delta01
        .iter()
        .zip(&delta10)
        .map(|(a, b)| a + b)
        .collect();
    let omega_series: Vec<f64> = delta01
        .iter()
        .zip(&delta)
        .map(|(d01, d)| d01 - mu * d)
        .collect();
    let upsilon_series: Vec<f64> = delta10
        .iter()
        .zip(&delta)
        .map(|(d10, d)| d10 - lambda * d)
        .collect();

    let decisions: Vec<(bool, bool)> = omega_series
        .iter()
        .zip(&upsilon_series)
        .map(|(&w, &u)| (gamma < w, gamma < u))
        .collect();
    let policy = SourceDecisionTable::from_mismatch_decisions(&decisions);

    let free = mu / p.zeta;
    let p_xy1 = [
        (1.0 - free) * (1.0 - mu),
        free * lambda,
        (1.0 - free) * mu,
        free * (1.0 - lambda),
    ];
    let value = tau[0]
        .iter()
        .zip(p_xy1)
        .map(|(t, q)| t * q)
        .sum();

    Ok(DpSolution {
        tables: DpTables {
            tau,
            delta01,
            delta10,
            delta,
            gamma,
            omega_series,
            upsilon_series,
        },
        policy,
        value,
    })
}

/// Outcome of one structural property check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PropertyStatus {
    Held,
    /// First violation, with a `(t, state)` witness.
    Violated { witness: String },
    /// Not applicable to this instance (with the reason).
    Skipped { reason: String },
}

/// Named result of one property.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PropertyCheck {
    pub name: &'static str,
    pub status: PropertyStatus,
}

/// Report of all structural properties for one solved instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StructuralReport {
    pub properties: Vec<PropertyCheck>,
}

impl StructuralReport {
    /// First violated property, if any.
    pub fn first_violation(&self) -> Option<&PropertyCheck> {
        self.properties
            .iter()
            .find(|p| matches!(p.status, PropertyStatus::Violated { .. }))
    }

    /// Whether every applicable property held.
    pub fn all_hold(&self) -> bool {
        self.first_violation().is_none()
    }
}

impl std::fmt::Display for StructuralReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for p in &self.properties {
            match &p.status {
                PropertyStatus::Held => writeln!(f, "{}: ok", p.name)?,
                PropertyStatus::Violated { witness } => {
                    writeln!(f, "{}: VIOLATED ({witness})", p.name)?
                }
                PropertyStatus::Skipped { reason } => {
                    writeln!(f, "{}: skipped ({reason})", p.name)?
                }
            }
        }
        Ok(())
    }
}

/// Slack for inequality checks on quantities assembled from the recursion.
const GAP_TOL: f64 = 1e-9;

/// Machine-checks the structural properties of a solved instance:
///
/// 1. `mismatch_dominance`: with `lambda >= mu`, the (0, 1) decision
///    dominates the (1, 0) decision at every slot, via `omega(t) >=
///    upsilon(t)` and `omega(t) >= 0`; mirrored when `mu > lambda`.
/// 2. `gap_bound`: `delta(t) <= 2 alpha / zeta` at every slot.
/// 3. `update_persistence`: outside the tail (`alpha_star(t) = alpha`), a
///    state that updates at `t + 1` also updates at `t`.
/// 4. `tail_silence`: once every remaining weight is zero, nothing updates.
/// 5. `both_update_prefix`: slots where both mismatch states update form a
///    prefix of `1..=T`.
///
/// Properties 3 and 5 are asserted only for constant-then-zero profiles, the
/// shape produced by tail optimization; the others hold for arbitrary
/// profiles.
pub fn check_structural_properties(
    p: &SourceParams,
    tail: &TailProfile,
    tables: &DpTables,
    policy: &SourceDecisionTable,
) -> StructuralReport {
    let t_max = tail.horizon();
    let monotone = tail.is_constant_then_zero();
    let mut properties = Vec::with_capacity(5);

    let dominance = {
        let swap = p.mu > p.lambda;
        // Dominant state thresholds first: (0, 1) when lambda >= mu.
        let mut status = PropertyStatus::Held;
        for t in 1..=t_max {
            let (hi, lo) = if swap {
                (tables.upsilon_series[t - 1], tables.omega_series[t - 1])
            } else {
                (tables.omega_series[t - 1], tables.upsilon_series[t - 1])
            };
            let (u_hi, u_lo) = {
                let row = policy.row(t);
                if swap {
                    (row[P10], row[P01])
                } else {
                    (row[P01], row[P10])
                }
            };
            if hi < -GAP_TOL || hi - lo < -GAP_TOL || (u_lo && !u_hi) {
                status = PropertyStatus::Violated {
                    witness: format!(
                        "t = {t}: omega/upsilon = {}/{}, decisions (01)/(10) = {}/{}",
                        tables.omega_series[t - 1],
                        tables.upsilon_series[t - 1],
                        policy.row(t)[P01] as u8,
                        policy.row(t)[P10] as u8
                    ),
                };
                break;
            }
        }
        status
    };
    properties.push(PropertyCheck {
        name: "mismatch_dominance",
        status: dominance,
    });

    let bound = 2.0 * tail.alpha() / p.zeta;
    let gap = tables
        .delta
        .iter()
        .enumerate()
        .find(|(_, &d)| d > bound + GAP_TOL)
        .map_or(PropertyStatus::Held, |(i, &d)| PropertyStatus::Violated {
            witness: format!("t = {}: delta = {d} exceeds {bound}", i + 1),
        });
    properties.push(PropertyCheck {
        name: "gap_bound",
        status: gap,
    });

    let persistence = if monotone {
        let mut status = PropertyStatus::Held;
        'outer: for t in 1..t_max {
            if tail.alpha_star(t) != tail.alpha() {
                continue;
            }
            for (state, label) in [(P01, "(0,1)"), (P10, "(1,0)")] {
                if policy.row(t + 1)[state] && !policy.row(t)[state] {
                    status = PropertyStatus::Violated {
                        witness: format!("t = {t}, state = {label}: successor updates, slot does not"),
                    };
                    break 'outer;
                }
            }
        }
        status
    } else {
        PropertyStatus::Skipped {
            reason: "profile is not constant-then-zero".to_string(),
        }
    };
    properties.push(PropertyCheck {
        name: "update_persistence",
        status: persistence,
    });

    let silence_from = tail.zero_suffix_start();
    let mut silence = PropertyStatus::Held;
    'silence: for t in silence_from..=t_max {
        for (state, label) in [(P01, "(0,1)"), (P10, "(1,0)")] {
            if policy.row(t)[state] {
                silence = PropertyStatus::Violated {
                    witness: format!(
                        "t = {t}, state = {label}: updates although all remaining weights are zero"
                    ),
                };
                break 'silence;
            }
        }
    }
    properties.push(PropertyCheck {
        name: "tail_silence",
        status: silence,
    });

    let prefix = if monotone {
        let mut boundary_seen = false;
        let mut status = PropertyStatus::Held;
        for t in 1..=t_max {
            let both = policy.row(t)[P01] && policy.row(t)[P10];
            if !both {
                boundary_seen = true;
            } else if boundary_seen {
                status = PropertyStatus::Violated {
                    witness: format!("t = {t}: both states update after a one-sided slot"),
                };
                break;
            }
        }
        status
    } else {
        PropertyStatus::Skipped {
            reason: "profile is not constant-then-zero".to_string(),
        }
    };
    properties.push(PropertyCheck {
        name: "both_update_prefix",
        status: prefix,
    });

    StructuralReport { properties }
}

/// Lagrangian cost of an arbitrary decision table, evaluated exactly.
pub fn lagrangian_cost(
    p: &SourceParams,
    tail: &TailProfile,
    gamma: f64,
    table: &SourceDecisionTable,
) -> Result<f64> {
    let series = propagate_pair_chain(p, table, tail.horizon())?;
    Ok((1..=tail.horizon())
        .map(|t| tail.alpha_star(t) * series.beta(t) + gamma * series.expected_update(t))
        .sum())
}

/// Exhaustive minimization over all `4^T` mismatch decision tables.
/// Oracle for the backward recursion; capped at `T <= 8`.
pub fn brute_force_single_source(
    p: &SourceParams,
    tail: &TailProfile,
    gamma: f64,
) -> Result<(SourceDecisionTable, f64)> {
    let t_max = tail.horizon();
    if t_max > 8 {
        return Err(Error::InstanceTooLarge(format!(
            "exhaustive policy search supports T <= 8 (got {t_max})"
        )));
    }
    let mut best: Option<(SourceDecisionTable, f64)> = None;
    for code in 0u32..(1 << (2 * t_max)) {
        let decisions: Vec<(bool, bool)> = (0..t_max)
            .map(|t| (code >> (2 * t) & 1 == 1, code >> (2 * t + 1) & 1 == 1))
            .collect();
        let table = SourceDecisionTable::from_mismatch_decisions(&decisions);
        let cost = lagrangian_cost(p, tail, gamma, &table)?;
        if best.as_ref().is_none_or(|(_, b)| cost < *b) {
            best = Some((table, cost));
        }
    }
    Ok(best.expect("at least one table enumerated"))
}

/// Largest-rate-not-exceeding calibration of `gamma` against a target
/// per-source update rate.
///
/// The policy's rate is a non-increasing step function of `gamma`, so exact
/// attainment is generally impossible; bisection over `gamma` in
/// `[0, alpha T]` (above which no threshold can trigger) returns the
/// multiplier whose policy rate is the largest that does not exceed the
/// target.
pub fn calibrate_gamma(p: &SourceParams, tail: &TailProfile, target_rate: f64) -> Result<f64> {
    let cap = p.always_update_rate();
    if !(0.0..=cap).contains(&target_rate) {
        return Err(Error::InfeasibleRate(format!(
            "target rate {target_rate} outside [0, {cap}]"
        )));
    }
    let rate_of = |gamma: f64| -> Result<f64> {
        let sol = solve_single_source_dp(p, tail, gamma)?;
        let series = propagate_pair_chain(p, &sol.policy, tail.horizon())?;
        Ok(series.update_rate())
    };
    if rate_of(0.0)? <= target_rate {
        return Ok(0.0);
    }
    let mut lo = 0.0;
    let mut hi = tail.alpha() * tail.horizon() as f64;
    debug_assert!(rate_of(hi)? <= target_rate);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if rate_of(mid)? <= target_rate {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
