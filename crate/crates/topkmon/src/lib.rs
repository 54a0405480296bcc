//! Synthesis, exact analysis, and empirical validation of finite-horizon update
//! policies for monitoring N two-state Markov sources under a reporting-rate budget.
//!
//! A destination tracks which of N prioritized sources are free (state 1) versus
//! busy (state 0) through a stale monitoring vector that is only refreshed when a
//! source reports. The quantity of interest is the probability that the stale
//! vector misidentifies the top-K free sources in preference order. This crate
//! provides:
//!
//! - [`model`]: source parameters, the Markov transition law, steady-state
//!   quantities, the prefix relevance weights `alpha`, and trajectory sampling.
//! - [`policy`]: per-source, per-slot decision tables over the joint
//!   (source state, monitor state) pair, including the three-stage policy family
//!   and the always/never baselines.
//! - [`analysis`]: exact pair-chain propagation giving per-slot mismatch
//!   probabilities and update expectations, the `rho` error-probability bounds,
//!   and the quadratic envelope `f_k(w) = w^2 / c_k`.
//! - [`dp`]: the per-source Lagrangian dynamic program, its brute-force oracle,
//!   and machine checks of the structural properties of its optimal policies.
//! - [`kkt`]: the closed-form switch-time synthesis (breakpoints, theta search,
//!   T') and an independent vertex-enumeration LP oracle.
//! - [`sim`]: Monte Carlo and exact joint-distribution evaluation of the true
//!   top-K error probability and update rate.
//! - [`checks`]: the end-to-end verification suite shared by `verify` and the
//!   acceptance tests.
//! - [`cli`]: experiment orchestration behind the `topkmon` binary.
//!
//! Source indices are 1-based throughout the public surface; slot indices run
//! `t = 0..=T` with slot 0 reserved for initialization (the monitor starts
//! correct, so no error or update is counted at `t = 0`).

pub mod analysis;
pub mod checks;
pub mod cli;
pub mod dp;
pub mod kkt;
pub mod model;
pub mod policy;
pub mod sim;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// One or more configuration invariants are violated; every violation is listed.
    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    /// A policy document or three-stage specification is inconsistent with the configuration.
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    /// An index (source, slot, or state) is outside its valid range.
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    /// A numeric argument is outside the domain of the requested operation.
    #[error("domain error: {0}")]
    Domain(String),
    /// The requested rate target cannot be met by any policy in the family.
    #[error("infeasible rate: {0}")]
    InfeasibleRate(String),
    /// An instance exceeds the size cap of an exact oracle.
    #[error("instance too large: {0}")]
    InstanceTooLarge(String),
    /// No multiplier satisfying the rate sandwich was found (should be impossible
    /// for a valid budget; reported loudly rather than clamped).
    #[error("no feasible theta: {0}")]
    NoFeasibleTheta(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Formats a float with 12 significant digits, the precision used by every
/// emitted file and stdout report.
pub fn sig12(value: f64) -> String {
    if value.is_finite() {
        format!("{value:.11e}")
    } else {
        format!("{value}")
    }
}

/// Rounds a float to 12 significant digits (the emission precision), so that
/// serialized JSON carries exactly the printed value.
pub fn round_sig12(value: f64) -> f64 {
    if value.is_finite() {
        sig12(value).parse().expect("sig12 output is a valid float")
    } else {
        value
    }
}

/// Rounds every fractional number in a JSON document to 12 significant digits.
/// Integers are left untouched.
pub fn round_json_sig12(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Number(n) => {
            if n.is_f64() {
                let x = n.as_f64().expect("checked is_f64");
                if let Some(rounded) = serde_json::Number::from_f64(round_sig12(x)) {
                    *n = rounded;
                }
            }
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(round_json_sig12),
        serde_json::Value::Object(map) => map.values_mut().for_each(round_json_sig12),
        _ => {}
    }
}

#[cfg(test)]
mod fmt_tests {
    use super::*;

    #[test]
    fn sig12_has_twelve_significant_digits() {
        assert_eq!(sig12(0.25), "2.50000000000e-1");
        assert_eq!(sig12(1.0), "1.00000000000e0");
        assert_eq!(sig12(0.0), "0.00000000000e0");
        assert_eq!(sig12(-13.5), "-1.35000000000e1");
    }

    #[test]
    fn round_sig12_is_idempotent() {
        let x = std::f64::consts::PI / 17.0;
        let once = round_sig12(x);
        assert_eq!(once, round_sig12(once));
        assert!((once - x).abs() < 1e-12);
    }

    #[test]
    fn json_rounding_preserves_integers() {
        let mut v = serde_json::json!({
            "a": 0.123456789012345,
            "b": [7, 0.1000000000009],
            "c": {"d": 3}
        });
        round_json_sig12(&mut v);
        assert_eq!(v["b"][0], serde_json::json!(7));
        assert_eq!(v["c"]["d"], serde_json::json!(3));
        assert_eq!(v["a"], serde_json::json!(0.123456789012));
    }
}
