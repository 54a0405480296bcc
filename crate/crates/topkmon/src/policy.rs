//! Update policies as per-source, per-slot decision tables over the joint
//! (source state, monitor state) pair, plus the three-stage policy family and
//! the always/never baselines.
//!
//! Timing convention used everywhere: the decision `u(t, x, y)` is the update
//! indicator `U_n(t)` as a function of the pair `(X_n(t-1), Y_n(t-1))`. When
//! `U_n(t) = 1` the monitor becomes `Y_n(t) = X_n(t-1)`; otherwise
//! `Y_n(t) = Y_n(t-1)`. The source then moves to `X_n(t)` by the kernel row of
//! `X_n(t-1)`. Matched pairs never update: an update from a matched pair would
//! rewrite the monitor with the value it already holds, so `u(t, x, x) = 0` is
//! enforced structurally.

use serde::{Deserialize, Serialize};

use crate::model::SystemConfig;
use crate::{Error, Result};

/// Pair-state index for `(x, y)`: `00 -> 0`, `01 -> 1`, `10 -> 2`, `11 -> 3`.
#[inline]
pub const fn pair_index(x: u8, y: u8) -> usize {
    ((x << 1) | y) as usize
}

/// The two mismatch pair states, named by their `(x, y)` bit labels.
/// `ZeroOne` means the source is busy while the monitor shows free.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairMismatch {
    /// `(x, y) = (0, 1)`.
    #[serde(rename = "01")]
    ZeroOne,
    /// `(x, y) = (1, 0)`.
    #[serde(rename = "10")]
    OneZero,
}

impl PairMismatch {
    /// Pair-state index of this mismatch.
    pub fn index(self) -> usize {
        match self {
            PairMismatch::ZeroOne => pair_index(0, 1),
            PairMismatch::OneZero => pair_index(1, 0),
        }
    }
}

/// Decision table for a single source: `u(t, x, y)` for `t = 1..=T`.
/// Matched pairs are structurally zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceDecisionTable {
    /// `rows[t - 1][pair_index(x, y)]` is `u(t, x, y)`.
    rows: Vec<[bool; 4]>,
}

impl SourceDecisionTable {
    /// Builds a table from per-slot mismatch decisions
    /// `(u(t, 0, 1), u(t, 1, 0))`; matched entries are forced to false.
    pub fn from_mismatch_decisions(decisions: &[(bool, bool)]) -> Self {
        let rows = decisions
            .iter()
            .map(|&(u01, u10)| {
                let mut row = [false; 4];
                row[pair_index(0, 1)] = u01;
                row[pair_index(1, 0)] = u10;
                row
            })
            .collect();
        Self { rows }
    }

    /// All-false table over `horizon` slots.
    pub fn silent(horizon: usize) -> Self {
        Self {
            rows: vec![[false; 4]; horizon],
        }
    }

    /// Number of slots the table covers.
    pub fn horizon(&self) -> usize {
        self.rows.len()
    }

    /// `u(t, x, y)` for `t` in `1..=horizon` (unchecked beyond debug builds).
    #[inline]
    pub fn u(&self, t: usize, x: u8, y: u8) -> bool {
        self.rows[t - 1][pair_index(x, y)]
    }

    /// `u(t, ·)` as the 4-entry row indexed by [`pair_index`].
    #[inline]
    pub fn row(&self, t: usize) -> [bool; 4] {
        self.rows[t - 1]
    }
}

/// Per-source, per-slot update decision table on the joint pair state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TabularPolicy {
    sources: Vec<SourceDecisionTable>,
    horizon: usize,
}

impl TabularPolicy {
    /// Assembles a policy from per-source tables, which must share a horizon.
    pub fn from_tables(sources: Vec<SourceDecisionTable>) -> Result<Self> {
        let horizon = sources
            .first()
            .map(SourceDecisionTable::horizon)
            .unwrap_or(0);
        if sources.iter().any(|s| s.horizon() != horizon) {
            return Err(Error::InvalidPolicy(
                "per-source tables disagree on the horizon".to_string(),
            ));
        }
        Ok(Self { sources, horizon })
    }

    /// Number of sources.
    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    /// Horizon T.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Table of source n (1-based).
    pub fn source(&self, n: usize) -> &SourceDecisionTable {
        &self.sources[n - 1]
    }
}

/// Bounds-checked table lookup: `U_n(t)` given `(X_n(t-1), Y_n(t-1)) = (x, y)`.
pub fn decide(policy: &TabularPolicy, n: usize, t: usize, x: u8, y: u8) -> Result<bool> {
    if n == 0 || n > policy.n_sources() {
        return Err(Error::IndexOutOfRange(format!(
            "source {n} not in 1..={}",
            policy.n_sources()
        )));
    }
    if t == 0 || t > policy.horizon() {
        return Err(Error::IndexOutOfRange(format!(
            "slot {t} not in 1..={}",
            policy.horizon()
        )));
    }
    if x > 1 || y > 1 {
        return Err(Error::IndexOutOfRange(format!(
            "pair state ({x}, {y}) must be binary"
        )));
    }
    Ok(policy.source(n).u(t, x, y))
}

/// Declarative form of a three-stage policy: update on every mismatch through
/// `switch_times[n - 1]`, then only in the persistent mismatch state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreeStageSpec {
    /// Per-source stage boundary `T_n` in `0..=T`.
    pub switch_times: Vec<usize>,
    /// Per-source mismatch state that keeps updating after `T_n`:
    /// `(0, 1)` exactly when `lambda >= mu`, else `(1, 0)`.
    pub persistent_states: Vec<PairMismatch>,
}

impl ThreeStageSpec {
    /// Builds a spec for `cfg` with the given switch times, choosing each
    /// persistent state by the `lambda >= mu` rule (ties resolve to `(0, 1)`).
    pub fn for_config(cfg: &SystemConfig, switch_times: Vec<usize>) -> Result<Self> {
        if switch_times.len() != cfg.n_sources {
            return Err(Error::InvalidPolicy(format!(
                "switch_times has {} entries for {} sources",
                switch_times.len(),
                cfg.n_sources
            )));
        }
        let persistent_states = cfg
            .sources
            .iter()
            .map(|p| {
                if p.lambda >= p.mu {
                    PairMismatch::ZeroOne
                } else {
                    PairMismatch::OneZero
                }
            })
            .collect();
        Ok(Self {
            switch_times,
            persistent_states,
        })
    }
}

/// Expands a three-stage spec into a full decision table: for `t <= T_n`
/// update on both mismatch pairs; for `t > T_n` update only in the persistent
/// state; matched pairs never update.
pub fn compile_three_stage(cfg: &SystemConfig, spec: &ThreeStageSpec) -> Result<TabularPolicy> {
    if spec.switch_times.len() != cfg.n_sources || spec.persistent_states.len() != cfg.n_sources {
        return Err(Error::InvalidPolicy(format!(
            "spec covers {} switch times / {} persistent states for {} sources",
            spec.switch_times.len(),
            spec.persistent_states.len(),
            cfg.n_sources
        )));
    }
    let t_max = cfg.horizon;
    let mut tables = Vec::with_capacity(cfg.n_sources);
    for n in 1..=cfg.n_sources {
        let t_n = spec.switch_times[n - 1];
        if t_n > t_max {
            return Err(Error::InvalidPolicy(format!(
                "switch time {t_n} for source {n} exceeds horizon {t_max}"
            )));
        }
        let p = cfg.source(n);
        let expected = if p.lambda >= p.mu {
            PairMismatch::ZeroOne
        } else {
            PairMismatch::OneZero
        };
        if spec.persistent_states[n - 1] != expected {
            return Err(Error::InvalidPolicy(format!(
                "persistent state for source {n} must be {:?} (mu = {}, lambda = {})",
                expected, p.mu, p.lambda
            )));
        }
        let decisions: Vec<(bool, bool)> = (1..=t_max)
            .map(|t| {
                if t <= t_n {
                    (true, true)
                } else {
                    match expected {
                        PairMismatch::ZeroOne => (true, false),
                        PairMismatch::OneZero => (false, true),
                    }
                }
            })
            .collect();
        tables.push(SourceDecisionTable::from_mismatch_decisions(&decisions));
    }
    TabularPolicy::from_tables(tables)
}

/// Policy that reports every state change: update on both mismatch pairs at
/// every slot.
pub fn always_update_policy(cfg: &SystemConfig) -> TabularPolicy {
    let decisions = vec![(true, true); cfg.horizon];
    let tables = (0..cfg.n_sources)
        .map(|_| SourceDecisionTable::from_mismatch_decisions(&decisions))
        .collect();
    TabularPolicy::from_tables(tables).expect("uniform horizon")
}

/// Policy that never reports.
pub fn never_update_policy(cfg: &SystemConfig) -> TabularPolicy {
    let tables = (0..cfg.n_sources)
        .map(|_| SourceDecisionTable::silent(cfg.horizon))
        .collect();
    TabularPolicy::from_tables(tables).expect("uniform horizon")
}

/// On-disk policy document: either a named baseline or a three-stage spec.
/// Compilation against a configuration reproduces the full decision table, so
/// experiments are replayable from this document alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyDoc {
    ThreeStage(ThreeStageSpec),
    Always,
    Never,
}

impl PolicyDoc {
    /// Compiles the document against a configuration.
    pub fn compile(&self, cfg: &SystemConfig) -> Result<TabularPolicy> {
        match self {
            PolicyDoc::ThreeStage(spec) => compile_three_stage(cfg, spec),
            PolicyDoc::Always => Ok(always_update_policy(cfg)),
            PolicyDoc::Never => Ok(never_update_policy(cfg)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SourceParams;
    use proptest::prelude::*;

    fn cfg(n: usize, t: usize, mu: f64, lambda: f64) -> SystemConfig {
        SystemConfig {
            n_sources: n,
            k_select: 1,
            horizon: t,
            rate_budget: 0.1,
            sources: vec![SourceParams::new(mu, lambda).unwrap(); n],
        }
    }

    #[test]
    fn full_switch_time_updates_on_every_mismatch() {
        let c = cfg(2, 5, 0.1, 0.3);
        let spec = ThreeStageSpec::for_config(&c, vec![5, 5]).unwrap();
        let p = compile_three_stage(&c, &spec).unwrap();
        for n in 1..=2 {
            for t in 1..=5 {
                assert!(decide(&p, n, t, 0, 1).unwrap());
                assert!(decide(&p, n, t, 1, 0).unwrap());
                assert!(!decide(&p, n, t, 0, 0).unwrap());
                assert!(!decide(&p, n, t, 1, 1).unwrap());
            }
        }
        assert_eq!(p, always_update_policy(&c));
    }

    #[test]
    fn zero_switch_time_keeps_only_persistent_state() {
        // lambda > mu: persistent state is (0, 1).
        let c = cfg(1, 4, 0.1, 0.3);
        let spec = ThreeStageSpec::for_config(&c, vec![0]).unwrap();
        assert_eq!(spec.persistent_states[0], PairMismatch::ZeroOne);
        let p = compile_three_stage(&c, &spec).unwrap();
        for t in 1..=4 {
            assert!(decide(&p, 1, t, 0, 1).unwrap());
            assert!(!decide(&p, 1, t, 1, 0).unwrap());
        }

        // mu > lambda: persistent state is (1, 0).
        let c = cfg(1, 4, 0.3, 0.1);
        let spec = ThreeStageSpec::for_config(&c, vec![0]).unwrap();
        assert_eq!(spec.persistent_states[0], PairMismatch::OneZero);
        let p = compile_three_stage(&c, &spec).unwrap();
        for t in 1..=4 {
            assert!(!decide(&p, 1, t, 0, 1).unwrap());
            assert!(decide(&p, 1, t, 1, 0).unwrap());
        }
    }

    #[test]
    fn equal_rates_tie_resolves_to_zero_one() {
        let c = cfg(1, 3, 0.2, 0.2);
        let spec = ThreeStageSpec::for_config(&c, vec![1]).unwrap();
        assert_eq!(spec.persistent_states[0], PairMismatch::ZeroOne);
    }

    #[test]
    fn out_of_range_switch_time_is_rejected() {
        let c = cfg(1, 3, 0.1, 0.3);
        let spec = ThreeStageSpec::for_config(&c, vec![4]).unwrap();
        assert!(compile_three_stage(&c, &spec).is_err());
    }

    #[test]
    fn mismatched_persistent_state_is_rejected() {
        let c = cfg(1, 3, 0.1, 0.3);
        let spec = ThreeStageSpec {
            switch_times: vec![1],
            persistent_states: vec![PairMismatch::OneZero],
        };
        assert!(compile_three_stage(&c, &spec).is_err());
    }

    #[test]
    fn decide_checks_ranges() {
        let c = cfg(2, 3, 0.1, 0.3);
        let p = always_update_policy(&c);
        assert!(decide(&p, 0, 1, 0, 1).is_err());
        assert!(decide(&p, 3, 1, 0, 1).is_err());
        assert!(decide(&p, 1, 0, 0, 1).is_err());
        assert!(decide(&p, 1, 4, 0, 1).is_err());
        assert!(decide(&p, 1, 1, 2, 0).is_err());
    }

    #[test]
    fn policy_doc_roundtrip() {
        let c = cfg(2, 6, 0.1, 0.3);
        let spec = ThreeStageSpec::for_config(&c, vec![3, 0]).unwrap();
        let doc = PolicyDoc::ThreeStage(spec);
        let json = serde_json::to_string(&doc).unwrap();
        let back: PolicyDoc = serde_json::from_str(&json).unwrap();
        assert_eq!(doc, back);
        assert_eq!(
            doc.compile(&c).unwrap(),
            back.compile(&c).unwrap()
        );
    }

    proptest! {
        #[test]
        fn compiled_three_stage_matches_decide_and_recompiles(
            mu in 0.01f64..0.49,
            lambda in 0.01f64..0.49,
            t_max in 1usize..=12,
            raw_switch in 0usize..=12,
        ) {
            let c = cfg(1, t_max, mu, lambda);
            let t_n = raw_switch.min(t_max);
            let spec = ThreeStageSpec::for_config(&c, vec![t_n]).unwrap();
            let p1 = compile_three_stage(&c, &spec).unwrap();
            let p2 = compile_three_stage(&c, &spec).unwrap();
            prop_assert_eq!(&p1, &p2);
            let persistent = spec.persistent_states[0].index();
            for t in 1..=t_max {
                for x in 0u8..2 {
                    for y in 0u8..2 {
                        let u = decide(&p1, 1, t, x, y).unwrap();
                        prop_assert_eq!(u, p1.source(1).u(t, x, y));
                        if x == y {
                            prop_assert!(!u, "matched pair updated at t={t}");
                        } else if t <= t_n {
                            prop_assert!(u);
                        } else {
                            prop_assert_eq!(u, pair_index(x, y) == persistent);
                        }
                    }
                }
            }
        }

        #[test]
        fn matched_pairs_never_update_in_any_table(
            bits in prop::collection::vec((any::<bool>(), any::<bool>()), 1..=10),
        ) {
            let table = SourceDecisionTable::from_mismatch_decisions(&bits);
            for t in 1..=bits.len() {
                prop_assert!(!table.u(t, 0, 0));
                prop_assert!(!table.u(t, 1, 1));
            }
        }
    }
}
