//! Named verification checks shared by the `verify` subcommand and the
//! acceptance suite. Each check runs a seeded batch of oracle comparisons or
//! property assertions and reports pass/fail with a witness; failures are
//! data, not panics.

use crate::analysis::{
    analytic_update_rate, approx_objective, fk_closed_form, fk_numeric_max, propagate_pair_chain,
    rho_at,
};
use crate::dp::{
    brute_force_single_source, check_structural_properties, lagrangian_cost,
    solve_single_source_dp, TailProfile,
};
use crate::kkt::{compute_tn, embed_three_stage, lp_oracle};
use crate::model::{
    alpha_table, steady_state_free_prob, stream_rng, validate_config, SourceParams, SystemConfig,
};
use crate::policy::{
    always_update_policy, compile_three_stage, never_update_policy, SourceDecisionTable,
    TabularPolicy, ThreeStageSpec,
};
use crate::sim::{exact_joint_evaluation, top_k_error_at};
use crate::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::time::Instant;

/// Outcome of one named check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Witness of the first failure, or a short summary of what was covered.
    pub detail: String,
    pub seconds: f64,
}

fn run_check(name: &'static str, body: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = match body() {
        Ok(outcome) => outcome,
        Err(e) => (false, format!("aborted: {e}")),
    };
    CheckResult {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn rand_params(rng: &mut ChaCha8Rng) -> SourceParams {
    SourceParams::new(
        rng.random_range(0.05..0.45),
        rng.random_range(0.05..0.45),
    )
    .expect("range is valid")
}

fn rand_cfg(
    rng: &mut ChaCha8Rng,
    n_max: usize,
    k_cap: usize,
    horizon: std::ops::RangeInclusive<usize>,
) -> SystemConfig {
    let n = rng.random_range(1..=n_max);
    let k = rng.random_range(1..=n.min(k_cap));
    let t = rng.random_range(horizon);
    validate_config(SystemConfig {
        n_sources: n,
        k_select: k,
        horizon: t,
        rate_budget: 0.0,
        sources: (0..n).map(|_| rand_params(rng)).collect(),
    })
    .expect("generated config is valid")
}

fn random_three_stage(rng: &mut ChaCha8Rng, cfg: &SystemConfig) -> Result<TabularPolicy> {
    let switch: Vec<usize> = (0..cfg.n_sources)
        .map(|_| rng.random_range(0..=cfg.horizon))
        .collect();
    compile_three_stage(cfg, &ThreeStageSpec::for_config(cfg, switch)?)
}

/// Exact joint error probability stays inside the analytic sandwich
/// `[rho(t)/4, rho(t)]` at every slot, on random small instances under
/// random three-stage policies.
pub fn check_error_bound_sandwich(seed: u64) -> CheckResult {
    run_check("error_bound_sandwich", || {
        let mut rng = stream_rng(seed, 1);
        let instances = 120;
        let mut worst_lower = f64::INFINITY;
        let mut worst_upper = f64::INFINITY;
        for case in 0..instances {
            let cfg = rand_cfg(&mut rng, 4, 2, 2..=12);
            let alpha = alpha_table(&cfg);
            let policy = random_three_stage(&mut rng, &cfg)?;
            let exact = exact_joint_evaluation(&cfg, &policy)?;
            let series: Vec<_> = (1..=cfg.n_sources)
                .map(|i| propagate_pair_chain(cfg.source(i), policy.source(i), cfg.horizon))
                .collect::<Result<_>>()?;
            for t in 1..=cfg.horizon {
                let betas: Vec<f64> = series.iter().map(|s| s.beta(t)).collect();
                let rho = rho_at(&alpha, &betas)?;
                let err = exact.per_t_error[t - 1];
                worst_lower = worst_lower.min(err - rho.lower);
                worst_upper = worst_upper.min(rho.upper - err);
                if err < rho.lower - 1e-9 || err > rho.upper + 1e-9 {
                    return Ok((
                        false,
                        format!(
                            "case {case} t={t}: exact error {err} outside \
                             [{}, {}]",
                            rho.lower, rho.upper
                        ),
                    ));
                }
            }
        }
        Ok((
            true,
            format!(
                "{instances} instances; tightest margins: lower {worst_lower:.3e}, \
                 upper {worst_upper:.3e}"
            ),
        ))
    })
}

/// Single-source instrumented episode mirroring the simulator's draw order,
/// additionally recording the per-slot update events.
fn episode_bits(
    p: &SourceParams,
    table: &SourceDecisionTable,
    horizon: usize,
    master: u64,
    stream: u64,
) -> (Vec<bool>, Vec<bool>) {
    let mut rng = stream_rng(master, stream);
    let mut x = u8::from(rng.random::<f64>() < steady_state_free_prob(p));
    let mut y = x;
    let mut err = Vec::with_capacity(horizon);
    let mut upd = Vec::with_capacity(horizon);
    for t in 1..=horizon {
        let u = table.u(t, x, y);
        if u {
            y = x;
        }
        upd.push(u);
        let flip = if x == 1 { p.lambda } else { p.mu };
        if rng.random::<f64>() < flip {
            x = 1 - x;
        }
        err.push(x != y);
    }
    (err, upd)
}

/// Monte Carlo per-slot mismatch and update frequencies agree with the
/// propagated pair chain within three standard errors at every slot, and the
/// analytic chain under the update-on-every-mismatch policy is exactly
/// stationary at the per-source rate `2 mu lambda / zeta`.
pub fn check_pair_chain_vs_monte_carlo(seed: u64) -> CheckResult {
    run_check("pair_chain_vs_monte_carlo", || {
        let trials: u64 = 100_000;
        let horizon = 25;
        let mut rng = stream_rng(seed, 2);
        for case in 0u64..20 {
            let p = rand_params(&mut rng);
            let decisions: Vec<(bool, bool)> = (0..horizon)
                .map(|_| (rng.random::<bool>(), rng.random::<bool>()))
                .collect();
            let table = SourceDecisionTable::from_mismatch_decisions(&decisions);
            let series = propagate_pair_chain(&p, &table, horizon)?;
            let master = seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(case + 1));

            use rayon::prelude::*;
            let (err_counts, upd_counts) = (0..trials)
                .into_par_iter()
                .fold(
                    || (vec![0u64; horizon], vec![0u64; horizon]),
                    |(mut errs, mut upds), stream| {
                        let (err, upd) = episode_bits(&p, &table, horizon, master, stream);
                        for (slot, &e) in errs.iter_mut().zip(&err) {
                            *slot += u64::from(e);
                        }
                        for (slot, &u) in upds.iter_mut().zip(&upd) {
                            *slot += u64::from(u);
                        }
                        (errs, upds)
                    },
                )
                .reduce(
                    || (vec![0u64; horizon], vec![0u64; horizon]),
                    |(mut ae, mut au), (be, bu)| {
                        for (a, b) in ae.iter_mut().zip(&be) {
                            *a += b;
                        }
                        for (a, b) in au.iter_mut().zip(&bu) {
                            *a += b;
                        }
                        (ae, au)
                    },
                );
            let m = trials as f64;
            for t in 1..=horizon {
                let comparisons = [
                    ("beta", err_counts[t - 1] as f64 / m, series.beta(t)),
                    (
                        "expected_update",
                        upd_counts[t - 1] as f64 / m,
                        series.expected_update(t),
                    ),
                ];
                for (what, freq, exact) in comparisons {
                    let se = (exact * (1.0 - exact) / m).sqrt();
                    if (freq - exact).abs() > 3.0 * se {
                        return Ok((
                            false,
                            format!(
                                "case {case} t={t}: {what} frequency {freq} vs exact \
                                 {exact} exceeds 3 standard errors ({se:.3e})"
                            ),
                        ));
                    }
                }
            }
        }

        // Update-on-every-mismatch is exactly stationary: mismatch
        // probability 2 mu lambda / zeta at every slot, the same expected
        // update per slot from the second slot on (the start is
        // synchronized, so the first decision never fires), and the
        // time-averaged rate carries exactly that one missing slot.
        let p = SourceParams::new(0.17, 0.31).expect("valid");
        let w = p.always_update_rate();
        let table =
            SourceDecisionTable::from_mismatch_decisions(&vec![(true, true); horizon]);
        let series = propagate_pair_chain(&p, &table, horizon)?;
        for t in 1..=horizon {
            if (series.beta(t) - w).abs() > 1e-12 {
                return Ok((
                    false,
                    format!("stationary mismatch drifted at t={t}: {}", series.beta(t)),
                ));
            }
            let expect_u = if t == 1 { 0.0 } else { w };
            if (series.expected_update(t) - expect_u).abs() > 1e-12 {
                return Ok((
                    false,
                    format!(
                        "stationary update rate drifted at t={t}: {}",
                        series.expected_update(t)
                    ),
                ));
            }
        }
        let horizon_f = horizon as f64;
        if (series.update_rate() - w * (horizon_f - 1.0) / horizon_f).abs() > 1e-12 {
            return Ok((
                false,
                format!("time-averaged rate {} off analytic value", series.update_rate()),
            ));
        }
        Ok((
            true,
            format!("20 cases x {trials} trials, every slot within 3 standard errors"),
        ))
    })
}

/// Closed-form maximum of the weighted quadratic envelope agrees with a
/// numeric grid maximization and respects the `w/2` cap.
pub fn check_quadratic_envelope_closed_form(seed: u64) -> CheckResult {
    run_check("quadratic_envelope_closed_form", || {
        let mut rng = stream_rng(seed, 3);
        let mut worst = 0.0f64;
        for k in 2..=4usize {
            for case in 0..50 {
                let mut alphas: Vec<f64> =
                    (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
                alphas.sort_by(|a, b| b.partial_cmp(a).unwrap());
                let w = rng.random_range(0.0..1.0) * alphas[k - 1];
                let closed = fk_closed_form(&alphas, w)?;
                let numeric = fk_numeric_max(&alphas, w, 1e-3)?;
                worst = worst.max((closed - numeric).abs());
                if (closed - numeric).abs() > 1e-4 {
                    return Ok((
                        false,
                        format!(
                            "k={k} case {case}: closed {closed} vs numeric {numeric} \
                             (alphas {alphas:?}, w {w})"
                        ),
                    ));
                }
                if closed > w / 2.0 + 1e-12 || numeric > w / 2.0 + 1e-12 {
                    return Ok((
                        false,
                        format!("k={k} case {case}: value exceeds w/2 (w {w})"),
                    ));
                }
            }
        }
        Ok((
            true,
            format!("150 draws across k in 2..=4, worst gap {worst:.3e}"),
        ))
    })
}

fn random_tail(rng: &mut ChaCha8Rng, horizon: usize) -> TailProfile {
    let alpha = rng.random_range(0.05..1.0);
    let values: Vec<f64> = (0..horizon)
        .map(|_| if rng.random::<bool>() { alpha } else { 0.0 })
        .collect();
    TailProfile::new(alpha, values).expect("entries are 0 or alpha")
}

/// Backward recursion value and policy agree with exhaustive search over
/// every decision table on short horizons, for arbitrary weight profiles.
pub fn check_dp_vs_brute_force(seed: u64) -> CheckResult {
    run_check("dp_vs_brute_force", || {
        let mut rng = stream_rng(seed, 4);
        let instances = 200;
        let mut worst = 0.0f64;
        for case in 0..instances {
            let p = rand_params(&mut rng);
            let horizon = rng.random_range(1..=6);
            let tail = random_tail(&mut rng, horizon);
            let gamma = rng.random_range(0.0..1.2) * tail.alpha();
            let solution = solve_single_source_dp(&p, &tail, gamma)?;
            let (_, brute_value) = brute_force_single_source(&p, &tail, gamma)?;
            worst = worst.max((solution.value - brute_value).abs());
            if (solution.value - brute_value).abs() > 1e-9 {
                return Ok((
                    false,
                    format!(
                        "case {case}: recursion value {} vs exhaustive {brute_value}",
                        solution.value
                    ),
                ));
            }
            let attained = lagrangian_cost(&p, &tail, gamma, &solution.policy)?;
            if (attained - solution.value).abs() > 1e-9 {
                return Ok((
                    false,
                    format!(
                        "case {case}: extracted policy attains {attained}, \
                         value is {}",
                        solution.value
                    ),
                ));
            }
        }
        Ok((
            true,
            format!("{instances} instances, worst value gap {worst:.3e}"),
        ))
    })
}

/// Structural properties of the per-source solution on constant-then-zero
/// weight profiles: threshold dominance, the bounded gap, update
/// persistence, tail silence, the both-update prefix, and the exact
/// terminal threshold `omega(T) = (1 - 2 mu) alpha*(T)`.
pub fn check_dp_policy_structure(seed: u64) -> CheckResult {
    run_check("dp_policy_structure", || {
        let mut rng = stream_rng(seed, 5);
        let instances = 1000;
        for case in 0..instances {
            let p = rand_params(&mut rng);
            let horizon = rng.random_range(2..=40);
            let alpha = rng.random_range(0.05..1.0);
            let active = rng.random_range(0..=horizon);
            let tail = TailProfile::constant_then_zero(alpha, active, horizon)?;
            let gamma = rng.random_range(0.0..1.2) * alpha;
            let solution = solve_single_source_dp(&p, &tail, gamma)?;
            let report =
                check_structural_properties(&p, &tail, &solution.tables, &solution.policy);
            if let Some(check) = report.first_violation() {
                return Ok((
                    false,
                    format!("case {case}: property {} {:?}", check.name, check.status),
                ));
            }
            let omega_t = solution.tables.omega_series[horizon - 1];
            let expect = (1.0 - 2.0 * p.mu) * tail.alpha_star(horizon);
            if (omega_t - expect).abs() > 1e-12 {
                return Ok((
                    false,
                    format!(
                        "case {case}: terminal threshold {omega_t} vs \
                         (1 - 2 mu) alpha*(T) = {expect}"
                    ),
                ));
            }
        }
        Ok((true, format!("{instances} instances, all properties held")))
    })
}

/// The closed-form allocation embeds to a point whose objective matches the
/// vertex-enumeration optimum of the planning program, with the rate
/// equality holding exactly.
pub fn check_closed_form_vs_lp_oracle(seed: u64) -> CheckResult {
    run_check("closed_form_vs_lp_oracle", || {
        let mut rng = stream_rng(seed, 6);
        let instances = 100;
        let horizon = 1000usize;
        let t = horizon as f64;
        let mut worst = 0.0f64;
        for case in 0..instances {
            let cfg = rand_cfg(&mut rng, 6, usize::MAX, horizon..=horizon);
            let alpha = alpha_table(&cfg);
            let full = cfg.full_update_rate();
            let r = rng.random_range(0.02..0.98) * full;
            let sol = compute_tn(&cfg, &alpha, r)?;
            let point = embed_three_stage(&cfg, &alpha, &sol);
            let rate: f64 = (0..cfg.n_sources)
                .map(|i| cfg.sources[i].always_update_rate() * point.s[i])
                .sum::<f64>()
                / t;
            if (rate - r).abs() > 1e-9 {
                return Ok((
                    false,
                    format!("case {case}: embedded rate {rate} vs budget {r}"),
                ));
            }
            let oracle = lp_oracle(&cfg, &alpha, r)?;
            worst = worst.max((point.objective - oracle.objective).abs());
            if (point.objective - oracle.objective).abs() > 1e-6 * t {
                return Ok((
                    false,
                    format!(
                        "case {case}: closed form {} vs oracle {} \
                         (n={}, r={r})",
                        point.objective, oracle.objective, cfg.n_sources
                    ),
                ));
            }
        }
        Ok((
            true,
            format!("{instances} instances, worst objective gap {worst:.3e}"),
        ))
    })
}

/// Compiled switch-time policies keep the exact analytic update rate within
/// `r + 2 N / T` across horizons.
pub fn check_compiled_policy_rate_contract(seed: u64) -> CheckResult {
    run_check("compiled_policy_rate_contract", || {
        let mut rng = stream_rng(seed, 7);
        let mut worst_c = f64::NEG_INFINITY;
        for case in 0..20 {
            let base = rand_cfg(&mut rng, 6, usize::MAX, 100..=100);
            let budget_frac = rng.random_range(0.05..0.95);
            for horizon in [100usize, 1000, 10_000] {
                let mut cfg = base.clone();
                cfg.horizon = horizon;
                let alpha = alpha_table(&cfg);
                let r = budget_frac * cfg.full_update_rate();
                let sol = compute_tn(&cfg, &alpha, r)?;
                let spec = ThreeStageSpec::for_config(&cfg, sol.switch_times.clone())?;
                let policy = compile_three_stage(&cfg, &spec)?;
                let series: Vec<_> = (1..=cfg.n_sources)
                    .map(|i| propagate_pair_chain(cfg.source(i), policy.source(i), horizon))
                    .collect::<Result<_>>()?;
                let rate = analytic_update_rate(&series);
                let c = (rate - r) * horizon as f64 / cfg.n_sources as f64;
                worst_c = worst_c.max(c);
                if rate > r + 2.0 * cfg.n_sources as f64 / horizon as f64 + 1e-12 {
                    return Ok((
                        false,
                        format!(
                            "case {case} T={horizon}: rate {rate} exceeds budget {r} \
                             by more than 2N/T (c = {c})"
                        ),
                    ));
                }
            }
        }
        Ok((
            true,
            format!("20 instances x 3 horizons, worst overshoot factor c = {worst_c:.3}"),
        ))
    })
}

/// The ranked-selection worked example: the top-3 free set, one monitor copy
/// that causes an error and one that does not.
pub fn check_top_k_worked_example() -> CheckResult {
    run_check("top_k_worked_example", || {
        let x = [0u8, 1, 1, 0, 1, 1];
        let k = 3;
        let mut free = 0;
        let mut v = x.len();
        for (i, &xi) in x.iter().enumerate() {
            free += usize::from(xi);
            if free >= k {
                v = i + 1;
                break;
            }
        }
        let selected: Vec<usize> = (1..=v).filter(|&i| x[i - 1] == 1).collect();
        if selected != [2, 3, 5] {
            return Ok((false, format!("top free set came out as {selected:?}")));
        }
        if !top_k_error_at(&x, &[0, 1, 1, 0, 0, 1], k) {
            return Ok((
                false,
                "mismatch at position 5 inside the prefix was not flagged".into(),
            ));
        }
        if top_k_error_at(&x, &[0, 1, 1, 0, 1, 0], k) {
            return Ok((
                false,
                "mismatch at position 6 beyond the prefix was flagged".into(),
            ));
        }
        Ok((true, "top free set {2,3,5}; both monitor copies classified".into()))
    })
}

/// Analytic objective of the budgeted policy over a ten-point budget sweep:
/// non-increasing in the budget, equal to update-on-every-mismatch at the
/// full rate, and equal to never-update at rate zero.
pub fn check_sweep_consistency() -> CheckResult {
    run_check("sweep_consistency", || {
        let cfg = validate_config(SystemConfig {
            n_sources: 3,
            k_select: 1,
            horizon: 1000,
            rate_budget: 0.0,
            sources: vec![
                SourceParams::new(0.1, 0.3).expect("valid"),
                SourceParams::new(0.2, 0.25).expect("valid"),
                SourceParams::new(0.15, 0.35).expect("valid"),
            ],
        })
        .expect("config is valid");
        let alpha = alpha_table(&cfg);
        let full = cfg.full_update_rate();

        let objective_of = |policy: &TabularPolicy| -> Result<f64> {
            let series: Vec<_> = (1..=cfg.n_sources)
                .map(|i| propagate_pair_chain(cfg.source(i), policy.source(i), cfg.horizon))
                .collect::<Result<_>>()?;
            approx_objective(&alpha, &series)
        };
        let mut objectives = Vec::with_capacity(10);
        for i in 0..10 {
            let r = full * i as f64 / 9.0;
            let sol = compute_tn(&cfg, &alpha, r)?;
            let spec = ThreeStageSpec::for_config(&cfg, sol.switch_times.clone())?;
            objectives.push(objective_of(&compile_three_stage(&cfg, &spec)?)?);
        }
        for (i, pair) in objectives.windows(2).enumerate() {
            if pair[1] > pair[0] + 1e-9 {
                return Ok((
                    false,
                    format!(
                        "objective rose from {} to {} between sweep points {i} and {}",
                        pair[0],
                        pair[1],
                        i + 1
                    ),
                ));
            }
        }
        let always = objective_of(&always_update_policy(&cfg))?;
        if (objectives[9] - always).abs() > 1e-9 {
            return Ok((
                false,
                format!(
                    "full-budget objective {} differs from update-on-every-mismatch {always}",
                    objectives[9]
                ),
            ));
        }
        let never = objective_of(&never_update_policy(&cfg))?;
        if (objectives[0] - never).abs() > 1e-9 {
            return Ok((
                false,
                format!(
                    "zero-budget objective {} differs from never-update {never}; \
                     the zero-budget policy still improves on silence by updating \
                     on its persistent mismatch state",
                    objectives[0]
                ),
            ));
        }
        Ok((true, "monotone over 10 points; endpoints match baselines".into()))
    })
}

/// Runs the full suite in a fixed order.
pub fn run_all_checks(seed: u64) -> Vec<CheckResult> {
    vec![
        check_error_bound_sandwich(seed),
        check_pair_chain_vs_monte_carlo(seed),
        check_quadratic_envelope_closed_form(seed),
        check_dp_vs_brute_force(seed),
        check_dp_policy_structure(seed),
        check_closed_form_vs_lp_oracle(seed),
        check_compiled_policy_rate_contract(seed),
        check_top_k_worked_example(),
        check_sweep_consistency(),
    ]
}
