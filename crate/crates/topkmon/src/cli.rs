//! Experiment orchestration: config ingestion, policy synthesis, budget
//! sweeps, Monte Carlo evaluation, and the verification suite, exposed as the
//! `solve`, `analyze`, `simulate`, `sweep`, and `verify` subcommands.
//!
//! The config document is JSON with fields `n_sources`, `k_select`,
//! `horizon`, `rate_budget`, `sources: [{mu, lambda}, ...]`, and an optional
//! `seed` (overridden by `--seed`). Every emitted file is a pure function of
//! the experiment spec and seed, and all numeric output carries 12
//! significant digits.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::analysis::{
    analytic_update_rate, approx_objective, propagate_pair_chain, rho_at, write_analysis_csv,
    PairChainSeries,
};
use crate::checks::{run_all_checks, CheckResult};
use crate::kkt::{compute_tn, embed_three_stage};
use crate::model::{alpha_table, validate_config, AlphaTable, SystemConfig};
use crate::policy::{PolicyDoc, TabularPolicy, ThreeStageSpec};
use crate::sim::{monte_carlo, McEstimate};
use crate::{round_json_sig12, sig12, Error, Result};

/// Top-K monitoring experiments: solve rate allocations, analyze and
/// simulate policies, sweep budgets, and verify the implementation.
#[derive(Debug, Parser)]
#[command(name = "topkmon", disable_help_subcommand = true)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the budgeted allocation and emit the solution and policy files.
    Solve(RunArgs),
    /// Emit the per-slot analytic table for the solved policy as CSV.
    Analyze(RunArgs),
    /// Monte Carlo evaluation of a policy against the analytic bounds.
    Simulate(SimulateArgs),
    /// Compare the solved policy against baselines across rate budgets.
    Sweep(SweepArgs),
    /// Run the oracle and property suite; exit 0 only if every check passes.
    Verify(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Config document (JSON).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Primary output file.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Monte Carlo trial count.
    #[arg(long, value_name = "N", default_value_t = 100_000)]
    trials: u64,
    /// Master seed in hex, e.g. 0x5eed; overrides the config document.
    #[arg(long, value_name = "HEX", value_parser = parse_hex_seed)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Policy document to evaluate; defaults to solving the config's budget.
    #[arg(long, value_name = "PATH")]
    policy: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated rate budgets, each within [0, full rate].
    #[arg(long, value_name = "CSV-LIST", value_delimiter = ',', required = true)]
    rates: Vec<f64>,
}

/// Experiment mode selected by the subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Solve,
    Analyze,
    Simulate,
    Sweep,
    Verify,
}

/// Fully resolved experiment: validated config, mode, and run parameters.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub config: SystemConfig,
    pub mode: Mode,
    /// Swept budgets; nonempty exactly in sweep mode.
    pub sweep_rates: Vec<f64>,
    pub trials: u64,
    pub seed: u64,
    pub output_path: PathBuf,
}

fn parse_hex_seed(s: &str) -> std::result::Result<u64, String> {
    let digits = s
        .strip_prefix("0x")
        .or_else(|| s.strip_prefix("0X"))
        .unwrap_or(s);
    u64::from_str_radix(digits, 16).map_err(|e| format!("not a hex seed: {e}"))
}

/// Loads and validates a config document, returning the config and its
/// optional embedded seed.
pub fn load_config_document(path: &Path) -> Result<(SystemConfig, Option<u64>)> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let doc_seed = value.get("seed").and_then(serde_json::Value::as_u64);
    let cfg: SystemConfig = serde_json::from_value(value)?;
    Ok((validate_config(cfg)?, doc_seed))
}

/// Assembles the experiment from a subcommand's arguments and enforces the
/// mode invariants.
fn assemble(mode: Mode, args: &RunArgs, rates: &[f64]) -> Result<ExperimentSpec> {
    let (config, doc_seed) = load_config_document(&args.config)?;
    if (mode == Mode::Sweep) != !rates.is_empty() {
        return Err(Error::Domain(
            "rate list is required for sweep and invalid elsewhere".into(),
        ));
    }
    let full = config.full_update_rate();
    for &r in rates {
        if !(0.0..=full).contains(&r) {
            return Err(Error::Domain(format!(
                "swept rate {r} outside [0, {full}]"
            )));
        }
    }
    if args.trials == 0 {
        return Err(Error::Domain("trial count must be at least 1".into()));
    }
    Ok(ExperimentSpec {
        config,
        mode,
        sweep_rates: rates.to_vec(),
        trials: args.trials,
        seed: args.seed.or(doc_seed).unwrap_or(1),
        output_path: args.out.clone(),
    })
}

/// Parses argv and runs the selected subcommand. Exit status: 0 on success
/// (for `verify`, only if every check passes), 1 on check failures, 2 on
/// operational errors.
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Solve(args) => assemble(Mode::Solve, args, &[]).and_then(|s| run_solve(&s)),
        Command::Analyze(args) => assemble(Mode::Analyze, args, &[]).and_then(|s| run_analyze(&s)),
        Command::Simulate(args) => assemble(Mode::Simulate, &args.run, &[])
            .and_then(|s| run_simulate(&s, args.policy.as_deref())),
        Command::Sweep(args) => {
            assemble(Mode::Sweep, &args.run, &args.rates).and_then(|s| run_sweep(&s))
        }
        Command::Verify(args) => {
            return match assemble(Mode::Verify, args, &[]).and_then(|s| run_verify(&s)) {
                Ok(true) => ExitCode::SUCCESS,
                Ok(false) => ExitCode::from(1),
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            };
        }
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn write_json(path: &Path, mut value: serde_json::Value) -> Result<()> {
    round_json_sig12(&mut value);
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Sibling output path: `results.json` becomes `results.<tag>.json`.
fn sibling(path: &Path, tag: &str) -> PathBuf {
    path.with_extension(format!("{tag}.json"))
}

fn solve_policy(cfg: &SystemConfig, alpha: &AlphaTable, r: f64) -> Result<ThreeStageSpec> {
    let solution = compute_tn(cfg, alpha, r)?;
    ThreeStageSpec::for_config(cfg, solution.switch_times.clone())
}

fn per_source_series(cfg: &SystemConfig, policy: &TabularPolicy) -> Result<Vec<PairChainSeries>> {
    (1..=cfg.n_sources)
        .map(|n| propagate_pair_chain(cfg.source(n), policy.source(n), cfg.horizon))
        .collect()
}

/// Solves the config's budget and writes the solution document to `--out`
/// plus the compiled policy document to the `.policy.json` sibling.
pub fn run_solve(spec: &ExperimentSpec) -> Result<()> {
    let cfg = &spec.config;
    let alpha = alpha_table(cfg);
    let solution = compute_tn(cfg, &alpha, cfg.rate_budget)?;
    let point = embed_three_stage(cfg, &alpha, &solution);
    let three = ThreeStageSpec::for_config(cfg, solution.switch_times.clone())?;
    let policy_path = sibling(&spec.output_path, "policy");
    write_json(
        &spec.output_path,
        json!({
            "config": cfg,
            "solution": solution,
            "objective": point.objective,
        }),
    )?;
    write_json(&policy_path, serde_json::to_value(PolicyDoc::ThreeStage(three))?)?;
    println!(
        "solved rate budget {}: theta {}, objective {}",
        sig12(cfg.rate_budget),
        sig12(solution.theta),
        sig12(point.objective)
    );
    println!(
        "wrote {} and {}",
        spec.output_path.display(),
        policy_path.display()
    );
    Ok(())
}

/// Writes the per-slot analytic table (mismatch probabilities, expected
/// updates, and error bounds) for the solved policy as CSV.
pub fn run_analyze(spec: &ExperimentSpec) -> Result<()> {
    let cfg = &spec.config;
    let alpha = alpha_table(cfg);
    let three = solve_policy(cfg, &alpha, cfg.rate_budget)?;
    let policy = PolicyDoc::ThreeStage(three).compile(cfg)?;
    let series = per_source_series(cfg, &policy)?;
    let mut buf = Vec::new();
    write_analysis_csv(&mut buf, &alpha, &series)?;
    fs::write(&spec.output_path, buf)?;
    println!(
        "analytic objective {}, update rate {}; wrote {}",
        sig12(approx_objective(&alpha, &series)?),
        sig12(analytic_update_rate(&series)),
        spec.output_path.display()
    );
    Ok(())
}

/// Simulates a policy document (or the solved policy when none is given):
/// per-slot error frequencies against the analytic bounds as CSV at `--out`,
/// and a `.summary.json` sibling with the aggregate estimates.
pub fn run_simulate(spec: &ExperimentSpec, policy_path: Option<&Path>) -> Result<()> {
    let cfg = &spec.config;
    let alpha = alpha_table(cfg);
    let doc = match policy_path {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
        None => PolicyDoc::ThreeStage(solve_policy(cfg, &alpha, cfg.rate_budget)?),
    };
    let policy = doc.compile(cfg)?;
    let series = per_source_series(cfg, &policy)?;
    let estimate = monte_carlo(cfg, &policy, spec.trials, spec.seed)?;

    let mut csv = Vec::new();
    writeln!(csv, "t,error_freq,rho_lower,rho_upper")?;
    let mut betas = vec![0.0; cfg.n_sources];
    for t in 1..=cfg.horizon {
        for (b, s) in betas.iter_mut().zip(&series) {
            *b = s.beta(t);
        }
        let bounds = rho_at(&alpha, &betas)?;
        writeln!(
            csv,
            "{t},{},{},{}",
            sig12(estimate.per_t_error_freq[t - 1]),
            sig12(bounds.lower),
            sig12(bounds.upper)
        )?;
    }
    fs::write(&spec.output_path, csv)?;

    let summary_path = sibling(&spec.output_path, "summary");
    write_json(&summary_path, summary_value(spec, &estimate))?;
    println!(
        "error_prob {} +/- {}; update_rate {} +/- {}",
        sig12(estimate.error_prob.mean),
        sig12(estimate.error_prob.se),
        sig12(estimate.update_rate.mean),
        sig12(estimate.update_rate.se)
    );
    println!(
        "wrote {} and {}",
        spec.output_path.display(),
        summary_path.display()
    );
    Ok(())
}

fn summary_value(spec: &ExperimentSpec, estimate: &McEstimate) -> serde_json::Value {
    json!({
        "trials": estimate.trials,
        "seed": format!("{:#x}", spec.seed),
        "error_prob": estimate.error_prob,
        "update_rate": estimate.update_rate,
    })
}

/// One sweep row: a budget, a policy name, the analytic objective, and the
/// Monte Carlo estimates.
struct SweepRow {
    rate: f64,
    policy: &'static str,
    objective: f64,
    estimate: McEstimate,
}

impl SweepRow {
    fn emit<W: std::io::Write>(&self, out: &mut W) -> Result<()> {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            sig12(self.rate),
            self.policy,
            sig12(self.objective),
            sig12(self.estimate.error_prob.mean),
            sig12(self.estimate.error_prob.se),
            sig12(self.estimate.update_rate.mean),
            sig12(self.estimate.update_rate.se)
        )?;
        Ok(())
    }
}

/// Evaluates the solved policy and both baselines at every swept budget and
/// writes one CSV row per (rate, policy). The baselines are budget-free, so
/// their rows repeat identical values. Errors if the solved policy's
/// analytic objective ever increases along the ascending budgets.
pub fn run_sweep(spec: &ExperimentSpec) -> Result<()> {
    let cfg = &spec.config;
    let alpha = alpha_table(cfg);
    let mut rates = spec.sweep_rates.clone();
    rates.sort_by(|a, b| a.partial_cmp(b).expect("rates validated finite"));

    let mut baselines = Vec::new();
    for (name, doc) in [("always", PolicyDoc::Always), ("never", PolicyDoc::Never)] {
        let policy = doc.compile(cfg)?;
        let series = per_source_series(cfg, &policy)?;
        baselines.push((
            name,
            approx_objective(&alpha, &series)?,
            monte_carlo(cfg, &policy, spec.trials, spec.seed)?,
        ));
    }

    let mut out = Vec::new();
    writeln!(
        out,
        "r,policy,approx_objective,mc_error,mc_error_se,mc_rate,mc_rate_se"
    )?;
    let mut previous: Option<(f64, f64)> = None;
    for &r in &rates {
        let three = solve_policy(cfg, &alpha, r)?;
        let policy = PolicyDoc::ThreeStage(three).compile(cfg)?;
        let series = per_source_series(cfg, &policy)?;
        let objective = approx_objective(&alpha, &series)?;
        if let Some((prev_r, prev_obj)) = previous {
            if objective > prev_obj + 1e-9 {
                return Err(Error::Domain(format!(
                    "solved objective increased along the sweep: {} at r={} vs {} at r={}",
                    sig12(objective),
                    sig12(r),
                    sig12(prev_obj),
                    sig12(prev_r)
                )));
            }
        }
        previous = Some((r, objective));
        SweepRow {
            rate: r,
            policy: "theorem3",
            objective,
            estimate: monte_carlo(cfg, &policy, spec.trials, spec.seed)?,
        }
        .emit(&mut out)?;
        for (name, obj, estimate) in &baselines {
            SweepRow {
                rate: r,
                policy: name,
                objective: *obj,
                estimate: estimate.clone(),
            }
            .emit(&mut out)?;
        }
    }
    fs::write(&spec.output_path, out)?;
    println!(
        "swept {} budgets x 3 policies; wrote {}",
        rates.len(),
        spec.output_path.display()
    );
    Ok(())
}

/// Runs the full check suite, prints one line per check, and writes the
/// verdict document. Returns whether every check passed.
pub fn run_verify(spec: &ExperimentSpec) -> Result<bool> {
    let results = run_all_checks(spec.seed);
    for r in &results {
        println!("{}", check_line(r));
    }
    let all_passed = results.iter().all(|r| r.passed);
    write_json(
        &spec.output_path,
        json!({
            "seed": format!("{:#x}", spec.seed),
            "all_passed": all_passed,
            "checks": results,
        }),
    )?;
    println!(
        "verdict: {}; wrote {}",
        if all_passed { "all checks passed" } else { "FAILURES" },
        spec.output_path.display()
    );
    Ok(all_passed)
}

fn check_line(r: &CheckResult) -> String {
    format!(
        "[{}] {:<35} {:>7.2}s  {}",
        if r.passed { "PASS" } else { "FAIL" },
        r.name,
        r.seconds,
        r.detail
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SourceParams;

    fn write_config(dir: &Path, seed: Option<u64>) -> PathBuf {
        let mut doc = json!({
            "n_sources": 2,
            "k_select": 1,
            "horizon": 40,
            "rate_budget": 0.2,
            "sources": [{"mu": 0.1, "lambda": 0.3}, {"mu": 0.2, "lambda": 0.25}],
        });
        if let Some(s) = seed {
            doc["seed"] = json!(s);
        }
        let path = dir.join("config.json");
        fs::write(&path, serde_json::to_string(&doc).unwrap()).unwrap();
        path
    }

    fn args(config: PathBuf, out: PathBuf) -> RunArgs {
        RunArgs {
            config,
            out,
            trials: 50,
            seed: None,
        }
    }

    #[test]
    fn hex_seed_parsing() {
        assert_eq!(parse_hex_seed("0x5eed").unwrap(), 0x5eed);
        assert_eq!(parse_hex_seed("5EED").unwrap(), 0x5eed);
        assert!(parse_hex_seed("0xzz").is_err());
    }

    #[test]
    fn seed_resolution_prefers_flag_over_document() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path(), Some(7));
        let mut a = args(config, dir.path().join("out.json"));
        let spec = assemble(Mode::Solve, &a, &[]).unwrap();
        assert_eq!(spec.seed, 7);
        a.seed = Some(0x99);
        let spec = assemble(Mode::Solve, &a, &[]).unwrap();
        assert_eq!(spec.seed, 0x99);
    }

    #[test]
    fn sweep_rates_required_exactly_in_sweep_mode() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path(), None);
        let a = args(config, dir.path().join("out.csv"));
        assert!(assemble(Mode::Sweep, &a, &[]).is_err());
        assert!(assemble(Mode::Solve, &a, &[0.1]).is_err());
        let full = assemble(Mode::Solve, &a, &[]).unwrap().config.full_update_rate();
        assert!(assemble(Mode::Sweep, &a, &[full * 2.0]).is_err());
        let spec = assemble(Mode::Sweep, &a, &[0.0, full]).unwrap();
        assert_eq!(spec.sweep_rates.len(), 2);
    }

    #[test]
    fn config_document_rejects_invalid_sources() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(
            &path,
            r#"{"n_sources":1,"k_select":1,"horizon":5,"rate_budget":0.1,
               "sources":[{"mu":0.7,"lambda":0.1}]}"#,
        )
        .unwrap();
        assert!(load_config_document(&path).is_err());
    }

    #[test]
    fn solve_emits_solution_and_policy_documents() {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path(), None);
        let out = dir.path().join("solution.json");
        let spec = assemble(Mode::Solve, &args(config, out.clone()), &[]).unwrap();
        run_solve(&spec).unwrap();
        let solution: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
        assert!(solution["solution"]["theta"].is_number());
        let policy_text = fs::read_to_string(dir.path().join("solution.policy.json")).unwrap();
        let doc: PolicyDoc = serde_json::from_str(&policy_text).unwrap();
        let cfg = SystemConfig {
            n_sources: 2,
            k_select: 1,
            horizon: 40,
            rate_budget: 0.2,
            sources: vec![
                SourceParams::new(0.1, 0.3).unwrap(),
                SourceParams::new(0.2, 0.25).unwrap(),
            ],
        };
        doc.compile(&cfg).unwrap();
    }
}
