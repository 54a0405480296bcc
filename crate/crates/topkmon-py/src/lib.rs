//! Python bindings: configs, policies, the analytic chain, the budgeted
//! allocation solver, and the simulators, as the `topkmon_py` module.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use topkmon::analysis::{
    analytic_update_rate, approx_objective as approx_objective_impl, propagate_pair_chain, rho_at,
    PairChainSeries,
};
use topkmon::kkt::{compute_tn, embed_three_stage};
use topkmon::model::{alpha_table, validate_config, SystemConfig};
use topkmon::policy::{PolicyDoc, TabularPolicy, ThreeStageSpec};
use topkmon::sim::{exact_joint_evaluation, monte_carlo as monte_carlo_impl, top_k_error_at};

fn err(e: topkmon::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Validated system description, constructed from a JSON document.
#[pyclass(frozen, module = "topkmon_py")]
struct Config {
    inner: SystemConfig,
}

#[pymethods]
impl Config {
    /// Parses and validates a JSON config document (the same schema the CLI
    /// reads): n_sources, k_select, horizon, rate_budget, sources.
    #[new]
    fn new(json_text: &str) -> PyResult<Self> {
        let cfg: SystemConfig =
            serde_json::from_str(json_text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Config {
            inner: validate_config(cfg).map_err(err)?,
        })
    }

    #[getter]
    fn n_sources(&self) -> usize {
        self.inner.n_sources
    }

    #[getter]
    fn k_select(&self) -> usize {
        self.inner.k_select
    }

    #[getter]
    fn horizon(&self) -> usize {
        self.inner.horizon
    }

    #[getter]
    fn rate_budget(&self) -> f64 {
        self.inner.rate_budget
    }

    /// Budget at which the rate constraint goes slack: sum of per-source
    /// always-update rates 2 mu lambda / zeta.
    fn full_update_rate(&self) -> f64 {
        self.inner.full_update_rate()
    }

    /// Prefix relevance weights alpha_1..alpha_{N+1}; the final entry is the
    /// zero sentinel for the empty-tail cut.
    fn alpha(&self) -> Vec<f64> {
        let table = alpha_table(&self.inner);
        (1..=self.inner.n_sources + 1)
            .map(|n| table.alpha(n))
            .collect()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(n_sources={}, k_select={}, horizon={}, rate_budget={})",
            self.inner.n_sources, self.inner.k_select, self.inner.horizon, self.inner.rate_budget
        )
    }
}

/// Update policy document: a named baseline or a three-stage specification.
#[pyclass(frozen, module = "topkmon_py")]
struct Policy {
    doc: PolicyDoc,
}

impl Policy {
    fn compile(&self, cfg: &SystemConfig) -> PyResult<TabularPolicy> {
        self.doc.compile(cfg).map_err(err)
    }
}

#[pymethods]
impl Policy {
    /// Reports every mismatch at every slot.
    #[staticmethod]
    fn always() -> Self {
        Policy {
            doc: PolicyDoc::Always,
        }
    }

    /// Never reports.
    #[staticmethod]
    fn never() -> Self {
        Policy {
            doc: PolicyDoc::Never,
        }
    }

    /// Reports every mismatch through switch_times[n-1], then only in the
    /// persistent mismatch state ((0,1) when lambda >= mu, else (1,0)).
    #[staticmethod]
    fn three_stage(config: &Config, switch_times: Vec<usize>) -> PyResult<Self> {
        Ok(Policy {
            doc: PolicyDoc::ThreeStage(
                ThreeStageSpec::for_config(&config.inner, switch_times).map_err(err)?,
            ),
        })
    }

    /// Parses the policy document format emitted by the CLI's solve command.
    #[staticmethod]
    fn from_json(json_text: &str) -> PyResult<Self> {
        Ok(Policy {
            doc: serde_json::from_str(json_text)
                .map_err(|e| PyValueError::new_err(e.to_string()))?,
        })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        match self.doc {
            PolicyDoc::ThreeStage(_) => "three_stage",
            PolicyDoc::Always => "always",
            PolicyDoc::Never => "never",
        }
    }

    /// Stage boundaries for a three-stage policy, None for baselines.
    #[getter]
    fn switch_times(&self) -> Option<Vec<usize>> {
        match &self.doc {
            PolicyDoc::ThreeStage(spec) => Some(spec.switch_times.clone()),
            _ => None,
        }
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.doc).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn __repr__(&self) -> String {
        match &self.doc {
            PolicyDoc::ThreeStage(spec) => format!("Policy(three_stage, {:?})", spec.switch_times),
            PolicyDoc::Always => "Policy(always)".into(),
            PolicyDoc::Never => "Policy(never)".into(),
        }
    }
}

fn series_for(cfg: &SystemConfig, policy: &TabularPolicy) -> PyResult<Vec<PairChainSeries>> {
    (1..=cfg.n_sources)
        .map(|n| propagate_pair_chain(cfg.source(n), policy.source(n), cfg.horizon).map_err(err))
        .collect()
}

/// Solves the budgeted allocation. Returns (solution dict, Policy); the
/// budget defaults to the config's rate_budget.
#[pyfunction]
#[pyo3(signature = (config, rate_budget = None))]
fn solve<'py>(
    py: Python<'py>,
    config: &Config,
    rate_budget: Option<f64>,
) -> PyResult<(Bound<'py, PyDict>, Policy)> {
    let cfg = &config.inner;
    let alpha = alpha_table(cfg);
    let r = rate_budget.unwrap_or(cfg.rate_budget);
    let solution = compute_tn(cfg, &alpha, r).map_err(err)?;
    let point = embed_three_stage(cfg, &alpha, &solution);
    let spec = ThreeStageSpec::for_config(cfg, solution.switch_times.clone()).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("theta", solution.theta)?;
    out.set_item("set_a", &solution.set_a)?;
    out.set_item("set_b", &solution.set_b)?;
    out.set_item("n_tilde", solution.n_tilde)?;
    out.set_item("t_prime", solution.t_prime)?;
    out.set_item("switch_times", &solution.switch_times)?;
    out.set_item("breakpoints", &solution.breakpoints)?;
    out.set_item("objective", point.objective)?;
    Ok((
        out,
        Policy {
            doc: PolicyDoc::ThreeStage(spec),
        },
    ))
}

/// Exact per-source mismatch and update curves for a policy: dict with
/// beta[n-1][t-1], expected_update[n-1][t-1], and the system update_rate.
#[pyfunction]
fn propagate<'py>(py: Python<'py>, config: &Config, policy: &Policy) -> PyResult<Bound<'py, PyDict>> {
    let cfg = &config.inner;
    let series = series_for(cfg, &policy.compile(cfg)?)?;
    let beta: Vec<Vec<f64>> = series
        .iter()
        .map(|s| (1..=cfg.horizon).map(|t| s.beta(t)).collect())
        .collect();
    let expected_update: Vec<Vec<f64>> = series
        .iter()
        .map(|s| (1..=cfg.horizon).map(|t| s.expected_update(t)).collect())
        .collect();
    let out = PyDict::new(py);
    out.set_item("beta", beta)?;
    out.set_item("expected_update", expected_update)?;
    out.set_item("update_rate", analytic_update_rate(&series))?;
    Ok(out)
}

/// Error-probability approximation at one slot from per-source mismatch
/// probabilities: dict with rho_per_m (m = 1..N+1), rho, m_star, lower, upper.
#[pyfunction]
fn rho<'py>(py: Python<'py>, config: &Config, betas: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let alpha = alpha_table(&config.inner);
    let result = rho_at(&alpha, &betas).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("rho_per_m", &result.rho_per_m)?;
    out.set_item("rho", result.rho)?;
    out.set_item("m_star", result.m_star)?;
    out.set_item("lower", result.lower)?;
    out.set_item("upper", result.upper)?;
    Ok(out)
}

/// Time-averaged error approximation of a policy under the exact chain.
#[pyfunction]
fn approx_objective(config: &Config, policy: &Policy) -> PyResult<f64> {
    let cfg = &config.inner;
    let alpha = alpha_table(cfg);
    let series = series_for(cfg, &policy.compile(cfg)?)?;
    approx_objective_impl(&alpha, &series).map_err(err)
}

/// Monte Carlo evaluation: dict with error_prob/update_rate (mean, se),
/// per_t_error_freq, and trials. Bit-reproducible for a fixed seed.
#[pyfunction]
fn monte_carlo<'py>(
    py: Python<'py>,
    config: &Config,
    policy: &Policy,
    trials: u64,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = &config.inner;
    let compiled = policy.compile(cfg)?;
    let estimate = monte_carlo_impl(cfg, &compiled, trials, seed).map_err(err)?;
    let mean_se = |m: topkmon::sim::MeanSe| -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        d.set_item("mean", m.mean)?;
        d.set_item("se", m.se)?;
        Ok(d)
    };
    let out = PyDict::new(py);
    out.set_item("error_prob", mean_se(estimate.error_prob)?)?;
    out.set_item("update_rate", mean_se(estimate.update_rate)?)?;
    out.set_item("per_t_error_freq", &estimate.per_t_error_freq)?;
    out.set_item("trials", estimate.trials)?;
    Ok(out)
}

/// Exact joint evaluation for small instances (N <= 4, T <= 12): dict with
/// per_t_error, error_prob, and update_rate.
#[pyfunction]
fn exact_joint<'py>(
    py: Python<'py>,
    config: &Config,
    policy: &Policy,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = &config.inner;
    let compiled = policy.compile(cfg)?;
    let exact = exact_joint_evaluation(cfg, &compiled).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("per_t_error", &exact.per_t_error)?;
    out.set_item("error_prob", exact.error_prob)?;
    out.set_item("update_rate", exact.update_rate)?;
    Ok(out)
}

/// Whether the monitor's copy y misranks the availability vector x for a
/// top-k selection: compares the prefixes 1..V, where V is the first index
/// whose free-count reaches k (else N).
#[pyfunction]
fn top_k_error(x: Vec<u8>, y: Vec<u8>, k: usize) -> PyResult<bool> {
    if x.len() != y.len() {
        return Err(PyValueError::new_err(format!(
            "vectors must have equal length, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(&y).any(|&b| b > 1) {
        return Err(PyValueError::new_err("entries must be bits"));
    }
    if k == 0 || k > x.len() {
        return Err(PyValueError::new_err(format!(
            "k must be in 1..={}, got {k}",
            x.len()
        )));
    }
    Ok(top_k_error_at(&x, &y, k))
}

#[pymodule]
fn topkmon_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Config>()?;
    m.add_class::<Policy>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(propagate, m)?)?;
    m.add_function(wrap_pyfunction!(rho, m)?)?;
    m.add_function(wrap_pyfunction!(approx_objective, m)?)?;
    m.add_function(wrap_pyfunction!(monte_carlo, m)?)?;
    m.add_function(wrap_pyfunction!(exact_joint, m)?)?;
    m.add_function(wrap_pyfunction!(top_k_error, m)?)?;
    Ok(())
}
