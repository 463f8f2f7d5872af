//! Python bindings: instances, the reference heuristic, policy parameters,
//! decoding, merging and full experiment runs.

use std::path::PathBuf;

use fedroute::baseline;
use fedroute::experiment::{self, best_greedy_cost, ExperimentConfig};
use fedroute::merge::{self, TrimScope};
use fedroute::policy::{self, ArchConfig, DecodeMode, Meta};
use fedroute::train::mix_seed;
use fedroute::vrp::{self, GeneratorConfig};
use pyo3::exceptions::{PyValueError, PyIOError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn py_err(e: fedroute::error::Error) -> PyErr {
    match e {
        fedroute::error::Error::Io(_) | fedroute::error::Error::Corrupt { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_variant(name: &str) -> PyResult<vrp::VariantSpec> {
    name.parse().map_err(|e: fedroute::error::Error| py_err(e))
}

/// A routing instance. Node 0 is the depot, customers are `1..=n`.
#[pyclass(name = "Instance", module = "fedroute_py", from_py_object)]
#[derive(Clone)]
pub struct PyInstance {
    inner: vrp::Instance,
}

#[pymethods]
impl PyInstance {
    #[getter]
    fn variant(&self) -> String {
        self.inner.spec.name()
    }
    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }
    #[getter]
    fn depot(&self) -> (f64, f64) {
        (self.inner.depot[0], self.inner.depot[1])
    }
    #[getter]
    fn coords(&self) -> Vec<(f64, f64)> {
        self.inner.coords.iter().map(|p| (p[0], p[1])).collect()
    }
    #[getter]
    fn demands(&self) -> Vec<f64> {
        self.inner.demands.clone()
    }
    #[getter]
    fn capacity(&self) -> f64 {
        self.inner.capacity
    }
    #[getter]
    fn duration_limit(&self) -> Option<f64> {
        self.inner.duration_limit
    }
    /// `(start, end, service)` lists, or None without time windows.
    #[getter]
    fn time_windows(&self) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        self.inner
            .time_windows
            .as_ref()
            .map(|tw| (tw.start.clone(), tw.end.clone(), tw.service.clone()))
    }
    /// Total length of `routes`; errors if a customer is missing or repeated.
    fn cost(&self, routes: Vec<Vec<usize>>) -> PyResult<f64> {
        vrp::evaluate(&self.inner, &vrp::Solution::new(routes)).map_err(py_err)
    }
    /// List of violation messages; empty when `routes` is feasible.
    fn violations(&self, routes: Vec<Vec<usize>>) -> Vec<String> {
        vrp::check_feasibility(&self.inner, &vrp::Solution::new(routes))
            .violations
            .iter()
            .map(|v| format!("{v:?}"))
            .collect()
    }
    fn is_feasible(&self, routes: Vec<Vec<usize>>) -> bool {
        vrp::check_feasibility(&self.inner, &vrp::Solution::new(routes)).feasible
    }
    fn __repr__(&self) -> String {
        format!("Instance({}, n={})", self.inner.spec.name(), self.inner.n())
    }
}

/// Policy parameters with their architecture.
#[pyclass(name = "Params", module = "fedroute_py", from_py_object)]
#[derive(Clone)]
pub struct PyParams {
    inner: policy::ParamVector,
}

#[pymethods]
impl PyParams {
    /// Random initial parameters.
    #[new]
    #[pyo3(signature = (embed_dim = 128, heads = 8, layers = 6, clip = 10.0, seed = 0))]
    fn new(embed_dim: usize, heads: usize, layers: usize, clip: f64, seed: u64) -> PyResult<Self> {
        let arch = ArchConfig {
            embed_dim,
            heads,
            layers,
            clip,
        };
        let inner = policy::init_params(arch, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(py_err)?;
        Ok(Self { inner })
    }
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = policy::load_checkpoint(&path).map_err(py_err)?;
        Ok(Self { inner })
    }
    #[pyo3(signature = (path, meta = None))]
    fn save(&self, path: PathBuf, meta: Option<Meta>) -> PyResult<()> {
        policy::save_checkpoint(&self.inner, &meta.unwrap_or_default(), &path).map_err(py_err)
    }
    /// `(embed_dim, heads, layers, clip)`.
    #[getter]
    fn arch(&self) -> (usize, usize, usize, f64) {
        let a = self.inner.arch;
        (a.embed_dim, a.heads, a.layers, a.clip)
    }
    fn __len__(&self) -> usize {
        self.inner.len()
    }
    fn to_list(&self) -> Vec<f64> {
        self.inner.data.clone()
    }
    /// Same architecture, new values.
    fn with_values(&self, values: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.with_data(values).map_err(py_err)?,
        })
    }
    fn norm(&self) -> f64 {
        self.inner.norm()
    }
    /// Greedy multi-start routes: best over `starts` forced first customers.
    #[pyo3(signature = (instance, starts = None))]
    fn solve_greedy(&self, instance: &PyInstance, starts: Option<usize>) -> PyResult<(f64, Vec<Vec<usize>>)> {
        let starts = starts.unwrap_or(instance.inner.n());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trajs = policy::rollout(&self.inner, &instance.inner, starts, DecodeMode::Greedy, &mut rng).map_err(py_err)?;
        let best = trajs
            .iter()
            .min_by(|a, b| a.cost.total_cmp(&b.cost))
            .expect("at least one start");
        Ok((best.cost, best.solution().routes))
    }
    /// Best greedy cost, optionally over the eight coordinate symmetries.
    #[pyo3(signature = (instance, starts = None, augment = true))]
    fn best_cost(&self, instance: &PyInstance, starts: Option<usize>, augment: bool) -> PyResult<f64> {
        best_greedy_cost(&self.inner, &instance.inner, starts.unwrap_or(instance.inner.n()), augment).map_err(py_err)
    }
    /// Log-probability of a complete action sequence (0 returns to the depot).
    fn log_prob(&self, instance: &PyInstance, actions: Vec<usize>) -> PyResult<f64> {
        policy::trajectory_log_prob(&self.inner, &instance.inner, &actions).map_err(py_err)
    }
}

/// Names of all 16 variants.
#[pyfunction]
fn variants() -> Vec<String> {
    vrp::VariantSpec::all().into_iter().map(|v| v.name()).collect()
}

#[pyfunction]
fn pretrain_variants() -> Vec<String> {
    vrp::pretrain_variants().into_iter().map(|v| v.name()).collect()
}

#[pyfunction]
fn finetune_variants() -> Vec<String> {
    vrp::finetune_variants().into_iter().map(|v| v.name()).collect()
}

/// `count` random instances of `variant` with `n` customers.
#[pyfunction]
#[pyo3(signature = (variant, n, count = 1, seed = 0))]
fn generate(variant: &str, n: usize, count: usize, seed: u64) -> PyResult<Vec<PyInstance>> {
    let spec = parse_variant(variant)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[spec.bits() as u64, n as u64]));
    Ok((0..count)
        .map(|_| PyInstance {
            inner: vrp::generate_instance_with(spec, n, &GeneratorConfig::default(), &mut rng),
        })
        .collect())
}

#[pyfunction]
fn load_dataset(path: PathBuf) -> PyResult<Vec<PyInstance>> {
    Ok(vrp::load_dataset(&path)
        .map_err(py_err)?
        .into_iter()
        .map(|inner| PyInstance { inner })
        .collect())
}

#[pyfunction]
fn save_dataset(path: PathBuf, instances: Vec<PyInstance>) -> PyResult<()> {
    let insts: Vec<vrp::Instance> = instances.into_iter().map(|i| i.inner).collect();
    vrp::save_dataset(&path, &insts).map_err(py_err)
}

/// Reference heuristic: `(cost, routes)`.
#[pyfunction]
#[pyo3(signature = (instance, budget = baseline::DEFAULT_BUDGET))]
fn baseline_solve(instance: &PyInstance, budget: usize) -> PyResult<(f64, Vec<Vec<usize>>)> {
    let sol = baseline::solve(&instance.inner, budget).map_err(py_err)?;
    let cost = vrp::evaluate(&instance.inner, &sol).map_err(py_err)?;
    Ok((cost, sol.routes))
}

/// Weighted average of client parameters.
#[pyfunction]
fn fed_avg(clients: Vec<PyParams>, weights: Vec<f64>) -> PyResult<PyParams> {
    let cs: Vec<policy::ParamVector> = clients.into_iter().map(|c| c.inner).collect();
    Ok(PyParams {
        inner: merge::fed_avg(&cs, &weights).map_err(py_err)?,
    })
}

/// Trim, elect signs and merge client task vectors relative to `base`.
#[pyfunction]
#[pyo3(signature = (base, clients, keep_percent = 20.0, scale = 1.0, per_tensor = false))]
fn ties_merge(base: &PyParams, clients: Vec<PyParams>, keep_percent: f64, scale: f64, per_tensor: bool) -> PyResult<PyParams> {
    let cs: Vec<policy::ParamVector> = clients.into_iter().map(|c| c.inner).collect();
    let scope = if per_tensor { TrimScope::PerTensor } else { TrimScope::Global };
    Ok(PyParams {
        inner: merge::ties_merge(&base.inner, &cs, keep_percent, scale, scope).map_err(py_err)?,
    })
}

/// Finite-difference check of the analytic gradient; returns the max relative error.
#[pyfunction]
#[pyo3(signature = (variant, n = 6, embed_dim = 16, heads = 4, layers = 2, eps = 1e-5, seed = 0))]
fn gradient_check(variant: &str, n: usize, embed_dim: usize, heads: usize, layers: usize, eps: f64, seed: u64) -> PyResult<f64> {
    let arch = ArchConfig {
        embed_dim,
        heads,
        layers,
        clip: 10.0,
    };
    let r = policy::gradient_check(arch, parse_variant(variant)?, n, eps, seed).map_err(py_err)?;
    Ok(r.max_rel_error)
}

/// Runs the experiment in the config file for one seed (or every configured seed)
/// and returns the written paths.
#[pyfunction]
#[pyo3(signature = (config, seed = None, out = None))]
fn run_experiment(py: Python<'_>, config: PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> PyResult<Vec<PathBuf>> {
    let mut cfg = ExperimentConfig::load(&config).map_err(py_err)?;
    if let Some(out) = out {
        cfg.output_dir = out;
    }
    let seeds = seed.map_or(cfg.seeds.clone(), |s| vec![s]);
    py.detach(|| {
        let mut written = Vec::new();
        for s in seeds {
            written.extend(experiment::run(&cfg, s)?);
        }
        Ok(written)
    })
    .map_err(py_err)
}

#[pymodule]
fn fedroute_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyInstance>()?;
    m.add_class::<PyParams>()?;
    m.add_function(wrap_pyfunction!(variants, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain_variants, m)?)?;
    m.add_function(wrap_pyfunction!(finetune_variants, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(save_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(baseline_solve, m)?)?;
    m.add_function(wrap_pyfunction!(fed_avg, m)?)?;
    m.add_function(wrap_pyfunction!(ties_merge, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
