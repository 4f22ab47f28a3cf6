//! Python module `dirnas`: run configuration, search, oracle tables and
//! the Dirichlet primitives.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use dirnas::bench::{build_oracle as build_table, OracleTable};
use dirnas::cli::{self, RunConfig};
use dirnas::dirichlet;
use dirnas::engine::run_search;
use dirnas::progressive::StageSpec;
use dirnas::space::Genotype;
use dirnas::{special, Error, Rng};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Domain(_) | Error::Contract(_) => PyValueError::new_err(e.to_string()),
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        Error::Numeric(_) | Error::Serde(_) => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Resolved run configuration (dataset, search, oracle, diagnostics).
#[pyclass(name = "Config", module = "dirnas", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    /// Defaults, or parsed from TOML text.
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => RunConfig::from_toml(t).map_err(py_err)?,
            None => RunConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        let text = std::fs::read_to_string(&path)?;
        Self::new(Some(&text))
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.search.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.search.seed = seed;
    }

    #[getter]
    fn out(&self) -> PathBuf {
        self.inner.out.clone()
    }

    #[setter]
    fn set_out(&mut self, out: PathBuf) {
        self.inner.out = out;
    }

    #[getter(lambda_)]
    fn lambda(&self) -> f64 {
        self.inner.search.lambda
    }

    #[setter(lambda_)]
    fn set_lambda(&mut self, lambda: f64) {
        self.inner.search.lambda = lambda;
    }

    #[getter]
    fn stage_schedule(&self) -> String {
        StageSpec::format_schedule(&self.inner.search.schedule)
    }

    #[setter]
    fn set_stage_schedule(&mut self, s: &str) -> PyResult<()> {
        self.inner.search.schedule = StageSpec::parse_schedule(s).map_err(py_err)?;
        Ok(())
    }

    #[getter]
    fn distance(&self) -> String {
        serde_json::to_value(self.inner.search.distance).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
    }

    #[setter]
    fn set_distance(&mut self, s: &str) -> PyResult<()> {
        self.inner.search.distance = cli::parse_distance(s).map_err(py_err)?;
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={}, schedule='{}')", self.seed(), self.stage_schedule())
    }
}

#[pyclass(name = "Genotype", module = "dirnas", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyGenotype {
    inner: Genotype,
}

#[pymethods]
impl PyGenotype {
    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(Self { inner: Genotype::from_json(s).map_err(py_err)? })
    }

    #[getter]
    fn key(&self) -> String {
        self.inner.key()
    }

    #[getter]
    fn choices(&self) -> Vec<usize> {
        self.inner.choices.clone()
    }

    #[getter]
    fn ops(&self) -> Vec<String> {
        self.inner.ops.clone()
    }

    #[getter]
    fn space(&self) -> String {
        self.inner.space.clone()
    }

    fn describe(&self) -> String {
        self.inner.describe()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn __repr__(&self) -> String {
        format!("Genotype('{}')", self.inner.describe())
    }
}

#[pyclass(name = "OracleTable", module = "dirnas", frozen)]
struct PyOracle {
    inner: OracleTable,
}

#[pymethods]
impl PyOracle {
    /// Loads a table, checking it was built on `config`'s dataset.
    #[staticmethod]
    fn load(path: PathBuf, config: &PyConfig) -> PyResult<Self> {
        let data = config.inner.dataset().map_err(py_err)?;
        Ok(Self { inner: OracleTable::load(&path, &data).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn get(&self, genotype: &PyGenotype) -> PyResult<f64> {
        self.inner.get(&genotype.inner).map_err(py_err)
    }

    fn rank_of(&self, genotype: &PyGenotype) -> PyResult<f64> {
        self.inner.rank_of(&genotype.inner).map_err(py_err)
    }

    fn best(&self) -> Option<(String, f64)> {
        self.inner.best().map(|(k, a)| (k.clone(), a))
    }

    #[getter]
    fn accuracy(&self) -> std::collections::BTreeMap<String, f64> {
        self.inner.accuracy.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.accuracy.len()
    }
}

#[pyclass(name = "SearchResult", module = "dirnas", frozen)]
struct PySearchResult {
    #[pyo3(get)]
    genotype: PyGenotype,
    #[pyo3(get)]
    eta_norm: f64,
    #[pyo3(get)]
    epochs: usize,
    #[pyo3(get)]
    trajectory_jsonl: String,
}

/// Runs a search in memory and returns the selected genotype and log.
#[pyfunction]
fn search(py: Python<'_>, config: &PyConfig) -> PyResult<PySearchResult> {
    let cfg = config.inner.clone();
    let out = py.detach(move || -> dirnas::Result<_> {
        cfg.validate()?;
        let data = cfg.dataset()?;
        run_search(&cfg.search, &cfg.cell_spec()?, &data, None)
    });
    let out = out.map_err(py_err)?;
    Ok(PySearchResult {
        eta_norm: out.state.eta_norm(),
        epochs: out.state.epoch,
        trajectory_jsonl: out.log.to_jsonl(),
        genotype: PyGenotype { inner: out.genotype },
    })
}

/// Same as the `search` subcommand: writes all artifacts under `config.out`
/// and returns the genotype key.
#[pyfunction]
fn search_to_disk(py: Python<'_>, config: &PyConfig) -> PyResult<String> {
    let cfg = config.inner.clone();
    let s = py.detach(move || cli::cmd_search(&cfg)).map_err(py_err)?;
    Ok(s.genotype_key)
}

#[pyfunction]
#[pyo3(signature = (config, workers = 1))]
fn build_oracle(py: Python<'_>, config: &PyConfig, workers: usize) -> PyResult<PyOracle> {
    let cfg = config.inner.clone();
    let table = py
        .detach(move || -> dirnas::Result<_> {
            cfg.validate()?;
            let data = cfg.dataset()?;
            build_table(&cfg.cell_spec()?, &data, &cfg.oracle.budget, cfg.oracle.r_seeds, cfg.oracle.seed, workers)
        })
        .map_err(py_err)?;
    Ok(PyOracle { inner: table })
}

/// `n` Dirichlet draws from a seeded stream.
#[pyfunction]
#[pyo3(signature = (beta, seed, n = 1))]
fn sample_dirichlet(beta: Vec<f64>, seed: u64, n: usize) -> PyResult<Vec<Vec<f64>>> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| dirichlet::sample(&beta, &mut rng).map(|s| s.theta).map_err(py_err)).collect()
}

/// `Jᵀ·grad_theta` for one sample `theta` of Dir(`beta`).
#[pyfunction]
fn pathwise_grad(grad_theta: Vec<f64>, theta: Vec<f64>, beta: Vec<f64>) -> PyResult<Vec<f64>> {
    dirichlet::pathwise_vjp(&grad_theta, &theta.into(), &beta).map_err(py_err)
}

/// `(mu, sigma_diag)` of the softmax-basis Laplace approximation.
#[pyfunction]
fn laplace_params(beta: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let p = dirichlet::laplace_params(&beta).map_err(py_err)?;
    Ok((p.mu, p.sigma_diag))
}

#[pyfunction]
fn sigma_lower_bound(delta: f64, n_ops: usize) -> PyResult<f64> {
    dirichlet::sigma_lower_bound(delta, n_ops).map_err(py_err)
}

#[pyfunction]
fn log_gamma(x: f64) -> PyResult<f64> {
    special::log_gamma(x).map_err(py_err)
}

#[pyfunction]
fn digamma(x: f64) -> PyResult<f64> {
    special::digamma(x).map_err(py_err)
}

#[pyfunction]
fn reg_inc_beta(x: f64, a: f64, b: f64) -> PyResult<f64> {
    special::reg_inc_beta(x, a, b).map_err(py_err)
}

#[pymodule]
#[pyo3(name = "dirnas")]
fn init(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", dirnas::VERSION)?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyGenotype>()?;
    m.add_class::<PyOracle>()?;
    m.add_class::<PySearchResult>()?;
    m.add_function(wrap_pyfunction!(search, m)?)?;
    m.add_function(wrap_pyfunction!(search_to_disk, m)?)?;
    m.add_function(wrap_pyfunction!(build_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(sample_dirichlet, m)?)?;
    m.add_function(wrap_pyfunction!(pathwise_grad, m)?)?;
    m.add_function(wrap_pyfunction!(laplace_params, m)?)?;
    m.add_function(wrap_pyfunction!(sigma_lower_bound, m)?)?;
    m.add_function(wrap_pyfunction!(log_gamma, m)?)?;
    m.add_function(wrap_pyfunction!(digamma, m)?)?;
    m.add_function(wrap_pyfunction!(reg_inc_beta, m)?)?;
    Ok(())
}
