use std::path::Path;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use sere_core::bijectors::Bijector;
use sere_core::config::load_config;
use sere_core::hierarchy::{tiny_spec, HierarchySpec, Wiring};
use sere_core::params::{Mode, ParameterStore};
use sere_core::rng::{seeded, stream};
use sere_core::training::{warmup_beta, WarmupSchedule};
use sere_core::{Error, Tensor};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        Error::Numeric { .. } => PyArithmeticError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(err)
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// A hierarchy spec with freshly initialized parameters.
#[pyclass(name = "Hierarchy")]
struct PyHierarchy {
    inner: sere_core::hierarchy::Hierarchy,
    store: ParameterStore,
}

#[pymethods]
impl PyHierarchy {
    /// Builds from a JSON spec document (defaults fill missing keys).
    #[new]
    #[pyo3(signature = (spec_json = "{}", seed = 0))]
    fn new(spec_json: &str, seed: u64) -> PyResult<Self> {
        let spec: HierarchySpec = serde_json::from_str(spec_json).map_err(|e| err(e.into()))?;
        Self::build(spec, seed)
    }

    /// Small ReLU spec for experiments and tests.
    #[staticmethod]
    #[pyo3(signature = (data_dim, latent_dims, hidden = 16, seed = 0, dlgm = false))]
    fn tiny(data_dim: usize, latent_dims: Vec<usize>, hidden: usize, seed: u64, dlgm: bool) -> PyResult<Self> {
        let mut spec = tiny_spec(data_dim, latent_dims, hidden);
        if dlgm {
            spec.wiring = Wiring::Dlgm;
        }
        Self::build(spec, seed)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    #[getter]
    fn layers(&self) -> usize {
        self.inner.layers()
    }

    fn spec_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.spec).map_err(|e| err(e.into()))
    }

    /// Batch-mean single-sample ELBO and per-layer KLs (eval mode).
    #[pyo3(signature = (x, beta = 1.0, seed = 0))]
    fn elbo(&self, x: Vec<Vec<f64>>, beta: f64, seed: u64) -> PyResult<(f64, Vec<f64>)> {
        let x = to_tensor(x)?;
        self.inner.elbo(&self.store, &x, beta, &mut stream(seed, 2), Mode::Eval).map_err(err)
    }

    /// Per-row importance-weighted bound with `k` samples.
    #[pyo3(signature = (x, k, seed = 0))]
    fn iwae(&self, x: Vec<Vec<f64>>, k: usize, seed: u64) -> PyResult<Vec<f64>> {
        let x = to_tensor(x)?;
        self.inner.iwae_bound(&self.store, &x, k, &mut stream(seed, 2), 4096).map_err(err)
    }

    /// Ancestral samples of `x`.
    #[pyo3(signature = (n, seed = 0))]
    fn generate(&self, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let g = self.inner.generate(&self.store, n, &mut stream(seed, 4)).map_err(err)?;
        Ok(to_rows(&g.sample))
    }
}

impl PyHierarchy {
    fn build(spec: HierarchySpec, seed: u64) -> PyResult<Self> {
        let inner = sere_core::hierarchy::Hierarchy::new(spec).map_err(err)?;
        let store = inner.init(&mut seeded(seed)).map_err(err)?;
        Ok(Self { inner, store })
    }
}

/// `z = shift + (diag(d) + u uᵀ) ε`.
#[pyclass(name = "AffineBijector")]
struct PyAffine {
    inner: sere_core::bijectors::AffineBijector,
}

#[pymethods]
impl PyAffine {
    #[new]
    fn new(shift: Vec<f64>, diag: Vec<f64>, perturb: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: sere_core::bijectors::AffineBijector::new(shift, diag, perturb).map_err(err)? })
    }

    fn forward(&self, x: Vec<f64>) -> PyResult<(Vec<f64>, f64)> {
        self.inner.forward(&x).map_err(err)
    }

    fn inverse(&self, y: Vec<f64>) -> PyResult<(Vec<f64>, f64)> {
        self.inner.inverse(&y).map_err(err)
    }

    fn log_det(&self) -> f64 {
        self.inner.log_det()
    }
}

/// Random linear-Gaussian hierarchy with exact marginals.
#[pyclass(name = "LinearGaussianModel")]
struct PyLinear {
    inner: sere_core::oracle::LinearGaussianModel,
}

#[pymethods]
impl PyLinear {
    #[staticmethod]
    #[pyo3(signature = (latent_dims, data_dim, seed = 0, dlgm = false))]
    fn random(latent_dims: Vec<usize>, data_dim: usize, seed: u64, dlgm: bool) -> Self {
        let mut rng = seeded(seed);
        let inner = if dlgm {
            sere_core::oracle::random_dlgm_model(&mut rng, &latent_dims, data_dim)
        } else {
            sere_core::oracle::random_sere_model(&mut rng, &latent_dims, data_dim)
        };
        Self { inner }
    }

    fn log_marginal(&self, x: Vec<f64>) -> PyResult<f64> {
        sere_core::oracle::exact_log_marginal(&self.inner, &x).map_err(err)
    }

    /// Largest conditional cross-covariance left by the factorized posterior.
    fn factorization_residual(&self) -> PyResult<f64> {
        sere_core::oracle::verify_factorization(&self.inner).map_err(err)
    }

    #[pyo3(signature = (n, seed = 0))]
    fn sample(&self, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let (_, x) = self.inner.sample(n, &mut seeded(seed)).map_err(err)?;
        Ok(to_rows(&x))
    }
}

/// KL weight of the geometric warm-up with `levels` levels at `epoch`.
#[pyfunction]
fn geometric_beta(levels: u32, epoch: usize) -> f64 {
    warmup_beta(WarmupSchedule::Geometric { levels }, epoch)
}

/// Runs a verification suite; returns `(name, value, threshold, passed)` rows.
#[pyfunction]
#[pyo3(signature = (suite = "all", seed = 0))]
fn verify(suite: &str, seed: u64) -> PyResult<Vec<(String, f64, f64, bool)>> {
    use sere_core::verify::Suite;
    let s = match suite {
        "all" => Suite::All,
        "factorization" => Suite::Factorization,
        "gradients" => Suite::Gradients,
        "bijectors" => Suite::Bijectors,
        other => return Err(PyValueError::new_err(format!("unknown suite `{other}`"))),
    };
    let r = sere_core::verify::run(s, seed).map_err(err)?;
    Ok(r.checks.into_iter().map(|c| (c.name, c.value, c.threshold, c.passed)).collect())
}

/// Trains from a JSON config file; returns the summary as JSON.
#[pyfunction]
#[pyo3(signature = (config_path, out_dir, seed = None))]
fn train(config_path: &str, out_dir: &str, seed: Option<u64>) -> PyResult<String> {
    let resolved = load_config(Path::new(config_path), seed).map_err(err)?;
    let summary = sere_core::run::train_run(&resolved, Path::new(out_dir), None, |_| {}).map_err(err)?;
    serde_json::to_string(&summary).map_err(|e| err(e.into()))
}

#[pymodule]
fn sere(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyHierarchy>()?;
    m.add_class::<PyAffine>()?;
    m.add_class::<PyLinear>()?;
    m.add_function(wrap_pyfunction!(geometric_beta, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
