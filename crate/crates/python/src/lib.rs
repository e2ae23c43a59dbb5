//! Python bindings. Matrices cross the boundary as lists of rows; token
//! batches are `d x T` (one column per token).

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use upcycle_core::analysis::{self, AnalysisReport};
use upcycle_core::checkpoint::Checkpoint;
use upcycle_core::clustering;
use upcycle_core::config::PipelineConfig;
use upcycle_core::distill::TeacherSet;
use upcycle_core::linalg::{self, DenseMatrix};
use upcycle_core::pipeline;
use upcycle_core::train::{evaluate_task, ToyModel};
use upcycle_core::upcycle::{ActivationBank, InitMethod};

type Rows = Vec<Vec<f64>>;

fn err(e: upcycle_core::Error) -> PyErr {
    PyValueError::new_err(format!("{}: {e}", e.kind()))
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: Rows) -> PyResult<DenseMatrix> {
    DenseMatrix::from_rows(&rows).map_err(err)
}

fn method(name: &str) -> PyResult<InitMethod> {
    InitMethod::ALL
        .into_iter()
        .find(|m| m.cli_name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown method {name:?}")))
}

fn to_json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(json_err)
}

#[pyclass(name = "Config", module = "upcycle_py")]
struct PyConfig {
    inner: PipelineConfig,
}

#[pymethods]
impl PyConfig {
    /// Parses TOML text; defaults when `toml` is omitted.
    #[new]
    #[pyo3(signature = (toml=None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => PipelineConfig::from_toml_str(t).map_err(err)?,
            None => PipelineConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_path(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: PipelineConfig::from_path(&path).map_err(err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    fn to_json(&self) -> String {
        self.inner.to_json_value().to_string()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn sites(&self) -> Vec<usize> {
        self.inner.sites()
    }
}

#[pyclass(name = "Model", module = "upcycle_py")]
struct PyModel {
    inner: ToyModel,
    teachers: Option<TeacherSet>,
}

impl PyModel {
    fn wrap(inner: ToyModel, teachers: Option<TeacherSet>) -> Self {
        Self { inner, teachers }
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, teachers) = Checkpoint::load(&path).and_then(|c| c.to_model()).map_err(err)?;
        Ok(Self::wrap(inner, teachers))
    }

    /// Writes a checkpoint with the config snapshot of `config`.
    fn save(&self, path: PathBuf, config: &PyConfig) -> PyResult<()> {
        let seeds = [("seed".to_string(), config.inner.seed)].into();
        Checkpoint::from_model(&self.inner, self.teachers.as_ref(), config.inner.to_json_value(), seeds)
            .and_then(|c| c.save(&path))
            .map_err(err)
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    #[getter]
    fn moe_sites(&self) -> Vec<usize> {
        self.inner.moe_sites()
    }

    #[getter]
    fn has_teachers(&self) -> bool {
        self.teachers.is_some()
    }

    fn set_capacity_factor(&mut self, factor: f64) {
        self.inner.set_capacity_factor(factor);
    }

    /// `C x T` logits.
    fn logits(&self, x: Rows) -> PyResult<Rows> {
        Ok(self.inner.logits(&matrix(x)?).map_err(err)?.to_rows())
    }

    fn accuracy(&self, x: Rows, labels: Vec<usize>) -> PyResult<f64> {
        self.inner.accuracy(&matrix(x)?, &labels).map_err(err)
    }

    /// Mean cross-entropy at the given capacity factor.
    fn task_loss(&self, x: Rows, labels: Vec<usize>, capacity_factor: f64) -> PyResult<f64> {
        Ok(evaluate_task(&self.inner, &matrix(x)?, &labels, capacity_factor)
            .map_err(err)?
            .task_loss)
    }

    /// `(site, experts per token)` for every MoE site.
    fn routes(&self, x: Rows) -> PyResult<Vec<(usize, Vec<Vec<usize>>)>> {
        let routing = self.inner.routing(&matrix(x)?).map_err(err)?;
        Ok(routing
            .into_iter()
            .map(|(site, r)| (site, r.topk_indices))
            .collect())
    }

    /// Site analysis as JSON on the given tokens.
    fn analyze(&self, x: Rows) -> PyResult<String> {
        to_json(&AnalysisReport::for_model(&self.inner, &matrix(x)?).map_err(err)?)
    }

    /// Pairwise cosine similarity of flattened expert parameters at `site`.
    fn expert_similarity(&self, site: usize) -> PyResult<Rows> {
        let layer = self
            .inner
            .moe_layer(site)
            .ok_or_else(|| PyValueError::new_err(format!("site {site} is not MoE")))?;
        Ok(analysis::expert_weight_similarity(layer).map_err(err)?.to_rows())
    }
}

#[pyclass(name = "ActivationBank", module = "upcycle_py")]
struct PyBank {
    inner: ActivationBank,
}

#[pymethods]
impl PyBank {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = Checkpoint::load(&path).and_then(|c| c.to_bank()).map_err(err)?;
        Ok(Self { inner })
    }

    fn sites(&self) -> Vec<usize> {
        self.inner.per_site.keys().copied().collect()
    }

    fn site(&self, site: usize) -> PyResult<Rows> {
        Ok(self.inner.site(site).map_err(err)?.to_rows())
    }
}

/// `(train_x, train_labels, eval_x, eval_labels)` with `d x N` inputs.
#[pyfunction]
fn make_datasets(config: &PyConfig) -> PyResult<(Rows, Vec<usize>, Rows, Vec<usize>)> {
    let d = pipeline::make_datasets(&config.inner).map_err(err)?;
    Ok((
        d.train.inputs.to_rows(),
        d.train.labels,
        d.eval.inputs.to_rows(),
        d.eval.labels,
    ))
}

#[pyfunction]
fn train_dense(py: Python<'_>, config: &PyConfig) -> PyResult<PyModel> {
    let cfg = &config.inner;
    let model = py
        .detach(|| {
            let data = pipeline::make_datasets(cfg)?;
            pipeline::train_dense(cfg, &data, &mut |_| Ok(()))
        })
        .map_err(err)?;
    Ok(PyModel::wrap(model, None))
}

#[pyfunction]
fn capture(config: &PyConfig, dense: &PyModel) -> PyResult<PyBank> {
    let data = pipeline::make_datasets(&config.inner).map_err(err)?;
    let inner = pipeline::capture(&config.inner, &dense.inner, &data).map_err(err)?;
    Ok(PyBank { inner })
}

/// Returns the upcycled model and the per-site init reports as JSON.
#[pyfunction]
#[pyo3(signature = (config, dense, method, bank=None))]
fn upcycle(
    config: &PyConfig,
    dense: &PyModel,
    method: &str,
    bank: Option<&PyBank>,
) -> PyResult<(PyModel, String)> {
    let out = pipeline::upcycle(&config.inner, &dense.inner, bank.map(|b| &b.inner), self::method(method)?)
        .map_err(err)?;
    Ok((PyModel::wrap(out.model, None), to_json(&out.reports)?))
}

/// Trains a copy of `model`; returns it with the JSON-lines log.
#[pyfunction]
#[pyo3(signature = (config, model, eesd=false))]
fn train_moe(py: Python<'_>, config: &PyConfig, model: &PyModel, eesd: bool) -> PyResult<(PyModel, String)> {
    let cfg = &config.inner;
    let mut m = model.inner.clone();
    let teachers = model.teachers.clone();
    let (teachers, log) = py
        .detach(|| {
            let data = pipeline::make_datasets(cfg)?;
            let mut log = String::new();
            let t = pipeline::train_moe(cfg, &mut m, teachers, &data, eesd, &mut |r| {
                log.push_str(&serde_json::to_string(r).unwrap_or_default());
                log.push('\n');
                Ok(())
            })?;
            Ok((t, log))
        })
        .map_err(err)?;
    Ok((PyModel::wrap(m, teachers), log))
}

#[pyfunction]
fn gradcheck(config: &PyConfig, model: &PyModel) -> PyResult<String> {
    let data = pipeline::make_datasets(&config.inner).map_err(err)?;
    let rep = pipeline::gradcheck(&config.inner, &model.inner, model.teachers.as_ref(), &data)
        .map_err(err)?;
    to_json(&rep)
}

/// Comparison table as CSV.
#[pyfunction]
fn compare(py: Python<'_>, config: &PyConfig, seeds: usize) -> PyResult<String> {
    let cfg = &config.inner;
    let rows = py.detach(|| pipeline::compare(cfg, seeds)).map_err(err)?;
    Ok(pipeline::compare_csv(&rows))
}

/// `(u, sigma, v_t)` of the thin SVD.
#[pyfunction]
fn svd(a: Rows) -> PyResult<(Rows, Vec<f64>, Rows)> {
    let f = linalg::svd_full(&matrix(a)?).map_err(err)?;
    Ok((f.u.to_rows(), f.sigma, f.v_t.to_rows()))
}

/// Rank kept by the energy threshold `tau`.
#[pyfunction]
fn effective_rank(sigma: Vec<f64>, tau: f64) -> PyResult<usize> {
    let n = sigma.len();
    Ok(linalg::effective_rank(&sigma, tau, n).map_err(err)?.chosen_rank)
}

/// Spherical k-means on the columns of `x`; returns `(centroids, assignments)`.
#[pyfunction]
#[pyo3(signature = (x, n_clusters, seed, restarts=1, max_iters=clustering::DEFAULT_MAX_ITERS))]
fn spherical_kmeans(
    x: Rows,
    n_clusters: usize,
    seed: u64,
    restarts: usize,
    max_iters: usize,
) -> PyResult<(Rows, Vec<usize>)> {
    let c = clustering::spherical_kmeans_restarts(&matrix(x)?, n_clusters, max_iters, restarts, seed)
        .map_err(err)?;
    Ok((c.centroids.to_rows(), c.assignments))
}

/// Relative compactness of per-expert output groups (`d x T_i` each).
#[pyfunction]
fn relative_compactness(groups: Vec<Rows>) -> PyResult<Option<f64>> {
    let mats = groups.into_iter().map(matrix).collect::<PyResult<Vec<_>>>()?;
    analysis::relative_compactness(&mats).map_err(err)
}

#[pymodule]
fn upcycle_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyBank>()?;
    m.add_function(wrap_pyfunction!(make_datasets, m)?)?;
    m.add_function(wrap_pyfunction!(train_dense, m)?)?;
    m.add_function(wrap_pyfunction!(capture, m)?)?;
    m.add_function(wrap_pyfunction!(upcycle, m)?)?;
    m.add_function(wrap_pyfunction!(train_moe, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(svd, m)?)?;
    m.add_function(wrap_pyfunction!(effective_rank, m)?)?;
    m.add_function(wrap_pyfunction!(spherical_kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(relative_compactness, m)?)?;
    Ok(())
}
