//! Python bindings. Tensors cross the boundary as flat float lists plus a
//! shape; every call copies.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tclnet::cli::load_model;
use tclnet::config::RunConfig as CoreConfig;
use tclnet::data::{generate as core_generate, Dataset as CoreDataset};
use tclnet::eval::{compute_map_cmc, MetricsReport};
use tclnet::pipeline::{class_map, describe, evaluate_model, train as core_train, Checkpoint, Model as CoreModel};
use tclnet::tse::{block_binarize as core_binarize, SeoConfig};
use tclnet::{Error, Tape};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Numerical(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(name = "Tensor", module = "tclnet_py", from_py_object)]
#[derive(Clone)]
pub struct Tensor {
    pub inner: tclnet::Tensor,
}

#[pymethods]
impl Tensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Tensor {
            inner: tclnet::Tensor::new(&shape, data).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Tensor {
            inner: tclnet::Tensor::zeros(&shape),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn numel(&self) -> usize {
        self.inner.numel()
    }

    fn at(&self, index: Vec<usize>) -> PyResult<f64> {
        let s = self.inner.shape();
        if index.len() != s.len() || index.iter().zip(s).any(|(i, n)| i >= n) {
            return Err(PyIndexError::new_err(format!("index {index:?} outside shape {s:?}")));
        }
        Ok(self.inner.at(&index))
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        Ok(Tensor {
            inner: self.inner.clone().reshape(&shape).map_err(py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.shape().first().copied().unwrap_or(1)
    }

    fn __eq__(&self, other: &Tensor) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Erasing mask for a 2-D correlation map: 0 inside the selected block,
/// 1 elsewhere. `block_width=None` spans the full width.
#[pyfunction]
#[pyo3(signature = (r, block_height=3, block_width=None, stride_h=1, stride_w=1))]
fn block_binarize(r: &Tensor, block_height: usize, block_width: Option<usize>, stride_h: usize, stride_w: usize) -> PyResult<(Tensor, (usize, usize))> {
    let cfg = SeoConfig {
        block_height,
        block_width,
        stride_h,
        stride_w,
        ..SeoConfig::default()
    };
    let mask = core_binarize(&r.inner, &cfg).map_err(py_err)?;
    let b = mask.blocks()[0];
    Ok((Tensor { inner: mask.to_tensor() }, (b.row, b.col)))
}

/// Number of candidate block positions on an `h x w` map.
#[pyfunction]
#[pyo3(signature = (h, w, block_height=3, block_width=None, stride_h=1, stride_w=1))]
fn n_positions(h: usize, w: usize, block_height: usize, block_width: Option<usize>, stride_h: usize, stride_w: usize) -> PyResult<usize> {
    let cfg = SeoConfig {
        block_height,
        block_width,
        stride_h,
        stride_w,
        ..SeoConfig::default()
    };
    cfg.n_positions(h, w).map_err(py_err)
}

/// Softmax of `tau` times the cosine between a `[D]` query and each row of
/// a `[M,D]` memory.
#[pyfunction]
#[pyo3(signature = (q, memory, tau=16.0))]
fn attention_weights(q: &Tensor, memory: &Tensor, tau: f64) -> PyResult<Tensor> {
    let tape = Tape::new();
    let a = tclnet::tsb::attention_weights(tape.constant(&q.inner), tape.constant(&memory.inner), tau).map_err(py_err)?;
    Ok(Tensor { inner: a.value() })
}

fn report_dict<'py>(py: Python<'py>, m: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("mAP", m.map)?;
    d.set_item("cmc", m.cmc.iter().map(|&(r, v)| (r, v)).collect::<Vec<_>>())?;
    d.set_item("queries", m.queries)?;
    d.set_item("excluded", m.excluded)?;
    d.set_item("per_query_ap", m.per_query_ap.clone())?;
    Ok(d)
}

/// mAP and CMC from gallery rankings.
#[pyfunction]
fn compute_map<'py>(py: Python<'py>, rankings: Vec<Vec<usize>>, query_labels: Vec<usize>, gallery_labels: Vec<usize>) -> PyResult<Bound<'py, PyDict>> {
    let m = compute_map_cmc(&rankings, &query_labels, &gallery_labels).map_err(py_err)?;
    report_dict(py, &m)
}

#[pyclass(name = "RunConfig", module = "tclnet_py", from_py_object)]
#[derive(Clone)]
pub struct RunConfig {
    pub inner: CoreConfig,
}

#[pymethods]
impl RunConfig {
    /// Defaults, or the parsed TOML text when given.
    #[new]
    #[pyo3(signature = (toml=None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => CoreConfig::from_toml(t).map_err(py_err)?,
            None => CoreConfig::default(),
        };
        Ok(RunConfig { inner })
    }

    #[staticmethod]
    fn desk() -> Self {
        RunConfig { inner: CoreConfig::desk() }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(RunConfig {
            inner: CoreConfig::load(&path).map_err(py_err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    /// Returns a copy with the given TOML keys replaced.
    fn replace(&self, overrides: &Bound<'_, PyDict>) -> PyResult<Self> {
        let mut text = self.inner.to_toml();
        for (k, v) in overrides.iter() {
            let key: String = k.extract()?;
            let value = v.repr()?.to_string();
            let value = match value.as_str() {
                "True" => "true".to_string(),
                "False" => "false".to_string(),
                _ => value.replace('\'', "\""),
            };
            let prefix = format!("{key} = ");
            let mut found = false;
            text = text
                .lines()
                .map(|l| {
                    if l.starts_with(&prefix) {
                        found = true;
                        format!("{prefix}{value}")
                    } else {
                        l.to_string()
                    }
                })
                .collect::<Vec<_>>()
                .join("\n");
            if !found {
                return Err(PyValueError::new_err(format!("unknown config key {key:?}")));
            }
        }
        Self::new(Some(&text))
    }

    fn __getattr__(&self, py: Python<'_>, name: &str) -> PyResult<Py<PyAny>> {
        let v = toml::Value::try_from(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let field = v
            .get(name)
            .ok_or_else(|| pyo3::exceptions::PyAttributeError::new_err(name.to_string()))?;
        toml_to_py(py, field)
    }
}

fn toml_to_py(py: Python<'_>, v: &toml::Value) -> PyResult<Py<PyAny>> {
    Ok(match v {
        toml::Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        toml::Value::Integer(i) => i.into_pyobject(py)?.into_any().unbind(),
        toml::Value::Float(f) => f.into_pyobject(py)?.into_any().unbind(),
        toml::Value::Boolean(b) => pyo3::types::PyBool::new(py, *b).to_owned().into_any().unbind(),
        toml::Value::Array(a) => a
            .iter()
            .map(|x| toml_to_py(py, x))
            .collect::<PyResult<Vec<_>>>()?
            .into_pyobject(py)?
            .into_any()
            .unbind(),
        other => other.to_string().into_pyobject(py)?.into_any().unbind(),
    })
}

#[pyclass(name = "Dataset", module = "tclnet_py")]
pub struct Dataset {
    pub inner: CoreDataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Dataset {
            inner: CoreDataset::load(&dir).map_err(py_err)?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(py_err)
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    fn identities(&self) -> usize {
        self.inner.identities()
    }

    fn __len__(&self) -> usize {
        self.inner.clips.len()
    }

    /// `(identity, clip_id, camera, split)` for clip `i`.
    fn info(&self, i: usize) -> PyResult<(usize, usize, u32, &'static str)> {
        let c = self.clip(i)?;
        Ok((c.identity, c.clip_id, c.camera, c.split.as_str()))
    }

    /// Frames of clip `i` as `[T,C,H,W]`.
    fn frames(&self, i: usize) -> PyResult<Tensor> {
        Ok(Tensor {
            inner: self.clip(i)?.frames.clone(),
        })
    }
}

impl Dataset {
    fn clip(&self, i: usize) -> PyResult<&tclnet::data::VideoClip> {
        self.inner
            .clips
            .get(i)
            .ok_or_else(|| PyIndexError::new_err(format!("clip {i} outside {}", self.inner.clips.len())))
    }
}

/// Synthetic corpus described by `config`, seeded by `config.seed` unless
/// `seed` is given.
#[pyfunction]
#[pyo3(signature = (config=None, seed=None))]
fn generate(config: Option<&RunConfig>, seed: Option<u64>) -> PyResult<Dataset> {
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    let inner = core_generate(&cfg.synth_spec(), seed.unwrap_or(cfg.seed)).map_err(py_err)?;
    Ok(Dataset { inner })
}

#[pyclass(name = "Model", module = "tclnet_py")]
pub struct Model {
    pub inner: CoreModel,
    pub config: CoreConfig,
}

#[pymethods]
impl Model {
    /// Untrained model for `config` with `classes` identity outputs.
    #[new]
    fn new(config: &RunConfig, classes: usize) -> PyResult<Self> {
        let inner = CoreModel::new(config.inner.model(), classes, config.inner.seed).map_err(py_err)?;
        Ok(Model {
            inner,
            config: config.inner.clone(),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        let (config, inner) = load_model(&ck).map_err(py_err)?;
        Ok(Model { inner, config })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ck = Checkpoint::from_params(&self.inner.params, &self.config.to_toml(), self.config.epochs as u64, self.config.seed);
        ck.save(&path).map_err(py_err)
    }

    fn n_learners(&self) -> usize {
        self.inner.n_learners()
    }

    /// Video descriptor of a `[T,C,H,W]` clip.
    fn describe(&mut self, frames: &Tensor) -> PyResult<Vec<f64>> {
        let clip = tclnet::data::VideoClip {
            identity: 0,
            clip_id: 0,
            camera: 0,
            split: tclnet::data::Split::Query,
            frames: frames.inner.clone(),
        };
        let mut d = describe(&mut self.inner, &[&clip], self.config.test_frames).map_err(py_err)?;
        Ok(d.remove(0).vector.into_data())
    }

    /// Query-against-gallery metrics on `data`.
    fn evaluate<'py>(&mut self, py: Python<'py>, data: &Dataset) -> PyResult<Bound<'py, PyDict>> {
        let m = evaluate_model(&mut self.inner, &data.inner, self.config.test_frames).map_err(py_err)?;
        report_dict(py, &m)
    }

    fn digest(&self) -> String {
        self.inner.params.digest()
    }
}

/// Trains a fresh model on `data` and returns it with the per-epoch losses.
#[pyfunction]
fn train(config: &RunConfig, data: &Dataset) -> PyResult<(Model, Vec<(f64, f64)>)> {
    let cfg = &config.inner;
    let classes = class_map(&data.inner.train_clips()).len();
    let mut inner = CoreModel::new(cfg.model(), classes, cfg.seed).map_err(py_err)?;
    let report = core_train(&mut inner, &data.inner, &cfg.train(), None, |_| Ok(())).map_err(py_err)?;
    let losses = report.history.iter().map(|e| (e.ce_loss, e.triplet_loss)).collect();
    Ok((
        Model {
            inner,
            config: cfg.clone(),
        },
        losses,
    ))
}

#[pymodule]
pub fn tclnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tensor>()?;
    m.add_class::<RunConfig>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(block_binarize, m)?)?;
    m.add_function(wrap_pyfunction!(n_positions, m)?)?;
    m.add_function(wrap_pyfunction!(attention_weights, m)?)?;
    m.add_function(wrap_pyfunction!(compute_map, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
