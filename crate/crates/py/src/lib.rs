//! Python module `djpeg`: JPEG coefficient access, the analytic
//! quantization model, dataset generation, and training/inference of the
//! double-compression classifier.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use djpeg_core::dataset::{self, CorpusConfig, DatasetConfig, DatasetManifest, Split};
use djpeg_core::features::{extract_histograms, FeatureRecord, FreqOrder};
use djpeg_core::jpeg;
use djpeg_core::model::{self, Pooling, Projector};
use djpeg_core::quant_model::{self, DensitySpec};
use djpeg_core::train::{self, TrainConfig, DEFAULT_THRESHOLD};

create_exception!(djpeg, DjpegError, PyException, "Raised with args (code, message).");

fn err(e: djpeg_core::Error) -> PyErr {
    DjpegError::new_err((e.code(), e.to_string()))
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let items = items.iter().map(|x| json_to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any()
        }
        Value::Object(map) => {
            let d = PyDict::new(py);
            for (k, x) in map {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| err(e.into()))?;
    json_to_py(py, &v)
}

/// Frame info, Q-matrices (raster order) and restart interval of a JPEG.
#[pyfunction]
fn parse_jpeg<'py>(py: Python<'py>, data: &[u8]) -> PyResult<Bound<'py, PyDict>> {
    let dec = jpeg::parse_jpeg(data).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("width", dec.frame.width)?;
    d.set_item("height", dec.frame.height)?;
    d.set_item("components", to_py(py, &dec.frame.components)?)?;
    let qs: Vec<Vec<u16>> = dec.qmatrices.iter().map(|q| q.steps().to_vec()).collect();
    d.set_item("qmatrices", qs)?;
    d.set_item("restart_interval", dec.restart_interval)?;
    Ok(d)
}

/// Quantized luma coefficients as `(width_blocks, height_blocks, blocks)`,
/// each block 64 values in raster order.
#[pyfunction]
fn luma_coefficients(data: &[u8]) -> PyResult<(usize, usize, Vec<Vec<i32>>)> {
    let dec = jpeg::parse_jpeg(data).map_err(err)?;
    let (plane, _) = dec.luma();
    let blocks = plane.blocks.iter().map(|b| b.to_vec()).collect();
    Ok((plane.width_blocks, plane.height_blocks, blocks))
}

/// IJG luminance table at `quality` (1..=100), raster order.
#[pyfunction]
fn standard_qmatrix(quality: u32) -> PyResult<Vec<u16>> {
    Ok(jpeg::standard_qmatrix(quality).map_err(err)?.steps().to_vec())
}

/// Luma AC histograms over bins `[-b, b]`: 63 rows in raster frequency order.
#[pyfunction]
fn histograms(data: &[u8], b: usize) -> PyResult<Vec<Vec<u32>>> {
    let dec = jpeg::parse_jpeg(data).map_err(err)?;
    let h = extract_histograms(dec.luma().0, b).map_err(err)?;
    Ok(h.counts.chunks(h.bins()).map(<[u32]>::to_vec).collect())
}

fn density(kind: &str, center: f64, spread: Option<f64>) -> PyResult<DensitySpec> {
    match kind {
        "uniform" => {
            let s = spread.unwrap_or(100.0);
            DensitySpec::uniform(center - s, center + s).map_err(err)
        }
        "gaussian" => DensitySpec::gaussian(center, spread.unwrap_or(20.0)).map_err(err),
        "laplacian" => DensitySpec::laplacian(center, spread.unwrap_or(10.0)).map_err(err),
        other => Err(err(djpeg_core::Error::Config(format!("unknown density {other:?}")))),
    }
}

/// Analytic PMF of a quantized (`q2=None`) or requantized coefficient as
/// `(d, P(d))` pairs over `[-support, support]`.
#[pyfunction]
#[pyo3(signature = (q1, q2=None, density_kind="uniform", center=0.0, spread=None, support=200))]
fn pmf(
    q1: u32,
    q2: Option<u32>,
    density_kind: &str,
    center: f64,
    spread: Option<f64>,
    support: i32,
) -> PyResult<Vec<(i32, f64)>> {
    let dens = density(density_kind, center, spread)?;
    let p = match q2 {
        None => quant_model::pmf_single(q1, &dens, -support..=support),
        Some(q2) => quant_model::pmf_double(q1, q2, &dens, -support..=support),
    }
    .map_err(err)?;
    Ok(p.iter().collect())
}

/// "S1" to "S5".
#[pyfunction]
fn classify_scenario(q1: u32, q2: u32) -> PyResult<String> {
    Ok(format!("{:?}", quant_model::classify_scenario(q1, q2).map_err(err)?))
}

#[pyfunction]
fn lr_schedule(epoch: u32) -> PyResult<f64> {
    train::lr_schedule(epoch).map_err(err)
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    if scores.len() != labels.len() {
        return Err(err(djpeg_core::Error::Shape(format!(
            "{} scores, {} labels",
            scores.len(),
            labels.len()
        ))));
    }
    Ok(train::roc_auc(&scores, &labels).map_err(err)?.1)
}

/// Write synthetic raw PGM images; returns their paths.
#[pyfunction]
#[pyo3(signature = (out_dir, count=50, width=512, height=512, seed=0))]
fn synth_corpus(out_dir: PathBuf, count: usize, width: usize, height: usize, seed: u64) -> PyResult<Vec<PathBuf>> {
    let cfg = CorpusConfig {
        count,
        width,
        height,
        seed,
    };
    dataset::synth_corpus(&out_dir, &cfg).map_err(err)
}

/// Build a labeled dataset from raw images with the built-in Q-pool.
/// Passing `seen_fraction` adds a `test_unseen` split.
#[pyfunction]
#[pyo3(signature = (raw_dir, out_dir, patch_size=256, mode="subgrid", seed=0, seen_fraction=None, storage="packed"))]
#[allow(clippy::too_many_arguments)]
fn build_dataset<'py>(
    py: Python<'py>,
    raw_dir: PathBuf,
    out_dir: PathBuf,
    patch_size: usize,
    mode: &str,
    seed: u64,
    seen_fraction: Option<f64>,
    storage: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = DatasetConfig {
        patch_size,
        mode: mode.parse().map_err(err)?,
        seed,
        storage: storage.parse().map_err(err)?,
        ..DatasetConfig::default()
    };
    if let Some(f) = seen_fraction {
        cfg.unseen_eval = true;
        cfg.seen_fraction = f;
    }
    let manifest = py
        .detach(|| dataset::build_dataset(&raw_dir, &out_dir, &dataset::default_q_pool(), &cfg))
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("records", manifest.records.len())?;
    d.set_item("digest", manifest.digest().map_err(err)?)?;
    Ok(d)
}

/// Classifier architecture. Defaults are the full-size model.
#[pyclass(name = "ModelConfig", from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: model::ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (b=80, n=128, filters=16, depth=3, residual=true, pooling="wam", order="raster", projector="hq"))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        b: usize,
        n: usize,
        filters: usize,
        depth: usize,
        residual: bool,
        pooling: &str,
        order: &str,
        projector: &str,
    ) -> PyResult<Self> {
        let inner = model::ModelConfig {
            b,
            n,
            filters,
            depth,
            residual,
            pooling: pooling.parse::<Pooling>().map_err(err)?,
            order: order.parse::<FreqOrder>().map_err(err)?,
            projector: projector.parse::<Projector>().map_err(err)?,
            ..model::ModelConfig::default()
        };
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    /// Row `row` (1..=17) of the ablation grid.
    #[staticmethod]
    fn ablation(row: u32) -> PyResult<Self> {
        Ok(Self {
            inner: model::ModelConfig::ablation(row).map_err(err)?,
        })
    }

    /// `{"trainable", "non_trainable", "total"}`.
    fn param_count<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.count_params())
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    #[getter]
    fn b(&self) -> usize {
        self.inner.b
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    fn __repr__(&self) -> String {
        format!("ModelConfig({})", serde_json::to_string(&self.inner).unwrap_or_default())
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: model::Model,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized weights.
    #[new]
    #[pyo3(signature = (config, seed=0))]
    fn new(config: PyModelConfig, seed: u64) -> PyResult<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            inner: model::Model::build(&config.inner, &mut rng).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: model::load_checkpoint(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model::save_checkpoint(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig {
            inner: self.inner.config,
        }
    }

    fn param_count(&self) -> usize {
        self.inner.param_count().total
    }

    /// Probability that the JPEG's luma channel was compressed twice.
    fn predict_jpeg(&self, data: &[u8]) -> PyResult<f64> {
        let dec = jpeg::parse_jpeg(data).map_err(err)?;
        let (plane, q) = dec.luma();
        let record = FeatureRecord {
            label: 0,
            hist: extract_histograms(plane, self.inner.config.b).map_err(err)?,
            q: *q,
        };
        Ok(train::predict_records(&self.inner, &[record], 1).map_err(err)?[0])
    }

    /// Confusion counts, TPR/TNR, accuracy and AUC on one dataset split.
    #[pyo3(signature = (dataset_dir, split="test", threshold=DEFAULT_THRESHOLD))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset_dir: PathBuf,
        split: &str,
        threshold: f64,
    ) -> PyResult<Bound<'py, PyAny>> {
        let split: Split = split.parse().map_err(err)?;
        let report = py
            .detach(|| {
                let manifest = DatasetManifest::load(&dataset_dir)?;
                let records = train::split_features(&manifest, &dataset_dir, split, self.inner.config.b)?;
                let name = serde_json::to_value(split)?.as_str().unwrap_or_default().to_owned();
                train::evaluate(&self.inner, &records, &name, threshold)
            })
            .map_err(err)?;
        to_py(py, &report)
    }
}

/// Train on a dataset directory; returns the best model and the epoch log.
#[pyfunction]
#[pyo3(signature = (dataset_dir, config, epochs=25, batch_size=64, seed=0))]
fn train_model<'py>(
    py: Python<'py>,
    dataset_dir: PathBuf,
    config: PyModelConfig,
    epochs: u32,
    batch_size: usize,
    seed: u64,
) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
    let cfg = TrainConfig {
        epochs,
        batch_size,
        seed,
        ..TrainConfig::default()
    };
    let outcome = py
        .detach(|| {
            let manifest = DatasetManifest::load(&dataset_dir)?;
            let b = config.inner.b;
            let train_set = train::split_features(&manifest, &dataset_dir, Split::Train, b)?;
            let val_set = train::split_features(&manifest, &dataset_dir, Split::Val, b)?;
            train::train(&train_set, &val_set, &config.inner, &cfg, |_| {})
        })
        .map_err(err)?;
    let log = to_py(py, &outcome.log)?;
    Ok((PyModel { inner: outcome.model }, log))
}

#[pymodule]
fn djpeg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DjpegError", m.py().get_type::<DjpegError>())?;
    m.add_function(wrap_pyfunction!(parse_jpeg, m)?)?;
    m.add_function(wrap_pyfunction!(luma_coefficients, m)?)?;
    m.add_function(wrap_pyfunction!(standard_qmatrix, m)?)?;
    m.add_function(wrap_pyfunction!(histograms, m)?)?;
    m.add_function(wrap_pyfunction!(pmf, m)?)?;
    m.add_function(wrap_pyfunction!(classify_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(lr_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(build_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
