//! Python bindings: the model (build/load/save/predict), the pipeline
//! commands, the headline metrics, the selective scan, and the complexity
//! report. Structured results cross the boundary as JSON strings so the
//! Python side stays dependency free.

use std::path::Path;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use rri_seqnet::model::{CkptMeta, Model, ModelConfig};
use rri_seqnet::pipeline::{self, Precision, RunConfig};
use rri_seqnet::tensor::Tensor;
use rri_seqnet::train::EpochStats;
use rri_seqnet::{complexity, metrics, ssm, Error};

fn pyerr(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string_pretty(value).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn model_config(config_json: Option<&str>) -> PyResult<ModelConfig> {
    let cfg: ModelConfig = match config_json {
        None => ModelConfig::default(),
        Some(text) => serde_json::from_str(text)
            .map_err(|e| PyValueError::new_err(format!("bad model config JSON: {e}")))?,
    };
    cfg.validate().map_err(pyerr)?;
    Ok(cfg)
}

enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

/// TCN + selective SSM + FC classifier over 1800-sample RR windows.
#[pyclass(name = "Model")]
struct PyModel {
    inner: AnyModel,
}

#[pymethods]
impl PyModel {
    /// Builds a freshly initialized model. `config_json` is a ModelConfig
    /// object (defaults when omitted); `precision` is "f32" or "f64".
    #[staticmethod]
    #[pyo3(signature = (config_json=None, seed=0, precision="f32"))]
    fn build(config_json: Option<&str>, seed: u64, precision: &str) -> PyResult<Self> {
        let cfg = model_config(config_json)?;
        let inner = match precision.parse::<Precision>().map_err(pyerr)? {
            Precision::F32 => AnyModel::F32(Model::build(cfg, seed).map_err(pyerr)?),
            Precision::F64 => AnyModel::F64(Model::build(cfg, seed).map_err(pyerr)?),
        };
        Ok(Self { inner })
    }

    /// Loads a checkpoint, following its stored dtype.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (dtype, _, _) = rri_seqnet::model::checkpoint_header(Path::new(path)).map_err(pyerr)?;
        let inner = match dtype.as_str() {
            "f32" => AnyModel::F32(Model::load_checkpoint(Path::new(path)).map_err(pyerr)?.0),
            "f64" => AnyModel::F64(Model::load_checkpoint(Path::new(path)).map_err(pyerr)?.0),
            other => {
                return Err(PyValueError::new_err(format!(
                    "unsupported dtype '{other}'"
                )))
            }
        };
        Ok(Self { inner })
    }

    #[pyo3(signature = (path, epoch=0, best_val_loss=None, seed=0))]
    fn save(&self, path: &str, epoch: u64, best_val_loss: Option<f64>, seed: u64) -> PyResult<()> {
        let meta = CkptMeta {
            epoch,
            best_val_loss,
            seed,
        };
        match &self.inner {
            AnyModel::F32(m) => m.save_checkpoint(Path::new(path), &meta),
            AnyModel::F64(m) => m.save_checkpoint(Path::new(path), &meta),
        }
        .map_err(pyerr)
    }

    /// Class probabilities `[p_control, p_event]` for one window of
    /// resampled RR values (length must equal the configured input length).
    fn predict_window(&mut self, values: Vec<f64>) -> PyResult<[f64; 2]> {
        Ok(self.predict_batch(vec![values])?[0])
    }

    /// Row-wise probabilities for a batch of windows.
    fn predict_batch(&mut self, rows: Vec<Vec<f64>>) -> PyResult<Vec<[f64; 2]>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let len = rows[0].len();
        if rows.iter().any(|r| r.len() != len) {
            return Err(PyValueError::new_err("rows differ in length"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        match &mut self.inner {
            AnyModel::F32(m) => {
                let data: Vec<f32> = flat.iter().map(|&v| v as f32).collect();
                m.predict_proba(&Tensor::new(vec![rows.len(), 1, len], data))
            }
            AnyModel::F64(m) => m.predict_proba(&Tensor::new(vec![rows.len(), 1, len], flat)),
        }
        .map_err(pyerr)
    }

    fn num_params(&self) -> u64 {
        match &self.inner {
            AnyModel::F32(m) => m.num_trainable_params(),
            AnyModel::F64(m) => m.num_trainable_params(),
        }
    }

    fn dtype(&self) -> &'static str {
        match &self.inner {
            AnyModel::F32(_) => "f32",
            AnyModel::F64(_) => "f64",
        }
    }

    /// The model's configuration as JSON.
    fn config_json(&self) -> PyResult<String> {
        match &self.inner {
            AnyModel::F32(m) => to_json(&m.config),
            AnyModel::F64(m) => to_json(&m.config),
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(dtype={}, params={})",
            self.dtype(),
            self.num_params()
        )
    }
}

fn run_config(config_json: Option<&str>) -> PyResult<RunConfig> {
    match config_json {
        None => Ok(RunConfig::default()),
        Some(text) => serde_json::from_str(text)
            .map_err(|e| PyValueError::new_err(format!("bad run config JSON: {e}"))),
    }
}

/// Generates a synthetic corpus (one CSV per subject); returns the summary
/// as JSON. `config_json` is a RunConfig object {model, optim, synth}.
#[pyfunction]
#[pyo3(signature = (out_dir, seed=7, config_json=None, force=false))]
fn synth(out_dir: &str, seed: u64, config_json: Option<&str>, force: bool) -> PyResult<String> {
    let rc = run_config(config_json)?;
    let summary = pipeline::run_synth(&rc.synth, seed, Path::new(out_dir), force).map_err(pyerr)?;
    to_json(&summary)
}

/// Windows a CSV directory into the segment cache with per-seed splits;
/// returns the summary as JSON.
#[pyfunction]
#[pyo3(signature = (data_dir, out_dir, seeds=vec![101, 102, 103, 104, 105], force=false))]
fn prepare(data_dir: &str, out_dir: &str, seeds: Vec<u64>, force: bool) -> PyResult<String> {
    let summary = pipeline::run_prepare(Path::new(data_dir), Path::new(out_dir), &seeds, force)
        .map_err(pyerr)?;
    to_json(&summary)
}

/// Trains one seed from a prepared cache; returns the summary as JSON.
#[pyfunction]
#[pyo3(signature = (prep_dir, out_dir, seed, config_json=None, precision="f32", force=false))]
fn train(
    prep_dir: &str,
    out_dir: &str,
    seed: u64,
    config_json: Option<&str>,
    precision: &str,
    force: bool,
) -> PyResult<String> {
    let rc = run_config(config_json)?;
    rc.model.validate().map_err(pyerr)?;
    let summary = pipeline::run_train(
        Path::new(prep_dir),
        Path::new(out_dir),
        &rc.model,
        &rc.optim,
        seed,
        precision.parse().map_err(pyerr)?,
        force,
        |_: &EpochStats| {},
    )
    .map_err(pyerr)?;
    to_json(&summary)
}

/// Scores one seed's checkpoint on a split; writes metrics_seed<k>.json and
/// returns it as JSON.
#[pyfunction]
#[pyo3(signature = (prep_dir, ckpt, out_dir, seed, split="test", batch_size=16))]
fn eval(
    prep_dir: &str,
    ckpt: &str,
    out_dir: &str,
    seed: u64,
    split: &str,
    batch_size: usize,
) -> PyResult<String> {
    let output = pipeline::run_eval(
        Path::new(prep_dir),
        Path::new(ckpt),
        Path::new(out_dir),
        split,
        seed,
        batch_size,
    )
    .map_err(pyerr)?;
    to_json(&output)
}

/// Scores the last complete window of one subject's CSV; returns JSON.
#[pyfunction]
#[pyo3(signature = (ckpt, csv, subject=None))]
fn predict(ckpt: &str, csv: &str, subject: Option<&str>) -> PyResult<String> {
    let output = pipeline::run_predict(Path::new(ckpt), Path::new(csv), subject).map_err(pyerr)?;
    to_json(&output)
}

/// Area under the ROC curve (rank-based, tie-aware); None when a class is
/// absent.
#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<u8>) -> Option<f64> {
    metrics::auroc(&scores, &labels)
}

/// Area under the precision-recall curve; None when no positives exist.
#[pyfunction]
fn auprc(scores: Vec<f64>, labels: Vec<u8>) -> Option<f64> {
    metrics::auprc(&scores, &labels)
}

/// Support-weighted mean of the per-class F1 scores.
#[pyfunction]
fn weighted_f1(tp: u64, fn_: u64, fp: u64, tn: u64) -> f64 {
    metrics::weighted_f1(&metrics::Confusion { tp, fn_, fp, tn })
}

/// Full metric report at a threshold, as JSON.
#[pyfunction]
#[pyo3(signature = (scores, labels, threshold=0.5))]
fn metric_report(scores: Vec<f64>, labels: Vec<u8>, threshold: f64) -> PyResult<String> {
    to_json(&metrics::report(&scores, &labels, threshold))
}

/// Zero-order-hold discretization followed by the selective state scan.
/// Shapes (row-major, time-major): delta [l,d_inner], a [d_inner,n_state],
/// b and c [l,n_state], dskip [d_inner], x [l,d_inner]; returns y [l,d_inner].
#[pyfunction]
#[pyo3(signature = (l, d_inner, n_state, delta, a, b, c, dskip, x, parallel=true))]
#[allow(clippy::too_many_arguments)]
fn selective_scan(
    l: usize,
    d_inner: usize,
    n_state: usize,
    delta: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    dskip: Vec<f64>,
    x: Vec<f64>,
    parallel: bool,
) -> PyResult<Vec<f64>> {
    let expect = [
        ("delta", delta.len(), l * d_inner),
        ("a", a.len(), d_inner * n_state),
        ("b", b.len(), l * n_state),
        ("c", c.len(), l * n_state),
        ("dskip", dskip.len(), d_inner),
        ("x", x.len(), l * d_inner),
    ];
    for (name, got, want) in expect {
        if got != want {
            return Err(PyValueError::new_err(format!(
                "{name} has {got} values, expected {want}"
            )));
        }
    }
    let (abar, bbar) = ssm::discretize(l, d_inner, n_state, &delta, &a, &b);
    let y = if parallel {
        ssm::selective_scan_parallel(l, d_inner, n_state, &abar, &bbar, &c, &dskip, &x)
    } else {
        ssm::selective_scan_sequential(l, d_inner, n_state, &abar, &bbar, &c, &dskip, &x)
    };
    Ok(y)
}

/// Closed-form parameter/MAC/FLOP accounting for a model config, as JSON.
#[pyfunction]
#[pyo3(signature = (config_json=None))]
fn complexity_report(config_json: Option<&str>) -> PyResult<String> {
    let cfg = model_config(config_json)?;
    to_json(&complexity::analyze(&cfg).map_err(pyerr)?)
}

#[pymodule]
fn rri_seqnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(prepare, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(eval, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(auprc, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_f1, m)?)?;
    m.add_function(wrap_pyfunction!(metric_report, m)?)?;
    m.add_function(wrap_pyfunction!(selective_scan, m)?)?;
    m.add_function(wrap_pyfunction!(complexity_report, m)?)?;
    Ok(())
}
