//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use driftfuse_core::dataset::{
    class_histogram, fit_standardizer, parse_uci_file, DomainDataset, DomainRole, Standardizer, UCI_NUM_CLASSES,
    UCI_NUM_FEATURES,
};
use driftfuse_core::evaluate::{accuracy, predict, weighted_average_accuracy};
use driftfuse_core::features::{ema_sequence, extract_sensor_features, ResponseCurve, SteadyWindow};
use driftfuse_core::gradcheck::{gradcheck_arch, run_gradcheck};
use driftfuse_core::lmmd::{class_weights_from_labels, class_weights_from_soft, lmmd_estimate, lmmd_oracle, KernelConfig};
use driftfuse_core::losses::lambda_schedule;
use driftfuse_core::synth::{synthetic_uci, DriftSpec};
use driftfuse_core::trainer::{load_checkpoint, save_checkpoint, train, Checkpoint, TrainConfig};
use driftfuse_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Shape(_)
        | Error::InvalidArgument(_)
        | Error::Config(_)
        | Error::Empty(_)
        | Error::Parse { .. }
        | Error::Unlabeled
        | Error::ZeroBandwidth => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_array(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Ok(Array2::from_shape_vec((n, w), rows.into_iter().flatten().collect()).unwrap())
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// A labeled (or unlabeled) batch of feature vectors.
#[pyclass(name = "Dataset", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: DomainDataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (features, labels=None, batch_id=0, num_classes=None))]
    fn new(
        features: Vec<Vec<f64>>,
        labels: Option<Vec<usize>>,
        batch_id: u32,
        num_classes: Option<usize>,
    ) -> PyResult<Self> {
        let dim = features.first().map_or(0, Vec::len);
        let role = if labels.is_some() { DomainRole::Source } else { DomainRole::Target };
        let k = num_classes.unwrap_or_else(|| labels.as_ref().and_then(|l| l.iter().max()).map_or(1, |m| m + 1));
        let samples = features
            .into_iter()
            .enumerate()
            .map(|(i, f)| driftfuse_core::dataset::GasSample {
                features: f,
                label: labels.as_ref().and_then(|l| l.get(i).copied()),
                concentration: None,
            })
            .collect();
        DomainDataset::new(samples, batch_id, k, dim, role)
            .map(|inner| PyDataset { inner })
            .map_err(py_err)
    }

    /// Reads a UCI `batch{i}.dat` file.
    #[staticmethod]
    fn load_uci(path: PathBuf) -> PyResult<Self> {
        parse_uci_file(path, UCI_NUM_FEATURES)
            .map(|inner| PyDataset { inner })
            .map_err(py_err)
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.feature_matrix())
    }

    #[getter]
    fn labels(&self) -> Option<Vec<usize>> {
        self.inner.samples().iter().map(|s| s.label).collect()
    }

    #[getter]
    fn batch_id(&self) -> u32 {
        self.inner.batch_id()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn class_histogram(&self) -> PyResult<Vec<usize>> {
        class_histogram(&self.inner).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(batch_id={}, samples={}, features={})",
            self.inner.batch_id(),
            self.inner.len(),
            self.inner.feature_dim()
        )
    }
}

/// Training configuration; see the shipped presets.
#[pyclass(name = "TrainConfig", from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        TrainConfig::preset(name).map(|inner| Self { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn presets() -> Vec<&'static str> {
        TrainConfig::preset_names()
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        TrainConfig::from_toml_str(text).map(|inner| Self { inner }).map_err(py_err)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(py_err)
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }

    #[setter]
    fn set_epochs(&mut self, v: usize) {
        self.inner.epochs = v;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }

    #[getter]
    fn batch_size(&self) -> usize {
        self.inner.batch_size
    }

    #[setter]
    fn set_batch_size(&mut self, v: usize) {
        self.inner.batch_size = v;
    }

    #[getter]
    fn learning_rate(&self) -> f64 {
        self.inner.learning_rate
    }

    #[setter]
    fn set_learning_rate(&mut self, v: f64) {
        self.inner.learning_rate = v;
    }

    #[getter]
    fn source_only(&self) -> bool {
        self.inner.source_only
    }

    #[setter]
    fn set_source_only(&mut self, v: bool) {
        self.inner.source_only = v;
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig({:?})", self.inner)
    }
}

/// A trained model plus the feature scaling fitted on its sources.
#[pyclass(name = "Model")]
struct PyModel {
    checkpoint: Checkpoint,
    model: driftfuse_core::network::Model,
    standardizer: Option<Standardizer>,
    #[pyo3(get)]
    losses: Vec<f64>,
    #[pyo3(get)]
    target_accuracy: Vec<f64>,
}

impl PyModel {
    fn prepare(&self, x: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
        let mut x = to_array(x)?;
        if let Some(st) = &self.standardizer {
            if x.ncols() != st.dim() {
                return Err(PyValueError::new_err(format!("expected {} features, got {}", st.dim(), x.ncols())));
            }
            for mut row in x.rows_mut() {
                let z = st.apply(row.as_slice().unwrap());
                row.assign(&ndarray::ArrayView1::from(&z));
            }
        }
        Ok(x)
    }
}

#[pymethods]
impl PyModel {
    /// Predicted class per row (mean of the per-pair classifiers).
    fn predict(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        let x = self.prepare(features)?;
        predict(&self.model, &x).map_err(py_err)
    }

    fn accuracy(&self, data: &PyDataset) -> PyResult<f64> {
        let labels = data.inner.labels().map_err(py_err)?;
        let preds = self.predict(to_rows(&data.inner.feature_matrix()))?;
        accuracy(&preds, &labels).map_err(py_err)
    }

    /// Fused features of source pair `pair` (0-based).
    fn fused_features(&self, features: Vec<Vec<f64>>, pair: usize) -> PyResult<Vec<Vec<f64>>> {
        let x = self.prepare(features)?;
        self.model.fused_features(&x, pair).map(|f| to_rows(&f)).map_err(py_err)
    }

    /// Writes the checkpoint. The feature scaling is not part of it.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.checkpoint, path).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let checkpoint = load_checkpoint(path).map_err(py_err)?;
        let model = checkpoint.model().map_err(py_err)?;
        Ok(PyModel {
            checkpoint,
            model,
            standardizer: None,
            losses: Vec::new(),
            target_accuracy: Vec::new(),
        })
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.model.store().num_scalars()
    }
}

/// Trains on labeled sources and an unlabeled target. Target labels, if any,
/// are only used to record per-epoch accuracy.
#[pyfunction]
#[pyo3(signature = (sources, target, config))]
fn train_model(py: Python<'_>, sources: Vec<PyDataset>, target: PyDataset, config: PyTrainConfig) -> PyResult<PyModel> {
    let cfg = config.inner;
    let k = match cfg.dataset {
        driftfuse_core::trainer::DatasetKind::Uci => UCI_NUM_CLASSES,
        driftfuse_core::trainer::DatasetKind::Enose => sources
            .iter()
            .chain(std::iter::once(&target))
            .map(|d| d.inner.num_classes())
            .max()
            .unwrap_or(1),
    };
    let mut srcs: Vec<DomainDataset> = sources
        .into_iter()
        .map(|d| d.inner.with_num_classes(k))
        .collect::<Result<_, _>>()
        .map_err(py_err)?;
    let mut tgt = target.inner.with_num_classes(k).map_err(py_err)?.with_role(DomainRole::Target).map_err(py_err)?;
    let standardizer = if cfg.standardize {
        let refs: Vec<&DomainDataset> = srcs.iter().collect();
        let st = fit_standardizer(&refs).map_err(py_err)?;
        srcs = srcs.iter().map(|d| st.apply_dataset(d)).collect::<Result<_, _>>().map_err(py_err)?;
        tgt = st.apply_dataset(&tgt).map_err(py_err)?;
        Some(st)
    } else {
        None
    };
    let (unlabeled, labels) = tgt.split_target();
    let monitor = match labels {
        Some(l) => Some(
            driftfuse_core::evaluate::TargetMonitor::new(unlabeled.features.clone(), l).map_err(py_err)?,
        ),
        None => None,
    };
    let outcome = py
        .detach(|| train(&srcs, &unlabeled, &cfg, monitor.as_ref()))
        .map_err(py_err)?;
    let checkpoint = Checkpoint::from_outcome(&outcome, &cfg);
    Ok(PyModel {
        losses: outcome.logs.iter().map(|l| l.losses.total).collect(),
        target_accuracy: outcome.logs.iter().filter_map(|l| l.target_acc).collect(),
        checkpoint,
        model: outcome.model,
        standardizer,
    })
}

/// Class-weighted MMD between source rows (hard labels) and target rows
/// (soft predictions). `bandwidth=None` uses the median heuristic.
#[pyfunction]
#[pyo3(signature = (source, target, source_labels, target_probs, num_classes, bandwidth=None, reference=false))]
fn lmmd(
    source: Vec<Vec<f64>>,
    target: Vec<Vec<f64>>,
    source_labels: Vec<usize>,
    target_probs: Vec<Vec<f64>>,
    num_classes: usize,
    bandwidth: Option<f64>,
    reference: bool,
) -> PyResult<f64> {
    let (s, t, p) = (to_array(source)?, to_array(target)?, to_array(target_probs)?);
    let ws = class_weights_from_labels(&source_labels, num_classes).map_err(py_err)?;
    let wt = class_weights_from_soft(&p).map_err(py_err)?;
    let cfg = bandwidth.map_or_else(KernelConfig::default, KernelConfig::fixed);
    let f = if reference { lmmd_oracle } else { lmmd_estimate };
    f(&s, &t, &ws, &wt, &cfg).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (alpha, epoch, epochs, minus_one=false))]
fn lambda_weight(alpha: f64, epoch: usize, epochs: usize, minus_one: bool) -> PyResult<f64> {
    lambda_schedule(alpha, epoch, epochs, minus_one).map_err(py_err)
}

#[pyfunction]
fn ema(voltages: Vec<f64>, alpha: f64) -> PyResult<Vec<f64>> {
    let c = ResponseCurve::new(voltages, 1.0, 0).map_err(py_err)?;
    ema_sequence(&c, alpha).map_err(py_err)
}

/// The five per-sensor features: steady difference, steady ratio and the
/// signed EMA peaks for alphas 0.1, 0.01, 0.001.
#[pyfunction]
#[pyo3(signature = (voltages, baseline, steady_frac=0.25))]
fn sensor_features(voltages: Vec<f64>, baseline: f64, steady_frac: f64) -> PyResult<Vec<f64>> {
    let n = voltages.len();
    let c = ResponseCurve::new(voltages, baseline, 0).map_err(py_err)?;
    let w = SteadyWindow::trailing_fraction(n, steady_frac).map_err(py_err)?;
    extract_sensor_features(&c, w).map(|f| f.to_array().to_vec()).map_err(py_err)
}

#[pyfunction]
fn weighted_accuracy(per_batch: Vec<(f64, usize)>) -> PyResult<f64> {
    weighted_average_accuracy(&per_batch).map_err(py_err)
}

/// Maximum relative error per gradient block on a tiny random model.
#[pyfunction]
#[pyo3(signature = (seed=0, corrupt=None))]
fn gradcheck(py: Python<'_>, seed: u64, corrupt: Option<String>) -> PyResult<Vec<(String, f64, bool)>> {
    let report = py
        .detach(|| run_gradcheck(&gradcheck_arch(), seed, corrupt.as_deref()))
        .map_err(py_err)?;
    Ok(report
        .blocks
        .into_iter()
        .map(|b| {
            let ok = b.passed();
            (b.block, b.max_rel_err, ok)
        })
        .collect())
}

/// Ten drifting batches with the UCI class composition scaled by `scale`.
#[pyfunction]
#[pyo3(signature = (scale=1.0, seed=0, drift=0.25))]
fn synthetic_batches(scale: f64, seed: u64, drift: f64) -> PyResult<Vec<PyDataset>> {
    let spec = DriftSpec {
        seed,
        drift,
        ..DriftSpec::default()
    };
    synthetic_uci(spec, scale)
        .map(|v| v.into_iter().map(|inner| PyDataset { inner }).collect())
        .map_err(py_err)
}

#[pymodule]
fn driftfuse_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(lmmd, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_weight, m)?)?;
    m.add_function(wrap_pyfunction!(ema, m)?)?;
    m.add_function(wrap_pyfunction!(sensor_features, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_batches, m)?)?;
    Ok(())
}
