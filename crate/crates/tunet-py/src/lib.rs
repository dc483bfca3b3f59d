//! Python bindings: the model configuration, a TUnet handle with
//! forward/save/load, the synthetic dataset, metrics, loss, gradient
//! checking and config-driven training.
//!
//! Tensors cross the boundary as `(list[float], list[int])` pairs in
//! row-major order, which keeps the module free of any numpy dependency.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tunet_core::config::ModelConfig;
use tunet_core::error::Error;
use tunet_core::gradcheck::gradcheck_model;
use tunet_core::io::{load_checkpoint, save_checkpoint, Dtype};
use tunet_core::metrics;
use tunet_core::model::{forward_inference, init_params, TUnetParams};
use tunet_core::optim::bce_loss_value;
use tunet_core::run_config::{run_training, RunConfig};
use tunet_core::synth;
use tunet_core::tape::Precision;
use tunet_core::tensor::Tensor;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::NonFiniteLoss { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tensor_from(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Tensor> {
    Tensor::from_vec(shape, data).map_err(to_py)
}

fn tensor_out(t: &Tensor) -> (Vec<f64>, Vec<usize>) {
    (t.data().to_vec(), t.shape().to_vec())
}

/// Architecture hyperparameters.
#[pyclass(name = "ModelConfig", from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (height=512, width=512, channels=1, patch_size=16, heads=8,
                        layers=6, mlp_ratio=4, embed_channels=None,
                        encoder_widths=None, decoder_widths=None,
                        decoder_convs_per_stage=2, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        height: usize,
        width: usize,
        channels: usize,
        patch_size: usize,
        heads: usize,
        layers: usize,
        mlp_ratio: usize,
        embed_channels: Option<usize>,
        encoder_widths: Option<Vec<usize>>,
        decoder_widths: Option<Vec<usize>>,
        decoder_convs_per_stage: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let encoder_widths = encoder_widths.unwrap_or_else(|| vec![16, 32, 64, 128, 256]);
        let decoder_widths = decoder_widths.unwrap_or_else(|| {
            let mut w = encoder_widths.clone();
            w.reverse();
            w
        });
        let inner = ModelConfig {
            height,
            width,
            channels,
            patch_size,
            num_heads: heads,
            num_layers: layers,
            mlp_ratio,
            embed_channels: embed_channels.unwrap_or(channels),
            encoder_widths,
            decoder_widths,
            decoder_convs_per_stage,
            alpha: 1.0,
            seed,
        };
        inner.validate().map_err(to_py)?;
        Ok(PyModelConfig { inner })
    }

    /// The reference configuration: 512×512, 16×16 patches, 8 heads, 6 layers.
    #[staticmethod]
    fn reference() -> Self {
        PyModelConfig {
            inner: ModelConfig::reference(),
        }
    }

    /// Desk-scale configuration used by the verification suite.
    #[staticmethod]
    fn tiny() -> Self {
        PyModelConfig {
            inner: ModelConfig::tiny(),
        }
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels
    }

    #[getter]
    fn patch_size(&self) -> usize {
        self.inner.patch_size
    }

    #[getter]
    fn seq_len(&self) -> usize {
        self.inner.seq_len()
    }

    #[getter]
    fn token_dim(&self) -> usize {
        self.inner.token_dim()
    }

    fn __repr__(&self) -> String {
        format!(
            "ModelConfig({}x{}, patch {}, heads {}, layers {}, S={}, d={})",
            self.inner.height,
            self.inner.width,
            self.inner.patch_size,
            self.inner.num_heads,
            self.inner.num_layers,
            self.inner.seq_len(),
            self.inner.token_dim()
        )
    }
}

/// A TUnet model instance (configuration + parameters).
#[pyclass(name = "TUnet")]
struct PyTUnet {
    cfg: ModelConfig,
    params: TUnetParams,
}

#[pymethods]
impl PyTUnet {
    /// Initialize fresh parameters deterministically from the config's seed.
    #[new]
    fn new(config: PyModelConfig) -> PyResult<Self> {
        let params = init_params(&config.inner).map_err(to_py)?;
        Ok(PyTUnet {
            cfg: config.inner,
            params,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (cfg, params) = load_checkpoint(path).map_err(to_py)?;
        Ok(PyTUnet { cfg, params })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(path, &self.cfg, &self.params, Dtype::F64).map_err(to_py)
    }

    /// Probability map for one image; returns `(data, shape)` with values in (0,1).
    fn forward(&self, data: Vec<f64>, shape: Vec<usize>) -> PyResult<(Vec<f64>, Vec<usize>)> {
        let image = tensor_from(data, shape)?;
        let prob =
            forward_inference(&self.cfg, &self.params, &image, Precision::F64).map_err(to_py)?;
        Ok(tensor_out(&prob))
    }

    fn param_count(&self) -> usize {
        self.params.param_count()
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig {
            inner: self.cfg.clone(),
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "TUnet({}x{}, patch {}, {} parameters)",
            self.cfg.height,
            self.cfg.width,
            self.cfg.patch_size,
            self.params.param_count()
        )
    }
}

/// Deterministic synthetic dataset; returns a list of
/// `((image_data, shape), (mask_data, shape))` pairs.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn synth_dataset(
    seed: u64,
    count: usize,
    size: usize,
) -> PyResult<Vec<((Vec<f64>, Vec<usize>), (Vec<f64>, Vec<usize>))>> {
    let samples = synth::synth_dataset(seed, count, size, size).map_err(to_py)?;
    Ok(samples
        .iter()
        .map(|s| (tensor_out(&s.image), tensor_out(&s.mask)))
        .collect())
}

/// Divide raw CT-style intensities by 1024.
#[pyfunction]
fn normalize(data: Vec<f64>) -> Vec<f64> {
    data.iter().map(|v| v / 1024.0).collect()
}

/// Mean binary cross-entropy between a probability map and a binary mask.
#[pyfunction]
fn bce_loss(pred: Vec<f64>, target: Vec<f64>, shape: Vec<usize>) -> PyResult<f64> {
    let p = tensor_from(pred, shape.clone())?;
    let t = tensor_from(target, shape)?;
    bce_loss_value(&p, &t).map_err(to_py)
}

/// Threshold a probability map with a strict `>`.
#[pyfunction]
#[pyo3(signature = (prob, threshold=0.8))]
fn binarize(prob: Vec<f64>, threshold: f64) -> PyResult<Vec<f64>> {
    let n = prob.len();
    let t = tensor_from(prob, vec![n])?;
    let m = metrics::binarize(&t, threshold).map_err(to_py)?;
    Ok(m.data().to_vec())
}

/// Segmentation metrics of two binary masks, as a dict.
#[pyfunction]
fn compute_metrics(py: Python<'_>, pred: Vec<f64>, gt: Vec<f64>) -> PyResult<Py<PyDict>> {
    if pred.len() != gt.len() {
        return Err(PyValueError::new_err("pred and gt lengths differ"));
    }
    let n = pred.len();
    let p = tensor_from(pred, vec![n])?;
    let g = tensor_from(gt, vec![n])?;
    let counts = metrics::confusion(&p, &g).map_err(to_py)?;
    let report = metrics::compute_metrics(&counts).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("miou", report.miou)?;
    d.set_item("dice", report.dice)?;
    d.set_item("pixel_acc", report.pixel_acc)?;
    d.set_item("precision", report.precision)?;
    d.set_item("recall", report.recall)?;
    d.set_item("tp", report.counts.true_pos)?;
    d.set_item("fp", report.counts.false_pos)?;
    d.set_item("tn", report.counts.true_neg)?;
    d.set_item("fn", report.counts.false_neg)?;
    Ok(d.into())
}

/// Finite-difference check of the full-model gradient; returns
/// `(worst_relative_error, passed)`.
#[pyfunction]
#[pyo3(signature = (config, samples=50))]
fn gradcheck(config: PyModelConfig, samples: usize) -> PyResult<(f64, bool)> {
    let report = gradcheck_model(&config.inner, samples, false).map_err(to_py)?;
    Ok((report.worst_rel_err, report.passed()))
}

/// Train from a JSON run-config string (same schema as the CLI); writes
/// metrics.csv / last.ckpt / best.ckpt into `out_dir` and returns a summary dict.
#[pyfunction]
fn run_train(py: Python<'_>, config_json: &str, out_dir: &str) -> PyResult<Py<PyDict>> {
    let run = RunConfig::from_json_str(config_json).map_err(to_py)?;
    let summary = run_training(&run, out_dir).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("steps", summary.steps)?;
    if let Some(ev) = &summary.final_train {
        d.set_item("final_train_loss", ev.loss)?;
        d.set_item("final_train_dice", ev.report.dice)?;
    }
    if let Some((epoch, dice)) = summary.best_val {
        d.set_item("best_val_epoch", epoch)?;
        d.set_item("best_val_dice", dice)?;
    }
    Ok(d.into())
}

#[pymodule]
fn tunet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyTUnet>()?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(bce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(binarize, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(run_train, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
