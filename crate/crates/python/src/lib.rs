//! Python bindings: tensors, wavelet transforms, the core kernels, the
//! synthetic world, losses, metrics, training and checkpointed generators.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use wavegen_core::data::{self, LabelMap, ShapesWorldSpec};
use wavegen_core::error::Error;
use wavegen_core::eval;
use wavegen_core::losses::ClassWeights;
use wavegen_core::nn::sample_latent;
use wavegen_core::seed::rng_for;
use wavegen_core::tensor::{self, Tape};
use wavegen_core::train::{self, ModelBundle, TrainConfig};
use wavegen_core::wavelet::{self as wl, Arrangement};

fn py_err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Dense 32-bit tensor in row-major order.
#[pyclass(name = "Tensor", module = "wavegen", from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: tensor::Tensor,
}

impl From<tensor::Tensor> for PyTensor {
    fn from(inner: tensor::Tensor) -> Self {
        Self { inner }
    }
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(data: Vec<f32>, shape: Vec<usize>) -> PyResult<Self> {
        Ok(tensor::Tensor::new(&shape, data).map_err(py_err)?.into())
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        tensor::Tensor::zeros(&shape).into()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Flat list of values.
    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        Ok(self.inner.clone().reshape(&shape).map_err(py_err)?.into())
    }

    fn sum(&self) -> f32 {
        self.inner.sum()
    }

    fn max_abs_diff(&self, other: &PyTensor) -> f32 {
        self.inner.max_abs_diff(&other.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

fn arrangement(name: &str) -> PyResult<Arrangement> {
    name.parse().map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (x, arrangement_name = "channelwise"))]
fn dwt(x: &PyTensor, arrangement_name: &str) -> PyResult<PyTensor> {
    Ok(wl::dwt(&x.inner, arrangement(arrangement_name)?).map_err(py_err)?.into())
}

#[pyfunction]
#[pyo3(signature = (coeffs, arrangement_name = "channelwise"))]
fn iwt(coeffs: &PyTensor, arrangement_name: &str) -> PyResult<PyTensor> {
    Ok(wl::iwt(&coeffs.inner, arrangement(arrangement_name)?).map_err(py_err)?.into())
}

#[pyfunction]
fn rearrange(coeffs: &PyTensor, source: &str, target: &str) -> PyResult<PyTensor> {
    Ok(wl::rearrange(&coeffs.inner, arrangement(source)?, arrangement(target)?)
        .map_err(py_err)?
        .into())
}

#[pyfunction]
#[pyo3(signature = (x, weight, bias = None, stride = 1, padding = 0))]
fn conv2d(x: &PyTensor, weight: &PyTensor, bias: Option<PyTensor>, stride: usize, padding: usize) -> PyResult<PyTensor> {
    Ok(tensor::conv2d(&x.inner, &weight.inner, bias.as_ref().map(|b| &b.inner), stride, padding)
        .map_err(py_err)?
        .into())
}

#[pyfunction]
fn bilinear_resize(x: &PyTensor, height: usize, width: usize) -> PyResult<PyTensor> {
    Ok(tensor::bilinear_resize(&x.inner, height, width).map_err(py_err)?.into())
}

#[pyfunction]
fn nearest_resize(x: &PyTensor, height: usize, width: usize) -> PyResult<PyTensor> {
    Ok(tensor::nearest_resize(&x.inner, height, width).map_err(py_err)?.into())
}

#[pyfunction]
fn log_softmax(x: &PyTensor) -> PyResult<PyTensor> {
    Ok(tensor::log_softmax(&x.inner).map_err(py_err)?.into())
}

/// `(masks, images)`: flat class-id lists and `3×H×W` tensors.
#[pyfunction]
#[pyo3(signature = (classes, height, width, count, seed = 0))]
fn generate_world(classes: usize, height: usize, width: usize, count: usize, seed: u64) -> PyResult<(Vec<Vec<u8>>, Vec<PyTensor>)> {
    let spec = ShapesWorldSpec::new(classes, height, width, seed).map_err(py_err)?;
    let pairs = data::generate_world(&spec, count).map_err(py_err)?;
    Ok(pairs
        .into_iter()
        .map(|(m, img)| (m.ids().to_vec(), PyTensor::from(img)))
        .unzip())
}

/// `1×C×H×W` one-hot layout of a flat id grid.
#[pyfunction]
fn one_hot(ids: Vec<u8>, height: usize, width: usize, classes: usize) -> PyResult<PyTensor> {
    let lm = LabelMap::new(height, width, ids).map_err(py_err)?;
    Ok(data::one_hot(&lm, classes).map_err(py_err)?.mask().clone().into())
}

#[pyfunction]
fn class_weights(masks: Vec<Vec<u8>>, classes: usize, pixels: usize) -> PyResult<Vec<f64>> {
    Ok(ClassWeights::from_id_grids(masks.iter().map(Vec::as_slice), classes, pixels)
        .map_err(py_err)?
        .alpha)
}

/// Class-balanced segmentation loss of `N×C×H×W` logits against one-hot masks.
#[pyfunction]
fn seg_loss(logits: &PyTensor, mask: &PyTensor, alpha: Vec<f64>) -> PyResult<f32> {
    let weights = ClassWeights {
        pixel_counts: vec![0.0; alpha.len()],
        total_pixels: 0,
        absent: Vec::new(),
        alpha,
    };
    let mut tape = Tape::new();
    let l = tape.constant(logits.inner.clone());
    let m = tape.constant(mask.inner.clone());
    let loss = wavegen_core::losses::seg_loss(&mut tape, l, m, &weights).map_err(py_err)?;
    Ok(tape.value(loss).data()[0])
}

#[pyfunction]
fn miou(pred: Vec<u8>, gt: Vec<u8>, height: usize, width: usize, classes: usize) -> PyResult<f64> {
    let p = LabelMap::new(height, width, pred).map_err(py_err)?;
    let g = LabelMap::new(height, width, gt).map_err(py_err)?;
    Ok(eval::miou(&p, &g, classes).map_err(py_err)?.0)
}

#[pyfunction]
fn spectrum_distance(a: Vec<PyTensor>, b: Vec<PyTensor>) -> PyResult<f64> {
    let a: Vec<_> = a.into_iter().map(|t| t.inner).collect();
    let b: Vec<_> = b.into_iter().map(|t| t.inner).collect();
    eval::spectrum_distance(&a, &b).map_err(py_err)
}

/// A trained (or freshly initialized) set of networks.
#[pyclass(name = "Model", module = "wavegen")]
pub struct PyModel {
    bundle: ModelBundle,
    config: TrainConfig,
}

#[pymethods]
impl PyModel {
    /// Fresh networks for a `classes`-class `height×width` world (desk widths).
    #[staticmethod]
    #[pyo3(signature = (classes, height, width, seed = 0))]
    fn desk(classes: usize, height: usize, width: usize, seed: u64) -> PyResult<Self> {
        let mut config = TrainConfig::desk(classes, height, width);
        config.seed = seed;
        let bundle = ModelBundle::new(&config).map_err(py_err)?;
        Ok(Self { bundle, config })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let config = train::read_checkpoint(path).map_err(py_err)?.config;
        let bundle = train::load_checkpoint(path, &config).map_err(py_err)?;
        Ok(Self { bundle, config })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        train::save_checkpoint(path, &self.bundle, &self.config).map_err(py_err)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.bundle.step
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.config.generator.num_classes
    }

    /// One image per flat id grid; latents are keyed by `seed`.
    #[pyo3(signature = (masks, seed = 0))]
    fn generate(&self, masks: Vec<Vec<u8>>, seed: u64) -> PyResult<PyTensor> {
        let g = &self.config.generator;
        let maps = masks
            .into_iter()
            .map(|ids| LabelMap::new(g.height, g.width, ids))
            .collect::<Result<Vec<_>, _>>()
            .map_err(py_err)?;
        let layout = data::one_hot_batch(&maps.iter().collect::<Vec<_>>(), g.num_classes).map_err(py_err)?;
        let latent = sample_latent(maps.len(), g.z_dim, &mut rng_for(seed, &[0]));
        Ok(self.bundle.generate(&layout, &latent, self.config.batch).map_err(py_err)?.into())
    }
}

/// Trains on a generated dataset directory; returns the loss history as
/// `(step, loss_seg, loss_G_adv, loss_D, r1)` tuples.
#[pyfunction]
#[pyo3(signature = (data_dir, out_dir, steps, preset = "desk", overrides = None))]
fn fit(
    data_dir: &str,
    out_dir: &str,
    steps: u64,
    preset: &str,
    overrides: Option<std::collections::BTreeMap<String, String>>,
) -> PyResult<(PyModel, Vec<(u64, f32, f32, f32, f32)>)> {
    let dataset = data::load_dataset(data_dir).map_err(py_err)?;
    let s = &dataset.spec;
    let mut config = match preset {
        "desk" => TrainConfig::desk(s.num_classes, s.height, s.width),
        "full" => TrainConfig::for_world(s.num_classes, s.height, s.width),
        other => return Err(PyValueError::new_err(format!("unknown preset `{other}`"))),
    };
    if let Some(map) = overrides {
        config.apply(&map).map_err(py_err)?;
    }
    config.steps = steps;
    let (bundle, history) = train::fit(&config, &dataset, Some(std::path::Path::new(out_dir)), None).map_err(py_err)?;
    let rows = history
        .iter()
        .map(|r| (r.step, r.loss_seg, r.loss_g_adv, r.loss_d, r.r1))
        .collect();
    Ok((PyModel { bundle, config }, rows))
}

#[pyfunction]
#[pyo3(signature = (out_dir, classes = 4, height = 64, width = 64, count = 512, test_count = 64, seed = 0))]
fn write_dataset(out_dir: &str, classes: usize, height: usize, width: usize, count: usize, test_count: usize, seed: u64) -> PyResult<()> {
    let spec = ShapesWorldSpec::new(classes, height, width, seed).map_err(py_err)?;
    data::write_dataset(out_dir, &spec, count, test_count).map_err(py_err)?;
    Ok(())
}

#[pymodule(name = "wavegen")]
fn wavegen_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(dwt, m)?)?;
    m.add_function(wrap_pyfunction!(iwt, m)?)?;
    m.add_function(wrap_pyfunction!(rearrange, m)?)?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(bilinear_resize, m)?)?;
    m.add_function(wrap_pyfunction!(nearest_resize, m)?)?;
    m.add_function(wrap_pyfunction!(log_softmax, m)?)?;
    m.add_function(wrap_pyfunction!(generate_world, m)?)?;
    m.add_function(wrap_pyfunction!(write_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(one_hot, m)?)?;
    m.add_function(wrap_pyfunction!(class_weights, m)?)?;
    m.add_function(wrap_pyfunction!(seg_loss, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(spectrum_distance, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    Ok(())
}
