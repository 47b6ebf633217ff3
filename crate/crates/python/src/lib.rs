//! Python bindings for the `divsr` core crate.
//!
//! Images cross the boundary as `Image` objects holding a flat row-major
//! RGB list; `Image.from_rows` / `Image.to_rows` convert from and to nested
//! `[row][col][rgb]` lists (for example `numpy_array.tolist()`).

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use divsr::checkpoint::{Checkpoint, FrozenDivergence};
use divsr::data::{load_manifest, load_pairs, Split};
use divsr::evaluation;
use divsr::imaging;
use divsr::loss;
use divsr::model::{self, PredictionSet};
use divsr::training::{self, MemoryObserver, TrainConfig};
use divsr::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Png { .. } | Error::Checkpoint { .. } => PyIOError::new_err(e.to_string()),
        Error::NonFinite { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// RGB raster with values in [0, 1].
#[pyclass(name = "Image", module = "pydivsr", from_py_object)]
#[derive(Clone)]
struct PyImage {
    inner: imaging::Image,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(height: usize, width: usize, data: Vec<f64>) -> PyResult<Self> {
        imaging::Image::new(height, width, data)
            .map(|inner| PyImage { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    fn from_rows(rows: Vec<Vec<[f64; 3]>>) -> PyResult<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != w) {
            return Err(PyValueError::new_err("rows have different lengths"));
        }
        let data = rows.into_iter().flatten().flatten().collect();
        Self::new(h, w, data)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        imaging::load_png(path).map(|inner| PyImage { inner }).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        imaging::save_png(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn to_rows(&self) -> Vec<Vec<[f64; 3]>> {
        (0..self.inner.height())
            .map(|r| (0..self.inner.width()).map(|c| self.inner.pixel(r, c)).collect())
            .collect()
    }

    fn luma(&self) -> Vec<f64> {
        imaging::extract_y(&self.inner).data().to_vec()
    }

    fn resize(&self, height: usize, width: usize) -> PyResult<Self> {
        imaging::bicubic_resize(&self.inner, height, width)
            .map(|inner| PyImage { inner })
            .map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.height(), self.inner.width())
    }
}

#[pyclass(name = "ModelConfig", module = "pydivsr", from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: model::ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (tree_depth=2, branching=2, residual_groups=2, blocks_per_group=4, channels=64, scale=4, reduction=16, deep_residual=true))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        tree_depth: usize,
        branching: usize,
        residual_groups: usize,
        blocks_per_group: usize,
        channels: usize,
        scale: usize,
        reduction: usize,
        deep_residual: bool,
    ) -> PyResult<Self> {
        let inner = model::ModelConfig {
            tree_depth,
            branching,
            residual_groups,
            blocks_per_group,
            channels,
            scale,
            reduction,
            deep_residual,
        };
        inner.validate().map_err(to_py)?;
        Ok(PyModelConfig { inner })
    }

    #[getter]
    fn leaves(&self) -> usize {
        self.inner.leaves()
    }

    #[getter]
    fn scale(&self) -> usize {
        self.inner.scale
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn __repr__(&self) -> String {
        format!("ModelConfig({})", self.inner.canonical())
    }
}

#[pyclass(name = "LossConfig", module = "pydivsr", from_py_object)]
#[derive(Clone)]
struct PyLossConfig {
    inner: loss::LossConfig,
}

#[pymethods]
impl PyLossConfig {
    #[new]
    #[pyo3(signature = (alpha=0.1, margin=0.1, theta=0.5, use_abs=true, sigma_epsilon=1e-8))]
    fn new(alpha: f64, margin: f64, theta: f64, use_abs: bool, sigma_epsilon: f64) -> PyResult<Self> {
        let inner = loss::LossConfig {
            alpha,
            margin,
            theta,
            use_abs,
            sigma_epsilon,
            ..loss::LossConfig::default()
        };
        inner.validate().map_err(to_py)?;
        Ok(PyLossConfig { inner })
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    #[getter]
    fn use_abs(&self) -> bool {
        self.inner.use_abs
    }
}

/// Tree network producing one prediction per leaf.
#[pyclass(name = "DivergenceModel", module = "pydivsr", from_py_object)]
#[derive(Clone)]
struct PyDivergenceModel {
    inner: model::DivergenceModel,
}

#[pymethods]
impl PyDivergenceModel {
    #[new]
    #[pyo3(signature = (config, seed=0))]
    fn new(config: &PyModelConfig, seed: u64) -> PyResult<Self> {
        model::DivergenceModel::new(config.inner, seed)
            .map(|inner| PyDivergenceModel { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(path).map_err(to_py)?;
        ck.divergence_model().map(|inner| PyDivergenceModel { inner }).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::divergence(&self.inner, None).save(path).map_err(to_py)
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig {
            inner: *self.inner.config(),
        }
    }

    #[getter]
    fn leaf_labels(&self) -> Vec<String> {
        self.inner.leaf_paths().iter().map(|p| model::path_label(p)).collect()
    }

    fn count_parameters(&self) -> usize {
        self.inner.count_parameters()
    }

    /// SHA-256 over parameter names, shapes and values.
    fn digest(&self) -> String {
        self.inner.params().digest()
    }

    fn forward(&self, lr: &PyImage) -> PyResult<Vec<PyImage>> {
        let set = self.inner.forward(&lr.inner).map_err(to_py)?;
        Ok(wrap_images(set.predictions()))
    }

    /// Trains in place on a dataset manifest; returns the per-step totals.
    #[pyo3(signature = (manifest, steps, loss=None, batch_size=4, lr_patch=24, initial_lr=1e-4, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        manifest: PathBuf,
        steps: u64,
        loss: Option<&PyLossConfig>,
        batch_size: usize,
        lr_patch: usize,
        initial_lr: f64,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let pairs = manifest_pairs(&manifest)?;
        let cfg = train_config(steps, loss, batch_size, lr_patch, initial_lr, seed);
        let model = self.inner.clone();
        let (trained, losses) = py
            .detach(|| {
                let mut obs = MemoryObserver::default();
                training::train_divergence(model, &pairs, &cfg, None, &mut obs)
                    .map(|(m, _)| (m, obs.records.iter().map(|r| r.loss.total()).collect()))
            })
            .map_err(to_py)?;
        self.inner = trained;
        Ok(losses)
    }
}

/// Fusion head weighting the tree's predictions per pixel.
#[pyclass(name = "ConvergenceModel", module = "pydivsr", from_py_object)]
#[derive(Clone)]
struct PyConvergenceModel {
    inner: model::ConvergenceModel,
}

#[pymethods]
impl PyConvergenceModel {
    #[new]
    #[pyo3(signature = (config, seed=1))]
    fn new(config: &PyModelConfig, seed: u64) -> PyResult<Self> {
        model::ConvergenceModel::new(config.inner, seed)
            .map(|inner| PyConvergenceModel { inner })
            .map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(path).map_err(to_py)?;
        ck.convergence_model().map(|inner| PyConvergenceModel { inner }).map_err(to_py)
    }

    /// Saves the head together with the identity of the tree it fuses.
    fn save(&self, path: PathBuf, divergence: &PyDivergenceModel) -> PyResult<()> {
        Checkpoint::convergence(&self.inner, None, FrozenDivergence::of(&divergence.inner))
            .save(path)
            .map_err(to_py)
    }

    fn count_parameters(&self) -> usize {
        self.inner.count_parameters()
    }

    /// Returns `(weight_planes, fused)`; each plane is a flat row-major list.
    fn forward(&self, predictions: Vec<PyImage>) -> PyResult<(Vec<Vec<f64>>, PyImage)> {
        let set = prediction_set(predictions, self.inner.config())?;
        let (w, sr) = self.inner.forward(&set).map_err(to_py)?;
        Ok((w.planes().to_vec(), PyImage { inner: sr }))
    }

    /// Trains in place against a frozen tree; returns the per-step losses.
    #[pyo3(signature = (divergence, manifest, steps, batch_size=4, lr_patch=24, initial_lr=1e-4, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        divergence: &PyDivergenceModel,
        manifest: PathBuf,
        steps: u64,
        batch_size: usize,
        lr_patch: usize,
        initial_lr: f64,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let pairs = manifest_pairs(&manifest)?;
        let cfg = train_config(steps, None, batch_size, lr_patch, initial_lr, seed);
        let head = self.inner.clone();
        let div = &divergence.inner;
        let (trained, losses) = py
            .detach(|| {
                let mut obs = MemoryObserver::default();
                training::train_convergence(div, head, &pairs, &cfg, None, &mut obs)
                    .map(|(m, _)| (m, obs.records.iter().map(|r| r.loss.total()).collect()))
            })
            .map_err(to_py)?;
        self.inner = trained;
        Ok(losses)
    }
}

fn wrap_images(images: &[imaging::Image]) -> Vec<PyImage> {
    images.iter().map(|i| PyImage { inner: i.clone() }).collect()
}

fn prediction_set(images: Vec<PyImage>, cfg: &model::ModelConfig) -> PyResult<PredictionSet> {
    let paths = model::leaf_paths(cfg.tree_depth, cfg.branching);
    if images.len() != paths.len() {
        return Err(PyValueError::new_err(format!(
            "expected {} predictions, got {}",
            paths.len(),
            images.len()
        )));
    }
    PredictionSet::new(images.into_iter().map(|i| i.inner).collect(), paths).map_err(to_py)
}

/// Wraps predictions as a set with lexicographic leaf paths of a full tree
/// whose shape is inferred from the count (`branching` children per node).
fn infer_set(images: Vec<PyImage>, branching: usize) -> PyResult<PredictionSet> {
    let p = images.len();
    let mut depth = 0;
    let mut n = 1;
    while n < p && branching > 1 {
        n *= branching;
        depth += 1;
    }
    if n != p || (branching == 1 && p != 1) {
        return Err(PyValueError::new_err(format!(
            "{p} predictions do not form a tree with branching {branching}"
        )));
    }
    let paths = model::leaf_paths(depth.max(1), branching);
    PredictionSet::new(images.into_iter().map(|i| i.inner).collect(), paths).map_err(to_py)
}

fn manifest_pairs(path: &PathBuf) -> PyResult<Vec<divsr::data::ImagePair>> {
    let m = load_manifest(path).map_err(to_py)?;
    let loaded = load_pairs(&m);
    if let Some((id, why)) = loaded.rejected.first() {
        return Err(PyValueError::new_err(format!("{id}: {why}")));
    }
    Ok(loaded.pairs)
}

fn train_config(
    steps: u64,
    loss: Option<&PyLossConfig>,
    batch_size: usize,
    lr_patch: usize,
    initial_lr: f64,
    seed: u64,
) -> TrainConfig {
    TrainConfig {
        batch_size,
        lr_patch,
        initial_lr,
        max_steps: Some(steps),
        seed,
        loss: loss.map_or_else(loss::LossConfig::default, |l| l.inner),
        ..TrainConfig::default()
    }
}

#[pyfunction]
#[pyo3(signature = (sr, hr, border=0))]
fn psnr_y(sr: &PyImage, hr: &PyImage, border: usize) -> PyResult<f64> {
    evaluation::psnr_y(&sr.inner, &hr.inner, border).map_err(to_py)
}

#[pyfunction]
fn ssim_y(sr: &PyImage, hr: &PyImage) -> PyResult<f64> {
    evaluation::ssim_y(&sr.inner, &hr.inner).map_err(to_py)
}

#[pyfunction]
fn checkerboard_energy(img: &PyImage) -> PyResult<f64> {
    evaluation::checkerboard_energy(&img.inner).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (predictions, branching=2))]
fn pairwise_divergence(predictions: Vec<PyImage>, branching: usize) -> PyResult<Vec<Vec<f64>>> {
    Ok(evaluation::pairwise_divergence(&infer_set(predictions, branching)?))
}

/// Returns `(total, l2, triplet)`.
#[pyfunction]
#[pyo3(signature = (predictions, hr, config=None, branching=2))]
fn divergence_loss(
    predictions: Vec<PyImage>,
    hr: &PyImage,
    config: Option<&PyLossConfig>,
    branching: usize,
) -> PyResult<(f64, f64, f64)> {
    let cfg = config.map_or_else(loss::LossConfig::default, |c| c.inner);
    let set = infer_set(predictions, branching)?;
    let l = loss::divergence_loss(&set, &hr.inner, &cfg).map_err(to_py)?;
    Ok((l.total, l.l2, l.triplet))
}

#[pyfunction]
fn convergence_loss(sr: &PyImage, hr: &PyImage) -> PyResult<f64> {
    loss::convergence_loss(&sr.inner, &hr.inner).map_err(to_py)
}

#[pyfunction]
fn common_ancestry_level(path_i: Vec<usize>, path_j: Vec<usize>) -> PyResult<usize> {
    loss::common_ancestry_level(&path_i, &path_j).map_err(to_py)
}

#[pyfunction]
fn attenuation(level: usize, theta: f64) -> PyResult<f64> {
    if level == 0 {
        return Err(PyValueError::new_err("level starts at 1"));
    }
    Ok(loss::attenuation(level, theta))
}

/// Runs both models; returns `(branch_outputs, weight_planes, fused)`.
#[pyfunction]
fn super_resolve(
    divergence: &PyDivergenceModel,
    head: &PyConvergenceModel,
    lr: &PyImage,
) -> PyResult<(Vec<PyImage>, Vec<Vec<f64>>, PyImage)> {
    let r = evaluation::super_resolve(&divergence.inner, &head.inner, &lr.inner).map_err(to_py)?;
    Ok((
        wrap_images(r.predictions.predictions()),
        r.weights.planes().to_vec(),
        PyImage { inner: r.sr },
    ))
}

/// Writes bicubic LR/HR pairs and `<out_dir>/<split>.manifest`; returns the
/// manifest path.
#[pyfunction]
#[pyo3(signature = (hr_dir, scale, out_dir, split="train"))]
fn prepare_data(hr_dir: PathBuf, scale: usize, out_dir: PathBuf, split: &str) -> PyResult<PathBuf> {
    let split = Split::parse(split).ok_or_else(|| PyValueError::new_err(format!("unknown split {split:?}")))?;
    divsr::data::generate_bicubic_pairs(&hr_dir, scale, &out_dir, split).map_err(to_py)?;
    Ok(out_dir.join(format!("{split}.manifest")))
}

/// Procedural test scene.
#[pyfunction]
fn synth_scene(height: usize, width: usize, seed: u64) -> PyImage {
    PyImage {
        inner: divsr::data::synth::scene(height, width, seed),
    }
}

#[pymodule]
fn pydivsr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyLossConfig>()?;
    m.add_class::<PyDivergenceModel>()?;
    m.add_class::<PyConvergenceModel>()?;
    m.add_function(wrap_pyfunction!(psnr_y, m)?)?;
    m.add_function(wrap_pyfunction!(ssim_y, m)?)?;
    m.add_function(wrap_pyfunction!(checkerboard_energy, m)?)?;
    m.add_function(wrap_pyfunction!(pairwise_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(divergence_loss, m)?)?;
    m.add_function(wrap_pyfunction!(convergence_loss, m)?)?;
    m.add_function(wrap_pyfunction!(common_ancestry_level, m)?)?;
    m.add_function(wrap_pyfunction!(attenuation, m)?)?;
    m.add_function(wrap_pyfunction!(super_resolve, m)?)?;
    m.add_function(wrap_pyfunction!(prepare_data, m)?)?;
    m.add_function(wrap_pyfunction!(synth_scene, m)?)?;
    Ok(())
}
