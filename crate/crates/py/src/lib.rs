//! Python bindings. The module is importable as `manysr`.

use std::path::PathBuf;

use candle_core::DType;
use manysr::generator::{Generator, GeneratorConfig};
use manysr::image::ImageTensor;
use manysr::nn::Mode;
use manysr::train::{Profile, RunConfig};
use manysr::Error;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Image(_) | Error::Data(_) => PyOSError::new_err(e.to_string()),
        Error::BackendUnavailable(_) | Error::Divergence { .. } | Error::NonFinite(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Height x width x channels image with values nominally in [0, 1].
#[pyclass(name = "Image", module = "manysr", frozen)]
pub struct PyImage {
    inner: ImageTensor,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> PyResult<Self> {
        Ok(Self {
            inner: ImageTensor::new(height, width, channels, data).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: ImageTensor::load_png(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.clamp_unit().save_png(path).map_err(py_err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.inner.dims()
    }

    /// Interleaved pixel values, row-major.
    fn to_list(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.crop(top, left, height, width).map_err(py_err)?,
        })
    }

    fn __repr__(&self) -> String {
        let (h, w, c) = self.inner.dims();
        format!("Image({h}x{w}x{c})")
    }
}

#[pyfunction]
#[pyo3(signature = (image, scale, antialias = true))]
fn bicubic_resize(image: &PyImage, scale: f64, antialias: bool) -> PyResult<PyImage> {
    Ok(PyImage {
        inner: manysr::data::bicubic_resize(&image.inner, scale, antialias).map_err(py_err)?,
    })
}

#[pyfunction]
fn laplacian_variance(image: &PyImage) -> PyResult<f64> {
    manysr::data::laplacian_variance(&image.inner).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (image, threshold = manysr::data::DEFAULT_BLUR_THRESHOLD))]
fn is_blurry(image: &PyImage, threshold: f64) -> PyResult<bool> {
    manysr::data::is_blurry(&image.inner, threshold).map_err(py_err)
}

/// Returns `(total_patches, blurry_patches, fraction)`.
#[pyfunction]
#[pyo3(signature = (directory, patch_size = 96, samples = 16_000, threshold = manysr::data::DEFAULT_BLUR_THRESHOLD, seed = 0))]
fn blur_scan(
    directory: PathBuf,
    patch_size: usize,
    samples: usize,
    threshold: f64,
    seed: u64,
) -> PyResult<(usize, usize, f64)> {
    let r = manysr::data::scan_dataset(&directory, patch_size, samples, threshold, seed)
        .map_err(py_err)?;
    Ok((r.total_patches, r.blurry_patches, r.fraction()))
}

#[pyfunction]
fn psnr(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    manysr::metrics::psnr(&a.inner, &b.inner).map_err(py_err)
}

#[pyfunction]
fn ssim(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    manysr::metrics::ssim(&a.inner, &b.inner).map_err(py_err)
}

#[pyfunction]
fn l1_loss(a: &PyImage, b: &PyImage) -> PyResult<f64> {
    manysr::losses::l1_loss(&a.inner, &b.inner).map_err(py_err)
}

/// Cycle loss of an SR candidate against its LR input.
#[pyfunction]
fn cycle_loss(sr: &PyImage, lr: &PyImage) -> PyResult<f64> {
    let (h, w, _) = sr.inner.dims();
    let scale = h / lr.inner.height().max(1);
    let f = manysr::losses::downsampler(h, w, scale).map_err(py_err)?;
    manysr::losses::cycle_loss(&sr.inner, &lr.inner, &f).map_err(py_err)
}

#[pyfunction]
fn ragan_d_loss(real: Vec<f64>, fake: Vec<f64>) -> PyResult<f64> {
    manysr::losses::ragan_d_loss(&real, &fake).map_err(py_err)
}

#[pyfunction]
fn ragan_g_loss(real: Vec<f64>, fake: Vec<f64>) -> PyResult<f64> {
    manysr::losses::ragan_g_loss(&real, &fake).map_err(py_err)
}

/// Noise-injected RRDB generator.
#[pyclass(name = "Generator", module = "manysr", unsendable)]
pub struct PyGenerator {
    inner: Generator,
}

#[pymethods]
impl PyGenerator {
    #[new]
    #[pyo3(signature = (num_rrdb = 23, trunk_channels = 64, growth_channels = 32, scale = 4, noise_enabled = true, seed = 0))]
    fn new(
        num_rrdb: usize,
        trunk_channels: usize,
        growth_channels: usize,
        scale: usize,
        noise_enabled: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = GeneratorConfig {
            num_rrdb,
            trunk_channels,
            growth_channels,
            scale,
            noise_enabled,
        };
        Ok(Self {
            inner: Generator::new(cfg, DType::F32, seed).map_err(py_err)?,
        })
    }

    /// Loads the generator stored in a checkpoint directory.
    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: manysr::train::load_generator(&checkpoint, DType::F32).map_err(py_err)?,
        })
    }

    #[getter]
    fn scale(&self) -> usize {
        self.inner.config().scale
    }

    #[getter]
    fn num_blocks(&self) -> usize {
        self.inner.config().num_rrdb
    }

    /// Deterministic output without `seed`; one noise sample per seed otherwise.
    #[pyo3(signature = (image, seed = None))]
    fn upscale(&self, image: &PyImage, seed: Option<u64>) -> PyResult<PyImage> {
        let out = match seed {
            Some(s) => self.inner.upscale(&image.inner, Mode::Train, s),
            None => self.inner.upscale(&image.inner, Mode::Eval, 0),
        };
        Ok(PyImage {
            inner: out.map_err(py_err)?,
        })
    }

    fn set_noise_scales(&self, block: usize, values: Vec<f64>) -> PyResult<()> {
        self.inner.set_noise_scales(block, &values).map_err(py_err)
    }

    /// `(block, min, q1, median, q3, max)` per RRDB block.
    fn noise_scale_stats(&self) -> PyResult<Vec<(usize, f64, f64, f64, f64, f64)>> {
        let stats = self.inner.noise_scale_stats().map_err(py_err)?;
        Ok(stats
            .iter()
            .map(|s| (s.block_index, s.min, s.q1, s.median, s.q3, s.max))
            .collect())
    }

    /// Mean pairwise L1 distance between samples drawn with `seeds`.
    fn diversity(&self, image: &PyImage, seeds: Vec<u64>) -> PyResult<f64> {
        manysr::metrics::diversity(&self.inner, &image.inner, seeds.len(), &seeds).map_err(py_err)
    }
}

/// Training run configuration.
#[pyclass(name = "RunConfig", module = "manysr", frozen)]
pub struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[staticmethod]
    #[pyo3(signature = (name, profile = "paper"))]
    fn preset(name: &str, profile: &str) -> PyResult<Self> {
        let p: Profile = profile.parse().map_err(py_err)?;
        Ok(Self {
            inner: RunConfig::preset(name, p).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::from_toml_str(text).map_err(py_err)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(py_err)
    }

    /// Applies `key=value` overrides with dotted keys.
    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.with_overrides(&overrides).map_err(py_err)?,
        })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn total_iterations(&self) -> u64 {
        self.inner.total_iterations
    }

    fn lr_at(&self, iteration: u64) -> f64 {
        manysr::train::lr_at(&self.inner.lr_g, iteration)
    }
}

#[pymodule]
#[pyo3(name = "manysr")]
fn manysr_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyGenerator>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_function(wrap_pyfunction!(bicubic_resize, m)?)?;
    m.add_function(wrap_pyfunction!(laplacian_variance, m)?)?;
    m.add_function(wrap_pyfunction!(is_blurry, m)?)?;
    m.add_function(wrap_pyfunction!(blur_scan, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(l1_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cycle_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ragan_d_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ragan_g_loss, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
