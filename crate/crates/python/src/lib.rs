//! Python bindings: noise schedules, the closed-form forward process,
//! image metrics, the toy dataset, and trained-model sampling, all over
//! numpy arrays shaped `(channels, height, width)`.

use numpy::{IntoPyArray, PyArray3, PyReadonlyArray3};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use diffsr_core::analysis;
use diffsr_core::checkpoint;
use diffsr_core::config::RunConfig;
use diffsr_core::data;
use diffsr_core::forward;
use diffsr_core::nn::Denoiser;
use diffsr_core::sampler::{self, SampleRequest};
use diffsr_core::schedule::NoiseSchedule;
use diffsr_core::training;
use diffsr_core::ImageTensor;

fn py_err(e: diffsr_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn tensor_from(array: PyReadonlyArray3<'_, f64>) -> ImageTensor {
    ImageTensor::new(array.as_array().to_owned())
}

fn tensor_into(py: Python<'_>, tensor: ImageTensor) -> Py<PyArray3<f64>> {
    tensor.data.into_pyarray(py).unbind()
}

/// A linear variance schedule and the quantities derived from it.
#[pyclass(name = "Schedule", module = "diffsr")]
#[derive(Clone)]
struct PySchedule {
    inner: NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    /// linear(beta_start, beta_end, steps)
    #[staticmethod]
    fn linear(beta_start: f64, beta_end: f64, steps: usize) -> PyResult<Self> {
        Ok(Self {
            inner: NoiseSchedule::linear(beta_start, beta_end, steps).map_err(py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn beta(&self, t: usize) -> PyResult<f64> {
        self.inner.beta(t).map_err(py_err)
    }

    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        self.inner.alpha_bar(t).map_err(py_err)
    }

    fn sqrt_alpha_bar(&self, t: usize) -> PyResult<f64> {
        self.inner.sqrt_alpha_bar(t).map_err(py_err)
    }

    fn posterior_var(&self, t: usize) -> PyResult<f64> {
        self.inner.posterior_var(t).map_err(py_err)
    }

    /// First step whose noise scale falls to or below `threshold`.
    fn cutoff_step_for_threshold(&self, threshold: f64) -> usize {
        self.inner.cutoff_step_for_threshold(threshold)
    }

    fn __repr__(&self) -> String {
        format!("Schedule(steps={})", self.inner.len())
    }
}

/// One image pair of the procedurally generated toy dataset.
#[pyclass(name = "Pair", module = "diffsr")]
struct PyPair {
    #[pyo3(get)]
    lr: Py<PyArray3<f64>>,
    #[pyo3(get)]
    lr_up: Py<PyArray3<f64>>,
    #[pyo3(get)]
    hr: Py<PyArray3<f64>>,
    #[pyo3(get)]
    factor: usize,
}

/// A trained denoiser plus the run settings stored next to it.
#[pyclass(name = "Model", module = "diffsr")]
struct PyModel {
    net: Denoiser,
    config: RunConfig,
}

#[pymethods]
impl PyModel {
    /// Load a model (or training) checkpoint from disk.
    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        let (net, config) = checkpoint::load_model(&path).map_err(py_err)?;
        Ok(Self { net, config })
    }

    /// The canonical text of the run config embedded in the checkpoint.
    #[getter]
    fn config_text(&self) -> String {
        self.config.canonical_text()
    }

    #[getter]
    fn upsample_factor(&self) -> usize {
        self.config.upsample_factor
    }

    /// One denoiser evaluation: predict the noise component of a latent,
    /// conditioned on the upsampled LR image and the noise scale.
    fn predict_noise(
        &self,
        py: Python<'_>,
        x_t: PyReadonlyArray3<'_, f64>,
        lr_up: PyReadonlyArray3<'_, f64>,
        noise_scale: f64,
    ) -> PyResult<Py<PyArray3<f64>>> {
        let eps = self
            .net
            .predict_noise(&tensor_from(x_t), &tensor_from(lr_up), noise_scale)
            .map_err(py_err)?;
        Ok(tensor_into(py, eps))
    }

    /// Super-resolve a low-resolution image. `cutoff=None` runs the whole
    /// reverse chain from pure noise; `cutoff=K` starts it at step K from
    /// the diffused input instead.
    #[pyo3(signature = (lr, cutoff=None, seed=0))]
    fn sample(
        &self,
        py: Python<'_>,
        lr: PyReadonlyArray3<'_, f64>,
        cutoff: Option<usize>,
        seed: u64,
    ) -> PyResult<Py<PyArray3<f64>>> {
        let request = SampleRequest {
            lr_image: tensor_from(lr),
            schedule: self.config.infer_schedule.build().map_err(py_err)?,
            cutoff,
            upsample_factor: self.config.upsample_factor,
            seed,
            record_trajectory: false,
        };
        let result = sampler::sample(&self.net, &request).map_err(py_err)?;
        Ok(tensor_into(py, result.image))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(params={}, upsample_factor={})",
            self.net.params().len(),
            self.config.upsample_factor
        )
    }
}

/// Closed-form forward diffusion: `sqrt_alpha_bar * x0 +
/// sqrt(1 - alpha_bar) * noise`.
#[pyfunction]
fn diffuse(
    py: Python<'_>,
    x0: PyReadonlyArray3<'_, f64>,
    sqrt_alpha_bar: f64,
    noise: PyReadonlyArray3<'_, f64>,
) -> PyResult<Py<PyArray3<f64>>> {
    let result =
        forward::diffuse(&tensor_from(x0), sqrt_alpha_bar, &tensor_from(noise)).map_err(py_err)?;
    Ok(tensor_into(py, result))
}

/// Peak signal-to-noise ratio in dB over [0,1] pixels.
#[pyfunction]
fn psnr(a: PyReadonlyArray3<'_, f64>, b: PyReadonlyArray3<'_, f64>) -> PyResult<f64> {
    analysis::psnr(&tensor_from(a), &tensor_from(b)).map_err(py_err)
}

/// Mean structural similarity (11x11 Gaussian window).
#[pyfunction]
fn ssim(a: PyReadonlyArray3<'_, f64>, b: PyReadonlyArray3<'_, f64>) -> PyResult<f64> {
    analysis::ssim(&tensor_from(a), &tensor_from(b)).map_err(py_err)
}

/// Downsample-consistency score of a super-resolved image against the
/// low-resolution input it came from.
#[pyfunction]
fn consistency(
    sr: PyReadonlyArray3<'_, f64>,
    lr: PyReadonlyArray3<'_, f64>,
    factor: usize,
) -> PyResult<f64> {
    analysis::consistency(&tensor_from(sr), &tensor_from(lr), factor).map_err(py_err)
}

/// Bicubic upsampling by an integer factor.
#[pyfunction]
fn upsample_bicubic(
    py: Python<'_>,
    image: PyReadonlyArray3<'_, f64>,
    factor: usize,
) -> PyResult<Py<PyArray3<f64>>> {
    let result = data::upsample_bicubic(&tensor_from(image), factor).map_err(py_err)?;
    Ok(tensor_into(py, result))
}

/// Anti-aliased bicubic downsampling by an integer factor.
#[pyfunction]
fn downsample_bicubic(
    py: Python<'_>,
    image: PyReadonlyArray3<'_, f64>,
    factor: usize,
) -> PyResult<Py<PyArray3<f64>>> {
    let result = data::downsample_bicubic(&tensor_from(image), factor).map_err(py_err)?;
    Ok(tensor_into(py, result))
}

/// Deterministic toy dataset of `n` size x size grayscale images with their
/// downsampled and re-upsampled variants.
#[pyfunction]
#[pyo3(signature = (n, size, factor=2, seed=0))]
fn toy_pairs(py: Python<'_>, n: usize, size: usize, factor: usize, seed: u64) -> PyResult<Vec<PyPair>> {
    let pairs = data::toy_dataset(n, size, factor, seed).map_err(py_err)?;
    Ok(pairs
        .into_iter()
        .map(|p| PyPair {
            lr: tensor_into(py, p.lr),
            lr_up: tensor_into(py, p.lr_up),
            hr: tensor_into(py, p.hr),
            factor: p.factor,
        })
        .collect())
}

/// Run a training job described by config text (same `key = value` format
/// the CLI reads), write the final checkpoint to `out_path`, and return the
/// per-step losses.
#[pyfunction]
fn train(config_text: &str, out_path: std::path::PathBuf) -> PyResult<Vec<f64>> {
    let config = RunConfig::parse(config_text).map_err(py_err)?;
    config.validate().map_err(py_err)?;
    let dataset = match &config.data {
        diffsr_core::config::DataSpec::Toy { n, size } => {
            data::toy_dataset(*n, *size, config.upsample_factor, config.seed).map_err(py_err)?
        }
        diffsr_core::config::DataSpec::Dir(dir) => {
            let mut rng =
                diffsr_core::rng::derive_rng(config.seed, &[diffsr_core::rng::stream::CROP]);
            data::load_pairs(
                dir,
                config.upsample_factor,
                config.crop,
                config.crop_mode,
                &mut rng,
            )
            .map_err(py_err)?
        }
    };
    let mut losses = Vec::new();
    let state = training::train(
        &config.train_config(),
        &config.denoiser_config(),
        &dataset,
        |_, loss| losses.push(loss),
    )
    .map_err(py_err)?;
    checkpoint::save_training(&out_path, &state, &config).map_err(py_err)?;
    Ok(losses)
}

#[pymodule]
fn diffsr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySchedule>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyPair>()?;
    m.add_function(wrap_pyfunction!(diffuse, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(consistency, m)?)?;
    m.add_function(wrap_pyfunction!(upsample_bicubic, m)?)?;
    m.add_function(wrap_pyfunction!(downsample_bicubic, m)?)?;
    m.add_function(wrap_pyfunction!(toy_pairs, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
