//! Python bindings for the spikepool core: tensors, LIF dynamics,
//! spectral analysis, synthetic event data, and trained models.
//!
//! Built as the `spikepool_py` extension module; see
//! `python/smoke_test.py` for an end-to-end exercise.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use spikepool_core::error::Error as CoreError;
use spikepool_core::events::{self, ClassSpec, SynthConfig};
use spikepool_core::model::{Model as CoreModel, ModelConfig};
use spikepool_core::snn::{lif_step, LifConfig, SpikeState};
use spikepool_core::spectral;
use spikepool_core::tensor::{Tape, Tensor as CoreTensor};

fn to_py_err(e: CoreError) -> PyErr {
    match e {
        CoreError::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Dense fp64 tensor handle.
#[pyclass(unsendable)]
struct Tensor {
    inner: CoreTensor,
}

#[pymethods]
impl Tensor {
    #[new]
    fn new(shape: Vec<usize>, values: Vec<f64>) -> PyResult<Self> {
        Ok(Tensor {
            inner: CoreTensor::from_vec(&shape, values).map_err(to_py_err)?,
        })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Tensor {
        Tensor {
            inner: CoreTensor::zeros(&shape),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn numel(&self) -> usize {
        self.inner.numel()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f64> {
        self.inner.to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Learnable-parameter count of a named preset
/// (spikepool-s, spikepool-b, spikepool-tiny, ssa-tiny).
#[pyfunction]
fn param_count(preset: &str) -> PyResult<usize> {
    Ok(ModelConfig::preset(preset)
        .map_err(to_py_err)?
        .count_params())
}

/// Steps a single LIF neuron over an input-current sequence.
/// Returns (spikes, post-reset membrane trace).
#[pyfunction]
#[pyo3(signature = (inputs, tau=0.5, v_th=1.0))]
fn lif_trace(inputs: Vec<f64>, tau: f64, v_th: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let cfg = LifConfig {
        tau,
        v_th,
        ..Default::default()
    };
    cfg.validate().map_err(to_py_err)?;
    let tape = Tape::inference();
    let mut state = SpikeState::zeros(&[1]);
    let mut spikes = Vec::with_capacity(inputs.len());
    let mut membranes = Vec::with_capacity(inputs.len());
    for v in inputs {
        let input = CoreTensor::from_vec(&[1], vec![v]).map_err(to_py_err)?;
        let (s, next) = lif_step(&tape, &state, &input, &cfg).map_err(to_py_err)?;
        spikes.push(s.to_vec()[0]);
        membranes.push(next.membrane.to_vec()[0]);
        state = next;
    }
    Ok((spikes, membranes))
}

/// Centered log-amplitude spectrum of an H x W map (flat row-major in/out).
#[pyfunction]
fn fft2_logamp(values: Vec<f64>, h: usize, w: usize) -> PyResult<Vec<f64>> {
    let x = CoreTensor::from_vec(&[h, w], values).map_err(to_py_err)?;
    Ok(spectral::fft2_logamp(&x).map_err(to_py_err)?.to_vec())
}

/// Diagonal RLA profile of a [C, H, W] map.
/// Returns (radii, log_amp, rla).
#[pyfunction]
#[pyo3(signature = (values, c, h, w, k_radii=16))]
fn rla_profile(
    values: Vec<f64>,
    c: usize,
    h: usize,
    w: usize,
    k_radii: usize,
) -> PyResult<(Vec<f64>, Vec<f64>, f64)> {
    let x = CoreTensor::from_vec(&[c, h, w], values).map_err(to_py_err)?;
    let p = spectral::rla_profile(&x, k_radii).map_err(to_py_err)?;
    Ok((p.radii, p.log_amp, p.rla))
}

/// Band-limited Gaussian noise perturbation of a [C, H, W] image:
/// adds the masked-spectrum noise and returns the flat result.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn perturb(
    values: Vec<f64>,
    c: usize,
    h: usize,
    w: usize,
    center: f64,
    half_width: f64,
    sigma: f64,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let x0 = CoreTensor::from_vec(&[c, h, w], values).map_err(to_py_err)?;
    let mask = spectral::FreqMask::annulus(h, w, center, half_width).map_err(to_py_err)?;
    Ok(spectral::perturb(&x0, &mask, sigma, seed)
        .map_err(to_py_err)?
        .to_vec())
}

/// Generates a synthetic event dataset (EVTS files + index) on disk.
#[pyfunction]
#[pyo3(signature = (spec, n, out_dir, noise=0.0, seed=1, time_bins=16))]
fn gen_dataset(
    spec: &str,
    n: usize,
    out_dir: &str,
    noise: f64,
    seed: u64,
    time_bins: usize,
) -> PyResult<usize> {
    let cfg = SynthConfig {
        spec: ClassSpec::parse(spec).map_err(to_py_err)?,
        noise_rate: noise,
        noise_bins: time_bins,
        ..SynthConfig::new(ClassSpec::Bars4)
    };
    let streams = events::gen_synthetic(&cfg, n, seed).map_err(to_py_err)?;
    events::write_dataset(std::path::Path::new(out_dir), &streams).map_err(to_py_err)?;
    Ok(streams.len())
}

/// Voxelizes one EVTS file into a [T, 2, H, W] tensor.
/// Returns (shape, flat values, label or None).
#[pyfunction]
#[pyo3(signature = (path, t_bins, binarize=true))]
fn voxelize_file(
    path: &str,
    t_bins: usize,
    binarize: bool,
) -> PyResult<(Vec<usize>, Vec<f64>, Option<u32>)> {
    let stream = events::read_event_file(std::path::Path::new(path)).map_err(to_py_err)?;
    let grid = events::voxelize(&stream, t_bins, binarize).map_err(to_py_err)?;
    Ok((
        grid.tensor.shape().to_vec(),
        grid.tensor.to_vec(),
        stream.label,
    ))
}

/// A SpikePool / SSA classifier.
#[pyclass(unsendable)]
struct Model {
    inner: CoreModel,
}

#[pymethods]
impl Model {
    /// Fresh model from a preset name, deterministically initialized.
    #[new]
    #[pyo3(signature = (preset, seed=1))]
    fn new(preset: &str, seed: u64) -> PyResult<Self> {
        let config = ModelConfig::preset(preset).map_err(to_py_err)?;
        Ok(Model {
            inner: CoreModel::new(config, seed).map_err(to_py_err)?,
        })
    }

    /// Loads a checkpoint written by the trainer.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Model> {
        let (inner, _) = CoreModel::load(std::path::Path::new(path)).map_err(to_py_err)?;
        Ok(Model { inner })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.config.name.clone()
    }

    #[getter]
    fn timesteps(&self) -> usize {
        self.inner.config.timesteps
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.config.num_classes
    }

    fn count_params(&self) -> usize {
        self.inner.num_params()
    }

    /// Logits for one voxel grid of shape [T, 2, H, W] (flat values).
    fn forward_single(&self, values: Vec<f64>) -> PyResult<Vec<f64>> {
        let c = &self.inner.config;
        let shape = [c.timesteps, 1, c.in_channels, c.height, c.width];
        let x = CoreTensor::from_vec(&shape, values).map_err(|_| {
            PyValueError::new_err(format!(
                "expected a flat [T={}, {}, {}, {}] grid",
                c.timesteps, c.in_channels, c.height, c.width
            ))
        })?;
        let tape = Tape::inference();
        let logits = self.inner.forward(&tape, &x, false).map_err(to_py_err)?;
        Ok(logits.to_vec())
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(name={}, depth={}, dim={}, timesteps={}, attention={})",
            self.inner.config.name,
            self.inner.config.depth,
            self.inner.config.dim,
            self.inner.config.timesteps,
            self.inner.config.attention.kind.as_str()
        )
    }
}

#[pymodule]
fn spikepool_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tensor>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(lif_trace, m)?)?;
    m.add_function(wrap_pyfunction!(fft2_logamp, m)?)?;
    m.add_function(wrap_pyfunction!(rla_profile, m)?)?;
    m.add_function(wrap_pyfunction!(perturb, m)?)?;
    m.add_function(wrap_pyfunction!(gen_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(voxelize_file, m)?)?;
    Ok(())
}
