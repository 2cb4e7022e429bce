//! Python bindings: the energy model, training, Lipschitz certification,
//! masks, the MRI operator, and the MAP solver.
//!
//! Images cross the boundary as (flat f64 list, shape) pairs.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use epnp_core::checkpoint::{self, LipschitzMeta, TrainingMeta};
use epnp_core::dsm::{train, Dataset, OptimizerKind, TrainConfig};
use epnp_core::energy::{EnergyModel, EnergyNetConfig};
use epnp_core::io::Dtype;
use epnp_core::linop::{
    simulate, synthetic_coil_maps, variable_density_mask, LinearOperator, MriOp, SamplingMask,
};
use epnp_core::lipschitz::{estimate_l, probe_set, step_size, LipschitzConfig};
use epnp_core::phantom::{piecewise_phantom, psnr};
use epnp_core::rng::Rng;
use epnp_core::solver::{epnp_gd, Gamma, Init, SolveConfig, SolveStatus};
use epnp_core::verify::{run_verification, VerifyLevel};
use epnp_core::Tensor;

fn err(e: epnp_core::Error) -> PyErr {
    match e {
        epnp_core::Error::DescentViolation { .. }
        | epnp_core::Error::NonFinite(_)
        | epnp_core::Error::Divergence(_) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn tensor_from(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Tensor> {
    Tensor::new(shape, data).map_err(err)
}

/// A trained (or fresh) energy prior with its gradient network.
#[pyclass]
struct Model {
    inner: EnergyModel,
    lipschitz_l: Option<f64>,
}

#[pymethods]
impl Model {
    /// Build from an architecture config JSON (same schema as checkpoints).
    #[new]
    fn new(config_json: &str, sigma: f64, seed: u64) -> PyResult<Self> {
        let config: EnergyNetConfig =
            serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        let inner =
            EnergyModel::new(config, sigma, &mut Rng::from_seed(seed)).map_err(err)?;
        Ok(Self { inner, lipschitz_l: None })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ckpt = checkpoint::load(path.as_ref()).map_err(err)?;
        Ok(Self {
            inner: ckpt.model,
            lipschitz_l: ckpt.header.lipschitz.map(|m| m.lipschitz_l),
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let lipschitz = self.lipschitz_l.map(|l| LipschitzMeta {
            lipschitz_l: l,
            method: "jacobian-power".into(),
            num_probes: 0,
            safety_factor: 1.1,
        });
        checkpoint::save_model(
            path.as_ref(),
            &self.inner,
            Some(TrainingMeta::default()),
            lipschitz,
            Dtype::F64,
        )
        .map_err(err)
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma
    }

    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        self.inner.config.input_shape().to_vec()
    }

    #[getter]
    fn lipschitz_l(&self) -> Option<f64> {
        self.lipschitz_l
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.config)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    fn energy(&self, x: Vec<f64>, shape: Vec<usize>) -> PyResult<f64> {
        self.inner.energy(&tensor_from(x, shape)?).map_err(err)
    }

    fn score(&self, x: Vec<f64>, shape: Vec<usize>) -> PyResult<Vec<f64>> {
        Ok(self
            .inner
            .score(&tensor_from(x, shape)?)
            .map_err(err)?
            .data()
            .to_vec())
    }

    fn denoise(&self, x: Vec<f64>, shape: Vec<usize>) -> PyResult<Vec<f64>> {
        Ok(self
            .inner
            .denoise(&tensor_from(x, shape)?)
            .map_err(err)?
            .data()
            .to_vec())
    }

    /// max |J_ij - J_ji| / max |J_ij| by central finite differences.
    fn jacobian_symmetry(
        &self,
        x: Vec<f64>,
        shape: Vec<usize>,
        eps: f64,
        max_coords: usize,
    ) -> PyResult<f64> {
        self.inner
            .jacobian_symmetry(&tensor_from(x, shape)?, eps, max_coords)
            .map_err(err)
    }

    /// DSM training in place; returns per-epoch mean losses.
    #[pyo3(signature = (images, shape, epochs, learning_rate=1e-3, batch_size=8, seed=0))]
    fn train(
        &mut self,
        images: Vec<Vec<f64>>,
        shape: Vec<usize>,
        epochs: usize,
        learning_rate: f64,
        batch_size: usize,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let items = images
            .into_iter()
            .map(|d| tensor_from(d, shape.clone()))
            .collect::<PyResult<Vec<_>>>()?;
        let dataset = Dataset::new(items).map_err(err)?;
        let cfg = TrainConfig {
            sigma: self.inner.sigma,
            learning_rate,
            optimizer: OptimizerKind::Adam,
            batch_size,
            epochs,
            seed,
        };
        let history = train(&mut self.inner, &dataset, &cfg).map_err(err)?;
        Ok(history.into_iter().map(|r| r.mean_loss).collect())
    }

    /// Certify L (safety factor 1.1 included) and remember it for solves.
    #[pyo3(signature = (probes=8, iters=15, seed=0))]
    fn estimate_lipschitz(&mut self, probes: usize, iters: usize, seed: u64) -> PyResult<f64> {
        let shape = self.inner.config.input_shape();
        let mut rng = Rng::from_seed(seed);
        let sample =
            probe_set(&[], &shape, self.inner.sigma, probes, &mut rng).map_err(err)?;
        let cfg = LipschitzConfig { iters: iters.max(10), seed, ..Default::default() };
        let est = estimate_l(&self.inner, &sample, &cfg).map_err(err)?;
        self.lipschitz_l = Some(est.l);
        Ok(est.l)
    }

    /// Verification battery; returns the JSON report. Raises on failure
    /// only if `strict`.
    #[pyo3(signature = (level="quick", seed=0, strict=false))]
    fn verify(&self, level: &str, seed: u64, strict: bool) -> PyResult<String> {
        let level = match level {
            "quick" => VerifyLevel::Quick,
            "full" => VerifyLevel::Full,
            other => return Err(PyValueError::new_err(format!("bad level {other:?}"))),
        };
        let report = run_verification(&self.inner, level, seed).map_err(err)?;
        if strict && !report.passed {
            return Err(PyRuntimeError::new_err(report.summary()));
        }
        report.to_json().map_err(err)
    }
}

/// Variable-density Cartesian line mask; returns per-line booleans.
#[pyfunction]
fn make_mask(size: usize, accel: f64, seed: u64) -> PyResult<Vec<bool>> {
    Ok(variable_density_mask(size, accel, seed).map_err(err)?.lines)
}

/// Piecewise-smooth ground-truth phantom in [0,1].
#[pyfunction]
fn make_phantom(shape: Vec<usize>, ncomponents: usize, seed: u64) -> PyResult<Vec<f64>> {
    Ok(piecewise_phantom(&shape, ncomponents, seed)
        .map_err(err)?
        .image
        .into_data())
}

#[pyfunction]
fn psnr_db(x: Vec<f64>, reference: Vec<f64>, shape: Vec<usize>, peak: f64) -> PyResult<f64> {
    psnr(&tensor_from(x, shape.clone())?, &tensor_from(reference, shape)?, peak).map_err(err)
}

/// gamma = 1 / (1/eta^2 + L/sigma^2), the guaranteed monotone step.
#[pyfunction]
fn guaranteed_step_size(l: f64, eta: f64, sigma: f64) -> PyResult<f64> {
    step_size(l, eta, sigma).map_err(err)
}

fn mri_op(mask_lines: Vec<bool>, h: usize, w: usize, coils: usize) -> PyResult<MriOp> {
    if mask_lines.len() != h {
        return Err(PyValueError::new_err(format!(
            "mask has {} lines for height {h}",
            mask_lines.len()
        )));
    }
    let mask = SamplingMask { lines: mask_lines, accel: 0.0, seed: 0 };
    let csm = synthetic_coil_maps(h, w, coils).map_err(err)?;
    MriOp::new(&mask, csm).map_err(err)
}

/// b = A x + noise for the synthetic-coil MRI operator; returns the flat
/// measurement tensor of shape [coils, 2, H, W].
#[pyfunction]
fn simulate_mri(
    x: Vec<f64>,
    shape: Vec<usize>,
    mask_lines: Vec<bool>,
    coils: usize,
    eta: f64,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let xt = tensor_from(x, shape)?;
    let [c, h, w] = match xt.shape() {
        [a, b, c] => [*a, *b, *c],
        other => return Err(PyValueError::new_err(format!("need [2,H,W], got {other:?}"))),
    };
    if c != 2 {
        return Err(PyValueError::new_err("image must be 2-channel (re, im)"));
    }
    let op = mri_op(mask_lines, h, w, coils)?;
    let mut rng = Rng::from_seed(seed);
    Ok(simulate(&op, &xt, eta, &mut rng).map_err(err)?.into_data())
}

/// MAP reconstruction by monotone gradient descent. Returns
/// (image, status, iterations). `gamma=None` derives the guaranteed step
/// from the model's certified Lipschitz constant.
#[pyfunction]
#[pyo3(signature = (model, b, mask_lines, coils, eta, gamma=None, tol=1e-8, max_iters=10000))]
#[allow(clippy::too_many_arguments)]
fn reconstruct_mri(
    model: &Model,
    b: Vec<f64>,
    mask_lines: Vec<bool>,
    coils: usize,
    eta: f64,
    gamma: Option<f64>,
    tol: f64,
    max_iters: usize,
) -> PyResult<(Vec<f64>, String, usize)> {
    let [c, h, w] = model.inner.config.input_shape();
    if c != 2 {
        return Err(PyValueError::new_err("mri reconstruction needs a 2-channel model"));
    }
    let op = mri_op(mask_lines, h, w, coils)?;
    let bt = tensor_from(b, op.range_shape().to_vec())?;
    let gamma = match gamma {
        Some(g) => Gamma::Fixed(g),
        None => {
            let l = model.lipschitz_l.ok_or_else(|| {
                PyValueError::new_err("no certified Lipschitz constant; call estimate_lipschitz")
            })?;
            Gamma::Auto { l }
        }
    };
    let cfg = SolveConfig {
        eta,
        sigma: model.inner.sigma,
        gamma,
        max_iters,
        rel_tol: tol,
        init: Init::Adjoint,
    };
    let (x, trace) = epnp_gd(&model.inner, &op, &bt, &cfg, None).map_err(err)?;
    let status = match trace.status {
        SolveStatus::Converged => "converged",
        SolveStatus::MaxIters => "max_iters",
        SolveStatus::DescentViolation => "descent_violation",
    };
    Ok((x.into_data(), status.into(), trace.iterations()))
}

#[pymodule]
fn epnp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(make_mask, m)?)?;
    m.add_function(wrap_pyfunction!(make_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(psnr_db, m)?)?;
    m.add_function(wrap_pyfunction!(guaranteed_step_size, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_mri, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct_mri, m)?)?;
    Ok(())
}
