//! Python bindings: models, the EWA mixing step, conversion, schedules,
//! training and the theory checks.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;

use ewa_core::train::{self, Checkpoint, TrainConfig};
use ewa_core::{FFNParams, Granularity, MoeMode, Placement, Rng, ShareSchedule, Tensor};

create_exception!(ewa, EwaError, PyException);

fn err(e: ewa_core::Error) -> PyErr {
    EwaError::new_err(e.to_string())
}

fn placement(name: &str) -> PyResult<Placement> {
    name.parse::<Placement>().map_err(err)
}

fn mode(name: &str) -> PyResult<MoeMode> {
    match name {
        "rup" => Ok(MoeMode::Rup),
        "topk" => Ok(MoeMode::top1()),
        other => Err(EwaError::new_err(format!("unknown mode {other:?} (expected rup or topk)"))),
    }
}

/// Architecture of a ViT.
#[pyclass(name = "ViTConfig", from_py_object)]
#[derive(Clone)]
struct PyViTConfig {
    inner: ewa_core::ViTConfig,
}

#[pymethods]
impl PyViTConfig {
    #[new]
    #[pyo3(signature = (image_size=32, patch_size=4, channels=3, d_model=64, n_heads=4, depth=4, mlp_ratio=4, n_classes=10, dropout=0.0, stochastic_depth=0.0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        image_size: usize,
        patch_size: usize,
        channels: usize,
        d_model: usize,
        n_heads: usize,
        depth: usize,
        mlp_ratio: usize,
        n_classes: usize,
        dropout: f64,
        stochastic_depth: f64,
    ) -> PyResult<Self> {
        let inner = ewa_core::ViTConfig {
            image_size,
            patch_size,
            channels,
            d_model,
            n_heads,
            depth,
            mlp_ratio,
            n_classes,
            dropout,
            stochastic_depth,
        };
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    /// Named preset: `desk`, `vit_small_cifar` or `vit_small_imagenet`.
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        let inner = match name {
            "desk" => ewa_core::ViTConfig::desk(),
            "vit_small_cifar" => ewa_core::ViTConfig::vit_small_cifar(),
            "vit_small_imagenet" => ewa_core::ViTConfig::vit_small_imagenet(),
            other => return Err(EwaError::new_err(format!("unknown preset {other:?}"))),
        };
        Ok(Self { inner })
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.image_size
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes
    }

    fn dense_param_count(&self) -> usize {
        self.inner.dense_param_count()
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// A ViT, dense or with MoE layers.
#[pyclass(name = "Model")]
struct PyModel {
    inner: ewa_core::Model,
}

#[pymethods]
impl PyModel {
    /// Randomly initialized plain ViT.
    #[staticmethod]
    #[pyo3(signature = (config, seed=0))]
    fn dense(config: &PyViTConfig, seed: u64) -> PyResult<Self> {
        let mut rng = Rng::seed_from_u64(seed);
        let inner = ewa_core::Model::new_dense(&config.inner, &mut rng).map_err(err)?;
        Ok(Self { inner })
    }

    /// Randomly initialized ViT with MoE layers at `placement`
    /// (`every-2`, `last-4` or `none`); `mode` is `rup` or `topk`.
    #[staticmethod]
    #[pyo3(signature = (config, placement="every-2", n_experts=4, mode="rup", seed=0))]
    fn moe(config: &PyViTConfig, placement: &str, n_experts: usize, mode: &str, seed: u64) -> PyResult<Self> {
        let mut rng = Rng::seed_from_u64(seed);
        let inner = ewa_core::build_ewa_model(&config.inner, self::placement(placement)?, n_experts, &self::mode(mode)?, &mut rng)
            .map_err(err)?;
        Ok(Self { inner })
    }

    /// Replaces every FFN at `placement` by `n_experts` copies of itself.
    #[pyo3(signature = (placement="every-2", n_experts=4, mode="rup", seed=0))]
    fn expand(&self, placement: &str, n_experts: usize, mode: &str, seed: u64) -> PyResult<Self> {
        let mut rng = Rng::seed_from_u64(seed);
        let inner = ewa_core::expand_model(&self.inner, self::placement(placement)?, n_experts, &self::mode(mode)?, &mut rng)
            .map_err(err)?;
        Ok(Self { inner })
    }

    /// Dense model with every MoE layer replaced by its expert average.
    fn convert(&self) -> PyResult<Self> {
        Ok(Self {
            inner: ewa_core::convert_model(&self.inner).map_err(err)?,
        })
    }

    /// Applies one EWA step to every MoE layer; returns the layer count.
    fn ewa(&mut self, beta: f64) -> PyResult<usize> {
        ewa_core::ewa::ewa_model(&mut self.inner, beta).map_err(err)
    }

    /// Eval-mode logits for flat `images` of shape `[B, C, H, W]`;
    /// returns `(values, [B, n_classes])`.
    fn logits(&self, images: Vec<f64>, shape: Vec<usize>) -> PyResult<(Vec<f64>, Vec<usize>)> {
        let x = Tensor::new(shape, images).map_err(err)?;
        let y = self.inner.logits(&x, ewa_core::Mode::Eval, None).map_err(err)?;
        let shape = y.shape().to_vec();
        Ok((y.into_data(), shape))
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn moe_blocks(&self) -> Vec<usize> {
        self.inner.moe_blocks()
    }

    #[getter]
    fn config(&self) -> PyViTConfig {
        PyViTConfig {
            inner: self.inner.config.clone(),
        }
    }

    /// `(name, shape)` of every parameter.
    fn inventory(&self) -> Vec<(String, Vec<usize>)> {
        self.inner.inventory()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_model(&self.inner).save(&path).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = Checkpoint::load(&path).and_then(|c| c.to_model()).map_err(err)?;
        Ok(Self { inner })
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(depth={}, moe_blocks={:?}, params={})",
            self.inner.config.depth,
            self.inner.moe_blocks(),
            self.inner.param_count()
        )
    }
}

/// One EWA step over equal-length flat expert weight vectors.
#[pyfunction]
fn ewa_step(experts: Vec<Vec<f64>>, beta: f64) -> PyResult<Vec<Vec<f64>>> {
    // each vector rides in w1 of a 1-row FFN; the other arrays stay zero
    let wrapped: Vec<FFNParams> = experts
        .into_iter()
        .map(|v| {
            let len = v.len();
            FFNParams::new(
                Tensor::new(vec![1, len], v)?,
                Tensor::zeros(vec![len]),
                Tensor::zeros(vec![len, 1]),
                Tensor::zeros(vec![1]),
            )
        })
        .collect::<ewa_core::Result<_>>()
        .map_err(err)?;
    let mixed = ewa_core::ewa_step(&wrapped, beta).map_err(err)?;
    Ok(mixed.into_iter().map(|e| e.w1.into_data()).collect())
}

/// Exact per-step shrink factor of expert deviations: `1 - βN/(N-1)`.
#[pyfunction]
fn contraction_factor(beta: f64, n_experts: usize) -> f64 {
    ewa_core::ewa::contraction_factor(beta, n_experts)
}

/// Expert index of each token under one random uniform partition.
#[pyfunction]
#[pyo3(signature = (tokens, experts, seed=0))]
fn rup_partition(tokens: usize, experts: usize, seed: u64) -> PyResult<Vec<usize>> {
    let mut rng = Rng::seed_from_u64(seed);
    Ok(ewa_core::rup_partition(tokens, experts, &mut rng)
        .map_err(err)?
        .expert_of_token)
}

/// Share rate at `position` for a `linear`, `constant` or `early` schedule.
#[pyfunction]
#[pyo3(signature = (kind, share_rate, horizon, position))]
fn schedule_beta(kind: &str, share_rate: f64, horizon: u64, position: u64) -> PyResult<f64> {
    let s = match kind {
        "linear" => ShareSchedule::linear(share_rate, horizon, Granularity::Step),
        "constant" => ShareSchedule::constant(share_rate, horizon, Granularity::Step),
        "early" => ShareSchedule::early(share_rate, horizon, Granularity::Step),
        other => return Err(EwaError::new_err(format!("unknown schedule {other:?}"))),
    };
    s.validate().map_err(err)?;
    Ok(ewa_core::schedule_beta(&s, position))
}

/// Trains from a TOML config (or the `desk` profile) with `key=value`
/// overrides. Returns the trained model and one dict per epoch.
#[pyfunction]
#[pyo3(signature = (config_toml=None, overrides=Vec::new()))]
fn train_model<'py>(
    py: Python<'py>,
    config_toml: Option<&str>,
    overrides: Vec<String>,
) -> PyResult<(PyModel, Vec<Bound<'py, PyDict>>)> {
    let cfg = match config_toml {
        Some(t) => TrainConfig::from_toml(t),
        None => Ok(TrainConfig::desk()),
    }
    .and_then(|c| c.with_overrides(&overrides))
    .map_err(err)?;
    let (data, eval) = train::prepare_data(&cfg).map_err(err)?;
    let out = py
        .detach(|| train::train(&cfg, &data, Some(&eval)))
        .map_err(err)?;
    let epochs = out
        .epochs
        .iter()
        .map(|e| {
            let d = PyDict::new(py);
            d.set_item("epoch", e.epoch)?;
            d.set_item("train_loss", e.train_loss)?;
            d.set_item("eval_loss", e.eval_loss)?;
            d.set_item("eval_accuracy", e.eval_accuracy)?;
            d.set_item("beta_last", e.beta_last)?;
            Ok(d)
        })
        .collect::<PyResult<_>>()?;
    Ok((PyModel { inner: out.model }, epochs))
}

/// Checks the unrolled EWA recursion on random probes; one dict per
/// `(N, m, β)` case.
#[pyfunction]
#[pyo3(signature = (cases=vec![(2, 3), (4, 5), (4, 10)], betas=vec![0.1, 0.3, 0.5], eta=0.1, seed=0))]
fn verify_theory<'py>(
    py: Python<'py>,
    cases: Vec<(usize, usize)>,
    betas: Vec<f64>,
    eta: f64,
    seed: u64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let rows = ewa_core::theory::sweep(&cases, &betas, eta, seed).map_err(err)?;
    rows.iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("n_experts", r.report.n_experts)?;
            d.set_item("m", r.report.m)?;
            d.set_item("beta", r.report.beta)?;
            d.set_item("unrolled_error", r.report.unrolled_error)?;
            d.set_item("single_step_error", r.report.single_step_error)?;
            d.set_item("measured_decay", r.report.measured_decay)?;
            d.set_item("expected_decay", r.report.expected_decay)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn ewa(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("EwaError", m.py().get_type::<EwaError>())?;
    m.add_class::<PyViTConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(ewa_step, m)?)?;
    m.add_function(wrap_pyfunction!(contraction_factor, m)?)?;
    m.add_function(wrap_pyfunction!(rup_partition, m)?)?;
    m.add_function(wrap_pyfunction!(schedule_beta, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(verify_theory, m)?)?;
    Ok(())
}
