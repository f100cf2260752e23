//! Flat parameter vectors and inner-loop learning rates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{LayerSpec, NetworkSpec};
use super::Real;
use crate::error::{Error, Result};

/// Network weights as one flat `f32` vector laid out layer by layer, each
/// block holding weights then biases (layer-norm: scales then shifts).
/// Conv weights are `[ky][kx][c_in][c_out]`, dense weights `[in][out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub spec: NetworkSpec,
    pub theta: Vec<f32>,
    pub seed: u64,
}

impl NetworkParams {
    pub fn new(spec: NetworkSpec, theta: Vec<f32>, seed: u64) -> Result<Self> {
        if theta.len() != spec.param_count() {
            return Err(Error::Shape {
                expected: format!("{} parameters", spec.param_count()),
                actual: format!("{}", theta.len()),
            });
        }
        Ok(Self { spec, theta, seed })
    }

    /// `(weights, biases)` of each parameterized layer.
    pub fn unflatten(&self) -> Vec<(Vec<f32>, Vec<f32>)> {
        self.spec
            .layers()
            .iter()
            .filter(|l| l.param_layer.is_some())
            .map(|l| {
                let w = &self.theta[l.offset..l.offset + l.weights];
                let b = &self.theta[l.offset + l.weights..l.offset + l.param_len()];
                (w.to_vec(), b.to_vec())
            })
            .collect()
    }

    pub fn flatten(spec: NetworkSpec, blocks: &[(Vec<f32>, Vec<f32>)], seed: u64) -> Result<Self> {
        let theta: Vec<f32> = blocks.iter().flat_map(|(w, b)| w.iter().chain(b).copied()).collect();
        let layers: Vec<_> = spec.layers().iter().filter(|l| l.param_layer.is_some()).collect();
        if layers.len() != blocks.len() || layers.iter().zip(blocks).any(|(l, (w, b))| l.weights != w.len() || l.biases != b.len()) {
            return Err(Error::Shape {
                expected: "one (weights, biases) block per parameterized layer".into(),
                actual: format!("{} blocks", blocks.len()),
            });
        }
        Self::new(spec, theta, seed)
    }

    pub fn theta_as<T: Real>(&self) -> Vec<T> {
        self.theta.iter().map(|&v| T::from_f64(v as f64)).collect()
    }
}

/// He-uniform fan-in weights, zero biases, unit layer-norm scales.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> NetworkParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = vec![0.0f32; spec.param_count()];
    for l in spec.layers() {
        let block = &mut theta[l.offset..l.offset + l.param_len()];
        match l.kind {
            LayerSpec::Conv3x3 { .. } | LayerSpec::Dense { .. } => {
                let fan_in = l.weights / l.biases;
                let limit = (6.0 / fan_in as f64).sqrt();
                for w in &mut block[..l.weights] {
                    *w = rng.gen_range(-limit..limit) as f32;
                }
            }
            LayerSpec::LayerNorm => block[..l.weights].fill(1.0),
            LayerSpec::Relu | LayerSpec::AvgPool => {}
        }
    }
    NetworkParams {
        spec: spec.clone(),
        theta,
        seed,
    }
}

/// Inner-loop step sizes.
#[derive(Debug, Clone, PartialEq)]
pub enum AlphaState {
    /// One fixed rate (MAML, and test-time fine-tuning of the baseline).
    Scalar(f32),
    /// One rate per parameter, shared by all steps (metaSGD).
    PerParameter(Vec<f32>),
    /// One rate per (step, parameterized layer), row-major `steps × layers`
    /// (LSLR). Steps past the last row reuse the last row.
    PerLayerPerStep { steps: usize, layers: usize, values: Vec<f32> },
}

impl AlphaState {
    pub fn per_parameter(spec: &NetworkSpec, init: f32) -> Self {
        AlphaState::PerParameter(vec![init; spec.param_count()])
    }

    pub fn per_layer_per_step(spec: &NetworkSpec, steps: usize, init: f32) -> Self {
        AlphaState::PerLayerPerStep {
            steps,
            layers: spec.param_layers(),
            values: vec![init; steps * spec.param_layers()],
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            AlphaState::Scalar(_) => "scalar",
            AlphaState::PerParameter(_) => "per_parameter",
            AlphaState::PerLayerPerStep { .. } => "per_layer_per_step",
        }
    }

    /// Whether meta-training updates these rates.
    pub fn is_learned(&self) -> bool {
        !matches!(self, AlphaState::Scalar(_))
    }

    pub fn values(&self) -> &[f32] {
        match self {
            AlphaState::Scalar(v) => std::slice::from_ref(v),
            AlphaState::PerParameter(v) => v,
            AlphaState::PerLayerPerStep { values, .. } => values,
        }
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        match self {
            AlphaState::Scalar(v) => std::slice::from_mut(v),
            AlphaState::PerParameter(v) => v,
            AlphaState::PerLayerPerStep { values, .. } => values,
        }
    }

    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        let ok = match self {
            AlphaState::Scalar(v) => v.is_finite(),
            AlphaState::PerParameter(v) => v.len() == spec.param_count(),
            AlphaState::PerLayerPerStep { steps, layers, values } => {
                *steps > 0 && *layers == spec.param_layers() && values.len() == steps * layers
            }
        };
        if !ok {
            return Err(Error::Shape {
                expected: format!("{} rates for spec {spec}", self.tag()),
                actual: format!("{} values", self.values().len()),
            });
        }
        Ok(())
    }

    /// Row of rates used at inner step `step` (LSLR only).
    pub fn row_for_step(&self, step: usize) -> Option<usize> {
        match self {
            AlphaState::PerLayerPerStep { steps, .. } => Some(step.min(steps - 1)),
            _ => None,
        }
    }

    /// Per-parameter rates for inner step `step`.
    pub fn expand<T: Real>(&self, spec: &NetworkSpec, step: usize) -> Vec<T> {
        match self {
            AlphaState::Scalar(a) => vec![T::from_f64(*a as f64); spec.param_count()],
            AlphaState::PerParameter(v) => v.iter().map(|&a| T::from_f64(a as f64)).collect(),
            AlphaState::PerLayerPerStep { layers, values, .. } => {
                let row = self.row_for_step(step).expect("per-layer rates");
                let mut out = vec![T::ZERO; spec.param_count()];
                for (li, (off, len)) in spec.param_blocks().into_iter().enumerate() {
                    out[off..off + len].fill(T::from_f64(values[row * layers + li] as f64));
                }
                out
            }
        }
    }

    /// Adds `d loss / d rate` for step `step`, given the per-parameter
    /// derivative `per_param`, into `acc` (shaped like [`Self::values`]).
    pub fn accumulate_grad<T: Real>(&self, spec: &NetworkSpec, step: usize, per_param: &[T], acc: &mut [f64]) {
        match self {
            AlphaState::Scalar(_) => acc[0] += per_param.iter().map(|v| v.to_f64()).sum::<f64>(),
            AlphaState::PerParameter(_) => {
                for (a, v) in acc.iter_mut().zip(per_param) {
                    *a += v.to_f64();
                }
            }
            AlphaState::PerLayerPerStep { layers, .. } => {
                let row = self.row_for_step(step).expect("per-layer rates");
                for (li, (off, len)) in spec.param_blocks().into_iter().enumerate() {
                    acc[row * layers + li] += per_param[off..off + len].iter().map(|v| v.to_f64()).sum::<f64>();
                }
            }
        }
    }
}
