//! Inner-loop adaptation and gradients through it.
//!
//! With `θ_{i+1} = θ_i − a_i ⊙ ∇L_s(θ_i)` the reverse sweep starts from
//! `v = ∇L_q(θ_n)` and for each step, last first, adds `−∇L_s(θ_i) ⊙ v` to
//! the gradient of `a_i` and replaces `v` by `v − H_i (a_i ⊙ v)`, where
//! `H_i` is the support-loss Hessian at `θ_i`.

use super::engine::{backward, hvp, GradTape};
use super::params::AlphaState;
use super::spec::NetworkSpec;
use super::Real;
use crate::error::{Error, Result};

/// Inputs (N×H×W×C, flattened) with their ground-truth illuminants.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub x: Vec<T>,
    pub gts: Vec<[f64; 3]>,
}

impl<T: Real> Batch<T> {
    pub fn new(spec: &NetworkSpec, x: Vec<T>, gts: Vec<[f64; 3]>) -> Result<Self> {
        if gts.is_empty() || x.len() != gts.len() * spec.input_size() {
            return Err(Error::Shape {
                expected: format!("{} inputs of {} values", gts.len(), spec.input_size()),
                actual: format!("{} values", x.len()),
            });
        }
        Ok(Self { x, gts })
    }

    pub fn len(&self) -> usize {
        self.gts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gts.is_empty()
    }

    /// Concatenation of two batches.
    pub fn concat(&self, other: &Batch<T>) -> Batch<T> {
        Batch {
            x: self.x.iter().chain(&other.x).copied().collect(),
            gts: self.gts.iter().chain(&other.gts).copied().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaGradMode {
    Exact,
    FirstOrder,
}

impl std::str::FromStr for MetaGradMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "first_order" => Ok(Self::FirstOrder),
            _ => Err(Error::invalid(format!("unknown meta-gradient mode {s:?} (exact, first_order)"))),
        }
    }
}

impl std::fmt::Display for MetaGradMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Exact => "exact",
            Self::FirstOrder => "first_order",
        })
    }
}

/// Result of [`inner_adapt`].
#[derive(Debug, Clone)]
pub struct InnerTrace<T> {
    pub theta: Vec<T>,
    /// Support loss (radians) before each step.
    pub losses: Vec<f64>,
    /// Per-layer rate used at each step, see [`step_rates`].
    pub rates: Vec<Vec<f32>>,
}

/// Per-layer rates used at each of `steps` inner steps. Per-parameter
/// rates are summarised by their per-layer mean.
pub fn step_rates(spec: &NetworkSpec, alpha: &AlphaState, steps: usize) -> Vec<Vec<f32>> {
    (0..steps)
        .map(|i| match alpha {
            AlphaState::Scalar(a) => vec![*a; spec.param_layers()],
            AlphaState::PerParameter(v) => spec
                .param_blocks()
                .into_iter()
                .map(|(off, len)| (v[off..off + len].iter().map(|&a| a as f64).sum::<f64>() / len as f64) as f32)
                .collect(),
            AlphaState::PerLayerPerStep { layers, values, .. } => {
                let row = alpha.row_for_step(i).expect("per-layer rates");
                values[row * layers..(row + 1) * layers].to_vec()
            }
        })
        .collect()
}

fn run_inner<T: Real>(spec: &NetworkSpec, theta: &[T], alpha: &AlphaState, support: &Batch<T>, n: usize, keep: bool) -> Result<(Vec<T>, Vec<f64>, Vec<(Vec<T>, GradTape<T>)>)> {
    alpha.validate(spec)?;
    let mut cur = theta.to_vec();
    let mut losses = Vec::with_capacity(n);
    let mut tapes = Vec::new();
    for i in 0..n {
        let tape = backward(spec, &cur, &support.x, &support.gts)?;
        losses.push(tape.loss);
        let a: Vec<T> = alpha.expand(spec, i);
        let next: Vec<T> = cur.iter().zip(&a).zip(&tape.grad).map(|((&t, &r), &g)| t - r * g).collect();
        if keep {
            tapes.push((std::mem::replace(&mut cur, next), tape));
        } else {
            cur = next;
        }
    }
    Ok((cur, losses, tapes))
}

/// `n` SGD steps on the support loss with the rates of `alpha`.
pub fn inner_adapt<T: Real>(spec: &NetworkSpec, theta: &[T], alpha: &AlphaState, support: &Batch<T>, n: usize) -> Result<InnerTrace<T>> {
    let (theta, losses, _) = run_inner(spec, theta, alpha, support, n, false)?;
    Ok(InnerTrace {
        theta,
        losses,
        rates: step_rates(spec, alpha, n),
    })
}

/// Gradients of the query loss after adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaGradient {
    pub theta: Vec<f64>,
    /// Shaped like [`AlphaState::values`]; zero in first-order mode.
    pub alpha: Vec<f64>,
    /// Query loss after adaptation, radians.
    pub loss: f64,
    /// Support loss before the first step, radians.
    pub support_loss: f64,
    /// Degenerate query predictions.
    pub degenerate: usize,
}

/// Query loss after `n` inner steps on `support`, and its gradient with
/// respect to the initial parameters and the rates.
pub fn meta_backward<T: Real>(
    spec: &NetworkSpec,
    theta: &[T],
    alpha: &AlphaState,
    support: &Batch<T>,
    query: &Batch<T>,
    n: usize,
    mode: MetaGradMode,
) -> Result<MetaGradient> {
    let exact = mode == MetaGradMode::Exact;
    let (adapted, losses, tapes) = run_inner(spec, theta, alpha, support, n, exact)?;
    let q = backward(spec, &adapted, &query.x, &query.gts)?;
    let mut galpha = vec![0.0f64; alpha.values().len()];
    let mut v = q.grad;
    if exact {
        for (i, (th, tape)) in tapes.iter().enumerate().rev() {
            let a: Vec<T> = alpha.expand(spec, i);
            let per: Vec<T> = tape.grad.iter().zip(&v).map(|(&g, &vv)| -(g * vv)).collect();
            alpha.accumulate_grad(spec, i, &per, &mut galpha);
            let u: Vec<T> = a.iter().zip(&v).map(|(&r, &vv)| r * vv).collect();
            let hu = hvp(spec, th, tape, &u);
            for (vv, h) in v.iter_mut().zip(hu) {
                *vv -= h;
            }
        }
    }
    Ok(MetaGradient {
        theta: v.iter().map(|x| x.to_f64()).collect(),
        alpha: galpha,
        loss: q.loss,
        support_loss: losses.first().copied().unwrap_or(f64::NAN),
        degenerate: q.degenerate,
    })
}
