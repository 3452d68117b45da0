//! Sharpness-aware perturbation of quantized weights.
//!
//! `eps = rho * g / ||g||_2` where `g` concatenates the loss gradients with
//! respect to every weight image and the norm is global. The perturbation
//! is added after fake quantization and enters the tape as a constant, so
//! no gradient flows into it.

use crate::data::Batch;
use crate::error::{invalid, Result};
use crate::model::Gradients;
use crate::tensor::Tensor;
use crate::train::Trainable;

/// Global gradient norms below this produce the zero perturbation.
pub const ZERO_GRAD_THRESHOLD: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Perturbation {
    pub buffers: Vec<Tensor>,
    pub rho: f64,
    /// Norm of the gradient the perturbation was built from.
    pub global_norm: f64,
}

impl Perturbation {
    pub fn zeros_like(grads: &[Tensor], rho: f64) -> Self {
        Self {
            buffers: grads.iter().map(|g| Tensor::zeros(g.shape())).collect(),
            rho,
            global_norm: 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.buffers.iter().all(|b| b.data().iter().all(|&x| x == 0.0))
    }

    pub fn norm(&self) -> f64 {
        global_norm(&self.buffers)
    }
}

pub fn global_norm(buffers: &[Tensor]) -> f64 {
    buffers.iter().flat_map(|b| b.data()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Builds `eps` from per-tensor gradients. `rho = 0` gives the zero perturbation.
pub fn compute_epsilon(grads: &[Tensor], rho: f64) -> Result<Perturbation> {
    if grads.is_empty() {
        return Err(invalid("no gradient buffers to perturb"));
    }
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(invalid(format!("rho must be a finite non-negative radius, got {rho}")));
    }
    let norm = global_norm(grads);
    if rho == 0.0 || !(norm >= ZERO_GRAD_THRESHOLD) {
        let mut p = Perturbation::zeros_like(grads, rho);
        p.global_norm = norm;
        return Ok(p);
    }
    let k = rho / norm;
    Ok(Perturbation {
        buffers: grads.iter().map(|g| g.map(|x| x * k)).collect(),
        rho,
        global_norm: norm,
    })
}

/// Forward/backward with every weight image replaced by `Q(w, s) + eps`.
/// The model is only read.
pub fn perturbed_grads<M: Trainable + ?Sized>(
    model: &M,
    batch: &Batch,
    perturbation: &Perturbation,
) -> Result<Gradients> {
    let shapes = model.image_shapes();
    if perturbation.buffers.len() != shapes.len()
        || perturbation
            .buffers
            .iter()
            .zip(&shapes)
            .any(|(b, s)| b.shape() != s.as_slice())
    {
        return Err(crate::Error::ShapeMismatch {
            op: "perturbed_grads",
            lhs: perturbation.buffers.iter().map(|b| b.numel()).collect(),
            rhs: shapes.iter().map(|s| s.iter().product()).collect(),
        });
    }
    if perturbation.is_zero() {
        model.loss_and_grads(batch, None)
    } else {
        model.loss_and_grads(batch, Some(&perturbation.buffers))
    }
}
