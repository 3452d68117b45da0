//! Empirical sharpness: projected gradient ascent inside an l2 ball.
//!
//! Starting from the weight images `W0`, the ascent repeats
//! `W <- W + eta * grad L(W)` and projects back onto the sphere of radius
//! `rho` around `W0` whenever it leaves the ball. The score is
//! `L(W_final) - L(W0)` on a fixed full batch. For quantized models the
//! ascent runs in the space of quantized weights with step sizes and
//! activation quantizers frozen.
//!
//! The ascent starts from a seeded random offset of length
//! `rho * START_RADIUS_FRACTION` so that it can leave exact stationary points.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{invalid, Result};
use crate::model::Model;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 20;
pub const DEFAULT_SUBSET: usize = 1024;
pub const DEFAULT_RHOS: [f64; 2] = [0.01, 0.05];
pub const START_RADIUS_FRACTION: f64 = 1e-3;

/// `eta = rho / 10` unless given.
pub fn default_eta(rho: f64) -> f64 {
    rho / 10.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AscentStatus {
    Ok,
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessReport {
    pub rho: f64,
    pub eta: f64,
    pub steps: usize,
    #[serde(with = "nan_as_null")]
    pub loss_start: f64,
    #[serde(with = "nan_as_null")]
    pub loss_end: f64,
    #[serde(with = "nan_as_null")]
    pub score: f64,
    pub seed: u64,
    pub checkpoint_id: String,
    /// Largest `||W_t - W0||` seen during the ascent.
    pub max_offset_norm: f64,
    pub status: AscentStatus,
}

/// Result of [`ascend`], in offset coordinates `W - W0`.
#[derive(Clone, Debug, PartialEq)]
pub struct AscentTrace {
    pub loss_start: f64,
    pub loss_end: f64,
    pub offset: Vec<f64>,
    /// `||W_t - W0||` after every iteration.
    pub norms: Vec<f64>,
    pub status: AscentStatus,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Identity inside the ball of radius `rho` around `w0`, radial projection
/// onto its surface outside.
pub fn project_to_ball(w: &[f64], w0: &[f64], rho: f64) -> Vec<f64> {
    let diff: Vec<f64> = w.iter().zip(w0).map(|(a, b)| a - b).collect();
    let n = norm(&diff);
    if n <= rho {
        return w.to_vec();
    }
    diff.iter().zip(w0).map(|(d, b)| rho * d / n + b).collect()
}

fn project_offset(offset: &mut [f64], rho: f64) {
    let n = norm(offset);
    if n > rho {
        for x in offset.iter_mut() {
            *x *= rho / n;
        }
    }
}

/// Projected gradient ascent on `objective(offset) -> (loss, grad)` in a
/// `dim`-dimensional offset space centred at zero.
pub fn ascend<F>(dim: usize, rho: f64, eta: f64, steps: usize, seed: u64, mut objective: F) -> Result<AscentTrace>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(invalid(format!("rho must be positive, got {rho}")));
    }
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(invalid(format!("eta must be positive, got {eta}")));
    }
    if steps == 0 {
        return Err(invalid("sharpness ascent needs at least one step"));
    }
    let zero = vec![0.0; dim];
    let (loss_start, _) = objective(&zero)?;
    let aborted = |loss_start, offset, norms| AscentTrace {
        loss_start,
        loss_end: f64::NAN,
        offset,
        norms,
        status: AscentStatus::Aborted,
    };
    if !loss_start.is_finite() {
        return Ok(aborted(loss_start, zero, Vec::new()));
    }
    let mut rng = Rng::new(seed);
    let mut offset: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let n0 = norm(&offset);
    if n0 > 0.0 {
        let r = rho * START_RADIUS_FRACTION;
        offset.iter_mut().for_each(|x| *x *= r / n0);
    }
    let mut norms = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (loss, grad) = objective(&offset)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Ok(aborted(loss_start, offset, norms));
        }
        for (x, g) in offset.iter_mut().zip(&grad) {
            *x += eta * g;
        }
        project_offset(&mut offset, rho);
        norms.push(norm(&offset));
    }
    let (loss_end, _) = objective(&offset)?;
    if !loss_end.is_finite() {
        return Ok(aborted(loss_start, offset, norms));
    }
    Ok(AscentTrace {
        loss_start,
        loss_end,
        offset,
        norms,
        status: AscentStatus::Ok,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SharpnessParams {
    pub rho: f64,
    pub eta: f64,
    pub steps: usize,
    pub seed: u64,
}

impl SharpnessParams {
    pub fn new(rho: f64) -> Self {
        Self {
            rho,
            eta: default_eta(rho),
            steps: DEFAULT_STEPS,
            seed: 0,
        }
    }
}

fn unflatten(flat: &[f64], shapes: &[Vec<usize>]) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut at = 0;
    for s in shapes {
        let n: usize = s.iter().product();
        out.push(Tensor::new(s.clone(), flat[at..at + n].to_vec()).expect("sized slice"));
        at += n;
    }
    out
}

/// Sharpness of `model` on `batch` in the space of its weight images.
/// The model is only read.
pub fn measure_sharpness(
    model: &Model,
    batch: &Batch,
    params: SharpnessParams,
    checkpoint_id: &str,
) -> Result<SharpnessReport> {
    let shapes = model.image_shapes();
    let dim: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    let trace = ascend(dim, params.rho, params.eta, params.steps, params.seed, |offset| {
        let offsets = unflatten(offset, &shapes);
        let g = model.loss_and_grads(batch, Some(&offsets))?;
        let flat = g.images.into_iter().flat_map(Tensor::into_data).collect();
        Ok((g.loss, flat))
    })?;
    Ok(SharpnessReport {
        rho: params.rho,
        eta: params.eta,
        steps: params.steps,
        loss_start: trace.loss_start,
        loss_end: trace.loss_end,
        score: trace.loss_end - trace.loss_start,
        seed: params.seed,
        checkpoint_id: checkpoint_id.to_string(),
        max_offset_norm: trace.norms.iter().cloned().fold(0.0, f64::max),
        status: trace.status,
    })
}

pub(crate) mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}
