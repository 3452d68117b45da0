//! Learned-step-size fake quantization.
//!
//! Forward: `round(clip(w / s, q_n, q_p)) * s` with round-half-to-even.
//! Backward (straight-through): the weight gradient passes where
//! `q_n < w/s < q_p` and is zero where clipped; the step-size gradient per
//! element is `round(w/s) - w/s` in range and `q_n` / `q_p` when clipped,
//! summed over elements and multiplied by an optional gradient scale.
//!
//! The signed range is `(-2^(n-1), 2^(n-1) - 1)` and clipping conditions are
//! evaluated on the ratio `w/s`; the low-clip gradient is `q_n` because
//! `Q(s) = q_n * s` there.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::parallel::{self, Execution};
use crate::tensor::Tensor;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 8;
/// Floor applied to every step size after an optimizer update.
pub const MIN_STEP_SIZE: f64 = 1e-8;
/// Step size used when the initialization heuristic yields zero.
pub const FALLBACK_STEP_SIZE: f64 = 1e-3;

const PAR_THRESHOLD: usize = 1 << 15;
const PAR_CHUNK: usize = 1 << 13;

/// Integer clipping levels `[q_n, q_p]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantRange {
    pub q_n: i64,
    pub q_p: i64,
}

impl QuantRange {
    pub fn as_tuple(self) -> (i64, i64) {
        (self.q_n, self.q_p)
    }

    fn bounds(self) -> (f64, f64) {
        (self.q_n as f64, self.q_p as f64)
    }
}

pub fn qrange(bits: u32, signed: bool) -> Result<QuantRange> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(invalid(format!("bit-width {bits} outside {MIN_BITS}..={MAX_BITS}")));
    }
    Ok(if signed {
        QuantRange {
            q_n: -(1i64 << (bits - 1)),
            q_p: (1i64 << (bits - 1)) - 1,
        }
    } else {
        QuantRange {
            q_n: 0,
            q_p: (1i64 << bits) - 1,
        }
    })
}

#[inline]
pub fn quantize_scalar(w: f64, s: f64, range: QuantRange) -> f64 {
    let (lo, hi) = range.bounds();
    (w / s).clamp(lo, hi).round_ties_even() * s
}

pub fn quantize_forward(w: &Tensor, s: f64, range: QuantRange) -> Result<Tensor> {
    let exec = if w.numel() >= PAR_THRESHOLD {
        Execution::default()
    } else {
        Execution::Sequential
    };
    quantize_forward_with(exec, w, s, range)
}

/// [`quantize_forward`] with an explicit scheduling choice.
pub fn quantize_forward_with(exec: Execution, w: &Tensor, s: f64, range: QuantRange) -> Result<Tensor> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(invalid(format!("step size must be positive, got {s}")));
    }
    if w.data().iter().any(|x| x.is_nan()) {
        return Err(Error::NonFinite("quantizer input".into()));
    }
    let mut out = vec![0.0; w.numel()];
    parallel::zip_chunks(exec, w.data(), &mut out, PAR_CHUNK, |src, dst| {
        for (d, &x) in dst.iter_mut().zip(src) {
            *d = quantize_scalar(x, s, range);
        }
    });
    Tensor::new(w.shape().to_vec(), out)
}

/// Elementwise `dQ/ds` under the straight-through estimator.
#[inline]
pub fn step_size_grad(w: f64, s: f64, range: QuantRange) -> f64 {
    let (lo, hi) = range.bounds();
    let r = w / s;
    if r <= lo {
        lo
    } else if r >= hi {
        hi
    } else {
        r.round_ties_even() - r
    }
}

#[inline]
fn in_range(w: f64, s: f64, range: QuantRange) -> bool {
    let (lo, hi) = range.bounds();
    let r = w / s;
    lo < r && r < hi
}

/// Straight-through weight gradient: upstream where in range, zero where clipped.
pub fn weight_grad_ste(upstream: &Tensor, w: &Tensor, s: f64, range: QuantRange) -> Result<Tensor> {
    if upstream.shape() != w.shape() {
        return Err(Error::ShapeMismatch {
            op: "weight_grad_ste",
            lhs: upstream.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let data = upstream
        .data()
        .iter()
        .zip(w.data())
        .map(|(&g, &x)| if in_range(x, s, range) { g } else { 0.0 })
        .collect();
    Tensor::new(w.shape().to_vec(), data)
}

/// `2 * mean(|w|) / sqrt(q_p)`, or [`FALLBACK_STEP_SIZE`] for all-zero input.
pub fn init_step_size(w: &Tensor, q_p: i64) -> f64 {
    if w.numel() == 0 {
        return FALLBACK_STEP_SIZE;
    }
    let mean_abs = w.data().iter().map(|x| x.abs()).sum::<f64>() / w.numel() as f64;
    let s = 2.0 * mean_abs / (q_p as f64).sqrt();
    if s > 0.0 && s.is_finite() {
        s
    } else {
        FALLBACK_STEP_SIZE
    }
}

/// Step-size gradient multiplier `1 / sqrt(num_elements * q_p)`.
pub fn grad_scale(num_elements: usize, q_p: i64) -> f64 {
    1.0 / ((num_elements.max(1) as f64) * (q_p.max(1) as f64)).sqrt()
}

/// Records `Q(x, s)` on the tape. `s` must be a scalar variable.
pub fn fake_quantize(tape: &mut Tape, x: Var, s: Var, range: QuantRange, scale: f64) -> Result<Var> {
    if tape.value(s).numel() != 1 {
        return Err(invalid("step size must be a scalar"));
    }
    tape.custom_grad(
        &[x, s],
        |v| quantize_forward(v[0], v[1].item(), range),
        move |v, up| {
            let (x, s) = (v[0], v[1].item());
            let gx = weight_grad_ste(up, x, s, range).expect("shapes checked at registration");
            let gs: f64 = up
                .data()
                .iter()
                .zip(x.data())
                .map(|(g, &w)| g * step_size_grad(w, s, range))
                .sum();
            vec![gx, Tensor::new(v[1].shape().to_vec(), vec![gs * scale]).unwrap()]
        },
    )
}

/// A weight tensor with its learnable step size.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedParam {
    pub weight: Tensor,
    pub step_size: f64,
    pub bits: u32,
    pub signed: bool,
    pub range: QuantRange,
}

impl QuantizedParam {
    /// Signed quantizer with the step size initialized from the weights.
    pub fn new(weight: Tensor, bits: u32) -> Result<Self> {
        let range = qrange(bits, true)?;
        let step_size = init_step_size(&weight, range.q_p);
        Ok(Self {
            weight,
            step_size,
            bits,
            signed: true,
            range,
        })
    }

    pub fn quantized(&self) -> Result<Tensor> {
        quantize_forward(&self.weight, self.step_size, self.range)
    }

    pub fn grad_scale(&self) -> f64 {
        grad_scale(self.weight.numel(), self.range.q_p)
    }

    pub fn clamp_step_size(&mut self) {
        self.step_size = clamp_step(self.step_size);
    }
}

/// Per-site activation quantizer.
#[derive(Clone, Debug, PartialEq)]
pub struct ActQuantizer {
    pub step_size: f64,
    pub bits: u32,
    pub signed: bool,
    pub range: QuantRange,
}

impl ActQuantizer {
    pub fn new(bits: u32, signed: bool) -> Result<Self> {
        Ok(Self {
            step_size: 1.0,
            bits,
            signed,
            range: qrange(bits, signed)?,
        })
    }

    /// Sets the step size from a representative activation sample.
    pub fn calibrate(&mut self, sample: &Tensor) {
        self.step_size = init_step_size(sample, self.range.q_p);
    }

    /// Gradient scale for activations of `features` values per example.
    pub fn grad_scale(&self, features: usize) -> f64 {
        grad_scale(features, self.range.q_p)
    }

    pub fn clamp_step_size(&mut self) {
        self.step_size = clamp_step(self.step_size);
    }
}

pub(crate) fn clamp_step(s: f64) -> f64 {
    if s.is_nan() {
        s
    } else {
        s.max(MIN_STEP_SIZE)
    }
}
