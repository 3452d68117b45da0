//! Desk-scale architectures with quantization sites.
//!
//! Every [`QuantLinear`] holds a latent weight with its own step size and an
//! optional input quantizer. The weight side of each matmul sees the
//! *image* of the weight: `Q(w, s)` in quantized modes, `w` itself in FP
//! mode or for exempt layers. Perturbations (SAM, sharpness ascent) are
//! added to these images after quantization and never touch stored state.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::Batch;
use crate::error::{invalid, Error, Result};
use crate::quant::{self, ActQuantizer, QuantizedParam};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::TrainMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TinyTransformerConfig {
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_d_ff")]
    pub d_ff: usize,
    /// Input features, each embedded as one token.
    pub seq_len: usize,
    pub classes: usize,
}

fn default_layers() -> usize {
    2
}
fn default_d_model() -> usize {
    32
}
fn default_heads() -> usize {
    2
}
fn default_d_ff() -> usize {
    64
}

impl TinyTransformerConfig {
    pub fn new(seq_len: usize, classes: usize) -> Self {
        Self {
            layers: default_layers(),
            d_model: default_d_model(),
            heads: default_heads(),
            d_ff: default_d_ff(),
            seq_len,
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.d_ff == 0 {
            return Err(invalid("transformer sizes must be nonzero"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(invalid(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.seq_len == 0 || self.classes < 2 {
            return Err(invalid("transformer needs seq_len >= 1 and classes >= 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Arch {
    Mlp { dims: Vec<usize> },
    Transformer(TinyTransformerConfig),
}

/// Bit-widths and quantizer switches shared by every site of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSettings {
    pub bits_w: u32,
    pub bits_a: u32,
    pub quantize_activations: bool,
    /// Apply `1/sqrt(numel * q_p)` to step-size gradients.
    pub grad_scale: bool,
    /// Keep the first and last quantizable layers in full precision.
    pub exempt_first_last: bool,
}

impl QuantSettings {
    pub fn new(bits_w: u32, bits_a: u32) -> Self {
        Self {
            bits_w,
            bits_a,
            quantize_activations: true,
            grad_scale: true,
            exempt_first_last: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantLinear {
    pub name: String,
    /// Latent weight, `[in, out]`.
    pub weight: QuantizedParam,
    pub bias: Tensor,
    pub input_quant: Option<ActQuantizer>,
    pub exempt: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: Arch,
    settings: QuantSettings,
    quantize: bool,
    pub linears: Vec<QuantLinear>,
    /// Full-precision parameters outside the linear layers.
    pub extras: Vec<NamedTensor>,
}

struct Binding {
    weights: Vec<Var>,
    steps: Vec<Option<Var>>,
    images: Vec<Var>,
}

/// A recorded forward pass.
pub struct ForwardPass {
    pub tape: Tape,
    pub logits: Var,
    pub loss: Var,
    /// Attention probabilities, one `[batch, seq, seq]` per layer and head.
    pub attention: Vec<Var>,
    /// Input of each linear layer before activation quantization.
    pub linear_inputs: Vec<Var>,
    binding: Binding,
}

/// Loss and gradients of one backward pass, grouped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    /// One entry per [`Model::weight_slices`] item.
    pub weights: Vec<Tensor>,
    /// One entry per [`Model::step_sizes`] item.
    pub steps: Vec<f64>,
    /// Gradient with respect to each weight image (`Q(w, s)` or `w`).
    pub images: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Constant offsets added to each weight image.
    pub offsets: Option<&'a [Tensor]>,
    pub skip_act_quant: bool,
}

fn uniform_tensor(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform_in(-bound, bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

impl Model {
    /// Dense relu stack; `dims = [in, hidden.., classes]`.
    pub fn mlp(dims: &[usize], settings: QuantSettings, mode: TrainMode, seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(invalid(format!("mlp dims {dims:?} need >= 2 nonzero entries")));
        }
        let mut rng = Rng::new(seed);
        let n = dims.len() - 1;
        let mut linears = Vec::with_capacity(n);
        for (i, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let w = uniform_tensor(&mut rng, &[fan_in, fan_out], (6.0 / fan_in as f64).sqrt());
            let b = uniform_tensor(&mut rng, &[fan_out], 1.0 / (fan_in as f64).sqrt());
            // inputs after the first layer follow a relu
            let input_quant = Some(ActQuantizer::new(settings.bits_a, i == 0)?);
            linears.push(QuantLinear {
                name: format!("fc{i}"),
                weight: QuantizedParam::new(w, settings.bits_w)?,
                bias: b,
                input_quant,
                exempt: settings.exempt_first_last && (i == 0 || i == n - 1),
            });
        }
        Ok(Self {
            arch: Arch::Mlp { dims: dims.to_vec() },
            quantize: mode.quantized(),
            settings,
            linears,
            extras: Vec::new(),
        })
    }

    /// Post-norm encoder over feature tokens with a mean-pooled linear head.
    pub fn tiny_transformer(
        cfg: &TinyTransformerConfig,
        settings: QuantSettings,
        mode: TrainMode,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let d = cfg.d_model;
        let mut extras = vec![
            NamedTensor {
                name: "embed.value".into(),
                value: uniform_tensor(&mut rng, &[1, d], 1.0),
            },
            NamedTensor {
                name: "embed.position".into(),
                value: uniform_tensor(&mut rng, &[cfg.seq_len, d], 0.1),
            },
        ];
        let mut linears = Vec::with_capacity(6 * cfg.layers);
        let total = 6 * cfg.layers;
        for l in 0..cfg.layers {
            let shapes = [
                ("q", d, d),
                ("k", d, d),
                ("v", d, d),
                ("o", d, d),
                ("ff_in", d, cfg.d_ff),
                ("ff_out", cfg.d_ff, d),
            ];
            for (name, fan_in, fan_out) in shapes {
                let idx = linears.len();
                let w = uniform_tensor(&mut rng, &[fan_in, fan_out], (3.0 / fan_in as f64).sqrt());
                let b = uniform_tensor(&mut rng, &[fan_out], 1.0 / (fan_in as f64).sqrt());
                linears.push(QuantLinear {
                    name: format!("layer{l}.{name}"),
                    weight: QuantizedParam::new(w, settings.bits_w)?,
                    bias: b,
                    input_quant: Some(ActQuantizer::new(settings.bits_a, true)?),
                    exempt: settings.exempt_first_last && (idx == 0 || idx == total - 1),
                });
            }
            for norm in ["ln1", "ln2"] {
                extras.push(NamedTensor {
                    name: format!("layer{l}.{norm}.gain"),
                    value: Tensor::full(&[d], 1.0),
                });
                extras.push(NamedTensor {
                    name: format!("layer{l}.{norm}.bias"),
                    value: Tensor::zeros(&[d]),
                });
            }
        }
        extras.push(NamedTensor {
            name: "head.weight".into(),
            value: uniform_tensor(&mut rng, &[d, cfg.classes], (3.0 / d as f64).sqrt()),
        });
        extras.push(NamedTensor {
            name: "head.bias".into(),
            value: uniform_tensor(&mut rng, &[cfg.classes], 1.0 / (d as f64).sqrt()),
        });
        Ok(Self {
            arch: Arch::Transformer(cfg.clone()),
            quantize: mode.quantized(),
            settings,
            linears,
            extras,
        })
    }

    pub fn build(arch: &Arch, settings: QuantSettings, mode: TrainMode, seed: u64) -> Result<Self> {
        match arch {
            Arch::Mlp { dims } => Self::mlp(dims, settings, mode, seed),
            Arch::Transformer(cfg) => Self::tiny_transformer(cfg, settings, mode, seed),
        }
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn settings(&self) -> &QuantSettings {
        &self.settings
    }

    pub fn is_quantized(&self) -> bool {
        self.quantize
    }

    /// Switches quantizer application without touching stored parameters.
    pub fn set_mode(&mut self, mode: TrainMode) {
        self.quantize = mode.quantized();
    }

    pub fn input_dim(&self) -> usize {
        match &self.arch {
            Arch::Mlp { dims } => dims[0],
            Arch::Transformer(cfg) => cfg.seq_len,
        }
    }

    pub fn classes(&self) -> usize {
        match &self.arch {
            Arch::Mlp { dims } => *dims.last().unwrap(),
            Arch::Transformer(cfg) => cfg.classes,
        }
    }

    /// Number of weight tensors that pass through a quantizer in quantized modes.
    pub fn quantized_tensor_count(&self) -> usize {
        self.linears.iter().filter(|l| !l.exempt).count()
    }

    /// Latent weights, biases and full-precision parameters.
    pub fn parameter_count(&self) -> usize {
        self.weight_slices().iter().map(|s| s.len()).sum()
    }

    pub fn weight_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.linears {
            out.push(l.weight.weight.data());
            out.push(l.bias.data());
        }
        out.extend(self.extras.iter().map(|e| e.value.data()));
        out
    }

    pub fn weight_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in &mut self.linears {
            out.push(l.weight.weight.data_mut());
            out.push(l.bias.data_mut());
        }
        out.extend(self.extras.iter_mut().map(|e| e.value.data_mut()));
        out
    }

    /// Weight step sizes and activation step sizes, interleaved per layer.
    pub fn step_sizes(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.linears {
            out.push(l.weight.step_size);
            if let Some(a) = &l.input_quant {
                out.push(a.step_size);
            }
        }
        out
    }

    pub fn step_sizes_mut(&mut self) -> Vec<&mut f64> {
        let mut out = Vec::new();
        for l in &mut self.linears {
            out.push(&mut l.weight.step_size);
            if let Some(a) = &mut l.input_quant {
                out.push(&mut a.step_size);
            }
        }
        out
    }

    pub fn clamp_step_sizes(&mut self) {
        for l in &mut self.linears {
            l.weight.clamp_step_size();
            if let Some(a) = &mut l.input_quant {
                a.clamp_step_size();
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.weight_slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
            && self.step_sizes().iter().all(|s| s.is_finite())
    }

    fn quantizes_weight(&self, l: &QuantLinear) -> bool {
        self.quantize && !l.exempt
    }

    /// Weight image of every linear layer, in layer order.
    pub fn images(&self) -> Result<Vec<Tensor>> {
        self.linears
            .iter()
            .map(|l| {
                if self.quantizes_weight(l) {
                    l.weight.quantized()
                } else {
                    Ok(l.weight.weight.clone())
                }
            })
            .collect()
    }

    /// Shapes of the weight images; perturbations must match them.
    pub fn image_shapes(&self) -> Vec<Vec<usize>> {
        self.linears.iter().map(|l| l.weight.weight.shape().to_vec()).collect()
    }

    fn bind(&self, tape: &mut Tape) -> (Binding, Vec<Option<Var>>, Vec<Option<Var>>) {
        let mut weights = Vec::new();
        let mut steps = Vec::new();
        let mut w_steps = Vec::new();
        let mut a_steps = Vec::new();
        for l in &self.linears {
            weights.push(tape.param(l.weight.weight.clone()));
            weights.push(tape.param(l.bias.clone()));
            let q = self.quantizes_weight(l);
            let sw = q.then(|| tape.param(Tensor::scalar(l.weight.step_size)));
            steps.push(sw);
            w_steps.push(sw);
            if let Some(a) = &l.input_quant {
                let act_on = q && self.settings.quantize_activations;
                let sa = act_on.then(|| tape.param(Tensor::scalar(a.step_size)));
                steps.push(sa);
                a_steps.push(sa);
            } else {
                a_steps.push(None);
            }
        }
        for e in &self.extras {
            weights.push(tape.param(e.value.clone()));
        }
        (
            Binding {
                weights,
                steps,
                images: Vec::new(),
            },
            w_steps,
            a_steps,
        )
    }

    fn linear(&self, tape: &mut Tape, ctx: &mut Ctx, i: usize, x: Var, opts: &ForwardOptions) -> Result<Var> {
        let l = &self.linears[i];
        ctx.linear_inputs.push(x);
        let mut input = x;
        if let (Some(aq), Some(sa)) = (&l.input_quant, ctx.act_steps[i]) {
            if !opts.skip_act_quant {
                let features = *tape.value(x).shape().last().unwrap_or(&1);
                let scale = if self.settings.grad_scale {
                    aq.grad_scale(features)
                } else {
                    1.0
                };
                input = quant::fake_quantize(tape, x, sa, aq.range, scale)?;
            }
        }
        let w = ctx.binding.weights[2 * i];
        let b = ctx.binding.weights[2 * i + 1];
        let mut image = w;
        if let Some(sw) = ctx.w_steps[i] {
            let scale = if self.settings.grad_scale {
                l.weight.grad_scale()
            } else {
                1.0
            };
            image = quant::fake_quantize(tape, w, sw, l.weight.range, scale)?;
        }
        ctx.binding.images.push(image);
        let mut effective = image;
        if let Some(offsets) = opts.offsets {
            let off = tape.constant(offsets[i].clone());
            effective = tape.add(image, off)?;
        }
        let y = tape.matmul(input, effective)?;
        tape.add(y, b)
    }

    fn extra(&self, ctx: &Ctx, name: &str) -> Var {
        let idx = self
            .extras
            .iter()
            .position(|e| e.name == name)
            .expect("parameter registered at construction");
        ctx.binding.weights[2 * self.linears.len() + idx]
    }

    /// Records the forward pass and the mean cross-entropy loss.
    pub fn forward(&self, batch: &Batch, opts: ForwardOptions) -> Result<ForwardPass> {
        if batch.x.rank() != 2 || batch.x.shape()[1] != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: batch.x.shape().to_vec(),
                rhs: vec![batch.len(), self.input_dim()],
            });
        }
        if let Some(offsets) = opts.offsets {
            let shapes = self.image_shapes();
            if offsets.len() != shapes.len() {
                return Err(invalid(format!(
                    "{} perturbation buffers for {} weight tensors",
                    offsets.len(),
                    shapes.len()
                )));
            }
            for (o, s) in offsets.iter().zip(&shapes) {
                if o.shape() != s.as_slice() {
                    return Err(Error::ShapeMismatch {
                        op: "perturbation",
                        lhs: o.shape().to_vec(),
                        rhs: s.clone(),
                    });
                }
            }
        }
        let mut tape = Tape::new();
        let (binding, w_steps, act_steps) = self.bind(&mut tape);
        let mut ctx = Ctx {
            binding,
            w_steps,
            act_steps,
            linear_inputs: Vec::new(),
            attention: Vec::new(),
        };
        let x = tape.constant(batch.x.clone());
        let logits = match &self.arch {
            Arch::Mlp { .. } => {
                let mut h = x;
                let n = self.linears.len();
                for i in 0..n {
                    h = self.linear(&mut tape, &mut ctx, i, h, &opts)?;
                    if i + 1 < n {
                        h = tape.relu(h)?;
                    }
                }
                h
            }
            Arch::Transformer(cfg) => self.transformer_forward(&mut tape, &mut ctx, cfg, x, &opts)?,
        };
        let loss = tape.cross_entropy_with_logits(logits, &batch.y)?;
        Ok(ForwardPass {
            tape,
            logits,
            loss,
            attention: ctx.attention,
            linear_inputs: ctx.linear_inputs,
            binding: ctx.binding,
        })
    }

    fn transformer_forward(
        &self,
        tape: &mut Tape,
        ctx: &mut Ctx,
        cfg: &TinyTransformerConfig,
        x: Var,
        opts: &ForwardOptions,
    ) -> Result<Var> {
        let b = tape.value(x).shape()[0];
        let (l, d) = (cfg.seq_len, cfg.d_model);
        let dh = d / cfg.heads;
        let tokens = tape.reshape(x, &[b * l, 1])?;
        let emb = self.extra(ctx, "embed.value");
        let h = tape.matmul(tokens, emb)?;
        let h = tape.reshape(h, &[b, l * d])?;
        let pos = self.extra(ctx, "embed.position");
        let pos = tape.reshape(pos, &[l * d])?;
        let h = tape.add(h, pos)?;
        let mut h = tape.reshape(h, &[b * l, d])?;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for layer in 0..cfg.layers {
            let base = 6 * layer;
            let q = self.linear(tape, ctx, base, h, opts)?;
            let k = self.linear(tape, ctx, base + 1, h, opts)?;
            let v = self.linear(tape, ctx, base + 2, h, opts)?;
            let mut heads = Vec::with_capacity(cfg.heads);
            for hd in 0..cfg.heads {
                let (s, e) = (hd * dh, (hd + 1) * dh);
                let qh = tape.slice_cols(q, s, e)?;
                let qh = tape.reshape(qh, &[b, l, dh])?;
                let kh = tape.slice_cols(k, s, e)?;
                let kh = tape.reshape(kh, &[b, l, dh])?;
                let kt = tape.transpose(kh)?;
                let vh = tape.slice_cols(v, s, e)?;
                let vh = tape.reshape(vh, &[b, l, dh])?;
                let scores = tape.batch_matmul(qh, kt)?;
                let scores = tape.scale(scores, inv_sqrt)?;
                let attn = tape.softmax(scores)?;
                ctx.attention.push(attn);
                let out = tape.batch_matmul(attn, vh)?;
                heads.push(tape.reshape(out, &[b * l, dh])?);
            }
            let cat = tape.concat_cols(&heads)?;
            let o = self.linear(tape, ctx, base + 3, cat, opts)?;
            let r = tape.add(h, o)?;
            h = self.affine_norm(tape, ctx, r, layer, "ln1")?;
            let f = self.linear(tape, ctx, base + 4, h, opts)?;
            let f = tape.gelu(f)?;
            let f = self.linear(tape, ctx, base + 5, f, opts)?;
            let r = tape.add(h, f)?;
            h = self.affine_norm(tape, ctx, r, layer, "ln2")?;
        }
        let h = tape.reshape(h, &[b, l, d])?;
        let pooled = tape.mean_axis1(h)?;
        let hw = self.extra(ctx, "head.weight");
        let hb = self.extra(ctx, "head.bias");
        let logits = tape.matmul(pooled, hw)?;
        tape.add(logits, hb)
    }

    fn affine_norm(&self, tape: &mut Tape, ctx: &Ctx, x: Var, layer: usize, norm: &str) -> Result<Var> {
        let n = tape.layer_norm(x)?;
        let g = self.extra(ctx, &format!("layer{layer}.{norm}.gain"));
        let b = self.extra(ctx, &format!("layer{layer}.{norm}.bias"));
        let n = tape.mul(n, g)?;
        tape.add(n, b)
    }

    /// Forward and backward; `offsets` are added to the weight images as constants.
    pub fn loss_and_grads(&self, batch: &Batch, offsets: Option<&[Tensor]>) -> Result<Gradients> {
        let pass = self.forward(
            batch,
            ForwardOptions {
                offsets,
                skip_act_quant: false,
            },
        )?;
        let ForwardPass {
            mut tape,
            loss,
            binding,
            ..
        } = pass;
        tape.backward(loss)?;
        let grad_of = |v: Var| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
        };
        Ok(Gradients {
            loss: tape.value(loss).item(),
            weights: binding.weights.iter().map(|&v| grad_of(v)).collect(),
            steps: binding
                .steps
                .iter()
                .map(|s| s.map_or(0.0, |v| grad_of(v).item()))
                .collect(),
            images: binding.images.iter().map(|&v| grad_of(v)).collect(),
        })
    }

    pub fn evaluate(&self, batch: &Batch) -> Result<Evaluation> {
        let pass = self.forward(batch, ForwardOptions::default())?;
        let logits = pass.tape.value(pass.logits);
        let classes = logits.shape()[1];
        let correct = logits
            .data()
            .chunks(classes)
            .zip(&batch.y)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
        Ok(Evaluation {
            loss: pass.tape.value(pass.loss).item(),
            accuracy: correct as f64 / batch.len().max(1) as f64,
        })
    }

    pub fn loss(&self, batch: &Batch, offsets: Option<&[Tensor]>) -> Result<f64> {
        let pass = self.forward(
            batch,
            ForwardOptions {
                offsets,
                skip_act_quant: false,
            },
        )?;
        Ok(pass.tape.value(pass.loss).item())
    }

    /// Initializes activation step sizes from the unquantized inputs each
    /// site sees on `batch`.
    pub fn calibrate_activations(&mut self, batch: &Batch) -> Result<()> {
        let pass = self.forward(
            batch,
            ForwardOptions {
                offsets: None,
                skip_act_quant: true,
            },
        )?;
        let samples: Vec<Tensor> = pass.linear_inputs.iter().map(|&v| pass.tape.value(v).clone()).collect();
        for (l, sample) in self.linears.iter_mut().zip(samples) {
            if let Some(a) = &mut l.input_quant {
                a.calibrate(&sample);
            }
        }
        Ok(())
    }

    /// Named tensors in a stable order, for persistence.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for l in &self.linears {
            out.push((format!("{}.weight", l.name), &l.weight.weight));
            out.push((format!("{}.bias", l.name), &l.bias));
        }
        for e in &self.extras {
            out.push((e.name.clone(), &e.value));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for l in &mut self.linears {
            out.push((format!("{}.weight", l.name), &mut l.weight.weight));
            out.push((format!("{}.bias", l.name), &mut l.bias));
        }
        for e in &mut self.extras {
            out.push((e.name.clone(), &mut e.value));
        }
        out
    }
}

struct Ctx {
    binding: Binding,
    w_steps: Vec<Option<Var>>,
    act_steps: Vec<Option<Var>>,
    linear_inputs: Vec<Var>,
    attention: Vec<Var>,
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
