//! Update rules for the four training modes, optimizers and the epoch loop.
//!
//! * `FP` – quantizers bypassed, one pass, weights updated.
//! * `LSQ` – one pass through the fake quantizers, weights and step sizes
//!   updated together from the same gradients.
//! * `Joint` – unperturbed pass for `eps`, perturbed pass, then weights and
//!   step sizes updated together from the perturbed gradients.
//! * `SQuAT` – unperturbed pass for `eps`; perturbed pass updates weights
//!   only; a fresh pass at the new weights updates step sizes only, with
//!   plain SGD descent.

use serde::{Deserialize, Serialize};

use crate::data::{self, Batch, Dataset};
use crate::error::{invalid, Error, Result};
use crate::model::{Gradients, Model};
use crate::sam::{compute_epsilon, perturbed_grads};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrainMode {
    FP,
    LSQ,
    Joint,
    SQuAT,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] = [TrainMode::FP, TrainMode::LSQ, TrainMode::Joint, TrainMode::SQuAT];

    pub fn quantized(self) -> bool {
        self != TrainMode::FP
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::FP => "FP",
            TrainMode::LSQ => "LSQ",
            TrainMode::Joint => "Joint",
            TrainMode::SQuAT => "SQuAT",
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid(format!("unknown training mode {s:?}")))
    }
}

// ── optimizers ──────────────────────────────────────────────────────────

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// One Adam step at (1-based) step `t`.
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64) {
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// `param -= lr * grad`, or heavy-ball momentum when a buffer is given.
pub fn sgd_update(param: &mut [f64], grad: &[f64], lr: f64, momentum: Option<(&mut [f64], f64)>) {
    match momentum {
        None => {
            for (p, g) in param.iter_mut().zip(grad) {
                *p -= lr * g;
            }
        }
        Some((buf, mu)) => {
            for ((p, g), b) in param.iter_mut().zip(grad).zip(buf.iter_mut()) {
                *b = mu * *b + g;
                *p -= lr * *b;
            }
        }
    }
}

/// Per-parameter-group optimizer state. Buffers are allocated on the first
/// step and shaped like the parameters they track.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    momentum: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64) -> Self {
        Self {
            kind,
            lr,
            momentum,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr, 0.0)
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr, 0.0)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// First-moment (Adam) or momentum (SGD) buffers.
    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
            return Err(Error::ShapeMismatch {
                op: "optimizer step",
                lhs: params.iter().map(|p| p.len()).collect(),
                rhs: grads.iter().map(|g| g.len()).collect(),
            });
        }
        let needs_first = self.kind == OptimizerKind::Adam || self.momentum != 0.0;
        if self.first.is_empty() && needs_first {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.second.is_empty() && self.kind == OptimizerKind::Adam {
            self.second = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if needs_first && self.first.len() != params.len() {
            return Err(invalid("optimizer reused for a different parameter group"));
        }
        self.step += 1;
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            match self.kind {
                OptimizerKind::Adam => adam_update(p, g, &mut self.first[i], &mut self.second[i], self.step, self.lr),
                OptimizerKind::Sgd if self.momentum != 0.0 => {
                    sgd_update(p, g, self.lr, Some((&mut self.first[i], self.momentum)))
                }
                OptimizerKind::Sgd => sgd_update(p, g, self.lr, None),
            }
        }
        Ok(())
    }
}

/// Disjoint optimizers for latent weights (plus FP parameters) and step sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers {
    pub weights: Optimizer,
    pub steps: Optimizer,
}

/// `lr0 * (1 + cos(pi * step / total)) / 2`
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let frac = (step.min(total_steps)) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

// ── per-batch updates ───────────────────────────────────────────────────

/// What the per-batch update rules need from a model. [`Model`] is the main
/// implementor; small hand-built objectives can implement it for tracing.
pub trait Trainable {
    /// Loss and gradients, with `offsets` added to the weight images as constants.
    fn loss_and_grads(&self, batch: &Batch, offsets: Option<&[Tensor]>) -> Result<Gradients>;
    fn image_shapes(&self) -> Vec<Vec<usize>>;
    /// Latent weights in the order of `Gradients::weights`.
    fn weight_slices_mut(&mut self) -> Vec<&mut [f64]>;
    /// Step sizes in the order of `Gradients::steps`.
    fn step_sizes_mut(&mut self) -> Vec<&mut f64>;
    fn clamp_step_sizes(&mut self);
    fn is_quantized(&self) -> bool;
    fn quantized_tensor_count(&self) -> usize;
}

impl Trainable for Model {
    fn loss_and_grads(&self, batch: &Batch, offsets: Option<&[Tensor]>) -> Result<Gradients> {
        Model::loss_and_grads(self, batch, offsets)
    }
    fn image_shapes(&self) -> Vec<Vec<usize>> {
        Model::image_shapes(self)
    }
    fn weight_slices_mut(&mut self) -> Vec<&mut [f64]> {
        Model::weight_slices_mut(self)
    }
    fn step_sizes_mut(&mut self) -> Vec<&mut f64> {
        Model::step_sizes_mut(self)
    }
    fn clamp_step_sizes(&mut self) {
        Model::clamp_step_sizes(self)
    }
    fn is_quantized(&self) -> bool {
        Model::is_quantized(self)
    }
    fn quantized_tensor_count(&self) -> usize {
        Model::quantized_tensor_count(self)
    }
}

fn apply_weights<M: Trainable + ?Sized>(model: &mut M, grads: &Gradients, opt: &mut Optimizer) -> Result<()> {
    let g: Vec<&[f64]> = grads.weights.iter().map(Tensor::data).collect();
    opt.step(model.weight_slices_mut(), &g)
}

fn apply_steps<M: Trainable + ?Sized>(model: &mut M, grads: &Gradients, opt: &mut Optimizer) -> Result<()> {
    let g: Vec<&[f64]> = grads.steps.iter().map(std::slice::from_ref).collect();
    let params: Vec<&mut [f64]> = model.step_sizes_mut().into_iter().map(std::slice::from_mut).collect();
    opt.step(params, &g)?;
    model.clamp_step_sizes();
    Ok(())
}

fn require_quantized<M: Trainable + ?Sized>(model: &M) -> Result<()> {
    if !model.is_quantized() || model.quantized_tensor_count() == 0 {
        return Err(invalid("mode needs a model with at least one quantized tensor"));
    }
    Ok(())
}

pub fn train_step_fp<M: Trainable + ?Sized>(model: &mut M, batch: &Batch, opts: &mut Optimizers) -> Result<f64> {
    if model.is_quantized() {
        return Err(invalid("FP step on a model with quantizers enabled"));
    }
    let grads = model.loss_and_grads(batch, None)?;
    apply_weights(model, &grads, &mut opts.weights)?;
    Ok(grads.loss)
}

pub fn train_step_lsq<M: Trainable + ?Sized>(model: &mut M, batch: &Batch, opts: &mut Optimizers) -> Result<f64> {
    require_quantized(model)?;
    let grads = model.loss_and_grads(batch, None)?;
    apply_weights(model, &grads, &mut opts.weights)?;
    apply_steps(model, &grads, &mut opts.steps)?;
    Ok(grads.loss)
}

pub fn train_step_joint<M: Trainable + ?Sized>(
    model: &mut M,
    batch: &Batch,
    rho: f64,
    opts: &mut Optimizers,
) -> Result<f64> {
    require_quantized(model)?;
    let clean = model.loss_and_grads(batch, None)?;
    let eps = compute_epsilon(&clean.images, rho)?;
    let grads = perturbed_grads(model, batch, &eps)?;
    apply_weights(model, &grads, &mut opts.weights)?;
    apply_steps(model, &grads, &mut opts.steps)?;
    Ok(clean.loss)
}

pub fn train_step_squat<M: Trainable + ?Sized>(
    model: &mut M,
    batch: &Batch,
    rho: f64,
    opt_w: &mut Optimizer,
    opt_s: &mut Optimizer,
) -> Result<f64> {
    require_quantized(model)?;
    let clean = model.loss_and_grads(batch, None)?;
    let eps = compute_epsilon(&clean.images, rho)?;
    let perturbed = perturbed_grads(model, batch, &eps)?;
    apply_weights(model, &perturbed, opt_w)?;
    let fresh = model.loss_and_grads(batch, None)?;
    apply_steps(model, &fresh, opt_s)?;
    Ok(clean.loss)
}

pub fn train_step<M: Trainable + ?Sized>(
    mode: TrainMode,
    model: &mut M,
    batch: &Batch,
    rho: f64,
    opts: &mut Optimizers,
) -> Result<f64> {
    match mode {
        TrainMode::FP => train_step_fp(model, batch, opts),
        TrainMode::LSQ => train_step_lsq(model, batch, opts),
        TrainMode::Joint => train_step_joint(model, batch, rho, opts),
        TrainMode::SQuAT => train_step_squat(model, batch, rho, &mut opts.weights, &mut opts.steps),
    }
}

// ── epoch loop ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Diverged,
    Crashed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub run_id: String,
    pub mode: TrainMode,
    pub rho: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr_w: f64,
    pub lr_s: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Optimizers for `mode`. SQuAT always updates step sizes with plain SGD.
    pub fn optimizers(&self) -> Optimizers {
        let steps = match self.mode {
            TrainMode::SQuAT => Optimizer::sgd(self.lr_s),
            _ => Optimizer::new(self.optimizer, self.lr_s, self.momentum),
        };
        Optimizers {
            weights: Optimizer::new(self.optimizer, self.lr_w, self.momentum),
            steps,
        }
    }
}

/// One line of the metrics log. Non-finite values serialize as `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub mode: TrainMode,
    pub bits_w: u32,
    pub bits_a: u32,
    pub rho: f64,
    pub seed: u64,
    pub epoch: usize,
    pub step: usize,
    pub train_loss: Option<f64>,
    pub eval_loss: Option<f64>,
    pub eval_acc: Option<f64>,
    pub lr_w: f64,
    pub lr_s: f64,
    pub status: RunStatus,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub records: Vec<MetricsRecord>,
    pub status: RunStatus,
    pub steps: usize,
}

impl FitOutcome {
    pub fn final_eval(&self) -> Option<&MetricsRecord> {
        self.records.iter().rev().find(|r| r.eval_acc.is_some())
    }
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Runs `cfg.epochs` epochs over `data.train`, evaluating on `data.eval`
/// (or the training rows when there is no eval split) after every epoch.
/// Each record is passed to `sink` as soon as it is produced.
pub fn fit(
    cfg: &TrainConfig,
    model: &mut Model,
    data: &Dataset,
    mut sink: impl FnMut(&MetricsRecord) -> Result<()>,
) -> Result<FitOutcome> {
    if cfg.batch_size == 0 {
        return Err(invalid("batch_size must be positive"));
    }
    if data.train.is_empty() {
        return Err(invalid("empty training split"));
    }
    model.set_mode(cfg.mode);
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let eval_batch = if data.eval.is_empty() {
        data.train_batch()
    } else {
        data.eval_batch()
    };
    let (bits_w, bits_a) = if cfg.mode.quantized() {
        (model.settings().bits_w, model.settings().bits_a)
    } else {
        (32, 32)
    };
    let mut opts = cfg.optimizers();
    let mut records = Vec::new();
    let mut step = 0usize;
    let mut status = RunStatus::Ok;

    let mut record = |epoch, step, train_loss: f64, eval: Option<(f64, f64)>, lr: (f64, f64), status| {
        let r = MetricsRecord {
            run_id: cfg.run_id.clone(),
            mode: cfg.mode,
            bits_w,
            bits_a,
            rho: cfg.rho,
            seed: cfg.seed,
            epoch,
            step,
            train_loss: finite(train_loss),
            eval_loss: eval.and_then(|e| finite(e.0)),
            eval_acc: eval.and_then(|e| finite(e.1)),
            lr_w: lr.0,
            lr_s: lr.1,
            status,
        };
        sink(&r)?;
        records.push(r);
        Ok::<(), Error>(())
    };

    'epochs: for epoch in 0..cfg.epochs {
        let batches = data::batches(data, &data.train, cfg.batch_size, cfg.seed, epoch as u64);
        if epoch == 0 && model.is_quantized() {
            model.calibrate_activations(&batches[0])?;
        }
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in &batches {
            opts.weights.set_lr(cosine_lr(step, total, cfg.lr_w));
            opts.steps.set_lr(cosine_lr(step, total, cfg.lr_s));
            let outcome = train_step(cfg.mode, model, batch, cfg.rho, &mut opts);
            step += 1;
            let loss = match outcome {
                Ok(l) => l,
                Err(Error::NonFinite(_)) => f64::NAN,
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || !model.all_finite() {
                status = RunStatus::Diverged;
                let lr = (opts.weights.lr(), opts.steps.lr());
                record(epoch + 1, step, loss, None, lr, status)?;
                break 'epochs;
            }
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let eval = match model.evaluate(&eval_batch) {
            Ok(e) => (e.loss, e.accuracy),
            Err(Error::NonFinite(_)) => (f64::NAN, f64::NAN),
            Err(e) => return Err(e),
        };
        let lr = (opts.weights.lr(), opts.steps.lr());
        if !eval.0.is_finite() {
            status = RunStatus::Diverged;
        }
        record(epoch + 1, step, loss_sum / seen.max(1) as f64, Some(eval), lr, status)?;
        if status != RunStatus::Ok {
            break;
        }
    }
    Ok(FitOutcome {
        records,
        status,
        steps: step,
    })
}
