//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on failure.
//!
//! Run with `cargo test -p squat --test acceptance`.

#![allow(
    clippy::if_same_then_else,
    clippy::needless_range_loop,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::type_complexity
)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use serde_json::Value;
use squat::checkpoint::{self, Checkpoint};
use squat::config::ExperimentConfig;
use squat::data::{self, Batch};
use squat::experiment::{self, Summary};
use squat::model::{Gradients, Model, QuantSettings, TinyTransformerConfig};
use squat::parallel::Execution;
use squat::quant::{self, QuantRange};
use squat::rng::Rng;
use squat::sam::{compute_epsilon, perturbed_grads};
use squat::sharpness::{ascend, measure_sharpness, SharpnessParams};
use squat::train::{self, Optimizer, Optimizers, TrainMode, Trainable};
use squat::{Tape, Tensor, Var};

type Verdict = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lib<T>(r: squat::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ── independent scalar oracles ──────────────────────────────────────────

fn oracle_round(x: f64) -> f64 {
    let f = x.floor();
    let d = x - f;
    if d > 0.5 {
        f + 1.0
    } else if d < 0.5 {
        f
    } else if f.rem_euclid(2.0) == 0.0 {
        f
    } else {
        f + 1.0
    }
}

fn oracle_levels(bits: u32, signed: bool) -> (f64, f64) {
    let n = bits as i32;
    if signed {
        (-(2f64.powi(n - 1)), 2f64.powi(n - 1) - 1.0)
    } else {
        (0.0, 2f64.powi(n) - 1.0)
    }
}

fn oracle_q(w: f64, s: f64, lo: f64, hi: f64) -> f64 {
    let r = w / s;
    let c = if r < lo {
        lo
    } else if r > hi {
        hi
    } else {
        r
    };
    oracle_round(c) * s
}

fn ulps(a: f64, b: f64) -> u64 {
    if a == b {
        return 0;
    }
    if a.signum() != b.signum() {
        return u64::MAX;
    }
    (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs()
}

fn grid() -> Vec<f64> {
    (0..=800).map(|i| (i as f64 - 400.0) / 100.0).collect()
}

const STEPS: [f64; 3] = [0.1, 0.25, 1.0];
const BITS: [u32; 4] = [2, 3, 4, 8];

// ── 1 ───────────────────────────────────────────────────────────────────

fn quantizer_oracle() -> Verdict {
    let t0 = Instant::now();
    let w = Tensor::vector(grid());
    let (mut points, mut exact, mut worst) = (0usize, 0usize, 0u64);
    for bits in BITS {
        for signed in [true, false] {
            let (lo, hi) = oracle_levels(bits, signed);
            let range = lib(quant::qrange(bits, signed))?;
            ensure(range.as_tuple() == (lo as i64, hi as i64), || {
                format!("qrange({bits}, {signed}) = {:?}", range.as_tuple())
            })?;
            for s in STEPS {
                let q = lib(quant::quantize_forward(&w, s, range))?;
                for (&x, &y) in w.data().iter().zip(q.data()) {
                    let d = ulps(y, oracle_q(x, s, lo, hi));
                    points += 1;
                    exact += (d == 0) as usize;
                    worst = worst.max(d);
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(worst <= 1, || format!("max divergence {worst} ulp"))?;
    ensure(secs < 5.0, || format!("took {secs:.2}s"))?;
    Ok(format!(
        "{points} points, {exact} bit-exact, max {worst} ulp, {secs:.3}s (limit 1 ulp, 5s)"
    ))
}

// ── 2 ───────────────────────────────────────────────────────────────────

fn step_size_gradient() -> Verdict {
    let t0 = Instant::now();
    let h = 1e-6;
    let (mut inside, mut clipped, mut worst_fd) = (0usize, 0usize, 0f64);
    for bits in BITS {
        for signed in [true, false] {
            let (lo, hi) = oracle_levels(bits, signed);
            let range = lib(quant::qrange(bits, signed))?;
            for s in STEPS {
                for w in grid() {
                    let r = w / s;
                    let got = quant::step_size_grad(w, s, range);
                    if lo < r && r < hi {
                        let symbolic = -w / s + oracle_round(w / s);
                        ensure(got.to_bits() == symbolic.to_bits(), || {
                            format!("in-range w={w} s={s} n={bits}: {got} vs {symbolic}")
                        })?;
                        inside += 1;
                        continue;
                    }
                    let (rp, rm) = (w / (s + h), w / (s - h));
                    let stays = if r >= hi {
                        rp >= hi && rm >= hi
                    } else {
                        rp <= lo && rm <= lo
                    };
                    if !stays {
                        continue;
                    }
                    let fd = (oracle_q(w, s + h, lo, hi) - oracle_q(w, s - h, lo, hi)) / (2.0 * h);
                    let err = (fd - got).abs();
                    ensure(err <= 1e-9, || {
                        format!("clipped w={w} s={s} n={bits}: {got} vs fd {fd}")
                    })?;
                    worst_fd = worst_fd.max(err);
                    clipped += 1;
                }
            }
        }
    }
    let r43 = QuantRange { q_n: -4, q_p: 3 };
    ensure(quant::step_size_grad(10.0, 1.0, r43) == 3.0, || "w=10 branch".into())?;
    ensure(quant::step_size_grad(-10.0, 1.0, r43) == -4.0, || "w=-10 branch".into())?;
    ensure(quant::step_size_grad(2.0, 1.0, r43) == 0.0, || "integer ratio".into())?;
    let secs = t0.elapsed().as_secs_f64();
    ensure(clipped > 1000 && inside > 1000, || "too few samples".into())?;
    ensure(secs < 5.0, || format!("took {secs:.2}s"))?;
    Ok(format!(
        "{inside} in-range exact, {clipped} clipped with max |fd err| {worst_fd:.1e} (limit 1e-9), {secs:.3}s"
    ))
}

// ── 3 ───────────────────────────────────────────────────────────────────

const H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> squat::Result<Var> + 'a;

fn eval_op(inputs: &[Tensor], build: &Build) -> squat::Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

fn gradcheck(inputs: &[Tensor], build: &Build) -> squat::Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        analytic.extend_from_slice(tape.grad(*v).expect("param grad").data());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= H;
            numeric.push((eval_op(&plus, build)? - eval_op(&minus, build)?) / (2.0 * H));
        }
    }
    Ok(rel_err(&analytic, &numeric))
}

fn rand_t(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Values bounded away from zero so relu kinks sit outside the stencil.
fn rand_away(rng: &mut Rng, shape: &[usize]) -> Tensor {
    rand_t(rng, shape).map(|x| if x.abs() < 0.05 { x + 0.1f64.copysign(x) } else { x })
}

fn dim(rng: &mut Rng) -> usize {
    2 + rng.index(3)
}

/// `sum(out * r)` with a fixed random `r`, turning any op into a scalar.
fn project(tape: &mut Tape, out: Var, r: &Tensor) -> squat::Result<Var> {
    let c = tape.constant(r.clone());
    let p = tape.mul(out, c)?;
    tape.sum(p)
}

fn op_cases(rng: &mut Rng) -> Vec<(&'static str, Vec<Tensor>, Box<Build<'static>>)> {
    let (m, k, n, b) = (dim(rng), dim(rng), dim(rng), dim(rng));
    let mut cases: Vec<(&'static str, Vec<Tensor>, Box<Build<'static>>)> = Vec::new();
    macro_rules! case {
        ($name:expr, $inputs:expr, $out_shape:expr, |$t:ident, $v:ident| $body:expr) => {{
            let r = rand_t(rng, &$out_shape);
            cases.push((
                $name,
                $inputs,
                Box::new(move |$t: &mut Tape, $v: &[Var]| {
                    let out = $body?;
                    project($t, out, &r)
                }),
            ));
        }};
    }
    case!(
        "matmul",
        vec![rand_t(rng, &[m, k]), rand_t(rng, &[k, n])],
        [m, n],
        |t, v| t.matmul(v[0], v[1])
    );
    case!(
        "batch_matmul",
        vec![rand_t(rng, &[b, m, k]), rand_t(rng, &[b, k, n])],
        [b, m, n],
        |t, v| t.batch_matmul(v[0], v[1])
    );
    case!(
        "add",
        vec![rand_t(rng, &[m, n]), rand_t(rng, &[m, n])],
        [m, n],
        |t, v| t.add(v[0], v[1])
    );
    case!(
        "add_broadcast",
        vec![rand_t(rng, &[m, n]), rand_t(rng, &[n])],
        [m, n],
        |t, v| t.add(v[0], v[1])
    );
    case!(
        "sub",
        vec![rand_t(rng, &[m, n]), rand_t(rng, &[m, n])],
        [m, n],
        |t, v| t.sub(v[0], v[1])
    );
    case!(
        "mul",
        vec![rand_t(rng, &[m, n]), rand_t(rng, &[m, n])],
        [m, n],
        |t, v| t.mul(v[0], v[1])
    );
    case!(
        "mul_broadcast",
        vec![rand_t(rng, &[b, m, n]), rand_t(rng, &[m, n])],
        [b, m, n],
        |t, v| t.mul(v[0], v[1])
    );
    case!("scale", vec![rand_t(rng, &[m, n])], [m, n], |t, v| t.scale(v[0], -1.7));
    case!("add_scalar", vec![rand_t(rng, &[m, n])], [m, n], |t, v| t
        .add_scalar(v[0], 0.3));
    case!("relu", vec![rand_away(rng, &[m, n])], [m, n], |t, v| t.relu(v[0]));
    case!("gelu", vec![rand_t(rng, &[m, n])], [m, n], |t, v| t.gelu(v[0]));
    case!("softmax", vec![rand_t(rng, &[m, n])], [m, n], |t, v| t.softmax(v[0]));
    case!("layer_norm", vec![rand_t(rng, &[b, m, n])], [b, m, n], |t, v| t
        .layer_norm(v[0]));
    case!("sum", vec![rand_t(rng, &[m, n])], [], |t, v| t.sum(v[0]));
    case!("mean", vec![rand_t(rng, &[m, n])], [], |t, v| t.mean(v[0]));
    case!("l2_norm", vec![rand_t(rng, &[m, n])], [], |t, v| t.l2_norm(v[0]));
    let labels: Vec<usize> = (0..m).map(|_| rng.index(n)).collect();
    case!("cross_entropy", vec![rand_t(rng, &[m, n])], [], |t, v| t
        .cross_entropy_with_logits(v[0], &labels));
    case!("reshape", vec![rand_t(rng, &[m, n])], [n, m], |t, v| t
        .reshape(v[0], &[n, m]));
    case!("transpose", vec![rand_t(rng, &[m, n])], [n, m], |t, v| t
        .transpose(v[0]));
    case!("transpose_3d", vec![rand_t(rng, &[b, m, n])], [b, n, m], |t, v| t
        .transpose(v[0]));
    case!("slice_cols", vec![rand_t(rng, &[m, n + 2])], [m, 2], |t, v| t
        .slice_cols(v[0], 1, 3));
    case!(
        "concat_cols",
        vec![rand_t(rng, &[m, n]), rand_t(rng, &[m, k])],
        [m, n + k],
        |t, v| t.concat_cols(&[v[0], v[1]])
    );
    case!("mean_axis1", vec![rand_t(rng, &[b, m, n])], [b, n], |t, v| t
        .mean_axis1(v[0]));
    cases
}

fn model_gradcheck(model: &mut Model, batch: &Batch) -> squat::Result<f64> {
    let g = model.loss_and_grads(batch, None)?;
    let analytic: Vec<f64> = g.weights.iter().flat_map(|t| t.data().to_vec()).collect();
    let sizes: Vec<usize> = model.weight_slices().iter().map(|s| s.len()).collect();
    let mut numeric = Vec::with_capacity(analytic.len());
    for (i, &len) in sizes.iter().enumerate() {
        for j in 0..len {
            let orig = model.weight_slices()[i][j];
            model.weight_slices_mut()[i][j] = orig + H;
            let lp = model.loss(batch, None)?;
            model.weight_slices_mut()[i][j] = orig - H;
            let lm = model.loss(batch, None)?;
            model.weight_slices_mut()[i][j] = orig;
            numeric.push((lp - lm) / (2.0 * H));
        }
    }
    Ok(rel_err(&analytic, &numeric))
}

fn random_batch(rng: &mut Rng, rows: usize, dim: usize, classes: usize) -> Batch {
    Batch {
        x: rand_t(rng, &[rows, dim]),
        y: (0..rows).map(|_| rng.index(classes)).collect(),
    }
}

fn autodiff_gradcheck() -> Verdict {
    const INSTANCES: u64 = 10;
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some((_, w)) => *w = w.max(e),
        None => worst.push((name, e)),
    };
    for seed in 0..INSTANCES {
        let mut rng = Rng::keyed(seed, 3);
        for (name, inputs, build) in op_cases(&mut rng) {
            record(name, lib(gradcheck(&inputs, &*build))?);
        }
        let mut mlp = lib(Model::mlp(&[3, 8, 8, 3], QuantSettings::new(2, 8), TrainMode::FP, seed))?;
        let batch = random_batch(&mut rng, 6, 3, 3);
        record("fp_mlp", lib(model_gradcheck(&mut mlp, &batch))?);
        let cfg = TinyTransformerConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            seq_len: 3,
            classes: 3,
        };
        let mut tf = lib(Model::tiny_transformer(
            &cfg,
            QuantSettings::new(2, 8),
            TrainMode::FP,
            seed,
        ))?;
        let batch = random_batch(&mut rng, 4, 3, 3);
        record("fp_transformer", lib(model_gradcheck(&mut tf, &batch))?);
    }
    let (name, max) = worst
        .iter()
        .cloned()
        .fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let failing: Vec<String> = worst
        .iter()
        .filter(|(_, e)| !(*e < GRAD_TOL))
        .map(|(n, e)| format!("{n}={e:.2e}"))
        .collect();
    ensure(failing.is_empty(), || {
        format!("rel err above {GRAD_TOL}: {}", failing.join(", "))
    })?;
    Ok(format!(
        "{} checks x {INSTANCES} instances, worst rel err {max:.2e} ({name}), h={H}, limit {GRAD_TOL}",
        worst.len()
    ))
}

// ── scalar objective L(q) = (q + eps)^2 for traces ──────────────────────

struct ScalarQuad {
    w: f64,
    s: f64,
    range: QuantRange,
}

impl Trainable for ScalarQuad {
    fn loss_and_grads(&self, _batch: &Batch, offsets: Option<&[Tensor]>) -> squat::Result<Gradients> {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![self.w]));
        let s = tape.param(Tensor::scalar(self.s));
        let q = quant::fake_quantize(&mut tape, w, s, self.range, 1.0)?;
        let mut eff = q;
        if let Some(o) = offsets {
            let c = tape.constant(o[0].clone());
            eff = tape.add(q, c)?;
        }
        let sq = tape.mul(eff, eff)?;
        let loss = tape.sum(sq)?;
        tape.backward(loss)?;
        Ok(Gradients {
            loss: tape.value(loss).item(),
            weights: vec![tape.grad(w).unwrap().clone()],
            steps: vec![tape.grad(s).unwrap().item()],
            images: vec![tape.grad(q).unwrap().clone()],
        })
    }
    fn image_shapes(&self) -> Vec<Vec<usize>> {
        vec![vec![1]]
    }
    fn weight_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![std::slice::from_mut(&mut self.w)]
    }
    fn step_sizes_mut(&mut self) -> Vec<&mut f64> {
        vec![&mut self.s]
    }
    fn clamp_step_sizes(&mut self) {
        self.s = self.s.max(quant::MIN_STEP_SIZE);
    }
    fn is_quantized(&self) -> bool {
        true
    }
    fn quantized_tensor_count(&self) -> usize {
        1
    }
}

fn dummy_batch() -> Batch {
    Batch {
        x: Tensor::zeros(&[1, 1]),
        y: vec![0],
    }
}

// ── 4 ───────────────────────────────────────────────────────────────────

fn model_bits(m: &Model) -> Vec<u64> {
    m.weight_slices()
        .iter()
        .flat_map(|s| s.iter().map(|v| v.to_bits()))
        .chain(m.step_sizes().iter().map(|v| v.to_bits()))
        .collect()
}

fn sam_invariants() -> Verdict {
    let mut rng = Rng::new(44);
    let (mut worst_norm, mut worst_scale) = (0f64, 0f64);
    for _ in 0..100 {
        let count = 1 + rng.index(4);
        let scale = 10f64.powf(rng.uniform_in(-3.0, 3.0));
        let grads: Vec<Tensor> = (0..count)
            .map(|_| {
                let shape = [1 + rng.index(6), 1 + rng.index(6)];
                rand_t(&mut rng, &shape).map(|x| x * scale)
            })
            .collect();
        let rho = rng.uniform_in(0.01, 1.0);
        let eps = lib(compute_epsilon(&grads, rho))?;
        worst_norm = worst_norm.max((eps.norm() - rho).abs() / rho);
        let scaled: Vec<Tensor> = grads.iter().map(|g| g.map(|x| 10.0 * x)).collect();
        let eps10 = lib(compute_epsilon(&scaled, rho))?;
        for (a, b) in eps.buffers.iter().zip(&eps10.buffers) {
            for (x, y) in a.data().iter().zip(b.data()) {
                worst_scale = worst_scale.max((x - y).abs() / rho);
            }
        }
    }
    ensure(worst_norm <= 1e-8, || format!("norm rel err {worst_norm:.2e}"))?;
    ensure(worst_scale <= 1e-12, || {
        format!("scale invariance err {worst_scale:.2e}")
    })?;

    let mut model = lib(Model::mlp(&[2, 16, 16, 2], QuantSettings::new(2, 8), TrainMode::LSQ, 5))?;
    let ds = lib(data::gen_two_moons(64, 0.1, 5))?;
    let batch = ds.train_batch();
    lib(model.calibrate_activations(&batch))?;
    let before = model_bits(&model);
    let snapshot = model.clone();
    let clean = lib(model.loss_and_grads(&batch, None))?;
    let eps = lib(compute_epsilon(&clean.images, 0.1))?;
    let pert = lib(perturbed_grads(&model, &batch, &eps))?;
    ensure(model_bits(&model) == before && model == snapshot, || {
        "model state changed".into()
    })?;
    ensure(pert.images != clean.images, || "perturbation had no effect".into())?;

    let scalar = ScalarQuad {
        w: 1.0,
        s: 1.0,
        range: lib(quant::qrange(2, true))?,
    };
    let eps = squat::sam::Perturbation {
        buffers: vec![Tensor::vector(vec![0.1])],
        rho: 0.1,
        global_norm: 1.0,
    };
    let g = lib(perturbed_grads(&scalar, &dummy_batch(), &eps))?;
    ensure((g.images[0].item() - 2.2).abs() < 1e-15, || {
        format!("scalar perturbed grad {}", g.images[0].item())
    })?;
    Ok(format!(
        "100 sets: max |norm-rho|/rho {worst_norm:.1e} (limit 1e-8), x10 scale drift {worst_scale:.1e}; state restored bitwise; scalar grad 2.2"
    ))
}

// ── 5 ───────────────────────────────────────────────────────────────────

fn first_step(mode: TrainMode, model: &Model, batch: &Batch, rho: f64) -> squat::Result<Model> {
    let mut m = model.clone();
    m.set_mode(mode);
    let mut opts = Optimizers {
        weights: Optimizer::adam(1e-3),
        steps: if mode == TrainMode::SQuAT {
            Optimizer::sgd(1e-3)
        } else {
            Optimizer::adam(1e-3)
        },
    };
    train::train_step(mode, &mut m, batch, rho, &mut opts)?;
    Ok(m)
}

fn weight_bits(m: &Model) -> Vec<u64> {
    m.weight_slices()
        .iter()
        .flat_map(|s| s.iter().map(|v| v.to_bits()))
        .collect()
}

fn mode_reduction() -> Verdict {
    let ds = lib(data::gen_two_moons(200, 0.1, 1))?.with_split(1);
    let batch = ds.train_subset(32);
    let cfg = TinyTransformerConfig {
        layers: 1,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        seq_len: 2,
        classes: 2,
    };
    let mut checked = 0;
    for seed in 0..5 {
        let models = [
            lib(Model::mlp(
                &[2, 64, 64, 2],
                QuantSettings::new(2, 8),
                TrainMode::LSQ,
                seed,
            ))?,
            lib(Model::tiny_transformer(
                &cfg,
                QuantSettings::new(3, 8),
                TrainMode::LSQ,
                seed,
            ))?,
        ];
        for mut init in models {
            lib(init.calibrate_activations(&batch))?;
            let lsq = weight_bits(&lib(first_step(TrainMode::LSQ, &init, &batch, 0.0))?);
            for mode in [TrainMode::Joint, TrainMode::SQuAT] {
                let got = weight_bits(&lib(first_step(mode, &init, &batch, 0.0))?);
                ensure(got == lsq, || format!("{mode} rho=0 differs from LSQ (seed {seed})"))?;
                let moved = weight_bits(&lib(first_step(mode, &init, &batch, 0.1))?);
                ensure(moved != lsq, || format!("{mode} rho=0.1 identical to LSQ"))?;
                checked += 1;
            }
        }
    }
    Ok(format!(
        "{checked} (mode, init) pairs bitwise equal to LSQ at rho=0 (MLP and transformer)"
    ))
}

// ── 6 ───────────────────────────────────────────────────────────────────

/// One SQuAT iteration on L(q) = q^2 by hand: returns (w', s', loss).
fn oracle_squat(w: f64, s: f64, rho: f64, lr: f64, lo: f64, hi: f64) -> (f64, f64, f64) {
    let r = w / s;
    let q = oracle_q(w, s, lo, hi);
    let g = 2.0 * q;
    let eps = if g.abs() < 1e-12 { 0.0 } else { rho * g / g.abs() };
    let gp = 2.0 * (q + eps);
    let gw = if lo < r && r < hi { gp } else { 0.0 };
    let w1 = w - lr * gw;
    let r1 = w1 / s;
    let q1 = oracle_q(w1, s, lo, hi);
    let dq = if r1 <= lo {
        lo
    } else if r1 >= hi {
        hi
    } else {
        oracle_round(r1) - r1
    };
    let s1 = (s - lr * 2.0 * q1 * dq).max(1e-8);
    (w1, s1, q * q)
}

/// One Joint iteration by hand: both parameters from the perturbed pass.
fn oracle_joint(w: f64, s: f64, rho: f64, lr: f64, lo: f64, hi: f64) -> (f64, f64, f64) {
    let r = w / s;
    let q = oracle_q(w, s, lo, hi);
    let g = 2.0 * q;
    let eps = if g.abs() < 1e-12 { 0.0 } else { rho * g / g.abs() };
    let gp = 2.0 * (q + eps);
    let gw = if lo < r && r < hi { gp } else { 0.0 };
    let dq = if r <= lo {
        lo
    } else if r >= hi {
        hi
    } else {
        oracle_round(r) - r
    };
    (w - lr * gw, (s - lr * gp * dq).max(1e-8), q * q)
}

fn algorithm_trace() -> Verdict {
    const TOL: f64 = 1e-12;
    let (rho, lr) = (0.1, 0.1);
    let (lo, hi) = oracle_levels(2, true);
    let range = lib(quant::qrange(2, true))?;
    // Hand-executed: w/s >= q_p throughout, so w is frozen by the clip mask and
    // every step-size phase gives s <- s - lr * 2 * (q_p * s) * q_p = 0.8 s.
    let pinned = [0.4, 0.32, 0.256, 0.2048, 0.16384];
    let mut worst = 0f64;
    let mut traces = 0;
    for (w0, s0, joint) in [
        (0.6, 0.5, false),
        (0.4, 0.5, false),
        (-0.9, 0.5, false),
        (0.6, 0.5, true),
        (0.4, 0.5, true),
    ] {
        let mut model = ScalarQuad { w: w0, s: s0, range };
        let (mut w, mut s) = (w0, s0);
        let mut opts = Optimizers {
            weights: Optimizer::sgd(lr),
            steps: Optimizer::sgd(lr),
        };
        for k in 0..5 {
            let loss = if joint {
                lib(train::train_step_joint(&mut model, &dummy_batch(), rho, &mut opts))?
            } else {
                lib(train::train_step_squat(
                    &mut model,
                    &dummy_batch(),
                    rho,
                    &mut opts.weights,
                    &mut opts.steps,
                ))?
            };
            let (w1, s1, l) = if joint {
                oracle_joint(w, s, rho, lr, lo, hi)
            } else {
                oracle_squat(w, s, rho, lr, lo, hi)
            };
            (w, s) = (w1, s1);
            let err = (model.w - w).abs().max((model.s - s).abs()).max((loss - l).abs());
            ensure(err <= TOL, || {
                format!(
                    "start ({w0}, {s0}) joint={joint} step {k}: ({}, {}) vs oracle ({w}, {s})",
                    model.w, model.s
                )
            })?;
            worst = worst.max(err);
            if (w0, s0, joint) == (0.6, 0.5, false) {
                ensure(w == 0.6 && (s - pinned[k]).abs() <= TOL, || {
                    format!("oracle drifted from hand values at {k}")
                })?;
            }
        }
        traces += 1;
    }
    Ok(format!(
        "{traces} five-step traces (SQuAT x3, Joint x2), max deviation {worst:.1e} (limit 1e-12)"
    ))
}

// ── 7 ───────────────────────────────────────────────────────────────────

fn sharpness_meter() -> Verdict {
    let rho = 0.1;
    let quad = |w: &[f64]| Ok((w[0] * w[0], vec![2.0 * w[0]]));
    let a = lib(ascend(1, rho, 0.5, 60, 3, quad))?;
    let b = lib(ascend(1, rho, 0.5, 60, 3, quad))?;
    let score = a.loss_end - a.loss_start;
    ensure((score - 0.01).abs() <= 1e-4, || format!("score {score}"))?;
    let bound = rho * (1.0 + 1e-9);
    ensure(a.norms.iter().all(|&n| n <= bound), || "left the ball".into())?;
    ensure((score - (b.loss_end - b.loss_start)).abs() <= 1e-12, || {
        "not deterministic".into()
    })?;

    // Same checks on a quantized checkpoint with the default ascent settings.
    let ds = lib(data::gen_two_moons(200, 0.1, 2))?.with_split(2);
    let mut model = lib(Model::mlp(&[2, 16, 16, 2], QuantSettings::new(2, 8), TrainMode::LSQ, 2))?;
    lib(model.calibrate_activations(&ds.train_batch()))?;
    let subset = ds.train_subset(1024);
    let before = model.clone();
    let mut scores = Vec::new();
    for _ in 0..2 {
        let r = lib(measure_sharpness(&model, &subset, SharpnessParams::new(0.05), "m"))?;
        ensure(r.max_offset_norm <= 0.05 * (1.0 + 1e-9), || {
            "model ascent left the ball".into()
        })?;
        ensure(r.score == r.loss_end - r.loss_start, || "score identity".into())?;
        scores.push(r.score);
    }
    ensure(model == before, || "model mutated".into())?;
    ensure((scores[0] - scores[1]).abs() <= 1e-12, || {
        "model score not deterministic".into()
    })?;
    Ok(format!(
        "quadratic score {score:.8} (target 0.01 +- 1e-4, eta 0.5, 60 steps), max offset {:.6}, repeat diff 0; model score {:.3e} repeatable",
        a.norms.iter().cloned().fold(0.0, f64::max),
        scores[0]
    ))
}

// ── 8 ───────────────────────────────────────────────────────────────────

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn desk_scale_replication() -> Verdict {
    let text = std::fs::read_to_string(configs_dir().join("two_moons_w2a8.json")).map_err(|e| e.to_string())?;
    let cfg = lib(ExperimentConfig::from_json_str(&text, &[], None))?;
    ensure(cfg.seeds.len() == 10 && cfg.bits_w == 2 && cfg.bits_a == 8, || {
        "config drifted".into()
    })?;
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    let summary = lib(experiment::run(&cfg, out.path(), Execution::Sequential))?;
    let secs = t0.elapsed().as_secs_f64();
    let lsq = summary.mode(TrainMode::LSQ).ok_or("no LSQ")?;
    let squat = summary.mode(TrainMode::SQuAT).ok_or("no SQuAT")?;
    let acc = |m: &experiment::ModeSummary| m.eval_acc.mean.unwrap_or(f64::NAN);
    let median = |m: &experiment::ModeSummary| {
        m.sharpness
            .iter()
            .find(|s| s.rho == 0.05)
            .and_then(|s| s.stat.median)
            .unwrap_or(f64::NAN)
    };
    let line = format!(
        "acc SQuAT {:.4} vs LSQ {:.4} (need >= LSQ-0.005); median sharpness@0.05 SQuAT {:.5} vs LSQ {:.5}; crashed {}; {secs:.0}s (limit 300s)",
        acc(squat),
        acc(lsq),
        median(squat),
        median(lsq),
        lsq.crashed + squat.crashed
    );
    ensure(acc(squat) >= acc(lsq) - 0.005, || format!("(a) failed: {line}"))?;
    ensure(median(squat) < median(lsq), || format!("(b) failed: {line}"))?;
    ensure(
        lsq.crashed + squat.crashed == 0 && lsq.runs == 10 && squat.runs == 10,
        || format!("(c) failed: {line}"),
    )?;
    ensure(secs <= 300.0, || format!("too slow: {line}"))?;
    Ok(line)
}

// ── 9 ───────────────────────────────────────────────────────────────────

fn run_json(json: &str, dir: &Path) -> Result<Summary, String> {
    let cfg = lib(ExperimentConfig::from_json_str(json, &[], None))?;
    lib(experiment::run(&cfg, dir, Execution::default()))
}

fn joint_vs_alternate_harness() -> Verdict {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dirs: Vec<PathBuf> = ["moons", "blobs", "blobs_joint"]
        .iter()
        .map(|d| root.path().join(d))
        .collect();
    let sharp = r#""sharpness": {"rhos": [0.05], "steps": 5, "subset": 128}"#;
    let blobs =
        r#""dataset": {"kind": "blobs", "n": 300, "centers": [[0, 0], [3, 3], [-3, 3]], "spread": 0.7, "seed": 4}"#;
    run_json(
        &format!(
            r#"{{"name": "two_moons", "modes": ["LSQ", "Joint", "SQuAT"], "seeds": [0, 1], "epochs": 5,
                "dataset": {{"kind": "two_moons", "n": 400}}, {sharp}}}"#
        ),
        &dirs[0],
    )?;
    run_json(
        &format!(r#"{{"name": "blobs", "modes": ["LSQ", "SQuAT"], "seeds": [0, 1], "epochs": 5, {blobs}, {sharp}}}"#),
        &dirs[1],
    )?;
    // A deliberately unstable Joint run: every cell must diverge, not crash.
    let unstable = run_json(
        &format!(
            r#"{{"name": "blobs", "modes": ["Joint"], "seeds": [0, 1], "epochs": 2,
                "optimizer": {{"kind": "sgd", "lr": 1e300}}, {blobs}, {sharp}}}"#
        ),
        &dirs[2],
    )?;
    let joint = &unstable.modes[0];
    ensure(joint.diverged == 2 && joint.crashed == 0, || {
        format!(
            "unstable joint statuses {:?}",
            joint.cells.iter().map(|c| c.status).collect::<Vec<_>>()
        )
    })?;

    let rows = lib(experiment::compare_dirs(&dirs))?;
    let acc_rows: Vec<_> = rows.iter().filter(|r| r.metric == "eval_acc").collect();
    ensure(acc_rows.len() == 6, || format!("{} eval_acc rows", acc_rows.len()))?;
    for task in ["two_moons", "blobs"] {
        for mode in [TrainMode::Joint, TrainMode::SQuAT] {
            ensure(acc_rows.iter().any(|r| r.task == task && r.mode == mode), || {
                format!("missing {task}/{mode}")
            })?;
        }
    }
    let div = rows
        .iter()
        .find(|r| r.task == "blobs" && r.mode == TrainMode::Joint && r.metric == "diverged")
        .ok_or("no diverged row")?;
    ensure(div.value == 2.0, || "divergence not recorded".into())?;

    // Recompute every eval_acc delta from the summary files with a JSON reader.
    let csv = experiment::rows_to_csv(&rows);
    let mut lines = csv.lines();
    ensure(lines.next() == Some(experiment::COMPARE_HEADER), || "header".into())?;
    let mut means: Vec<(String, String, f64)> = Vec::new();
    for d in &dirs {
        let v: Value = serde_json::from_slice(&std::fs::read(d.join("summary.json")).unwrap()).unwrap();
        for m in v["modes"].as_array().unwrap() {
            means.push((
                v["task"].as_str().unwrap().to_string(),
                m["mode"].as_str().unwrap().to_string(),
                m["eval_acc"]["mean"].as_f64().unwrap_or(f64::NAN),
            ));
        }
    }
    let mut recomputed = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f[4] != "eval_acc" {
            continue;
        }
        let value: f64 = f[5].parse().unwrap();
        let delta: f64 = f[6].parse().unwrap();
        let own = means
            .iter()
            .find(|(t, m, _)| t == f[0] && m == f[1])
            .ok_or("row without summary")?
            .2;
        let base = means
            .iter()
            .find(|(t, m, _)| t == f[0] && m == "LSQ")
            .ok_or("no base")?
            .2;
        let same = |a: f64, b: f64| a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan());
        ensure(same(value, own) && same(delta, own - base), || {
            format!("mismatch in {line}")
        })?;
        recomputed += 1;
    }
    print!(
        "{}",
        experiment::rows_to_table(&acc_rows.iter().map(|r| (*r).clone()).collect::<Vec<_>>())
    );
    Ok(format!(
        "{} rows, 2 tasks x 3 modes per metric, blobs/Joint diverged=2 populated, {recomputed} deltas recomputed bit-exact",
        rows.len()
    ))
}

// ── 10 ──────────────────────────────────────────────────────────────────

fn exit_code_for(config: &str, overrides: &[&str]) -> Result<i32, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, config).map_err(|e| e.to_string())?;
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_squat"));
    cmd.arg("run")
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.path().join("out"));
    for o in overrides {
        cmd.arg("--override").arg(o);
    }
    let status = cmd.env_remove("SQUAT_SEED").output().map_err(|e| e.to_string())?.status;
    status.code().ok_or_else(|| "killed by signal".into())
}

fn persistence() -> Verdict {
    let ds = lib(data::gen_two_moons(200, 0.1, 3))?.with_split(3);
    let tcfg = TinyTransformerConfig::new(2, 2);
    let models = [
        lib(Model::mlp(
            &[2, 64, 64, 2],
            QuantSettings::new(2, 8),
            TrainMode::SQuAT,
            3,
        ))?,
        lib(Model::tiny_transformer(
            &tcfg,
            QuantSettings::new(4, 8),
            TrainMode::Joint,
            3,
        ))?,
    ];
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut checked = 0;
    for (i, mut model) in models.into_iter().enumerate() {
        let mode = if i == 0 { TrainMode::SQuAT } else { TrainMode::Joint };
        let mut opts = Optimizers {
            weights: Optimizer::adam(1e-2),
            steps: Optimizer::sgd(1e-2),
        };
        lib(model.calibrate_activations(&ds.train_batch()))?;
        for b in data::batches(&ds, &ds.train, 32, 3, 0).iter().take(3) {
            lib(train::train_step(mode, &mut model, b, 0.1, &mut opts))?;
        }
        let ck = Checkpoint {
            run_id: format!("m{i}"),
            mode,
            seed: 3,
            step: 3,
            model,
        };
        let path = dir.path().join(format!("m{i}.bin"));
        lib(checkpoint::save(&ck, &path))?;
        let back = lib(checkpoint::load(&path))?;
        ensure(model_bits(&back.model) == model_bits(&ck.model) && back == ck, || {
            format!("model {i} not bitwise")
        })?;
        checked += model_bits(&ck.model).len();
    }
    let mut bytes = std::fs::read(dir.path().join("m0.bin")).unwrap();
    bytes[8] = 9;
    ensure(checkpoint::from_bytes(&bytes).is_err(), || {
        "version mismatch accepted".into()
    })?;

    let base = r#""dataset": {"kind": "two_moons", "n": 60}, "epochs": 1, "sharpness": {"rhos": [0.05], "steps": 2}"#;
    let cases = [
        (
            "unknown key",
            format!(r#"{{"mode": "LSQ", "learning_rate": 1, {base}}}"#),
            vec![],
        ),
        ("bits_w=1", format!(r#"{{"mode": "LSQ", "bits_w": 1, {base}}}"#), vec![]),
        ("rho<0", format!(r#"{{"mode": "SQuAT", "rho": -0.1, {base}}}"#), vec![]),
        (
            "override bits_a=1",
            format!(r#"{{"mode": "LSQ", {base}}}"#),
            vec!["bits_a=1"],
        ),
    ];
    let mut codes = Vec::new();
    for (name, cfg, ov) in &cases {
        let code = exit_code_for(cfg, ov)?;
        ensure(code == 2, || format!("{name}: exit {code}"))?;
        codes.push(format!("{name}->{code}"));
    }
    let ok = exit_code_for(&format!(r#"{{"mode": "LSQ", {base}}}"#), &[])?;
    ensure(ok == 0, || format!("valid config exit {ok}"))?;
    Ok(format!(
        "{checked} values round-tripped bitwise, version mismatch rejected; exit codes {} (valid config -> 0)",
        codes.join(", ")
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("quantizer oracle", quantizer_oracle),
        ("step-size gradient", step_size_gradient),
        ("autodiff gradient checks", autodiff_gradcheck),
        ("SAM invariants", sam_invariants),
        ("mode reduction", mode_reduction),
        ("alternating schedule trace", algorithm_trace),
        ("sharpness meter", sharpness_meter),
        ("desk-scale replication", desk_scale_replication),
        ("joint-vs-alternate harness", joint_vs_alternate_harness),
        ("persistence and config rejection", persistence),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let t0 = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("criterion {id:>2} PASS [{name}] {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL [{name}] {detail} ({secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
