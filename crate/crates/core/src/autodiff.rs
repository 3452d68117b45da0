//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the tape; [`Tape::backward`] replays the
//! nodes in reverse recording order. Custom-gradient nodes carry their own
//! backward closure, which is how straight-through estimators are attached
//! to the rounding and clipping inside the fake quantizer.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_COEFF: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    id: usize,
    tape: u64,
}

/// Backward rule of a custom-gradient node: given the input values and the
/// upstream gradient, returns one gradient per input.
pub type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor) -> Vec<Tensor> + Send>;

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        a: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    L2Norm(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    Reshape(Var),
    Transpose(Var),
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    MeanAxis1(Var),
    Custom {
        inputs: Vec<Var>,
        backward: BackwardFn,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations for one forward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    /// Drops every recorded node and gradient. Handles from before the reset
    /// are invalidated.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`. `None` before
    /// backward or for values that do not require a gradient.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.id {
            return None;
        }
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::DetachedVariable);
        }
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        Ok(())
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.id].requires_grad)
    }

    // ── operations ──────────────────────────────────────────────────────

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(av.data(), bv.data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `[batch, m, k] x [batch, k, n] -> [batch, m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] || av.shape()[2] != bv.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "batch_matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (bs, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm_nn(
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let value = Tensor::new(vec![bs, m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::BatchMatMul(a, b), rg))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let broadcast = if av.shape() == bv.shape() {
            false
        } else if av.rank() >= 1 && &av.shape()[1..] == bv.shape() {
            true
        } else {
            return Err(Error::ShapeMismatch {
                op: name,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        };
        let f = match kind {
            BinaryKind::Add => |x: f64, y: f64| x + y,
            BinaryKind::Sub => |x: f64, y: f64| x - y,
            BinaryKind::Mul => |x: f64, y: f64| x * y,
        };
        let bl = bv.numel().max(1);
        let out: Vec<f64> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv.data()[if broadcast { i % bl } else { i }]))
            .collect();
        let value = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Binary { kind, a, b, broadcast }, rg))
    }

    /// Elementwise sum; `b` may also match `a` without its leading axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Scale(a, c), rg))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::AddScalar(a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Relu(a), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).map(gelu);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Gelu(a), rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let (_, cols) = av.rows_cols();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(cols.max(1)) {
            softmax_in_place(row);
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let (rows, cols) = av.rows_cols();
        if cols == 0 {
            return Err(invalid("layer_norm over an empty axis"));
        }
        let mut xhat = vec![0.0; av.numel()];
        let mut inv_std = vec![0.0; rows];
        for (r, row) in av.data().chunks(cols).enumerate() {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for (c, x) in row.iter().enumerate() {
                xhat[r * cols + c] = (x - mean) * is;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), xhat.clone())?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::LayerNorm { a, xhat, inv_std }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        if av.numel() == 0 {
            return Err(invalid("mean of an empty tensor"));
        }
        let value = Tensor::scalar(av.data().iter().sum::<f64>() / av.numel() as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Mean(a), rg))
    }

    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = Tensor::scalar(self.value(a).l2_norm());
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::L2Norm(a), rg))
    }

    /// Mean softmax cross-entropy of `[n, classes]` logits (or a single
    /// `[classes]` row) against integer labels.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let lv = self.value(logits);
        let (rows, classes) = match lv.rank() {
            1 => (1, lv.shape()[0]),
            2 => (lv.shape()[0], lv.shape()[1]),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "cross_entropy_with_logits",
                    lhs: lv.shape().to_vec(),
                    rhs: vec![labels.len()],
                })
            }
        };
        if rows != labels.len() || rows == 0 {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_with_logits",
                lhs: lv.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        for (row, (z, &label)) in probs.chunks_mut(classes).zip(lv.data().chunks(classes).zip(labels)) {
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - z[label];
            softmax_in_place(row);
        }
        let value = Tensor::scalar(total / rows as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let (batch, r, c) = match *av.shape() {
            [r, c] => (0, r, c),
            [b, r, c] => (b, r, c),
            _ => return Err(invalid(format!("transpose of shape {:?}", av.shape()))),
        };
        let mut out = vec![0.0; av.numel()];
        for bi in 0..batch.max(1) {
            transpose_block(
                &av.data()[bi * r * c..(bi + 1) * r * c],
                r,
                c,
                &mut out[bi * r * c..(bi + 1) * r * c],
            );
        }
        let shape = if batch == 0 { vec![c, r] } else { vec![batch, c, r] };
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        if av.rank() != 2 || start >= end || end > av.shape()[1] {
            return Err(invalid(format!("slice_cols {start}..{end} of shape {:?}", av.shape())));
        }
        let (rows, cols) = (av.shape()[0], av.shape()[1]);
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&av.data()[r * cols + start..r * cols + end]);
        }
        let value = Tensor::new(vec![rows, w], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceCols { a, start }, rg))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(invalid("concat_cols of nothing"));
        }
        for &p in parts {
            self.check(p)?;
        }
        let first = self.value(parts[0]).shape().to_vec();
        if first.len() != 2 {
            return Err(invalid(format!("concat_cols of shape {first:?}")));
        }
        let rows = first[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// `[b, l, d] -> [b, d]`, averaging over the middle axis.
    pub fn mean_axis1(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let [b, l, d] = *av.shape() else {
            return Err(invalid(format!("mean_axis1 of shape {:?}", av.shape())));
        };
        if l == 0 {
            return Err(invalid("mean_axis1 over an empty axis"));
        }
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            for li in 0..l {
                for di in 0..d {
                    out[bi * d + di] += av.data()[(bi * l + li) * d + di];
                }
            }
        }
        for x in &mut out {
            *x /= l as f64;
        }
        let value = Tensor::new(vec![b, d], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::MeanAxis1(a), rg))
    }

    /// Records a node whose forward value is `forward(inputs)` and whose
    /// backward pass calls `backward(inputs, upstream)` verbatim.
    ///
    /// The backward closure is dry-run once with an all-ones upstream so that
    /// gradient shape errors surface here rather than during backward.
    pub fn custom_grad<F, B>(&mut self, inputs: &[Var], forward: F, backward: B) -> Result<Var>
    where
        F: FnOnce(&[&Tensor]) -> Result<Tensor>,
        B: Fn(&[&Tensor], &Tensor) -> Vec<Tensor> + Send + 'static,
    {
        for &v in inputs {
            self.check(v)?;
        }
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = forward(&values)?;
        let probe = Tensor::full(out.shape(), 1.0);
        let grads = backward(&values, &probe);
        if grads.len() != inputs.len() {
            return Err(Error::CustomGrad(format!(
                "backward returned {} gradients for {} inputs",
                grads.len(),
                inputs.len()
            )));
        }
        for (g, x) in grads.iter().zip(&values) {
            if g.shape() != x.shape() {
                return Err(Error::CustomGrad(format!(
                    "gradient shape {:?} does not match input shape {:?}",
                    g.shape(),
                    x.shape()
                )));
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            out,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
            rg,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Populates gradients of `loss` with respect to every recorded value
    /// that requires one. May run once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.tape != self.id || loss.id >= self.nodes.len() {
            return Err(Error::DetachedVariable);
        }
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lv = &self.nodes[loss.id].value;
        if lv.rank() != 0 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.backward_done = true;
        self.grads = self
            .nodes
            .iter()
            .map(|n| n.requires_grad.then(|| Tensor::zeros(n.value.shape())))
            .collect();
        if !self.nodes[loss.id].requires_grad {
            return Ok(());
        }
        self.grads[loss.id] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.id).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (lo, hi) = self.grads.split_at_mut(i);
            let g = hi[0].as_ref().expect("requires_grad node has a buffer");
            let node = &self.nodes[i];
            propagate(&self.nodes, node, g, lo);
        }
        Ok(())
    }
}

fn slot(lo: &mut [Option<Tensor>], v: Var) -> Option<&mut [f64]> {
    lo[v.id].as_mut().map(|t| t.data_mut())
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, lo: &mut [Option<Tensor>]) {
    let gd = g.data();
    let val = |v: Var| &nodes[v.id].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if let Some(ga) = slot(lo, *a) {
                gemm_nt(gd, bv.data(), m, n, k, ga);
            }
            if let Some(gb) = slot(lo, *b) {
                gemm_tn(av.data(), gd, m, k, n, gb);
            }
        }
        Op::BatchMatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (bs, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
            if let Some(ga) = slot(lo, *a) {
                for i in 0..bs {
                    gemm_nt(
                        &gd[i * m * n..(i + 1) * m * n],
                        &bv.data()[i * k * n..(i + 1) * k * n],
                        m,
                        n,
                        k,
                        &mut ga[i * m * k..(i + 1) * m * k],
                    );
                }
            }
            if let Some(gb) = slot(lo, *b) {
                for i in 0..bs {
                    gemm_tn(
                        &av.data()[i * m * k..(i + 1) * m * k],
                        &gd[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                        &mut gb[i * k * n..(i + 1) * k * n],
                    );
                }
            }
        }
        Op::Binary { kind, a, b, broadcast } => {
            let (av, bv) = (val(*a), val(*b));
            let bl = bv.numel().max(1);
            let bi = |i: usize| if *broadcast { i % bl } else { i };
            let same = a == b;
            // a and b may alias; compute both contributions before writing.
            let contrib_a: Vec<f64> = match kind {
                BinaryKind::Add | BinaryKind::Sub => gd.to_vec(),
                BinaryKind::Mul => gd.iter().enumerate().map(|(i, g)| g * bv.data()[bi(i)]).collect(),
            };
            let contrib_b: Vec<f64> = match kind {
                BinaryKind::Add => gd.to_vec(),
                BinaryKind::Sub => gd.iter().map(|g| -g).collect(),
                BinaryKind::Mul => gd.iter().zip(av.data()).map(|(g, x)| g * x).collect(),
            };
            if let Some(ga) = slot(lo, *a) {
                for (x, c) in ga.iter_mut().zip(&contrib_a) {
                    *x += c;
                }
            }
            if same {
                if let Some(ga) = slot(lo, *a) {
                    for (x, c) in ga.iter_mut().zip(&contrib_b) {
                        *x += c;
                    }
                }
            } else if let Some(gb) = slot(lo, *b) {
                for (i, c) in contrib_b.iter().enumerate() {
                    gb[bi(i)] += c;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = slot(lo, *a) {
                for (x, g) in ga.iter_mut().zip(gd) {
                    *x += g * c;
                }
            }
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            if let Some(ga) = slot(lo, *a) {
                for (x, g) in ga.iter_mut().zip(gd) {
                    *x += g;
                }
            }
        }
        Op::Relu(a) => {
            let av = val(*a);
            if let Some(ga) = slot(lo, *a) {
                for ((x, g), v) in ga.iter_mut().zip(gd).zip(av.data()) {
                    if *v > 0.0 {
                        *x += g;
                    }
                }
            }
        }
        Op::Gelu(a) => {
            let av = val(*a);
            if let Some(ga) = slot(lo, *a) {
                for ((x, g), v) in ga.iter_mut().zip(gd).zip(av.data()) {
                    *x += g * gelu_grad(*v);
                }
            }
        }
        Op::Softmax(a) => {
            let y = node.value.data();
            let (_, cols) = node.value.rows_cols();
            if let Some(ga) = slot(lo, *a) {
                for ((gar, yr), gr) in ga.chunks_mut(cols).zip(y.chunks(cols)).zip(gd.chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((x, y), g) in gar.iter_mut().zip(yr).zip(gr) {
                        *x += y * (g - dot);
                    }
                }
            }
        }
        Op::LayerNorm { a, xhat, inv_std } => {
            let (_, cols) = node.value.rows_cols();
            let nf = cols as f64;
            if let Some(ga) = slot(lo, *a) {
                for (r, ((gar, xr), gr)) in ga
                    .chunks_mut(cols)
                    .zip(xhat.chunks(cols))
                    .zip(gd.chunks(cols))
                    .enumerate()
                {
                    let mean_g = gr.iter().sum::<f64>() / nf;
                    let mean_gx = gr.iter().zip(xr).map(|(g, x)| g * x).sum::<f64>() / nf;
                    for ((x, xh), g) in gar.iter_mut().zip(xr).zip(gr) {
                        *x += inv_std[r] * (g - mean_g - xh * mean_gx);
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = slot(lo, *a) {
                for x in ga.iter_mut() {
                    *x += gd[0];
                }
            }
        }
        Op::Mean(a) => {
            if let Some(ga) = slot(lo, *a) {
                let n = ga.len() as f64;
                for x in ga.iter_mut() {
                    *x += gd[0] / n;
                }
            }
        }
        Op::L2Norm(a) => {
            let av = val(*a);
            let norm = node.value.item();
            if norm > 0.0 {
                if let Some(ga) = slot(lo, *a) {
                    for (x, v) in ga.iter_mut().zip(av.data()) {
                        *x += gd[0] * v / norm;
                    }
                }
            }
        }
        Op::CrossEntropy { logits, probs, labels } => {
            let rows = labels.len();
            let classes = probs.len() / rows;
            if let Some(ga) = slot(lo, *logits) {
                let s = gd[0] / rows as f64;
                for (r, &label) in labels.iter().enumerate() {
                    for c in 0..classes {
                        let onehot = if c == label { 1.0 } else { 0.0 };
                        ga[r * classes + c] += s * (probs[r * classes + c] - onehot);
                    }
                }
            }
        }
        Op::Transpose(a) => {
            let s = node.value.shape();
            // output is [.., c, r]; its transpose maps back onto the input
            let (batch, c, r) = match *s {
                [c, r] => (1, c, r),
                [b, c, r] => (b, c, r),
                _ => unreachable!(),
            };
            if let Some(ga) = slot(lo, *a) {
                let mut tmp = vec![0.0; r * c];
                for bi in 0..batch {
                    transpose_block(&gd[bi * r * c..(bi + 1) * r * c], c, r, &mut tmp);
                    for (x, t) in ga[bi * r * c..(bi + 1) * r * c].iter_mut().zip(&tmp) {
                        *x += t;
                    }
                }
            }
        }
        Op::SliceCols { a, start } => {
            let cols = val(*a).shape()[1];
            let (rows, w) = (node.value.shape()[0], node.value.shape()[1]);
            if let Some(ga) = slot(lo, *a) {
                for r in 0..rows {
                    for j in 0..w {
                        ga[r * cols + start + j] += gd[r * w + j];
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let (rows, total) = (node.value.shape()[0], node.value.shape()[1]);
            let mut offset = 0;
            for &p in parts {
                let w = val(p).shape()[1];
                if let Some(gp) = slot(lo, p) {
                    for r in 0..rows {
                        for j in 0..w {
                            gp[r * w + j] += gd[r * total + offset + j];
                        }
                    }
                }
                offset += w;
            }
        }
        Op::MeanAxis1(a) => {
            let [b, l, d] = *val(*a).shape() else { unreachable!() };
            if let Some(ga) = slot(lo, *a) {
                for bi in 0..b {
                    for li in 0..l {
                        for di in 0..d {
                            ga[(bi * l + li) * d + di] += gd[bi * d + di] / l as f64;
                        }
                    }
                }
            }
        }
        Op::Custom { inputs, backward } => {
            let values: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
            let grads = backward(&values, g);
            for (&v, gi) in inputs.iter().zip(grads) {
                if let Some(gv) = slot(lo, v) {
                    for (x, d) in gv.iter_mut().zip(gi.data()) {
                        *x += d;
                    }
                }
            }
        }
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEFF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let t = (c * (x + GELU_COEFF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEFF * x * x)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

fn transpose_block(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`
fn gemm_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
fn gemm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}
