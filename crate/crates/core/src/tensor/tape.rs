//! Gradient tape: records primitive operations during the forward pass and
//! replays them in reverse to obtain exact gradients.
//!
//! Every primitive computes its forward value eagerly and stores a local
//! backward rule keyed by the operation variant. Nodes are recorded in
//! creation order, so the tape is topologically sorted by construction and
//! the reverse sweep is a single linear pass. Gradients accumulate (never
//! overwrite) when a value is consumed by several downstream operations.
//!
//! One tape is a single-threaded unit of work; distinct tapes may run in
//! parallel over shared read-only parameter tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// C = A @ B
    Matmul { a: Var, b: Var },
    /// C = Aᵀ (rank 2)
    Transpose { x: Var },
    /// C = A + B (same shape)
    Add { a: Var, b: Var },
    /// C[i, :] = X[i, :] + bias (bias broadcast over rows)
    AddRowBias { x: Var, bias: Var },
    /// C = A ∘ B (elementwise)
    Mul { a: Var, b: Var },
    /// C = c · X
    Scale { x: Var, c: f64 },
    /// C = Σ all elements of X (scalar)
    Sum { x: Var },
    /// C = X[index, :] as a 1×n tensor
    PickRow { x: Var, index: usize },
    /// C = X[:, start..start+len]
    SliceCols { x: Var, start: usize, len: usize },
    /// Stack rank-2 parts vertically.
    ConcatRows { parts: Vec<Var> },
    /// Stack rank-2 parts horizontally.
    ConcatCols { parts: Vec<Var> },
    /// C[p, :] = table[ids[p], :]; backward scatter-adds into the rows.
    EmbeddingLookup { table: Var, ids: Vec<usize> },
    /// Softmax along `axis`, max-subtracted for stability.
    Softmax { x: Var, axis: usize },
    /// Row-wise layer normalization over the last axis with affine params.
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    /// GELU, tanh approximation.
    Gelu { x: Var },
    /// Elementwise tanh.
    Tanh { x: Var },
    /// Mean binary cross-entropy with logits (numerically stable form).
    BceWithLogits { logits: Var, targets: Var },
}

struct Node {
    op: Op,
    value: Tensor,
    /// True when this node can influence some requires_grad leaf.
    needs_grad: bool,
}

/// Ordered record of primitive operations; see module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward pass: one gradient per tape node that needed it.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the differentiated output with respect to `v`.
    ///
    /// Present for every `requires_grad` leaf and every intermediate on a
    /// path to one; `None` for constants.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

// GELU tanh approximation constants.
const GELU_C1: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C2: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C1 * (x + GELU_C2 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C1 * (x + GELU_C2 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C1 * (1.0 + 3.0 * GELU_C2 * x * x)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// out[m×n] += a[m×k] @ b[k×n]
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// out[m×k] += c[m×n] @ b[k×n]ᵀ
fn matmul_nt_acc(c: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let c_row = &c[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let dot: f64 = c_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// out[k×n] += a[m×k]ᵀ @ c[m×n]
fn matmul_tn_acc(a: &[f64], c: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &cv) in out_row.iter_mut().zip(c_row) {
                *o += aip * cv;
            }
        }
    }
}

/// Iterate the (outer, inner) lane decomposition for an axis reduction.
fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let lane = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, lane, inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Forward value of a recorded variable.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Register a tensor as a leaf; gradient availability follows its
    /// `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad;
        self.push(Op::Leaf, t, needs)
    }

    /// Register a constant leaf regardless of the tensor's flag.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.push(Op::Leaf, t, false)
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(Error::Shape {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul { a, b }, Tensor::new(vec![m, n], out)?, needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data()[i * n + j];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Op::Transpose { x }, Tensor::new(vec![n, m], out)?, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, Tensor::new(shape, out)?, needs))
    }

    /// `x` is rank 2, `bias` is rank 1 with length = columns of `x`; the bias
    /// row is added to every row. The only broadcast this engine permits
    /// besides scalar scaling, which keeps the backward rules auditable.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tx.rank() != 2 || tb.rank() != 1 || tb.numel() != tx.cols() {
            return Err(Error::Shape {
                op: "add_row_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let n = tx.cols();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let shape = tx.shape().to_vec();
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Op::AddRowBias { x, bias }, Tensor::new(shape, out)?, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul { a, b }, Tensor::new(shape, out)?, needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|v| c * v).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("scale preserves shape");
        let needs = self.needs(x);
        self.push(Op::Scale { x, c }, value, needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Op::Sum { x }, Tensor::scalar(total), needs)
    }

    /// Row `index` of a rank-2 tensor as a 1×n tensor.
    pub fn pick_row(&mut self, x: Var, index: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || index >= t.rows() {
            return Err(Error::Index {
                what: "pick_row",
                index,
                bound: if t.rank() == 2 { t.rows() } else { 0 },
            });
        }
        let value = Tensor::new(vec![1, t.cols()], t.row(index).to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(Op::PickRow { x, index }, value, needs))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || start + len > t.cols() || len == 0 {
            return Err(Error::Index {
                what: "slice_cols",
                index: start + len,
                bound: if t.rank() == 2 { t.cols() + 1 } else { 0 },
            });
        }
        let (m, n) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&t.data()[i * n + start..i * n + start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Op::SliceCols { x, start, len },
            Tensor::new(vec![m, len], out)?,
            needs,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::validation("concat_rows: no parts"));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.cols() != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: vec![rows, cols],
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            Tensor::new(vec![rows, cols], out)?,
            needs,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::validation("concat_cols: no parts"));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: vec![rows, cols],
                    rhs: t.shape().to_vec(),
                });
            }
            cols += t.cols();
        }
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let t = self.value(p);
                out.extend_from_slice(t.row(i));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            Tensor::new(vec![rows, cols], out)?,
            needs,
        ))
    }

    /// Gather rows of `table` by id. Backward scatter-adds into the rows that
    /// were looked up, accumulating when an id repeats.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::Shape {
                op: "embedding_lookup",
                lhs: t.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (vocab, dim) = (t.rows(), t.cols());
        if ids.is_empty() {
            return Err(Error::validation("embedding_lookup: empty id list"));
        }
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index {
                    what: "embedding_lookup",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(t.row(id));
        }
        let needs = self.needs(table);
        Ok(self.push(
            Op::EmbeddingLookup {
                table,
                ids: ids.to_vec(),
            },
            Tensor::new(vec![ids.len(), dim], out)?,
            needs,
        ))
    }

    /// Numerically stable softmax along `axis`: each slice is shifted by its
    /// maximum before exponentiation, so the outputs are invariant to a
    /// constant shift of the inputs. Entries equal to -inf map to exactly 0.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::Index {
                what: "softmax axis",
                index: axis,
                bound: t.rank(),
            });
        }
        let (outer, lane, inner) = lane_dims(t.shape(), axis);
        let mut out = vec![0.0; t.numel()];
        let data = t.data();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..lane {
                    max = max.max(data[base + l * inner]);
                }
                let mut denom = 0.0;
                for l in 0..lane {
                    let e = (data[base + l * inner] - max).exp();
                    out[base + l * inner] = e;
                    denom += e;
                }
                for l in 0..lane {
                    out[base + l * inner] /= denom;
                }
            }
        }
        let shape = t.shape().to_vec();
        let needs = self.needs(x);
        Ok(self.push(Op::Softmax { x, axis }, Tensor::new(shape, out)?, needs))
    }

    /// Layer normalization over the last axis: per row, subtract the mean and
    /// divide by sqrt(population variance + eps), then apply the affine
    /// gamma/beta. gamma and beta are rank 1 with the normalized length.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = *tx.shape().last().expect("tensor rank >= 1");
        if tg.rank() != 1 || tb.rank() != 1 || tg.numel() != n || tb.numel() != n {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let rows = tx.numel() / n;
        let mut out = vec![0.0; tx.numel()];
        let (g, b) = (tg.data(), tb.data());
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[r * n + j] = g[j] * ((row[j] - mean) * inv) + b[j];
            }
        }
        let shape = tx.shape().to_vec();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Op::LayerNorm { x, gamma, beta, eps },
            Tensor::new(shape, out)?,
            needs,
        ))
    }

    /// GELU with the tanh approximation (standard constants sqrt(2/pi) and
    /// 0.044715); finite-difference checks target this exact function.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|&v| gelu_scalar(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("gelu preserves shape");
        let needs = self.needs(x);
        self.push(Op::Gelu { x }, value, needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|v| v.tanh()).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("tanh preserves shape");
        let needs = self.needs(x);
        self.push(Op::Tanh { x }, value, needs)
    }

    /// Mean over elements of `max(z,0) - z*y + ln(1 + exp(-|z|))`, the
    /// overflow-free form of binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var> {
        let (tz, ty) = (self.value(logits), self.value(targets));
        if tz.shape() != ty.shape() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                lhs: tz.shape().to_vec(),
                rhs: ty.shape().to_vec(),
            });
        }
        let n = tz.numel() as f64;
        let total: f64 = tz
            .data()
            .iter()
            .zip(ty.data())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let needs = self.needs(logits) || self.needs(targets);
        Ok(self.push(
            Op::BceWithLogits { logits, targets },
            Tensor::scalar(total / n),
            needs,
        ))
    }

    /// Reverse sweep from a scalar output. Returns a gradient for every
    /// `requires_grad` leaf (zero-filled when the output does not depend on
    /// it) and for every intermediate that leads to one.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).numel() != 1 {
            return Err(Error::validation(format!(
                "backward requires a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));

        for id in (0..=output.0).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let grad = grads[id].take().expect("checked above");
            self.propagate(id, &grad, &mut grads)?;
            grads[id] = Some(grad);
        }

        // Every requires_grad leaf gets a gradient, even if disconnected.
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }

    /// Add `dc` (gradient at node `id`) into the gradients of its operands.
    fn propagate(&self, id: usize, dc: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        // Allocates the operand gradient on first touch.
        macro_rules! grad_of {
            ($v:expr) => {{
                let vid = $v.0;
                if grads[vid].is_none() {
                    grads[vid] = Some(Tensor::zeros(self.nodes[vid].value.shape().to_vec()));
                }
                grads[vid].as_mut().expect("just allocated")
            }};
        }

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.needs(*a) {
                    matmul_nt_acc(dc.data(), tb.data(), grad_of!(a).data_mut(), m, n, k);
                }
                if self.needs(*b) {
                    matmul_tn_acc(ta.data(), dc.data(), grad_of!(b).data_mut(), m, k, n);
                }
            }
            Op::Transpose { x } => {
                if self.needs(*x) {
                    let (m, n) = (dc.rows(), dc.cols()); // dc is n[x] × m[x]
                    let gx = grad_of!(x).data_mut();
                    for i in 0..m {
                        for j in 0..n {
                            gx[j * m + i] += dc.data()[i * n + j];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.needs(*v) {
                        for (g, &d) in grad_of!(v).data_mut().iter_mut().zip(dc.data()) {
                            *g += d;
                        }
                    }
                }
            }
            Op::AddRowBias { x, bias } => {
                if self.needs(*x) {
                    for (g, &d) in grad_of!(x).data_mut().iter_mut().zip(dc.data()) {
                        *g += d;
                    }
                }
                if self.needs(*bias) {
                    let n = self.value(*bias).numel();
                    let gb = grad_of!(bias).data_mut();
                    for row in dc.data().chunks(n) {
                        for (g, &d) in gb.iter_mut().zip(row) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let tb = self.value(*b).data().to_vec();
                    for ((g, &d), bv) in grad_of!(a).data_mut().iter_mut().zip(dc.data()).zip(tb) {
                        *g += d * bv;
                    }
                }
                if self.needs(*b) {
                    let ta = self.value(*a).data().to_vec();
                    for ((g, &d), av) in grad_of!(b).data_mut().iter_mut().zip(dc.data()).zip(ta) {
                        *g += d * av;
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    for (g, &d) in grad_of!(x).data_mut().iter_mut().zip(dc.data()) {
                        *g += c * d;
                    }
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    let d = dc.item();
                    for g in grad_of!(x).data_mut() {
                        *g += d;
                    }
                }
            }
            Op::PickRow { x, index } => {
                if self.needs(*x) {
                    let n = dc.numel();
                    let gx = grad_of!(x);
                    let row = gx.row_mut(*index);
                    for (g, &d) in row.iter_mut().zip(dc.data()) {
                        *g += d;
                    }
                    let _ = n;
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.needs(*x) {
                    let n = self.value(*x).cols();
                    let gx = grad_of!(x).data_mut();
                    for (i, drow) in dc.data().chunks(*len).enumerate() {
                        let dst = &mut gx[i * n + start..i * n + start + len];
                        for (g, &d) in dst.iter_mut().zip(drow) {
                            *g += d;
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let numel = self.value(p).numel();
                    if self.needs(p) {
                        let gp = grad_of!(&p).data_mut();
                        for (g, &d) in gp.iter_mut().zip(&dc.data()[offset..offset + numel]) {
                            *g += d;
                        }
                    }
                    offset += numel;
                }
            }
            Op::ConcatCols { parts } => {
                let rows = dc.rows();
                let total_cols = dc.cols();
                let mut col_off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.needs(p) {
                        let gp = grad_of!(&p).data_mut();
                        for i in 0..rows {
                            let src = &dc.data()[i * total_cols + col_off..i * total_cols + col_off + pc];
                            let dst = &mut gp[i * pc..(i + 1) * pc];
                            for (g, &d) in dst.iter_mut().zip(src) {
                                *g += d;
                            }
                        }
                    }
                    col_off += pc;
                }
            }
            Op::EmbeddingLookup { table, ids } => {
                if self.needs(*table) {
                    let dim = dc.cols();
                    let gt = grad_of!(table).data_mut();
                    for (pos, &id) in ids.iter().enumerate() {
                        let src = &dc.data()[pos * dim..(pos + 1) * dim];
                        let dst = &mut gt[id * dim..(id + 1) * dim];
                        for (g, &d) in dst.iter_mut().zip(src) {
                            *g += d;
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if self.needs(*x) {
                    let y = &self.nodes[id].value;
                    let (outer, lane, inner) = lane_dims(y.shape(), *axis);
                    let gx = grad_of!(x).data_mut();
                    let (yd, dd) = (y.data(), dc.data());
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * lane * inner + i;
                            let mut s = 0.0;
                            for l in 0..lane {
                                let idx = base + l * inner;
                                s += dd[idx] * yd[idx];
                            }
                            for l in 0..lane {
                                let idx = base + l * inner;
                                gx[idx] += yd[idx] * (dd[idx] - s);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let tx = self.value(*x);
                let tg = self.value(*gamma);
                let n = tg.numel();
                let rows = tx.numel() / n;
                let nf = n as f64;
                for r in 0..rows {
                    let row = &tx.data()[r * n..(r + 1) * n];
                    let drow = &dc.data()[r * n..(r + 1) * n];
                    let mean = row.iter().sum::<f64>() / nf;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    // xhat recomputed from the saved input; cheaper than caching.
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    if self.needs(*gamma) {
                        let gg = grad_of!(gamma).data_mut();
                        for j in 0..n {
                            gg[j] += drow[j] * xhat[j];
                        }
                    }
                    if self.needs(*beta) {
                        let gb = grad_of!(beta).data_mut();
                        for j in 0..n {
                            gb[j] += drow[j];
                        }
                    }
                    if self.needs(*x) {
                        let g = tg.data();
                        let dy_g: Vec<f64> = (0..n).map(|j| drow[j] * g[j]).collect();
                        let mean_dyg = dy_g.iter().sum::<f64>() / nf;
                        let mean_dyg_xhat =
                            dy_g.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / nf;
                        let gx = grad_of!(x).data_mut();
                        for j in 0..n {
                            gx[r * n + j] +=
                                (dy_g[j] - mean_dyg - xhat[j] * mean_dyg_xhat) * inv;
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if self.needs(*x) {
                    let tx = self.value(*x).data().to_vec();
                    for ((g, &d), xv) in grad_of!(x).data_mut().iter_mut().zip(dc.data()).zip(tx) {
                        *g += d * gelu_grad_scalar(xv);
                    }
                }
            }
            Op::Tanh { x } => {
                if self.needs(*x) {
                    let y = self.nodes[id].value.data().to_vec();
                    for ((g, &d), yv) in grad_of!(x).data_mut().iter_mut().zip(dc.data()).zip(y) {
                        *g += d * (1.0 - yv * yv);
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let tz = self.value(*logits);
                let ty = self.value(*targets);
                let n = tz.numel() as f64;
                let d = dc.item();
                if self.needs(*logits) {
                    let gz = grad_of!(logits).data_mut();
                    for (j, (&z, &y)) in tz.data().iter().zip(ty.data()).enumerate() {
                        gz[j] += d * (sigmoid(z) - y) / n;
                    }
                }
                if self.needs(*targets) {
                    let gy = grad_of!(targets).data_mut();
                    for (j, &z) in tz.data().iter().enumerate() {
                        gy[j] += d * (-z) / n;
                    }
                }
            }
        }
        Ok(())
    }
}
