//! Reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A `Graph` is a dynamic tape: every operation appends a node holding the op
//! kind, its input handles and the eagerly computed forward value. `backward`
//! replays the tape in reverse, accumulating vector-Jacobian products.
//!
//! The op set is exactly what the editing stack needs: linear algebra for the
//! LM and hypernetwork, GELU, a numerically stable log-softmax, masked NLL and
//! KL losses, and a squared Frobenius norm for update regularization.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a `Graph`. Only meaningful for the graph that minted it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a binary elementwise op pairs its right operand with the left one.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Broadcast {
    Same,
    /// rhs is 1 x cols, repeated over rows (bias-style).
    Row,
    /// rhs is 1 x 1, repeated everywhere.
    Scalar,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    Neg(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Gelu(Var),
    LogSoftmax(Var),
    SoftmaxRows(Var),
    LayerNorm(Var, f64),
    NllLoss {
        log_probs: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
    KlDiv {
        log_ref: Var,
        log_cur: Var,
        mask: Vec<bool>,
    },
    FrobSq(Var),
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        input: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Var>),
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Dynamic computation tape. Append-only; single-threaded by construction.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Mount a tensor as a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Mount a tensor as a constant (no gradient will be accumulated).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Leaf copy of an existing node's value: the stop-gradient primitive.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated on a node by `backward`, if any.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| {
            Tensor::from_vec(node.value.rows(), node.value.cols(), g.clone())
                .expect("grad shape tracks value shape")
        })
    }

    /// Gradient of a node, treating "never touched by backward" as zero.
    pub fn grad_or_zero(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.rows(), self.nodes[v.0].value.cols()))
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn broadcast_kind(
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    ) -> Result<Broadcast> {
        if lhs == rhs {
            Ok(Broadcast::Same)
        } else if rhs == (1, 1) {
            Ok(Broadcast::Scalar)
        } else if rhs.0 == 1 && rhs.1 == lhs.1 {
            Ok(Broadcast::Row)
        } else {
            Err(Error::dim(op, lhs, rhs))
        }
    }

    fn binary_forward(
        &self,
        a: Var,
        b: Var,
        bc: Broadcast,
        f: impl Fn(f64, f64) -> f64,
    ) -> Tensor {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (rows, cols) = av.shape();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let rhs = match bc {
                    Broadcast::Same => bv.get(r, c),
                    Broadcast::Row => bv.get(0, c),
                    Broadcast::Scalar => bv.get(0, 0),
                };
                out.set(r, c, f(av.get(r, c), rhs));
            }
        }
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = Self::broadcast_kind("add", self.value(a).shape(), self.value(b).shape())?;
        let value = self.binary_forward(a, b, bc, |x, y| x + y);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Add(a, b, bc), value, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = Self::broadcast_kind("sub", self.value(a).shape(), self.value(b).shape())?;
        let value = self.binary_forward(a, b, bc, |x, y| x - y);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Sub(a, b, bc), value, rg))
    }

    pub fn elementwise_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = Self::broadcast_kind("mul", self.value(a).shape(), self.value(b).shape())?;
        let value = self.binary_forward(a, b, bc, |x, y| x * y);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Mul(a, b, bc), value, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        let rg = self.requires(a);
        self.push(Op::Scale(a, factor), value, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let value = self.value(a).scale(-1.0);
        let rg = self.requires(a);
        self.push(Op::Neg(a), value, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).shape();
        let (k2, n) = self.value(b).shape();
        if k != k2 {
            return Err(Error::dim("matmul", (m, k), (k2, n)));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            for p in 0..k {
                let aip = av.get(i, p);
                if aip == 0.0 {
                    continue;
                }
                for j in 0..n {
                    let cur = out.get(i, j);
                    out.set(i, j, cur + aip * bv.get(p, j));
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Matmul(a, b), out, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transposed();
        let rg = self.requires(a);
        self.push(Op::Transpose(a), value, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.requires(a);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.requires(a);
        self.push(Op::Mean(a), Tensor::scalar(s / n), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = av.clone();
        for v in out.data_mut() {
            *v = gelu_scalar(*v);
        }
        let rg = self.requires(a);
        self.push(Op::Gelu(a), out, rg)
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = av.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_z = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for c in 0..cols {
                out.set(r, c, row[c] - log_z);
            }
        }
        let rg = self.requires(a);
        self.push(Op::LogSoftmax(a), out, rg)
    }

    /// Row-wise softmax with max subtraction (attention weights).
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = av.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..cols {
                let e = (row[c] - max).exp();
                out.set(r, c, e);
                z += e;
            }
            for c in 0..cols {
                out.set(r, c, out.get(r, c) / z);
            }
        }
        let rg = self.requires(a);
        self.push(Op::SoftmaxRows(a), out, rg)
    }

    /// Row-wise normalization to zero mean / unit variance. Affine terms are
    /// applied outside via broadcast mul/add.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = av.row(r);
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let sigma = (var + eps).sqrt();
            for c in 0..cols {
                out.set(r, c, (row[c] - mu) / sigma);
            }
        }
        let rg = self.requires(a);
        self.push(Op::LayerNorm(a, eps), out, rg)
    }

    /// Mean negative log-likelihood over unmasked rows.
    /// `targets[r]` is the expected column of row `r`; masked rows are skipped.
    pub fn nll_loss(&mut self, log_probs: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lp = self.value(log_probs);
        let (rows, cols) = lp.shape();
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Contract(format!(
                "nll_loss: {} rows but {} targets / {} mask entries",
                rows,
                targets.len(),
                mask.len()
            )));
        }
        let active = mask.iter().filter(|m| **m).count();
        if active == 0 {
            return Err(Error::Degenerate("nll_loss: all positions masked".into()));
        }
        let mut total = 0.0;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            if targets[r] >= cols {
                return Err(Error::Contract(format!(
                    "nll_loss: target {} out of vocab {}",
                    targets[r], cols
                )));
            }
            total -= lp.get(r, targets[r]);
        }
        let rg = self.requires(log_probs);
        Ok(self.push(
            Op::NllLoss {
                log_probs,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            Tensor::scalar(total / active as f64),
            rg,
        ))
    }

    /// Mean over unmasked rows of KL(p_ref || p_cur), inputs as log-probs.
    /// The reference side is treated as a constant: no gradient flows into it.
    pub fn kl_divergence(&mut self, log_ref: Var, log_cur: Var, mask: &[bool]) -> Result<Var> {
        let (r_shape, c_shape) = (self.value(log_ref).shape(), self.value(log_cur).shape());
        if r_shape != c_shape {
            return Err(Error::dim("kl_divergence", r_shape, c_shape));
        }
        if mask.len() != r_shape.0 {
            return Err(Error::Contract(format!(
                "kl_divergence: {} rows but {} mask entries",
                r_shape.0,
                mask.len()
            )));
        }
        let active = mask.iter().filter(|m| **m).count();
        if active == 0 {
            return Err(Error::Degenerate("kl_divergence: all rows masked".into()));
        }
        let refs = self.value(log_ref);
        let curs = self.value(log_cur);
        let mut total = 0.0;
        for r in 0..r_shape.0 {
            if !mask[r] {
                continue;
            }
            for c in 0..r_shape.1 {
                let lr = refs.get(r, c);
                let p = lr.exp();
                if p > 0.0 {
                    total += p * (lr - curs.get(r, c));
                }
            }
        }
        let rg = self.requires(log_cur);
        Ok(self.push(
            Op::KlDiv {
                log_ref,
                log_cur,
                mask: mask.to_vec(),
            },
            Tensor::scalar(total / active as f64),
            rg,
        ))
    }

    /// Sum of squared entries, as a differentiable scalar.
    pub fn frobenius_norm_sq(&mut self, a: Var) -> Var {
        let s = self.value(a).frob_norm_sq();
        let rg = self.requires(a);
        self.push(Op::FrobSq(a), Tensor::scalar(s), rg)
    }

    /// Row gather: out[i] = table[ids[i]]. Backward scatter-adds into the table.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = t.shape();
        for &id in ids {
            if id >= rows {
                return Err(Error::Contract(format!(
                    "embed: id {} out of table rows {}",
                    id, rows
                )));
            }
        }
        let mut out = Tensor::zeros(ids.len(), cols);
        for (i, &id) in ids.iter().enumerate() {
            for c in 0..cols {
                out.set(i, c, t.get(id, c));
            }
        }
        let rg = self.requires(table);
        Ok(self.push(
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            out,
            rg,
        ))
    }

    pub fn slice_cols(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(input);
        let (rows, cols) = v.shape();
        if start + len > cols {
            return Err(Error::Contract(format!(
                "slice_cols: [{start}, {}) out of {} columns",
                start + len,
                cols
            )));
        }
        let mut out = Tensor::zeros(rows, len);
        for r in 0..rows {
            for c in 0..len {
                out.set(r, c, v.get(r, start + c));
            }
        }
        let rg = self.requires(input);
        Ok(self.push(Op::SliceCols { input, start, len }, out, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols: no parts".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::dim("concat_cols", (rows, cols), v.shape()));
            }
            cols += v.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            for r in 0..rows {
                for c in 0..v.cols() {
                    out.set(r, offset + c, v.get(r, c));
                }
            }
            offset += v.cols();
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, rg))
    }

    /// Reverse pass from a scalar node. Gradients accumulate into `grad` on
    /// every node they reach; repeated calls without `zero_grads` keep adding.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a 1x1 scalar, got {}x{}",
                self.value(loss).rows(),
                self.value(loss).cols()
            )));
        }
        let n = self.nodes.len();
        let mut pass: Vec<Option<Vec<f64>>> = vec![None; n];
        pass[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = pass[idx].take() else { continue };
            self.propagate(idx, &g, &mut pass);
            // keep the per-pass gradient on the node, accumulating
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn accumulate(pass: &mut [Option<Vec<f64>>], target: usize, len: usize, add: impl Fn(&mut [f64])) {
        let slot = pass[target].get_or_insert_with(|| vec![0.0; len]);
        add(slot);
    }

    fn propagate(&self, idx: usize, g: &[f64], pass: &mut [Option<Vec<f64>>]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                let (m, k) = av.shape();
                let n = bv.cols();
                if self.requires(a) {
                    // dA = G . B^T
                    Self::accumulate(pass, a.0, m * k, |da| {
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i * n + j] * bv.get(p, j);
                                }
                                da[i * k + p] += s;
                            }
                        }
                    });
                }
                if self.requires(b) {
                    // dB = A^T . G
                    Self::accumulate(pass, b.0, k * n, |db| {
                        for p in 0..k {
                            for j in 0..n {
                                let mut s = 0.0;
                                for i in 0..m {
                                    s += av.get(i, p) * g[i * n + j];
                                }
                                db[p * n + j] += s;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b, bc) => {
                self.binary_backward(a, b, bc, g, pass, 1.0, 1.0, None);
            }
            Op::Sub(a, b, bc) => {
                self.binary_backward(a, b, bc, g, pass, 1.0, -1.0, None);
            }
            Op::Mul(a, b, bc) => {
                self.binary_backward(a, b, bc, g, pass, 1.0, 1.0, Some((a, b)));
            }
            Op::Scale(a, factor) => {
                if self.requires(a) {
                    let len = self.nodes[a.0].value.len();
                    Self::accumulate(pass, a.0, len, |da| {
                        for (d, gv) in da.iter_mut().zip(g) {
                            *d += factor * gv;
                        }
                    });
                }
            }
            Op::Neg(a) => {
                if self.requires(a) {
                    let len = self.nodes[a.0].value.len();
                    Self::accumulate(pass, a.0, len, |da| {
                        for (d, gv) in da.iter_mut().zip(g) {
                            *d -= gv;
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                if self.requires(a) {
                    let (rows, cols) = self.nodes[a.0].value.shape();
                    Self::accumulate(pass, a.0, rows * cols, |da| {
                        // g has shape (cols, rows)
                        for r in 0..rows {
                            for c in 0..cols {
                                da[r * cols + c] += g[c * rows + r];
                            }
                        }
                    });
                }
            }
            Op::Sum(a) => {
                if self.requires(a) {
                    let len = self.nodes[a.0].value.len();
                    let gs = g[0];
                    Self::accumulate(pass, a.0, len, |da| {
                        for d in da.iter_mut() {
                            *d += gs;
                        }
                    });
                }
            }
            Op::Mean(a) => {
                if self.requires(a) {
                    let len = self.nodes[a.0].value.len();
                    let gs = g[0] / len as f64;
                    Self::accumulate(pass, a.0, len, |da| {
                        for d in da.iter_mut() {
                            *d += gs;
                        }
                    });
                }
            }
            Op::Gelu(a) => {
                if self.requires(a) {
                    let av = self.nodes[a.0].value.clone();
                    Self::accumulate(pass, a.0, av.len(), |da| {
                        for (i, d) in da.iter_mut().enumerate() {
                            *d += g[i] * gelu_grad_scalar(av.data()[i]);
                        }
                    });
                }
            }
            Op::LogSoftmax(a) => {
                if self.requires(a) {
                    let out = self.nodes[idx].value.clone();
                    let (rows, cols) = out.shape();
                    Self::accumulate(pass, a.0, rows * cols, |da| {
                        for r in 0..rows {
                            let gsum: f64 = (0..cols).map(|c| g[r * cols + c]).sum();
                            for c in 0..cols {
                                let i = r * cols + c;
                                da[i] += g[i] - out.data()[i].exp() * gsum;
                            }
                        }
                    });
                }
            }
            Op::SoftmaxRows(a) => {
                if self.requires(a) {
                    let out = self.nodes[idx].value.clone();
                    let (rows, cols) = out.shape();
                    Self::accumulate(pass, a.0, rows * cols, |da| {
                        for r in 0..rows {
                            let dot: f64 = (0..cols)
                                .map(|c| g[r * cols + c] * out.get(r, c))
                                .sum();
                            for c in 0..cols {
                                let i = r * cols + c;
                                da[i] += out.get(r, c) * (g[i] - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm(a, eps) => {
                if self.requires(a) {
                    let av = self.nodes[a.0].value.clone();
                    let out = self.nodes[idx].value.clone();
                    let (rows, cols) = av.shape();
                    Self::accumulate(pass, a.0, rows * cols, |da| {
                        for r in 0..rows {
                            let row = av.row(r);
                            let mu = row.iter().sum::<f64>() / cols as f64;
                            let var =
                                row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
                            let sigma = (var + eps).sqrt();
                            let g_mean: f64 =
                                (0..cols).map(|c| g[r * cols + c]).sum::<f64>() / cols as f64;
                            let gy_mean: f64 = (0..cols)
                                .map(|c| g[r * cols + c] * out.get(r, c))
                                .sum::<f64>()
                                / cols as f64;
                            for c in 0..cols {
                                let i = r * cols + c;
                                da[i] += (g[i] - g_mean - out.get(r, c) * gy_mean) / sigma;
                            }
                        }
                    });
                }
            }
            Op::NllLoss {
                log_probs,
                targets,
                mask,
            } => {
                if self.requires(log_probs) {
                    let (rows, cols) = self.nodes[log_probs.0].value.shape();
                    let active = mask.iter().filter(|m| **m).count() as f64;
                    let gs = g[0];
                    Self::accumulate(pass, log_probs.0, rows * cols, |da| {
                        for r in 0..rows {
                            if mask[r] {
                                da[r * cols + targets[r]] -= gs / active;
                            }
                        }
                    });
                }
            }
            Op::KlDiv {
                log_ref,
                log_cur,
                mask,
            } => {
                if self.requires(log_cur) {
                    let refs = self.nodes[log_ref.0].value.clone();
                    let (rows, cols) = refs.shape();
                    let active = mask.iter().filter(|m| **m).count() as f64;
                    let gs = g[0];
                    Self::accumulate(pass, log_cur.0, rows * cols, |da| {
                        for r in 0..rows {
                            if !mask[r] {
                                continue;
                            }
                            for c in 0..cols {
                                da[r * cols + c] -= gs * refs.get(r, c).exp() / active;
                            }
                        }
                    });
                }
            }
            Op::FrobSq(a) => {
                if self.requires(a) {
                    let av = self.nodes[a.0].value.clone();
                    let gs = g[0];
                    Self::accumulate(pass, a.0, av.len(), |da| {
                        for (i, d) in da.iter_mut().enumerate() {
                            *d += 2.0 * gs * av.data()[i];
                        }
                    });
                }
            }
            Op::Embed { table, ids } => {
                if self.requires(table) {
                    let (rows, cols) = self.nodes[table.0].value.shape();
                    Self::accumulate(pass, table.0, rows * cols, |dt| {
                        for (i, &id) in ids.iter().enumerate() {
                            for c in 0..cols {
                                dt[id * cols + c] += g[i * cols + c];
                            }
                        }
                    });
                }
            }
            Op::SliceCols { input, start, len } => {
                if self.requires(input) {
                    let (rows, cols) = self.nodes[input.0].value.shape();
                    Self::accumulate(pass, input.0, rows * cols, |di| {
                        for r in 0..rows {
                            for c in 0..len {
                                di[r * cols + start + c] += g[r * len + c];
                            }
                        }
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let rows = self.nodes[idx].value.rows();
                let total_cols = self.nodes[idx].value.cols();
                let mut offset = 0;
                for p in parts {
                    let pc = self.nodes[p.0].value.cols();
                    if self.requires(p) {
                        let off = offset;
                        Self::accumulate(pass, p.0, rows * pc, |dp| {
                            for r in 0..rows {
                                for c in 0..pc {
                                    dp[r * pc + c] += g[r * total_cols + off + c];
                                }
                            }
                        });
                    }
                    offset += pc;
                }
            }
        }
    }

    fn binary_backward(
        &self,
        a: Var,
        b: Var,
        bc: Broadcast,
        g: &[f64],
        pass: &mut [Option<Vec<f64>>],
        sign_a: f64,
        sign_b: f64,
        mul_operands: Option<(Var, Var)>,
    ) {
        let (rows, cols) = self.nodes[a.0].value.shape();
        if self.requires(a) {
            let bv = mul_operands.map(|(_, b)| self.nodes[b.0].value.clone());
            let bc2 = bc;
            Self::accumulate(pass, a.0, rows * cols, |da| {
                for r in 0..rows {
                    for c in 0..cols {
                        let i = r * cols + c;
                        let factor = match (&bv, bc2) {
                            (None, _) => 1.0,
                            (Some(bt), Broadcast::Same) => bt.get(r, c),
                            (Some(bt), Broadcast::Row) => bt.get(0, c),
                            (Some(bt), Broadcast::Scalar) => bt.get(0, 0),
                        };
                        da[i] += sign_a * factor * g[i];
                    }
                }
            });
        }
        if self.requires(b) {
            let av = mul_operands.map(|(a, _)| self.nodes[a.0].value.clone());
            let blen = self.nodes[b.0].value.len();
            Self::accumulate(pass, b.0, blen, |db| {
                for r in 0..rows {
                    for c in 0..cols {
                        let i = r * cols + c;
                        let factor = match &av {
                            None => 1.0,
                            Some(at) => at.get(r, c),
                        };
                        let target = match bc {
                            Broadcast::Same => i,
                            Broadcast::Row => c,
                            Broadcast::Scalar => 0,
                        };
                        db[target] += sign_b * factor * g[i];
                    }
                }
            });
        }
    }
}
