use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// matrix + vector broadcast over rows
    AddRow(Var, Var),
    /// matrix ⊙ vector broadcast over rows
    MulRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    /// `sqrt(x² + eps) - sqrt(eps)`
    SmoothAbs(Var, f64),
    SoftmaxRows(Var),
    NormalizeRows { input: Var, inv_std: Vec<f64> },
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    RowNorms(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => Vec::new(),
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulRow(a, b) => {
                vec![*a, *b]
            }
            Scale(a, _)
            | Offset(a)
            | Relu(a)
            | Sigmoid(a)
            | Log(a)
            | Clamp(a, _, _)
            | SmoothAbs(a, _)
            | SoftmaxRows(a)
            | Transpose(a)
            | SelectRows(a, _)
            | Sum(a)
            | Mean(a)
            | RowNorms(a) => vec![*a],
            NormalizeRows { input, .. } => vec![*input],
            ConcatCols(parts) => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only operation tape. Nodes are stored in creation order, which is
/// a topological order, so the backward pass is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every trainable leaf of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a trainable leaf. Leaves that did not influence the loss
    /// receive zeros; constants and intermediate nodes return `None`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push(value, op)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = super::matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        v: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        if self.value(v).numel() != cols {
            return Err(Error::Shape {
                op: name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        let va = self.value(a).data();
        let vv = self.value(v).data();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            data.extend(va[i * cols..(i + 1) * cols].iter().zip(vv).map(|(&x, &y)| f(x, y)));
        }
        let value = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(value, op))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, bias, Op::AddRow(a, bias), |x, y| x + y)
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, a: Var, gain: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, gain, Op::MulRow(a, gain), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Differentiable surrogate for `|x|`, exact zero at `x = 0`.
    pub fn smooth_abs(&mut self, a: Var, eps: f64) -> Var {
        let root = eps.sqrt();
        self.unary(a, Op::SmoothAbs(a, eps), |x| (x * x + eps).sqrt() - root)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = super::softmax_rows(self.value(a))?;
        Ok(self.push(value, Op::SoftmaxRows(a)))
    }

    /// Per-row standardization (biased variance, `eps` added before the root).
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        if cols < 2 {
            return Err(Error::contract(format!(
                "row normalization needs at least 2 columns, got {cols}"
            )));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = &src[i * cols..(i + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            data.extend(row.iter().map(|x| (x - mean) * inv));
            inv_std.push(inv);
        }
        let value = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(value, Op::NormalizeRows { input: a, inv_std }))
    }

    /// `normalize_rows(a) ⊙ gain + bias`.
    pub fn layer_norm_rows(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.normalize_rows(a, eps)?;
        let scaled = self.mul_row(n, gain)?;
        self.add_row(scaled, bias)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = super::transpose(self.value(a))?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_cols(&tensors)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(a).select_rows(indices)?;
        Ok(self.push(value, Op::SelectRows(a, indices.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// L2 norm of every row, as a `rows×1` column.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (rows, _) = t.dims2()?;
        let norms = (0..rows)
            .map(|i| t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let value = Tensor::matrix(rows, 1, norms)?;
        Ok(self.push(value, Op::RowNorms(a)))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }

        let out = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if matches!(n.op, Op::Leaf) && n.requires_grad {
                    let data = grads[i].take().unwrap_or_else(|| vec![0.0; n.value.numel()]);
                    Some(Tensor::new(n.value.shape().to_vec(), data).expect("leaf shape"))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.rows(), va.cols());
                let n = vb.cols();
                if let Some(ga) = self.slot(*a, grads) {
                    kernels::matmul_a_bt_acc(g, vb.data(), ga, m, k, n);
                }
                if let Some(gb) = self.slot(*b, grads) {
                    kernels::matmul_at_b_acc(va.data(), g, gb, m, k, n);
                }
            }
            Op::Add(a, b) => {
                self.acc_each(*a, grads, |i| g[i]);
                self.acc_each(*b, grads, |i| g[i]);
            }
            Op::Sub(a, b) => {
                self.acc_each(*a, grads, |i| g[i]);
                self.acc_each(*b, grads, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc_each(*a, grads, |i| g[i] * vb[i]);
                self.acc_each(*b, grads, |i| g[i] * va[i]);
            }
            Op::AddRow(a, v) => {
                let cols = out.cols();
                self.acc_each(*a, grads, |i| g[i]);
                if let Some(gv) = self.slot(*v, grads) {
                    for (i, &gi) in g.iter().enumerate() {
                        gv[i % cols] += gi;
                    }
                }
            }
            Op::MulRow(a, v) => {
                let cols = out.cols();
                let (va, vv) = (self.value(*a).data(), self.value(*v).data());
                self.acc_each(*a, grads, |i| g[i] * vv[i % cols]);
                if let Some(gv) = self.slot(*v, grads) {
                    for (i, &gi) in g.iter().enumerate() {
                        gv[i % cols] += gi * va[i];
                    }
                }
            }
            Op::Scale(a, c) => self.acc_each(*a, grads, |i| g[i] * c),
            Op::Offset(a) => self.acc_each(*a, grads, |i| g[i]),
            Op::Relu(a) => {
                let va = self.value(*a).data();
                self.acc_each(*a, grads, |i| if va[i] > 0.0 { g[i] } else { 0.0 });
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                self.acc_each(*a, grads, |i| g[i] * y[i] * (1.0 - y[i]));
            }
            Op::Log(a) => {
                let va = self.value(*a).data();
                self.acc_each(*a, grads, |i| g[i] / va[i]);
            }
            Op::Clamp(a, lo, hi) => {
                let va = self.value(*a).data();
                self.acc_each(*a, grads, |i| {
                    if va[i] >= *lo && va[i] <= *hi {
                        g[i]
                    } else {
                        0.0
                    }
                });
            }
            Op::SmoothAbs(a, eps) => {
                let va = self.value(*a).data();
                self.acc_each(*a, grads, |i| g[i] * va[i] / (va[i] * va[i] + eps).sqrt());
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = (out.rows(), out.cols());
                let y = out.data();
                if let Some(ga) = self.slot(*a, grads) {
                    for r in 0..m {
                        let s = r * n..(r + 1) * n;
                        let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(a, b)| a * b).sum();
                        for j in s {
                            ga[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::NormalizeRows { input, inv_std } => {
                let (m, n) = (out.rows(), out.cols());
                let y = out.data();
                if let Some(ga) = self.slot(*input, grads) {
                    for r in 0..m {
                        let s = r * n..(r + 1) * n;
                        let mean_g = g[s.clone()].iter().sum::<f64>() / n as f64;
                        let mean_gy = g[s.clone()]
                            .iter()
                            .zip(&y[s.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / n as f64;
                        for j in s {
                            ga[j] += inv_std[r] * (g[j] - mean_g - y[j] * mean_gy);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (out.rows(), out.cols());
                // out is m×n, input is n×m
                if let Some(ga) = self.slot(*a, grads) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[j * m + i] += g[i * n + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, cols) = (out.rows(), out.cols());
                let mut start = 0;
                for p in parts {
                    let pc = self.value(*p).cols();
                    if let Some(gp) = self.slot(*p, grads) {
                        for i in 0..rows {
                            for j in 0..pc {
                                gp[i * pc + j] += g[i * cols + start + j];
                            }
                        }
                    }
                    start += pc;
                }
            }
            Op::SelectRows(a, indices) => {
                let cols = out.cols();
                if let Some(ga) = self.slot(*a, grads) {
                    for (r, &src) in indices.iter().enumerate() {
                        for j in 0..cols {
                            ga[src * cols + j] += g[r * cols + j];
                        }
                    }
                }
            }
            Op::Sum(a) => self.acc_each(*a, grads, |_| g[0]),
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                self.acc_each(*a, grads, |_| g[0] / n);
            }
            Op::RowNorms(a) => {
                let va = self.value(*a);
                let cols = va.cols();
                let norms = out.data();
                let src = va.data();
                if let Some(ga) = self.slot(*a, grads) {
                    for (r, &nr) in norms.iter().enumerate() {
                        if nr == 0.0 {
                            continue;
                        }
                        for j in 0..cols {
                            ga[r * cols + j] += g[r] * src[r * cols + j] / nr;
                        }
                    }
                }
            }
        }
    }

    /// Gradient accumulator for `v`, or `None` when `v` is not differentiable.
    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> Option<&'g mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(
            grads[v.0]
                .get_or_insert_with(|| vec![0.0; node.value.numel()])
                .as_mut_slice(),
        )
    }

    fn acc_each(&self, v: Var, grads: &mut [Option<Vec<f64>>], f: impl Fn(usize) -> f64) {
        if let Some(slot) = self.slot(v, grads) {
            for (i, s) in slot.iter_mut().enumerate() {
                *s += f(i);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
