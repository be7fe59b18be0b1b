use std::rc::Rc;

use super::{kernels, matmul_dims, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    GateRow(Var, Var),
    ScaleShift(Var, Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Gather(Var, Rc<[usize]>),
    Concat(Vec<Var>),
    LayerNorm(Var, Vec<f64>),
    Softmax(Var),
    Silu(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Append-only tape. Nodes are stored in creation order, which is a valid
/// topological order; `backward` walks it in reverse exactly once.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, true, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, false, Op::Leaf)
    }

    fn push_raw(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, requires_grad, op))
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .add(self.value(b))
            .map_err(|_| self.shape_err("add", a, b))?;
        self.push("add", out, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .sub(self.value(b))
            .map_err(|_| self.shape_err("sub", a, b))?;
        self.push("sub", out, &[a, b], Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self
            .value(a)
            .zip_map(self.value(b), |x, y| x * y)
            .map_err(|_| self.shape_err("mul", a, b))?;
        self.push("mul", out, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).scale(c);
        self.push("scale", out, &[a], Op::Scale(a, c))
    }

    fn check_row(&self, op: &'static str, x: Var, v: Var) -> Result<()> {
        let vs = self.shape(v);
        if vs.len() != 1 || vs[0] != self.value(x).last_dim() {
            return Err(self.shape_err(op, x, v));
        }
        Ok(())
    }

    /// `x + v` with `v` broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.check_row("add_row", x, v)?;
        let (xv, vv) = (self.value(x), self.value(v));
        let n = vv.numel();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(vv.data()) {
                *o += b;
            }
        }
        self.push("add_row", out, &[x, v], Op::AddRow(x, v))
    }

    /// `x ⊙ v` with `v` broadcast over rows (residual gate).
    pub fn gate_row(&mut self, x: Var, v: Var) -> Result<Var> {
        self.check_row("gate_row", x, v)?;
        let (xv, vv) = (self.value(x), self.value(v));
        let n = vv.numel();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, g) in row.iter_mut().zip(vv.data()) {
                *o *= g;
            }
        }
        self.push("gate_row", out, &[x, v], Op::GateRow(x, v))
    }

    /// `x·(1+γ)+β` with `γ`, `β` broadcast over rows.
    pub fn scale_shift(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check_row("scale_shift", x, gamma)?;
        self.check_row("scale_shift", x, beta)?;
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let n = gv.numel();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for ((o, g), b) in row.iter_mut().zip(gv.data()).zip(bv.data()) {
                *o = *o * (1.0 + g) + b;
            }
        }
        self.push(
            "scale_shift",
            out,
            &[x, gamma, beta],
            Op::ScaleShift(x, gamma, beta),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, &[a, b], Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let [m, n] = *av.shape() else {
            return Err(TensorError::Contract {
                op: "transpose",
                msg: format!("expected a matrix, got {:?}", av.shape()),
            });
        };
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av.data()[i * n + j];
            }
        }
        let out = Tensor::new(&[n, m], out)?;
        self.push("transpose", out, &[a], Op::Transpose(a))
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`. Covers reshape, slicing and
    /// any fixed permutation; the backward pass scatter-adds.
    pub fn gather(&mut self, x: Var, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.numel()) {
            return Err(TensorError::Contract {
                op: "gather",
                msg: format!("index {bad} out of range for {} elements", xv.numel()),
            });
        }
        let data = index.iter().map(|&i| xv.data()[i]).collect();
        let out = Tensor::new(shape, data)?;
        self.push("gather", out, &[x], Op::Gather(x, index))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        let index: Rc<[usize]> = (0..n).collect();
        self.gather(x, index, shape)
    }

    /// Columns `[start, start+len)` of a matrix, or elements of a vector.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if start + len > n || len == 0 {
            return Err(TensorError::Contract {
                op: "slice_last",
                msg: format!("range {start}..{} outside last axis of {n}", start + len),
            });
        }
        let rows = xv.rows();
        let index: Rc<[usize]> = (0..rows)
            .flat_map(|r| (start..start + len).map(move |c| r * n + c))
            .collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        self.gather(x, index, &shape)
    }

    /// Concatenate along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::Contract {
            op: "concat_last",
            msg: "no inputs".into(),
        })?;
        let lead = self.value(first).shape()[..self.shape(first).len() - 1].to_vec();
        let rows = self.value(first).rows();
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(self.shape_err("concat_last", first, p));
            }
            width += s[s.len() - 1];
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                let pv = self.value(p);
                let w = pv.last_dim();
                data.extend_from_slice(&pv.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(width);
        let out = Tensor::new(&shape, data)?;
        self.push("concat_last", out, parts, Op::Concat(parts.to_vec()))
    }

    /// Normalize every row to zero mean and unit variance. No affine.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::Contract {
                op: "layer_norm",
                msg: format!("eps must be positive, got {eps}"),
            });
        }
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            inv_std.push(r);
        }
        self.push("layer_norm", out, &[x], Op::LayerNorm(x, inv_std))
    }

    /// Row softmax with max subtraction. `mask[j] == false` removes column `j`
    /// from every row (weight exactly zero).
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if let Some(m) = mask {
            if m.len() != n {
                return Err(TensorError::Contract {
                    op: "softmax",
                    msg: format!("mask length {} does not match row width {n}", m.len()),
                });
            }
            if !m.iter().any(|&b| b) {
                return Err(TensorError::Contract {
                    op: "softmax",
                    msg: "mask removes every column".into(),
                });
            }
        }
        let keep = |j: usize| mask.is_none_or(|m| m[j]);
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                *v = if keep(j) { (*v - max).exp() } else { 0.0 };
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push("softmax", out, &[x], Op::Softmax(x))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push("silu", out, &[x], Op::Silu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()));
        self.push("gelu", out, &[x], Op::Gelu(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        self.push("sum", out, &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).mean());
        self.push("mean", out, &[x], Op::Mean(x))
    }

    /// `y = x·W + b` for `x: [T×in]`, `W: [in×out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Populate gradients of the scalar `loss` with respect to every node that
    /// requires one. Gradients from earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = self.grads[idx].take() else {
                continue;
            };
            let contributions = self.local_grads(idx, &dy)?;
            // keep intermediate grads inspectable
            self.grads[idx] = Some(dy);
            for (input, g) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut self.grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, dy: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, dy.to_vec()), (*b, dy.to_vec())],
            Op::Sub(a, b) => vec![(*a, dy.to_vec()), (*b, dy.iter().map(|g| -g).collect())],
            Op::Mul(a, b) => vec![
                (*a, dy.iter().zip(val(*b)).map(|(g, y)| g * y).collect()),
                (*b, dy.iter().zip(val(*a)).map(|(g, x)| g * x).collect()),
            ],
            Op::Scale(a, c) => vec![(*a, dy.iter().map(|g| g * c).collect())],
            Op::AddRow(x, v) => {
                let n = val(*v).len();
                vec![(*x, dy.to_vec()), (*v, column_sums(dy, n))]
            }
            Op::GateRow(x, v) => {
                let (xd, vd) = (val(*x), val(*v));
                let n = vd.len();
                let dx = dy
                    .chunks(n)
                    .flat_map(|row| row.iter().zip(vd).map(|(g, a)| g * a))
                    .collect();
                let prod: Vec<f64> = dy.iter().zip(xd).map(|(g, x)| g * x).collect();
                vec![(*x, dx), (*v, column_sums(&prod, n))]
            }
            Op::ScaleShift(x, gamma, beta) => {
                let (xd, gd) = (val(*x), val(*gamma));
                let n = gd.len();
                let dx = dy
                    .chunks(n)
                    .flat_map(|row| row.iter().zip(gd).map(|(g, s)| g * (1.0 + s)))
                    .collect();
                let prod: Vec<f64> = dy.iter().zip(xd).map(|(g, x)| g * x).collect();
                vec![
                    (*x, dx),
                    (*gamma, column_sums(&prod, n)),
                    (*beta, column_sums(dy, n)),
                ]
            }
            Op::MatMul(a, b) => {
                let (m, k, n) = matmul_dims(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
                let mut grads = Vec::with_capacity(2);
                if rg(*a) {
                    grads.push((*a, kernels::matmul_nt(dy, val(*b), m, n, k)));
                }
                if rg(*b) {
                    grads.push((*b, kernels::matmul_tn(val(*a), dy, m, k, n)));
                }
                grads
            }
            Op::Transpose(a) => {
                let [m, n] = *self.nodes[a.0].value.shape() else {
                    unreachable!("transpose input is a matrix")
                };
                let mut g = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        g[i * n + j] = dy[j * m + i];
                    }
                }
                vec![(*a, g)]
            }
            Op::Gather(x, index) => {
                let mut g = vec![0.0; val(*x).len()];
                for (&i, d) in index.iter().zip(dy) {
                    g[i] += d;
                }
                vec![(*x, g)]
            }
            Op::Concat(parts) => {
                let rows = node.value.rows();
                let width = node.value.last_dim();
                let mut offset = 0;
                let mut grads = Vec::with_capacity(parts.len());
                for p in parts {
                    let w = self.nodes[p.0].value.last_dim();
                    let mut g = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        g.extend_from_slice(&dy[r * width + offset..r * width + offset + w]);
                    }
                    offset += w;
                    grads.push((*p, g));
                }
                grads
            }
            Op::LayerNorm(x, inv_std) => {
                let n = node.value.last_dim();
                let mut g = vec![0.0; dy.len()];
                for (r, &istd) in inv_std.iter().enumerate() {
                    let span = r * n..(r + 1) * n;
                    let (dyr, yr) = (&dy[span.clone()], &y[span.clone()]);
                    let mean_dy = dyr.iter().sum::<f64>() / n as f64;
                    let mean_dyy = dyr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for ((o, d), yy) in g[span].iter_mut().zip(dyr).zip(yr) {
                        *o = istd * (d - mean_dy - yy * mean_dyy);
                    }
                }
                vec![(*x, g)]
            }
            Op::Softmax(x) => {
                let n = node.value.last_dim();
                let mut g = vec![0.0; dy.len()];
                for ((gr, dyr), yr) in g.chunks_mut(n).zip(dy.chunks(n)).zip(y.chunks(n)) {
                    let dot: f64 = dyr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, d), yy) in gr.iter_mut().zip(dyr).zip(yr) {
                        *o = yy * (d - dot);
                    }
                }
                vec![(*x, g)]
            }
            Op::Silu(x) => {
                let g = dy
                    .iter()
                    .zip(val(*x))
                    .map(|(d, &v)| {
                        let s = sigmoid(v);
                        d * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                vec![(*x, g)]
            }
            Op::Gelu(x) => {
                let g = dy
                    .iter()
                    .zip(val(*x))
                    .map(|(d, &v)| {
                        let th = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                        let dth = (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                        d * (0.5 * (1.0 + th) + 0.5 * v * dth)
                    })
                    .collect();
                vec![(*x, g)]
            }
            Op::Sum(x) => vec![(*x, vec![dy[0]; val(*x).len()])],
            Op::Mean(x) => {
                let n = val(*x).len();
                vec![(*x, vec![dy[0] / n as f64; n])]
            }
        };
        Ok(out)
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn column_sums(data: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for row in data.chunks(n) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}
