//! Reverse-mode differentiation over a per-pass tape.
//!
//! A [`Graph`] records every operation of one forward pass. Parameter leaves
//! copy their value out of the [`ParamStore`]; [`Graph::backward`] adds
//! gradients back into trainable parameters only. Nodes that cannot reach a
//! trainable parameter are never differentiated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{dot, Tensor};

/// Elementwise nonlinearity used inside the adapter codec. Every kind maps 0 to 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationKind {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl ActivationKind {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Identity => x,
        }
    }

    /// Derivative expressed through input `x` and output `y`. ReLU'(0) = 0.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            ActivationKind::Tanh => 1.0 - y * y,
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Identity => 1.0,
        }
    }
}

impl std::str::FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tanh" => Ok(Self::Tanh),
            "relu" => Ok(Self::Relu),
            "identity" | "none" => Ok(Self::Identity),
            other => Err(Error::Config(format!(
                "unknown activation {other:?} (expected tanh, relu or identity)"
            ))),
        }
    }
}

/// Elementwise activation on a plain tensor, outside any graph.
pub fn activation(x: &Tensor, kind: ActivationKind) -> Tensor {
    x.map(|v| kind.apply(v))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    Linear(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    Activation(Var, ActivationKind),
    Silu(Var),
    RmsNorm(Var, f64),
    Gather(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    CausalSoftmax(Var),
    CrossEntropy(Var, Vec<Option<usize>>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    activation_grad_fault: Option<f64>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test hook: multiplies every activation derivative by `factor` during
    /// backward, producing a deliberately wrong gradient.
    pub fn corrupt_activation_derivative(&mut self, factor: f64) {
        self.activation_grad_fault = Some(factor);
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.value(v).shape() {
            [m, n] => Ok((*m, *n)),
            other => Err(Error::dim(op, other, &[0, 0])),
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value().clone(), Op::Param(id), p.trainable())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Row-major projection `x · Wᵀ` for `x[n×k]`, `W[d×k]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = self.value(x).matmul_nt(self.value(w))?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, Op::Linear(x, w), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    fn row_broadcast(&self, a: Var, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let (n, d) = self.matrix_dims(a, op)?;
        if self.value(v).shape() != [d] {
            return Err(Error::dim(op, self.value(a).shape(), self.value(v).shape()));
        }
        Ok((n, d))
    }

    /// `a[n×d] + v[d]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (_, d) = self.row_broadcast(a, v, "add_row")?;
        let vv = self.value(v).data().to_vec();
        let mut out = self.value(a).clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x += vv[i % d];
        }
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(out, Op::AddRow(a, v), rg))
    }

    /// `a[n×d] ⊙ v[d]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (_, d) = self.row_broadcast(a, v, "mul_row")?;
        let vv = self.value(v).data().to_vec();
        let mut out = self.value(a).clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x *= vv[i % d];
        }
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(out, Op::MulRow(a, v), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Inverted dropout: zero each entry with probability `p`, scale the rest by `1/(1-p)`.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let shape = self.value(a).shape().to_vec();
        let mask_data = (0..self.value(a).len())
            .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
            .collect();
        let mask = Tensor::new(shape, mask_data)?;
        let out = self.value(a).mul(&mask)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::MulConst(a, mask), rg))
    }

    pub fn activation(&mut self, a: Var, kind: ActivationKind) -> Var {
        let out = activation(self.value(a), kind);
        let rg = self.rg(a);
        self.push(out, Op::Activation(a, kind), rg)
    }

    /// `x · sigmoid(x)`, the smooth gate of the MLP block.
    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(out, Op::Silu(a), rg)
    }

    /// Per-row `x / √(mean(x²) + eps)`; the gain is applied separately.
    pub fn rms_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.matrix_dims(a, "rms_norm")?;
        let mut out = self.value(a).clone();
        for i in 0..n {
            let row = &mut out.data_mut()[i * d..(i + 1) * d];
            let r = (row.iter().map(|x| x * x).sum::<f64>() / d as f64 + eps).sqrt();
            row.iter_mut().for_each(|x| *x /= r);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::RmsNorm(a, eps), rg))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.matrix_dims(table, "gather")?;
        let src = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Input(format!("row {id} out of range for table with {rows} rows")));
            }
            data.extend_from_slice(src.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(out, Op::Gather(table, ids.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.matrix_dims(a, "slice_cols")?;
        if start + len > d {
            return Err(Error::dim("slice_cols", &[n, d], &[start, len]));
        }
        let src = self.value(a);
        let data = (0..n)
            .flat_map(|i| src.row(i)[start..start + len].iter().copied())
            .collect();
        let out = Tensor::new(vec![n, len], data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Input("concat of zero tensors".into()))?;
        let (n, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (m, w) = self.matrix_dims(p, "concat_cols")?;
            if m != n {
                return Err(Error::dim("concat_cols", self.value(first).shape(), self.value(p).shape()));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![n, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Row-wise softmax of a square score matrix with entries above the diagonal masked out.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.matrix_dims(a, "causal_softmax")?;
        if n != m {
            return Err(Error::dim("causal_softmax", &[n, m], &[n, n]));
        }
        let mut out = Tensor::zeros(&[n, n]);
        let src = self.value(a);
        for i in 0..n {
            let row = &src.row(i)[..=i];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out.data_mut()[i * n..i * n + i + 1];
            let mut z = 0.0;
            for (o, &x) in o.iter_mut().zip(row) {
                *o = (x - max).exp();
                z += *o;
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::CausalSoftmax(a), rg))
    }

    /// Mean next-token cross-entropy over rows that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (n, v) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::dim("cross_entropy", &[n, v], &[targets.len()]));
        }
        let counted = targets.iter().filter(|t| t.is_some()).count();
        if counted == 0 {
            return Err(Error::Input("cross_entropy with no target positions".into()));
        }
        let src = self.value(logits);
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= v {
                    return Err(Error::Input(format!("target {t} out of range for vocab {v}")));
                }
                let row = src.row(i);
                total += log_sum_exp(row) - row[t];
            }
        }
        let out = Tensor::scalar(total / counted as f64);
        let rg = self.rg(logits);
        Ok(self.push(out, Op::CrossEntropy(logits, targets.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    /// Propagates `d loss` back through the tape and accumulates into the
    /// store's trainable parameters. Frozen parameters are never written.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", self.value(loss).shape(), &[]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads, store)?;
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        store: &mut ParamStore,
    ) -> Result<()> {
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing
                    .data_mut()
                    .iter_mut()
                    .zip(t.data())
                    .for_each(|(e, d)| *e += d),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => store.accumulate_grad(*id, g),
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.matmul_nt(self.value(*b))?);
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).matmul_tn(g)?);
                }
            }
            Op::Linear(x, w) => {
                if self.rg(*x) {
                    acc(*x, g.matmul(self.value(*w))?);
                }
                if self.rg(*w) {
                    acc(*w, g.matmul_tn(self.value(*x))?);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.mul(self.value(*b))?);
                }
                if self.rg(*b) {
                    acc(*b, g.mul(self.value(*a))?);
                }
            }
            Op::AddRow(a, v) => {
                acc(*a, g.clone());
                if self.rg(*v) {
                    acc(*v, column_sums(g)?);
                }
            }
            Op::MulRow(a, v) => {
                let d = self.value(*v).len();
                if self.rg(*a) {
                    let vv = self.value(*v).data();
                    let mut ga = g.clone();
                    ga.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x *= vv[i % d]);
                    acc(*a, ga);
                }
                if self.rg(*v) {
                    acc(*v, column_sums(&g.mul(self.value(*a))?)?);
                }
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c)),
            Op::MulConst(a, mask) => acc(*a, g.mul(mask)?),
            Op::Activation(a, kind) => {
                let fault = self.activation_grad_fault.unwrap_or(1.0);
                let x = self.value(*a).data();
                let y = node.value.data();
                let mut ga = g.clone();
                for (i, d) in ga.data_mut().iter_mut().enumerate() {
                    *d *= kind.derivative(x[i], y[i]) * fault;
                }
                acc(*a, ga);
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let ga = g.zip_with(x, "silu", |gi, xi| {
                    let s = sigmoid(xi);
                    gi * (s + xi * s * (1.0 - s))
                })?;
                acc(*a, ga);
            }
            Op::RmsNorm(a, eps) => {
                let x = self.value(*a);
                let (n, d) = self.matrix_dims(*a, "rms_norm")?;
                let y = &node.value;
                let mut ga = Tensor::zeros(&[n, d]);
                for i in 0..n {
                    let xr = x.row(i);
                    let r = (xr.iter().map(|v| v * v).sum::<f64>() / d as f64 + eps).sqrt();
                    let (gr, yr) = (g.row(i), y.row(i));
                    let proj = dot(gr, yr) / d as f64;
                    let out = &mut ga.data_mut()[i * d..(i + 1) * d];
                    for j in 0..d {
                        out[j] = (gr[j] - yr[j] * proj) / r;
                    }
                }
                acc(*a, ga);
            }
            Op::Gather(table, ids) => {
                let mut gt = Tensor::zeros(self.value(*table).shape());
                let d = gt.shape()[1];
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut gt.data_mut()[id * d..(id + 1) * d];
                    dst.iter_mut().zip(g.row(i)).for_each(|(t, s)| *t += s);
                }
                acc(*table, gt);
            }
            Op::SliceCols(a, start) => {
                let (n, d) = self.matrix_dims(*a, "slice_cols")?;
                let w = g.shape()[1];
                let mut ga = Tensor::zeros(&[n, d]);
                for i in 0..n {
                    ga.data_mut()[i * d + start..i * d + start + w].copy_from_slice(g.row(i));
                }
                acc(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let n = g.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if self.rg(p) {
                        let data = (0..n)
                            .flat_map(|i| g.row(i)[offset..offset + w].iter().copied())
                            .collect();
                        acc(p, Tensor::new(vec![n, w], data)?);
                    }
                    offset += w;
                }
            }
            Op::CausalSoftmax(a) => {
                let p = &node.value;
                let n = p.shape()[0];
                let mut ga = Tensor::zeros(&[n, n]);
                for i in 0..n {
                    let (pr, gr) = (&p.row(i)[..=i], &g.row(i)[..=i]);
                    let inner = dot(pr, gr);
                    let out = &mut ga.data_mut()[i * n..i * n + i + 1];
                    for j in 0..=i {
                        out[j] = pr[j] * (gr[j] - inner);
                    }
                }
                acc(*a, ga);
            }
            Op::CrossEntropy(logits, targets) => {
                let x = self.value(*logits);
                let (n, v) = self.matrix_dims(*logits, "cross_entropy")?;
                let counted = targets.iter().filter(|t| t.is_some()).count() as f64;
                let upstream = g.data()[0] / counted;
                let mut gl = Tensor::zeros(&[n, v]);
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let row = x.row(i);
                    let lse = log_sum_exp(row);
                    let out = &mut gl.data_mut()[i * v..(i + 1) * v];
                    for j in 0..v {
                        out[j] = (row[j] - lse).exp() * upstream;
                    }
                    out[t] -= upstream;
                }
                acc(*logits, gl);
            }
            Op::Sum(a) => acc(*a, Tensor::full(self.value(*a).shape(), g.data()[0])),
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn column_sums(g: &Tensor) -> Result<Tensor> {
    let (n, d) = g.as_matrix_dims()?;
    let mut out = vec![0.0; d];
    for i in 0..n {
        out.iter_mut().zip(g.row(i)).for_each(|(o, x)| *o += x);
    }
    Ok(Tensor::vector(&out))
}
