//! Tape-based reverse-mode differentiation.
//!
//! Every kernel appends one node to the [`Graph`]; [`Graph::backward`] walks the
//! nodes in exact reverse insertion order. A node requires a gradient iff one of
//! its inputs does, so frozen sub-graphs never allocate or accumulate gradients.
//! Reductions accumulate in `f64` regardless of the storage type.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::tensor::{split_axis, Element, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const L2_NORM_EPS: f64 = 1e-12;

/// Worker count for row-parallel kernels, from `DML_THREADS` (default 1).
pub fn kernel_threads() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        std::env::var("DML_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or(1)
    })
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: Vec<f64>,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    L2Normalize {
        x: Var,
        axis: usize,
        norms: Vec<f64>,
        eps: f64,
    },
    Log1pExpSum {
        x: Var,
        mask: Option<Vec<bool>>,
    },
    Sum {
        x: Var,
        axis: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    StopGradient,
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::StopGradient => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddBias(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Reshape(x)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x) => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Slice { x, .. }
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::L2Normalize { x, .. }
            | Op::Log1pExpSum { x, .. }
            | Op::Sum { x, .. }
            | Op::Mean { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

struct Node<E: Element> {
    tensor: Tensor<E>,
    op: Op,
}

/// Ordered record of operations. Insertion order is a topological order.
pub struct Graph<E: Element = f32> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(kernel: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        kernel,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn check_axis(kernel: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::AxisOutOfRange {
            kernel,
            axis,
            rank: shape.len(),
        });
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input tensor.
    pub fn leaf(&mut self, mut tensor: Tensor<E>, requires_grad: bool) -> Var {
        tensor.set_requires_grad(requires_grad);
        self.nodes.push(Node {
            tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<E>) -> Var {
        self.leaf(tensor, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad()
    }

    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.nodes[v.0].tensor.grad()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].tensor.data()[0].as_f64()
    }

    fn push(&mut self, shape: &[usize], data: Vec<E>, op: Op) -> Result<Var> {
        let requires_grad = match op {
            Op::StopGradient | Op::Leaf => false,
            _ => op.inputs().iter().any(|v| self.requires_grad(*v)),
        };
        if cfg!(debug_assertions) {
            let inputs_finite = op.inputs().iter().all(|v| self.value(*v).is_finite());
            debug_assert!(
                !inputs_finite || data.iter().all(|x| x.is_finite()),
                "{op:?} produced a non-finite value from finite inputs"
            );
        }
        let mut tensor = Tensor::new(shape, data)?;
        tensor.set_requires_grad(requires_grad);
        self.nodes.push(Node { tensor, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_forward(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(&[m, n], out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let x = self.value(a).data();
        let mut out = vec![E::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        self.push(&[n, m], out, Op::Transpose(a))
    }

    /// Element-wise sum; `b` may also be a bias over the last axis of `a`
    /// (shape `[n]` or `[1, n]`).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
            return self.push(&sa, out, Op::Add(a, b));
        }
        let n = *sa.last().unwrap();
        let is_bias = (sb.len() == 1 && sb[0] == n) || (sb.len() == 2 && sb[0] == 1 && sb[1] == n);
        if !is_bias {
            return Err(mismatch("add", &sa, &sb));
        }
        let bias = self.value(b).data();
        let out: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bias[i % n])
            .collect();
        self.push(&sa, out, Op::AddBias(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) {
            return Err(mismatch("sub", &sa, self.shape(b)));
        }
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        self.push(&sa, out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa != self.shape(b) {
            return Err(mismatch("mul", &sa, self.shape(b)));
        }
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        self.push(&sa, out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sv = E::from_f64(s);
        let out = self.value(a).data().iter().map(|&x| x * sv).collect();
        self.push(&sa, out, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let cv = E::from_f64(c);
        let out = self.value(a).data().iter().map(|&x| x + cv).collect();
        self.push(&sa, out, Op::AddScalar(a))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidTensor("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(
            &shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, range: std::ops::Range<usize>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_axis("slice", &s, axis)?;
        if range.start >= range.end || range.end > s[axis] {
            return Err(Error::InvalidTensor(format!(
                "slice: range {range:?} invalid for axis {axis} of {s:?}"
            )));
        }
        let (outer, dim, inner) = split_axis(&s, axis);
        let len = range.end - range.start;
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner;
            out.extend_from_slice(&data[base + range.start * inner..base + range.end * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(
            &shape,
            out,
            Op::Slice {
                x,
                axis,
                start: range.start,
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if shape.iter().product::<usize>() != s.iter().product::<usize>() {
            return Err(mismatch("reshape", s, shape));
        }
        let out = self.value(x).data().to_vec();
        self.push(shape, out, Op::Reshape(x))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_axis("softmax", &s, axis)?;
        let out = lanes_map(self.value(x).data(), &s, axis, |lane| {
            let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = lane.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        });
        self.push(&s, out, Op::Softmax { x, axis })
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_axis("log_softmax", &s, axis)?;
        let out = lanes_map(self.value(x).data(), &s, axis, |lane| {
            let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + lane.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lane.iter().map(|v| v - lse).collect()
        });
        self.push(&s, out, Op::LogSoftmax { x, axis })
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta` of that length.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidTensor("layer_norm: eps must be > 0".into()));
        }
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        for p in [gamma, beta] {
            if self.value(p).len() != d {
                return Err(mismatch("layer_norm", &s, self.shape(p)));
            }
        }
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xd.len() / d;
        let mut out = Vec::with_capacity(xd.len());
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..d {
                let xh = (row[j].as_f64() - mean) * rs;
                out.push(E::from_f64(xh * g[j].as_f64() + b[j].as_f64()));
            }
        }
        self.push(
            &s,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd,
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, gelu_value, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid_value, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let out = self
            .value(x)
            .data()
            .iter()
            .map(|v| E::from_f64(f(v.as_f64())))
            .collect();
        self.push(&s, out, op)
    }

    /// `x / max(‖x‖, eps)` along `axis`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::InvalidTensor("l2_normalize: eps must be > 0".into()));
        }
        let s = self.shape(x).to_vec();
        check_axis("l2_normalize", &s, axis)?;
        let (outer, dim, inner) = split_axis(&s, axis);
        let xd = self.value(x).data();
        let mut norms = Vec::with_capacity(outer * inner);
        let mut out = vec![E::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |d: usize| o * dim * inner + d * inner + i;
                let norm = (0..dim)
                    .map(|d| xd[idx(d)].as_f64().powi(2))
                    .sum::<f64>()
                    .sqrt();
                norms.push(norm);
                let n = norm.max(eps);
                for d in 0..dim {
                    out[idx(d)] = E::from_f64(xd[idx(d)].as_f64() / n);
                }
            }
        }
        self.push(
            &s,
            out,
            Op::L2Normalize {
                x,
                axis,
                norms,
                eps,
            },
        )
    }

    /// Numerically stable `log(1 + Σ exp(x))` over the last axis, restricted to
    /// entries where `mask` is true. An empty selection yields 0.
    pub fn log1p_exp_sum(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let xd = self.value(x).data();
        if let Some(m) = &mask {
            if m.len() != xd.len() {
                return Err(mismatch("log1p_exp_sum", &s, &[m.len()]));
            }
        }
        let k = *s.last().unwrap();
        let rows = xd.len() / k;
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let sel = |j: usize| mask.as_ref().map_or(true, |m| m[r * k + j]);
            let mx = (0..k)
                .filter(|&j| sel(j))
                .map(|j| xd[r * k + j].as_f64())
                .fold(0.0f64, f64::max);
            let acc: f64 = (-mx).exp()
                + (0..k)
                    .filter(|&j| sel(j))
                    .map(|j| (xd[r * k + j].as_f64() - mx).exp())
                    .sum::<f64>();
            out.push(E::from_f64(mx + acc.ln()));
        }
        let shape = reduced_shape(&s, s.len() - 1);
        self.push(&shape, out, Op::Log1pExpSum { x, mask })
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, out) = self.reduce("sum", x, axis, 1.0)?;
        self.push(&shape, out, Op::Sum { x, axis })
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x);
        check_axis("mean", s, axis)?;
        let inv = 1.0 / s[axis] as f64;
        let (shape, out) = self.reduce("mean", x, axis, inv)?;
        self.push(&shape, out, Op::Mean { x, axis })
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let flat = if self.shape(x).len() == 1 {
            x
        } else {
            self.reshape(x, &[n])?
        };
        self.sum(flat, 0)
    }

    fn reduce(
        &self,
        kernel: &'static str,
        x: Var,
        axis: usize,
        factor: f64,
    ) -> Result<(Vec<usize>, Vec<E>)> {
        let s = self.shape(x).to_vec();
        check_axis(kernel, &s, axis)?;
        let (outer, dim, inner) = split_axis(&s, axis);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let acc: f64 = (0..dim)
                    .map(|d| xd[o * dim * inner + d * inner + i].as_f64())
                    .sum();
                out.push(E::from_f64(acc * factor));
            }
        }
        Ok((reduced_shape(&s, axis), out))
    }

    /// Identity forward; blocks every gradient flowing back through it.
    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (s, d) = (t.shape().to_vec(), t.data().to_vec());
        self.push(&s, d, Op::StopGradient)
    }

    /// Accumulates d(loss)/d(node) for every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let t = self.value(loss);
        if t.len() != 1 {
            return Err(Error::InvalidTensor(format!(
                "backward needs a scalar, got shape {:?}",
                t.shape()
            )));
        }
        if !t.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        if !t.requires_grad() {
            return Ok(());
        }
        self.nodes[loss.0].tensor.accumulate_grad(&[E::one()]);
        for i in (0..=loss.0).rev() {
            let grad = match self.nodes[i].tensor.grad_mut().take() {
                Some(g) => g,
                None => continue,
            };
            let contribs = self.backward_rule(i, &grad)?;
            *self.nodes[i].tensor.grad_mut() = Some(grad);
            for (v, c) in contribs {
                self.nodes[v.0].tensor.accumulate_grad(&c);
            }
        }
        Ok(())
    }

    fn backward_rule(&self, i: usize, g: &[E]) -> Result<Vec<(Var, Vec<E>)>> {
        let node = &self.nodes[i];
        let rg = |v: Var| self.requires_grad(v);
        let val = |v: Var| self.value(v).data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let n = self.shape(*b)[1];
                if rg(*a) {
                    out.push((*a, matmul_grad_lhs(g, val(*b), m, k, n)));
                }
                if rg(*b) {
                    out.push((*b, matmul_grad_rhs(val(*a), g, m, k, n)));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2()?;
                let mut d = vec![E::zero(); m * n];
                for r in 0..m {
                    for c in 0..n {
                        d[r * n + c] = g[c * m + r];
                    }
                }
                out.push((*a, d));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if rg(v) {
                        out.push((v, g.to_vec()));
                    }
                }
            }
            Op::AddBias(a, b) => {
                if rg(*a) {
                    out.push((*a, g.to_vec()));
                }
                if rg(*b) {
                    let n = self.value(*b).len();
                    let mut acc = vec![0.0f64; n];
                    for (idx, v) in g.iter().enumerate() {
                        acc[idx % n] += v.as_f64();
                    }
                    out.push((*b, acc.into_iter().map(E::from_f64).collect()));
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    out.push((*a, g.to_vec()));
                }
                if rg(*b) {
                    out.push((*b, g.iter().map(|&v| -v).collect()));
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    out.push((*a, zip_map(g, val(*b), |x, y| x * y)));
                }
                if rg(*b) {
                    out.push((*b, zip_map(g, val(*a), |x, y| x * y)));
                }
            }
            Op::Scale(a, s) => {
                let sv = E::from_f64(*s);
                out.push((*a, g.iter().map(|&v| v * sv).collect()));
            }
            Op::AddScalar(a) | Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::Concat { inputs, axis } => {
                let shape = node.tensor.shape();
                let (outer, dim, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    if rg(*v) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = o * dim * inner + offset * inner;
                            d.extend_from_slice(&g[base..base + len * inner]);
                        }
                        out.push((*v, d));
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, dim, inner) = split_axis(xs, *axis);
                let len = node.tensor.shape()[*axis];
                let mut d = vec![E::zero(); self.value(*x).len()];
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, d));
            }
            Op::Softmax { x, axis } => {
                let y = node.tensor.data();
                let d = lanes_zip(y, g, node.tensor.shape(), *axis, |yl, gl| {
                    let dot: f64 = yl.iter().zip(gl).map(|(a, b)| a * b).sum();
                    yl.iter().zip(gl).map(|(y, g)| y * (g - dot)).collect()
                });
                out.push((*x, d));
            }
            Op::LogSoftmax { x, axis } => {
                let y = node.tensor.data();
                let d = lanes_zip(y, g, node.tensor.shape(), *axis, |yl, gl| {
                    let gs: f64 = gl.iter().sum();
                    yl.iter().zip(gl).map(|(y, g)| g - y.exp() * gs).collect()
                });
                out.push((*x, d));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd,
            } => {
                let xd = val(*x);
                let gam = val(*gamma);
                let d = gam.len();
                let rows = xd.len() / d;
                let mut dx = vec![E::zero(); xd.len()];
                let mut dg = vec![0.0f64; d];
                let mut db = vec![0.0f64; d];
                let mut xhat = vec![0.0f64; d];
                let mut dxh = vec![0.0f64; d];
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
                    let rs = rstd[r];
                    for j in 0..d {
                        xhat[j] = (row[j].as_f64() - mean) * rs;
                        let gj = g[r * d + j].as_f64();
                        dg[j] += gj * xhat[j];
                        db[j] += gj;
                        dxh[j] = gj * gam[j].as_f64();
                    }
                    let m1 = dxh.iter().sum::<f64>() / d as f64;
                    let m2 = dxh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[r * d + j] = E::from_f64(rs * (dxh[j] - m1 - xhat[j] * m2));
                    }
                }
                if rg(*x) {
                    out.push((*x, dx));
                }
                if rg(*gamma) {
                    out.push((*gamma, dg.into_iter().map(E::from_f64).collect()));
                }
                if rg(*beta) {
                    out.push((*beta, db.into_iter().map(E::from_f64).collect()));
                }
            }
            Op::Relu(x) => {
                let d = zip_map(g, val(*x), |g, x| if x > E::zero() { g } else { E::zero() });
                out.push((*x, d));
            }
            Op::Gelu(x) => {
                let d = zip_map(g, val(*x), |g, x| {
                    E::from_f64(g.as_f64() * gelu_derivative(x.as_f64()))
                });
                out.push((*x, d));
            }
            Op::Sigmoid(x) => {
                let d = zip_map(g, node.tensor.data(), |g, y| g * y * (E::one() - y));
                out.push((*x, d));
            }
            Op::Tanh(x) => {
                let d = zip_map(g, node.tensor.data(), |g, y| g * (E::one() - y * y));
                out.push((*x, d));
            }
            Op::L2Normalize {
                x,
                axis,
                norms,
                eps,
            } => {
                let shape = node.tensor.shape();
                let (outer, dim, inner) = split_axis(shape, *axis);
                let y = node.tensor.data();
                let mut d = vec![E::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let lane = o * inner + i;
                        let idx = |k: usize| o * dim * inner + k * inner + i;
                        let norm = norms[lane];
                        if norm > *eps {
                            let dot: f64 = (0..dim)
                                .map(|k| g[idx(k)].as_f64() * y[idx(k)].as_f64())
                                .sum();
                            for k in 0..dim {
                                let v = (g[idx(k)].as_f64() - y[idx(k)].as_f64() * dot) / norm;
                                d[idx(k)] = E::from_f64(v);
                            }
                        } else {
                            for k in 0..dim {
                                d[idx(k)] = E::from_f64(g[idx(k)].as_f64() / eps);
                            }
                        }
                    }
                }
                out.push((*x, d));
            }
            Op::Log1pExpSum { x, mask } => {
                let xd = val(*x);
                let k = *self.shape(*x).last().unwrap();
                let y = node.tensor.data();
                let mut d = vec![E::zero(); xd.len()];
                for (r, (gr, yr)) in g.iter().zip(y).enumerate() {
                    for j in 0..k {
                        let idx = r * k + j;
                        if mask.as_ref().map_or(true, |m| m[idx]) {
                            let w = (xd[idx].as_f64() - yr.as_f64()).exp();
                            d[idx] = E::from_f64(gr.as_f64() * w);
                        }
                    }
                }
                out.push((*x, d));
            }
            Op::Sum { x, axis } | Op::Mean { x, axis } => {
                let xs = self.shape(*x);
                let (outer, dim, inner) = split_axis(xs, *axis);
                let factor = match node.op {
                    Op::Mean { .. } => 1.0 / dim as f64,
                    _ => 1.0,
                };
                let mut d = vec![E::zero(); self.value(*x).len()];
                for o in 0..outer {
                    for k in 0..dim {
                        for i in 0..inner {
                            d[o * dim * inner + k * inner + i] =
                                E::from_f64(g[o * inner + i].as_f64() * factor);
                        }
                    }
                }
                out.push((*x, d));
            }
        }
        Ok(out)
    }
}

fn zip_map<E: Element>(a: &[E], b: &[E], f: impl Fn(E, E) -> E) -> Vec<E> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Applies `f` to every lane along `axis`, in f64.
fn lanes_map<E: Element>(
    data: &[E],
    shape: &[usize],
    axis: usize,
    f: impl Fn(&[f64]) -> Vec<f64>,
) -> Vec<E> {
    let (outer, dim, inner) = split_axis(shape, axis);
    let mut out = vec![E::zero(); data.len()];
    let mut lane = vec![0.0; dim];
    for o in 0..outer {
        for i in 0..inner {
            for d in 0..dim {
                lane[d] = data[o * dim * inner + d * inner + i].as_f64();
            }
            for (d, v) in f(&lane).into_iter().enumerate() {
                out[o * dim * inner + d * inner + i] = E::from_f64(v);
            }
        }
    }
    out
}

fn lanes_zip<E: Element>(
    a: &[E],
    b: &[E],
    shape: &[usize],
    axis: usize,
    f: impl Fn(&[f64], &[f64]) -> Vec<f64>,
) -> Vec<E> {
    let (outer, dim, inner) = split_axis(shape, axis);
    let mut out = vec![E::zero(); a.len()];
    let mut la = vec![0.0; dim];
    let mut lb = vec![0.0; dim];
    for o in 0..outer {
        for i in 0..inner {
            for d in 0..dim {
                la[d] = a[o * dim * inner + d * inner + i].as_f64();
                lb[d] = b[o * dim * inner + d * inner + i].as_f64();
            }
            for (d, v) in f(&la, &lb).into_iter().enumerate() {
                out[o * dim * inner + d * inner + i] = E::from_f64(v);
            }
        }
    }
    out
}

pub(crate) fn sigmoid_value(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Runs `f(row, out_row)` for every row, split over disjoint row blocks. Each row is
/// computed independently, so the result does not depend on the thread count.
fn for_row_blocks<E: Element>(
    out: &mut [E],
    rows: usize,
    cols: usize,
    work: usize,
    f: impl Fn(usize, &mut [E]) + Sync,
) {
    let threads = kernel_threads().min(rows);
    if threads <= 1 || work < 1 << 16 {
        for (r, chunk) in out.chunks_mut(cols).enumerate() {
            f(r, chunk);
        }
        return;
    }
    let per = rows.div_ceil(threads);
    std::thread::scope(|s| {
        for (t, block) in out.chunks_mut(per * cols).enumerate() {
            let f = &f;
            s.spawn(move || {
                for (r, chunk) in block.chunks_mut(cols).enumerate() {
                    f(t * per + r, chunk);
                }
            });
        }
    });
}

fn matmul_forward<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for_row_blocks(&mut out, m, n, m * k * n, |i, row| {
        let mut acc = vec![0.0f64; n];
        for p in 0..k {
            let av = a[i * k + p].as_f64();
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (acc_j, bv) in acc.iter_mut().zip(brow) {
                *acc_j += av * bv.as_f64();
            }
        }
        for (o, v) in row.iter_mut().zip(acc) {
            *o = E::from_f64(v);
        }
    });
    out
}

/// dA = G · Bᵀ for G: m×n, B: k×n.
fn matmul_grad_lhs<E: Element>(g: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut bt = vec![E::zero(); k * n];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    matmul_forward(g, &bt, m, n, k)
}

/// dB = Aᵀ · G for A: m×k, G: m×n.
fn matmul_grad_rhs<E: Element>(a: &[E], g: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut acc = vec![0.0f64; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p].as_f64();
            if av == 0.0 {
                continue;
            }
            for (slot, gv) in acc[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *slot += av * gv.as_f64();
            }
        }
    }
    acc.into_iter().map(E::from_f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2], &[3.0, 4.0]));
        let y = g.l2_normalize(x, 0, L2_NORM_EPS).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8]);
    }

    #[test]
    fn matmul_known_product() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::from_f64(&[2, 1], &[5.0, 6.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn shape_errors_name_the_kernel() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        let b = g.constant(Tensor::zeros(&[2, 3]).unwrap());
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = g.constant(Tensor::zeros(&[4]).unwrap());
        assert!(g.add(a, c).unwrap_err().to_string().contains("add"));
        assert!(matches!(
            g.softmax(a, 2),
            Err(Error::AxisOutOfRange {
                kernel: "softmax",
                ..
            })
        ));
    }

    #[test]
    fn bias_add_broadcasts_over_rows_only() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let b = g.leaf(t(&[2], &[10.0, 20.0]), true);
        let y = g.add(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(b).unwrap(), &[2.0, 2.0]);
        let col = g.constant(t(&[2, 1], &[1.0, 1.0]));
        assert!(g.add(a, col).is_err());
    }

    #[test]
    fn log1p_exp_sum_is_stable_and_masked() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[1000.0, -5.0, 2.0, 1.0, 2.0, 3.0]));
        let mask = vec![true, false, true, false, false, false];
        let y = g.log1p_exp_sum(x, Some(mask)).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 1000.0).abs() < 1e-9);
        assert_eq!(v[1], 0.0);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let s = g.stop_gradient(x).unwrap();
        let y = g.mul(x, s).unwrap();
        let l = g.sum_all(y).unwrap();
        g.backward(l).unwrap();
        // d/dx (x * sg(x)) = sg(x)
        assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
        assert!(g.grad(s).is_none());
    }

    #[test]
    fn frozen_leaf_never_accumulates() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
        let x = g.leaf(t(&[1, 2], &[3.0, 4.0]), true);
        let y = g.matmul(x, w).unwrap();
        let l = g.sum_all(y).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(w).is_none());
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.shape(c), &[3, 2]);
        let s = g.slice(c, 0, 1..3).unwrap();
        assert_eq!(g.value(s).data(), g.value(b).data());
        let cols = g.concat(&[b, b], 1).unwrap();
        assert_eq!(
            g.value(cols).data(),
            &[3.0, 4.0, 3.0, 4.0, 5.0, 6.0, 5.0, 6.0]
        );
    }
}
