//! Eager tape-based reverse-mode differentiation over a small fixed op set.
//!
//! Every builder call evaluates its op immediately and appends a node, so
//! creation order is a topological order and the backward pass is a single
//! reverse sweep. A node whose value is not finite is rejected at creation
//! with an error naming the op and node index.
//!
//! Broadcasting is limited to [`Graph::add_bias`]; all layout changes go
//! through explicit [`Graph::reshape`] / [`Graph::permute`] nodes.

mod backward;
mod check;

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::tensor::{Scalar, Tensor, TensorError};

pub use backward::{BackwardMode, Gradients};
pub use check::{finite_diff_grad, max_relative_error, value_and_grad, Computation};

pub type ParamSet<T> = BTreeMap<String, Tensor<T>>;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Forward,
    Backward,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Forward => f.write_str("forward"),
            Phase::Backward => f.write_str("backward"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("shape mismatch in {op} (node {node}): {detail}")]
    Shape {
        op: &'static str,
        node: usize,
        detail: String,
    },
    #[error("non-finite value in {op} (node {node}) during {phase} pass")]
    NonFinite {
        op: &'static str,
        node: usize,
        phase: Phase,
    },
    #[error("parameter `{0}` is not bound")]
    MissingParam(String),
    #[error("expected a scalar root, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = GraphError> = std::result::Result<T, E>;

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Input,
    Param,
    MatMul(NodeId, NodeId),
    BatchMatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Gelu(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    PrependRow(NodeId, NodeId),
    SelectRow(NodeId, usize),
    SumAll(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Mse(NodeId, NodeId),
    KlDiv {
        student: NodeId,
        target: NodeId,
        temperature: T,
        p_student: Vec<T>,
        p_target: Vec<T>,
    },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::PrependRow(..) => "prepend_row",
            Op::SelectRow(..) => "select_row",
            Op::SumAll(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Mse(..) => "mse",
            Op::KlDiv { .. } => "kl_div",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Param => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::BatchMatMul { a, b, .. } => vec![*a, *b],
            Op::Mse(a, b) | Op::PrependRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Softmax(a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::SelectRow(a, _)
            | Op::SumAll(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::KlDiv {
                student, target, ..
            } => vec![*student, *target],
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) op: Op<T>,
    pub(crate) value: Tensor<T>,
    pub(crate) needs_grad: bool,
}

/// A computation under construction. Values are available as soon as a node
/// is created; call [`Graph::backward`] on a scalar node for gradients.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    params: BTreeMap<String, NodeId>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let value = half * x * (T::one() + t);
    let d_inner = c * (T::one() + three * k * x * x);
    let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * d_inner;
    (value, deriv)
}

pub(crate) fn gelu_derivative<T: Scalar>(x: T) -> T {
    gelu_parts(x).1
}

/// Row-wise softmax over the last axis of `data` viewed as rows of `width`.
pub(crate) fn softmax_rows<T: Scalar>(data: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for (row, dst) in data.chunks(width).zip(out.chunks_mut(width)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total = total + *d;
        }
        for d in dst.iter_mut() {
            *d = *d / total;
        }
    }
    out
}

fn permuted_shape(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    perm.iter().map(|&p| shape[p]).collect()
}

/// Gathers `src` (with `shape`) into the layout obtained by permuting axes.
pub(crate) fn permute_data<T: Copy>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape = permuted_shape(shape, perm);
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    if src.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    loop {
        out.push(src[offset]);
        // odometer increment over the output index
        let mut axis = nd;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            offset += strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            offset -= strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    /// Parameter nodes registered with [`Graph::param`], by name.
    pub fn params(&self) -> &BTreeMap<String, NodeId> {
        &self.params
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Result<NodeId> {
        let node = self.nodes.len();
        if !value.all_finite() {
            return Err(GraphError::NonFinite {
                op: op.name(),
                node,
                phase: Phase::Forward,
            });
        }
        let needs_grad = match &op {
            Op::Param => true,
            other => other.inputs().iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(NodeId(node))
    }

    fn shape_err(&self, op: &'static str, detail: String) -> GraphError {
        GraphError::Shape {
            op,
            node: self.nodes.len(),
            detail,
        }
    }

    /// A constant leaf; gradients never flow into it.
    pub fn input(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push(Op::Input, value)
    }

    /// A named trainable leaf.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<NodeId> {
        let id = self.push(Op::Param, value)?;
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push(Op::MatMul(a, b), value)
    }

    /// `[g, m, k] x [g, k, n] -> [g, m, n]`; with `trans_b` the second
    /// operand is stored as `[g, n, k]` and used transposed.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b {
                sa[2] == sb[2]
            } else {
                sa[2] == sb[1]
            };
        if !ok {
            return Err(self.shape_err(
                "batch_matmul",
                format!("{sa:?} x {sb:?} (trans_b={trans_b})"),
            ));
        }
        let (groups, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let b_strides = if trans_b {
            (1, k as isize)
        } else {
            (n as isize, 1)
        };
        let mut out = vec![T::zero(); groups * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for g in 0..groups {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &av[g * m * k..(g + 1) * m * k],
                (k as isize, 1),
                &bv[g * k * n..(g + 1) * k * n],
                b_strides,
                T::zero(),
                &mut out[g * m * n..(g + 1) * m * n],
                (n as isize, 1),
            );
        }
        let value = Tensor::new(vec![groups, m, n], out)?;
        self.push(Op::BatchMatMul { a, b, trans_b }, value)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(Op::Add(a, b), value)
    }

    /// Adds `bias` to every trailing block of `a` whose shape equals
    /// `bias`'s shape. The only broadcasting op.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb.is_empty() || sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(self.shape_err("add_bias", format!("{sa:?} + {sb:?}")));
        }
        let bv = self.value(bias).data();
        let width = bv.len();
        let mut data = self.value(a).data().to_vec();
        for block in data.chunks_mut(width) {
            for (d, &b) in block.iter_mut().zip(bv) {
                *d = *d + b;
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(Op::AddBias(a, bias), value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(Op::Mul(a, b), value)
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(Op::Scale(a, c), value)
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| gelu_parts(x).0)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(Op::Gelu(a), value)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let Some(&width) = shape.last() else {
            return Err(self.shape_err("softmax", "scalar input".into()));
        };
        let data = softmax_rows(self.value(a).data(), width);
        let value = Tensor::new(shape, data)?;
        self.push(Op::Softmax(a), value)
    }

    /// Layer normalization over the last axis with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().unwrap_or(&0);
        if width == 0 || self.shape(gain) != [width] || self.shape(bias) != [width] {
            return Err(self.shape_err(
                "layer_norm",
                format!(
                    "x {:?}, gain {:?}, bias {:?}",
                    shape,
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let n = T::from_usize(width).unwrap();
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = Vec::with_capacity(xv.len() / width);
        let mut out = vec![T::zero(); xv.len()];
        for ((row, xh), o) in xv
            .chunks(width)
            .zip(xhat.chunks_mut(width))
            .zip(out.chunks_mut(width))
        {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for j in 0..width {
                xh[j] = (row[j] - mean) * r;
                o[j] = xh[j] * gv[j] + bv[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            value,
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(self.shape_err("reshape", format!("{:?} -> {:?}", self.shape(a), shape)));
        }
        let value = self.value(a).clone().reshape(shape)?;
        self.push(Op::Reshape(a), value)
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm
                .iter()
                .all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(self.shape_err("permute", format!("{shape:?} by {perm:?}")));
        }
        let data = permute_data(self.value(a).data(), &shape, perm);
        let value = Tensor::new(permuted_shape(&shape, perm), data)?;
        self.push(Op::Permute(a, perm.to_vec()), value)
    }

    /// `[b, n, d]` with a shared `[d]` row prepended to every batch item,
    /// giving `[b, n + 1, d]`.
    pub fn prepend_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (sx, sr) = (self.shape(x).to_vec(), self.shape(row).to_vec());
        if sx.len() != 3 || sr != [sx[2]] {
            return Err(self.shape_err("prepend_row", format!("{sx:?} with row {sr:?}")));
        }
        let (b, n, d) = (sx[0], sx[1], sx[2]);
        let (xv, rv) = (self.value(x).data(), self.value(row).data());
        let mut data = Vec::with_capacity(b * (n + 1) * d);
        for item in xv.chunks(n * d) {
            data.extend_from_slice(rv);
            data.extend_from_slice(item);
        }
        let value = Tensor::new(vec![b, n + 1, d], data)?;
        self.push(Op::PrependRow(x, row), value)
    }

    /// `[b, n, d] -> [b, d]`, taking row `index` of every batch item.
    pub fn select_row(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || index >= sx[1] {
            return Err(self.shape_err("select_row", format!("{sx:?} row {index}")));
        }
        let (n, d) = (sx[1], sx[2]);
        let data = self
            .value(x)
            .data()
            .chunks(n * d)
            .flat_map(|item| item[index * d..(index + 1) * d].iter().copied())
            .collect();
        let value = Tensor::new(vec![sx[0], d], data)?;
        self.push(Op::SelectRow(x, index), value)
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), value)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return Err(self.shape_err(
                "cross_entropy",
                format!("logits {shape:?} with {} labels", labels.len()),
            ));
        }
        let classes = shape[1];
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(GraphError::Label { label, classes });
        }
        let probs = softmax_rows(self.value(logits).data(), classes);
        let mut total = T::zero();
        for (row, &y) in self.value(logits).data().chunks(classes).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total = total + (lse - row[y]);
        }
        let value = Tensor::scalar(total / T::from_usize(labels.len()).unwrap());
        self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            value,
        )
    }

    /// Mean of squared differences over every entry.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).len();
        if n == 0 {
            return Err(self.shape_err("mse", "empty operands".into()));
        }
        let total: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let value = Tensor::scalar(total / T::from_usize(n).unwrap());
        self.push(Op::Mse(a, b), value)
    }

    /// Temperature-softened distillation loss
    /// `T^2 / B * sum_b KL(softmax(target/T) || softmax(student/T))`.
    pub fn kl_div(&mut self, student: NodeId, target: NodeId, temperature: T) -> Result<NodeId> {
        self.same_shape("kl_div", student, target)?;
        let shape = self.shape(student).to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(self.shape_err("kl_div", format!("{shape:?}")));
        }
        let (batch, classes) = (shape[0], shape[1]);
        let soften = |v: &[T]| -> Vec<T> { v.iter().map(|&x| x / temperature).collect() };
        let p_student = softmax_rows(&soften(self.value(student).data()), classes);
        let p_target = softmax_rows(&soften(self.value(target).data()), classes);
        let mut total = T::zero();
        for (&pt, &ps) in p_target.iter().zip(&p_student) {
            if pt > T::zero() {
                total = total + pt * (pt.ln() - ps.ln());
            }
        }
        let scale = temperature * temperature / T::from_usize(batch).unwrap();
        let value = Tensor::scalar(total * scale);
        self.push(
            Op::KlDiv {
                student,
                target,
                temperature,
                p_student,
                p_target,
            },
            value,
        )
    }
}

/// Maps parameter names to graph nodes for one graph.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    nodes: BTreeMap<String, NodeId>,
}

impl Bindings {
    /// Registers every tensor as a trainable parameter node.
    pub fn trainable<T: Scalar>(g: &mut Graph<T>, params: &ParamSet<T>) -> Result<Self> {
        let mut nodes = BTreeMap::new();
        for (name, t) in params {
            nodes.insert(name.clone(), g.param(name, t.clone())?);
        }
        Ok(Self { nodes })
    }

    /// Registers every tensor as a constant; no gradient reaches these.
    pub fn frozen<T: Scalar>(g: &mut Graph<T>, params: &ParamSet<T>) -> Result<Self> {
        let mut nodes = BTreeMap::new();
        for (name, t) in params {
            nodes.insert(name.clone(), g.input(t.clone())?);
        }
        Ok(Self { nodes })
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| GraphError::MissingParam(name.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn permute_swaps_middle_axes() {
        // [1, 2, 3, 1] -> perm (0, 2, 1, 3) -> [1, 3, 2, 1]
        let src: Vec<u32> = (0..6).collect();
        let out = permute_data(&src, &[1, 2, 3, 1], &[0, 2, 1, 3]);
        assert_eq!(out, vec![0, 3, 1, 4, 2, 5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g
            .input(t(&[2, 3], &[1.0, 2.0, 3.0, -5.0, 0.0, 5.0]))
            .unwrap();
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn non_finite_forward_names_node() {
        let mut g = Graph::new();
        let x = g.input(t(&[1], &[1e300])).unwrap();
        let err = g.mul(x, x).unwrap_err();
        assert_eq!(
            err,
            GraphError::NonFinite {
                op: "mul",
                node: 1,
                phase: Phase::Forward
            }
        );
    }

    #[test]
    fn matmul_shape_mismatch_is_error() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.input(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(GraphError::Shape { .. })));
    }

    #[test]
    fn mse_mean_convention() {
        let mut g = Graph::new();
        let a = g.input(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let b = g.input(t(&[1, 2], &[1.0, 0.0])).unwrap();
        let m = g.mse(a, b).unwrap();
        assert_eq!(g.value(m).item(), 2.0);
    }

    #[test]
    fn prepend_and_select_round_trip() {
        let mut g = Graph::new();
        let x = g.input(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let r = g.input(t(&[2], &[9.0, 8.0])).unwrap();
        let y = g.prepend_row(x, r).unwrap();
        assert_eq!(g.shape(y), &[2, 2, 2]);
        let first = g.select_row(y, 0).unwrap();
        assert_eq!(g.value(first).data(), &[9.0, 8.0, 9.0, 8.0]);
        let second = g.select_row(y, 1).unwrap();
        assert_eq!(g.value(second).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn label_out_of_range() {
        let mut g = Graph::<f64>::new();
        let z = g.input(Tensor::zeros(&[1, 2])).unwrap();
        assert_eq!(
            g.cross_entropy(z, &[2]).unwrap_err(),
            GraphError::Label {
                label: 2,
                classes: 2
            }
        );
    }
}
