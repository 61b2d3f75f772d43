//! Dense f64 tensors and a reverse-mode gradient tape.
//!
//! A [`Graph`] is an append-only arena of nodes; every operation records its
//! inputs so [`Graph::backward`] can replay the tape in reverse. Node ids are
//! creation-ordered, which makes the reverse sweep a plain reverse iteration.
//! Everything is f64 and single-threaded with a fixed summation order, so a
//! given graph evaluates bitwise identically run to run.

pub mod adam;
pub mod check;
mod nn;

pub use nn::{NormKind, NormOptions, NormStats};

use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
pub type TensorId = usize;

/// Dense row-major tensor. A rank-0 tensor (empty shape) is a scalar.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Shape two operands broadcast to (trailing-dimension alignment), or a
/// dimension error when some axis pair is incompatible.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for d in 0..rank {
        let da = if d < rank - a.len() { 1 } else { a[d - (rank - a.len())] };
        let db = if d < rank - b.len() { 1 } else { b[d - (rank - b.len())] };
        out[d] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::Dimension(format!("cannot broadcast {a:?} with {b:?}")));
        };
    }
    Ok(out)
}

/// Strides for reading `shape` as if it had been expanded to `out_shape`:
/// broadcast axes get stride 0.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let offset = out_shape.len() - shape.len();
    let mut s = vec![0usize; out_shape.len()];
    for d in 0..shape.len() {
        s[offset + d] = if shape[d] == 1 { 0 } else { own[d] };
    }
    s
}

/// Sum `grad` (shaped `grad_shape`) down to `target_shape`, undoing a
/// broadcast. Used by the backward pass of every broadcasting op.
fn reduce_to_shape(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let tstrides = broadcast_strides(target_shape, grad_shape);
    let gstrides = strides_of(grad_shape);
    let mut out = vec![0.0; target_shape.iter().product()];
    for (flat, &g) in grad.iter().enumerate() {
        let mut t = 0usize;
        for d in 0..grad_shape.len() {
            let coord = (flat / gstrides[d]) % grad_shape[d];
            t += coord * tstrides[d];
        }
        out[t] += g;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Sqrt,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Binary { kind: BinaryKind, a: TensorId, b: TensorId },
    Unary { kind: UnaryKind, x: TensorId },
    /// y = c * x + d, computed eagerly; only c matters going backward.
    Affine { x: TensorId, c: f64 },
    /// Smoothed minimum of three scalars: -gamma * ln(sum exp(-v/gamma)).
    Softmin3 { a: TensorId, b: TensorId, c: TensorId, gamma: f64 },
    /// Scalar view of one element.
    Index { src: TensorId, at: usize },
    Reduce { src: TensorId, axes: Vec<usize>, keepdim: bool, mean: bool },
    MatMul { a: TensorId, b: TensorId },
    Permute { src: TensorId, perm: Vec<usize> },
    Reshape { src: TensorId },
    Conv { x: TensorId, w: TensorId, b: Option<TensorId>, stride: Vec<usize>, pad: Vec<usize> },
    ConvTranspose {
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: Vec<usize>,
        pad: Vec<usize>,
    },
    /// Adaptive mean pooling over the trailing `out.len()` axes.
    AvgPool { x: TensorId, out: Vec<usize> },
    Norm(Box<nn::NormBack>),
    TemporalShift { x: TensorId, left: usize, right: usize },
}

pub(crate) struct Node {
    pub tensor: Tensor,
    pub op: Op,
}

/// Append-only computation tape.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
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

    /// Insert a tensor as a leaf node.
    pub fn leaf(&mut self, mut tensor: Tensor, requires_grad: bool) -> Result<TensorId> {
        if let Some(bad) = tensor.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("leaf insertion (value {bad})")));
        }
        tensor.requires_grad = requires_grad;
        tensor.grad = None;
        self.nodes.push(Node { tensor, op: Op::Leaf });
        Ok(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        let t = Tensor::new(data, shape)?;
        self.leaf(t, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        let t = Tensor::new(data, shape)?;
        self.leaf(t, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Result<TensorId> {
        self.leaf(Tensor::scalar(v), false)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id].tensor.shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id].tensor.data
    }

    /// Value of a scalar node.
    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id].tensor.numel(), 1);
        self.nodes[id].tensor.data[0]
    }

    /// Gradient buffer of a node; `None` until `backward` has touched it.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id].tensor.grad.as_deref()
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id].tensor.requires_grad
    }

    /// Push a computed node, enforcing the all-finite invariant.
    pub(crate) fn push(
        &mut self,
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Op,
        what: &str,
    ) -> Result<TensorId> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(what.to_string()));
        }
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            tensor: Tensor { shape, data, requires_grad, grad: None },
            op,
        });
        Ok(self.nodes.len() - 1)
    }

    fn binary(&mut self, kind: BinaryKind, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)?;
        let stra = broadcast_strides(&sa, &out_shape);
        let strb = broadcast_strides(&sb, &out_shape);
        let ostr = strides_of(&out_shape);
        let numel: usize = out_shape.iter().product();
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; numel];
        for (flat, o) in out.iter_mut().enumerate() {
            let (mut ia, mut ib) = (0usize, 0usize);
            for d in 0..out_shape.len() {
                let coord = (flat / ostr[d]) % out_shape[d];
                ia += coord * stra[d];
                ib += coord * strb[d];
            }
            let (va, vb) = (da[ia], db[ib]);
            *o = match kind {
                BinaryKind::Add => va + vb,
                BinaryKind::Sub => va - vb,
                BinaryKind::Mul => va * vb,
                BinaryKind::Div => va / vb,
            };
        }
        let req = self.requires(a) || self.requires(b);
        let what = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        self.push(out, out_shape, req, Op::Binary { kind, a, b }, what)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// Elementwise division. IEEE semantics apply during evaluation, so a
    /// zero divisor surfaces as a non-finite error from the post-op check.
    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: TensorId) -> Result<TensorId> {
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .map(|&v| match kind {
                UnaryKind::Relu => v.max(0.0),
                UnaryKind::Sigmoid => 1.0 / (1.0 + (-v).exp()),
                UnaryKind::Tanh => v.tanh(),
                UnaryKind::Exp => v.exp(),
                UnaryKind::Log => v.ln(),
                UnaryKind::Sqrt => v.sqrt(),
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        let what = match kind {
            UnaryKind::Relu => "relu",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Sqrt => "sqrt",
        };
        self.push(out, shape, req, Op::Unary { kind, x }, what)
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn exp(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn sqrt(&mut self, x: TensorId) -> Result<TensorId> {
        self.unary(UnaryKind::Sqrt, x)
    }

    /// y = c * x (elementwise, constant factor).
    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        self.affine(x, c, 0.0)
    }

    /// y = x + d (elementwise, constant offset).
    pub fn shift(&mut self, x: TensorId, d: f64) -> Result<TensorId> {
        self.affine(x, 1.0, d)
    }

    fn affine(&mut self, x: TensorId, c: f64, d: f64) -> Result<TensorId> {
        let out: Vec<f64> = self.data(x).iter().map(|&v| c * v + d).collect();
        let shape = self.shape(x).to_vec();
        let req = self.requires(x);
        self.push(out, shape, req, Op::Affine { x, c }, "affine")
    }

    /// Smoothed minimum of three scalar nodes,
    /// `-gamma * ln(e^{-a/g} + e^{-b/g} + e^{-c/g})`,
    /// evaluated with the usual max-shift so small `gamma` stays stable.
    pub fn softmin3(&mut self, a: TensorId, b: TensorId, c: TensorId, gamma: f64) -> Result<TensorId> {
        if gamma <= 0.0 {
            return Err(Error::Parameter(format!("softmin gamma must be positive, got {gamma}")));
        }
        for id in [a, b, c] {
            if self.nodes[id].tensor.numel() != 1 {
                return Err(Error::Dimension("softmin3 expects scalar inputs".into()));
            }
        }
        let (va, vb, vc) = (self.value(a), self.value(b), self.value(c));
        let m = va.min(vb).min(vc);
        let s = ((m - va) / gamma).exp() + ((m - vb) / gamma).exp() + ((m - vc) / gamma).exp();
        let out = m - gamma * s.ln();
        let req = self.requires(a) || self.requires(b) || self.requires(c);
        self.push(vec![out], vec![], req, Op::Softmin3 { a, b, c, gamma }, "softmin3")
    }

    /// Scalar view of element `at` (flat, row-major) of `src`.
    pub fn index(&mut self, src: TensorId, at: usize) -> Result<TensorId> {
        let n = self.nodes[src].tensor.numel();
        if at >= n {
            return Err(Error::Dimension(format!("index {at} out of range for {n} elements")));
        }
        let v = self.data(src)[at];
        let req = self.requires(src);
        self.push(vec![v], vec![], req, Op::Index { src, at }, "index")
    }

    fn reduce(&mut self, src: TensorId, axes: &[usize], keepdim: bool, mean: bool) -> Result<TensorId> {
        let shape = self.shape(src).to_vec();
        let mut axes: Vec<usize> = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&a| a >= shape.len()) {
            return Err(Error::Dimension(format!("reduce axes {axes:?} out of range for {shape:?}")));
        }
        let (out_shape, out, count) = reduce_forward(self.data(src), &shape, &axes, keepdim, mean);
        let _ = count;
        let req = self.requires(src);
        self.push(out, out_shape, req, Op::Reduce { src, axes, keepdim, mean }, "reduce")
    }

    pub fn reduce_sum(&mut self, src: TensorId, axes: &[usize], keepdim: bool) -> Result<TensorId> {
        self.reduce(src, axes, keepdim, false)
    }

    pub fn reduce_mean(&mut self, src: TensorId, axes: &[usize], keepdim: bool) -> Result<TensorId> {
        self.reduce(src, axes, keepdim, true)
    }

    /// Sum of every element, as a scalar node.
    pub fn sum_all(&mut self, src: TensorId) -> Result<TensorId> {
        let axes: Vec<usize> = (0..self.shape(src).len()).collect();
        self.reduce(src, &axes, false, false)
    }

    /// Mean of every element, as a scalar node.
    pub fn mean_all(&mut self, src: TensorId) -> Result<TensorId> {
        let axes: Vec<usize> = (0..self.shape(src).len()).collect();
        self.reduce(src, &axes, false, true)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!("matmul wants (m,k)x(k,n), got {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += da[i * k + p] * db[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        let req = self.requires(a) || self.requires(b);
        self.push(out, vec![m, n], req, Op::MatMul { a, b }, "matmul")
    }

    /// Reorder axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, src: TensorId, perm: &[usize]) -> Result<TensorId> {
        let shape = self.shape(src).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Dimension(format!("invalid permutation {perm:?} for rank {rank}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(self.data(src), &shape, perm);
        let req = self.requires(src);
        self.push(out, out_shape, req, Op::Permute { src, perm: perm.to_vec() }, "permute")
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&mut self, src: TensorId, new_shape: &[usize]) -> Result<TensorId> {
        let numel = self.nodes[src].tensor.numel();
        if new_shape.iter().product::<usize>() != numel {
            return Err(Error::Dimension(format!(
                "cannot reshape {} elements to {new_shape:?}",
                numel
            )));
        }
        let data = self.data(src).to_vec();
        let req = self.requires(src);
        self.push(data, new_shape.to_vec(), req, Op::Reshape { src }, "reshape")
    }

    /// Reverse sweep from a scalar loss. Gradient buffers of every node that
    /// requires gradients are (re)initialised to zero first, so leaves that do
    /// not influence the loss end up with explicit zero gradients.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss].tensor.numel() != 1 {
            return Err(Error::Contract("backward requires a scalar loss node".into()));
        }
        for node in self.nodes.iter_mut() {
            node.tensor.grad = if node.tensor.requires_grad {
                Some(vec![0.0; node.tensor.data.len()])
            } else {
                None
            };
        }
        if !self.nodes[loss].tensor.requires_grad {
            return Ok(()); // loss does not depend on any trainable leaf
        }
        self.nodes[loss].tensor.grad = Some(vec![1.0]);
        for i in (0..=loss).rev() {
            self.step_backward(i);
        }
        Ok(())
    }

    /// Propagate node `i`'s gradient into its inputs.
    fn step_backward(&mut self, i: usize) {
        let (inputs, rest) = self.nodes.split_at_mut(i);
        let node = &rest[0];
        if !node.tensor.requires_grad {
            return;
        }
        let gout = match node.tensor.grad.as_ref() {
            Some(g) => g.clone(),
            None => return,
        };
        let out_shape = node.tensor.shape.clone();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                backward_binary(inputs, *kind, *a, *b, &gout, &out_shape);
            }
            Op::Unary { kind, x } => {
                let xd = &inputs[*x].tensor.data;
                let yd = &node.tensor.data;
                let contrib: Vec<f64> = match kind {
                    UnaryKind::Relu => {
                        xd.iter().zip(&gout).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect()
                    }
                    UnaryKind::Sigmoid => {
                        yd.iter().zip(&gout).map(|(&y, &g)| g * y * (1.0 - y)).collect()
                    }
                    UnaryKind::Tanh => yd.iter().zip(&gout).map(|(&y, &g)| g * (1.0 - y * y)).collect(),
                    UnaryKind::Exp => yd.iter().zip(&gout).map(|(&y, &g)| g * y).collect(),
                    UnaryKind::Log => xd.iter().zip(&gout).map(|(&v, &g)| g / v).collect(),
                    UnaryKind::Sqrt => yd.iter().zip(&gout).map(|(&y, &g)| g * 0.5 / y).collect(),
                };
                accumulate(&mut inputs[*x], &contrib);
            }
            Op::Affine { x, c } => {
                let contrib: Vec<f64> = gout.iter().map(|&g| g * c).collect();
                accumulate(&mut inputs[*x], &contrib);
            }
            Op::Softmin3 { a, b, c, gamma } => {
                let (va, vb, vc) =
                    (inputs[*a].tensor.data[0], inputs[*b].tensor.data[0], inputs[*c].tensor.data[0]);
                let m = va.min(vb).min(vc);
                let (ea, eb, ec) = (
                    ((m - va) / gamma).exp(),
                    ((m - vb) / gamma).exp(),
                    ((m - vc) / gamma).exp(),
                );
                let s = ea + eb + ec;
                let g = gout[0];
                accumulate(&mut inputs[*a], &[g * ea / s]);
                accumulate(&mut inputs[*b], &[g * eb / s]);
                accumulate(&mut inputs[*c], &[g * ec / s]);
            }
            Op::Index { src, at } => {
                if let Some(grad) = inputs[*src].tensor.grad.as_mut() {
                    grad[*at] += gout[0];
                }
            }
            Op::Reduce { src, axes, keepdim, mean } => {
                let in_shape = inputs[*src].tensor.shape.clone();
                let contrib = reduce_backward(&gout, &in_shape, axes, *keepdim, *mean);
                accumulate(&mut inputs[*src], &contrib);
            }
            Op::MatMul { a, b } => {
                let (m, k) = (inputs[*a].tensor.shape[0], inputs[*a].tensor.shape[1]);
                let n = inputs[*b].tensor.shape[1];
                let bd = inputs[*b].tensor.data.clone();
                let ad = inputs[*a].tensor.data.clone();
                let mut da = vec![0.0; m * k];
                for i2 in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += gout[i2 * n + j] * bd[p * n + j];
                        }
                        da[i2 * k + p] = acc;
                    }
                }
                accumulate(&mut inputs[*a], &da);
                let mut db = vec![0.0; k * n];
                for p in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for i2 in 0..m {
                            acc += ad[i2 * k + p] * gout[i2 * n + j];
                        }
                        db[p * n + j] = acc;
                    }
                }
                accumulate(&mut inputs[*b], &db);
            }
            Op::Permute { src, perm } => {
                // Scatter gout back through the inverse permutation.
                let mut inv = vec![0usize; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inv[p] = d;
                }
                let contrib = permute_data(&gout, &out_shape, &inv);
                accumulate(&mut inputs[*src], &contrib);
            }
            Op::Reshape { src } => {
                accumulate(&mut inputs[*src], &gout);
            }
            Op::Conv { x, w, b, stride, pad } => {
                nn::backward_conv(inputs, *x, *w, *b, stride, pad, &gout, &out_shape);
            }
            Op::ConvTranspose { x, w, b, stride, pad } => {
                nn::backward_conv_transpose(inputs, *x, *w, *b, stride, pad, &gout, &out_shape);
            }
            Op::AvgPool { x, out } => {
                nn::backward_avg_pool(inputs, *x, out, &gout, &out_shape);
            }
            Op::Norm(back) => {
                nn::backward_norm(inputs, back, &gout);
            }
            Op::TemporalShift { x, left, right } => {
                nn::backward_temporal_shift(inputs, *x, *left, *right, &gout, &out_shape);
            }
        }
    }
}

/// Add `contrib` into a node's gradient buffer (no-op for non-grad nodes).
pub(crate) fn accumulate(node: &mut Node, contrib: &[f64]) {
    if let Some(grad) = node.tensor.grad.as_mut() {
        debug_assert_eq!(grad.len(), contrib.len());
        for (g, &c) in grad.iter_mut().zip(contrib) {
            *g += c;
        }
    }
}

fn backward_binary(
    inputs: &mut [Node],
    kind: BinaryKind,
    a: TensorId,
    b: TensorId,
    gout: &[f64],
    out_shape: &[usize],
) {
    let sa = inputs[a].tensor.shape.clone();
    let sb = inputs[b].tensor.shape.clone();
    let stra = broadcast_strides(&sa, out_shape);
    let strb = broadcast_strides(&sb, out_shape);
    let ostr = strides_of(out_shape);
    let map = |flat: usize, strides: &[usize]| -> usize {
        let mut idx = 0;
        for d in 0..out_shape.len() {
            idx += ((flat / ostr[d]) % out_shape[d]) * strides[d];
        }
        idx
    };
    // Expanded per-element gradients, then reduced over broadcast axes.
    let (need_a, need_b) =
        (inputs[a].tensor.grad.is_some(), inputs[b].tensor.grad.is_some());
    if need_a {
        let expanded: Vec<f64> = match kind {
            BinaryKind::Add | BinaryKind::Sub => gout.to_vec(),
            BinaryKind::Mul => {
                let bd = &inputs[b].tensor.data;
                gout.iter().enumerate().map(|(f, &g)| g * bd[map(f, &strb)]).collect()
            }
            BinaryKind::Div => {
                let bd = &inputs[b].tensor.data;
                gout.iter().enumerate().map(|(f, &g)| g / bd[map(f, &strb)]).collect()
            }
        };
        let contrib = reduce_to_shape(&expanded, out_shape, &sa);
        accumulate(&mut inputs[a], &contrib);
    }
    if need_b {
        let expanded: Vec<f64> = match kind {
            BinaryKind::Add => gout.to_vec(),
            BinaryKind::Sub => gout.iter().map(|&g| -g).collect(),
            BinaryKind::Mul => {
                let ad = &inputs[a].tensor.data;
                gout.iter().enumerate().map(|(f, &g)| g * ad[map(f, &stra)]).collect()
            }
            BinaryKind::Div => {
                let ad = &inputs[a].tensor.data;
                let bd = &inputs[b].tensor.data;
                gout.iter()
                    .enumerate()
                    .map(|(f, &g)| {
                        let vb = bd[map(f, &strb)];
                        -g * ad[map(f, &stra)] / (vb * vb)
                    })
                    .collect()
            }
        };
        let contrib = reduce_to_shape(&expanded, out_shape, &sb);
        accumulate(&mut inputs[b], &contrib);
    }
}

fn reduce_forward(
    data: &[f64],
    shape: &[usize],
    axes: &[usize],
    keepdim: bool,
    mean: bool,
) -> (Vec<usize>, Vec<f64>, usize) {
    let mut out_shape = Vec::new();
    for (d, &s) in shape.iter().enumerate() {
        if axes.contains(&d) {
            if keepdim {
                out_shape.push(1);
            }
        } else {
            out_shape.push(s);
        }
    }
    let count: usize = axes.iter().map(|&a| shape[a]).product();
    let istr = strides_of(shape);
    let kept: Vec<usize> = (0..shape.len()).filter(|d| !axes.contains(d)).collect();
    let kept_shape: Vec<usize> = kept.iter().map(|&d| shape[d]).collect();
    let kstr = strides_of(&kept_shape);
    let mut out = vec![0.0; kept_shape.iter().product::<usize>().max(1)];
    for (flat, &v) in data.iter().enumerate() {
        let mut o = 0usize;
        for (kd, &d) in kept.iter().enumerate() {
            o += ((flat / istr[d]) % shape[d]) * kstr[kd];
        }
        out[o] += v;
    }
    if mean && count > 0 {
        for v in out.iter_mut() {
            *v /= count as f64;
        }
    }
    (out_shape, out, count)
}

fn reduce_backward(
    gout: &[f64],
    in_shape: &[usize],
    axes: &[usize],
    _keepdim: bool,
    mean: bool,
) -> Vec<f64> {
    let count: usize = axes.iter().map(|&a| in_shape[a]).product();
    let scale = if mean { 1.0 / count as f64 } else { 1.0 };
    let istr = strides_of(in_shape);
    let kept: Vec<usize> = (0..in_shape.len()).filter(|d| !axes.contains(d)).collect();
    let kept_shape: Vec<usize> = kept.iter().map(|&d| in_shape[d]).collect();
    let kstr = strides_of(&kept_shape);
    let numel: usize = in_shape.iter().product();
    let mut contrib = vec![0.0; numel];
    for (flat, c) in contrib.iter_mut().enumerate() {
        let mut o = 0usize;
        for (kd, &d) in kept.iter().enumerate() {
            o += ((flat / istr[d]) % in_shape[d]) * kstr[kd];
        }
        *c = gout[o] * scale;
    }
    contrib
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let istr = strides_of(shape);
    let ostr = strides_of(&out_shape);
    let mut out = vec![0.0; data.len()];
    for (oflat, o) in out.iter_mut().enumerate() {
        let mut iflat = 0usize;
        for d in 0..out_shape.len() {
            let coord = (oflat / ostr[d]) % out_shape[d];
            iflat += coord * istr[perm[d]];
        }
        *o = data[iflat];
    }
    out
}
