use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::kernels::{col2im, gemm, im2col, softmax_rows, softmax_rows_backward};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, Tensor};
use crate::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Every differentiable kernel the engine provides.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Sigmoid,
    Relu,
    Tanh,
    Exp,
    Ln,
    Scale,
    SoftmaxLast,
    Conv2dSame,
    Mean,
    Sum,
    SumAxis,
    Mse,
    Concat,
    Slice,
    Transpose,
    Reshape,
    LayerNorm,
    Attention,
    Gather,
}

impl OpKind {
    pub const ALL: [OpKind; 24] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::MatMul,
        OpKind::Sigmoid,
        OpKind::Relu,
        OpKind::Tanh,
        OpKind::Exp,
        OpKind::Ln,
        OpKind::Scale,
        OpKind::SoftmaxLast,
        OpKind::Conv2dSame,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::SumAxis,
        OpKind::Mse,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::LayerNorm,
        OpKind::Attention,
        OpKind::Gather,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::MatMul => "matmul",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Ln => "ln",
            OpKind::Scale => "scale",
            OpKind::SoftmaxLast => "softmax-lastdim",
            OpKind::Conv2dSame => "conv2d-same",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::SumAxis => "sum-axis",
            OpKind::Mse => "mse",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::LayerNorm => "layernorm",
            OpKind::Attention => "scaled-dot-attention",
            OpKind::Gather => "gather",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = AutodiffError;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| AutodiffError::Unsupported(s.to_string()))
    }
}

/// Attributes for [`Graph::forward_op`]; each kind reads only the fields it needs.
#[derive(Clone, Debug, Default)]
pub struct OpAttrs {
    pub axis: Option<usize>,
    pub range: Option<(usize, usize)>,
    pub scale: Option<f64>,
    pub eps: Option<f64>,
    pub shape: Option<Vec<usize>>,
    pub index: Option<Arc<Vec<usize>>>,
    pub keepdim: bool,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Sigmoid,
    Relu,
    Tanh,
    Exp,
    Ln,
    Scale(f64),
    SoftmaxLast,
    Conv2d,
    Mean,
    Sum,
    SumAxis { axis: usize },
    Mse,
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    Transpose,
    Reshape,
    LayerNorm { rstd: Vec<f64> },
    Attention { scale: f64, probs: Vec<f64> },
    Gather { index: Arc<Vec<usize>> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Debug, Clone, Copy)]
struct ParamLink {
    store: u64,
    param: ParamId,
    node: usize,
}

/// Tape of recorded operations.
///
/// Nodes are appended in execution order, so every node's inputs precede it.
/// A graph is built fresh for each forward pass and dropped afterwards.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    links: Vec<ParamLink>,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutodiffError {
    AutodiffError::Shape { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, inputs: Vec::new(), value, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Records a parameter of `store` as a leaf. Frozen stores yield constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.leaf(store.value(id).clone(), !store.is_frozen());
        if !store.is_frozen() {
            self.links.push(ParamLink { store: store.uid(), param: id, node: v.0 });
        }
        v
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

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Copy of `v`'s value cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    /// Adds the gradients accumulated on the leaves of `store` into the store.
    /// Parameters that were recorded but received no contribution get zeros.
    pub fn write_param_grads(&self, store: &mut ParamStore) {
        let uid = store.uid();
        for link in self.links.iter().filter(|l| l.store == uid) {
            let node = &self.nodes[link.node];
            match &node.grad {
                Some(g) => store.accumulate_grad(link.param, g),
                None => store.accumulate_grad(link.param, &Tensor::zeros(node.value.shape())),
            }
        }
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { op, inputs, value, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Generic dispatcher over [`OpKind`].
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var], attrs: &OpAttrs) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(AutodiffError::Contract(format!("{kind} takes {n} inputs, got {}", inputs.len())))
            }
        };
        let need = |name: &str| AutodiffError::Contract(format!("{kind} requires attribute `{name}`"));
        match kind {
            OpKind::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            OpKind::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            OpKind::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            OpKind::Div => arity(2).and_then(|_| self.div(inputs[0], inputs[1])),
            OpKind::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            OpKind::Sigmoid => arity(1).map(|_| self.sigmoid(inputs[0])),
            OpKind::Relu => arity(1).map(|_| self.relu(inputs[0])),
            OpKind::Tanh => arity(1).map(|_| self.tanh(inputs[0])),
            OpKind::Exp => arity(1).map(|_| self.exp(inputs[0])),
            OpKind::Ln => arity(1).map(|_| self.ln(inputs[0])),
            OpKind::Scale => {
                arity(1)?;
                Ok(self.scale(inputs[0], attrs.scale.ok_or_else(|| need("scale"))?))
            }
            OpKind::SoftmaxLast => arity(1).and_then(|_| self.softmax_last(inputs[0])),
            OpKind::Conv2dSame => arity(2).and_then(|_| self.conv2d_same(inputs[0], inputs[1])),
            OpKind::Mean => arity(1).map(|_| self.mean(inputs[0])),
            OpKind::Sum => arity(1).map(|_| self.sum(inputs[0])),
            OpKind::SumAxis => {
                arity(1)?;
                self.sum_axis(inputs[0], attrs.axis.ok_or_else(|| need("axis"))?, attrs.keepdim)
            }
            OpKind::Mse => arity(2).and_then(|_| self.mse(inputs[0], inputs[1])),
            OpKind::Concat => self.concat(inputs, attrs.axis.ok_or_else(|| need("axis"))?),
            OpKind::Slice => {
                arity(1)?;
                let (s, e) = attrs.range.ok_or_else(|| need("range"))?;
                self.slice(inputs[0], attrs.axis.ok_or_else(|| need("axis"))?, s, e)
            }
            OpKind::Transpose => arity(1).and_then(|_| self.transpose(inputs[0])),
            OpKind::Reshape => {
                arity(1)?;
                self.reshape(inputs[0], attrs.shape.as_deref().ok_or_else(|| need("shape"))?)
            }
            OpKind::LayerNorm => arity(1).and_then(|_| self.layer_norm(inputs[0], attrs.eps.unwrap_or(1e-5))),
            OpKind::Attention => {
                let scale = attrs.scale.ok_or_else(|| need("scale"))?;
                match inputs.len() {
                    3 => self.attention(inputs[0], inputs[1], inputs[2], None, scale),
                    4 => self.attention(inputs[0], inputs[1], inputs[2], Some(inputs[3]), scale),
                    n => Err(AutodiffError::Contract(format!("{kind} takes 3 or 4 inputs, got {n}"))),
                }
            }
            OpKind::Gather => {
                arity(1)?;
                let index = attrs.index.clone().ok_or_else(|| need("index"))?;
                self.gather(inputs[0], index, attrs.shape.as_deref().ok_or_else(|| need("shape"))?)
            }
        }
    }

    // ---- elementwise binary ------------------------------------------------

    fn binary(&mut self, op: Op, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let (sa_shape, sb_shape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(&sa_shape, &sb_shape).ok_or_else(|| shape_err(name, &sa_shape, &sb_shape))?;
        let f: fn(f64, f64) -> f64 = match op {
            Op::Add => |x, y| x + y,
            Op::Sub => |x, y| x - y,
            Op::Mul => |x, y| x * y,
            Op::Div => |x, y| x / y,
            _ => unreachable!(),
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let data = if sa_shape == sb_shape {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = broadcast_strides(&sa_shape, &out);
            let sb = broadcast_strides(&sb_shape, &out);
            let mut data = vec![0.0; out.iter().product()];
            for_each_broadcast(&out, &sa, &sb, |i, ia, ib| data[i] = f(av[ia], bv[ib]));
            data
        };
        let value = Tensor::new(&out, data)?;
        Ok(self.push(op, vec![a.0, b.0], value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Div, "div", a, b)
    }

    // ---- matmul --------------------------------------------------------------

    /// Batched matrix product over the last two axes. Leading axes must match,
    /// or one operand may be a plain matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = matmul_dims(&sa, &sb).ok_or_else(|| shape_err("matmul", &sa, &sb))?;
        let MatmulDims { batch, m, k, n, a_batched, b_batched, ref out_shape } = dims;
        let mut data = vec![0.0; batch * m * n];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for bi in 0..batch {
            let ao = if a_batched { bi * m * k } else { 0 };
            let bo = if b_batched { bi * k * n } else { 0 };
            gemm(m, k, n, &av[ao..], false, &bv[bo..], false, &mut data[bi * m * n..], 0.0);
        }
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(Op::MatMul, vec![a.0, b.0], value))
    }

    // ---- elementwise unary ---------------------------------------------------

    fn unary(&mut self, op: Op, x: Var, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        self.push(op, vec![x.0], value)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Op::Sigmoid, x, sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Op::Relu, x, |v| v.max(0.0))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Op::Tanh, x, f64::tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Op::Exp, x, f64::exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(Op::Ln, x, f64::ln)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(Op::Scale(c), x, |v| c * v)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| shape_err("softmax-lastdim", &shape, &[]))?;
        let mut value = self.value(x).clone();
        softmax_rows(value.data_mut(), n);
        Ok(self.push(Op::SoftmaxLast, vec![x.0], value))
    }

    // ---- convolution ---------------------------------------------------------

    /// Stride-1 convolution with zero "same" padding.
    /// `x`: (batch, c_in, h, w); `weight`: (c_out, c_in, k, k) with odd `k`.
    pub fn conv2d_same(&mut self, x: Var, weight: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(shape_err("conv2d-same", &sx, &sw));
        }
        let (b, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, k) = (sw[0], sw[2]);
        let hw = h * w;
        let ckk = cin * k * k;
        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let mut out = vec![0.0; b * cout * hw];
        let mut cols = if k == 1 { Vec::new() } else { vec![0.0; ckk * hw] };
        for bi in 0..b {
            let img = &xv[bi * cin * hw..(bi + 1) * cin * hw];
            let src: &[f64] = if k == 1 {
                img
            } else {
                im2col(img, cin, h, w, k, &mut cols);
                &cols
            };
            gemm(cout, ckk, hw, wv, false, src, false, &mut out[bi * cout * hw..], 0.0);
        }
        let value = Tensor::new(&[b, cout, h, w], out)?;
        Ok(self.push(Op::Conv2d, vec![x.0, weight.0], value))
    }

    // ---- reductions ----------------------------------------------------------

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum() / v.numel().max(1) as f64;
        self.push(Op::Mean, vec![x.0], Tensor::scalar(m))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::Sum, vec![x.0], Tensor::scalar(s))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("sum-axis", &shape, &[axis]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(Op::SumAxis { axis }, vec![x.0], value))
    }

    /// Mean squared difference of two same-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err("mse", sa, sb));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let n = av.len().max(1) as f64;
        let s: f64 = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum();
        Ok(self.push(Op::Mse, vec![a.0, b.0], Tensor::scalar(s / n)))
    }

    // ---- structural ----------------------------------------------------------

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| AutodiffError::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(Op::Concat { axis }, xs.iter().map(|v| v.0).collect(), value))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(shape_err("slice", &shape, &[axis, start, end]));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(Op::Slice { axis, start }, vec![x.0], value))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err("transpose", &shape, &[]));
        }
        let r = shape.len();
        let (m, n) = (shape[r - 2], shape[r - 1]);
        let batch: usize = shape[..r - 2].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        transpose_into(xv, &mut out, batch, m, n);
        let mut out_shape = shape;
        out_shape.swap(r - 2, r - 1);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(Op::Transpose, vec![x.0], value))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![x.0], value))
    }

    /// Normalizes each row of the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| shape_err("layernorm", &shape, &[]))?;
        let mut value = self.value(x).clone();
        let mut rstd = Vec::with_capacity(value.numel() / n.max(1));
        for row in value.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        Ok(self.push(Op::LayerNorm { rstd }, vec![x.0], value))
    }

    /// Fused `softmax(scale * q k^T + bias) v` over the last two axes.
    ///
    /// `q`: (.., lq, d), `k`: (.., lk, d), `v`: (.., lk, dv), optional `bias`:
    /// (.., lq, lk). All leading axes must be identical. A bias of `-inf`
    /// removes a key entirely.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, bias: Option<Var>, scale: f64) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q).to_vec(), self.shape(k).to_vec(), self.shape(v).to_vec());
        let r = sq.len();
        let ok = r >= 2
            && sk.len() == r
            && sv.len() == r
            && sq[..r - 2] == sk[..r - 2]
            && sq[..r - 2] == sv[..r - 2]
            && sq[r - 1] == sk[r - 1]
            && sk[r - 2] == sv[r - 2];
        if !ok {
            return Err(shape_err("scaled-dot-attention", &sq, &sk));
        }
        let batch: usize = sq[..r - 2].iter().product();
        let (lq, d, lk, dv) = (sq[r - 2], sq[r - 1], sk[r - 2], sv[r - 1]);
        if let Some(b) = bias {
            let mut want = sq[..r - 2].to_vec();
            want.extend([lq, lk]);
            if self.shape(b) != want.as_slice() {
                return Err(shape_err("scaled-dot-attention", &want, self.shape(b)));
            }
        }
        let mut probs = vec![0.0; batch * lq * lk];
        let mut out = vec![0.0; batch * lq * dv];
        {
            let qv = self.value(q).data();
            let kv = self.value(k).data();
            let vv = self.value(v).data();
            for bi in 0..batch {
                let p = &mut probs[bi * lq * lk..(bi + 1) * lq * lk];
                gemm(lq, d, lk, &qv[bi * lq * d..], false, &kv[bi * lk * d..], true, p, 0.0);
                for s in p.iter_mut() {
                    *s *= scale;
                }
                if let Some(b) = bias {
                    let bv = &self.value(b).data()[bi * lq * lk..(bi + 1) * lq * lk];
                    for (s, bb) in p.iter_mut().zip(bv) {
                        *s += bb;
                    }
                }
                softmax_rows(p, lk);
                gemm(lq, lk, dv, p, false, &vv[bi * lk * dv..], false, &mut out[bi * lq * dv..], 0.0);
            }
        }
        let mut out_shape = sq[..r - 2].to_vec();
        out_shape.extend([lq, dv]);
        let value = Tensor::new(&out_shape, out)?;
        let mut inputs = vec![q.0, k.0, v.0];
        if let Some(b) = bias {
            inputs.push(b.0);
        }
        Ok(self.push(Op::Attention { scale, probs }, inputs, value))
    }

    /// Attention probabilities of an attention node (rows sum to one).
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`. Gradients scatter-add back.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        let n_in = self.value(x).numel();
        if numel != index.len() || index.iter().any(|&i| i >= n_in) {
            return Err(shape_err("gather", self.shape(x), shape));
        }
        let xv = self.value(x).data();
        let out = index.iter().map(|&i| xv[i]).collect();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::Gather { index }, vec![x.0], value))
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&shape, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            let input_grads = self.input_grads(i, &g)?;
            for (&inp, ig) in self.nodes[i].inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match &mut grads[inp] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(())
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn input_grads(&self, i: usize, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let node = &self.nodes[i];
        let inp = |j: usize| &self.nodes[node.inputs[j]];
        let wants = |j: usize| inp(j).requires_grad;
        let gd = g.data();
        let out = &node.value;
        let res = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                let a = &inp(0).value;
                let b = &inp(1).value;
                let (av, bv) = (a.data(), b.data());
                let mut ga = wants(0).then(|| Tensor::zeros(a.shape()));
                let mut gb = wants(1).then(|| Tensor::zeros(b.shape()));
                let sa = broadcast_strides(a.shape(), out.shape());
                let sb = broadcast_strides(b.shape(), out.shape());
                let op = node.op.clone();
                {
                    let mut ga_d = ga.as_mut().map(|t| t.data_mut());
                    let mut gb_d = gb.as_mut().map(|t| t.data_mut());
                    for_each_broadcast(out.shape(), &sa, &sb, |o, ia, ib| {
                        let gv = gd[o];
                        let (da, db) = match op {
                            Op::Add => (gv, gv),
                            Op::Sub => (gv, -gv),
                            Op::Mul => (gv * bv[ib], gv * av[ia]),
                            Op::Div => (gv / bv[ib], -gv * av[ia] / (bv[ib] * bv[ib])),
                            _ => unreachable!(),
                        };
                        if let Some(d) = ga_d.as_deref_mut() {
                            d[ia] += da;
                        }
                        if let Some(d) = gb_d.as_deref_mut() {
                            d[ib] += db;
                        }
                    });
                }
                vec![ga, gb]
            }
            Op::MatMul => {
                let a = &inp(0).value;
                let b = &inp(1).value;
                let dims = matmul_dims(a.shape(), b.shape()).expect("validated in forward");
                let MatmulDims { batch, m, k, n, a_batched, b_batched, .. } = dims;
                let mut ga = wants(0).then(|| Tensor::zeros(a.shape()));
                let mut gb = wants(1).then(|| Tensor::zeros(b.shape()));
                for bi in 0..batch {
                    let ao = if a_batched { bi * m * k } else { 0 };
                    let bo = if b_batched { bi * k * n } else { 0 };
                    let gslice = &gd[bi * m * n..];
                    if let Some(ga) = ga.as_mut() {
                        gemm(m, n, k, gslice, false, &b.data()[bo..], true, &mut ga.data_mut()[ao..], 1.0);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gemm(k, m, n, &a.data()[ao..], true, gslice, false, &mut gb.data_mut()[bo..], 1.0);
                    }
                }
                vec![ga, gb]
            }
            Op::Sigmoid => vec![Some(zip_map(out, g, |y, gv| gv * y * (1.0 - y)))],
            Op::Relu => vec![Some(zip_map(&inp(0).value, g, |x, gv| if x > 0.0 { gv } else { 0.0 }))],
            Op::Tanh => vec![Some(zip_map(out, g, |y, gv| gv * (1.0 - y * y)))],
            Op::Exp => vec![Some(zip_map(out, g, |y, gv| gv * y))],
            Op::Ln => vec![Some(zip_map(&inp(0).value, g, |x, gv| gv / x))],
            Op::Scale(c) => vec![Some(g.map(|gv| c * gv))],
            Op::SoftmaxLast => {
                let n = *out.shape().last().unwrap_or(&1);
                let mut dx = Tensor::zeros(out.shape());
                softmax_rows_backward(out.data(), gd, n, dx.data_mut());
                vec![Some(dx)]
            }
            Op::Conv2d => {
                let x = &inp(0).value;
                let w = &inp(1).value;
                let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let (cout, k) = (w.shape()[0], w.shape()[2]);
                let hw = h * wd;
                let ckk = cin * k * k;
                let mut gx = wants(0).then(|| Tensor::zeros(x.shape()));
                let mut gw = wants(1).then(|| Tensor::zeros(w.shape()));
                let mut cols = if k == 1 { Vec::new() } else { vec![0.0; ckk * hw] };
                let mut dcols = vec![0.0; ckk * hw];
                for bi in 0..b {
                    let gslice = &gd[bi * cout * hw..(bi + 1) * cout * hw];
                    let img = &x.data()[bi * cin * hw..(bi + 1) * cin * hw];
                    if let Some(gw) = gw.as_mut() {
                        let src: &[f64] = if k == 1 {
                            img
                        } else {
                            im2col(img, cin, h, wd, k, &mut cols);
                            &cols
                        };
                        gemm(cout, hw, ckk, gslice, false, src, true, gw.data_mut(), 1.0);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let dst = &mut gx.data_mut()[bi * cin * hw..(bi + 1) * cin * hw];
                        if k == 1 {
                            gemm(ckk, cout, hw, w.data(), true, gslice, false, dst, 1.0);
                        } else {
                            gemm(ckk, cout, hw, w.data(), true, gslice, false, &mut dcols, 0.0);
                            col2im(&dcols, cin, h, wd, k, dst);
                        }
                    }
                }
                vec![gx, gw]
            }
            Op::Mean => {
                let x = &inp(0).value;
                let s = g.item() / x.numel().max(1) as f64;
                vec![Some(Tensor::full(x.shape(), s))]
            }
            Op::Sum => vec![Some(Tensor::full(inp(0).value.shape(), g.item()))],
            Op::SumAxis { axis } => {
                let x = &inp(0).value;
                let (outer, len, inner) = split_axis(x.shape(), *axis);
                let mut dx = Tensor::zeros(x.shape());
                let d = dx.data_mut();
                for o in 0..outer {
                    let src = &gd[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        d[(o * len + l) * inner..(o * len + l + 1) * inner].copy_from_slice(src);
                    }
                }
                vec![Some(dx)]
            }
            Op::Mse => {
                let a = &inp(0).value;
                let b = &inp(1).value;
                let c = 2.0 * g.item() / a.numel().max(1) as f64;
                let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| c * (x - y)).collect();
                let ga = wants(0).then(|| Tensor::new(a.shape(), diff.clone())).transpose()?;
                let gb = wants(1).then(|| Tensor::new(b.shape(), diff.iter().map(|v| -v).collect())).transpose()?;
                vec![ga, gb]
            }
            Op::Concat { axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                let mut res = Vec::with_capacity(node.inputs.len());
                for j in 0..node.inputs.len() {
                    let s = inp(j).value.shape();
                    let len = s[*axis];
                    if wants(j) {
                        let mut piece = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            piece.extend_from_slice(&gd[start..start + len * inner]);
                        }
                        res.push(Some(Tensor::new(s, piece)?));
                    } else {
                        res.push(None);
                    }
                    offset += len;
                }
                res
            }
            Op::Slice { axis, start } => {
                let x = &inp(0).value;
                let (outer, len, inner) = split_axis(x.shape(), *axis);
                let width = out.shape()[*axis];
                let mut dx = Tensor::zeros(x.shape());
                let d = dx.data_mut();
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    d[dst..dst + width * inner].copy_from_slice(&gd[o * width * inner..(o + 1) * width * inner]);
                }
                vec![Some(dx)]
            }
            Op::Transpose => {
                let s = out.shape();
                let r = s.len();
                let (m, n) = (s[r - 2], s[r - 1]);
                let batch: usize = s[..r - 2].iter().product();
                let mut d = vec![0.0; gd.len()];
                transpose_into(gd, &mut d, batch, m, n);
                vec![Some(Tensor::new(inp(0).value.shape(), d)?)]
            }
            Op::Reshape => vec![Some(g.clone().reshape(inp(0).value.shape())?)],
            Op::LayerNorm { rstd } => {
                let n = *out.shape().last().unwrap_or(&1);
                let mut dx = Tensor::zeros(out.shape());
                for (((yr, gr), dr), r) in out.data().chunks(n).zip(gd.chunks(n)).zip(dx.data_mut().chunks_mut(n)).zip(rstd) {
                    let gm = gr.iter().sum::<f64>() / n as f64;
                    let gym = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = r * (gv - gm - yv * gym);
                    }
                }
                vec![Some(dx)]
            }
            Op::Attention { scale, probs } => {
                let (q, k, v) = (&inp(0).value, &inp(1).value, &inp(2).value);
                let r = q.shape().len();
                let (lq, d) = (q.shape()[r - 2], q.shape()[r - 1]);
                let (lk, dv) = (k.shape()[r - 2], v.shape()[r - 1]);
                let batch: usize = q.shape()[..r - 2].iter().product();
                let has_bias = node.inputs.len() == 4;
                let mut gq = wants(0).then(|| Tensor::zeros(q.shape()));
                let mut gk = wants(1).then(|| Tensor::zeros(k.shape()));
                let mut gv = wants(2).then(|| Tensor::zeros(v.shape()));
                let mut gbias = (has_bias && wants(3)).then(|| Tensor::zeros(&[batch * lq * lk]));
                let mut dp = vec![0.0; lq * lk];
                let mut ds = vec![0.0; lq * lk];
                for bi in 0..batch {
                    let p = &probs[bi * lq * lk..(bi + 1) * lq * lk];
                    let go = &gd[bi * lq * dv..(bi + 1) * lq * dv];
                    if let Some(gv) = gv.as_mut() {
                        gemm(lk, lq, dv, p, true, go, false, &mut gv.data_mut()[bi * lk * dv..], 1.0);
                    }
                    gemm(lq, dv, lk, go, false, &v.data()[bi * lk * dv..], true, &mut dp, 0.0);
                    ds.fill(0.0);
                    softmax_rows_backward(p, &dp, lk, &mut ds);
                    if let Some(gb) = gbias.as_mut() {
                        gb.data_mut()[bi * lq * lk..(bi + 1) * lq * lk].copy_from_slice(&ds);
                    }
                    for s in ds.iter_mut() {
                        *s *= scale;
                    }
                    if let Some(gq) = gq.as_mut() {
                        gemm(lq, lk, d, &ds, false, &k.data()[bi * lk * d..], false, &mut gq.data_mut()[bi * lq * d..], 1.0);
                    }
                    if let Some(gk) = gk.as_mut() {
                        gemm(lk, lq, d, &ds, true, &q.data()[bi * lq * d..], false, &mut gk.data_mut()[bi * lk * d..], 1.0);
                    }
                }
                let mut res = vec![gq, gk, gv];
                if has_bias {
                    res.push(gbias.map(|t| t.reshape(inp(3).value.shape())).transpose()?);
                }
                res
            }
            Op::Gather { index } => {
                let x = &inp(0).value;
                let mut dx = Tensor::zeros(x.shape());
                let d = dx.data_mut();
                for (&src, gv) in index.iter().zip(gd) {
                    d[src] += gv;
                }
                vec![Some(dx)]
            }
        };
        Ok(res)
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn zip_map(a: &Tensor, g: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(g.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn transpose_into(src: &[f64], dst: &mut [f64], batch: usize, m: usize, n: usize) {
    for b in 0..batch {
        let s = &src[b * m * n..(b + 1) * m * n];
        let d = &mut dst[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                d[j * m + i] = s[i * n + j];
            }
        }
    }
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    out_shape: Vec<usize>,
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Option<MatmulDims> {
    if sa.len() < 2 || sb.len() < 2 {
        return None;
    }
    let (ra, rb) = (sa.len(), sb.len());
    let (m, k) = (sa[ra - 2], sa[ra - 1]);
    let (k2, n) = (sb[rb - 2], sb[rb - 1]);
    if k != k2 {
        return None;
    }
    let (ba, bb) = (&sa[..ra - 2], &sb[..rb - 2]);
    let lead = if ba == bb || bb.is_empty() {
        ba
    } else if ba.is_empty() {
        bb
    } else {
        return None;
    };
    let batch = lead.iter().product();
    let mut out_shape = lead.to_vec();
    out_shape.extend([m, n]);
    Some(MatmulDims { batch, m, k, n, a_batched: !ba.is_empty(), b_batched: !bb.is_empty(), out_shape })
}
