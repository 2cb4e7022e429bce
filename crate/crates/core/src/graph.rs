//! Minimal reverse-mode differentiable op set: enough to express the
//! scalar energy network, its explicit gradient network, and to train the
//! latter by a single first-order backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pointwise nonlinearity. ReLU is the training default; softplus/silu are
/// twice differentiable and used by the verification suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softplus,
    Silu,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn f(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            // numerically stable ln(1 + e^x)
            Activation::Softplus => {
                if x > 0.0 {
                    x + (-x).exp().ln_1p()
                } else {
                    x.exp().ln_1p()
                }
            }
            Activation::Silu => x * sigmoid(x),
        }
    }

    /// First derivative; ReLU subgradient at 0 is 0 (fixed tie-break).
    pub fn df(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => sigmoid(x),
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }

    /// Second derivative; for ReLU the gate is treated as locally constant
    /// so this is identically zero.
    pub fn ddf(self, x: f64) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::Softplus => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Silu => {
                let s = sigmoid(x);
                let sp = s * (1.0 - s);
                2.0 * sp + x * sp * (1.0 - 2.0 * s)
            }
        }
    }
}

/// Identifier of a parameter block inside a [`ParamStore`].
pub type BlockId = usize;
/// Identifier of a node inside a [`Graph`].
pub type NodeId = usize;

/// Named parameter tensor plus its gradient accumulator.
#[derive(Debug, Clone)]
pub struct ParamBlock {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Flat storage for all parameter blocks of a model. Graphs reference
/// blocks by id, so two graphs naming the same id share one storage.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    blocks: Vec<ParamBlock>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> BlockId {
        let grad = Tensor::zeros(value.shape());
        self.blocks.push(ParamBlock {
            name: name.into(),
            value,
            grad,
        });
        self.blocks.len() - 1
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn value(&self, id: BlockId) -> &Tensor {
        &self.blocks[id].value
    }

    pub fn value_mut(&mut self, id: BlockId) -> &mut Tensor {
        &mut self.blocks[id].value
    }

    pub fn grad(&self, id: BlockId) -> &Tensor {
        &self.blocks[id].grad
    }

    pub fn block(&self, id: BlockId) -> &ParamBlock {
        &self.blocks[id]
    }

    pub fn zero_grads(&mut self) {
        for b in &mut self.blocks {
            b.grad = Tensor::zeros(b.value.shape());
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = BlockId> {
        0..self.blocks.len()
    }
}

/// Operation kinds of the graph. Convolutions operate on `[C,H,W]`
/// tensors with zero padding; stride-1 layers preserve spatial size when
/// `pad = k/2`.
#[derive(Debug, Clone)]
pub enum Op {
    /// External input, by position in the eval input list.
    Input(usize),
    /// A parameter block used as a value (e.g. the head weights feeding
    /// the gradient network).
    Param(BlockId),
    /// Fixed tensor baked into the graph.
    Const(Tensor),
    Conv2d {
        w: BlockId,
        bias: Option<BlockId>,
        stride: usize,
        pad: usize,
    },
    /// Exact adjoint of `Conv2d` with the same weights/stride/pad;
    /// `out_shape` is the input shape of the matching forward conv.
    Conv2dTranspose {
        w: BlockId,
        stride: usize,
        pad: usize,
        out_shape: [usize; 3],
    },
    Linear {
        w: BlockId,
        bias: Option<BlockId>,
    },
    Pointwise(Activation),
    PointwiseDeriv(Activation),
    Add,
    Mul,
    Sum,
    Reshape(Vec<usize>),
    /// Contiguous slice of the flattened input.
    Slice { start: usize, len: usize },
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
}

/// Acyclic computation graph in topological order (nodes may only
/// reference earlier nodes).
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Cached forward values for one evaluation of a graph.
pub struct Evaluation {
    pub values: Vec<Tensor>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }
}

fn conv_out_spatial(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
}

/// y[co,oh,ow] = bias[co] + Σ x[ci, oh*s+kh-p, ow*s+kw-p] w[co,ci,kh,kw]
pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let [cin, h, win] = match x.shape() {
        [c, h, w] => [*c, *h, *w],
        other => {
            return Err(Error::ShapeMismatch(format!(
                "conv2d input must be [C,H,W], got {other:?}"
            )))
        }
    };
    let [cout, wcin, k, k2] = match w.shape() {
        [a, b, c, d] => [*a, *b, *c, *d],
        other => {
            return Err(Error::ShapeMismatch(format!(
                "conv2d weight must be [Cout,Cin,k,k], got {other:?}"
            )))
        }
    };
    if wcin != cin || k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d: input {:?} vs weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (oh, ow) = conv_out_spatial(h, win, k, stride, pad);
    let mut out = vec![0.0; cout * oh * ow];
    let xd = x.data();
    let wd = w.data();
    if let Some(bt) = bias {
        for co in 0..cout {
            out[co * oh * ow..(co + 1) * oh * ow].fill(bt.data()[co]);
        }
    }
    // kernel-major loops: the inner loop is a branch-free slice update
    for co in 0..cout {
        for ci in 0..cin {
            for kh in 0..k {
                let (ylo, yhi) = valid_out_range(oh, h, kh, stride, pad);
                for kw in 0..k {
                    let wv = wd[((co * cin + ci) * k + kh) * k + kw];
                    if wv == 0.0 {
                        continue;
                    }
                    let (xlo, xhi) = valid_out_range(ow, win, kw, stride, pad);
                    if xlo >= xhi {
                        continue;
                    }
                    for y in ylo..yhi {
                        let ih = y * stride + kh - pad;
                        let ob = (co * oh + y) * ow;
                        let ib = (ci * h + ih) * win;
                        if stride == 1 {
                            let istart = ib + xlo + kw - pad;
                            let n = xhi - xlo;
                            for (o, &v) in out[ob + xlo..ob + xhi]
                                .iter_mut()
                                .zip(&xd[istart..istart + n])
                            {
                                *o += wv * v;
                            }
                        } else {
                            for xo in xlo..xhi {
                                out[ob + xo] += wv * xd[ib + xo * stride + kw - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![cout, oh, ow], out))
}

/// Output indices o with 0 <= o*stride + koff - pad < in_len.
fn valid_out_range(out_len: usize, in_len: usize, koff: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > koff { (pad - koff + stride - 1) / stride } else { 0 };
    let hi = if in_len + pad > koff {
        ((in_len + pad - koff - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Adjoint of `conv2d_forward` in the first argument (no bias).
pub(crate) fn conv2d_transpose_forward(
    y: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    out_shape: [usize; 3],
) -> Result<Tensor> {
    let [cout, oh, ow] = match y.shape() {
        [a, b, c] => [*a, *b, *c],
        other => {
            return Err(Error::ShapeMismatch(format!(
                "conv2d_transpose input must be [C,H,W], got {other:?}"
            )))
        }
    };
    let [wcout, cin, k, _] = match w.shape() {
        [a, b, c, d] => [*a, *b, *c, *d],
        other => {
            return Err(Error::ShapeMismatch(format!(
                "conv2d_transpose weight must be [Cout,Cin,k,k], got {other:?}"
            )))
        }
    };
    let [xcin, h, win] = out_shape;
    if wcout != cout || cin != xcin {
        return Err(Error::ShapeMismatch(format!(
            "conv2d_transpose: y {:?}, w {:?}, out {:?}",
            y.shape(),
            w.shape(),
            out_shape
        )));
    }
    let (eh, ew) = conv_out_spatial(h, win, k, stride, pad);
    if (eh, ew) != (oh, ow) {
        return Err(Error::ShapeMismatch(format!(
            "conv2d_transpose: y spatial {oh}x{ow} inconsistent with forward {eh}x{ew}"
        )));
    }
    let mut out = vec![0.0; cin * h * win];
    let yd = y.data();
    let wd = w.data();
    for co in 0..cout {
        for ci in 0..cin {
            for kh in 0..k {
                let (ylo, yhi) = valid_out_range(oh, h, kh, stride, pad);
                for kw in 0..k {
                    let wv = wd[((co * cin + ci) * k + kh) * k + kw];
                    if wv == 0.0 {
                        continue;
                    }
                    let (xlo, xhi) = valid_out_range(ow, win, kw, stride, pad);
                    if xlo >= xhi {
                        continue;
                    }
                    for yy in ylo..yhi {
                        let ih = yy * stride + kh - pad;
                        let yb = (co * oh + yy) * ow;
                        let ib = (ci * h + ih) * win;
                        if stride == 1 {
                            let istart = ib + xlo + kw - pad;
                            let n = xhi - xlo;
                            for (o, &g) in out[istart..istart + n]
                                .iter_mut()
                                .zip(&yd[yb + xlo..yb + xhi])
                            {
                                *o += wv * g;
                            }
                        } else {
                            for xo in xlo..xhi {
                                out[ib + xo * stride + kw - pad] += wv * yd[yb + xo];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![cin, h, win], out))
}

/// Gradient of a conv output w.r.t. the kernel: correlate `seed` (shaped
/// like the conv output) against `x` (the conv input).
fn conv2d_weight_grad(
    x: &Tensor,
    seed: &Tensor,
    k: usize,
    stride: usize,
    pad: usize,
) -> Tensor {
    let (cin, h, win) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, oh, ow) = (seed.shape()[0], seed.shape()[1], seed.shape()[2]);
    let mut out = vec![0.0; cout * cin * k * k];
    let xd = x.data();
    let sd = seed.data();
    for co in 0..cout {
        for ci in 0..cin {
            for kh in 0..k {
                let (ylo, yhi) = valid_out_range(oh, h, kh, stride, pad);
                for kw in 0..k {
                    let (xlo, xhi) = valid_out_range(ow, win, kw, stride, pad);
                    if xlo >= xhi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for y in ylo..yhi {
                        let ih = y * stride + kh - pad;
                        let sb = (co * oh + y) * ow;
                        let ib = (ci * h + ih) * win;
                        if stride == 1 {
                            let istart = ib + xlo + kw - pad;
                            let n = xhi - xlo;
                            acc += sd[sb + xlo..sb + xhi]
                                .iter()
                                .zip(&xd[istart..istart + n])
                                .map(|(&g, &v)| g * v)
                                .sum::<f64>();
                        } else {
                            for xo in xlo..xhi {
                                acc += sd[sb + xo] * xd[ib + xo * stride + kw - pad];
                            }
                        }
                    }
                    out[((co * cin + ci) * k + kh) * k + kw] = acc;
                }
            }
        }
    }
    Tensor::from_raw(vec![cout, cin, k, k], out)
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

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> NodeId {
        for &i in &inputs {
            assert!(i < self.nodes.len(), "graph inputs must precede the node");
        }
        self.nodes.push(Node { op, inputs });
        self.nodes.len() - 1
    }

    /// Evaluate every node, returning the cached values.
    pub fn forward(&self, params: &ParamStore, inputs: &[&Tensor]) -> Result<Evaluation> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Input(i) => {
                    let t = inputs.get(*i).ok_or_else(|| {
                        Error::InvalidArgument(format!("missing graph input {i}"))
                    })?;
                    (*t).clone()
                }
                Op::Param(id) => params.value(*id).clone(),
                Op::Const(t) => t.clone(),
                Op::Conv2d { w, bias, stride, pad } => conv2d_forward(
                    &values[node.inputs[0]],
                    params.value(*w),
                    bias.map(|b| params.value(b)),
                    *stride,
                    *pad,
                )?,
                Op::Conv2dTranspose { w, stride, pad, out_shape } => conv2d_transpose_forward(
                    &values[node.inputs[0]],
                    params.value(*w),
                    *stride,
                    *pad,
                    *out_shape,
                )?,
                Op::Linear { w, bias } => {
                    let x = &values[node.inputs[0]];
                    let wt = params.value(*w);
                    let (out, inn) = (wt.shape()[0], wt.shape()[1]);
                    if inn != x.numel() {
                        return Err(Error::ShapeMismatch(format!(
                            "linear: weight {:?} vs input numel {}",
                            wt.shape(),
                            x.numel()
                        )));
                    }
                    let mut y = vec![0.0; out];
                    for o in 0..out {
                        let mut acc = bias.map(|b| params.value(b).data()[o]).unwrap_or(0.0);
                        let row = &wt.data()[o * inn..(o + 1) * inn];
                        for (wv, xv) in row.iter().zip(x.data()) {
                            acc += wv * xv;
                        }
                        y[o] = acc;
                    }
                    Tensor::from_raw(vec![out], y)
                }
                Op::Pointwise(a) => values[node.inputs[0]].map(|v| a.f(v)),
                Op::PointwiseDeriv(a) => values[node.inputs[0]].map(|v| a.df(v)),
                Op::Add => values[node.inputs[0]].add(&values[node.inputs[1]])?,
                Op::Mul => values[node.inputs[0]].mul_elem(&values[node.inputs[1]])?,
                Op::Sum => Tensor::from_raw(vec![1], vec![values[node.inputs[0]].sum()]),
                Op::Reshape(shape) => values[node.inputs[0]].reshape(shape)?,
                Op::Slice { start, len } => {
                    let x = &values[node.inputs[0]];
                    if start + len > x.numel() {
                        return Err(Error::ShapeMismatch(format!(
                            "slice [{start}, {start}+{len}) out of bounds for numel {}",
                            x.numel()
                        )));
                    }
                    Tensor::from_raw(vec![*len], x.data()[*start..start + len].to_vec())
                }
            };
            values.push(v);
        }
        Ok(Evaluation { values })
    }

    /// Reverse-mode accumulation from `output` with gradient `seed`.
    /// Parameter gradients are accumulated into `params`; returns the
    /// gradient for each graph input position.
    pub fn backward(
        &self,
        params: &mut ParamStore,
        eval: &Evaluation,
        output: NodeId,
        seed: &Tensor,
    ) -> Result<Vec<Option<Tensor>>> {
        if seed.shape() != eval.value(output).shape() {
            return Err(Error::ShapeMismatch(format!(
                "backward seed {:?} vs output {:?}",
                seed.shape(),
                eval.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output] = Some(seed.clone());
        let mut input_grads: Vec<Option<Tensor>> = Vec::new();

        let accumulate = |slot: &mut Option<Tensor>, g: Tensor| {
            match slot {
                Some(t) => {
                    t.axpy(1.0, &g).expect("gradient shape mismatch");
                }
                None => *slot = Some(g),
            }
        };

        for id in (0..=output).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input(i) => {
                    if input_grads.len() <= *i {
                        input_grads.resize(*i + 1, None);
                    }
                    accumulate(&mut input_grads[*i], g);
                }
                Op::Param(pid) => {
                    let reshaped = g.reshape(params.value(*pid).shape().to_vec().as_slice())?;
                    params.blocks[*pid].grad.axpy(1.0, &reshaped)?;
                }
                Op::Const(_) => {}
                Op::Conv2d { w, bias, stride, pad } => {
                    let x = eval.value(node.inputs[0]);
                    let k = params.value(*w).shape()[2];
                    let gx = conv2d_transpose_forward(
                        &g,
                        params.value(*w),
                        *stride,
                        *pad,
                        [x.shape()[0], x.shape()[1], x.shape()[2]],
                    )?;
                    let gw = conv2d_weight_grad(x, &g, k, *stride, *pad);
                    params.blocks[*w].grad.axpy(1.0, &gw)?;
                    if let Some(b) = bias {
                        let (cout, oh, ow) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                        let mut gb = vec![0.0; cout];
                        for co in 0..cout {
                            gb[co] = g.data()[co * oh * ow..(co + 1) * oh * ow].iter().sum();
                        }
                        params.blocks[*b]
                            .grad
                            .axpy(1.0, &Tensor::from_raw(vec![cout], gb))?;
                    }
                    accumulate(&mut grads[node.inputs[0]], gx);
                }
                Op::Conv2dTranspose { w, stride, pad, .. } => {
                    // adjoint of the adjoint: gradient w.r.t. y is the forward conv
                    let y = eval.value(node.inputs[0]);
                    let gy = conv2d_forward(&g, params.value(*w), None, *stride, *pad)?;
                    if gy.shape() != y.shape() {
                        return Err(Error::ShapeMismatch(
                            "conv2d_transpose backward shape".into(),
                        ));
                    }
                    let k = params.value(*w).shape()[2];
                    // linear in w: grad_w[co,ci,kh,kw] = Σ y[co,oh,ow] g[ci, oh*s+kh-p, ...]
                    let gw = conv2d_weight_grad(&g, y, k, *stride, *pad);
                    params.blocks[*w].grad.axpy(1.0, &gw)?;
                    accumulate(&mut grads[node.inputs[0]], gy);
                }
                Op::Linear { w, bias } => {
                    let x = eval.value(node.inputs[0]);
                    let wt = params.value(*w);
                    let (out, inn) = (wt.shape()[0], wt.shape()[1]);
                    let mut gx = vec![0.0; inn];
                    let mut gw = vec![0.0; out * inn];
                    for o in 0..out {
                        let go = g.data()[o];
                        for i in 0..inn {
                            gx[i] += wt.data()[o * inn + i] * go;
                            gw[o * inn + i] = go * x.data()[i];
                        }
                    }
                    params.blocks[*w]
                        .grad
                        .axpy(1.0, &Tensor::from_raw(vec![out, inn], gw))?;
                    if let Some(b) = bias {
                        params.blocks[*b]
                            .grad
                            .axpy(1.0, &g.reshape(&[out])?)?;
                    }
                    accumulate(
                        &mut grads[node.inputs[0]],
                        Tensor::from_raw(vec![inn], gx).reshape(x.shape())?,
                    );
                }
                Op::Pointwise(a) => {
                    let x = eval.value(node.inputs[0]);
                    let gx = Tensor::from_fn(x.shape(), |i| g.data()[i] * a.df(x.data()[i]));
                    accumulate(&mut grads[node.inputs[0]], gx);
                }
                Op::PointwiseDeriv(a) => {
                    let x = eval.value(node.inputs[0]);
                    let gx = Tensor::from_fn(x.shape(), |i| g.data()[i] * a.ddf(x.data()[i]));
                    accumulate(&mut grads[node.inputs[0]], gx);
                }
                Op::Add => {
                    accumulate(&mut grads[node.inputs[0]], g.clone());
                    accumulate(&mut grads[node.inputs[1]], g);
                }
                Op::Mul => {
                    let a = eval.value(node.inputs[0]);
                    let b = eval.value(node.inputs[1]);
                    accumulate(&mut grads[node.inputs[0]], g.mul_elem(b)?);
                    accumulate(&mut grads[node.inputs[1]], g.mul_elem(a)?);
                }
                Op::Sum => {
                    let x = eval.value(node.inputs[0]);
                    accumulate(&mut grads[node.inputs[0]], Tensor::full(x.shape(), g.data()[0]));
                }
                Op::Reshape(_) => {
                    let x = eval.value(node.inputs[0]);
                    accumulate(&mut grads[node.inputs[0]], g.reshape(x.shape())?);
                }
                Op::Slice { start, len } => {
                    let x = eval.value(node.inputs[0]);
                    let mut gx = Tensor::zeros(x.shape());
                    gx.data_mut()[*start..start + len].copy_from_slice(g.data());
                    accumulate(&mut grads[node.inputs[0]], gx);
                }
            }
        }
        Ok(input_grads)
    }
}

/// Central-difference check of parameter gradients for a scalar-output
/// graph. Samples up to `max_coords` coordinates per block; returns the
/// maximum relative error.
pub fn grad_check(
    graph: &Graph,
    params: &mut ParamStore,
    inputs: &[&Tensor],
    output: NodeId,
    eps: f64,
    max_coords: usize,
) -> Result<f64> {
    let eval = graph.forward(params, inputs)?;
    if eval.value(output).numel() != 1 {
        return Err(Error::InvalidArgument("grad_check needs a scalar output".into()));
    }
    params.zero_grads();
    let seed = Tensor::full(&[1], 1.0).reshape(eval.value(output).shape())?;
    graph.backward(params, &eval, output, &seed)?;
    let analytic: Vec<Tensor> = params.ids().map(|id| params.grad(id).clone()).collect();

    let mut max_rel = 0.0f64;
    for id in 0..params.len() {
        let n = params.value(id).numel();
        let stride = (n / max_coords).max(1);
        for c in (0..n).step_by(stride) {
            let orig = params.value(id).data()[c];
            params.value_mut(id).data_mut()[c] = orig + eps;
            let fp = graph.forward(params, inputs)?.value(output).data()[0];
            params.value_mut(id).data_mut()[c] = orig - eps;
            let fm = graph.forward(params, inputs)?.value(output).data()[0];
            params.value_mut(id).data_mut()[c] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let an = analytic[id].data()[c];
            let denom = an.abs().max(fd.abs()).max(1e-8);
            max_rel = max_rel.max((an - fd).abs() / denom);
        }
    }
    Ok(max_rel)
}
