//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only tape: every op pushes a node holding its
//! forward value and whatever the backward rule needs. Node order is a valid
//! topological order, so [`Graph::backward`] is a single reverse sweep.
//! Nodes are never mutated after they are pushed.

use crate::error::{HlfdError, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv2d,
    MaxPool2,
    BilinearResize,
    ConcatChannels,
    Relu,
    SoftmaxChannels,
    LogSoftmaxChannels,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    ClampMin,
    Sqrt,
    Ln,
    PowScalar,
    AbsPow,
    Sum,
    Mean,
    SumChannels,
    SelectChannel,
    SumPerSample,
    DivPerSample,
    NormalizeChannels,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Conv2d => "conv2d",
            OpKind::MaxPool2 => "max_pool2",
            OpKind::BilinearResize => "bilinear_resize",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::Relu => "relu",
            OpKind::SoftmaxChannels => "softmax_channels",
            OpKind::LogSoftmaxChannels => "log_softmax_channels",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::ClampMin => "clamp_min",
            OpKind::Sqrt => "sqrt",
            OpKind::Ln => "ln",
            OpKind::PowScalar => "pow_scalar",
            OpKind::AbsPow => "abs_pow",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumChannels => "sum_channels",
            OpKind::SelectChannel => "select_channel",
            OpKind::SumPerSample => "sum_per_sample",
            OpKind::DivPerSample => "div_per_sample",
            OpKind::NormalizeChannels => "normalize_channels",
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    MaxPool2 { input: Var, argmax: Vec<usize> },
    Resize { input: Var },
    Concat { inputs: Vec<Var> },
    Relu { input: Var },
    Softmax { input: Var },
    LogSoftmax { input: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { input: Var, c: f64 },
    AddScalar { input: Var },
    ClampMin { input: Var, floor: f64 },
    Sqrt { input: Var },
    Ln { input: Var },
    PowScalar { input: Var, p: f64 },
    AbsPow { input: Var, p: f64 },
    Sum { input: Var },
    Mean { input: Var },
    SumChannels { input: Var },
    SelectChannel { input: Var, channel: usize },
    SumPerSample { input: Var },
    DivPerSample { input: Var, denom: Var },
    NormalizeChannels { input: Var },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::Resize { .. } => OpKind::BilinearResize,
            Op::Concat { .. } => OpKind::ConcatChannels,
            Op::Relu { .. } => OpKind::Relu,
            Op::Softmax { .. } => OpKind::SoftmaxChannels,
            Op::LogSoftmax { .. } => OpKind::LogSoftmaxChannels,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::AddScalar { .. } => OpKind::AddScalar,
            Op::ClampMin { .. } => OpKind::ClampMin,
            Op::Sqrt { .. } => OpKind::Sqrt,
            Op::Ln { .. } => OpKind::Ln,
            Op::PowScalar { .. } => OpKind::PowScalar,
            Op::AbsPow { .. } => OpKind::AbsPow,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::SumChannels { .. } => OpKind::SumChannels,
            Op::SelectChannel { .. } => OpKind::SelectChannel,
            Op::SumPerSample { .. } => OpKind::SumPerSample,
            Op::DivPerSample { .. } => OpKind::DivPerSample,
            Op::NormalizeChannels { .. } => OpKind::NormalizeChannels,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, weight, bias, .. } => vec![*input, *weight, *bias],
            Op::Concat { inputs } => inputs.clone(),
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::DivPerSample { input, denom } => vec![*input, *denom],
            Op::MaxPool2 { input, .. }
            | Op::Resize { input }
            | Op::Relu { input }
            | Op::Softmax { input }
            | Op::LogSoftmax { input }
            | Op::Scale { input, .. }
            | Op::AddScalar { input }
            | Op::ClampMin { input, .. }
            | Op::Sqrt { input }
            | Op::Ln { input }
            | Op::PowScalar { input, .. }
            | Op::AbsPow { input, .. }
            | Op::Sum { input }
            | Op::Mean { input }
            | Op::SumChannels { input }
            | Op::SelectChannel { input, .. }
            | Op::SumPerSample { input }
            | Op::NormalizeChannels { input } => vec![*input],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(HlfdError::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        let kind = op.kind();
        if !value.all_finite() {
            return Err(HlfdError::NonFinite { op: kind.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Inserts an input tensor. Gradients are tracked only when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Accumulated gradient of the last backward root(s) w.r.t. `v`, if any
    /// gradient reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone())
                .expect("gradient shape matches value")
        })
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- image ops ----

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let (n, c_in, h, w) = self.value(input).dims4(OP)?;
        let (c_out, wc, kh, kw) = self.value(weight).dims4(OP)?;
        if kh != kw {
            return Err(HlfdError::shape(OP, format!("non-square kernel {kh}x{kw}")));
        }
        if wc != c_in {
            return Err(HlfdError::shape(
                OP,
                format!("input has {c_in} channels, weight expects {wc}"),
            ));
        }
        if self.value(bias).shape() != [c_out] {
            return Err(HlfdError::shape(
                OP,
                format!("bias shape {:?}, expected [{c_out}]", self.value(bias).shape()),
            ));
        }
        if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(HlfdError::shape(
                OP,
                format!("kernel {kh} does not fit {h}x{w} with padding {padding}, stride {stride}"),
            ));
        }
        let geom = ConvGeom { n, c_in, h, w, c_out, k: kh, stride, padding };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![n, c_out, geom.out_h(), geom.out_w()], out)?;
        self.push(value, Op::Conv2d { input, weight, bias, geom })
    }

    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("max_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(HlfdError::shape("max_pool2", format!("odd spatial dims {h}x{w}")));
        }
        let (out, argmax) = kernels::max_pool2_forward(n, c, h, w, self.value(input).data());
        let value = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        self.push(value, Op::MaxPool2 { input, argmax })
    }

    /// Align-corners bilinear resize of every channel plane.
    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("bilinear_resize")?;
        if out_h == 0 || out_w == 0 {
            return Err(HlfdError::invalid("bilinear_resize target must be at least 1x1"));
        }
        let out = kernels::bilinear_forward(n * c, h, w, out_h, out_w, self.value(input).data());
        let value = Tensor::new(vec![n, c, out_h, out_w], out)?;
        self.push(value, Op::Resize { input })
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = *inputs
            .first()
            .ok_or_else(|| HlfdError::shape(OP, "empty input list"))?;
        let (n, _, h, w) = self.value(first).dims4(OP)?;
        let mut channels = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let (n2, c2, h2, w2) = self.value(v).dims4(OP)?;
            if (n2, h2, w2) != (n, h, w) {
                return Err(HlfdError::shape(
                    OP,
                    format!("N,H,W mismatch: {:?} vs {:?}", self.value(first).shape(), self.value(v).shape()),
                ));
            }
            channels.push(c2);
        }
        let c_total: usize = channels.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * c_total * plane);
        for b in 0..n {
            for (&v, &c) in inputs.iter().zip(&channels) {
                let d = self.value(v).data();
                out.extend_from_slice(&d[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let value = Tensor::new(vec![n, c_total, h, w], out)?;
        self.push(value, Op::Concat { inputs: inputs.to_vec() })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|x| x.max(0.0));
        self.push(value, Op::Relu { input })
    }

    /// Per-pixel softmax across the channel axis, stabilized by subtracting
    /// the per-pixel channel maximum.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let value = channel_softmax(self.value(input), false)?;
        self.push(value, Op::Softmax { input })
    }

    pub fn log_softmax_channels(&mut self, input: Var) -> Result<Var> {
        let value = channel_softmax(self.value(input), true)?;
        self.push(value, Op::LogSoftmax { input })
    }

    // ---- elementwise ----

    fn binary(&mut self, a: Var, b: Var, kind: OpKind, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        same_shape(kind.name(), self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let op = match kind {
            OpKind::Add => Op::Add { a, b },
            OpKind::Sub => Op::Sub { a, b },
            _ => Op::Mul { a, b },
        };
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, OpKind::Mul, |x, y| x * y)
    }

    pub fn scale(&mut self, input: Var, c: f64) -> Result<Var> {
        let value = self.value(input).scale(c);
        self.push(value, Op::Scale { input, c })
    }

    pub fn add_scalar(&mut self, input: Var, c: f64) -> Result<Var> {
        let value = self.value(input).map(|x| x + c);
        self.push(value, Op::AddScalar { input })
    }

    /// `max(x, floor)`; the gradient passes where `x >= floor`.
    pub fn clamp_min(&mut self, input: Var, floor: f64) -> Result<Var> {
        let value = self.value(input).map(|x| x.max(floor));
        self.push(value, Op::ClampMin { input, floor })
    }

    pub fn sqrt(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(f64::sqrt);
        self.push(value, Op::Sqrt { input })
    }

    pub fn ln(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(f64::ln);
        self.push(value, Op::Ln { input })
    }

    /// `x^p` for nonnegative `x`.
    pub fn pow_scalar(&mut self, input: Var, p: f64) -> Result<Var> {
        let value = self.value(input).map(|x| x.powf(p));
        self.push(value, Op::PowScalar { input, p })
    }

    /// `|x|^p`.
    pub fn abs_pow(&mut self, input: Var, p: f64) -> Result<Var> {
        let value = if p == 2.0 {
            self.value(input).map(|x| x * x)
        } else {
            self.value(input).map(|x| x.abs().powf(p))
        };
        self.push(value, Op::AbsPow { input, p })
    }

    // ---- reductions ----

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { input })
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean { input })
    }

    /// N×C×H×W → N×1×H×W.
    pub fn sum_channels(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("sum_channels")?;
        let d = self.value(input).data();
        let plane = h * w;
        let mut out = vec![0.0; n * plane];
        for b in 0..n {
            let dst = &mut out[b * plane..(b + 1) * plane];
            for ch in 0..c {
                let src = &d[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                dst.iter_mut().zip(src).for_each(|(o, s)| *o += s);
            }
        }
        let value = Tensor::new(vec![n, 1, h, w], out)?;
        self.push(value, Op::SumChannels { input })
    }

    /// N×C×H×W → N×1×H×W holding channel `channel`.
    pub fn select_channel(&mut self, input: Var, channel: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("select_channel")?;
        if channel >= c {
            return Err(HlfdError::shape(
                "select_channel",
                format!("channel {channel} out of {c}"),
            ));
        }
        let d = self.value(input).data();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * plane);
        for b in 0..n {
            out.extend_from_slice(&d[(b * c + channel) * plane..(b * c + channel + 1) * plane]);
        }
        let value = Tensor::new(vec![n, 1, h, w], out)?;
        self.push(value, Op::SelectChannel { input, channel })
    }

    /// Sums everything but the leading axis; the result keeps the input rank
    /// with all trailing dims set to 1.
    pub fn sum_per_sample(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let n = t.shape()[0];
        let per = t.numel() / n;
        let out: Vec<f64> = t.data().chunks_exact(per).map(|c| c.iter().sum()).collect();
        let mut shape = vec![1; t.shape().len()];
        shape[0] = n;
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::SumPerSample { input })
    }

    /// Divides each batch item of `input` by the matching entry of `denom`,
    /// which must hold one value per batch item.
    pub fn div_per_sample(&mut self, input: Var, denom: Var) -> Result<Var> {
        let (x, s) = (self.value(input), self.value(denom));
        let n = x.shape()[0];
        if s.numel() != n || s.shape()[0] != n {
            return Err(HlfdError::shape(
                "div_per_sample",
                format!("denominator {:?} for input {:?}", s.shape(), x.shape()),
            ));
        }
        let per = x.numel() / n;
        let data = x
            .data()
            .chunks_exact(per)
            .zip(s.data())
            .flat_map(|(chunk, &d)| chunk.iter().map(move |v| v / d))
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push(value, Op::DivPerSample { input, denom })
    }

    /// Divides each pixel's channel vector by its channel sum.
    pub fn normalize_channels(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("normalize_channels")?;
        let d = self.value(input).data();
        let plane = h * w;
        let mut out = vec![0.0; d.len()];
        for b in 0..n {
            for p in 0..plane {
                let idx = |ch: usize| (b * c + ch) * plane + p;
                let s: f64 = (0..c).map(|ch| d[idx(ch)]).sum();
                for ch in 0..c {
                    out[idx(ch)] = d[idx(ch)] / s;
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        self.push(value, Op::NormalizeChannels { input })
    }

    // ---- backward ----

    /// Propagates d(root)/d(node) to every node that requires a gradient.
    /// Gradients accumulate across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(HlfdError::shape(
                "backward",
                format!("root must be scalar, got {:?}", self.value(root).shape()),
            ));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut tmp: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        tmp[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = tmp[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut tmp);
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], tmp: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let x = nodes[input.0].value.data();
                let wt = nodes[weight.0].value.data();
                // The three inputs are distinct nodes, so take each buffer out
                // of the scratch list in turn.
                let mut gi = slot(nodes, tmp, *input).map(std::mem::take);
                let mut gw = slot(nodes, tmp, *weight).map(std::mem::take);
                let mut gb = slot(nodes, tmp, *bias).map(std::mem::take);
                kernels::conv2d_backward(
                    geom,
                    x,
                    wt,
                    g,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                for (v, buf) in [(*input, gi), (*weight, gw), (*bias, gb)] {
                    if let Some(buf) = buf {
                        tmp[v.0] = Some(buf);
                    }
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if let Some(dx) = slot(nodes, tmp, *input) {
                    for (&a, &gv) in argmax.iter().zip(g) {
                        dx[a] += gv;
                    }
                }
            }
            Op::Resize { input } => {
                let (n, c, h, w) = nodes[input.0].value.dims4("bilinear_resize").unwrap();
                let (_, _, oh, ow) = node.value.dims4("bilinear_resize").unwrap();
                if let Some(dx) = slot(nodes, tmp, *input) {
                    kernels::bilinear_backward(n * c, h, w, oh, ow, g, dx);
                }
            }
            Op::Concat { inputs } => {
                let (n, c_total, h, w) = node.value.dims4("concat_channels").unwrap();
                let plane = h * w;
                let mut offset = 0;
                for v in inputs {
                    let c = nodes[v.0].value.shape()[1];
                    if let Some(dx) = slot(nodes, tmp, *v) {
                        for b in 0..n {
                            let src = &g[(b * c_total + offset) * plane..(b * c_total + offset + c) * plane];
                            let dst = &mut dx[b * c * plane..(b + 1) * c * plane];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += c;
                }
            }
            Op::Relu { input } => {
                let x = nodes[input.0].value.data();
                if let Some(dx) = slot(nodes, tmp, *input) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(x) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Softmax { input } => {
                let (n, c, h, w) = node.value.dims4("softmax_channels").unwrap();
                if let Some(dx) = slot(nodes, tmp, *input) {
                    let plane = h * w;
                    for b in 0..n {
                        for p in 0..plane {
                            let idx = |ch: usize| (b * c + ch) * plane + p;
                            let dot: f64 = (0..c).map(|ch| y[idx(ch)] * g[idx(ch)]).sum();
                            for ch in 0..c {
                                dx[idx(ch)] += y[idx(ch)] * (g[idx(ch)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { input } => {
                let (n, c, h, w) = node.value.dims4("log_softmax_channels").unwrap();
                if let Some(dx) = slot(nodes, tmp, *input) {
                    let plane = h * w;
                    for b in 0..n {
                        for p in 0..plane {
                            let idx = |ch: usize| (b * c + ch) * plane + p;
                            let gsum: f64 = (0..c).map(|ch| g[idx(ch)]).sum();
                            for ch in 0..c {
                                dx[idx(ch)] += g[idx(ch)] - y[idx(ch)].exp() * gsum;
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = slot(nodes, tmp, *a) {
                    da.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
                if let Some(db) = slot(nodes, tmp, *b) {
                    db.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
            }
            Op::Sub { a, b } => {
                if let Some(da) = slot(nodes, tmp, *a) {
                    da.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
                if let Some(db) = slot(nodes, tmp, *b) {
                    db.iter_mut().zip(g).for_each(|(d, gv)| *d -= gv);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(da) = slot(nodes, tmp, *a) {
                    for ((d, gv), bx) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * bx;
                    }
                }
                if let Some(db) = slot(nodes, tmp, *b) {
                    for ((d, gv), ax) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * ax;
                    }
                }
            }
            Op::Scale { input, c } => {
                if let Some(dx) = slot(nodes, tmp, *input) {
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += c * gv);
                }
            }
            Op::AddScalar { input } => {
                if let Some(dx) = slot(nodes, tmp, *input) {
                    dx.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
            }
            Op::ClampMin { input, floor } => {
                let x = nodes[input.0].value.data();
                if let Some(dx) = slot(nodes, tmp, *input) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(x) {
                        if xv >= *floor {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sqrt { input } => {
                if let Some(dx) = slot(nodes, tmp, *input) {
                    for ((d, gv), yv) in dx.iter_mut().zip(g).zip(y) {
                        *d += gv * 0.5 / yv;
                    }
                }
            }
            Op::Ln { input } => {
                let x = nodes[input.0].value.data();
                if let Some(dx) = slot(nodes, tmp, *input) {
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(x) {
                        *d += gv / xv;
                    }
                }
            }
            Op::PowScalar { input, p } => {
                let x = nodes[input.0].value.data();
                if let Some(dx) = slot(nodes, tmp, *input) {
                    for ((d, gv), xv) in dx.iter_mut().zip(g).zip(x) {
                        *d += gv * p * xv.powf(p - 1.0);
                    }
                }
            }
            Op::AbsPow { input, p } => {
                let x = nodes[input.0].value.data();
                if let Some(dx) = slot(nodes, tmp, *input) {
                    for ((d, gv), &xv) in dx.iter_mut().zip(g).zip(x) {
                        let deriv = if *p == 2.0 {
                            2.0 * xv
                        } else if xv == 0.0 {
                            0.0
                        } else {
                            p * xv.abs().powf(p - 1.0) * xv.signum()
                        };
                        *d += gv * deriv;
                    }
                }
            }
            Op::Sum { input } => {
                if let Some(dx) = slot(nodes, tmp, *input) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { input } => {
                if let Some(dx) = slot(nodes, tmp, *input) {
                    let s = g[0] / dx.len() as f64;
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::SumChannels { input } => {
                let (n, c, h, w) = nodes[input.0].value.dims4("sum_channels").unwrap();
                if let Some(dx) = slot(nodes, tmp, *input) {
                    let plane = h * w;
                    for b in 0..n {
                        let src = &g[b * plane..(b + 1) * plane];
                        for ch in 0..c {
                            let dst = &mut dx[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    }
                }
            }
            Op::SelectChannel { input, channel } => {
                let (n, c, h, w) = nodes[input.0].value.dims4("select_channel").unwrap();
                if let Some(dx) = slot(nodes, tmp, *input) {
                    let plane = h * w;
                    for b in 0..n {
                        let src = &g[b * plane..(b + 1) * plane];
                        let off = (b * c + channel) * plane;
                        dx[off..off + plane].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::SumPerSample { input } => {
                let n = g.len();
                if let Some(dx) = slot(nodes, tmp, *input) {
                    let per = dx.len() / n;
                    for (chunk, gv) in dx.chunks_exact_mut(per).zip(g) {
                        chunk.iter_mut().for_each(|d| *d += gv);
                    }
                }
            }
            Op::DivPerSample { input, denom } => {
                let s = nodes[denom.0].value.data();
                let n = s.len();
                let per = y.len() / n;
                if let Some(dx) = slot(nodes, tmp, *input) {
                    for b in 0..n {
                        for k in b * per..(b + 1) * per {
                            dx[k] += g[k] / s[b];
                        }
                    }
                }
                if let Some(ds) = slot(nodes, tmp, *denom) {
                    for b in 0..n {
                        let dot: f64 = (b * per..(b + 1) * per).map(|k| g[k] * y[k]).sum();
                        ds[b] -= dot / s[b];
                    }
                }
            }
            Op::NormalizeChannels { input } => {
                let x = nodes[input.0].value.data();
                let (n, c, h, w) = node.value.dims4("normalize_channels").unwrap();
                if let Some(dx) = slot(nodes, tmp, *input) {
                    let plane = h * w;
                    for b in 0..n {
                        for p in 0..plane {
                            let idx = |ch: usize| (b * c + ch) * plane + p;
                            let s: f64 = (0..c).map(|ch| x[idx(ch)]).sum();
                            let dot: f64 = (0..c).map(|ch| g[idx(ch)] * y[idx(ch)]).sum();
                            for ch in 0..c {
                                dx[idx(ch)] += (g[idx(ch)] - dot) / s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient buffer for `v`, or None if `v` needs no gradient.
fn slot<'a>(nodes: &[Node], tmp: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.numel();
    Some(tmp[v.0].get_or_insert_with(|| vec![0.0; len]))
}

/// Per-pixel (log-)softmax across channels with max subtraction.
pub fn channel_softmax(x: &Tensor, log: bool) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4(if log { "log_softmax_channels" } else { "softmax_channels" })?;
    let d = x.data();
    let plane = h * w;
    let mut out = vec![0.0; d.len()];
    for b in 0..n {
        for p in 0..plane {
            let idx = |ch: usize| (b * c + ch) * plane + p;
            let m = (0..c).map(|ch| d[idx(ch)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|ch| (d[idx(ch)] - m).exp()).sum();
            if log {
                let lz = z.ln();
                for ch in 0..c {
                    out[idx(ch)] = d[idx(ch)] - m - lz;
                }
            } else {
                for ch in 0..c {
                    out[idx(ch)] = (d[idx(ch)] - m).exp() / z;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}
