//! The recording tape: primitive applications and reverse-mode replay.

use super::params::{Gradients, ParamId, ParamStore};
use super::{Shape, Tensor, TensorError};

/// Tensor axis, used by the softmax family.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Axis {
    N,
    C,
    H,
    W,
}

/// Geometry of a direct convolution. Weights are `(c_out, c_in/groups, kh, kw)`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn unit() -> Self {
        Conv2dSpec {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

/// Geometry of a transposed convolution. Weights are
/// `(c_in, c_out/groups, kh, kw)`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ConvT2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

/// The primitive operations the tape can record.
///
/// Each primitive documents its input arity and shape contract in
/// [`Tape::apply`]'s validation; the catalog in `ops` composes everything
/// else out of these.
#[derive(Clone, Debug)]
pub enum Prim {
    /// Elementwise `a + b`, same shapes.
    Add,
    /// Elementwise `a - b`, same shapes.
    Sub,
    /// Elementwise `a * b`, same shapes.
    Mul,
    /// Elementwise `a / b`, same shapes.
    Div,
    /// `x * k` for a compile-time constant `k`.
    Scale(f64),
    /// `x + k` for a compile-time constant `k`.
    Shift(f64),
    Relu,
    Sigmoid,
    /// Inputs `[x, weight]`.
    Conv2d(Conv2dSpec),
    /// Inputs `[x, weight]`.
    ConvT2d(ConvT2dSpec),
    /// 2x2 max pooling with stride 2; ties go to the first position in
    /// row-major window order.
    MaxPool2,
    /// 2x2 average pooling with stride 2.
    AvgPool2,
    /// Mean over the spatial extent, producing `(n, c, 1, 1)`.
    GlobalAvgPool,
    /// Bilinear x2 upsampling, align-corners false.
    BilinearUp2,
    /// Concatenation over the channel axis; any number of inputs.
    ConcatC,
    /// Channel slice `[start, start+len)`.
    SliceC { start: usize, len: usize },
    /// ShuffleNet channel permutation for the given group count.
    ShuffleC { groups: usize },
    Softmax(Axis),
    LogSoftmax(Axis),
    /// Softmax along W restricted to the set bits of `mask`; masked-out
    /// entries produce exactly 0 and receive zero gradient.
    MaskedSoftmaxW { mask: u32 },
    /// Sum of all entries, producing a scalar.
    SumAll,
    /// Mean of all entries, producing a scalar.
    MeanAll,
    /// Inputs `[x, s]` with `s: (n, c, 1, 1)`: scales each channel map.
    MulChannelGate,
    /// Inputs `[x, b]` with `b: (1, c, 1, 1)`: adds a per-channel bias.
    AddChannelBias,
    /// Inputs `[x, v]` with `v: (1, 1, 1, k)`: computes `x * v[index]`.
    MulElem { index: usize },
    /// Inputs `[x, gamma, beta]`: group normalization with affine, biased
    /// variance, per-sample statistics.
    GroupNorm { groups: usize, eps: f64 },
}

impl Prim {
    pub fn name(&self) -> &'static str {
        match self {
            Prim::Add => "add",
            Prim::Sub => "sub",
            Prim::Mul => "mul",
            Prim::Div => "div",
            Prim::Scale(_) => "scale",
            Prim::Shift(_) => "shift",
            Prim::Relu => "relu",
            Prim::Sigmoid => "sigmoid",
            Prim::Conv2d(_) => "conv2d",
            Prim::ConvT2d(_) => "convt2d",
            Prim::MaxPool2 => "max_pool2",
            Prim::AvgPool2 => "avg_pool2",
            Prim::GlobalAvgPool => "global_avg_pool",
            Prim::BilinearUp2 => "bilinear_up2",
            Prim::ConcatC => "concat_c",
            Prim::SliceC { .. } => "slice_c",
            Prim::ShuffleC { .. } => "shuffle_c",
            Prim::Softmax(_) => "softmax",
            Prim::LogSoftmax(_) => "log_softmax",
            Prim::MaskedSoftmaxW { .. } => "masked_softmax_w",
            Prim::SumAll => "sum_all",
            Prim::MeanAll => "mean_all",
            Prim::MulChannelGate => "mul_channel_gate",
            Prim::AddChannelBias => "add_channel_bias",
            Prim::MulElem { .. } => "mul_elem",
            Prim::GroupNorm { .. } => "group_norm",
        }
    }
}

/// Forward-pass byproducts kept for the backward pass.
#[derive(Clone, Debug)]
enum Aux {
    None,
    /// Flat input index of each pooled maximum.
    Argmax(Vec<u32>),
    /// Per-(sample, group) mean and inverse standard deviation.
    GnStats { mean: Vec<f64>, inv_std: Vec<f64> },
}

#[derive(Debug)]
enum Source {
    Input,
    Param(ParamId),
    Op { prim: Prim, inputs: Vec<NodeId> },
}

#[derive(Debug)]
struct Node {
    source: Source,
    /// `None` exactly for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    shape: Shape,
    aux: Aux,
}

/// Index of a recorded tape node.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

/// An ordered record of primitive applications. Inputs are always recorded
/// before their consumers, so one reverse sweep propagates gradients to
/// every reachable parameter.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input leaf.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape();
        self.push(Node {
            source: Source::Input,
            value: Some(value),
            shape,
            aux: Aux::None,
        })
    }

    /// Records a parameter leaf. The value is read from the store on
    /// demand, so large parameters are never copied onto the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let shape = store.value(id).shape();
        self.push(Node {
            source: Source::Param(id),
            value: None,
            shape,
            aux: Aux::None,
        })
    }

    fn push(&mut self, node: Node) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(node);
        id
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].shape
    }

    /// The forward value of a node.
    pub fn value<'a>(&'a self, store: &'a ParamStore, id: NodeId) -> &'a Tensor {
        let node = &self.nodes[id.0];
        match &node.source {
            Source::Param(pid) => store.value(*pid),
            _ => node.value.as_ref().expect("non-param node holds a value"),
        }
    }

    /// Applies a primitive, validating shapes, computing the forward value
    /// and recording the node.
    pub fn apply(
        &mut self,
        store: &ParamStore,
        prim: Prim,
        inputs: &[NodeId],
    ) -> Result<NodeId, TensorError> {
        let in_vals: Vec<&Tensor> = inputs.iter().map(|&i| self.value(store, i)).collect();
        let (value, aux) = eval(&prim, &in_vals)?;
        let shape = value.shape();
        Ok(self.push(Node {
            source: Source::Op {
                prim,
                inputs: inputs.to_vec(),
            },
            value: Some(value),
            shape,
            aux,
        }))
    }

    /// Reverse sweep from a scalar output. Every parameter reachable from
    /// `output` receives its accumulated gradient; unreachable parameters
    /// stay absent from the result.
    pub fn backward(
        &self,
        store: &ParamStore,
        output: NodeId,
    ) -> Result<Gradients, TensorError> {
        let out_shape = self.shape(output);
        if !out_shape.is_scalar() {
            return Err(TensorError::NonScalarOutput(out_shape));
        }
        let mut node_grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        node_grads[output.0] = Some(Tensor::scalar(1.0));
        let mut grads = Gradients::new(store.len());

        for i in (0..=output.0).rev() {
            let Some(g) = node_grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match &node.source {
                Source::Input => {}
                Source::Param(pid) => grads.accumulate_param(*pid, &g),
                Source::Op { prim, inputs } => {
                    let in_vals: Vec<&Tensor> =
                        inputs.iter().map(|&j| self.value(store, j)).collect();
                    let out_val = node.value.as_ref().expect("op node holds a value");
                    let contribs = backprop(prim, &node.aux, &in_vals, out_val, &g);
                    for (j, contrib) in inputs.iter().zip(contribs) {
                        if let Some(c) = contrib {
                            match &mut node_grads[j.0] {
                                Some(acc) => acc.add_assign(&c),
                                slot @ None => *slot = Some(c),
                            }
                        }
                    }
                }
            }
        }
        Ok(grads)
    }

    /// Gradient of a scalar output with respect to a single input node,
    /// densified to zeros when the input is unreachable.
    pub fn input_grad(
        &self,
        store: &ParamStore,
        output: NodeId,
        input: NodeId,
    ) -> Result<Tensor, TensorError> {
        let out_shape = self.shape(output);
        if !out_shape.is_scalar() {
            return Err(TensorError::NonScalarOutput(out_shape));
        }
        let mut node_grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        node_grads[output.0] = Some(Tensor::scalar(1.0));
        for i in (0..=output.0).rev() {
            if i == input.0 {
                continue; // keep the accumulated gradient in place
            }
            let Some(g) = node_grads[i].take() else {
                continue;
            };
            if let Source::Op { prim, inputs } = &self.nodes[i].source {
                let in_vals: Vec<&Tensor> = inputs.iter().map(|&j| self.value(store, j)).collect();
                let out_val = self.nodes[i].value.as_ref().expect("op node holds a value");
                let contribs = backprop(prim, &self.nodes[i].aux, &in_vals, out_val, &g);
                for (j, contrib) in inputs.iter().zip(contribs) {
                    if let Some(c) = contrib {
                        match &mut node_grads[j.0] {
                            Some(acc) => acc.add_assign(&c),
                            slot @ None => *slot = Some(c),
                        }
                    }
                }
            }
        }
        Ok(node_grads[input.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shape(input))))
    }
}

fn conv_out_len(input: usize, kernel: usize, spec: &Conv2dSpec) -> Result<usize, TensorError> {
    let span = spec.dilation * (kernel - 1) + 1;
    let padded = input + 2 * spec.padding;
    if padded < span {
        return Err(TensorError::ShapeMismatch(format!(
            "convolution kernel span {span} exceeds padded input {padded}"
        )));
    }
    Ok((padded - span) / spec.stride + 1)
}

fn eval(prim: &Prim, inputs: &[&Tensor]) -> Result<(Tensor, Aux), TensorError> {
    let arity_err = |want: &str| {
        Err(TensorError::ShapeMismatch(format!(
            "{} expects {} inputs, got {}",
            prim.name(),
            want,
            inputs.len()
        )))
    };
    match prim {
        Prim::Add | Prim::Sub | Prim::Mul | Prim::Div => {
            let [a, b] = inputs else { return arity_err("2") };
            if a.shape() != b.shape() {
                return Err(TensorError::ShapeMismatch(format!(
                    "{}: {} vs {}",
                    prim.name(),
                    a.shape(),
                    b.shape()
                )));
            }
            let f: fn(f64, f64) -> f64 = match prim {
                Prim::Add => |x, y| x + y,
                Prim::Sub => |x, y| x - y,
                Prim::Mul => |x, y| x * y,
                _ => |x, y| x / y,
            };
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Ok((Tensor::from_vec(a.shape(), data)?, Aux::None))
        }
        Prim::Scale(k) => {
            let [a] = inputs else { return arity_err("1") };
            Ok((a.map(|v| v * k), Aux::None))
        }
        Prim::Shift(k) => {
            let [a] = inputs else { return arity_err("1") };
            Ok((a.map(|v| v + k), Aux::None))
        }
        Prim::Relu => {
            let [a] = inputs else { return arity_err("1") };
            Ok((a.map(|v| if v > 0.0 { v } else { 0.0 }), Aux::None))
        }
        Prim::Sigmoid => {
            let [a] = inputs else { return arity_err("1") };
            Ok((a.map(|v| 1.0 / (1.0 + (-v).exp())), Aux::None))
        }
        Prim::Conv2d(spec) => {
            let [x, w] = inputs else { return arity_err("2") };
            validate_conv(x.shape(), w.shape(), spec)?;
            Ok((conv2d_forward(x, w, spec)?, Aux::None))
        }
        Prim::ConvT2d(spec) => {
            let [x, w] = inputs else { return arity_err("2") };
            validate_convt(x.shape(), w.shape(), spec)?;
            Ok((convt2d_forward(x, w, spec)?, Aux::None))
        }
        Prim::MaxPool2 => {
            let [x] = inputs else { return arity_err("1") };
            require_even_spatial(x.shape())?;
            Ok(max_pool2_forward(x))
        }
        Prim::AvgPool2 => {
            let [x] = inputs else { return arity_err("1") };
            require_even_spatial(x.shape())?;
            Ok((avg_pool2_forward(x), Aux::None))
        }
        Prim::GlobalAvgPool => {
            let [x] = inputs else { return arity_err("1") };
            Ok((global_avg_pool_forward(x), Aux::None))
        }
        Prim::BilinearUp2 => {
            let [x] = inputs else { return arity_err("1") };
            Ok((bilinear_up2_forward(x), Aux::None))
        }
        Prim::ConcatC => {
            if inputs.is_empty() {
                return arity_err("at least 1");
            }
            let s0 = inputs[0].shape();
            let mut c_total = 0;
            for t in inputs {
                let s = t.shape();
                if s.n != s0.n || s.h != s0.h || s.w != s0.w {
                    return Err(TensorError::ShapeMismatch(format!(
                        "concat_c: {} vs {}",
                        s0, s
                    )));
                }
                c_total += s.c;
            }
            let out_shape = Shape::new(s0.n, c_total, s0.h, s0.w);
            let mut out = Tensor::zeros(out_shape);
            let plane = s0.h * s0.w;
            for n in 0..s0.n {
                let mut c_off = 0;
                for t in inputs {
                    let s = t.shape();
                    let src = &t.data()[n * s.c * plane..(n + 1) * s.c * plane];
                    let dst_start = (n * c_total + c_off) * plane;
                    out.data_mut()[dst_start..dst_start + s.c * plane].copy_from_slice(src);
                    c_off += s.c;
                }
            }
            Ok((out, Aux::None))
        }
        Prim::SliceC { start, len } => {
            let [x] = inputs else { return arity_err("1") };
            let s = x.shape();
            if *len == 0 || start + len > s.c {
                return Err(TensorError::ShapeMismatch(format!(
                    "slice_c [{start}, {}) out of {} channels",
                    start + len,
                    s.c
                )));
            }
            let plane = s.h * s.w;
            let mut out = Tensor::zeros(Shape::new(s.n, *len, s.h, s.w));
            for n in 0..s.n {
                let src_start = (n * s.c + start) * plane;
                let dst_start = n * len * plane;
                out.data_mut()[dst_start..dst_start + len * plane]
                    .copy_from_slice(&x.data()[src_start..src_start + len * plane]);
            }
            Ok((out, Aux::None))
        }
        Prim::ShuffleC { groups } => {
            let [x] = inputs else { return arity_err("1") };
            let s = x.shape();
            if *groups == 0 || s.c % groups != 0 {
                return Err(TensorError::UnsupportedConfig(format!(
                    "shuffle_c: {} channels not divisible by {} groups",
                    s.c, groups
                )));
            }
            let per = s.c / groups;
            let plane = s.h * s.w;
            let mut out = Tensor::zeros(s);
            for n in 0..s.n {
                for j in 0..s.c {
                    let src_c = (j % groups) * per + j / groups;
                    let src = (n * s.c + src_c) * plane;
                    let dst = (n * s.c + j) * plane;
                    out.data_mut()[dst..dst + plane]
                        .copy_from_slice(&x.data()[src..src + plane]);
                }
            }
            Ok((out, Aux::None))
        }
        Prim::Softmax(axis) => {
            let [x] = inputs else { return arity_err("1") };
            let mut out = Tensor::zeros(x.shape());
            for_each_lane(x.shape(), *axis, |base, stride, len| {
                let mut m = f64::NEG_INFINITY;
                for i in 0..len {
                    m = m.max(x.data()[base + i * stride]);
                }
                let mut sum = 0.0;
                for i in 0..len {
                    let e = (x.data()[base + i * stride] - m).exp();
                    out.data_mut()[base + i * stride] = e;
                    sum += e;
                }
                for i in 0..len {
                    out.data_mut()[base + i * stride] /= sum;
                }
            });
            Ok((out, Aux::None))
        }
        Prim::LogSoftmax(axis) => {
            let [x] = inputs else { return arity_err("1") };
            let mut out = Tensor::zeros(x.shape());
            for_each_lane(x.shape(), *axis, |base, stride, len| {
                let mut m = f64::NEG_INFINITY;
                for i in 0..len {
                    m = m.max(x.data()[base + i * stride]);
                }
                let mut sum = 0.0;
                for i in 0..len {
                    sum += (x.data()[base + i * stride] - m).exp();
                }
                let lse = m + sum.ln();
                for i in 0..len {
                    out.data_mut()[base + i * stride] = x.data()[base + i * stride] - lse;
                }
            });
            Ok((out, Aux::None))
        }
        Prim::MaskedSoftmaxW { mask } => {
            let [x] = inputs else { return arity_err("1") };
            let s = x.shape();
            if s.w > 32 {
                return Err(TensorError::UnsupportedConfig(
                    "masked_softmax_w supports at most 32 entries".into(),
                ));
            }
            let live = *mask & ((1u32 << s.w) - 1).max(1);
            if s.w < 32 && *mask >> s.w != 0 {
                return Err(TensorError::UnsupportedConfig(format!(
                    "masked_softmax_w: mask {mask:#b} has bits beyond width {}",
                    s.w
                )));
            }
            if live == 0 {
                return Err(TensorError::UnsupportedConfig(
                    "masked_softmax_w: empty mask".into(),
                ));
            }
            let mut out = Tensor::zeros(s);
            for_each_lane(s, Axis::W, |base, stride, len| {
                let mut m = f64::NEG_INFINITY;
                for i in 0..len {
                    if live >> i & 1 == 1 {
                        m = m.max(x.data()[base + i * stride]);
                    }
                }
                let mut sum = 0.0;
                for i in 0..len {
                    if live >> i & 1 == 1 {
                        let e = (x.data()[base + i * stride] - m).exp();
                        out.data_mut()[base + i * stride] = e;
                        sum += e;
                    }
                }
                for i in 0..len {
                    if live >> i & 1 == 1 {
                        out.data_mut()[base + i * stride] /= sum;
                    }
                }
            });
            Ok((out, Aux::None))
        }
        Prim::SumAll => {
            let [x] = inputs else { return arity_err("1") };
            Ok((Tensor::scalar(x.data().iter().sum()), Aux::None))
        }
        Prim::MeanAll => {
            let [x] = inputs else { return arity_err("1") };
            let sum: f64 = x.data().iter().sum();
            Ok((Tensor::scalar(sum / x.len() as f64), Aux::None))
        }
        Prim::MulChannelGate => {
            let [x, s] = inputs else { return arity_err("2") };
            let (xs, ss) = (x.shape(), s.shape());
            if ss.n != xs.n || ss.c != xs.c || ss.h != 1 || ss.w != 1 {
                return Err(TensorError::ShapeMismatch(format!(
                    "mul_channel_gate: gate {} incompatible with {}",
                    ss, xs
                )));
            }
            let plane = xs.h * xs.w;
            let mut out = Tensor::zeros(xs);
            for n in 0..xs.n {
                for c in 0..xs.c {
                    let gate = s.data()[n * xs.c + c];
                    let start = (n * xs.c + c) * plane;
                    for i in 0..plane {
                        out.data_mut()[start + i] = x.data()[start + i] * gate;
                    }
                }
            }
            Ok((out, Aux::None))
        }
        Prim::AddChannelBias => {
            let [x, b] = inputs else { return arity_err("2") };
            let (xs, bs) = (x.shape(), b.shape());
            if bs.n != 1 || bs.c != xs.c || bs.h != 1 || bs.w != 1 {
                return Err(TensorError::ShapeMismatch(format!(
                    "add_channel_bias: bias {} incompatible with {}",
                    bs, xs
                )));
            }
            let plane = xs.h * xs.w;
            let mut out = (*x).clone();
            for n in 0..xs.n {
                for c in 0..xs.c {
                    let bias = b.data()[c];
                    let start = (n * xs.c + c) * plane;
                    for i in 0..plane {
                        out.data_mut()[start + i] += bias;
                    }
                }
            }
            Ok((out, Aux::None))
        }
        Prim::MulElem { index } => {
            let [x, v] = inputs else { return arity_err("2") };
            let vs = v.shape();
            if vs.n != 1 || vs.c != 1 || vs.h != 1 || *index >= vs.w {
                return Err(TensorError::ShapeMismatch(format!(
                    "mul_elem: index {index} into vector {}",
                    vs
                )));
            }
            let k = v.data()[*index];
            Ok((x.map(|t| t * k), Aux::None))
        }
        Prim::GroupNorm { groups, eps } => {
            let [x, gamma, beta] = inputs else { return arity_err("3") };
            let s = x.shape();
            if *groups == 0 || s.c % groups != 0 {
                return Err(TensorError::UnsupportedConfig(format!(
                    "group_norm: {} channels not divisible by {} groups",
                    s.c, groups
                )));
            }
            for (name, t) in [("gamma", gamma), ("beta", beta)] {
                let ts = t.shape();
                if ts.n != 1 || ts.c != s.c || ts.h != 1 || ts.w != 1 {
                    return Err(TensorError::ShapeMismatch(format!(
                        "group_norm: {name} {} incompatible with {}",
                        ts, s
                    )));
                }
            }
            Ok(group_norm_forward(x, gamma, beta, *groups, *eps))
        }
    }
}

fn require_even_spatial(s: Shape) -> Result<(), TensorError> {
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(TensorError::OddSpatialSize(format!(
            "2x2 pooling requires even spatial sizes, got {}",
            s
        )));
    }
    Ok(())
}

fn validate_conv(xs: Shape, ws: Shape, spec: &Conv2dSpec) -> Result<(), TensorError> {
    if spec.stride == 0 || spec.dilation == 0 || spec.groups == 0 {
        return Err(TensorError::UnsupportedConfig(
            "conv2d: stride, dilation and groups must be positive".into(),
        ));
    }
    if xs.c % spec.groups != 0 || ws.n % spec.groups != 0 {
        return Err(TensorError::UnsupportedConfig(format!(
            "conv2d: groups {} must divide c_in {} and c_out {}",
            spec.groups, xs.c, ws.n
        )));
    }
    if ws.c != xs.c / spec.groups {
        return Err(TensorError::ShapeMismatch(format!(
            "conv2d: weight expects {} input channels per group, input has {}",
            ws.c,
            xs.c / spec.groups
        )));
    }
    Ok(())
}

fn conv2d_forward(x: &Tensor, w: &Tensor, spec: &Conv2dSpec) -> Result<Tensor, TensorError> {
    let xs = x.shape();
    let ws = w.shape();
    let (kh, kw) = (ws.h, ws.w);
    let ho = conv_out_len(xs.h, kh, spec)?;
    let wo = conv_out_len(xs.w, kw, spec)?;
    let cout = ws.n;
    let cpg = ws.c;
    let cog = cout / spec.groups;
    let mut out = Tensor::zeros(Shape::new(xs.n, cout, ho, wo));
    let (xd, wd) = (x.data(), w.data());
    let od = out.data_mut();
    for n in 0..xs.n {
        for g in 0..spec.groups {
            for co_local in 0..cog {
                let co = g * cog + co_local;
                let wbase_c = co * cpg * kh * kw;
                let obase_c = (n * cout + co) * ho * wo;
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0;
                        for ci_local in 0..cpg {
                            let ci = g * cpg + ci_local;
                            let xbase_c = (n * xs.c + ci) * xs.h * xs.w;
                            let wbase = wbase_c + ci_local * kh * kw;
                            for ki in 0..kh {
                                let ih = (oh * spec.stride + ki * spec.dilation) as isize
                                    - spec.padding as isize;
                                if ih < 0 || ih >= xs.h as isize {
                                    continue;
                                }
                                let xrow = xbase_c + ih as usize * xs.w;
                                let wrow = wbase + ki * kw;
                                for kj in 0..kw {
                                    let iw = (ow * spec.stride + kj * spec.dilation) as isize
                                        - spec.padding as isize;
                                    if iw < 0 || iw >= xs.w as isize {
                                        continue;
                                    }
                                    acc += xd[xrow + iw as usize] * wd[wrow + kj];
                                }
                            }
                        }
                        od[obase_c + oh * wo + ow] = acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    spec: &Conv2dSpec,
    gout: &Tensor,
) -> (Tensor, Tensor) {
    let xs = x.shape();
    let ws = w.shape();
    let os = gout.shape();
    let (kh, kw) = (ws.h, ws.w);
    let cpg = ws.c;
    let cog = ws.n / spec.groups;
    let mut dx = Tensor::zeros(xs);
    let mut dw = Tensor::zeros(ws);
    let (xd, wd, gd) = (x.data(), w.data(), gout.data());
    for n in 0..xs.n {
        for g in 0..spec.groups {
            for co_local in 0..cog {
                let co = g * cog + co_local;
                let wbase_c = co * cpg * kh * kw;
                let obase_c = (n * os.c + co) * os.h * os.w;
                for oh in 0..os.h {
                    for ow in 0..os.w {
                        let g0 = gd[obase_c + oh * os.w + ow];
                        if g0 == 0.0 {
                            continue;
                        }
                        for ci_local in 0..cpg {
                            let ci = g * cpg + ci_local;
                            let xbase_c = (n * xs.c + ci) * xs.h * xs.w;
                            let wbase = wbase_c + ci_local * kh * kw;
                            for ki in 0..kh {
                                let ih = (oh * spec.stride + ki * spec.dilation) as isize
                                    - spec.padding as isize;
                                if ih < 0 || ih >= xs.h as isize {
                                    continue;
                                }
                                let xrow = xbase_c + ih as usize * xs.w;
                                let wrow = wbase + ki * kw;
                                for kj in 0..kw {
                                    let iw = (ow * spec.stride + kj * spec.dilation) as isize
                                        - spec.padding as isize;
                                    if iw < 0 || iw >= xs.w as isize {
                                        continue;
                                    }
                                    let xi = xrow + iw as usize;
                                    dx.data_mut()[xi] += g0 * wd[wrow + kj];
                                    dw.data_mut()[wrow + kj] += g0 * xd[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

fn validate_convt(xs: Shape, ws: Shape, spec: &ConvT2dSpec) -> Result<(), TensorError> {
    if spec.stride == 0 || spec.dilation == 0 || spec.groups == 0 {
        return Err(TensorError::UnsupportedConfig(
            "convt2d: stride, dilation and groups must be positive".into(),
        ));
    }
    if xs.c % spec.groups != 0 {
        return Err(TensorError::UnsupportedConfig(format!(
            "convt2d: groups {} must divide c_in {}",
            spec.groups, xs.c
        )));
    }
    if ws.n != xs.c {
        return Err(TensorError::ShapeMismatch(format!(
            "convt2d: weight leading dim {} must equal c_in {}",
            ws.n, xs.c
        )));
    }
    if spec.output_padding >= spec.stride && spec.output_padding >= spec.dilation {
        return Err(TensorError::UnsupportedConfig(format!(
            "convt2d: output_padding {} must be smaller than stride {} or dilation {}",
            spec.output_padding, spec.stride, spec.dilation
        )));
    }
    Ok(())
}

fn convt_out_len(input: usize, kernel: usize, spec: &ConvT2dSpec) -> Result<usize, TensorError> {
    let len = (input - 1) * spec.stride + spec.dilation * (kernel - 1) + 1 + spec.output_padding;
    let len = len as isize - 2 * spec.padding as isize;
    if len < 1 {
        return Err(TensorError::ShapeMismatch(format!(
            "convt2d output collapses to {len}"
        )));
    }
    Ok(len as usize)
}

fn convt2d_forward(x: &Tensor, w: &Tensor, spec: &ConvT2dSpec) -> Result<Tensor, TensorError> {
    let xs = x.shape();
    let ws = w.shape();
    let (kh, kw) = (ws.h, ws.w);
    let ho = convt_out_len(xs.h, kh, spec)?;
    let wo = convt_out_len(xs.w, kw, spec)?;
    let cog = ws.c; // output channels per group
    let cout = cog * spec.groups;
    let cpg = xs.c / spec.groups;
    let mut out = Tensor::zeros(Shape::new(xs.n, cout, ho, wo));
    let (xd, wd) = (x.data(), w.data());
    let od = out.data_mut();
    for n in 0..xs.n {
        for g in 0..spec.groups {
            for ci_local in 0..cpg {
                let ci = g * cpg + ci_local;
                let xbase_c = (n * xs.c + ci) * xs.h * xs.w;
                let wbase_ci = ci * cog * kh * kw;
                for ih in 0..xs.h {
                    for iw in 0..xs.w {
                        let xv = xd[xbase_c + ih * xs.w + iw];
                        if xv == 0.0 {
                            continue;
                        }
                        for co_local in 0..cog {
                            let co = g * cog + co_local;
                            let obase_c = (n * cout + co) * ho * wo;
                            let wbase = wbase_ci + co_local * kh * kw;
                            for ki in 0..kh {
                                let oh = (ih * spec.stride + ki * spec.dilation) as isize
                                    - spec.padding as isize;
                                if oh < 0 || oh >= ho as isize {
                                    continue;
                                }
                                let orow = obase_c + oh as usize * wo;
                                let wrow = wbase + ki * kw;
                                for kj in 0..kw {
                                    let ow = (iw * spec.stride + kj * spec.dilation) as isize
                                        - spec.padding as isize;
                                    if ow < 0 || ow >= wo as isize {
                                        continue;
                                    }
                                    od[orow + ow as usize] += xv * wd[wrow + kj];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn convt2d_backward(
    x: &Tensor,
    w: &Tensor,
    spec: &ConvT2dSpec,
    gout: &Tensor,
) -> (Tensor, Tensor) {
    let xs = x.shape();
    let ws = w.shape();
    let os = gout.shape();
    let (kh, kw) = (ws.h, ws.w);
    let cog = ws.c;
    let cpg = xs.c / spec.groups;
    let mut dx = Tensor::zeros(xs);
    let mut dw = Tensor::zeros(ws);
    let (xd, wd, gd) = (x.data(), w.data(), gout.data());
    for n in 0..xs.n {
        for g in 0..spec.groups {
            for ci_local in 0..cpg {
                let ci = g * cpg + ci_local;
                let xbase_c = (n * xs.c + ci) * xs.h * xs.w;
                let wbase_ci = ci * cog * kh * kw;
                for ih in 0..xs.h {
                    for iw in 0..xs.w {
                        let xi = xbase_c + ih * xs.w + iw;
                        let xv = xd[xi];
                        let mut acc = 0.0;
                        for co_local in 0..cog {
                            let co = g * cog + co_local;
                            let obase_c = (n * os.c + co) * os.h * os.w;
                            let wbase = wbase_ci + co_local * kh * kw;
                            for ki in 0..kh {
                                let oh = (ih * spec.stride + ki * spec.dilation) as isize
                                    - spec.padding as isize;
                                if oh < 0 || oh >= os.h as isize {
                                    continue;
                                }
                                let orow = obase_c + oh as usize * os.w;
                                let wrow = wbase + ki * kw;
                                for kj in 0..kw {
                                    let ow = (iw * spec.stride + kj * spec.dilation) as isize
                                        - spec.padding as isize;
                                    if ow < 0 || ow >= os.w as isize {
                                        continue;
                                    }
                                    let g0 = gd[orow + ow as usize];
                                    acc += g0 * wd[wrow + kj];
                                    dw.data_mut()[wrow + kj] += g0 * xv;
                                }
                            }
                        }
                        dx.data_mut()[xi] += acc;
                    }
                }
            }
        }
    }
    (dx, dw)
}

fn max_pool2_forward(x: &Tensor) -> (Tensor, Aux) {
    let s = x.shape();
    let (ho, wo) = (s.h / 2, s.w / 2);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, ho, wo));
    let mut argmax = vec![0u32; out.len()];
    let xd = x.data();
    let mut oi = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.h * s.w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let i00 = base + (2 * oh) * s.w + 2 * ow;
                    let candidates = [i00, i00 + 1, i00 + s.w, i00 + s.w + 1];
                    let mut best = candidates[0];
                    let mut best_v = xd[best];
                    for &i in &candidates[1..] {
                        if xd[i] > best_v {
                            best = i;
                            best_v = xd[i];
                        }
                    }
                    out.data_mut()[oi] = best_v;
                    argmax[oi] = best as u32;
                    oi += 1;
                }
            }
        }
    }
    (out, Aux::Argmax(argmax))
}

fn avg_pool2_forward(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (ho, wo) = (s.h / 2, s.w / 2);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, ho, wo));
    let xd = x.data();
    let mut oi = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.h * s.w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let i00 = base + (2 * oh) * s.w + 2 * ow;
                    out.data_mut()[oi] =
                        0.25 * (xd[i00] + xd[i00 + 1] + xd[i00 + s.w] + xd[i00 + s.w + 1]);
                    oi += 1;
                }
            }
        }
    }
    out
}

fn global_avg_pool_forward(x: &Tensor) -> Tensor {
    let s = x.shape();
    let plane = s.h * s.w;
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * plane;
            let sum: f64 = x.data()[base..base + plane].iter().sum();
            out.data_mut()[n * s.c + c] = sum / plane as f64;
        }
    }
    out
}

/// Source coordinate and blend weights for one upsampled position
/// (align-corners false, factor 2).
#[inline]
fn up2_coords(o: usize, in_len: usize) -> (usize, usize, f64) {
    let src = 0.5 * o as f64 - 0.25;
    let floor = src.floor();
    let t = src - floor;
    let lo = floor.max(0.0) as usize;
    let hi = ((floor + 1.0).max(0.0) as usize).min(in_len - 1);
    let lo = lo.min(in_len - 1);
    (lo, hi, t)
}

fn bilinear_up2_forward(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (ho, wo) = (s.h * 2, s.w * 2);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, ho, wo));
    let xd = x.data();
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.h * s.w;
            let obase = (n * s.c + c) * ho * wo;
            for oh in 0..ho {
                let (y0, y1, ty) = up2_coords(oh, s.h);
                for ow in 0..wo {
                    let (x0, x1, tx) = up2_coords(ow, s.w);
                    let v00 = xd[base + y0 * s.w + x0];
                    let v01 = xd[base + y0 * s.w + x1];
                    let v10 = xd[base + y1 * s.w + x0];
                    let v11 = xd[base + y1 * s.w + x1];
                    let top = v00 * (1.0 - tx) + v01 * tx;
                    let bot = v10 * (1.0 - tx) + v11 * tx;
                    out.data_mut()[obase + oh * wo + ow] = top * (1.0 - ty) + bot * ty;
                }
            }
        }
    }
    out
}

fn group_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
    eps: f64,
) -> (Tensor, Aux) {
    let s = x.shape();
    let cg = s.c / groups;
    let m = (cg * s.h * s.w) as f64;
    let plane = s.h * s.w;
    let mut out = Tensor::zeros(s);
    let mut means = Vec::with_capacity(s.n * groups);
    let mut inv_stds = Vec::with_capacity(s.n * groups);
    for n in 0..s.n {
        for g in 0..groups {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for c in g * cg..(g + 1) * cg {
                let base = (n * s.c + c) * plane;
                for i in 0..plane {
                    let v = x.data()[base + i];
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / m;
            let var = (sq / m - mean * mean).max(0.0);
            let inv = 1.0 / (var + eps).sqrt();
            means.push(mean);
            inv_stds.push(inv);
            for c in g * cg..(g + 1) * cg {
                let base = (n * s.c + c) * plane;
                let (gm, bt) = (gamma.data()[c], beta.data()[c]);
                for i in 0..plane {
                    let xhat = (x.data()[base + i] - mean) * inv;
                    out.data_mut()[base + i] = gm * xhat + bt;
                }
            }
        }
    }
    (
        out,
        Aux::GnStats {
            mean: means,
            inv_std: inv_stds,
        },
    )
}

/// Iterates lanes along `axis`: calls `f(base, stride, len)` once per lane.
fn for_each_lane(s: Shape, axis: Axis, mut f: impl FnMut(usize, usize, usize)) {
    match axis {
        Axis::W => {
            for n in 0..s.n {
                for c in 0..s.c {
                    for h in 0..s.h {
                        f(s.index(n, c, h, 0), 1, s.w);
                    }
                }
            }
        }
        Axis::H => {
            for n in 0..s.n {
                for c in 0..s.c {
                    for w in 0..s.w {
                        f(s.index(n, c, 0, w), s.w, s.h);
                    }
                }
            }
        }
        Axis::C => {
            for n in 0..s.n {
                for h in 0..s.h {
                    for w in 0..s.w {
                        f(s.index(n, 0, h, w), s.h * s.w, s.c);
                    }
                }
            }
        }
        Axis::N => {
            for c in 0..s.c {
                for h in 0..s.h {
                    for w in 0..s.w {
                        f(s.index(0, c, h, w), s.c * s.h * s.w, s.n);
                    }
                }
            }
        }
    }
}

/// Per-input gradient contributions of one primitive application.
fn backprop(
    prim: &Prim,
    aux: &Aux,
    inputs: &[&Tensor],
    output: &Tensor,
    gout: &Tensor,
) -> Vec<Option<Tensor>> {
    match prim {
        Prim::Add => vec![Some(gout.clone()), Some(gout.clone())],
        Prim::Sub => vec![Some(gout.clone()), Some(gout.map(|v| -v))],
        Prim::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let da = Tensor::from_fn(a.shape(), |n, c, h, w| {
                gout.get(n, c, h, w) * b.get(n, c, h, w)
            });
            let db = Tensor::from_fn(a.shape(), |n, c, h, w| {
                gout.get(n, c, h, w) * a.get(n, c, h, w)
            });
            vec![Some(da), Some(db)]
        }
        Prim::Div => {
            let (a, b) = (inputs[0], inputs[1]);
            let da = Tensor::from_fn(a.shape(), |n, c, h, w| {
                gout.get(n, c, h, w) / b.get(n, c, h, w)
            });
            let db = Tensor::from_fn(a.shape(), |n, c, h, w| {
                let bv = b.get(n, c, h, w);
                -gout.get(n, c, h, w) * a.get(n, c, h, w) / (bv * bv)
            });
            vec![Some(da), Some(db)]
        }
        Prim::Scale(k) => vec![Some(gout.map(|v| v * k))],
        Prim::Shift(_) => vec![Some(gout.clone())],
        Prim::Relu => {
            let mut dx = gout.clone();
            for (d, &o) in dx.data_mut().iter_mut().zip(output.data()) {
                if o <= 0.0 {
                    *d = 0.0;
                }
            }
            vec![Some(dx)]
        }
        Prim::Sigmoid => {
            let mut dx = gout.clone();
            for (d, &o) in dx.data_mut().iter_mut().zip(output.data()) {
                *d *= o * (1.0 - o);
            }
            vec![Some(dx)]
        }
        Prim::Conv2d(spec) => {
            let (dx, dw) = conv2d_backward(inputs[0], inputs[1], spec, gout);
            vec![Some(dx), Some(dw)]
        }
        Prim::ConvT2d(spec) => {
            let (dx, dw) = convt2d_backward(inputs[0], inputs[1], spec, gout);
            vec![Some(dx), Some(dw)]
        }
        Prim::MaxPool2 => {
            let Aux::Argmax(arg) = aux else {
                unreachable!("max_pool2 saved argmax")
            };
            let mut dx = Tensor::zeros(inputs[0].shape());
            for (oi, &src) in arg.iter().enumerate() {
                dx.data_mut()[src as usize] += gout.data()[oi];
            }
            vec![Some(dx)]
        }
        Prim::AvgPool2 => {
            let s = inputs[0].shape();
            let os = gout.shape();
            let mut dx = Tensor::zeros(s);
            let mut oi = 0;
            for n in 0..s.n {
                for c in 0..s.c {
                    let base = (n * s.c + c) * s.h * s.w;
                    for oh in 0..os.h {
                        for ow in 0..os.w {
                            let q = 0.25 * gout.data()[oi];
                            let i00 = base + (2 * oh) * s.w + 2 * ow;
                            dx.data_mut()[i00] += q;
                            dx.data_mut()[i00 + 1] += q;
                            dx.data_mut()[i00 + s.w] += q;
                            dx.data_mut()[i00 + s.w + 1] += q;
                            oi += 1;
                        }
                    }
                }
            }
            vec![Some(dx)]
        }
        Prim::GlobalAvgPool => {
            let s = inputs[0].shape();
            let plane = (s.h * s.w) as f64;
            let mut dx = Tensor::zeros(s);
            for n in 0..s.n {
                for c in 0..s.c {
                    let q = gout.data()[n * s.c + c] / plane;
                    let base = (n * s.c + c) * s.h * s.w;
                    for i in 0..s.h * s.w {
                        dx.data_mut()[base + i] += q;
                    }
                }
            }
            vec![Some(dx)]
        }
        Prim::BilinearUp2 => {
            let s = inputs[0].shape();
            let os = gout.shape();
            let mut dx = Tensor::zeros(s);
            for n in 0..s.n {
                for c in 0..s.c {
                    let base = (n * s.c + c) * s.h * s.w;
                    let obase = (n * s.c + c) * os.h * os.w;
                    for oh in 0..os.h {
                        let (y0, y1, ty) = up2_coords(oh, s.h);
                        for ow in 0..os.w {
                            let (x0, x1, tx) = up2_coords(ow, s.w);
                            let g0 = gout.data()[obase + oh * os.w + ow];
                            dx.data_mut()[base + y0 * s.w + x0] += g0 * (1.0 - ty) * (1.0 - tx);
                            dx.data_mut()[base + y0 * s.w + x1] += g0 * (1.0 - ty) * tx;
                            dx.data_mut()[base + y1 * s.w + x0] += g0 * ty * (1.0 - tx);
                            dx.data_mut()[base + y1 * s.w + x1] += g0 * ty * tx;
                        }
                    }
                }
            }
            vec![Some(dx)]
        }
        Prim::ConcatC => {
            let os = gout.shape();
            let plane = os.h * os.w;
            let mut res = Vec::with_capacity(inputs.len());
            let mut c_off = 0;
            for t in inputs {
                let s = t.shape();
                let mut d = Tensor::zeros(s);
                for n in 0..s.n {
                    let src_start = (n * os.c + c_off) * plane;
                    let dst_start = n * s.c * plane;
                    d.data_mut()[dst_start..dst_start + s.c * plane]
                        .copy_from_slice(&gout.data()[src_start..src_start + s.c * plane]);
                }
                c_off += s.c;
                res.push(Some(d));
            }
            res
        }
        Prim::SliceC { start, len } => {
            let s = inputs[0].shape();
            let plane = s.h * s.w;
            let mut dx = Tensor::zeros(s);
            for n in 0..s.n {
                let dst_start = (n * s.c + start) * plane;
                let src_start = n * len * plane;
                dx.data_mut()[dst_start..dst_start + len * plane]
                    .copy_from_slice(&gout.data()[src_start..src_start + len * plane]);
            }
            vec![Some(dx)]
        }
        Prim::ShuffleC { groups } => {
            let s = inputs[0].shape();
            let per = s.c / groups;
            let plane = s.h * s.w;
            let mut dx = Tensor::zeros(s);
            for n in 0..s.n {
                for j in 0..s.c {
                    let src_c = (j % groups) * per + j / groups;
                    let dst = (n * s.c + src_c) * plane;
                    let src = (n * s.c + j) * plane;
                    dx.data_mut()[dst..dst + plane]
                        .copy_from_slice(&gout.data()[src..src + plane]);
                }
            }
            vec![Some(dx)]
        }
        Prim::Softmax(axis) => {
            let s = output.shape();
            let mut dx = Tensor::zeros(s);
            for_each_lane(s, *axis, |base, stride, len| {
                let mut dot = 0.0;
                for i in 0..len {
                    let idx = base + i * stride;
                    dot += gout.data()[idx] * output.data()[idx];
                }
                for i in 0..len {
                    let idx = base + i * stride;
                    dx.data_mut()[idx] = output.data()[idx] * (gout.data()[idx] - dot);
                }
            });
            vec![Some(dx)]
        }
        Prim::LogSoftmax(axis) => {
            let s = output.shape();
            let mut dx = Tensor::zeros(s);
            for_each_lane(s, *axis, |base, stride, len| {
                let mut gsum = 0.0;
                for i in 0..len {
                    gsum += gout.data()[base + i * stride];
                }
                for i in 0..len {
                    let idx = base + i * stride;
                    dx.data_mut()[idx] = gout.data()[idx] - output.data()[idx].exp() * gsum;
                }
            });
            vec![Some(dx)]
        }
        Prim::MaskedSoftmaxW { mask } => {
            let s = output.shape();
            let mut dx = Tensor::zeros(s);
            for_each_lane(s, Axis::W, |base, stride, len| {
                let mut dot = 0.0;
                for i in 0..len {
                    if mask >> i & 1 == 1 {
                        let idx = base + i * stride;
                        dot += gout.data()[idx] * output.data()[idx];
                    }
                }
                for i in 0..len {
                    if mask >> i & 1 == 1 {
                        let idx = base + i * stride;
                        dx.data_mut()[idx] = output.data()[idx] * (gout.data()[idx] - dot);
                    }
                }
            });
            vec![Some(dx)]
        }
        Prim::SumAll => {
            let g0 = gout.scalar_value();
            vec![Some(Tensor::filled(inputs[0].shape(), g0))]
        }
        Prim::MeanAll => {
            let g0 = gout.scalar_value() / inputs[0].len() as f64;
            vec![Some(Tensor::filled(inputs[0].shape(), g0))]
        }
        Prim::MulChannelGate => {
            let (x, gate) = (inputs[0], inputs[1]);
            let s = x.shape();
            let plane = s.h * s.w;
            let mut dx = Tensor::zeros(s);
            let mut dgate = Tensor::zeros(gate.shape());
            for n in 0..s.n {
                for c in 0..s.c {
                    let gv = gate.data()[n * s.c + c];
                    let base = (n * s.c + c) * plane;
                    let mut acc = 0.0;
                    for i in 0..plane {
                        let g0 = gout.data()[base + i];
                        dx.data_mut()[base + i] = g0 * gv;
                        acc += g0 * x.data()[base + i];
                    }
                    dgate.data_mut()[n * s.c + c] = acc;
                }
            }
            vec![Some(dx), Some(dgate)]
        }
        Prim::AddChannelBias => {
            let s = inputs[0].shape();
            let plane = s.h * s.w;
            let mut db = Tensor::zeros(inputs[1].shape());
            for n in 0..s.n {
                for c in 0..s.c {
                    let base = (n * s.c + c) * plane;
                    let sum: f64 = gout.data()[base..base + plane].iter().sum();
                    db.data_mut()[c] += sum;
                }
            }
            vec![Some(gout.clone()), Some(db)]
        }
        Prim::MulElem { index } => {
            let (x, v) = (inputs[0], inputs[1]);
            let k = v.data()[*index];
            let dx = gout.map(|g| g * k);
            let mut dv = Tensor::zeros(v.shape());
            let dot: f64 = gout
                .data()
                .iter()
                .zip(x.data())
                .map(|(&g, &xv)| g * xv)
                .sum();
            dv.data_mut()[*index] = dot;
            vec![Some(dx), Some(dv)]
        }
        Prim::GroupNorm { groups, .. } => {
            let Aux::GnStats { mean, inv_std } = aux else {
                unreachable!("group_norm saved statistics")
            };
            let (x, gamma, _beta) = (inputs[0], inputs[1], inputs[2]);
            let s = x.shape();
            let cg = s.c / groups;
            let plane = s.h * s.w;
            let m = (cg * plane) as f64;
            let mut dx = Tensor::zeros(s);
            let mut dgamma = Tensor::zeros(gamma.shape());
            let mut dbeta = Tensor::zeros(gamma.shape());
            for n in 0..s.n {
                for g in 0..*groups {
                    let mu = mean[n * groups + g];
                    let inv = inv_std[n * groups + g];
                    // first pass: reductions over the group
                    let mut sum_dyhat = 0.0;
                    let mut sum_dyhat_xhat = 0.0;
                    for c in g * cg..(g + 1) * cg {
                        let base = (n * s.c + c) * plane;
                        let gm = gamma.data()[c];
                        for i in 0..plane {
                            let go = gout.data()[base + i];
                            let xhat = (x.data()[base + i] - mu) * inv;
                            let dyhat = go * gm;
                            sum_dyhat += dyhat;
                            sum_dyhat_xhat += dyhat * xhat;
                            dgamma.data_mut()[c] += go * xhat;
                            dbeta.data_mut()[c] += go;
                        }
                    }
                    // second pass: per-element gradient
                    for c in g * cg..(g + 1) * cg {
                        let base = (n * s.c + c) * plane;
                        let gm = gamma.data()[c];
                        for i in 0..plane {
                            let go = gout.data()[base + i];
                            let xhat = (x.data()[base + i] - mu) * inv;
                            let dyhat = go * gm;
                            dx.data_mut()[base + i] = inv
                                * (dyhat - sum_dyhat / m - xhat * (sum_dyhat_xhat / m));
                        }
                    }
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamGroup;

    fn store() -> ParamStore {
        ParamStore::new()
    }

    #[test]
    fn sum_of_ones_is_count() {
        let st = store();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::filled(Shape::new(1, 1, 2, 2), 1.0));
        let s = tape.apply(&st, Prim::SumAll, &[x]).unwrap();
        assert_eq!(tape.value(&st, s).scalar_value(), 4.0);
    }

    #[test]
    fn relu_definition() {
        let st = store();
        let mut tape = Tape::new();
        let x = tape
            .input(Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.apply(&st, Prim::Relu, &[x]).unwrap();
        assert_eq!(tape.value(&st, y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn conv_all_ones_same_padding() {
        // 3x3 ones kernel over a 3x3 ones image with padding 1: the center
        // sees all nine taps, corners see four.
        let st = store();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::filled(Shape::new(1, 1, 3, 3), 1.0));
        let w = tape.input(Tensor::filled(Shape::new(1, 1, 3, 3), 1.0));
        let spec = Conv2dSpec {
            stride: 1,
            padding: 1,
            dilation: 1,
            groups: 1,
        };
        let y = tape.apply(&st, Prim::Conv2d(spec), &[x, w]).unwrap();
        let out = tape.value(&st, y);
        assert_eq!(out.shape(), Shape::new(1, 1, 3, 3));
        assert_eq!(out.get(0, 0, 1, 1), 9.0);
        assert_eq!(out.get(0, 0, 0, 0), 4.0);
        assert_eq!(out.get(0, 0, 2, 2), 4.0);
        assert_eq!(out.get(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut st = store();
        let p = st.register(ParamGroup::Weight, Tensor::filled(Shape::new(1, 2, 2, 2), 3.0));
        let mut tape = Tape::new();
        let x = tape.param(&st, p);
        let s = tape.apply(&st, Prim::SumAll, &[x]).unwrap();
        let grads = tape.backward(&st, s).unwrap();
        assert_eq!(
            grads.get(p).unwrap().data(),
            &[1.0; 8],
            "d sum / dx must be all ones"
        );
    }

    #[test]
    fn backward_of_quadratic() {
        let mut st = store();
        let p = st.register(
            ParamGroup::Weight,
            Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]).unwrap(),
        );
        let mut tape = Tape::new();
        let x = tape.param(&st, p);
        let sq = tape.apply(&st, Prim::Mul, &[x, x]).unwrap();
        let s = tape.apply(&st, Prim::SumAll, &[sq]).unwrap();
        let grads = tape.backward(&st, s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let st = store();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::filled(Shape::new(1, 1, 2, 2), 1.0));
        let y = tape.apply(&st, Prim::Relu, &[x]).unwrap();
        assert!(matches!(
            tape.backward(&st, y),
            Err(TensorError::NonScalarOutput(_))
        ));
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let mut st = store();
        let p = st.register(
            ParamGroup::Weight,
            Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let mut tape = Tape::new();
        let x = tape.param(&st, p);
        let y = tape.apply(&st, Prim::MaxPool2, &[x]).unwrap();
        assert_eq!(tape.value(&st, y).data(), &[4.0]);
        let s = tape.apply(&st, Prim::SumAll, &[y]).unwrap();
        let grads = tape.backward(&st, s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn max_pool_breaks_ties_by_first_scan_position() {
        let mut st = store();
        let p = st.register(
            ParamGroup::Weight,
            Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![5.0, 5.0, 5.0, 5.0]).unwrap(),
        );
        let mut tape = Tape::new();
        let x = tape.param(&st, p);
        let y = tape.apply(&st, Prim::MaxPool2, &[x]).unwrap();
        let s = tape.apply(&st, Prim::SumAll, &[y]).unwrap();
        let grads = tape.backward(&st, s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn avg_pool_gradient_is_uniform_quarter() {
        let mut st = store();
        let p = st.register(ParamGroup::Weight, Tensor::filled(Shape::new(1, 1, 2, 2), 2.0));
        let mut tape = Tape::new();
        let x = tape.param(&st, p);
        let y = tape.apply(&st, Prim::AvgPool2, &[x]).unwrap();
        let s = tape.apply(&st, Prim::SumAll, &[y]).unwrap();
        let grads = tape.backward(&st, s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn odd_spatial_pooling_is_rejected() {
        let st = store();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::filled(Shape::new(1, 1, 3, 4), 1.0));
        assert!(matches!(
            tape.apply(&st, Prim::MaxPool2, &[x]),
            Err(TensorError::OddSpatialSize(_))
        ));
    }

    #[test]
    fn channel_shuffle_is_a_permutation() {
        let st = store();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_fn(Shape::new(1, 4, 1, 1), |_, c, _, _| c as f64));
        let y = tape.apply(&st, Prim::ShuffleC { groups: 2 }, &[x]).unwrap();
        assert_eq!(tape.value(&st, y).data(), &[0.0, 2.0, 1.0, 3.0]);
    }

    #[test]
    fn masked_softmax_zeroes_dead_entries() {
        let st = store();
        let mut tape = Tape::new();
        let x = tape.input(
            Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, 100.0, 1.0]).unwrap(),
        );
        let y = tape
            .apply(&st, Prim::MaskedSoftmaxW { mask: 0b101 }, &[x])
            .unwrap();
        let out = tape.value(&st, y);
        assert_eq!(out.data()[1], 0.0);
        assert!((out.data()[0] - 0.5).abs() < 1e-15);
        assert!((out.data()[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let st = store();
        let mut tape = Tape::new();
        let a = tape.input(Tensor::filled(Shape::new(2, 2, 3, 3), 1.0));
        let b = tape.input(Tensor::filled(Shape::new(2, 3, 3, 3), 2.0));
        let cat = tape.apply(&st, Prim::ConcatC, &[a, b]).unwrap();
        assert_eq!(tape.shape(cat), Shape::new(2, 5, 3, 3));
        let back = tape
            .apply(&st, Prim::SliceC { start: 2, len: 3 }, &[cat])
            .unwrap();
        assert_eq!(tape.value(&st, back).data(), Tensor::filled(Shape::new(2, 3, 3, 3), 2.0).data());
    }

    #[test]
    fn backward_is_linear_in_the_loss_mix() {
        // grad of (a*f + b*g) equals a*grad(f) + b*grad(g) elementwise.
        let mut st = store();
        let p = st.register(
            ParamGroup::Weight,
            Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.5, -1.25, 2.0]).unwrap(),
        );
        let (a, b) = (0.7, -1.3);

        let grad_of = |st: &ParamStore, scale_f: f64, scale_g: f64| {
            let mut tape = Tape::new();
            let x = tape.param(st, p);
            let f = tape.apply(st, Prim::Mul, &[x, x]).unwrap();
            let f = tape.apply(st, Prim::SumAll, &[f]).unwrap();
            let g = tape.apply(st, Prim::Sigmoid, &[x]).unwrap();
            let g = tape.apply(st, Prim::SumAll, &[g]).unwrap();
            let fs = tape.apply(st, Prim::Scale(scale_f), &[f]).unwrap();
            let gs = tape.apply(st, Prim::Scale(scale_g), &[g]).unwrap();
            let both = tape.apply(st, Prim::Add, &[fs, gs]).unwrap();
            let grads = tape.backward(st, both).unwrap();
            grads.get(p).unwrap().clone()
        };

        let gf = grad_of(&st, 1.0, 0.0);
        let gg = grad_of(&st, 0.0, 1.0);
        let gmix = grad_of(&st, a, b);
        for i in 0..3 {
            let expect = a * gf.data()[i] + b * gg.data()[i];
            assert!((gmix.data()[i] - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn identical_tapes_are_bit_identical() {
        let run = || {
            let st = store();
            let mut tape = Tape::new();
            let x = tape.input(Tensor::from_fn(Shape::new(1, 2, 4, 4), |_, c, h, w| {
                ((c * 31 + h * 7 + w) as f64).sin()
            }));
            let w = tape.input(Tensor::from_fn(Shape::new(2, 2, 3, 3), |n, c, h, w| {
                ((n * 17 + c * 5 + h * 3 + w) as f64).cos()
            }));
            let spec = Conv2dSpec {
                stride: 1,
                padding: 1,
                dilation: 1,
                groups: 1,
            };
            let y = tape.apply(&st, Prim::Conv2d(spec), &[x, w]).unwrap();
            let y = tape.apply(&st, Prim::Relu, &[y]).unwrap();
            let s = tape.apply(&st, Prim::SumAll, &[y]).unwrap();
            tape.value(&st, s).scalar_value()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
