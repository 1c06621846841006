//! The candidate operation catalog and the per-cell-type candidate sets.
//!
//! Three sets exist: down-ops `O1` (stride-2, resolution halving), normal
//! ops `O2` (stride-1, resolution preserving) and up-ops `O3` (stride-2
//! transposed, resolution doubling). Downsample cells draw their special
//! edges from `O1`, Upsample cells from `O3`, and every other edge of every
//! cell from `O2`.
//!
//! Composition rules: every convolution-like operation is the block
//! `conv -> group norm -> ReLU`; pooling and identity carry no norm or
//! activation; `att_`-prefixed kinds append a squeeze-and-excitation gate
//! (global average pool -> 1x1 conv C->C/4 -> ReLU -> 1x1 conv -> sigmoid
//! -> channel scale); pooling between unequal channel counts appends a
//! learned 1x1 projection.

use crate::rng::{self, Rng};
use crate::tensor::{
    Conv2dSpec, ConvT2dSpec, NodeId, ParamGroup, ParamId, ParamStore, Prim, Shape, Tape, Tensor,
    TensorError,
};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OpError {
    #[error("unsupported configuration: {0}")]
    UnsupportedConfig(String),
    #[error("invalid candidate-set query: {0}")]
    InvalidQuery(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// The three cell flavors of the weaved grid.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum CellType {
    Normal,
    Downsample,
    Upsample,
}

impl CellType {
    pub const ALL: [CellType; 3] = [CellType::Normal, CellType::Downsample, CellType::Upsample];

    pub fn name(&self) -> &'static str {
        match self {
            CellType::Normal => "normal",
            CellType::Downsample => "down",
            CellType::Upsample => "up",
        }
    }
}

/// Edge classification inside a cell: special edges leave the
/// resolution-changing input of Downsample/Upsample cells.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum EdgeClass {
    Special,
    Normal,
}

/// The sixteen candidate operations. The number suffix is the operational
/// stride: `_2` halves (down kinds) or doubles (up kinds) the spatial size,
/// `_1` preserves it.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum OpKind {
    // down ops (O1)
    AvgPool2,
    MaxPool2,
    Conv2,
    AtrousConv2,
    SepConv2,
    AttConv2,
    // up ops (O3)
    ConvT2,
    AtrousConvT2,
    SepConvT2,
    AttConvT2,
    // normal ops (O2)
    Identity,
    AttIdentity,
    Conv1,
    AtrousConv1,
    SepConv1,
    ShuffleConv1,
}

/// How an op changes spatial resolution.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum StrideClass {
    Down,
    Keep,
    Up,
}

impl OpKind {
    pub const ALL: [OpKind; 16] = [
        OpKind::AvgPool2,
        OpKind::MaxPool2,
        OpKind::Conv2,
        OpKind::AtrousConv2,
        OpKind::SepConv2,
        OpKind::AttConv2,
        OpKind::ConvT2,
        OpKind::AtrousConvT2,
        OpKind::SepConvT2,
        OpKind::AttConvT2,
        OpKind::Identity,
        OpKind::AttIdentity,
        OpKind::Conv1,
        OpKind::AtrousConv1,
        OpKind::SepConv1,
        OpKind::ShuffleConv1,
    ];

    /// Canonical serialization name; the only strings that may appear in
    /// genotype documents.
    pub fn canonical_name(&self) -> &'static str {
        match self {
            OpKind::AvgPool2 => "avg_pool_2",
            OpKind::MaxPool2 => "max_pool_2",
            OpKind::Conv2 => "conv_2",
            OpKind::AtrousConv2 => "atrous_conv_2",
            OpKind::SepConv2 => "sep_conv_2",
            OpKind::AttConv2 => "att_conv_2",
            OpKind::ConvT2 => "convt_2",
            OpKind::AtrousConvT2 => "atrous_convt_2",
            OpKind::SepConvT2 => "sep_convt_2",
            OpKind::AttConvT2 => "att_convt_2",
            OpKind::Identity => "identity",
            OpKind::AttIdentity => "att_identity",
            OpKind::Conv1 => "conv_1",
            OpKind::AtrousConv1 => "atrous_conv_1",
            OpKind::SepConv1 => "sep_conv_1",
            OpKind::ShuffleConv1 => "shuffle_conv_1",
        }
    }

    pub fn from_canonical_name(name: &str) -> Option<OpKind> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.canonical_name() == name)
    }

    pub fn stride_class(&self) -> StrideClass {
        match self {
            OpKind::AvgPool2
            | OpKind::MaxPool2
            | OpKind::Conv2
            | OpKind::AtrousConv2
            | OpKind::SepConv2
            | OpKind::AttConv2 => StrideClass::Down,
            OpKind::ConvT2 | OpKind::AtrousConvT2 | OpKind::SepConvT2 | OpKind::AttConvT2 => {
                StrideClass::Up
            }
            _ => StrideClass::Keep,
        }
    }

    fn has_attention(&self) -> bool {
        matches!(
            self,
            OpKind::AttConv2 | OpKind::AttConvT2 | OpKind::AttIdentity
        )
    }
}

impl serde::Serialize for OpKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.canonical_name())
    }
}

impl<'de> serde::Deserialize<'de> for OpKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let name = <String as serde::Deserialize>::deserialize(d)?;
        OpKind::from_canonical_name(&name)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown operation name: {name}")))
    }
}

/// Down-ops, in table order.
pub fn down_ops() -> Vec<OpKind> {
    vec![
        OpKind::AvgPool2,
        OpKind::MaxPool2,
        OpKind::Conv2,
        OpKind::AtrousConv2,
        OpKind::SepConv2,
        OpKind::AttConv2,
    ]
}

/// Normal-ops, in table order.
pub fn normal_ops() -> Vec<OpKind> {
    vec![
        OpKind::Identity,
        OpKind::AttIdentity,
        OpKind::Conv1,
        OpKind::AtrousConv1,
        OpKind::SepConv1,
        OpKind::ShuffleConv1,
    ]
}

/// Up-ops, in table order.
pub fn up_ops() -> Vec<OpKind> {
    vec![
        OpKind::ConvT2,
        OpKind::AtrousConvT2,
        OpKind::SepConvT2,
        OpKind::AttConvT2,
    ]
}

/// The candidate list for an edge of the given cell type and class.
///
/// Special edges of Downsample cells use the down-ops, special edges of
/// Upsample cells use the up-ops, and every non-special edge uses the
/// normal-ops. Normal cells have no special edges, so that query is
/// rejected.
pub fn candidate_set(cell_type: CellType, edge_class: EdgeClass) -> Result<Vec<OpKind>, OpError> {
    match (cell_type, edge_class) {
        (CellType::Normal, EdgeClass::Special) => Err(OpError::InvalidQuery(
            "normal cells have no special edges".into(),
        )),
        (CellType::Downsample, EdgeClass::Special) => Ok(down_ops()),
        (CellType::Upsample, EdgeClass::Special) => Ok(up_ops()),
        (_, EdgeClass::Normal) => Ok(normal_ops()),
    }
}

/// Static configuration shared by all op instantiations.
#[derive(Clone, Copy, Debug)]
pub struct OpConfig {
    /// Kernel size of every spatial convolution.
    pub kernel: usize,
    /// Dilation of the atrous kinds.
    pub atrous_dilation: usize,
    /// Group count of the shuffle convolution.
    pub shuffle_groups: usize,
    /// Channel reduction of the squeeze-and-excitation gate.
    pub se_ratio: usize,
    /// Epsilon of the group normalization.
    pub gn_eps: f64,
}

impl Default for OpConfig {
    fn default() -> Self {
        OpConfig {
            kernel: 3,
            atrous_dilation: 2,
            shuffle_groups: 4,
            se_ratio: 4,
            gn_eps: 1e-5,
        }
    }
}

/// Largest group count `<= min(8, c)` that divides `c`.
pub fn norm_groups(channels: usize) -> usize {
    let cap = channels.min(8);
    (1..=cap).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// Uniform fan-in initialization bound for a kernel.
pub(crate) fn init_bound(c_in_per_group: usize, kh: usize, kw: usize) -> f64 {
    (6.0 / (c_in_per_group * kh * kw) as f64).sqrt()
}

pub(crate) fn register_uniform(
    store: &mut ParamStore,
    rng: &mut Rng,
    shape: Shape,
    bound: f64,
) -> ParamId {
    let t = Tensor::from_fn(shape, |_, _, _, _| rng::uniform_sym(rng, bound));
    store.register(ParamGroup::Weight, t)
}

/// Group-norm affine pair, initialized to gamma = 1, beta = 0.
#[derive(Clone, Copy, Debug)]
pub(crate) struct NormParams {
    pub(crate) gamma: ParamId,
    pub(crate) beta: ParamId,
    pub(crate) groups: usize,
}

impl NormParams {
    pub(crate) fn new(store: &mut ParamStore, channels: usize) -> Self {
        let shape = Shape::new(1, channels, 1, 1);
        NormParams {
            gamma: store.register(ParamGroup::Weight, Tensor::filled(shape, 1.0)),
            beta: store.register(ParamGroup::Weight, Tensor::zeros(shape)),
            groups: norm_groups(channels),
        }
    }

    pub(crate) fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        tape.apply(
            store,
            Prim::GroupNorm {
                groups: self.groups,
                eps,
            },
            &[x, gamma, beta],
        )
    }
}

/// Squeeze-and-excitation gate parameters.
#[derive(Clone, Copy, Debug)]
struct SeGate {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl SeGate {
    fn new(store: &mut ParamStore, rng: &mut Rng, channels: usize, ratio: usize) -> Self {
        let hidden = (channels / ratio).max(1);
        SeGate {
            w1: register_uniform(
                store,
                rng,
                Shape::new(hidden, channels, 1, 1),
                init_bound(channels, 1, 1),
            ),
            b1: store.register(ParamGroup::Weight, Tensor::zeros(Shape::new(1, hidden, 1, 1))),
            w2: register_uniform(
                store,
                rng,
                Shape::new(channels, hidden, 1, 1),
                init_bound(hidden, 1, 1),
            ),
            b2: store.register(ParamGroup::Weight, Tensor::zeros(Shape::new(1, channels, 1, 1))),
        }
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId, TensorError> {
        let pooled = tape.apply(store, Prim::GlobalAvgPool, &[x])?;
        let w1 = tape.param(store, self.w1);
        let h = tape.apply(store, Prim::Conv2d(Conv2dSpec::unit()), &[pooled, w1])?;
        let b1 = tape.param(store, self.b1);
        let h = tape.apply(store, Prim::AddChannelBias, &[h, b1])?;
        let h = tape.apply(store, Prim::Relu, &[h])?;
        let w2 = tape.param(store, self.w2);
        let h = tape.apply(store, Prim::Conv2d(Conv2dSpec::unit()), &[h, w2])?;
        let b2 = tape.param(store, self.b2);
        let h = tape.apply(store, Prim::AddChannelBias, &[h, b2])?;
        let gate = tape.apply(store, Prim::Sigmoid, &[h])?;
        tape.apply(store, Prim::MulChannelGate, &[x, gate])
    }
}

#[derive(Clone, Debug)]
enum Body {
    Identity,
    Pool {
        max: bool,
        proj: Option<ParamId>,
    },
    Conv {
        w: ParamId,
        spec: Conv2dSpec,
        shuffle_groups: Option<usize>,
        norm: NormParams,
    },
    ConvT {
        w: ParamId,
        spec: ConvT2dSpec,
        norm: NormParams,
    },
    SepConv {
        dw: ParamId,
        dspec: Conv2dSpec,
        pw: ParamId,
        norm: NormParams,
    },
    SepConvT {
        dw: ParamId,
        dspec: ConvT2dSpec,
        pw: ParamId,
        norm: NormParams,
    },
}

/// One instantiated candidate operation with its own parameters.
#[derive(Clone, Debug)]
pub struct OpInstance {
    pub kind: OpKind,
    pub in_channels: usize,
    pub out_channels: usize,
    body: Body,
    se: Option<SeGate>,
    gn_eps: f64,
    params: Vec<ParamId>,
}

/// Creates an operation with freshly initialized parameters.
///
/// The parameter count and layout are a pure function of
/// `(kind, c_in, c_out, cfg)`; values come from `rng` in a fixed order.
pub fn instantiate(
    kind: OpKind,
    c_in: usize,
    c_out: usize,
    cfg: &OpConfig,
    store: &mut ParamStore,
    rng: &mut Rng,
) -> Result<OpInstance, OpError> {
    if c_in == 0 || c_out == 0 {
        return Err(OpError::UnsupportedConfig(
            "channel counts must be positive".into(),
        ));
    }
    let k = cfg.kernel;
    let before = store.len();
    let body = match kind {
        OpKind::Identity | OpKind::AttIdentity => {
            if c_in != c_out {
                return Err(OpError::UnsupportedConfig(format!(
                    "{} requires equal channel counts, got {c_in} -> {c_out}",
                    kind.canonical_name()
                )));
            }
            Body::Identity
        }
        OpKind::AvgPool2 | OpKind::MaxPool2 => {
            let proj = (c_in != c_out).then(|| {
                register_uniform(
                    store,
                    rng,
                    Shape::new(c_out, c_in, 1, 1),
                    init_bound(c_in, 1, 1),
                )
            });
            Body::Pool {
                max: kind == OpKind::MaxPool2,
                proj,
            }
        }
        OpKind::Conv1
        | OpKind::Conv2
        | OpKind::AtrousConv1
        | OpKind::AtrousConv2
        | OpKind::AttConv2
        | OpKind::ShuffleConv1 => {
            let stride = if kind.stride_class() == StrideClass::Down {
                2
            } else {
                1
            };
            let dilation = match kind {
                OpKind::AtrousConv1 | OpKind::AtrousConv2 => cfg.atrous_dilation,
                _ => 1,
            };
            let groups = if kind == OpKind::ShuffleConv1 {
                let g = cfg.shuffle_groups;
                if c_in % g != 0 || c_out % g != 0 {
                    return Err(OpError::UnsupportedConfig(format!(
                        "shuffle groups {g} must divide both {c_in} and {c_out}"
                    )));
                }
                g
            } else {
                1
            };
            let spec = Conv2dSpec {
                stride,
                padding: dilation, // "same" for 3x3 kernels
                dilation,
                groups,
            };
            let w = register_uniform(
                store,
                rng,
                Shape::new(c_out, c_in / groups, k, k),
                init_bound(c_in / groups, k, k),
            );
            Body::Conv {
                w,
                spec,
                shuffle_groups: (kind == OpKind::ShuffleConv1 && groups > 1).then_some(groups),
                norm: NormParams::new(store, c_out),
            }
        }
        OpKind::ConvT2 | OpKind::AtrousConvT2 | OpKind::AttConvT2 => {
            let dilation = if kind == OpKind::AtrousConvT2 {
                cfg.atrous_dilation
            } else {
                1
            };
            // padding = dilation plus output_padding 1 gives exactly 2x
            // output for a 3x3 kernel at stride 2
            let spec = ConvT2dSpec {
                stride: 2,
                padding: dilation,
                output_padding: 1,
                dilation,
                groups: 1,
            };
            let w = register_uniform(
                store,
                rng,
                Shape::new(c_in, c_out, k, k),
                init_bound(c_in, k, k),
            );
            Body::ConvT {
                w,
                spec,
                norm: NormParams::new(store, c_out),
            }
        }
        OpKind::SepConv1 | OpKind::SepConv2 => {
            let stride = if kind == OpKind::SepConv2 { 2 } else { 1 };
            let dspec = Conv2dSpec {
                stride,
                padding: 1,
                dilation: 1,
                groups: c_in,
            };
            let dw = register_uniform(store, rng, Shape::new(c_in, 1, k, k), init_bound(1, k, k));
            let pw = register_uniform(
                store,
                rng,
                Shape::new(c_out, c_in, 1, 1),
                init_bound(c_in, 1, 1),
            );
            Body::SepConv {
                dw,
                dspec,
                pw,
                norm: NormParams::new(store, c_out),
            }
        }
        OpKind::SepConvT2 => {
            let dspec = ConvT2dSpec {
                stride: 2,
                padding: 1,
                output_padding: 1,
                dilation: 1,
                groups: c_in,
            };
            let dw = register_uniform(store, rng, Shape::new(c_in, 1, k, k), init_bound(1, k, k));
            let pw = register_uniform(
                store,
                rng,
                Shape::new(c_out, c_in, 1, 1),
                init_bound(c_in, 1, 1),
            );
            Body::SepConvT {
                dw,
                dspec,
                pw,
                norm: NormParams::new(store, c_out),
            }
        }
    };
    let se = kind
        .has_attention()
        .then(|| SeGate::new(store, rng, c_out, cfg.se_ratio));
    let params = store.ids_registered_since(before);
    Ok(OpInstance {
        kind,
        in_channels: c_in,
        out_channels: c_out,
        body,
        se,
        gn_eps: cfg.gn_eps,
        params,
    })
}

impl OpInstance {
    /// Parameters owned by this instance, in registration order.
    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.params.iter().map(|&p| store.value(p).len()).sum()
    }

    /// Runs the operation on `x`, recording on `tape`.
    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId, OpError> {
        let xs = tape.shape(x);
        if xs.c != self.in_channels {
            return Err(OpError::Tensor(TensorError::ShapeMismatch(format!(
                "{} expects {} input channels, got {}",
                self.kind.canonical_name(),
                self.in_channels,
                xs.c
            ))));
        }
        let out = match &self.body {
            Body::Identity => x,
            Body::Pool { max, proj } => {
                let pooled = if *max {
                    tape.apply(store, Prim::MaxPool2, &[x])?
                } else {
                    tape.apply(store, Prim::AvgPool2, &[x])?
                };
                match proj {
                    Some(w) => {
                        let w = tape.param(store, *w);
                        tape.apply(store, Prim::Conv2d(Conv2dSpec::unit()), &[pooled, w])?
                    }
                    None => pooled,
                }
            }
            Body::Conv {
                w,
                spec,
                shuffle_groups,
                norm,
            } => {
                let w = tape.param(store, *w);
                let mut y = tape.apply(store, Prim::Conv2d(*spec), &[x, w])?;
                if let Some(g) = shuffle_groups {
                    y = tape.apply(store, Prim::ShuffleC { groups: *g }, &[y])?;
                }
                let y = norm.apply(tape, store, y, self.gn_eps)?;
                tape.apply(store, Prim::Relu, &[y])?
            }
            Body::ConvT { w, spec, norm } => {
                let w = tape.param(store, *w);
                let y = tape.apply(store, Prim::ConvT2d(*spec), &[x, w])?;
                let y = norm.apply(tape, store, y, self.gn_eps)?;
                tape.apply(store, Prim::Relu, &[y])?
            }
            Body::SepConv {
                dw,
                dspec,
                pw,
                norm,
            } => {
                let dw = tape.param(store, *dw);
                let y = tape.apply(store, Prim::Conv2d(*dspec), &[x, dw])?;
                let pw = tape.param(store, *pw);
                let y = tape.apply(store, Prim::Conv2d(Conv2dSpec::unit()), &[y, pw])?;
                let y = norm.apply(tape, store, y, self.gn_eps)?;
                tape.apply(store, Prim::Relu, &[y])?
            }
            Body::SepConvT {
                dw,
                dspec,
                pw,
                norm,
            } => {
                let dw = tape.param(store, *dw);
                let y = tape.apply(store, Prim::ConvT2d(*dspec), &[x, dw])?;
                let pw = tape.param(store, *pw);
                let y = tape.apply(store, Prim::Conv2d(Conv2dSpec::unit()), &[y, pw])?;
                let y = norm.apply(tape, store, y, self.gn_eps)?;
                tape.apply(store, Prim::Relu, &[y])?
            }
        };
        let out = match &self.se {
            Some(gate) => gate.apply(tape, store, out)?,
            None => out,
        };
        Ok(out)
    }

    /// Expected output spatial size for an input of `(h, w)`.
    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        match self.kind.stride_class() {
            StrideClass::Down => (h / 2, w / 2),
            StrideClass::Keep => (h, w),
            StrideClass::Up => (h * 2, w * 2),
        }
    }

    /// Forces the attention gate of an `att_` kind to emit exactly 1, by
    /// zeroing the final projection and saturating its bias. Used by tests.
    pub fn saturate_attention(&self, store: &mut ParamStore, bias: f64) {
        if let Some(gate) = &self.se {
            for v in store.get_mut(gate.w2).value.data_mut() {
                *v = 0.0;
            }
            for v in store.get_mut(gate.b2).value.data_mut() {
                *v = bias;
            }
        }
    }

    /// The main kernel parameter (spatial convolution weight), when one
    /// exists. Used by tests to probe gradients and overwrite kernels.
    pub fn kernel_param(&self) -> Option<ParamId> {
        match &self.body {
            Body::Identity => None,
            Body::Pool { proj, .. } => *proj,
            Body::Conv { w, .. } | Body::ConvT { w, .. } => Some(*w),
            Body::SepConv { dw, .. } | Body::SepConvT { dw, .. } => Some(*dw),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;

    fn mk(kind: OpKind, c_in: usize, c_out: usize) -> (OpInstance, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = rng::seeded(42);
        let op = instantiate(kind, c_in, c_out, &OpConfig::default(), &mut store, &mut rng)
            .expect("instantiate");
        (op, store)
    }

    #[test]
    fn identity_has_no_parameters() {
        let (op, store) = mk(OpKind::Identity, 8, 8);
        assert_eq!(op.param_count(&store), 0);
    }

    #[test]
    fn conv1_parameter_shapes() {
        let (op, store) = mk(OpKind::Conv1, 4, 4);
        let shapes: Vec<Shape> = op.params().iter().map(|&p| store.value(p).shape()).collect();
        assert!(shapes.contains(&Shape::new(4, 4, 3, 3)), "3x3 kernel");
        // norm affine pair
        assert_eq!(
            shapes.iter().filter(|s| **s == Shape::new(1, 4, 1, 1)).count(),
            2
        );
    }

    #[test]
    fn sep_conv2_parameter_shapes() {
        let (op, store) = mk(OpKind::SepConv2, 4, 8);
        let shapes: Vec<Shape> = op.params().iter().map(|&p| store.value(p).shape()).collect();
        assert!(shapes.contains(&Shape::new(4, 1, 3, 3)), "depthwise kernel");
        assert!(shapes.contains(&Shape::new(8, 4, 1, 1)), "pointwise kernel");
    }

    #[test]
    fn instantiation_is_deterministic_in_kind_and_channels() {
        let (op_a, store_a) = mk(OpKind::AttConv2, 4, 8);
        let (op_b, store_b) = mk(OpKind::AttConv2, 4, 8);
        assert_eq!(op_a.param_count(&store_a), op_b.param_count(&store_b));
        for (&pa, &pb) in op_a.params().iter().zip(op_b.params()) {
            assert_eq!(store_a.value(pa).data(), store_b.value(pb).data());
        }
    }

    #[test]
    fn shuffle_groups_must_divide_channels() {
        let mut store = ParamStore::new();
        let mut rng = rng::seeded(1);
        let err = instantiate(
            OpKind::ShuffleConv1,
            6,
            6,
            &OpConfig::default(),
            &mut store,
            &mut rng,
        );
        assert!(matches!(err, Err(OpError::UnsupportedConfig(_))));
    }

    #[test]
    fn max_pool_two_by_two() {
        let (op, store) = mk(OpKind::MaxPool2, 1, 1);
        let mut tape = Tape::new();
        let x = tape.input(
            Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let y = op.apply(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(&store, y).data(), &[4.0]);
    }

    #[test]
    fn identity_output_is_bit_identical() {
        let (op, store) = mk(OpKind::Identity, 3, 3);
        let mut tape = Tape::new();
        let input = Tensor::from_fn(Shape::new(1, 3, 4, 4), |_, c, h, w| {
            (c as f64 * 0.77 + h as f64 * 0.13 - w as f64 * 0.31).sin()
        });
        let x = tape.input(input.clone());
        let y = op.apply(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(&store, y), &input);
    }

    #[test]
    fn stride_contracts_on_8x8() {
        let c = 4;
        for kind in OpKind::ALL {
            let c_out = 2 * c; // exercise channel adaptation too
            let (c_in, c_out) = match kind.stride_class() {
                StrideClass::Keep => (c, c), // identity family needs equal
                _ => (c, c_out),
            };
            let (op, store) = mk(kind, c_in, c_out);
            let mut tape = Tape::new();
            let x = tape.input(Tensor::filled(Shape::new(1, c_in, 8, 8), 0.5));
            let y = op.apply(&mut tape, &store, x).unwrap();
            let s = tape.shape(y);
            let expect = match kind.stride_class() {
                StrideClass::Down => Shape::new(1, c_out, 4, 4),
                StrideClass::Keep => Shape::new(1, c_out, 8, 8),
                StrideClass::Up => Shape::new(1, c_out, 16, 16),
            };
            assert_eq!(s, expect, "{}", kind.canonical_name());
        }
    }

    #[test]
    fn candidate_sets_match_the_table() {
        let names = |set: Vec<OpKind>| -> Vec<&'static str> {
            set.iter().map(|k| k.canonical_name()).collect()
        };
        assert_eq!(
            names(candidate_set(CellType::Downsample, EdgeClass::Special).unwrap()),
            [
                "avg_pool_2",
                "max_pool_2",
                "conv_2",
                "atrous_conv_2",
                "sep_conv_2",
                "att_conv_2"
            ]
        );
        assert_eq!(
            names(candidate_set(CellType::Upsample, EdgeClass::Special).unwrap()),
            ["convt_2", "atrous_convt_2", "sep_convt_2", "att_convt_2"]
        );
        for ct in CellType::ALL {
            assert_eq!(
                names(candidate_set(ct, EdgeClass::Normal).unwrap()),
                [
                    "identity",
                    "att_identity",
                    "conv_1",
                    "atrous_conv_1",
                    "sep_conv_1",
                    "shuffle_conv_1"
                ]
            );
        }
        assert!(matches!(
            candidate_set(CellType::Normal, EdgeClass::Special),
            Err(OpError::InvalidQuery(_))
        ));
    }

    #[test]
    fn saturated_attention_identity_equals_identity() {
        let (op, mut store) = mk(OpKind::AttIdentity, 4, 4);
        op.saturate_attention(&mut store, 25.0);
        let input = Tensor::from_fn(Shape::new(1, 4, 6, 6), |_, c, h, w| {
            ((c + h + w) as f64 * 0.381).cos()
        });
        let mut tape = Tape::new();
        let x = tape.input(input.clone());
        let y = op.apply(&mut tape, &store, x).unwrap();
        assert!(tape.value(&store, y).max_abs_diff(&input) <= 1e-9);
    }

    #[test]
    fn shuffle_with_one_group_equals_plain_conv() {
        let cfg = OpConfig {
            shuffle_groups: 1,
            ..OpConfig::default()
        };
        let mut store = ParamStore::new();
        let mut rng = rng::seeded(5);
        let shuffle = instantiate(OpKind::ShuffleConv1, 4, 4, &cfg, &mut store, &mut rng).unwrap();
        let plain = instantiate(
            OpKind::Conv1,
            4,
            4,
            &OpConfig::default(),
            &mut store,
            &mut rng,
        )
        .unwrap();
        // copy the shuffle kernel into the plain conv so both share weights
        let src = store.value(shuffle.kernel_param().unwrap()).clone();
        store.get_mut(plain.kernel_param().unwrap()).value = src;

        let input = Tensor::from_fn(Shape::new(1, 4, 5, 5), |_, c, h, w| {
            ((c * 13 + h * 3 + w) as f64 * 0.173).sin()
        });
        let mut tape = Tape::new();
        let x = tape.input(input);
        let a = shuffle.apply(&mut tape, &store, x).unwrap();
        let b = plain.apply(&mut tape, &store, x).unwrap();
        let diff = tape.value(&store, a).max_abs_diff(tape.value(&store, b));
        assert!(diff <= 1e-12, "diff {diff}");
    }

    /// FD-checks input and kernel gradients of every catalog op on small
    /// random inputs. The full-size battery runs in the acceptance suite.
    #[test]
    fn every_op_passes_gradient_checks() {
        for kind in OpKind::ALL {
            let (c_in, c_out) = match kind.stride_class() {
                StrideClass::Keep => (4, 4),
                _ => (4, 8),
            };
            let (op, mut store) = mk(kind, c_in, c_out);
            let input = {
                let mut r = rng::seeded(9);
                Tensor::from_fn(Shape::new(1, c_in, 4, 4), |_, _, _, _| {
                    rng::uniform_sym(&mut r, 1.0)
                })
            };

            // input gradient
            let err = finite_diff_check(
                |x| {
                    let mut tape = Tape::new();
                    let xn = tape.input(x.clone());
                    let y = op
                        .apply(&mut tape, &store, xn)
                        .map_err(|e| crate::tensor::TensorError::UnsupportedConfig(e.to_string()))?;
                    let sq = tape.apply(&store, Prim::Mul, &[y, y])?;
                    let loss = tape.apply(&store, Prim::SumAll, &[sq])?;
                    let g = tape.input_grad(&store, loss, xn)?;
                    Ok((tape.value(&store, loss).scalar_value(), g))
                },
                &input,
                1e-5,
            )
            .unwrap();
            assert!(err <= 1e-4, "{} input grad err {err}", kind.canonical_name());

            // kernel gradient, when the op has one
            if let Some(pid) = op.kernel_param() {
                let kval = store.value(pid).clone();
                let err = finite_diff_check(
                    |k| {
                        let mut probe = store.clone();
                        probe.get_mut(pid).value = k.clone();
                        let mut tape = Tape::new();
                        let xn = tape.input(input.clone());
                        let y = op.apply(&mut tape, &probe, xn).map_err(|e| {
                            crate::tensor::TensorError::UnsupportedConfig(e.to_string())
                        })?;
                        let sq = tape.apply(&probe, Prim::Mul, &[y, y])?;
                        let loss = tape.apply(&probe, Prim::SumAll, &[sq])?;
                        let grads = tape.backward(&probe, loss)?;
                        Ok((
                            tape.value(&probe, loss).scalar_value(),
                            grads.get_or_zeros(pid, k.shape()),
                        ))
                    },
                    &kval,
                    1e-5,
                )
                .unwrap();
                assert!(err <= 1e-4, "{} kernel grad err {err}", kind.canonical_name());
                store.get_mut(pid).value = kval;
            }
        }
    }
}
