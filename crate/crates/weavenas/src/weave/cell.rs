//! Relaxed cells: a DAG of mixed-operation edges over M intermediate maps.
//!
//! Edge layout for M intermediate maps: for destination `z_j` the sources
//! are `in0`, `in1`, `z_0 .. z_{j-1}`, enumerated in that order, giving
//! `E = 2M + M(M-1)/2` edges (14 for M = 4). Special edges are exactly
//! those leaving `in1` in Downsample and Upsample cells — the slot whose
//! resolution differs from the cell output.
//!
//! A cell preprocesses each input slot to the slot's expected channel
//! count and resolution with a 1x1 conv (stride 2 when the input arrives
//! at twice the slot resolution, after a bilinear x2 when it arrives at
//! half), followed by group norm and ReLU. Every edge then computes a
//! softmax-weighted sum of its candidates, each intermediate map sums its
//! incoming edges, and a final 1x1 projection maps the concatenation of
//! all intermediate maps back to the cell width.

use super::{resolve_inputs, Branch, Coord, GridSpec, WeaveError};
use crate::ops::{
    self, register_uniform, CellType, EdgeClass, NormParams, OpConfig, OpInstance, OpKind,
};
use crate::rng::Rng;
use crate::tensor::{
    Axis, Conv2dSpec, NodeId, ParamGroup, ParamId, ParamStore, Prim, Shape, Tape, Tensor,
};

/// Candidate lists per role; start with [`OpSets::full`] and shrink
/// between search stages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpSets {
    pub down: Vec<OpKind>,
    pub normal: Vec<OpKind>,
    pub up: Vec<OpKind>,
}

impl OpSets {
    pub fn full() -> Self {
        OpSets {
            down: ops::down_ops(),
            normal: ops::normal_ops(),
            up: ops::up_ops(),
        }
    }

    /// The candidate list used by an edge of `cell_type` and `class`.
    pub fn for_edge(&self, cell_type: CellType, class: EdgeClass) -> &[OpKind] {
        match (cell_type, class) {
            (CellType::Downsample, EdgeClass::Special) => &self.down,
            (CellType::Upsample, EdgeClass::Special) => &self.up,
            _ => &self.normal,
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.down.len(), self.normal.len(), self.up.len())
    }
}

/// One edge of the cell DAG. Sources 0 and 1 are the input slots,
/// `2 + k` is intermediate map `z_k`; `dst` indexes the intermediate map.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct CellEdge {
    pub src: usize,
    pub dst: usize,
}

/// The cell DAG for a given intermediate-map count.
#[derive(Clone, Debug)]
pub struct CellGraph {
    pub m: usize,
    pub edges: Vec<CellEdge>,
}

impl CellGraph {
    pub fn new(m: usize) -> Self {
        let mut edges = Vec::new();
        for dst in 0..m {
            for src in 0..2 + dst {
                edges.push(CellEdge { src, dst });
            }
        }
        CellGraph { m, edges }
    }

    /// Class of edge `idx` in a cell of `cell_type`.
    pub fn edge_class(&self, cell_type: CellType, idx: usize) -> EdgeClass {
        if cell_type != CellType::Normal && self.edges[idx].src == 1 {
            EdgeClass::Special
        } else {
            EdgeClass::Normal
        }
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Indices of edges entering `dst`, in enumeration order.
    pub fn incoming(&self, dst: usize) -> Vec<usize> {
        self.edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.dst == dst)
            .map(|(i, _)| i)
            .collect()
    }
}

/// How an input slot adapts resolution.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub(crate) enum PreMode {
    Same,
    /// Input arrives at twice the slot resolution: 1x1 conv, stride 2.
    Halve,
    /// Input arrives at half the slot resolution: bilinear x2, then 1x1.
    Double,
}

/// Channel count and resolution adaptation for each input slot of a
/// branch's cell at `(d, l)`; `None` when the branch is infeasible.
/// Duplicated inputs simply adopt the slot's canonical geometry, so every
/// cell stays binary-input.
pub(crate) fn slot_plan(
    grid: &GridSpec,
    d: usize,
    l: usize,
    branch: Branch,
) -> Option<((usize, PreMode), (usize, PreMode))> {
    let (c0, c1) = resolve_inputs(grid, d, l, branch).slots()?;
    let slot_depths = match branch {
        Branch::Down => (d, d - 1),
        Branch::Normal => (d, d),
        Branch::Up => (d, d + 1),
    };
    let slot_of = |coord: Coord, slot_depth: usize| {
        let c_in = grid.channels_at(coord.0);
        let mode = match coord.0.cmp(&slot_depth) {
            std::cmp::Ordering::Equal => PreMode::Same,
            std::cmp::Ordering::Less => PreMode::Halve,
            std::cmp::Ordering::Greater => PreMode::Double,
        };
        (c_in, mode)
    };
    Some((slot_of(c0, slot_depths.0), slot_of(c1, slot_depths.1)))
}

/// Input-slot adapter: channel and resolution reconciliation.
#[derive(Clone, Debug)]
pub(crate) struct PreBlock {
    conv: ParamId,
    norm: NormParams,
    mode: PreMode,
    gn_eps: f64,
}

impl PreBlock {
    pub(crate) fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        c_in: usize,
        c_out: usize,
        mode: PreMode,
    ) -> Self {
        PreBlock {
            conv: register_uniform(
                store,
                rng,
                Shape::new(c_out, c_in, 1, 1),
                ops::init_bound(c_in, 1, 1),
            ),
            norm: NormParams::new(store, c_out),
            mode,
            gn_eps: 1e-5,
        }
    }

    pub(crate) fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
    ) -> Result<NodeId, WeaveError> {
        let x = match self.mode {
            PreMode::Same | PreMode::Halve => x,
            PreMode::Double => tape.apply(store, Prim::BilinearUp2, &[x])?,
        };
        let stride = if self.mode == PreMode::Halve { 2 } else { 1 };
        let w = tape.param(store, self.conv);
        let spec = Conv2dSpec {
            stride,
            padding: 0,
            dilation: 1,
            groups: 1,
        };
        let y = tape.apply(store, Prim::Conv2d(spec), &[x, w])?;
        let y = self.norm.apply(tape, store, y, self.gn_eps)?;
        Ok(tape.apply(store, Prim::Relu, &[y])?)
    }

    pub(crate) fn params(&self) -> [ParamId; 3] {
        [self.conv, self.norm.gamma, self.norm.beta]
    }
}

/// Output projection: 1x1 conv from the M-way concatenation back to the
/// cell width, then group norm and ReLU.
#[derive(Clone, Debug)]
pub(crate) struct ProjBlock {
    conv: ParamId,
    norm: NormParams,
    gn_eps: f64,
}

impl ProjBlock {
    pub(crate) fn new(store: &mut ParamStore, rng: &mut Rng, c_in: usize, c_out: usize) -> Self {
        ProjBlock {
            conv: register_uniform(
                store,
                rng,
                Shape::new(c_out, c_in, 1, 1),
                ops::init_bound(c_in, 1, 1),
            ),
            norm: NormParams::new(store, c_out),
            gn_eps: 1e-5,
        }
    }

    pub(crate) fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
    ) -> Result<NodeId, WeaveError> {
        let w = tape.param(store, self.conv);
        let y = tape.apply(store, Prim::Conv2d(Conv2dSpec::unit()), &[x, w])?;
        let y = self.norm.apply(tape, store, y, self.gn_eps)?;
        Ok(tape.apply(store, Prim::Relu, &[y])?)
    }

    pub(crate) fn params(&self) -> [ParamId; 3] {
        [self.conv, self.norm.gamma, self.norm.beta]
    }
}

/// Softmax-weighted sum of candidate operations on one edge.
pub fn mixed_edge_forward(
    tape: &mut Tape,
    store: &ParamStore,
    ops: &[OpInstance],
    alpha: ParamId,
    x: NodeId,
) -> Result<NodeId, WeaveError> {
    let logits = tape.param(store, alpha);
    let probs = tape.apply(store, Prim::Softmax(Axis::W), &[logits])?;
    let mut acc: Option<NodeId> = None;
    for (oi, op) in ops.iter().enumerate() {
        let y = op.apply(tape, store, x)?;
        let scaled = tape.apply(store, Prim::MulElem { index: oi }, &[y, probs])?;
        acc = Some(match acc {
            None => scaled,
            Some(a) => tape.apply(store, Prim::Add, &[a, scaled])?,
        });
    }
    acc.ok_or_else(|| WeaveError::InvalidGrid("edge with empty candidate list".into()))
}

/// One relaxed cell instance: its own operation weights, shared (or
/// per-instance) architecture logits.
#[derive(Clone, Debug)]
pub struct Cell {
    pub ctype: CellType,
    pub channels: usize,
    pub(crate) pre0: PreBlock,
    pub(crate) pre1: PreBlock,
    /// `edges[i][o]` is candidate `o` of edge `i`.
    pub(crate) edge_ops: Vec<Vec<OpInstance>>,
    pub(crate) proj: ProjBlock,
    /// Per-edge architecture logits `(1, 1, 1, |O|)`.
    pub(crate) alpha: Vec<ParamId>,
    pub(crate) graph: CellGraph,
}

impl Cell {
    /// Builds a cell of `ctype` at width `channels`, with input slots
    /// arriving at `c_in0` / `c_in1` channels and the given resolution
    /// adaptations. `alpha` supplies the per-edge logits (shared across
    /// cells of one type unless per-node logits are configured).
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        ctype: CellType,
        graph: CellGraph,
        channels: usize,
        (c_in0, mode0): (usize, PreMode),
        (c_in1, mode1): (usize, PreMode),
        op_sets: &OpSets,
        alpha: Vec<ParamId>,
        op_cfg: &OpConfig,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self, WeaveError> {
        assert_eq!(alpha.len(), graph.edge_count());
        let pre0 = PreBlock::new(store, rng, c_in0, channels, mode0);
        let pre1 = PreBlock::new(store, rng, c_in1, channels, mode1);
        let mut edge_ops = Vec::with_capacity(graph.edge_count());
        for idx in 0..graph.edge_count() {
            let class = graph.edge_class(ctype, idx);
            let kinds = op_sets.for_edge(ctype, class);
            let mut instances = Vec::with_capacity(kinds.len());
            for &kind in kinds {
                instances.push(ops::instantiate(kind, channels, channels, op_cfg, store, rng)?);
            }
            edge_ops.push(instances);
        }
        let proj = ProjBlock::new(store, rng, graph.m * channels, channels);
        Ok(Cell {
            ctype,
            channels,
            pre0,
            pre1,
            edge_ops,
            proj,
            alpha,
            graph,
        })
    }

    /// Relaxed forward: preprocess both slots, evaluate every mixed edge,
    /// sum per intermediate map, project the concatenation.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        in0: NodeId,
        in1: NodeId,
    ) -> Result<NodeId, WeaveError> {
        let x0 = self.pre0.apply(tape, store, in0)?;
        let x1 = self.pre1.apply(tape, store, in1)?;
        let mut sources: Vec<NodeId> = vec![x0, x1];
        for dst in 0..self.graph.m {
            let mut z: Option<NodeId> = None;
            for idx in self.graph.incoming(dst) {
                let src_node = sources[self.graph.edges[idx].src];
                let mixed = mixed_edge_forward(
                    tape,
                    store,
                    &self.edge_ops[idx],
                    self.alpha[idx],
                    src_node,
                )?;
                z = Some(match z {
                    None => mixed,
                    Some(a) => tape.apply(store, Prim::Add, &[a, mixed])?,
                });
            }
            sources.push(z.expect("every intermediate map has incoming edges"));
        }
        let cat = tape.apply(store, Prim::ConcatC, &sources[2..])?;
        self.proj.apply(tape, store, cat)
    }

    /// All parameters of this cell in registration order (operation
    /// weights, not the architecture logits).
    pub fn weight_params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = Vec::new();
        v.extend(self.pre0.params());
        v.extend(self.pre1.params());
        for edge in &self.edge_ops {
            for op in edge {
                v.extend_from_slice(op.params());
            }
        }
        v.extend(self.proj.params());
        v
    }
}

/// Registers zero-initialized per-edge alpha logits for one cell type.
pub(crate) fn register_alpha(
    store: &mut ParamStore,
    graph: &CellGraph,
    ctype: CellType,
    op_sets: &OpSets,
) -> Vec<ParamId> {
    (0..graph.edge_count())
        .map(|idx| {
            let class = graph.edge_class(ctype, idx);
            let len = op_sets.for_edge(ctype, class).len();
            store.register(ParamGroup::Alpha, Tensor::zeros(Shape::new(1, 1, 1, len)))
        })
        .collect()
}
