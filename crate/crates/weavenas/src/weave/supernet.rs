//! Building and running the relaxed super-network.

use super::cell::{register_alpha, slot_plan, Cell, CellGraph, OpSets};
use super::{
    resolve_inputs, structural_feasibility, useful_nodes, Branch, BranchSet, Coord, GridSpec,
    PerType, WeaveError,
};
use crate::ops::{self, CellType, OpConfig};
use crate::rng::Rng;
use crate::tensor::{
    Conv2dSpec, NodeId, ParamGroup, ParamId, ParamStore, Prim, Shape, Tape, Tensor,
};
use std::collections::BTreeMap;

/// Per-node branch feasibility after applying an ablation mask.
///
/// A branch survives when it is structurally feasible and enabled. Nodes
/// where the mask would leave no branch keep their structural set instead:
/// the resolution-entering connections are what make the grid a network at
/// all, so an ablation never removes a node's last way of being computed.
/// Errors when no prediction head would remain reachable.
pub fn branch_mask(
    grid: &GridSpec,
    enabled: BranchSet,
) -> Result<BTreeMap<Coord, [bool; 3]>, WeaveError> {
    if enabled.is_empty() {
        return Err(WeaveError::InfeasibleGrid(
            "the enabled branch set is empty".into(),
        ));
    }
    let structural = structural_feasibility(grid);
    let mut masked = BTreeMap::new();
    for (&coord, &feas) in &structural {
        let mut m = [false; 3];
        for b in Branch::ALL {
            m[b.index()] = feas[b.index()] && enabled.contains(b);
        }
        if m.iter().all(|&x| !x) {
            m = feas; // keep the structurally forced branches
        }
        masked.insert(coord, m);
    }
    let reachable = useful_nodes(grid, &masked);
    if grid.head_nodes().iter().any(|h| !reachable.contains(h)) {
        return Err(WeaveError::InfeasibleGrid(
            "no prediction head is reachable under this mask".into(),
        ));
    }
    Ok(masked)
}

/// Build-time options for the super-network.
#[derive(Clone, Debug)]
pub struct BuildOptions {
    pub op_config: OpConfig,
    /// Fusion directions available to the network-level relaxation.
    pub branch_mask: BranchSet,
    /// Give every cell instance its own architecture logits instead of
    /// sharing them per cell type.
    pub alpha_per_node: bool,
    /// Intermediate maps per cell.
    pub cell_nodes: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            op_config: OpConfig::default(),
            branch_mask: BranchSet::all(),
            alpha_per_node: false,
            cell_nodes: 4,
        }
    }
}

/// The image stem: 3x3 conv to `base_channels`, group norm, ReLU.
#[derive(Clone, Debug)]
pub(crate) struct Stem {
    w: ParamId,
    norm: ops::NormParams,
}

impl Stem {
    pub(crate) fn new(store: &mut ParamStore, rng: &mut Rng, c_out: usize) -> Self {
        Stem {
            w: ops::register_uniform(
                store,
                rng,
                Shape::new(c_out, 1, 3, 3),
                ops::init_bound(1, 3, 3),
            ),
            norm: ops::NormParams::new(store, c_out),
        }
    }

    pub(crate) fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
    ) -> Result<NodeId, WeaveError> {
        let w = tape.param(store, self.w);
        let spec = Conv2dSpec {
            stride: 1,
            padding: 1,
            dilation: 1,
            groups: 1,
        };
        let y = tape.apply(store, Prim::Conv2d(spec), &[x, w])?;
        let y = self.norm.apply(tape, store, y, 1e-5)?;
        Ok(tape.apply(store, Prim::Relu, &[y])?)
    }

    pub(crate) fn params(&self) -> [ParamId; 3] {
        [self.w, self.norm.gamma, self.norm.beta]
    }
}

/// A prediction head: bilinear x2 to full resolution, then 1x1 conv to
/// class logits.
#[derive(Clone, Debug)]
pub(crate) struct Head {
    pub(crate) coord: Coord,
    w: ParamId,
    b: ParamId,
}

impl Head {
    pub(crate) fn new(store: &mut ParamStore, rng: &mut Rng, coord: Coord, c_in: usize, classes: usize) -> Self {
        Head {
            coord,
            w: ops::register_uniform(
                store,
                rng,
                Shape::new(classes, c_in, 1, 1),
                ops::init_bound(c_in, 1, 1),
            ),
            b: store.register(ParamGroup::Weight, Tensor::zeros(Shape::new(1, classes, 1, 1))),
        }
    }

    pub(crate) fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
    ) -> Result<NodeId, WeaveError> {
        let up = tape.apply(store, Prim::BilinearUp2, &[x])?;
        let w = tape.param(store, self.w);
        let y = tape.apply(store, Prim::Conv2d(Conv2dSpec::unit()), &[up, w])?;
        let b = tape.param(store, self.b);
        Ok(tape.apply(store, Prim::AddChannelBias, &[y, b])?)
    }

    pub(crate) fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }

    /// Zeroes the head projection; with zero input the logits become
    /// exactly zero. Used by tests.
    pub(crate) fn zero(&self, store: &mut ParamStore) {
        for v in store.get_mut(self.w).value.data_mut() {
            *v = 0.0;
        }
    }
}

/// One grid node of the super-network: up to three cells plus branch
/// logits over the feasible ones.
#[derive(Debug)]
pub struct SuperNode {
    pub coord: Coord,
    pub beta: ParamId,
    pub feasible: [bool; 3],
    pub(crate) cells: [Option<Cell>; 3],
}

impl SuperNode {
    pub fn cell(&self, b: Branch) -> Option<&Cell> {
        self.cells[b.index()].as_ref()
    }

    fn feasible_mask_bits(&self) -> u32 {
        self.feasible
            .iter()
            .enumerate()
            .fold(0, |acc, (i, &f)| if f { acc | 1 << i } else { acc })
    }
}

/// The weaved super-network `f(w; alpha, beta)`.
#[derive(Debug)]
pub struct SuperNet {
    pub grid: GridSpec,
    pub op_sets: OpSets,
    pub store: ParamStore,
    pub graph: CellGraph,
    pub alpha_per_node: bool,
    pub(crate) stem: Stem,
    pub(crate) nodes: Vec<SuperNode>,
    pub(crate) heads: Vec<Head>,
    /// Shared per-type logits; `None` when every cell owns its own.
    shared_alpha: Option<PerType<Vec<ParamId>>>,
}

/// Builds the super-network over `grid` with the given candidate sets.
///
/// Alpha logits start at zero (uniform mixtures over candidates), beta
/// logits at zero (uniform over feasible branches); operation weights
/// follow the catalog initialization, drawn from `rng` in a fixed order.
pub fn build_supernet(
    grid: GridSpec,
    op_sets: OpSets,
    options: &BuildOptions,
    rng: &mut Rng,
) -> Result<SuperNet, WeaveError> {
    grid.validate()?;
    if op_sets.down.is_empty() || op_sets.normal.is_empty() || op_sets.up.is_empty() {
        return Err(WeaveError::InvalidGrid("empty candidate set".into()));
    }
    let feasibility = branch_mask(&grid, options.branch_mask)?;
    let keep = useful_nodes(&grid, &feasibility);
    let graph = CellGraph::new(options.cell_nodes);

    let mut store = ParamStore::new();
    let stem = Stem::new(&mut store, rng, grid.base_channels);

    let shared_alpha = if options.alpha_per_node {
        None
    } else {
        Some(PerType {
            down: register_alpha(&mut store, &graph, CellType::Downsample, &op_sets),
            normal: register_alpha(&mut store, &graph, CellType::Normal, &op_sets),
            up: register_alpha(&mut store, &graph, CellType::Upsample, &op_sets),
        })
    };

    let mut nodes = Vec::with_capacity(keep.len());
    for &(d, l) in &keep {
        let feas = feasibility[&(d, l)];
        let channels = grid.channels_at(d);
        let mut cells: [Option<Cell>; 3] = [None, None, None];
        for b in Branch::ALL {
            if !feas[b.index()] {
                continue;
            }
            let ctype = b.cell_type();
            let (slot0, slot1) =
                slot_plan(&grid, d, l, b).expect("feasible branch has inputs");
            let alpha = match &shared_alpha {
                Some(shared) => shared.get(ctype).clone(),
                None => register_alpha(&mut store, &graph, ctype, &op_sets),
            };
            cells[b.index()] = Some(Cell::new(
                ctype,
                graph.clone(),
                channels,
                slot0,
                slot1,
                &op_sets,
                alpha,
                &options.op_config,
                &mut store,
                rng,
            )?);
        }
        let beta = store.register(ParamGroup::Beta, Tensor::zeros(Shape::new(1, 1, 1, 3)));
        nodes.push(SuperNode {
            coord: (d, l),
            beta,
            feasible: feas,
            cells,
        });
    }

    let heads = grid
        .head_nodes()
        .into_iter()
        .map(|coord| Head::new(&mut store, rng, coord, grid.channels_at(1), grid.num_classes))
        .collect();

    Ok(SuperNet {
        grid,
        op_sets,
        store,
        graph,
        alpha_per_node: options.alpha_per_node,
        stem,
        nodes,
        heads,
        shared_alpha,
    })
}

impl SuperNet {
    pub fn nodes(&self) -> &[SuperNode] {
        &self.nodes
    }

    pub fn node_at(&self, coord: Coord) -> Option<&SuperNode> {
        self.nodes.iter().find(|n| n.coord == coord)
    }

    pub fn head_coords(&self) -> Vec<Coord> {
        self.heads.iter().map(|h| h.coord).collect()
    }

    /// Shared per-edge alpha logits of one cell type (`None` when logits
    /// are per-node).
    pub fn alpha_logits(&self, t: CellType) -> Option<&[ParamId]> {
        self.shared_alpha.as_ref().map(|s| s.get(t).as_slice())
    }

    /// Relaxed forward pass; returns head logits at full resolution, in
    /// increasing layer order (the last entry is the final prediction).
    pub fn forward(
        &self,
        tape: &mut Tape,
        x: &Tensor,
    ) -> Result<Vec<NodeId>, WeaveError> {
        let input = tape.input(x.clone());
        self.forward_from(tape, input)
    }

    /// Forward from an existing tape node (lets callers reuse inputs).
    pub fn forward_from(
        &self,
        tape: &mut Tape,
        input: NodeId,
    ) -> Result<Vec<NodeId>, WeaveError> {
        let shape = tape.shape(input);
        let div = self.grid.resolution_divisor();
        if shape.c != 1 || shape.h % div != 0 || shape.w % div != 0 || shape.h < div || shape.w < div
        {
            return Err(WeaveError::InvalidGrid(format!(
                "input {} must be single-channel with spatial sizes divisible by {}",
                shape, div
            )));
        }
        let mut values: BTreeMap<Coord, NodeId> = BTreeMap::new();
        values.insert((0, 0), self.stem.apply(tape, &self.store, input)?);

        for node in &self.nodes {
            let (d, l) = node.coord;
            let beta_node = tape.param(&self.store, node.beta);
            let probs = tape.apply(
                &self.store,
                Prim::MaskedSoftmaxW {
                    mask: node.feasible_mask_bits(),
                },
                &[beta_node],
            )?;
            let mut mixed: Option<NodeId> = None;
            for b in Branch::ALL {
                let Some(cell) = node.cells[b.index()].as_ref() else {
                    continue;
                };
                let (c0, c1) = resolve_inputs(&self.grid, d, l, b)
                    .slots()
                    .expect("instantiated branch is feasible");
                let in0 = values[&c0];
                let in1 = values[&c1];
                let out = cell.forward(tape, &self.store, in0, in1)?;
                let scaled = tape.apply(
                    &self.store,
                    Prim::MulElem { index: b.index() },
                    &[out, probs],
                )?;
                mixed = Some(match mixed {
                    None => scaled,
                    Some(acc) => tape.apply(&self.store, Prim::Add, &[acc, scaled])?,
                });
            }
            let value = mixed.ok_or_else(|| {
                WeaveError::InfeasibleGrid(format!("node ({d},{l}) has no feasible branch"))
            })?;
            values.insert(node.coord, value);
        }

        self.heads
            .iter()
            .map(|h| h.apply(tape, &self.store, values[&h.coord]))
            .collect()
    }

    /// Mean softmax probability per candidate for every edge of every
    /// cell type. With shared logits this is the softmax itself; with
    /// per-node logits the softmax is averaged over instances (uniform
    /// when a type has no instances).
    pub fn alpha_probs(&self) -> super::AlphaProbs {
        let probs_for = |t: CellType| -> Vec<Vec<f64>> {
            if let Some(shared) = &self.shared_alpha {
                return shared
                    .get(t)
                    .iter()
                    .map(|&pid| crate::mix::softmax_weights(self.store.value(pid).data()))
                    .collect();
            }
            let instances: Vec<&Cell> = self
                .nodes
                .iter()
                .flat_map(|n| n.cells.iter().flatten())
                .filter(|c| c.ctype == t)
                .collect();
            (0..self.graph.edge_count())
                .map(|e| {
                    let len = self
                        .op_sets
                        .for_edge(t, self.graph.edge_class(t, e))
                        .len();
                    if instances.is_empty() {
                        return vec![1.0 / len as f64; len];
                    }
                    let mut acc = vec![0.0; len];
                    for c in &instances {
                        let p = crate::mix::softmax_weights(self.store.value(c.alpha[e]).data());
                        for (a, v) in acc.iter_mut().zip(p) {
                            *a += v;
                        }
                    }
                    for a in &mut acc {
                        *a /= instances.len() as f64;
                    }
                    acc
                })
                .collect()
        };
        super::AlphaProbs {
            per_type: PerType {
                down: probs_for(CellType::Downsample),
                normal: probs_for(CellType::Normal),
                up: probs_for(CellType::Upsample),
            },
        }
    }

    /// Per-node branch probabilities (softmax over the feasible subset)
    /// and feasibility masks.
    pub fn beta_probs(&self) -> super::BetaProbs {
        let nodes = self
            .nodes
            .iter()
            .map(|n| {
                let logits = self.store.value(n.beta).data();
                let mut p = [0.0; 3];
                let feasible_vals: Vec<f64> = Branch::ALL
                    .iter()
                    .filter(|b| n.feasible[b.index()])
                    .map(|b| logits[b.index()])
                    .collect();
                let soft = crate::mix::softmax_weights(&feasible_vals);
                let mut i = 0;
                for b in Branch::ALL {
                    if n.feasible[b.index()] {
                        p[b.index()] = soft[i];
                        i += 1;
                    }
                }
                (n.coord, p, n.feasible)
            })
            .collect();
        super::BetaProbs { nodes }
    }

    /// Forces a node's branch mixture to be exactly one-hot. Used by
    /// tests and the discretization oracle.
    pub fn force_beta(&mut self, coord: Coord, branch: Branch) {
        let node = self
            .nodes
            .iter()
            .find(|n| n.coord == coord)
            .expect("unknown node");
        assert!(node.feasible[branch.index()], "branch must be feasible");
        let pid = node.beta;
        let data = self.store.get_mut(pid).value.data_mut();
        for (i, v) in data.iter_mut().enumerate() {
            *v = if i == branch.index() { 400.0 } else { -400.0 };
        }
    }

    /// Forces every node's mixture toward `branch` wherever it is
    /// feasible; other nodes keep their current logits.
    pub fn force_beta_everywhere(&mut self, branch: Branch) {
        let coords: Vec<Coord> = self
            .nodes
            .iter()
            .filter(|n| n.feasible[branch.index()])
            .map(|n| n.coord)
            .collect();
        for c in coords {
            self.force_beta(c, branch);
        }
    }

    /// Forces one shared edge mixture to be exactly one-hot on `op_idx`.
    pub fn force_alpha(&mut self, t: CellType, edge: usize, op_idx: usize) {
        let pid = self
            .alpha_logits(t)
            .expect("shared alpha mode")[edge];
        let data = self.store.get_mut(pid).value.data_mut();
        for (i, v) in data.iter_mut().enumerate() {
            *v = if i == op_idx { 400.0 } else { -400.0 };
        }
    }

    /// Discretizes the current relaxation state into a genotype.
    pub fn discretize(&self, mode: super::DiscretizeMode) -> super::Genotype {
        super::discretize(
            &self.grid,
            &self.graph,
            &self.op_sets,
            &self.alpha_probs(),
            &self.beta_probs(),
            mode,
        )
    }

    /// Total parameter count, optionally restricted to one group.
    pub fn param_count(&self, group: Option<ParamGroup>) -> usize {
        self.store.param_count(group)
    }

    /// Zeroes every head projection (test helper).
    pub fn zero_heads(&mut self) {
        let heads: Vec<Head> = self.heads.clone();
        for h in &heads {
            h.zero(&mut self.store);
        }
    }
}
