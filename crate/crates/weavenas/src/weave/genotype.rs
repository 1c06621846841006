//! Discretization of relaxed architecture parameters into genotypes, and
//! realization of genotypes as plain discrete networks.

use super::cell::{slot_plan, CellEdge, CellGraph, OpSets, PreBlock, ProjBlock};
use super::supernet::{Head, Stem, SuperNet};
use super::{resolve_inputs, Branch, Coord, GridSpec, PerType, WeaveError};
use crate::ops::{self, CellType, OpConfig, OpInstance, OpKind};
use crate::rng::Rng;
use crate::tensor::{NodeId, ParamId, ParamStore, Tape, Tensor};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Edge-retention rule for discretization.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscretizeMode {
    /// Keep the two incoming edges with the strongest best-op probability
    /// per intermediate map.
    Top2Edges,
    /// Keep every edge with its best op.
    AllEdges,
}

/// Mean candidate probabilities per `(cell type, edge)`.
#[derive(Clone, Debug)]
pub struct AlphaProbs {
    pub per_type: PerType<Vec<Vec<f64>>>,
}

/// Per-node branch probabilities over the feasible subset.
#[derive(Clone, Debug)]
pub struct BetaProbs {
    pub nodes: Vec<(Coord, [f64; 3], [bool; 3])>,
}

/// One retained edge of a discretized cell.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct GenoEdge {
    /// 0 and 1 are the input slots, `2 + k` is intermediate map `k`.
    pub src: usize,
    pub dst: usize,
    pub op: OpKind,
}

/// Chosen fusion direction of one grid node.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct BranchChoice {
    pub d: usize,
    pub l: usize,
    pub branch: Branch,
}

/// A discretized architecture: per-cell-type retained edges and ops, plus
/// one branch choice per grid node.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Genotype {
    pub schema_version: u32,
    pub depth: usize,
    pub layers: usize,
    pub base_channels: usize,
    pub num_classes: usize,
    /// Intermediate maps per cell.
    pub cell_nodes: usize,
    pub cells: PerType<Vec<GenoEdge>>,
    pub branches: Vec<BranchChoice>,
}

pub const GENOTYPE_SCHEMA_VERSION: u32 = 1;

impl Genotype {
    pub fn branch_for(&self, coord: Coord) -> Option<Branch> {
        self.branches
            .iter()
            .find(|b| (b.d, b.l) == coord)
            .map(|b| b.branch)
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec::new(self.depth, self.layers, self.base_channels, self.num_classes)
    }
}

/// Argmax with ties broken by the lowest index.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Extracts the discrete architecture: per edge the most probable
/// candidate, per intermediate map the strongest incoming edges (all of
/// them in [`DiscretizeMode::AllEdges`]), per node the most probable
/// feasible branch. Ties always resolve to the lowest index.
pub fn discretize(
    grid: &GridSpec,
    graph: &CellGraph,
    op_sets: &OpSets,
    alpha: &AlphaProbs,
    beta: &BetaProbs,
    mode: DiscretizeMode,
) -> Genotype {
    let cells_for = |t: CellType| -> Vec<GenoEdge> {
        let probs = alpha.per_type.get(t);
        // best op and its probability per edge
        let best: Vec<(usize, f64)> = (0..graph.edge_count())
            .map(|e| {
                let p = &probs[e];
                let i = argmax(p);
                (i, p[i])
            })
            .collect();
        let mut retained = Vec::new();
        for dst in 0..graph.m {
            let incoming = graph.incoming(dst);
            let picked: Vec<usize> = match mode {
                DiscretizeMode::AllEdges => incoming,
                DiscretizeMode::Top2Edges => {
                    let mut scored: Vec<(usize, f64)> =
                        incoming.iter().map(|&e| (e, best[e].1)).collect();
                    // strongest first, index breaks ties
                    scored.sort_by(|a, b| {
                        b.1.partial_cmp(&a.1)
                            .unwrap_or(std::cmp::Ordering::Equal)
                            .then(a.0.cmp(&b.0))
                    });
                    let mut keep: Vec<usize> =
                        scored.iter().take(2).map(|&(e, _)| e).collect();
                    keep.sort_unstable();
                    keep
                }
            };
            for e in picked {
                let kinds = op_sets.for_edge(t, graph.edge_class(t, e));
                retained.push(GenoEdge {
                    src: graph.edges[e].src,
                    dst: graph.edges[e].dst,
                    op: kinds[best[e].0],
                });
            }
        }
        retained
    };

    let branches = beta
        .nodes
        .iter()
        .map(|&(coord, probs, feasible)| {
            let mut best: Option<usize> = None;
            for b in Branch::ALL {
                let i = b.index();
                if !feasible[i] {
                    continue;
                }
                best = Some(match best {
                    None => i,
                    Some(j) if probs[i] > probs[j] => i,
                    Some(j) => j,
                });
            }
            BranchChoice {
                d: coord.0,
                l: coord.1,
                branch: Branch::ALL[best.expect("node has a feasible branch")],
            }
        })
        .collect();

    Genotype {
        schema_version: GENOTYPE_SCHEMA_VERSION,
        depth: grid.depth,
        layers: grid.layers,
        base_channels: grid.base_channels,
        num_classes: grid.num_classes,
        cell_nodes: graph.m,
        cells: PerType {
            down: cells_for(CellType::Downsample),
            normal: cells_for(CellType::Normal),
            up: cells_for(CellType::Upsample),
        },
        branches,
    }
}

/// A realized cell: retained edges only, one operation each.
#[derive(Clone, Debug)]
pub(crate) struct DiscreteCell {
    pub(crate) m: usize,
    pub(crate) pre0: PreBlock,
    pub(crate) pre1: PreBlock,
    pub(crate) edges: Vec<(CellEdge, OpInstance)>,
    pub(crate) proj: ProjBlock,
}

impl DiscreteCell {
    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        in0: NodeId,
        in1: NodeId,
    ) -> Result<NodeId, WeaveError> {
        let x0 = self.pre0.apply(tape, store, in0)?;
        let x1 = self.pre1.apply(tape, store, in1)?;
        let mut sources: Vec<NodeId> = vec![x0, x1];
        for dst in 0..self.m {
            let mut z: Option<NodeId> = None;
            for (edge, op) in self.edges.iter().filter(|(e, _)| e.dst == dst) {
                let y = op.apply(tape, store, sources[edge.src])?;
                z = Some(match z {
                    None => y,
                    Some(a) => tape.apply(store, crate::tensor::Prim::Add, &[a, y])?,
                });
            }
            sources.push(z.ok_or_else(|| {
                WeaveError::IncompatibleGenotype(format!(
                    "intermediate map {dst} has no retained incoming edge"
                ))
            })?);
        }
        let cat = tape.apply(store, crate::tensor::Prim::ConcatC, &sources[2..])?;
        self.proj.apply(tape, store, cat)
    }

    fn params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = Vec::new();
        v.extend(self.pre0.params());
        v.extend(self.pre1.params());
        for (_, op) in &self.edges {
            v.extend_from_slice(op.params());
        }
        v.extend(self.proj.params());
        v
    }
}

#[derive(Clone, Debug)]
pub(crate) struct DiscreteNode {
    pub(crate) coord: Coord,
    pub(crate) branch: Branch,
    pub(crate) cell: DiscreteCell,
}

/// A discrete network realized from a genotype: same forward interface as
/// the super-network, no architecture parameters.
#[derive(Clone, Debug)]
pub struct DiscreteNet {
    pub grid: GridSpec,
    pub store: ParamStore,
    pub(crate) stem: Stem,
    pub(crate) nodes: Vec<DiscreteNode>,
    pub(crate) heads: Vec<Head>,
}

/// Grid nodes a genotype actually needs: the closure of the heads under
/// each node's chosen branch, topologically ordered.
fn kept_nodes(genotype: &Genotype, grid: &GridSpec) -> Result<Vec<(Coord, Branch)>, WeaveError> {
    let chosen: BTreeMap<Coord, Branch> = genotype
        .branches
        .iter()
        .map(|b| ((b.d, b.l), b.branch))
        .collect();
    let mut keep: BTreeSet<Coord> = BTreeSet::new();
    let mut work: Vec<Coord> = grid.head_nodes();
    while let Some(coord) = work.pop() {
        if coord == (0, 0) || !keep.insert(coord) {
            continue;
        }
        let branch = chosen.get(&coord).copied().ok_or_else(|| {
            WeaveError::IncompatibleGenotype(format!(
                "no branch choice for required node {coord:?}"
            ))
        })?;
        let resolved = resolve_inputs(grid, coord.0, coord.1, branch);
        let (a, b) = resolved.slots().ok_or_else(|| {
            WeaveError::IncompatibleGenotype(format!(
                "chosen branch {} is infeasible at {coord:?}",
                branch.name()
            ))
        })?;
        for inp in [a, b] {
            if inp != (0, 0) && !keep.contains(&inp) {
                work.push(inp);
            }
        }
    }
    let mut v: Vec<(Coord, Branch)> = keep
        .into_iter()
        .map(|c| (c, chosen[&c]))
        .collect();
    v.sort_by_key(|&((d, l), _)| (l, d));
    Ok(v)
}

fn validate_genotype(genotype: &Genotype, grid: &GridSpec) -> Result<(), WeaveError> {
    if genotype.depth != grid.depth || genotype.layers != grid.layers {
        return Err(WeaveError::IncompatibleGenotype(format!(
            "genotype grid ({}, {}) does not match requested ({}, {})",
            genotype.depth, genotype.layers, grid.depth, grid.layers
        )));
    }
    if genotype.cell_nodes == 0 {
        return Err(WeaveError::IncompatibleGenotype(
            "genotype has zero intermediate maps".into(),
        ));
    }
    for t in CellType::ALL {
        for e in genotype.cells.get(t) {
            if e.dst >= genotype.cell_nodes || e.src >= 2 + e.dst {
                return Err(WeaveError::IncompatibleGenotype(format!(
                    "edge {} -> {} is outside the cell DAG",
                    e.src, e.dst
                )));
            }
        }
    }
    Ok(())
}

/// Realizes a genotype with freshly initialized weights. The grid's
/// `base_channels` and `num_classes` control the realized width, so a
/// genotype can be retrained at a different width than it was searched.
pub fn realize(
    genotype: &Genotype,
    grid: &GridSpec,
    rng: &mut Rng,
) -> Result<DiscreteNet, WeaveError> {
    grid.validate()?;
    validate_genotype(genotype, grid)?;
    let op_cfg = OpConfig::default();
    let mut store = ParamStore::new();
    let stem = Stem::new(&mut store, rng, grid.base_channels);
    let mut nodes = Vec::new();
    for (coord, branch) in kept_nodes(genotype, grid)? {
        let (d, l) = coord;
        let ctype = branch.cell_type();
        let channels = grid.channels_at(d);
        let (slot0, slot1) = slot_plan(grid, d, l, branch).ok_or_else(|| {
            WeaveError::IncompatibleGenotype(format!(
                "branch {} infeasible at ({d},{l})",
                branch.name()
            ))
        })?;
        let pre0 = PreBlock::new(&mut store, rng, slot0.0, channels, slot0.1);
        let pre1 = PreBlock::new(&mut store, rng, slot1.0, channels, slot1.1);
        let mut edges = Vec::new();
        for ge in genotype.cells.get(ctype) {
            let op = ops::instantiate(ge.op, channels, channels, &op_cfg, &mut store, rng)?;
            edges.push((
                CellEdge {
                    src: ge.src,
                    dst: ge.dst,
                },
                op,
            ));
        }
        let proj = ProjBlock::new(&mut store, rng, genotype.cell_nodes * channels, channels);
        nodes.push(DiscreteNode {
            coord,
            branch,
            cell: DiscreteCell {
                m: genotype.cell_nodes,
                pre0,
                pre1,
                edges,
                proj,
            },
        });
    }
    let heads = grid
        .head_nodes()
        .into_iter()
        .map(|coord| Head::new(&mut store, rng, coord, grid.channels_at(1), grid.num_classes))
        .collect();
    Ok(DiscreteNet {
        grid: *grid,
        store,
        stem,
        nodes,
        heads,
    })
}

impl DiscreteNet {
    /// Extracts the genotype's sub-network from a super-network, sharing
    /// its weights. The oracle route for checking that a discretized
    /// one-hot relaxation computes the same function.
    pub fn extract(genotype: &Genotype, net: &SuperNet) -> Result<DiscreteNet, WeaveError> {
        validate_genotype(genotype, &net.grid)?;
        if genotype.cell_nodes != net.graph.m {
            return Err(WeaveError::IncompatibleGenotype(
                "intermediate-map counts differ".into(),
            ));
        }
        let store = net.store.clone();
        let mut nodes = Vec::new();
        for (coord, branch) in kept_nodes(genotype, &net.grid)? {
            let ctype = branch.cell_type();
            let snode = net.node_at(coord).ok_or_else(|| {
                WeaveError::IncompatibleGenotype(format!(
                    "super-network never instantiated node {coord:?}"
                ))
            })?;
            let cell = snode.cell(branch).ok_or_else(|| {
                WeaveError::IncompatibleGenotype(format!(
                    "branch {} not instantiated at {coord:?}",
                    branch.name()
                ))
            })?;
            let mut edges = Vec::new();
            for ge in genotype.cells.get(ctype) {
                let edge_idx = net
                    .graph
                    .edges
                    .iter()
                    .position(|e| e.src == ge.src && e.dst == ge.dst)
                    .ok_or_else(|| {
                        WeaveError::IncompatibleGenotype(format!(
                            "edge {} -> {} not in the cell DAG",
                            ge.src, ge.dst
                        ))
                    })?;
                let kinds = net
                    .op_sets
                    .for_edge(ctype, net.graph.edge_class(ctype, edge_idx));
                let op_pos = kinds.iter().position(|&k| k == ge.op).ok_or_else(|| {
                    WeaveError::IncompatibleGenotype(format!(
                        "op {} not in the candidate set of this edge",
                        ge.op.canonical_name()
                    ))
                })?;
                edges.push((
                    CellEdge {
                        src: ge.src,
                        dst: ge.dst,
                    },
                    cell.edge_ops[edge_idx][op_pos].clone(),
                ));
            }
            nodes.push(DiscreteNode {
                coord,
                branch,
                cell: DiscreteCell {
                    m: genotype.cell_nodes,
                    pre0: cell.pre0.clone(),
                    pre1: cell.pre1.clone(),
                    edges,
                    proj: cell.proj.clone(),
                },
            });
        }
        Ok(DiscreteNet {
            grid: net.grid,
            store,
            stem: net.stem.clone(),
            nodes,
            heads: net.heads.clone(),
        })
    }

    /// Forward pass; head logits in increasing layer order, the last is
    /// the final prediction.
    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Vec<NodeId>, WeaveError> {
        let input = tape.input(x.clone());
        self.forward_from(tape, input)
    }

    pub fn forward_from(&self, tape: &mut Tape, input: NodeId) -> Result<Vec<NodeId>, WeaveError> {
        let shape = tape.shape(input);
        let div = self.grid.resolution_divisor();
        if shape.c != 1 || shape.h % div != 0 || shape.w % div != 0 {
            return Err(WeaveError::InvalidGrid(format!(
                "input {} must be single-channel with spatial sizes divisible by {}",
                shape, div
            )));
        }
        let mut values: BTreeMap<Coord, NodeId> = BTreeMap::new();
        values.insert((0, 0), self.stem.apply(tape, &self.store, input)?);
        for node in &self.nodes {
            let (d, l) = node.coord;
            let (c0, c1) = resolve_inputs(&self.grid, d, l, node.branch)
                .slots()
                .expect("kept node has feasible branch");
            let out = node
                .cell
                .forward(tape, &self.store, values[&c0], values[&c1])?;
            values.insert(node.coord, out);
        }
        self.heads
            .iter()
            .map(|h| h.apply(tape, &self.store, values[&h.coord]))
            .collect()
    }

    /// Number of scalar parameters actually referenced by the network
    /// (extraction shares a larger store, so counting walks the
    /// components).
    pub fn param_count(&self) -> usize {
        let mut ids: BTreeSet<ParamId> = BTreeSet::new();
        ids.extend(self.stem.params());
        for n in &self.nodes {
            ids.extend(n.cell.params());
        }
        for h in &self.heads {
            ids.extend(h.params());
        }
        ids.iter().map(|&id| self.store.value(id).len()).sum()
    }

    /// Ids of every referenced parameter (all in the weight group).
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: BTreeSet<ParamId> = BTreeSet::new();
        ids.extend(self.stem.params());
        for n in &self.nodes {
            ids.extend(n.cell.params());
        }
        for h in &self.heads {
            ids.extend(h.params());
        }
        ids.into_iter().collect()
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }
}
