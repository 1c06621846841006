//! The weaved super-network: a grid of relaxed Normal / Downsample /
//! Upsample cells, its discretization into genotypes, realization of
//! discrete networks, and exact search-space counting.
//!
//! Grid geometry: the node set is `{(0,0)}` (the stem) plus every `(d, l)`
//! with `1 <= d <= depth-1`, `1 <= l <= layers-1`, `d + l` even and
//! `d <= l`. A node at depth `d` carries `base_channels * 2^d` channels at
//! `1/2^d` of the input resolution. Each node mixes up to three cells:
//!
//! - down cell on `(X^{d,l-2}, X^{d-1,l-1})`,
//! - normal cell on `(X^{d,l-4}, X^{d,l-2})`,
//! - up cell on `(X^{d,l-2}, X^{d+1,l-1})`,
//!
//! weighted by a masked softmax over the node's branch logits. A branch
//! missing exactly one input duplicates the surviving one; a branch
//! missing both is infeasible. Nodes that cannot contribute to any
//! prediction head are not instantiated.

mod cell;
mod count;
mod genotype;
mod supernet;

pub use cell::{mixed_edge_forward, Cell, CellGraph, CellEdge, OpSets};
pub use count::count_cell_space;
pub use genotype::{
    discretize, realize, AlphaProbs, BetaProbs, DiscreteNet, DiscretizeMode, GenoEdge, Genotype,
};
pub use supernet::{build_supernet, branch_mask, BuildOptions, SuperNet};

use crate::ops::{CellType, OpError};
use crate::tensor::TensorError;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WeaveError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("infeasible grid: {0}")]
    InfeasibleGrid(String),
    #[error("incompatible genotype: {0}")]
    IncompatibleGenotype(String),
    #[error(transparent)]
    Op(#[from] OpError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Grid coordinate `(depth, layer)`.
pub type Coord = (usize, usize);

/// Geometry of the weaved grid.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct GridSpec {
    pub depth: usize,
    pub layers: usize,
    pub base_channels: usize,
    pub num_classes: usize,
}

impl GridSpec {
    pub fn new(depth: usize, layers: usize, base_channels: usize, num_classes: usize) -> Self {
        GridSpec {
            depth,
            layers,
            base_channels,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<(), WeaveError> {
        if self.depth < 2 || self.layers < 4 {
            return Err(WeaveError::InvalidGrid(format!(
                "grid needs depth >= 2 and layers >= 4, got ({}, {})",
                self.depth, self.layers
            )));
        }
        if self.base_channels < 1 {
            return Err(WeaveError::InvalidGrid("base_channels must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(WeaveError::InvalidGrid("num_classes must be >= 2".into()));
        }
        Ok(())
    }

    /// Whether `(d, l)` is in the node set (signed arguments so callers
    /// can probe input coordinates directly).
    pub fn node_exists(&self, d: i64, l: i64) -> bool {
        if d == 0 && l == 0 {
            return true;
        }
        d >= 1
            && l >= 1
            && (d as usize) <= self.depth - 1
            && (l as usize) <= self.layers - 1
            && (d + l) % 2 == 0
            && d <= l
    }

    /// All cell nodes (the stem excluded), topologically ordered by
    /// `(layer, depth)`.
    pub fn cell_nodes(&self) -> Vec<Coord> {
        let mut v = Vec::new();
        for l in 1..self.layers {
            for d in 1..self.depth {
                if self.node_exists(d as i64, l as i64) {
                    v.push((d, l));
                }
            }
        }
        v
    }

    /// Node count including the stem.
    pub fn node_count(&self) -> usize {
        self.cell_nodes().len() + 1
    }

    pub fn channels_at(&self, d: usize) -> usize {
        self.base_channels << d
    }

    /// Input spatial sizes must be divisible by this.
    pub fn resolution_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    /// Prediction-head positions: the three largest-layer depth-1 nodes
    /// (all of them when fewer than three exist), in increasing layer
    /// order.
    pub fn head_nodes(&self) -> Vec<Coord> {
        let mut depth1: Vec<Coord> = self
            .cell_nodes()
            .into_iter()
            .filter(|&(d, _)| d == 1)
            .collect();
        depth1.sort_by_key(|&(_, l)| l);
        let skip = depth1.len().saturating_sub(3);
        depth1.split_off(skip)
    }
}

/// The three fusion directions a node can mix.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Down,
    Normal,
    Up,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Down, Branch::Normal, Branch::Up];

    pub fn index(&self) -> usize {
        *self as usize
    }

    pub fn cell_type(&self) -> CellType {
        match self {
            Branch::Down => CellType::Downsample,
            Branch::Normal => CellType::Normal,
            Branch::Up => CellType::Upsample,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Branch::Down => "down",
            Branch::Normal => "normal",
            Branch::Up => "up",
        }
    }

    pub fn from_name(name: &str) -> Option<Branch> {
        Branch::ALL.iter().copied().find(|b| b.name() == name)
    }

    /// The two input coordinates this branch fuses at `(d, l)`, before
    /// existence checks.
    pub fn input_coords(&self, d: usize, l: usize) -> [(i64, i64); 2] {
        let (d, l) = (d as i64, l as i64);
        match self {
            Branch::Down => [(d, l - 2), (d - 1, l - 1)],
            Branch::Normal => [(d, l - 4), (d, l - 2)],
            Branch::Up => [(d, l - 2), (d + 1, l - 1)],
        }
    }
}

/// A subset of the three branches, used for fusion-direction ablations.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct BranchSet(u8);

impl BranchSet {
    pub fn all() -> Self {
        BranchSet(0b111)
    }

    pub fn empty() -> Self {
        BranchSet(0)
    }

    pub fn of(branches: &[Branch]) -> Self {
        let mut bits = 0;
        for b in branches {
            bits |= 1 << b.index();
        }
        BranchSet(bits)
    }

    pub fn contains(&self, b: Branch) -> bool {
        self.0 >> b.index() & 1 == 1
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = Branch> + '_ {
        Branch::ALL.into_iter().filter(|b| self.contains(*b))
    }
}

/// Per-cell-type container indexed by [`CellType`].
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerType<T> {
    pub down: T,
    pub normal: T,
    pub up: T,
}

impl<T> PerType<T> {
    pub fn get(&self, t: CellType) -> &T {
        match t {
            CellType::Downsample => &self.down,
            CellType::Normal => &self.normal,
            CellType::Upsample => &self.up,
        }
    }

    pub fn get_mut(&mut self, t: CellType) -> &mut T {
        match t {
            CellType::Downsample => &mut self.down,
            CellType::Normal => &mut self.normal,
            CellType::Upsample => &mut self.up,
        }
    }
}

/// How a branch's inputs resolve at a node: both present, one duplicated,
/// or nothing to fuse.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ResolvedInputs {
    Both(Coord, Coord),
    /// One input missing; the surviving coordinate feeds both slots.
    Duplicated(Coord),
    Infeasible,
}

impl ResolvedInputs {
    pub fn feasible(&self) -> bool {
        !matches!(self, ResolvedInputs::Infeasible)
    }

    /// Slot coordinates `(in0, in1)` when feasible.
    pub fn slots(&self) -> Option<(Coord, Coord)> {
        match *self {
            ResolvedInputs::Both(a, b) => Some((a, b)),
            ResolvedInputs::Duplicated(a) => Some((a, a)),
            ResolvedInputs::Infeasible => None,
        }
    }
}

/// Resolves the inputs of `branch` at node `(d, l)`.
pub fn resolve_inputs(grid: &GridSpec, d: usize, l: usize, branch: Branch) -> ResolvedInputs {
    let [c0, c1] = branch.input_coords(d, l);
    let e0 = grid.node_exists(c0.0, c0.1);
    let e1 = grid.node_exists(c1.0, c1.1);
    match (e0, e1) {
        (true, true) => ResolvedInputs::Both(
            (c0.0 as usize, c0.1 as usize),
            (c1.0 as usize, c1.1 as usize),
        ),
        (true, false) => ResolvedInputs::Duplicated((c0.0 as usize, c0.1 as usize)),
        (false, true) => ResolvedInputs::Duplicated((c1.0 as usize, c1.1 as usize)),
        (false, false) => ResolvedInputs::Infeasible,
    }
}

/// Structural feasibility of every branch at every cell node.
pub fn structural_feasibility(grid: &GridSpec) -> BTreeMap<Coord, [bool; 3]> {
    grid.cell_nodes()
        .into_iter()
        .map(|(d, l)| {
            let mut f = [false; 3];
            for b in Branch::ALL {
                f[b.index()] = resolve_inputs(grid, d, l, b).feasible();
            }
            ((d, l), f)
        })
        .collect()
}

/// Cell nodes that can contribute to at least one head, given a
/// feasibility assignment: the heads plus the closure of their feasible
/// branches' inputs.
pub fn useful_nodes(grid: &GridSpec, feasibility: &BTreeMap<Coord, [bool; 3]>) -> Vec<Coord> {
    let mut useful: std::collections::BTreeSet<Coord> = std::collections::BTreeSet::new();
    let mut work: Vec<Coord> = grid.head_nodes();
    while let Some(coord) = work.pop() {
        if coord == (0, 0) || !useful.insert(coord) {
            continue;
        }
        let feas = feasibility[&coord];
        for b in Branch::ALL {
            if !feas[b.index()] {
                continue;
            }
            if let Some((a, c)) = resolve_inputs(grid, coord.0, coord.1, b).slots() {
                for inp in [a, c] {
                    if inp != (0, 0) && !useful.contains(&inp) {
                        work.push(inp);
                    }
                }
            }
        }
    }
    let mut v: Vec<Coord> = useful.into_iter().collect();
    v.sort_by_key(|&(d, l)| (l, d));
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent enumeration of the coordinate rule.
    fn brute_force_nodes(depth: usize, layers: usize) -> Vec<Coord> {
        let mut v = vec![];
        for d in 0..depth {
            for l in 0..layers {
                let ok = (d == 0 && l == 0)
                    || (d >= 1 && l >= 1 && (d + l) % 2 == 0 && d <= l);
                if ok && d <= depth - 1 && l <= layers - 1 && !(d == 0 && l != 0) {
                    v.push((d, l));
                }
            }
        }
        v
    }

    #[test]
    fn node_count_five_by_eight_is_thirteen() {
        let grid = GridSpec::new(5, 8, 4, 2);
        assert_eq!(grid.node_count(), 13);
        assert_eq!(brute_force_nodes(5, 8).len(), 13);
    }

    #[test]
    fn node_sets_match_brute_force() {
        for (d, l) in [(2, 4), (3, 6), (5, 8), (6, 10), (4, 12)] {
            let grid = GridSpec::new(d, l, 4, 2);
            let mut ours: Vec<Coord> = grid.cell_nodes();
            ours.push((0, 0));
            ours.sort_unstable();
            let mut brute = brute_force_nodes(d, l);
            brute.sort_unstable();
            assert_eq!(ours, brute, "grid ({d}, {l})");
        }
    }

    #[test]
    fn heads_for_full_grid_are_the_three_late_depth1_nodes() {
        let grid = GridSpec::new(6, 10, 4, 2);
        assert_eq!(grid.head_nodes(), vec![(1, 5), (1, 7), (1, 9)]);
    }

    #[test]
    fn heads_for_small_grids_take_all_depth1_nodes() {
        let grid = GridSpec::new(2, 4, 4, 2);
        assert_eq!(grid.head_nodes(), vec![(1, 1), (1, 3)]);
        let grid = GridSpec::new(5, 8, 4, 2);
        assert_eq!(grid.head_nodes(), vec![(1, 3), (1, 5), (1, 7)]);
    }

    #[test]
    fn encoder_diagonal_has_only_the_down_branch() {
        let grid = GridSpec::new(6, 10, 4, 2);
        let feas = structural_feasibility(&grid);
        for d in 1..=5 {
            assert_eq!(
                feas[&(d, d)],
                [true, false, false],
                "diagonal node ({d},{d})"
            );
        }
    }

    #[test]
    fn first_node_duplicates_the_stem() {
        let grid = GridSpec::new(6, 10, 4, 2);
        assert_eq!(
            resolve_inputs(&grid, 1, 1, Branch::Down),
            ResolvedInputs::Duplicated((0, 0))
        );
        assert_eq!(
            resolve_inputs(&grid, 1, 1, Branch::Normal),
            ResolvedInputs::Infeasible
        );
        assert_eq!(
            resolve_inputs(&grid, 1, 1, Branch::Up),
            ResolvedInputs::Infeasible
        );
    }

    #[test]
    fn every_node_retains_a_feasible_down_branch() {
        // the encoder spine: a down branch always has at least one input
        for (d, l) in [(6usize, 10usize), (5, 8), (3, 6), (2, 4)] {
            let grid = GridSpec::new(d, l, 4, 2);
            for f in structural_feasibility(&grid).values() {
                assert!(f[Branch::Down.index()]);
            }
        }
    }

    #[test]
    fn useless_tail_nodes_are_pruned() {
        let grid = GridSpec::new(6, 10, 4, 2);
        let feas = structural_feasibility(&grid);
        let useful = useful_nodes(&grid, &feas);
        for dead in [(3, 9), (4, 8), (5, 7), (5, 9)] {
            assert!(!useful.contains(&dead), "{dead:?} cannot reach a head");
        }
        assert_eq!(useful.len(), grid.cell_nodes().len() - 4);
        // topological: inputs appear before consumers
        for (i, &(_, l)) in useful.iter().enumerate() {
            for &(_, l2) in &useful[..i] {
                assert!(l2 <= l);
            }
        }
    }
}
