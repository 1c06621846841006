//! Optimizable leaves and their gradient storage.

use super::{Shape, Tensor};

/// Stable identifier of a [`Parameter`] inside its [`ParamStore`].
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Which optimizer owns a parameter: network weights, cell-level
/// architecture logits, or network-level branch logits.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ParamGroup {
    Weight,
    Alpha,
    Beta,
}

/// An optimizable leaf: a value tensor plus a same-shaped gradient
/// accumulator.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub id: ParamId,
    pub group: ParamGroup,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Owns every parameter of a network. Parameter ids are indices into this
/// store and never change after registration.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn register(&mut self, group: ParamGroup, value: Tensor) -> ParamId {
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            id,
            group,
            value,
            grad,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Resets every gradient to zero.
    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for g in p.grad.data_mut() {
                *g = 0.0;
            }
        }
    }

    /// Adds `grads` into the stored gradients, scaled by `scale`.
    ///
    /// Accumulation walks parameters in id order, so merging per-sample
    /// gradient maps in a fixed sample order is bit-stable.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (slot, p) in grads.by_param.iter().zip(self.params.iter_mut()) {
            if let Some(g) = slot {
                for (acc, v) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += scale * v;
                }
            }
        }
    }

    /// Total number of scalar entries across parameters of `group`
    /// (all groups when `None`).
    pub fn param_count(&self, group: Option<ParamGroup>) -> usize {
        self.params
            .iter()
            .filter(|p| group.map_or(true, |g| p.group == g))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn ids_in_group(&self, group: ParamGroup) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.id)
            .collect()
    }

    /// Ids of every parameter registered at or after index `start`.
    pub fn ids_registered_since(&self, start: usize) -> Vec<ParamId> {
        (start..self.params.len()).map(ParamId).collect()
    }
}

/// Per-parameter gradients produced by one backward pass, indexed by
/// [`ParamId`]. Parameters not reached by the pass hold `None`.
#[derive(Debug)]
pub struct Gradients {
    pub(crate) by_param: Vec<Option<Tensor>>,
}

impl Gradients {
    pub(crate) fn new(n_params: usize) -> Self {
        Gradients {
            by_param: (0..n_params).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(id.0).and_then(|s| s.as_ref())
    }

    /// Gradient of `id`, densified to zeros when the parameter was not
    /// reached.
    pub fn get_or_zeros(&self, id: ParamId, shape: Shape) -> Tensor {
        match self.get(id) {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape),
        }
    }

    pub(crate) fn accumulate_param(&mut self, id: ParamId, grad: &Tensor) {
        let slot = &mut self.by_param[id.0];
        match slot {
            Some(acc) => acc.add_assign(grad),
            None => *slot = Some(grad.clone()),
        }
    }
}
