//! Parameter arena shared by every network component.
//!
//! Modules keep [`ParamId`] handles; values live in a [`ParamStore`]. A
//! [`Binding`] lazily lifts parameters into a [`Graph`] for one forward pass
//! and marks only the requested groups as trainable.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Disjoint optimisation groups of the stage-wise search.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Ordinary network weights `w`.
    Weight,
    /// Layer-level fusion kernels `beta` (down/up-sampling and fusion convolutions).
    Fusion,
    /// Encoder cell relaxation logits `alpha`.
    Alpha,
    /// Decoder cell relaxation logits `gamma`.
    Gamma,
    /// Combination matrices `G` of the independence objective.
    Combination,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Weight,
        ParamGroup::Fusion,
        ParamGroup::Alpha,
        ParamGroup::Gamma,
        ParamGroup::Combination,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ParamGroup::Weight => "w",
            ParamGroup::Fusion => "beta",
            ParamGroup::Alpha => "alpha",
            ParamGroup::Gamma => "gamma",
            ParamGroup::Combination => "g",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.tag() == tag)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    /// Registered for the network-independence objective.
    pub paired: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor, paired: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            value,
            paired,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform fan-in scaled kernel `(c_out, c_in_per_group, kh, kw)`.
    ///
    /// Kernels with at least two output channels in the weight and fusion
    /// groups are registered for the independence objective.
    pub fn conv_kernel(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: [usize; 4],
        rng: &mut impl Rng,
    ) -> ParamId {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let bound = (3.0 / fan_in).sqrt();
        let value = Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound));
        let paired = shape[0] >= 2 && matches!(group, ParamGroup::Weight | ParamGroup::Fusion);
        self.add(name, group, value, paired)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids().filter(|&id| self.entries[id.0].group == group).collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Kernels registered for the independence objective, in construction order.
    pub fn paired_layers(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.entries[id.0].paired).collect()
    }

    /// Total scalar count per group.
    pub fn count(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Groups holding at least one value that differs bitwise from `other`.
    pub fn changed_groups(&self, other: &ParamStore) -> BTreeSet<ParamGroup> {
        assert_eq!(self.entries.len(), other.entries.len(), "stores have different layouts");
        let mut out = BTreeSet::new();
        for (a, b) in self.entries.iter().zip(&other.entries) {
            let differs = a
                .value
                .data()
                .iter()
                .zip(b.value.data())
                .any(|(x, y)| x.to_bits() != y.to_bits());
            if differs {
                out.insert(a.group);
            }
        }
        out
    }

    pub fn binding(&self, trainable: &[ParamGroup]) -> Binding<'_> {
        Binding {
            store: self,
            vars: vec![None; self.entries.len()],
            trainable: ParamGroup::ALL.map(|g| trainable.contains(&g)),
        }
    }
}

/// Per-forward view of a [`ParamStore`] inside one [`Graph`].
pub struct Binding<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    trainable: [bool; 5],
}

impl<'a> Binding<'a> {
    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let entry = &self.store.entries[id.0];
        let trainable = self.trainable[ParamGroup::ALL.iter().position(|&x| x == entry.group).unwrap()];
        let v = g.leaf(entry.value.clone(), trainable);
        self.vars[id.0] = Some(v);
        v
    }

    /// Gradients of every bound trainable parameter.
    pub fn gradients(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                let g = grads.get(v)?;
                Some((ParamId(i), g.clone()))
            })
            .collect()
    }
}
