use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};

/// Whether a parameter adapts per task (internal) or only moves in the
/// outer loop (external).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Group {
    Internal,
    External,
}

impl Group {
    pub fn tag(self) -> u8 {
        match self {
            Group::Internal => 0,
            Group::External => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Group::Internal),
            1 => Some(Group::External),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

/// Ordered, named parameter collection partitioned into internal and external groups.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<ParamEntry>) -> Self {
        Self { entries }
    }

    pub fn push(&mut self, name: impl Into<String>, group: Group, value: Tensor) {
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            value,
        });
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.value)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Scalar parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn group_indices(&self, group: Group) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].group == group)
            .collect()
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    /// Replaces every value, keeping names and groups.
    pub fn with_values(&self, values: Vec<Tensor>) -> Self {
        debug_assert_eq!(values.len(), self.entries.len());
        let entries = self
            .entries
            .iter()
            .zip(values)
            .map(|(e, value)| ParamEntry {
                name: e.name.clone(),
                group: e.group,
                value,
            })
            .collect();
        Self { entries }
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries.iter().map(|e| tape.leaf(e.value.clone())).collect()
    }

    /// Records every parameter as a constant.
    pub fn bind_constant(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| tape.constant(e.value.clone()))
            .collect()
    }

    /// Same names, groups and shapes in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name && a.group == b.group && a.value.shape() == b.value.shape()
            })
    }
}

/// Appends freshly initialised parameters in a fixed order.
pub(crate) struct ParamInit<'a> {
    pub params: ParamSet,
    rng: &'a mut ChaCha8Rng,
}

impl<'a> ParamInit<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            params: ParamSet::new(),
            rng,
        }
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    pub fn weight(&mut self, name: String, group: Group, shape: &[usize], fan_in: usize, fan_out: usize) {
        let bound = glorot_bound(fan_in, fan_out);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        let value = Tensor::new(shape.to_vec(), data).expect("positive dims");
        self.params.push(name, group, value);
    }

    pub fn fill(&mut self, name: String, group: Group, shape: &[usize], value: f64) {
        self.params.push(name, group, Tensor::full(shape, value));
    }

    pub fn linear(&mut self, prefix: &str, group: Group, input: usize, output: usize) {
        self.weight(format!("{prefix}.weight"), group, &[output, input], input, output);
        self.fill(format!("{prefix}.bias"), group, &[output], 0.0);
    }
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}
