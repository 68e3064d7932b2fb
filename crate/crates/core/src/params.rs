//! Named parameter storage shared by all model components.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, value));
        ParamId(self.entries.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Places every parameter on the graph as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        Binding {
            vars: self.entries.iter().map(|(_, t)| g.param(t.clone())).collect(),
        }
    }

    /// Places every parameter on the graph as a constant (inference only).
    pub fn bind_frozen(&self, g: &mut Graph) -> Binding {
        Binding {
            vars: self
                .entries
                .iter()
                .map(|(_, t)| g.constant(t.clone()))
                .collect(),
        }
    }

    /// Replaces values from a list of named tensors; names and shapes must match exactly.
    pub fn load(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                tensors.len(),
                self.entries.len()
            )));
        }
        for ((name, value), (want, slot)) in tensors.iter().zip(self.entries.iter_mut()) {
            if name != want || value.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "checkpoint tensor {name} {:?} does not match {want} {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value.clone();
        }
        Ok(())
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.entries.clone()
    }
}

/// Graph variables for every parameter, indexed by [`ParamId`].
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Wraps variables already on the graph, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in store order; parameters the loss never reached get zeros.
    pub fn grads(&self, g: &Graph) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|&v| {
                g.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
            })
            .collect()
    }
}

impl std::ops::Index<ParamId> for Binding {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// He-normal initialisation for a weight with the given fan-in.
pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("sized")
}

/// Uniform initialisation in `[-bound, bound]`.
pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            if bound > 0.0 {
                rng.gen_range(-bound..=bound)
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(shape, data).expect("sized")
}
