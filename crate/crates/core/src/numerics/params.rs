use std::collections::HashMap;

use super::{Checkpoint, Gradients, Graph, Real, Tensor, Var};
use crate::error::FormatError;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor. Frozen parameters are bound as constants and never
/// receive gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<F = f32> {
    pub name: String,
    pub tensor: Tensor<F>,
    pub frozen: bool,
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F = f32> {
    params: Vec<Parameter<F>>,
    by_name: HashMap<String, usize>,
}

/// Graph handles for every parameter of a store, created by [`ParamStore::bind`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Register a parameter. Names are hierarchical and must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>, frozen: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            tensor,
            frozen,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].tensor
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn num_trainable_elements(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Copy every parameter onto the graph as a leaf.
    pub fn bind(&self, g: &mut Graph<F>) -> Binding {
        Binding {
            vars: self
                .params
                .iter()
                .map(|p| g.leaf(p.tensor.clone(), !p.frozen))
                .collect(),
        }
    }

    /// Gradients for the trainable parameters that received any.
    pub fn collect_grads(&self, binding: &Binding, grads: &Gradients<F>) -> Vec<(ParamId, Tensor<F>)> {
        self.iter()
            .filter(|(_, p)| !p.frozen)
            .filter_map(|(id, _)| grads.get(binding.var(id)).map(|g| (id, g)))
            .collect()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    frozen: p.frozen,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Raw little-endian bytes of every parameter whose name passes `filter`.
    pub fn fingerprint(&self, filter: impl Fn(&Parameter<F>) -> bool) -> Vec<u8> {
        let mut out = Vec::new();
        for p in self.params.iter().filter(|p| filter(p)) {
            out.extend_from_slice(p.name.as_bytes());
            for x in p.tensor.data() {
                out.extend_from_slice(&x.to_f64().unwrap_or(f64::NAN).to_le_bytes());
            }
        }
        out
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            entries: self
                .params
                .iter()
                .map(|p| (p.name.clone(), p.tensor.cast::<f32>()))
                .collect(),
        }
    }

    /// Overwrite parameter values from a checkpoint. Every parameter must be
    /// present with a matching shape; extra entries are ignored.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<(), FormatError> {
        let lookup: HashMap<&str, &Tensor<f32>> =
            ckpt.entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in &mut self.params {
            let t = lookup
                .get(p.name.as_str())
                .ok_or_else(|| FormatError::Invalid(format!("checkpoint lacks parameter {}", p.name)))?;
            if t.shape() != p.tensor.shape() {
                return Err(FormatError::Invalid(format!(
                    "parameter {} has shape {:?} in checkpoint, expected {:?}",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = t.cast();
        }
        Ok(())
    }
}
