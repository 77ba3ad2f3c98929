use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Named parameters in deterministic (lexicographic) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Binds every parameter whose name starts with `prefix` onto `tape`.
    pub fn bind(&self, tape: &mut Tape, prefix: &str, trainable: bool) -> Bound {
        let vars = self
            .map
            .iter()
            .filter(|(name, _)| name.starts_with(prefix))
            .map(|(name, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters of a [`ParamStore`] bound to one tape.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Bound {
            vars: iter.into_iter().collect(),
        }
    }
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter `{name}` is not bound")))
    }

    pub fn extend(&mut self, other: Bound) {
        self.vars.extend(other.vars);
    }

    /// Gradients after `backward`; parameters the output did not reach get zeros.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(name, v)| {
                let g = tape
                    .grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(*v).to_vec()));
                (name.clone(), g)
            })
            .collect()
    }
}
