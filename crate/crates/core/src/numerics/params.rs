use std::collections::BTreeMap;

use super::rng::Rng;
use super::tensor::{c, Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    /// Participates in the current optimization phase.
    pub trainable: bool,
    /// Never updated, whatever the phase.
    pub frozen: bool,
}

impl<T> Param<T> {
    pub fn updates(&self) -> bool {
        self.trainable && !self.frozen
    }
}

/// Named parameters, iterated in lexicographic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<T> {
    params: BTreeMap<String, Param<T>>,
}

impl<T: Element> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, frozen: bool) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.params.insert(
            name.to_string(),
            Param {
                value,
                trainable: true,
                frozen,
            },
        );
        Ok(())
    }

    /// Overwrites or creates `name`, keeping existing flags.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) {
        match self.params.get_mut(name) {
            Some(p) => p.value = value,
            None => {
                self.params.insert(
                    name.to_string(),
                    Param {
                        value,
                        trainable: true,
                        frozen: false,
                    },
                );
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<T>> {
        self.params.remove(name)
    }

    /// Removes every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Sets the phase flag on every parameter: trainable iff `pred(name)`.
    pub fn set_trainable_where(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, p) in &mut self.params {
            p.trainable = pred(name);
        }
    }

    pub fn count_updating(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.updates())
            .map(|p| p.value.len())
            .sum()
    }

    pub fn cast<U: Element>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            trainable: p.trainable,
                            frozen: p.frozen,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn init_normal(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut Rng,
        frozen: bool,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| c(rng.normal() * std)).collect();
        self.insert(name, Tensor::new(shape, data)?, frozen)
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], v: f64, frozen: bool) -> Result<()> {
        self.insert(name, Tensor::full(shape, c(v)), frozen)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::<f32>::new();
        s.init_const("a", &[2], 0.0, false).unwrap();
        assert!(s.init_const("a", &[2], 0.0, false).is_err());
    }

    #[test]
    fn frozen_never_updates() {
        let mut s = ParameterStore::<f32>::new();
        s.init_const("a", &[2], 0.0, true).unwrap();
        s.set_trainable_where(|_| true);
        assert!(!s.get("a").unwrap().updates());
    }
}
