use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Gradient of a scalar with respect to each named parameter.
pub type GradientMap<T> = BTreeMap<String, Tensor<T>>;

/// Named parameter tensors. Names are unique and iterate in sorted order;
/// a name's shape never changes once inserted.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParameterSet<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::contract(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name.to_string(), value);
        Ok(())
    }

    /// Replaces the value of an existing entry with one of the same shape.
    pub fn replace(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(format!(
                "{name}: {:?} vs {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.entries.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// One plain gradient-descent step, `p - lr * g` for each named
    /// gradient. Parameters without a gradient are copied unchanged.
    pub fn sgd_step(&self, grads: &GradientMap<T>, lr: T) -> Result<Self> {
        if !(lr >= T::zero()) || !lr.is_finite() {
            return Err(Error::contract(format!("learning rate must be >= 0, got {lr}")));
        }
        for (name, g) in grads {
            let p = self
                .entries
                .get(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient {name}: {:?} vs {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        let mut out = self.clone();
        for (name, g) in grads {
            let p = out.entries.get_mut(name).expect("checked above");
            for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= lr * gv;
            }
            if p.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("sgd_step"));
            }
        }
        Ok(out)
    }
}

/// `acc += weight * g`, entry by entry, inserting missing names.
pub fn accumulate<T: Scalar>(acc: &mut GradientMap<T>, g: &GradientMap<T>, weight: T) {
    for (name, t) in g {
        match acc.get_mut(name) {
            Some(a) => {
                for (av, &gv) in a.data_mut().iter_mut().zip(t.data()) {
                    *av += weight * gv;
                }
            }
            None => {
                let data = t.data().iter().map(|&v| weight * v).collect();
                acc.insert(
                    name.clone(),
                    Tensor::from_parts_unchecked(t.shape().to_vec(), data),
                );
            }
        }
    }
}

/// Multiplies every gradient entry by `k`.
pub fn scale_gradients<T: Scalar>(g: &mut GradientMap<T>, k: T) {
    for t in g.values_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= k);
    }
}
