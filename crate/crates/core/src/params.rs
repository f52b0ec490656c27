//! Named parameter collections and the SGD optimizer that updates them.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{config_err, dim_err, Error, Result};
use crate::ops::sgd_step;
use crate::tensor::{Scalar, Tensor};

/// Ordered name → tensor map. Order is insertion order and is part of the
/// checkpoint byte layout.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T: Scalar = f32> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(config_err!("duplicate parameter name {name}"));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn expect(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| config_err!("missing parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// Appends all entries of `other`, prefixing their names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ParamSet<T>) -> Result<()> {
        for (n, t) in other.entries {
            self.insert(format!("{prefix}{n}"), t)?;
        }
        Ok(())
    }

    /// Entries whose names start with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet<T> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
                .collect(),
        }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Adds `other` into `self` entry by entry (same names and shapes).
    pub fn accumulate(&mut self, other: &ParamSet<T>) -> Result<()> {
        for (name, t) in &other.entries {
            match self.get_mut(name) {
                Some(dst) => dst.add_scaled(t, T::one())?,
                None => self.insert(name.clone(), t.clone())?,
            }
        }
        Ok(())
    }
}

/// Parameters whose names end with this suffix are exempt from weight decay.
const NO_DECAY_SUFFIX: &str = "gamma";

/// Momentum SGD over a [`ParamSet`], with per-name velocity buffers.
#[derive(Debug, Clone)]
pub struct Sgd<T: Scalar = f32> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one step to every parameter that has a gradient. Gradients
    /// naming unknown parameters are an error.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: f64) -> Result<()> {
        for (name, grad) in grads.iter() {
            let param = params
                .get_mut(name)
                .ok_or_else(|| dim_err!("gradient for unknown parameter {name}"))?;
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| param.zeros_like());
            let wd = if name.ends_with(NO_DECAY_SUFFIX) {
                0.0
            } else {
                self.weight_decay
            };
            sgd_step(param, grad, v, lr, self.momentum, wd).map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFinite(format!("sgd_step on {name}")),
                other => other,
            })?;
        }
        Ok(())
    }
}
