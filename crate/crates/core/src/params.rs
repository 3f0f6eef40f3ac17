//! Named parameters with trainable flags and initialization records.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitScheme {
    /// Uniform in ±√(6/(fan_in+fan_out)).
    XavierUniform {
        fan_in: usize,
        fan_out: usize,
    },
    Normal {
        std: f64,
    },
    Constant {
        value: f64,
    },
    /// Values supplied by the caller (e.g. the biased task-weight matrix).
    Explicit {
        description: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitRecord {
    pub seed: u64,
    pub scheme: InitScheme,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
    pub init: InitRecord,
}

/// Model parameters keyed by name. Iteration is in sorted name order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor, init: InitRecord) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(
            name.to_string(),
            Param {
                value,
                grad,
                trainable: true,
                init,
            },
        );
        Ok(())
    }

    /// Inserts a `fan_in × fan_out` matrix drawn from the Xavier-uniform scheme.
    /// The seed is derived from `seed` and the parameter name, so the value does
    /// not depend on insertion order.
    pub fn init_xavier(&mut self, name: &str, fan_in: usize, fan_out: usize, seed: u64) -> Result<()> {
        let pseed = derive_seed(seed, name);
        let mut rng = rng_for(seed, name);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(
            name,
            Tensor::matrix(fan_in, fan_out, data)?,
            InitRecord {
                seed: pseed,
                scheme: InitScheme::XavierUniform { fan_in, fan_out },
            },
        )
    }

    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64, seed: u64) -> Result<()> {
        let pseed = derive_seed(seed, name);
        let mut rng = rng_for(seed, name);
        let dist = Normal::new(0.0, std).map_err(|e| Error::Parameter(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
        self.insert(
            name,
            Tensor::new(shape.to_vec(), data)?,
            InitRecord {
                seed: pseed,
                scheme: InitScheme::Normal { std },
            },
        )
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.insert(
            name,
            Tensor::full(shape, value),
            InitRecord {
                seed: 0,
                scheme: InitScheme::Constant { value },
            },
        )
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.grad)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(Error::dim(format!(
                "parameter {name:?} has shape {:?}, new value has {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.get_mut(name)?.trainable = trainable;
        Ok(())
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.entries.values_mut() {
            p.trainable = trainable;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
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

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Total scalar count.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn num_trainable_values(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Copies of every frozen tensor, for later bit comparison.
    pub fn frozen_snapshot(&self) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(k, p)| (k.clone(), p.value.clone()))
            .collect()
    }

    /// Names whose current value differs bitwise from the snapshot.
    pub fn changed_since(&self, snapshot: &BTreeMap<String, Tensor>) -> Vec<String> {
        snapshot
            .iter()
            .filter(|(k, v)| self.entries.get(*k).is_none_or(|p| !p.value.bit_eq(v)))
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// True when both stores hold the same names with bit-identical values.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, a), (kb, b))| ka == kb && a.value.bit_eq(&b.value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.init_const("a", &[2], 1.0).unwrap();
        assert!(matches!(s.init_const("a", &[2], 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn xavier_within_bound_and_order_independent() {
        let mut s1 = ParamStore::new();
        s1.init_xavier("w1", 4, 6, 9).unwrap();
        s1.init_xavier("w2", 3, 3, 9).unwrap();
        let mut s2 = ParamStore::new();
        s2.init_xavier("w2", 3, 3, 9).unwrap();
        s2.init_xavier("w1", 4, 6, 9).unwrap();
        assert!(s1.bit_eq(&s2));
        let bound = (6.0f64 / 10.0).sqrt();
        assert!(s1.value("w1").unwrap().data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn iteration_is_sorted() {
        let mut s = ParamStore::new();
        for n in ["zeta", "alpha", "mid"] {
            s.init_const(n, &[1], 0.0).unwrap();
        }
        let names: Vec<_> = s.names().collect();
        assert_eq!(names, ["alpha", "mid", "zeta"]);
    }
}
