//! Named parameter storage shared by the network, the optimiser and checkpoints.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimiser.
    Trainable,
    /// State such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub kind: ParamKind,
}

/// Ordered collection of named tensors. Insertion order is the checkpoint order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidInput(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            grad: Tensor::zeros(value.shape()),
            value,
            kind,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.entries[id.0].kind == ParamKind::Trainable)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(T::zero());
        }
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Copies every value whose name also exists in `other` (shapes must agree).
    pub fn copy_matching_from(&mut self, other: &ParamStore<T>) -> Result<usize> {
        let mut copied = 0;
        for e in &mut self.entries {
            if let Some(id) = other.find(&e.name) {
                let src = other.value(id);
                if src.shape() != e.value.shape() {
                    return Err(Error::shape(format!(
                        "parameter `{}`: {} vs {}",
                        e.name,
                        src.shape(),
                        e.value.shape()
                    )));
                }
                e.value = src.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    grad: e.grad.cast(),
                    kind: e.kind,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// RNG derived from a global seed and a parameter name.
///
/// Initial values therefore depend only on (seed, name), not on construction order,
/// so two architectures that share a parameter name start from the same tensor.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(name.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&(name.len() as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Zero-mean Gaussian tensor with the given standard deviation.
pub fn gaussian<T: Scalar>(shape: Shape, std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
    let data = (0..shape.numel()).map(|_| T::from_f64(normal.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("shape/data agree")
}

/// He-normal initialisation: std = sqrt(2 / fan_in).
pub fn he_normal<T: Scalar>(shape: Shape, fan_in: usize, seed: u64, name: &str) -> Tensor<T> {
    let mut rng = param_rng(seed, name);
    gaussian(shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
}
