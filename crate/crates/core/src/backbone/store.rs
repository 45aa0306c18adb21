//! Named parameter store with freeze control.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::hash_f64s;
use crate::tensor::Tensor;

/// One named parameter: a tensor plus its frozen flag.
#[derive(Debug, Clone)]
pub struct Param {
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Ordered map from hierarchical name to parameter.
///
/// Iteration order is lexicographic (BTreeMap), so every walk over the store
/// is deterministic. Frozen entries must hash identically before and after
/// any training call; the trainers in [`crate::continual`] assert this.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
    metadata: BTreeMap<String, String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        self.entries.insert(name.to_string(), Param { tensor, frozen: false });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries.get_mut(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: &str, value: &str) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    /// Total scalar parameter count across all entries.
    pub fn total_params(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    /// Scalar count over trainable (unfrozen) entries.
    pub fn trainable_params(&self) -> usize {
        self.entries.values().filter(|p| !p.frozen).map(|p| p.tensor.numel()).sum()
    }

    pub fn freeze_all(&mut self) {
        for p in self.entries.values_mut() {
            p.frozen = true;
        }
    }

    /// Freeze everything, then unfreeze the union of the given name prefixes.
    /// Every prefix must match at least one parameter.
    pub fn set_trainable(&mut self, prefixes: &[&str]) -> Result<()> {
        for prefix in prefixes {
            if !self.entries.keys().any(|k| k.starts_with(prefix)) {
                return Err(Error::UnknownPrefix(prefix.to_string()));
            }
        }
        for (name, p) in self.entries.iter_mut() {
            p.frozen = !prefixes.iter().any(|pre| name.starts_with(pre));
        }
        Ok(())
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.tensor.zero_grad();
        }
    }

    /// Content hash of one entry's data bytes.
    pub fn param_hash(&self, name: &str) -> Result<u64> {
        Ok(self.get(name)?.tensor.content_hash())
    }

    /// Digest over all entries: names, shapes, and data, in iteration order.
    pub fn store_hash(&self) -> u64 {
        let mut acc: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, p) in &self.entries {
            let mut h = crate::rng::fnv1a(name.as_bytes());
            for &e in p.tensor.shape() {
                h = h.wrapping_mul(31).wrapping_add(e as u64);
            }
            h ^= hash_f64s(p.tensor.data());
            acc = acc.rotate_left(13) ^ h;
        }
        acc
    }

    /// Map of name -> content hash, for freeze-contract assertions.
    pub fn hash_map(&self) -> BTreeMap<String, u64> {
        self.entries
            .iter()
            .map(|(k, p)| (k.clone(), p.tensor.content_hash()))
            .collect()
    }
}
