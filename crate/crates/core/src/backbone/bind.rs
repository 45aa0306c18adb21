//! Bridges parameter stores and the autodiff tape.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape};

use super::store::ParamStore;

/// Qualified-name to tape-leaf map for one forward/backward pass.
///
/// Stores are bound under a prefix ("backbone.", "head.", "adapter.") so one
/// tape can mix the frozen backbone with trainable adapter and head params.
#[derive(Debug, Default)]
pub struct Leaves {
    ids: BTreeMap<String, NodeId>,
}

impl Leaves {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register every store entry as a tape leaf.
    ///
    /// In training mode unfrozen entries require gradients; in eval mode
    /// nothing does, so backward never reaches the copies.
    pub fn bind_store(&mut self, tape: &mut Tape, prefix: &str, store: &ParamStore, training: bool) {
        for (name, p) in store.iter() {
            let id = tape.leaf(&p.tensor, training && !p.frozen);
            self.ids.insert(format!("{prefix}{name}"), id);
        }
    }

    pub fn id(&self, qualified: &str) -> Result<NodeId> {
        self.ids
            .get(qualified)
            .copied()
            .ok_or_else(|| Error::UnknownParam(qualified.to_string()))
    }

    /// Copy gradients from the tape back into the store's grad slots.
    /// Entries without a tape gradient (frozen, or bound for eval) are left
    /// untouched.
    pub fn write_grads_back(&self, tape: &Tape, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let mut updates: Vec<(String, Vec<f64>)> = Vec::new();
        for (name, _) in store.iter() {
            let qualified = format!("{prefix}{name}");
            if let Some(id) = self.ids.get(&qualified) {
                if let Some(g) = tape.grad(*id) {
                    updates.push((name.to_string(), g.to_vec()));
                }
            }
        }
        for (name, g) in updates {
            store.get_mut(&name)?.tensor.set_grad(g)?;
        }
        Ok(())
    }

    /// Qualified names whose tape gradient exists and contains a nonzero.
    pub fn nonzero_grad_census(&self, tape: &Tape) -> Vec<String> {
        self.ids
            .iter()
            .filter(|(_, id)| {
                tape.grad(**id).map_or(false, |g| g.iter().any(|&v| v != 0.0))
            })
            .map(|(name, _)| name.clone())
            .collect()
    }
}
