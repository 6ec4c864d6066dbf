//! Named parameter storage shared by mixers, the backbone, and the
//! optimizer. Checkpoints serialize these entries by name.

use super::{Buffer, Tensor};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone)]
struct ParamEntry {
    name: String,
    tensor: Tensor,
}

/// Ordered collection of named trainable tensors.
#[derive(Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> ParamId {
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            tensor: tensor.with_requires_grad(true),
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Replace the tensor stored under `id` (used by filter resizing and
    /// checkpoint loading). The replacement keeps requires_grad set.
    pub fn replace(&mut self, id: ParamId, tensor: Tensor) {
        self.entries[id.0].tensor = tensor.with_requires_grad(true);
    }

    pub fn set_grad(&mut self, id: ParamId, grad: Buffer) {
        let t = &mut self.entries[id.0].tensor;
        debug_assert_eq!(grad.len(), t.numel());
        debug_assert_eq!(grad.dtype(), t.dtype());
        match &mut t.grad {
            Some(existing) => existing.add_assign(&grad),
            None => t.grad = Some(grad),
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.grad = None;
        }
    }

    /// Total stored real scalars; complex entries count twice.
    pub fn total_real_scalars(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.tensor.buffer().real_scalar_count())
            .sum()
    }

    pub fn total_matching(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.tensor.buffer().real_scalar_count())
            .sum()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    /// Load tensor values by name; every entry must be present with a
    /// matching shape and dtype.
    pub fn load_from(&mut self, source: &[(String, Tensor)]) -> Result<()> {
        for e in &mut self.entries {
            let found = source
                .iter()
                .find(|(n, _)| n == &e.name)
                .ok_or_else(|| invalid("checkpoint", format!("missing entry {}", e.name)))?;
            if found.1.shape() != e.tensor.shape() || found.1.dtype() != e.tensor.dtype() {
                return Err(invalid(
                    "checkpoint",
                    format!(
                        "entry {} has shape {:?}, expected {:?}",
                        e.name,
                        found.1.shape(),
                        e.tensor.shape()
                    ),
                ));
            }
            e.tensor = found.1.clone().with_requires_grad(true);
        }
        Ok(())
    }
}
