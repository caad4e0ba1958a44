use std::collections::BTreeMap;

use crate::error::{NdError, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// A named tensor owned by a model, e.g. `encoder.stage2.block1.conv1.weight`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Ordered parameter container. Insertion order is the canonical order used
/// by the optimizer and by checkpoints; names are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<LayerParams>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NdError::DuplicateParam(name));
        }
        let tensor = tensor.with_requires_grad(trainable);
        self.index.insert(name.clone(), self.params.len());
        self.params.push(LayerParams {
            name,
            tensor,
            trainable,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &LayerParams {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut LayerParams {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&LayerParams> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut LayerParams> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &LayerParams> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut LayerParams> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Total element count of trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.clear_grad());
    }

    /// Adds the gradients recorded on `tape` into every bound parameter.
    pub fn accumulate_grads(&mut self, tape: &Tape) -> Result<()> {
        for &(var, id) in tape.bindings() {
            if let Some(g) = tape.grad(var) {
                let p = &mut self.params[id.0];
                if p.trainable {
                    p.tensor.accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }

    /// Replaces the data of parameter `name`, keeping shape and flags.
    pub fn assign(&mut self, name: &str, data: &[f32]) -> Result<()> {
        let p = self
            .by_name_mut(name)
            .ok_or_else(|| NdError::UnknownParam(name.to_string()))?;
        if p.tensor.numel() != data.len() {
            return Err(NdError::Shape {
                op: "assign",
                detail: format!("`{name}` holds {} values, got {}", p.tensor.numel(), data.len()),
            });
        }
        p.tensor.data_mut().copy_from_slice(data);
        Ok(())
    }
}
