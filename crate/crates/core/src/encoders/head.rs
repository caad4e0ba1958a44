use ndnet::layers::Dense;
use ndnet::{Mode, ParamId, ParamStore, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use super::ModelSpec;
use crate::error::{CoreError, Result};

/// `concat(embedding, coords)` → dense+ReLU+dropout → dense+ReLU+dropout →
/// linear output, followed by a fixed de-standardisation
/// `y = shift + scale · raw` stored as non-trainable parameters.
#[derive(Debug, Clone)]
pub struct Head {
    pub fc1: Dense,
    pub fc2: Dense,
    pub fc3: Dense,
    pub shift: ParamId,
    pub scale: ParamId,
    dropout: f32,
}

impl Head {
    pub fn new(spec: &ModelSpec, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let [w1, w2] = spec.head_widths;
        let out = spec.output_dim;
        Ok(Self {
            fc1: Dense::new(store, rng, "head.fc1", spec.embed_dim + 2, w1)?,
            fc2: Dense::new(store, rng, "head.fc2", w1, w2)?,
            fc3: Dense::new(store, rng, "head.fc3", w2, out)?,
            shift: store.add("head.output.shift", Tensor::zeros(&[out])?, false)?,
            scale: store.add("head.output.scale", Tensor::full(&[out], 1.0)?, false)?,
            dropout: spec.dropout_rate,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        embedding: Var,
        coords: Var,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let h = tape.concat(embedding, coords)?;
        let h = self.fc1.forward(tape, store, h)?;
        let h = tape.relu(h);
        let h = tape.dropout(h, self.dropout, mode, rng)?;
        let h = self.fc2.forward(tape, store, h)?;
        let h = tape.relu(h);
        let h = tape.dropout(h, self.dropout, mode, rng)?;
        let raw = self.fc3.forward(tape, store, h)?;
        let scale = store.get(self.scale).tensor.data().to_vec();
        let shift = store.get(self.shift).tensor.data().to_vec();
        Ok(tape.column_affine(raw, &scale, &shift)?)
    }

    pub fn set_output_scale(&self, store: &mut ParamStore, shift: &[f32], scale: &[f32]) -> Result<()> {
        let n = store.get(self.shift).tensor.numel();
        if shift.len() != n || scale.len() != n {
            return Err(CoreError::Config(format!("output scale needs {n} entries")));
        }
        if scale.iter().any(|&s| !(s.is_finite() && s != 0.0)) || shift.iter().any(|s| !s.is_finite()) {
            return Err(CoreError::Config("output scale must be finite and non-zero".into()));
        }
        store.get_mut(self.shift).tensor.data_mut().copy_from_slice(shift);
        store.get_mut(self.scale).tensor.data_mut().copy_from_slice(scale);
        Ok(())
    }
}
