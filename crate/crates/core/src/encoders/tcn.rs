use ndnet::layers::{BatchNorm, Conv1d, Dense};
use ndnet::{Mode, Padding, ParamStore, Tape, Var};
use rand_chacha::ChaCha8Rng;

use super::ModelSpec;
use crate::error::{CoreError, Result};
use crate::sigprep::Domain;

/// Blocks after which the frequency-domain variant halves the time axis.
pub const POOLED_BLOCKS: usize = 3;

#[derive(Debug, Clone)]
struct TcnBlock {
    conv1: Conv1d,
    bn: BatchNorm,
    conv2: Conv1d,
    shortcut: Option<Conv1d>,
}

impl TcnBlock {
    fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        x: Var,
        mode: Mode,
        dropout: f32,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let h = self.conv1.forward(tape, store, x)?;
        let h = self.bn.forward(tape, store, h, mode)?;
        let h = tape.relu(h);
        let h = tape.dropout(h, dropout, mode, rng)?;
        let h = self.conv2.forward(tape, store, h)?;
        let skip = match &self.shortcut {
            Some(p) => p.forward(tape, store, x)?,
            None => x,
        };
        Ok(tape.add(h, skip)?)
    }
}

/// Residual stack of dilated causal convolutions read out at the last time
/// step. In the frequency domain the `3 × D × 51` volume is treated as a
/// 153-channel sequence over the `D` frames.
#[derive(Debug, Clone)]
pub struct TcnEncoder {
    domain: Domain,
    dropout: f32,
    blocks: Vec<TcnBlock>,
    proj: Dense,
}

impl TcnEncoder {
    pub fn new(spec: &ModelSpec, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let t = &spec.tcn;
        let mut cin = match spec.domain {
            Domain::Time => 3,
            Domain::Frequency => 3 * crate::sigprep::N_BINS,
        };
        let mut blocks = Vec::with_capacity(t.n_blocks);
        for (i, &d) in t.dilations.iter().enumerate() {
            let p = format!("encoder.block{}", i + 1);
            let conv1 = Conv1d::new(store, rng, &format!("{p}.conv1"), cin, t.filters, t.kernel, d, 1, Padding::Causal)?;
            let bn = BatchNorm::new(store, &format!("{p}.bn"), t.filters)?;
            let conv2 =
                Conv1d::new(store, rng, &format!("{p}.conv2"), t.filters, t.filters, t.kernel, d, 1, Padding::Causal)?;
            let shortcut = if cin != t.filters {
                Some(Conv1d::new(store, rng, &format!("{p}.proj"), cin, t.filters, 1, 1, 1, Padding::Causal)?)
            } else {
                None
            };
            blocks.push(TcnBlock {
                conv1,
                bn,
                conv2,
                shortcut,
            });
            cin = t.filters;
        }
        let proj = Dense::new(store, rng, "encoder.proj", t.filters, spec.embed_dim)?;
        Ok(Self {
            domain: spec.domain,
            dropout: spec.dropout_rate,
            blocks,
            proj,
        })
    }

    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        store: &mut ParamStore,
        x: Var,
        mode: Mode,
        rng: &mut ChaCha8Rng,
        readout: Option<usize>,
    ) -> Result<Var> {
        let mut h = match self.domain {
            Domain::Time => x,
            Domain::Frequency => tape.planes_to_sequence(x)?,
        };
        for (i, b) in self.blocks.iter().enumerate() {
            h = b.forward(tape, store, h, mode, self.dropout, rng)?;
            if self.domain == Domain::Frequency && i < POOLED_BLOCKS {
                h = tape.max_pool1d(h, 2)?;
            }
        }
        let len = *tape.shape(h).last().expect("[N, C, L]");
        let t = readout.unwrap_or(len - 1);
        if t >= len {
            return Err(CoreError::Config(format!("readout index {t} beyond sequence length {len}")));
        }
        let last = tape.select_time(h, t)?;
        Ok(self.proj.forward(tape, store, last)?)
    }
}
