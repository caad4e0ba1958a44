use ndnet::layers::{BatchNorm, Conv1d, Conv2d, Dense};
use ndnet::{Mode, Padding, ParamStore, Tape, Var};
use rand_chacha::ChaCha8Rng;

use super::ModelSpec;
use crate::error::Result;
use crate::sigprep::Domain;

/// A convolution over one (time) or two (time × frequency) spatial axes.
#[derive(Debug, Clone)]
pub(crate) enum Conv {
    D1(Conv1d),
    D2(Conv2d),
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        domain: Domain,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(match domain {
            Domain::Time => Conv::D1(Conv1d::new(store, rng, name, cin, cout, k, 1, stride, Padding::Same)?),
            Domain::Frequency => Conv::D2(Conv2d::new(store, rng, name, cin, cout, (k, k), stride, Padding::Same)?),
        })
    }

    pub(crate) fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        Ok(match self {
            Conv::D1(c) => c.forward(tape, store, x)?,
            Conv::D2(c) => c.forward(tape, store, x)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BasicBlock {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    shortcut: Option<Conv>,
}

impl BasicBlock {
    fn new(
        domain: Domain,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Result<Self> {
        let conv1 = Conv::new(domain, store, rng, &format!("{prefix}.conv1"), cin, cout, 3, stride)?;
        let bn1 = BatchNorm::new(store, &format!("{prefix}.bn1"), cout)?;
        let conv2 = Conv::new(domain, store, rng, &format!("{prefix}.conv2"), cout, cout, 3, 1)?;
        let bn2 = BatchNorm::new(store, &format!("{prefix}.bn2"), cout)?;
        let shortcut = if cin != cout || stride != 1 {
            Some(Conv::new(domain, store, rng, &format!("{prefix}.proj"), cin, cout, 1, stride)?)
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        })
    }

    pub(crate) fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let h = self.conv1.forward(tape, store, x)?;
        let h = self.bn1.forward(tape, store, h, mode)?;
        let h = tape.relu(h);
        let h = self.conv2.forward(tape, store, h)?;
        let h = self.bn2.forward(tape, store, h, mode)?;
        let skip = match &self.shortcut {
            Some(p) => p.forward(tape, store, x)?,
            None => x,
        };
        let y = tape.add(h, skip)?;
        Ok(tape.relu(y))
    }
}

/// Stem (K = 7, stride 2) → BN → ReLU → max-pool 2, then stages of basic
/// residual blocks, stride 2 at the entry of every stage after the first,
/// then global average pooling.
#[derive(Debug, Clone)]
pub struct ResnetEncoder {
    domain: Domain,
    stem: Conv,
    stem_bn: BatchNorm,
    blocks: Vec<BasicBlock>,
    proj: Option<Dense>,
}

impl ResnetEncoder {
    pub fn new(spec: &ModelSpec, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let r = &spec.resnet;
        let domain = spec.domain;
        let stem = Conv::new(domain, store, rng, "encoder.stem.conv", 3, r.stem_filters, 7, 2)?;
        let stem_bn = BatchNorm::new(store, "encoder.stem.bn", r.stem_filters)?;
        let mut blocks = Vec::new();
        let mut cin = r.stem_filters;
        for (s, &width) in r.stages.iter().enumerate() {
            for b in 0..r.blocks_per_stage {
                let stride = if b == 0 && s > 0 { 2 } else { 1 };
                let prefix = format!("encoder.stage{}.block{}", s + 1, b + 1);
                blocks.push(BasicBlock::new(domain, store, rng, &prefix, cin, width, stride)?);
                cin = width;
            }
        }
        let proj = if cin != spec.embed_dim {
            Some(Dense::new(store, rng, "encoder.proj", cin, spec.embed_dim)?)
        } else {
            None
        };
        Ok(Self {
            domain,
            stem,
            stem_bn,
            blocks,
            proj,
        })
    }

    pub fn blocks(&self) -> &[BasicBlock] {
        &self.blocks
    }

    pub(crate) fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let h = self.stem.forward(tape, store, x)?;
        let h = self.stem_bn.forward(tape, store, h, mode)?;
        let h = tape.relu(h);
        let mut h = match self.domain {
            Domain::Time => tape.max_pool1d(h, 2)?,
            Domain::Frequency => tape.max_pool2d(h, (2, 2))?,
        };
        for b in &self.blocks {
            h = b.forward(tape, store, h, mode)?;
        }
        let h = tape.global_avg_pool(h)?;
        match &self.proj {
            Some(p) => Ok(p.forward(tape, store, h)?),
            None => Ok(h),
        }
    }
}
