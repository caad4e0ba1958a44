//! Parameterised layers backed by a [`ParamStore`].
//!
//! Each layer registers its tensors under `<prefix>.<name>` when constructed
//! and records them on a [`Tape`] at every forward pass.

use rand::Rng;

use crate::error::{arg_err, Result};
use crate::init::glorot_uniform;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Mode, Padding, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if kernel == 0 || dilation == 0 || stride == 0 {
            return Err(arg_err("conv1d", "kernel, dilation and stride must be at least 1"));
        }
        let w = glorot_uniform(
            &[out_channels, in_channels, kernel],
            in_channels * kernel,
            out_channels * kernel,
            rng,
        )?;
        let weight = store.add(format!("{prefix}.weight"), w, true)?;
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[out_channels])?, true)?;
        Ok(Self {
            weight,
            bias,
            dilation,
            stride,
            padding,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv1d(x, w, b, self.dilation, self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let (kh, kw) = kernel;
        if kh == 0 || kw == 0 || stride == 0 {
            return Err(arg_err("conv2d", "kernel and stride must be at least 1"));
        }
        let field = kh * kw;
        let w = glorot_uniform(
            &[out_channels, in_channels, kh, kw],
            in_channels * field,
            out_channels * field,
            rng,
        )?;
        let weight = store.add(format!("{prefix}.weight"), w, true)?;
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros(&[out_channels])?, true)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

/// Batch normalisation over axis 1 with running statistics kept as
/// non-trainable parameters (`running_mean`, `running_var`).
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(&[channels], 1.0)?, true)?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[channels])?, true)?,
            running_mean: store.add(format!("{prefix}.running_mean"), Tensor::zeros(&[channels])?, false)?,
            running_var: store.add(format!("{prefix}.running_var"), Tensor::full(&[channels], 1.0)?, false)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// Train mode normalises with batch statistics and folds them into the
    /// running estimates; eval mode uses the running estimates only.
    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, g, b, self.eps)?;
                let m = self.momentum;
                let rm = store.get_mut(self.running_mean).tensor.data_mut();
                rm.iter_mut().zip(&stats.mean).for_each(|(r, &v)| *r = (1.0 - m) * *r + m * v);
                let rv = store.get_mut(self.running_var).tensor.data_mut();
                rv.iter_mut()
                    .zip(&stats.var_unbiased)
                    .for_each(|(r, &v)| *r = (1.0 - m) * *r + m * v);
                Ok(y)
            }
            Mode::Eval => {
                let rm = store.get(self.running_mean).tensor.data().to_vec();
                let rv = store.get(self.running_var).tensor.data().to_vec();
                tape.batch_norm_eval(x, g, b, &rm, &rv, self.eps)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        in_features: usize,
        out_features: usize,
    ) -> Result<Self> {
        let w = glorot_uniform(&[out_features, in_features], in_features, out_features, rng)?;
        Ok(Self {
            weight: store.add(format!("{prefix}.weight"), w, true)?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[out_features])?, true)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.dense(x, w, b)
    }
}
