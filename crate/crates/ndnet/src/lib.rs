//! Minimal dense-tensor numerics for small convolutional regressors.
//!
//! Everything runs single-threaded in `f32` with fixed reduction order, so a
//! given seed and input always reproduce the same bits. Graphs are rebuilt on
//! every forward pass through a [`Tape`].

mod error;
mod gemm;
mod init;
pub mod layers;
pub mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{NdError, Result};
pub use init::glorot_uniform;
pub use optim::{AdamConfig, AdamState};
pub use params::{LayerParams, ParamId, ParamStore};
pub use tape::{BatchStats, LossKind, Mode, Padding, Tape, Var};
pub use tensor::Tensor;
