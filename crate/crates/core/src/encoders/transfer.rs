use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec};
use crate::error::{CoreError, Result};

/// Which parameters a transfer copied and which it left freshly initialised.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferManifest {
    pub copied: Vec<String>,
    pub reinitialized: Vec<String>,
}

/// Builds a model for `dst_spec` whose encoder parameters (weights, biases,
/// batch-norm affine terms and running statistics) are copied by name from
/// `src`; the head is initialised from `seed`.
pub fn transfer_encoder(src: &Model, dst_spec: &ModelSpec, seed: u64) -> Result<(Model, TransferManifest)> {
    let s = &src.spec;
    if s.encoder_kind != dst_spec.encoder_kind {
        return Err(CoreError::Transfer {
            paths: vec![format!("encoder kind {} cannot seed a {} model", s.encoder_kind, dst_spec.encoder_kind)],
        });
    }
    if s.domain != dst_spec.domain {
        return Err(CoreError::Transfer {
            paths: vec![format!("{} encoder cannot seed a {} model", s.domain, dst_spec.domain)],
        });
    }
    let mut dst = Model::new(dst_spec, seed)?;
    let dst_names = dst.encoder_param_names();
    let src_names = src.encoder_param_names();
    let mut problems = Vec::new();
    for name in &src_names {
        if dst.store.by_name(name).is_none() {
            problems.push(format!("{name}: absent from destination"));
        }
    }
    for name in &dst_names {
        let d = dst.store.by_name(name).expect("listed name");
        match src.store.by_name(name) {
            None => problems.push(format!("{name}: absent from source")),
            Some(p) if p.tensor.shape() != d.tensor.shape() => problems.push(format!(
                "{name}: source shape {:?}, destination shape {:?}",
                p.tensor.shape(),
                d.tensor.shape()
            )),
            Some(_) => {}
        }
    }
    if !problems.is_empty() {
        return Err(CoreError::Transfer { paths: problems });
    }
    for name in &dst_names {
        let data = src.store.by_name(name).expect("checked").tensor.data().to_vec();
        dst.store.assign(name, &data)?;
    }
    let reinitialized = dst.store.names().filter(|n| !n.starts_with("encoder.")).map(str::to_owned).collect();
    Ok((
        dst,
        TransferManifest {
            copied: dst_names,
            reinitialized,
        },
    ))
}
