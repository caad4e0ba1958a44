//! Binary checkpoint: `VS30CKPT`, `u16` version, `u32`-prefixed JSON
//! metadata, then tensor records (`u16` name length, name, `u8` ndim, `u32`
//! dims, `f32` payload) until end of file. Optimizer moments are stored as
//! `optim.m.<param>` / `optim.v.<param>`.

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndnet::optim::AdamState;
use serde::{Deserialize, Serialize};

use super::{config_hash, TrainConfig};
use crate::datapipe::FoldPlan;
use crate::encoders::{CoordinateBox, Model, ModelSpec, TransferManifest};
use crate::error::{CoreError, Result};
use crate::sigprep::ChannelStats;

pub const MAGIC: &[u8; 8] = b"VS30CKPT";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub train_config: TrainConfig,
    pub input_stats: ChannelStats,
    pub coord_box: CoordinateBox,
    pub fold: Option<usize>,
    pub fold_plan: Option<FoldPlan>,
    /// Last completed epoch, `None` before the first.
    pub epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    pub config_hash: String,
    pub adam_step_count: u64,
    pub transfer: Option<TransferManifest>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model,
    pub adam: AdamState,
}

/// What the loaded checkpoint will be used for. Resuming carries the hash of
/// the caller's current model spec and training config, which must match the stored one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LoadMode {
    Resume { config_hash: String },
    Transfer,
    Inference,
}

const WHAT: &str = "checkpoint";

fn truncated(detail: impl Into<String>) -> CoreError {
    CoreError::Truncated {
        what: WHAT,
        detail: detail.into(),
    }
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    out.write_u16::<LittleEndian>(name.len() as u16).expect("vec write");
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.write_u32::<LittleEndian>(d as u32).expect("vec write");
    }
    for &v in data {
        out.write_f32::<LittleEndian>(v).expect("vec write");
    }
}

struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(meta.len() + 4 * self.model.param_count() * 3);
        out.extend_from_slice(MAGIC);
        out.write_u16::<LittleEndian>(VERSION).expect("vec write");
        out.write_u32::<LittleEndian>(meta.len() as u32).expect("vec write");
        out.extend_from_slice(&meta);
        for p in self.model.store.iter() {
            put_tensor(&mut out, &p.name, p.tensor.shape(), p.tensor.data());
        }
        for (p, (m, v)) in self.model.store.iter().zip(self.adam.m.iter().zip(&self.adam.v)) {
            put_tensor(&mut out, &format!("optim.m.{}", p.name), p.tensor.shape(), m);
            put_tensor(&mut out, &format!("optim.v.{}", p.name), p.tensor.shape(), v);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8], mode: LoadMode) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| truncated("file shorter than the header"))?;
        if &magic != MAGIC {
            return Err(CoreError::BadMagic {
                what: WHAT,
                expected: String::from_utf8_lossy(MAGIC).into_owned(),
                found: String::from_utf8_lossy(&magic).into_owned(),
            });
        }
        let version = r.read_u16::<LittleEndian>().map_err(|_| truncated("missing version"))?;
        if version != VERSION {
            return Err(CoreError::Version {
                what: WHAT,
                expected: VERSION,
                found: version,
            });
        }
        let len = r.read_u32::<LittleEndian>().map_err(|_| truncated("missing metadata length"))? as usize;
        let start = r.position() as usize;
        let meta_bytes = bytes
            .get(start..start + len)
            .ok_or_else(|| truncated(format!("metadata block declares {len} bytes")))?;
        let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)?;
        r.set_position((start + len) as u64);
        if let LoadMode::Resume { config_hash: current } = &mode {
            let stored = config_hash(&meta.spec, &meta.train_config);
            if meta.config_hash != stored {
                return Err(CoreError::Format {
                    what: WHAT,
                    detail: "stored config hash does not match the stored configuration".into(),
                });
            }
            if *current != stored {
                return Err(CoreError::ConfigHash {
                    stored,
                    current: current.clone(),
                });
            }
        }

        let mut tensors: BTreeMap<String, RawTensor> = BTreeMap::new();
        while (r.position() as usize) < bytes.len() {
            let (name, t) = read_tensor(&mut r)?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(CoreError::CheckpointTensor {
                    name,
                    detail: "appears twice".into(),
                });
            }
        }

        let mut model = Model::new(&meta.spec, 0)?;
        let names: Vec<String> = model.store.names().map(str::to_owned).collect();
        let mut adam = AdamState::new(meta.train_config.adam(), &model.store);
        adam.step_count = meta.adam_step_count;
        for (i, name) in names.iter().enumerate() {
            let expected = model.store.by_name(name).expect("listed").tensor.shape().to_vec();
            let mut take = |key: String| -> Result<Vec<f32>> {
                let t = tensors.remove(&key).ok_or_else(|| CoreError::CheckpointTensor {
                    name: key.clone(),
                    detail: "missing".into(),
                })?;
                if t.shape != expected {
                    return Err(CoreError::CheckpointTensor {
                        name: key,
                        detail: format!("shape {:?}, model expects {:?}", t.shape, expected),
                    });
                }
                Ok(t.data)
            };
            let data = take(name.clone())?;
            model.store.assign(name, &data)?;
            adam.m[i] = take(format!("optim.m.{name}"))?;
            adam.v[i] = take(format!("optim.v.{name}"))?;
        }
        if let Some(name) = tensors.into_keys().next() {
            return Err(CoreError::CheckpointTensor {
                name,
                detail: "not part of the model".into(),
            });
        }
        Ok(Self { meta, model, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        std::fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path, mode: LoadMode) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
        Self::decode(&bytes, mode)
    }
}

fn read_tensor(r: &mut Cursor<&[u8]>) -> Result<(String, RawTensor)> {
    let name_len = r.read_u16::<LittleEndian>().map_err(|_| truncated("tensor record header cut short"))? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name).map_err(|_| truncated("tensor name cut short"))?;
    let name = String::from_utf8(name).map_err(|_| CoreError::Format {
        what: WHAT,
        detail: "tensor name is not UTF-8".into(),
    })?;
    let bad = |detail: String| CoreError::CheckpointTensor {
        name: name.clone(),
        detail,
    };
    let ndim = r.read_u8().map_err(|_| bad("missing ndim".into()))? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.read_u32::<LittleEndian>().map_err(|_| bad("dims cut short".into()))? as usize);
    }
    let numel: usize = shape.iter().product();
    let remaining = r.get_ref().len() - r.position() as usize;
    if numel.checked_mul(4).is_none_or(|b| b > remaining) {
        return Err(bad(format!("payload needs {numel} floats, only {} bytes remain", remaining)));
    }
    let mut data = vec![0f32; numel];
    r.read_f32_into::<LittleEndian>(&mut data).expect("length checked");
    Ok((name, RawTensor { shape, data }))
}
