//! `DGCN` model checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "DGCN"  u16 version=1
//! u32 len, len bytes         JSON metadata: model config, seed, eps, attrs
//! u32 count
//! count × { u32 name_len, name, u32 rank, rank × u32 dims, f64 × Π dims }
//! u32                        CRC-32 of every byte after the magic
//! ```
//!
//! Parameters come first in registry order, followed by the batch-norm
//! running statistics as rank-1 tensors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::densenet::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::hsi::{verify_crc, Reader};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DGCN";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub seed: u64,
    /// Pruning rate the weights were validated at.
    pub eps: f64,
    #[serde(default)]
    pub attrs: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub eps: f64,
    pub attrs: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn new(model: Model, eps: f64) -> Self {
        Self {
            model,
            eps,
            attrs: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = CheckpointMeta {
            model: self.model.config().clone(),
            seed: self.model.seed(),
            eps: self.eps,
            attrs: self.attrs.clone(),
        };
        let json = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut tensors: Vec<(String, Vec<usize>, &[f64])> = self
            .model
            .params()
            .iter()
            .map(|p| {
                let s = p.tensor.shape();
                let dims = s.dims()[..s.logical_rank()].to_vec();
                (p.name.clone(), dims, p.tensor.data())
            })
            .collect();
        for (name, data) in self.model.buffers() {
            tensors.push((name, vec![data.len()], data));
        }

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, dims, data) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[4..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "missing DGCN magic".into(),
            });
        }
        if bytes.len() < 4 + 2 + 4 + 4 + 4 {
            return Err(Error::Format {
                offset: bytes.len(),
                msg: "file too short".into(),
            });
        }
        verify_crc(bytes)?;
        let body = &bytes[..bytes.len() - 4];
        let mut r = Reader::new(body, 4);
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            r.pos = 4;
            return Err(r.error(&format!("unsupported version {version}")));
        }
        let len = r.u32()? as usize;
        let json_at = r.pos;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format {
            offset: json_at,
            msg: format!("metadata: {e}"),
        })?;
        let mut model = Model::new(meta.model, meta.seed)?;
        let mut seen = vec![false; model.params().len()];
        let count = r.u32()?;
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format {
                    offset: at,
                    msg: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 5 {
                return Err(r.error(&format!("tensor `{name}` has rank {rank}")));
            }
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = dims.iter().product();
            if numel.checked_mul(8).is_none_or(|b| b > r.remaining()) {
                return Err(r.error(&format!("tensor `{name}` overruns the file")));
            }
            let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let param = model.params().by_name(&name).map(|p| (p.id, p.tensor.shape()));
            match param {
                Some((id, shape)) => {
                    if dims != shape.dims()[..shape.logical_rank()] {
                        return Err(Error::Format {
                            offset: at,
                            msg: format!("tensor `{name}` has dims {dims:?}, model expects {shape}"),
                        });
                    }
                    model.params_mut().get_mut(id).tensor.data_mut().copy_from_slice(&data);
                    seen[id.0] = true;
                }
                None => model.set_buffer(&name, &data)?,
            }
        }
        if r.remaining() != 0 {
            return Err(r.error("trailing bytes before checksum"));
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Format {
                offset: r.pos,
                msg: format!("parameter `{}` missing", model.params().get(crate::ParamId(i)).name),
            });
        }
        Ok(Self {
            model,
            eps: meta.eps,
            attrs: meta.attrs,
        })
    }
}

/// Writes through a temporary sibling and renames, so readers never observe a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    fs::write(tmp, bytes).map_err(|e| Error::io(tmp, e))?;
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &ckpt.to_bytes())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
