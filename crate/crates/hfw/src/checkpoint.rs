//! `.hfwckpt` container for learned parameters.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "HFWCKPT\0" | version u32 | metadata length u32 | metadata JSON
//! tensor count u32 | per tensor: name length u32, name, dtype u8, rank u32,
//!                    extents u64 × rank, payload
//! CRC-32 u32 over every preceding byte
//! ```
//!
//! Only trainable tensors are stored; fast memory never is.

use std::fs;
use std::path::Path;

use hfw_core::backbones::{Model, ModelConfig};
use hfw_core::{DType, Element, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{check_crc, put_len, put_u32, put_u64, Reader};
use crate::error::{AppError, Result};

pub const MAGIC: &[u8; 8] = b"HFWCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// SHA-256 of the resolved experiment configuration.
    pub config_digest: String,
    pub epoch: usize,
    pub best_val_acc: f64,
    pub seed: u64,
}

/// Hex SHA-256 of `text`.
pub fn digest(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// One decoded tensor record.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl TensorRecord {
    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match self.dtype {
            DType::F32 => self.payload.chunks_exact(4).map(|b| T::of(f32::read_le(b) as f64)).collect(),
            DType::F64 => self.payload.chunks_exact(8).map(|b| T::of(f64::read_le(b))).collect(),
        };
        Ok(Tensor::new(&self.shape, data)?)
    }
}

pub struct Decoded {
    pub meta: CheckpointMeta,
    pub tensors: Vec<TensorRecord>,
    /// Byte range of the tensor section within the file.
    pub tensor_section: std::ops::Range<usize>,
}

pub fn encode<T: Element>(model: &Model<T>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    if &meta.model != model.config() {
        return Err(AppError::Config("checkpoint metadata describes a different model".into()));
    }
    let mut out = Vec::with_capacity(model.count_parameters() * T::DTYPE.size_of() + 4096);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let json = serde_json::to_vec(meta).map_err(|e| AppError::Format(e.to_string()))?;
    put_len(&mut out, json.len())?;
    out.extend_from_slice(&json);
    put_len(&mut out, model.params().len())?;
    for p in model.params().iter() {
        put_len(&mut out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        out.push(T::DTYPE.tag());
        put_len(&mut out, p.value.rank())?;
        for &e in p.value.shape() {
            put_u64(&mut out, e as u64);
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

pub fn decode(buf: &[u8]) -> Result<Decoded> {
    let body = check_crc(buf, "checkpoint")?;
    let mut r = Reader::new(body, "checkpoint");
    if r.bytes(8)? != MAGIC {
        return r.fail("bad magic");
    }
    let version = r.u32()?;
    if version != VERSION {
        return r.fail(format!("unsupported version {version} (expected {VERSION})"));
    }
    let n = r.len_u32()?;
    let meta: CheckpointMeta =
        serde_json::from_slice(r.bytes(n)?).map_err(|e| AppError::Format(format!("checkpoint metadata: {e}")))?;
    let start = r.pos();
    let count = r.len_u32()?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.len_u32()?;
        let name = match std::str::from_utf8(r.bytes(n)?) {
            Ok(s) => s.to_string(),
            Err(_) => return r.fail("tensor name is not UTF-8"),
        };
        let tag = r.u8()?;
        let Some(dtype) = DType::from_tag(tag) else {
            return r.fail(format!("unknown dtype tag {tag}"));
        };
        let rank = r.len_u32()?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let len = shape
            .iter()
            .try_fold(dtype.size_of(), |a, &e| a.checked_mul(e))
            .filter(|&l| l <= r.remaining());
        let Some(len) = len else {
            return r.fail(format!("tensor '{name}' extents {shape:?} exceed the file"));
        };
        let payload = r.bytes(len)?.to_vec();
        tensors.push(TensorRecord { name, dtype, shape, payload });
    }
    if r.remaining() != 0 {
        return r.fail("trailing bytes");
    }
    Ok(Decoded {
        meta,
        tensors,
        tensor_section: start..r.pos(),
    })
}

pub fn save_checkpoint<T: Element>(model: &Model<T>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = encode(model, meta)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    // write then rename so a crash never leaves a half-written best checkpoint
    let tmp = path.with_extension("hfwckpt.tmp");
    fs::write(&tmp, bytes).map_err(|e| AppError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| AppError::io(path, e))
}

/// Rebuilds the model recorded in `buf`, converting the stored precision to `T`.
pub fn model_from_bytes<T: Element>(buf: &[u8]) -> Result<(Model<T>, CheckpointMeta)> {
    let d = decode(buf)?;
    let tensors = d
        .tensors
        .iter()
        .map(|r| Ok((r.name.clone(), r.to_tensor::<T>()?)))
        .collect::<Result<Vec<_>>>()?;
    let model = Model::from_tensors(d.meta.model.clone(), tensors)?;
    Ok((model, d.meta))
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<(Model<T>, CheckpointMeta)> {
    let buf = fs::read(path).map_err(|e| AppError::io(path, e))?;
    model_from_bytes(&buf)
}
