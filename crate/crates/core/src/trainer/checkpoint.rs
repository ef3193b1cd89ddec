//! Binary checkpoints.
//!
//! ```text
//! "FREC"  u32 version
//! u32 len, JSON config block (model config, vocabulary counts, data source)
//! u32 tensor count
//! per tensor: u32 name len, name bytes, u32 rank, u32 dims..., f32 data
//! ```
//!
//! All integers and floats are little-endian. Values are stored at 32-bit
//! precision; [`save_checkpoint`] rounds nothing itself, so callers that
//! need identical results before and after a round trip should round the
//! parameters to `f32` first.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{ParameterSet, Tensor};
use crate::ingest::VocabCounts;
use crate::towers::{init_params, ModelConfig, Towers};

pub const MAGIC: &[u8; 4] = b"FREC";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {cause}")]
    Io { path: PathBuf, cause: io::Error },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {VERSION})")]
    VersionMismatch { found: u32 },
    #[error("checkpoint is truncated")]
    TruncatedFile,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

/// Where the training data came from, so a checkpoint can rebuild its split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSource {
    pub data_dir: String,
    pub seed: u64,
    pub test_fraction: f64,
    pub subsample: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub counts: VocabCounts,
    pub data: Option<DataSource>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, params: &ParameterSet) -> Self {
        let tensors = params.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        Checkpoint { meta, tensors }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let config = serde_json::to_vec(&self.meta).expect("metadata serializes");
        put_u32(&mut out, config.len() as u32);
        out.extend_from_slice(&config);
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < MAGIC.len() {
            return Err(if MAGIC.starts_with(bytes) { CheckpointError::TruncatedFile } else { CheckpointError::BadMagic });
        }
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let found = r.u32()?;
        if found != VERSION {
            return Err(CheckpointError::VersionMismatch { found });
        }
        let len = r.u32()? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(len)?).map_err(|e| CheckpointError::Malformed(format!("config block: {e}")))?;
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Malformed(format!("{name}: shape {shape:?} overflows")))?;
            let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::TruncatedFile)?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { meta, tensors })
    }

    /// Rebuilds the model structure from the stored config and fills in the
    /// stored values. Every parameter must be present with its exact shape.
    pub fn restore(&self) -> Result<(Towers, ParameterSet)> {
        let malformed = |s: String| CheckpointError::Malformed(s);
        let (towers, mut params) =
            init_params(&self.meta.model, &self.meta.counts, 0).map_err(|e| malformed(e.to_string()))?;
        if self.tensors.len() != params.len() {
            return Err(malformed(format!("expected {} tensors, found {}", params.len(), self.tensors.len())));
        }
        for (name, t) in &self.tensors {
            let id = params.id(name).ok_or_else(|| malformed(format!("unexpected tensor {name}")))?;
            let slot = params.value_mut(id);
            if slot.shape() != t.shape() {
                return Err(malformed(format!("{name}: expected shape {:?}, found {:?}", slot.shape(), t.shape())));
            }
            *slot = t.clone();
        }
        Ok((towers, params))
    }
}

pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, params: &ParameterSet) -> Result<()> {
    let bytes = Checkpoint::new(meta.clone(), params).to_bytes();
    fs::write(path, bytes).map_err(|cause| CheckpointError::Io { path: path.to_path_buf(), cause })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|cause| CheckpointError::Io { path: path.to_path_buf(), cause })?;
    Checkpoint::from_bytes(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::TruncatedFile)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
