//! Binary checkpoint files.
//!
//! ```text
//! "NPC1"                      magic
//! u32                         format version
//! u32 + bytes                 metadata text (UTF-8, `key = value` lines)
//! u32                         tensor count
//! per tensor:
//!   u32 + bytes               name
//!   u8                        dtype code (0 = f32, 1 = f64)
//!   u32                       rank
//!   u64 × rank                dims
//!   elements                  little-endian payload
//! ```
//!
//! All integers are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::model::{ModelConfig, ModelError, ModelParams, NeuralProcess};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"NPC1";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("checkpoint format version {found}, this build reads {VERSION}")]
    VersionMismatch { found: u32 },
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing byte(s) after the last tensor")]
    TrailingBytes(usize),
    #[error("unknown dtype code {0}")]
    UnknownDType(u8),
    #[error("tensor name or metadata is not UTF-8")]
    BadText,
    #[error("tensor {0} appears more than once")]
    DuplicateTensor(String),
    #[error("tensor {name} declares {declared} elements, shape implies {expected}")]
    LengthMismatch {
        name: String,
        declared: usize,
        expected: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn cast<T: Element>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub tensors: Vec<(String, AnyTensor)>,
}

impl Checkpoint {
    pub fn new(metadata: impl Into<String>) -> Self {
        Checkpoint {
            metadata: metadata.into(),
            tensors: Vec::new(),
        }
    }

    pub fn push<T: Element>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push((name.into(), AnyTensor::from_tensor(t)));
    }

    pub fn push_params<T: Element>(&mut self, prefix: &str, params: &ModelParams<T>) {
        for (name, t) in params.named() {
            self.push(format!("{prefix}{name}"), t);
        }
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn with_prefix<T: Element>(&self, prefix: &str) -> BTreeMap<String, Tensor<T>> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|rest| (rest.to_string(), t.cast())))
            .collect()
    }

    /// Model parameters: every tensor without an `adam.` prefix.
    pub fn params<T: Element>(&self, config: &ModelConfig) -> Result<ModelParams<T>, CheckpointError> {
        let named = self
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("adam."))
            .map(|(n, t)| (n.clone(), t.cast()))
            .collect();
        Ok(ModelParams::from_named(config, named)?)
    }

    pub fn model<T: Element>(&self, config: &ModelConfig) -> Result<NeuralProcess<T>, CheckpointError> {
        Ok(NeuralProcess {
            config: config.clone(),
            params: self.params(config)?,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_text(&mut out, &self.metadata);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_text(&mut out, name);
            out.push(t.dtype().code());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                AnyTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                AnyTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch { found: version });
        }
        let metadata = r.text()?;
        let count = r.u32()? as usize;
        let mut tensors: Vec<(String, AnyTensor)> = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = r.text()?;
            if tensors.iter().any(|(n, _)| *n == name) {
                return Err(CheckpointError::DuplicateTensor(name));
            }
            let code = r.take(1)?[0];
            let dtype = DType::from_code(code).ok_or(CheckpointError::UnknownDType(code))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or(CheckpointError::Truncated(r.pos))?;
            let nbytes = numel.checked_mul(dtype.size()).ok_or(CheckpointError::Truncated(r.pos))?;
            let payload = r.take(nbytes)?;
            let t = match dtype {
                DType::F32 => AnyTensor::F32(decode_tensor(&name, shape, payload)?),
                DType::F64 => AnyTensor::F64(decode_tensor(&name, shape, payload)?),
            };
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        Ok(Checkpoint { metadata, tensors })
    }
}

fn decode_tensor<T: Element>(name: &str, shape: Vec<usize>, payload: &[u8]) -> Result<Tensor<T>, CheckpointError> {
    let size = T::DTYPE.size();
    let data: Vec<T> = payload.chunks_exact(size).map(T::read_le).collect();
    let expected = shape.iter().product();
    if data.len() != expected {
        return Err(CheckpointError::LengthMismatch {
            name: name.to_string(),
            declared: data.len(),
            expected,
        });
    }
    Ok(Tensor::new(shape, data).expect("length checked"))
}

fn put_text(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn text(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::BadText)
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, checkpoint.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}
