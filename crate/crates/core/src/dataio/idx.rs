//! IDX containers of unsigned bytes, as used by the MNIST distribution.
//!
//! Layout: two zero bytes, a type code (`0x08` = u8), the number of
//! dimensions, one big-endian u32 per dimension, then the payload.

use std::path::Path;

use thiserror::Error;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
const UBYTE: u8 = 0x08;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("bad magic number {0:#010x}")]
    BadMagic(u32),
    #[error("expected {expected} dimension(s), header declares {found}")]
    WrongRank { expected: u8, found: u8 },
    #[error("truncated: need {expected} bytes, got {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} trailing byte(s) after payload")]
    TrailingBytes(usize),
    #[error("declared dimensions {0:?} overflow the addressable size")]
    DimOverflow(Vec<u32>),
    #[error("label count {labels} does not match image count {images}")]
    CountMismatch { images: usize, labels: usize },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A parsed u8 IDX array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn magic(&self) -> u32 {
        ((UBYTE as u32) << 8) | self.dims.len() as u32
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray, IdxError> {
    if bytes.len() < 4 {
        return Err(IdxError::Truncated {
            expected: 4,
            found: bytes.len(),
        });
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != UBYTE || bytes[3] == 0 {
        return Err(IdxError::BadMagic(magic));
    }
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(IdxError::Truncated {
            expected: header,
            found: bytes.len(),
        });
    }
    let raw: Vec<u32> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let payload = raw
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .and_then(|n| n.checked_add(header))
        .ok_or_else(|| IdxError::DimOverflow(raw.clone()))?;
    if bytes.len() < payload {
        return Err(IdxError::Truncated {
            expected: payload,
            found: bytes.len(),
        });
    }
    if bytes.len() > payload {
        return Err(IdxError::TrailingBytes(bytes.len() - payload));
    }
    Ok(IdxArray {
        dims: raw.iter().map(|&d| d as usize).collect(),
        data: bytes[header..].to_vec(),
    })
}

pub fn serialize_idx(array: &IdxArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * array.dims.len() + array.data.len());
    out.extend_from_slice(&array.magic().to_be_bytes());
    for &d in &array.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    out
}

fn expect_rank(bytes: &[u8], rank: u8) -> Result<IdxArray, IdxError> {
    let array = parse_idx(bytes)?;
    if array.dims.len() != rank as usize {
        return Err(IdxError::WrongRank {
            expected: rank,
            found: array.dims.len() as u8,
        });
    }
    Ok(array)
}

/// `[count, rows, cols]` image array.
pub fn parse_images(bytes: &[u8]) -> Result<IdxArray, IdxError> {
    expect_rank(bytes, 3)
}

pub fn parse_labels(bytes: &[u8]) -> Result<IdxArray, IdxError> {
    expect_rank(bytes, 1)
}

pub fn read_file(path: &Path) -> Result<Vec<u8>, IdxError> {
    std::fs::read(path).map_err(|source| IdxError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> IdxArray {
        IdxArray {
            dims: vec![2, 3, 2],
            data: (0..12).collect(),
        }
    }

    #[test]
    fn round_trip() {
        let bytes = serialize_idx(&sample());
        assert_eq!(&bytes[..4], &IMAGES_MAGIC.to_be_bytes());
        let parsed = parse_images(&bytes).unwrap();
        assert_eq!(parsed, sample());
        assert_eq!(serialize_idx(&parsed), bytes);
    }

    #[test]
    fn magic_flip_is_rejected() {
        let mut bytes = serialize_idx(&sample());
        bytes[2] ^= 0x01;
        assert!(matches!(parse_idx(&bytes), Err(IdxError::BadMagic(_))));
    }

    #[test]
    fn labels_are_not_images() {
        let labels = serialize_idx(&IdxArray {
            dims: vec![3],
            data: vec![1, 2, 3],
        });
        assert_eq!(&labels[..4], &LABELS_MAGIC.to_be_bytes());
        assert!(matches!(parse_images(&labels), Err(IdxError::WrongRank { .. })));
        assert_eq!(parse_labels(&labels).unwrap().data, vec![1, 2, 3]);
    }
}
