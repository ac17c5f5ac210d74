//! SLVF binary feature container.
//!
//! Layout (little-endian):
//!
//! | offset | size | field                      |
//! |--------|------|----------------------------|
//! | 0      | 4    | magic `b"SLVF"`            |
//! | 4      | 4    | u32 version (= 1)          |
//! | 8      | 4    | u32 T (frames / rows)      |
//! | 12     | 4    | u32 P (tokens per frame)   |
//! | 16     | 4    | u32 d (feature dim)        |
//! | 20     | 1    | u8 dtype: 0 = f32, 1 = f64 |
//! | 21     | ...  | row-major payload          |

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FeatureStream, IngestError};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"SLVF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 21;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Decoded SLVF block: dims plus payload widened to f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub dims: [usize; 3],
    pub dtype: Dtype,
    pub data: Vec<f64>,
}

impl Block {
    pub fn byte_len(&self) -> usize {
        HEADER_LEN + self.data.len() * self.dtype.width()
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

/// Parses one block starting at `base`; byte offsets in errors are absolute.
pub fn decode_block(bytes: &[u8], base: usize) -> Result<Block, IngestError> {
    let avail = bytes.len().saturating_sub(base);
    if avail < HEADER_LEN {
        return Err(IngestError::format(
            base + avail,
            format!("header needs {HEADER_LEN} bytes, found {avail}"),
        ));
    }
    let b = &bytes[base..];
    if &b[0..4] != MAGIC {
        return Err(IngestError::format(base, format!("bad magic {:?}", &b[0..4])));
    }
    let version = read_u32(b, 4);
    if version != VERSION {
        return Err(IngestError::format(base + 4, format!("unsupported version {version}")));
    }
    let dims = [
        read_u32(b, 8) as usize,
        read_u32(b, 12) as usize,
        read_u32(b, 16) as usize,
    ];
    if let Some(i) = dims.iter().position(|&v| v == 0) {
        return Err(IngestError::format(base + 8 + 4 * i, "zero dimension in header".into()));
    }
    let dtype = match b[20] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        other => return Err(IngestError::format(base + 20, format!("unknown dtype code {other}"))),
    };
    let count = dims[0] * dims[1] * dims[2];
    let expected = count * dtype.width();
    let actual = avail - HEADER_LEN;
    if actual < expected {
        return Err(IngestError::format(
            base + HEADER_LEN + actual,
            format!("truncated payload: expected {expected} bytes, found {actual}"),
        ));
    }
    let payload = &b[HEADER_LEN..HEADER_LEN + expected];
    let data = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Ok(Block { dims, dtype, data })
}

pub fn encode_block(block: &Block, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in block.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(block.dtype.code());
    match block.dtype {
        Dtype::F32 => block
            .data
            .iter()
            .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        Dtype::F64 => block.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
}

/// Decodes a whole file that must contain exactly one block.
pub fn decode_feature_bytes(bytes: &[u8], video_id: &str) -> Result<FeatureStream, IngestError> {
    let block = decode_block(bytes, 0)?;
    if bytes.len() != block.byte_len() {
        return Err(IngestError::format(
            block.byte_len(),
            format!(
                "trailing data: expected {} bytes total, found {}",
                block.byte_len(),
                bytes.len()
            ),
        ));
    }
    let frames = Tensor::new(block.dims.to_vec(), block.data)?;
    let mut stream = FeatureStream::new(video_id, frames)?;
    stream.dtype = block.dtype;
    Ok(stream)
}

pub fn encode_feature_bytes(stream: &FeatureStream) -> Vec<u8> {
    let [t, p, d] = stream.dims();
    let block = Block {
        dims: [t, p, d],
        dtype: stream.dtype,
        data: stream.frames().data().to_vec(),
    };
    let mut out = Vec::with_capacity(block.byte_len());
    encode_block(&block, &mut out);
    out
}

pub fn load_feature_file(path: impl AsRef<Path>) -> Result<FeatureStream, IngestError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let video_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_feature_bytes(&bytes, &video_id)
}

pub fn write_feature_file(path: impl AsRef<Path>, stream: &FeatureStream) -> Result<(), IngestError> {
    std::fs::File::create(path)?.write_all(&encode_feature_bytes(stream))?;
    Ok(())
}

/// Writes a matrix as an SLVF file with `P = 1` (embedding / query files).
pub fn write_matrix_file(path: impl AsRef<Path>, m: &Tensor, dtype: Dtype) -> Result<(), IngestError> {
    let block = Block {
        dims: [m.rows(), 1, m.cols()],
        dtype,
        data: m.data().to_vec(),
    };
    let mut out = Vec::new();
    encode_block(&block, &mut out);
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads an SLVF file with `P = 1` as a `T × d` matrix.
pub fn load_matrix_file(path: impl AsRef<Path>) -> Result<Tensor, IngestError> {
    let bytes = std::fs::read(path)?;
    let block = decode_block(&bytes, 0)?;
    if block.dims[1] != 1 {
        return Err(IngestError::format(
            12,
            format!("expected P = 1, found {}", block.dims[1]),
        ));
    }
    Ok(Tensor::matrix(block.dims[0], block.dims[2], block.data)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(dtype: Dtype) -> FeatureStream {
        let data = (0..24).map(|v| v as f64 * 0.5 - 3.0).collect();
        let mut s = FeatureStream::new("v", Tensor::new(vec![4, 2, 3], data).unwrap()).unwrap();
        s.dtype = dtype;
        s
    }

    #[test]
    fn header_dims_round_trip() {
        let bytes = encode_feature_bytes(&stream(Dtype::F32));
        assert_eq!(bytes.len(), HEADER_LEN + 24 * 4);
        let back = decode_feature_bytes(&bytes, "v").unwrap();
        assert_eq!(back.dims(), [4, 2, 3]);
        assert_eq!(encode_feature_bytes(&back), bytes);
    }

    #[test]
    fn truncated_payload_reports_lengths() {
        let bytes = encode_feature_bytes(&stream(Dtype::F64));
        let err = decode_feature_bytes(&bytes[..bytes.len() - 5], "v").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("expected 192 bytes, found 187"), "{msg}");
        assert!(matches!(err, IngestError::Format { offset: 208, .. }), "{err:?}");
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode_feature_bytes(&stream(Dtype::F64));
        bytes[0] = b'X';
        assert!(matches!(
            decode_feature_bytes(&bytes, "v"),
            Err(IngestError::Format { offset: 0, .. })
        ));
        let mut bytes = encode_feature_bytes(&stream(Dtype::F64));
        bytes[4] = 2;
        assert!(matches!(
            decode_feature_bytes(&bytes, "v"),
            Err(IngestError::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn short_header() {
        assert!(matches!(
            decode_feature_bytes(b"SLV", "v"),
            Err(IngestError::Format { offset: 3, .. })
        ));
    }
}
