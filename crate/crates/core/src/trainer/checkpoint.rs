//! Binary checkpoints.
//!
//! Layout (little-endian): magic `b"SLVK"`, u32 version, u32 metadata length,
//! metadata JSON, u32 parameter count, then per parameter a u32 name length,
//! the UTF-8 name, a u8 rank and one f64 SLVF block holding the value.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ingest::format::{decode_block, encode_block, Block};
use crate::ingest::{Dtype, IngestError};
use crate::model::{Model, ModelConfig};
use crate::numerics::Tensor;
use crate::Error;

const MAGIC: &[u8; 4] = b"SLVK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Optimisation steps taken; 0 marks an untrained model.
    pub steps: usize,
    pub seed: u64,
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Ingest(IngestError::Format {
        offset,
        message: message.into(),
    })
}

pub fn write_checkpoint(model: &Model, meta: &CheckpointMeta) -> Result<Vec<u8>, Error> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(meta)?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, p) in model.store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        out.push(shape.len() as u8);
        let dims = match *shape {
            [] => [1, 1, 1],
            [n] => [n, 1, 1],
            [r, c] => [r, 1, c],
            _ => return Err(Error::Data(format!("parameter {} has rank {}", p.name, shape.len()))),
        };
        encode_block(
            &Block {
                dims,
                dtype: Dtype::F64,
                data: p.value.data().to_vec(),
            },
            &mut out,
        );
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], Error> {
        if self.bytes.len() - self.at < n {
            return Err(format_err(
                self.at,
                format!(
                    "truncated {what}: expected {n} bytes, found {}",
                    self.bytes.len() - self.at
                ),
            ));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize, Error> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }
}

/// Rebuilds the model from its stored config and overwrites every parameter.
pub fn read_checkpoint(bytes: &[u8]) -> Result<(Model, CheckpointMeta), Error> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(format_err(0, "bad magic, expected SLVK"));
    }
    let version = c.u32("version")?;
    if version != VERSION as usize {
        return Err(format_err(4, format!("unsupported checkpoint version {version}")));
    }
    let len = c.u32("metadata length")?;
    let meta: CheckpointMeta = serde_json::from_slice(c.take(len, "metadata")?)?;
    let mut model = Model::new(meta.model.clone(), 0)?;
    let count = c.u32("parameter count")?;
    if count != model.store.len() {
        return Err(format_err(
            c.at - 4,
            format!("{count} parameters stored, config defines {}", model.store.len()),
        ));
    }
    for _ in 0..count {
        let name_len = c.u32("name length")?;
        let at = c.at;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| format_err(at, "parameter name is not UTF-8"))?
            .to_string();
        let rank = c.take(1, "rank")?[0];
        let block_at = c.at;
        let block = decode_block(bytes, block_at)?;
        c.at += block.byte_len();
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| format_err(at, format!("unknown parameter {name:?}")))?;
        let shape = match (rank, block.dims) {
            (0, [1, 1, 1]) => vec![],
            (1, [n, 1, 1]) => vec![n],
            (2, [r, 1, col]) => vec![r, col],
            _ => {
                return Err(format_err(
                    block_at,
                    format!("bad dims {:?} for rank {rank}", block.dims),
                ))
            }
        };
        let param = model.store.get_mut(id);
        if param.value.shape() != shape.as_slice() {
            return Err(format_err(
                block_at,
                format!("{name}: stored shape {shape:?}, expected {:?}", param.value.shape()),
            ));
        }
        param.value = Tensor::new(shape, block.data)?;
    }
    if c.at != bytes.len() {
        return Err(format_err(c.at, "trailing bytes after last parameter"));
    }
    Ok((model, meta))
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, meta: &CheckpointMeta) -> Result<(), Error> {
    std::fs::write(path, write_checkpoint(model, meta)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, CheckpointMeta), Error> {
    read_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MODULES;

    #[test]
    fn round_trip_is_bit_exact() {
        let model = Model::new(ModelConfig::miniature(), 9).unwrap();
        let meta = CheckpointMeta {
            model: model.config.clone(),
            steps: 3,
            seed: 9,
        };
        let bytes = write_checkpoint(&model, &meta).unwrap();
        let (back, m) = read_checkpoint(&bytes).unwrap();
        assert_eq!(m, meta);
        assert_eq!(back.store.checksum(&MODULES), model.store.checksum(&MODULES));
        assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad).is_err());
    }
}
