//! SSCK checkpoints.
//!
//! `SSCK`, version u32, tensor count u32, then per tensor: name length u16,
//! UTF-8 name, rank u8, extents u32 each, f32 data. Little-endian throughout.
//! The first tensor is `meta:<kind>` and holds the network configuration.

use std::fs;
use std::path::Path;

use super::{Network, Parameter};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SSCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const META_PREFIX: &str = "meta:";

pub fn encode_checkpoint<N: Network>(net: &N) -> Vec<u8> {
    let meta = Parameter {
        name: format!("{META_PREFIX}{}", N::KIND),
        value: Tensor::from_vec(vec![net.config_values().len()], net.config_values()).expect("rank 1"),
    };
    let entries: Vec<&Parameter> = std::iter::once(&meta).chain(net.params()).collect();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for p in entries {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint(format!(
                "truncated at byte {}: need {n} more, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn tensor(&mut self) -> Result<Parameter> {
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::CorruptCheckpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.u8()? as usize;
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = n
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= self.bytes.len()))
            .ok_or_else(|| Error::CorruptCheckpoint(format!("{name}: implausible shape {shape:?}")))?;
        let data = self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Parameter {
            value: Tensor::from_vec(shape, data)?,
            name,
        })
    }
}

pub fn decode_checkpoint<N: Network>(bytes: &[u8]) -> Result<N> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let count = r.u32()? as usize;
    if count == 0 {
        return Err(Error::CorruptCheckpoint("no tensors".into()));
    }
    let meta = r.tensor()?;
    let kind = meta
        .name
        .strip_prefix(META_PREFIX)
        .ok_or_else(|| Error::CorruptCheckpoint(format!("first tensor {:?} is not a meta entry", meta.name)))?;
    if kind != N::KIND {
        return Err(Error::WrongNetwork {
            expected: N::KIND.to_string(),
            found: kind.to_string(),
        });
    }
    let params = (1..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    N::from_parts(meta.value.data(), params)
}

pub fn save_checkpoint<N: Network>(net: &N, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(net))?;
    Ok(())
}

pub fn load_checkpoint<N: Network>(path: impl AsRef<Path>) -> Result<N> {
    decode_checkpoint(&fs::read(path)?)
}
