//! RVF raw volume files.
//!
//! Layout, all multibyte fields little-endian, no padding:
//!
//! | offset | size | field                              |
//! |--------|------|------------------------------------|
//! | 0      | 4    | magic `RVF1`                       |
//! | 4      | 1    | dtype: 0 = u8 labels, 1 = f32      |
//! | 5      | 12   | dims: u32 depth, height, width     |
//! | 17     | 12   | spacing: f32 sz, sy, sx            |
//! | 29     | ...  | payload, width fastest             |

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Grid, LabelMap, Volume};

pub const MAGIC: [u8; 4] = *b"RVF1";
pub const HEADER_LEN: usize = 29;
pub const MAX_EXTENT: u32 = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Dtype {
    Label = 0,
    Intensity = 1,
}

impl Dtype {
    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::Label),
            1 => Ok(Dtype::Intensity),
            other => Err(Error::UnknownDtype(other)),
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::Label => 1,
            Dtype::Intensity => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RvfHeader {
    pub dtype: Dtype,
    pub dims: [u32; 3],
    pub spacing: [f32; 3],
}

impl RvfHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[..4].copy_from_slice(&MAGIC);
        out[4] = self.dtype as u8;
        for (i, d) in self.dims.iter().enumerate() {
            out[5 + 4 * i..9 + 4 * i].copy_from_slice(&d.to_le_bytes());
        }
        for (i, s) in self.spacing.iter().enumerate() {
            out[17 + 4 * i..21 + 4 * i].copy_from_slice(&s.to_le_bytes());
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        let dtype = Dtype::from_tag(bytes[4])?;
        let word = |off: usize| -> [u8; 4] { bytes[off..off + 4].try_into().unwrap() };
        let dims = [0, 1, 2].map(|i| u32::from_le_bytes(word(5 + 4 * i)));
        let spacing = [0, 1, 2].map(|i| f32::from_le_bytes(word(17 + 4 * i)));
        if dims.iter().any(|&d| d == 0 || d > MAX_EXTENT) {
            return Err(Error::Domain(format!("dims {dims:?} outside 1..={MAX_EXTENT}")));
        }
        Ok(RvfHeader {
            dtype,
            dims,
            spacing,
        })
    }

    pub fn payload_len(&self) -> u64 {
        self.dims.iter().map(|&d| d as u64).product::<u64>() * self.dtype.size() as u64
    }
}

/// Contents of an RVF file.
#[derive(Clone, Debug, PartialEq)]
pub enum RvfData {
    Labels(LabelMap),
    Intensity(Volume),
}

impl RvfData {
    pub fn header(&self) -> RvfHeader {
        let (dtype, dims, spacing) = match self {
            RvfData::Labels(m) => (Dtype::Label, m.dims(), m.spacing()),
            RvfData::Intensity(v) => (Dtype::Intensity, v.dims(), v.spacing()),
        };
        RvfHeader {
            dtype,
            dims: dims.map(|d| d as u32),
            spacing,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header();
        let mut out = Vec::with_capacity(HEADER_LEN + header.payload_len() as usize);
        out.extend_from_slice(&header.to_bytes());
        match self {
            RvfData::Labels(m) => out.extend_from_slice(m.data()),
            RvfData::Intensity(v) => {
                for x in v.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = RvfHeader::parse(bytes)?;
        let expected = HEADER_LEN as u64 + header.payload_len();
        let found = bytes.len() as u64;
        if found < expected {
            return Err(Error::Truncated { expected, found });
        }
        if found > expected {
            return Err(Error::Domain(format!(
                "{} trailing bytes after payload",
                found - expected
            )));
        }
        let dims = header.dims.map(|d| d as usize);
        let payload = &bytes[HEADER_LEN..];
        Ok(match header.dtype {
            Dtype::Label => RvfData::Labels(LabelMap::with_spacing(dims, header.spacing, payload.to_vec())?),
            Dtype::Intensity => {
                let data = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                RvfData::Intensity(Volume::with_spacing(dims, header.spacing, data)?)
            }
        })
    }
}

pub fn read_rvf(path: impl AsRef<Path>) -> Result<RvfData> {
    RvfData::from_bytes(&fs::read(path)?)
}

pub fn write_rvf(path: impl AsRef<Path>, data: &RvfData) -> Result<()> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(&data.to_bytes())?;
    f.flush()?;
    Ok(())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    match read_rvf(path.as_ref())? {
        RvfData::Labels(m) => Ok(m),
        RvfData::Intensity(_) => Err(Error::InvalidArgument(format!(
            "{} holds intensities, expected labels",
            path.as_ref().display()
        ))),
    }
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    match read_rvf(path.as_ref())? {
        RvfData::Intensity(v) => Ok(v),
        RvfData::Labels(m) => Ok(m.to_volume()),
    }
}

pub fn write_labels(path: impl AsRef<Path>, m: &LabelMap) -> Result<()> {
    write_rvf(path, &RvfData::Labels(m.clone()))
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    write_rvf(path, &RvfData::Intensity(v.clone()))
}
