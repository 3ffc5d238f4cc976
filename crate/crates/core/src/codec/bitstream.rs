//! `.saic` container for one binary latent.
//!
//! Layout (all integers big-endian):
//!
//! | bytes | field                                   |
//! |-------|-----------------------------------------|
//! | 4     | magic `SAIC`                            |
//! | 1     | format version (`1`)                    |
//! | 2 + 2 | image height, width                     |
//! | 2×3   | latent channels, height, width          |
//! | n     | payload, `ceil(bits / 8)` bytes         |
//! | 4     | CRC-32 of the payload                   |
//!
//! The payload is the latent flattened channel-major, then row, then
//! column, packed eight bits per byte with the most significant bit first.
//! Unused trailing bits of the last byte are zero.

use std::fs;
use std::path::Path;

use super::LatentShape;
use crate::error::{Result, SaicError};

pub const MAGIC: &[u8; 4] = b"SAIC";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 4 + 6;
pub const CHECKSUM_LEN: usize = 4;
pub const FILE_EXTENSION: &str = "saic";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub height: u16,
    pub width: u16,
    pub latent: LatentShape,
    /// One entry per latent element, each 0 or 1.
    pub bits: Vec<u8>,
}

fn u16_field(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| SaicError::Format(format!("{what} {v} does not fit in u16")))
}

impl Bitstream {
    /// Builds a bitstream from a binary latent in channel-major order.
    pub fn from_latent(latent: &[f32], shape: LatentShape, height: usize, width: usize) -> Result<Self> {
        if latent.len() != shape.len() {
            return Err(SaicError::Contract(format!(
                "latent has {} values, shape {shape} needs {}",
                latent.len(),
                shape.len()
            )));
        }
        let bits = latent
            .iter()
            .map(|&v| match v {
                0.0 => Ok(0u8),
                1.0 => Ok(1u8),
                v => Err(SaicError::Contract(format!("latent value {v} is not binary"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Ok(Bitstream {
            height: u16_field(height, "image height")?,
            width: u16_field(width, "image width")?,
            latent: shape,
            bits,
        })
    }

    pub fn latent_values(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| b as f32).collect()
    }

    pub fn payload_len(&self) -> usize {
        self.bits.len().div_ceil(8)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload_len() + CHECKSUM_LEN);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.height.to_be_bytes());
        out.extend_from_slice(&self.width.to_be_bytes());
        for d in [self.latent.channels, self.latent.height, self.latent.width] {
            out.extend_from_slice(&u16_field(d, "latent dimension")?.to_be_bytes());
        }
        let payload = pack_bits(&self.bits);
        let crc = crc32fast::hash(&payload);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc.to_be_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
            return Err(SaicError::Format(format!(
                "bitstream too short: {} bytes",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(SaicError::Format("bad magic, not a .saic bitstream".into()));
        }
        if bytes[4] != VERSION {
            return Err(SaicError::Format(format!(
                "unsupported bitstream version {}",
                bytes[4]
            )));
        }
        let rd = |o: usize| u16::from_be_bytes([bytes[o], bytes[o + 1]]);
        let (height, width) = (rd(5), rd(7));
        let latent = LatentShape::new(rd(9) as usize, rd(11) as usize, rd(13) as usize);
        let n_bits = latent.len();
        let payload_len = n_bits.div_ceil(8);
        if bytes.len() != HEADER_LEN + payload_len + CHECKSUM_LEN {
            return Err(SaicError::Format(format!(
                "latent {latent} needs {payload_len} payload bytes, file carries {}",
                bytes.len() as isize - (HEADER_LEN + CHECKSUM_LEN) as isize
            )));
        }
        let payload = &bytes[HEADER_LEN..HEADER_LEN + payload_len];
        let stored = u32::from_be_bytes(bytes[HEADER_LEN + payload_len..].try_into().unwrap());
        if crc32fast::hash(payload) != stored {
            return Err(SaicError::Format("payload checksum mismatch".into()));
        }
        let bits = unpack_bits(payload, n_bits);
        if n_bits % 8 != 0 && payload[payload_len - 1] & (0xFF >> (n_bits % 8)) != 0 {
            return Err(SaicError::Format("non-zero padding bits".into()));
        }
        Ok(Bitstream {
            height,
            width,
            latent,
            bits,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| SaicError::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| SaicError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| SaicError::io(path, e))?;
        Bitstream::from_bytes(&bytes)
    }
}

/// MSB-first packing of 0/1 values.
pub fn pack_bits(bits: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b != 0 {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], n_bits: usize) -> Vec<u8> {
    (0..n_bits)
        .map(|i| (bytes[i / 8] >> (7 - i % 8)) & 1)
        .collect()
}
