//! Image file layout, big-endian:
//!
//! ```text
//! "CKPT" | version u16 | job_id u64 | generation u32 | virtual_time u64 |
//! payload_len u32 | payload | crc32
//! ```
//!
//! The CRC-32 (IEEE) covers every byte before it.

use thiserror::Error;

pub const IMAGE_MAGIC: &[u8; 4] = b"CKPT";
pub const IMAGE_VERSION: u16 = 1;
pub const IMAGE_HEADER_LEN: usize = 4 + 2 + 8 + 4 + 8 + 4;
pub const IMAGE_TRAILER_LEN: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ImageDecodeError {
    #[error("image truncated ({0} bytes)")]
    Truncated(usize),
    #[error("bad image magic")]
    BadMagic,
    #[error("unsupported image version {0}")]
    BadVersion(u16),
    #[error("payload length {declared} does not match file size")]
    LengthMismatch { declared: u32 },
    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointImage {
    pub job_id: u64,
    pub generation: u32,
    pub virtual_time: u64,
    pub payload: Vec<u8>,
}

impl CheckpointImage {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(IMAGE_HEADER_LEN + self.payload.len() + IMAGE_TRAILER_LEN);
        out.extend_from_slice(IMAGE_MAGIC);
        out.extend_from_slice(&IMAGE_VERSION.to_be_bytes());
        out.extend_from_slice(&self.job_id.to_be_bytes());
        out.extend_from_slice(&self.generation.to_be_bytes());
        out.extend_from_slice(&self.virtual_time.to_be_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_be_bytes());
        out
    }

    pub fn decode(b: &[u8]) -> Result<Self, ImageDecodeError> {
        if b.len() < IMAGE_HEADER_LEN + IMAGE_TRAILER_LEN {
            return Err(ImageDecodeError::Truncated(b.len()));
        }
        let (body, trailer) = b.split_at(b.len() - IMAGE_TRAILER_LEN);
        let stored = u32::from_be_bytes(trailer.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(ImageDecodeError::CrcMismatch { stored, computed });
        }
        if &body[0..4] != IMAGE_MAGIC {
            return Err(ImageDecodeError::BadMagic);
        }
        let version = u16::from_be_bytes(body[4..6].try_into().unwrap());
        if version != IMAGE_VERSION {
            return Err(ImageDecodeError::BadVersion(version));
        }
        let job_id = u64::from_be_bytes(body[6..14].try_into().unwrap());
        let generation = u32::from_be_bytes(body[14..18].try_into().unwrap());
        let virtual_time = u64::from_be_bytes(body[18..26].try_into().unwrap());
        let declared = u32::from_be_bytes(body[26..30].try_into().unwrap());
        if declared as usize != body.len() - IMAGE_HEADER_LEN {
            return Err(ImageDecodeError::LengthMismatch { declared });
        }
        Ok(Self { job_id, generation, virtual_time, payload: body[IMAGE_HEADER_LEN..].to_vec() })
    }
}
