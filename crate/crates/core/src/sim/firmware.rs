//! Firmware image container.
//!
//! ```text
//! "TFW1" | total_len u32 | version_len u16 | version | blob_len u32 | model blob | filler | sha256
//! ```
//! All integers little-endian. The digest covers every byte before it.

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"TFW1";
pub const DIGEST_LEN: usize = 32;
/// Padded size of the three-class firmware.
pub const FW1_SIZE: usize = 396_984;
/// Padded size of the four-class firmware.
pub const FW2_SIZE: usize = 399_554;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FirmwareError {
    #[error("bad magic")]
    BadMagic,
    #[error("truncated image")]
    Truncated,
    #[error("digest mismatch")]
    DigestMismatch,
    #[error("image needs {need} bytes, target size is {size}")]
    TooSmall { need: usize, size: usize },
    #[error("version is not UTF-8")]
    Version,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FirmwareImage {
    pub version: String,
    pub model_blob: Vec<u8>,
}

fn filler(i: usize) -> u8 {
    ((i as u32).wrapping_mul(2_654_435_761) >> 24) as u8
}

impl FirmwareImage {
    pub fn new(version: &str, model_blob: Vec<u8>) -> FirmwareImage {
        FirmwareImage {
            version: version.to_string(),
            model_blob,
        }
    }

    /// Size without filler.
    pub fn min_size(&self) -> usize {
        4 + 4 + 2 + self.version.len() + 4 + self.model_blob.len() + DIGEST_LEN
    }

    /// Serialize, padded to exactly `size` bytes.
    pub fn build(&self, size: usize) -> Result<Vec<u8>, FirmwareError> {
        let need = self.min_size();
        if size < need || size > u32::MAX as usize {
            return Err(FirmwareError::TooSmall { need, size });
        }
        let mut out = Vec::with_capacity(size);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(size as u32).to_le_bytes());
        out.extend_from_slice(&(self.version.len() as u16).to_le_bytes());
        out.extend_from_slice(self.version.as_bytes());
        out.extend_from_slice(&(self.model_blob.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.model_blob);
        let body_end = size - DIGEST_LEN;
        let start = out.len();
        out.extend((start..body_end).map(filler));
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Parse and verify an image at the start of `bytes`; anything after
    /// the declared length is ignored. Returns the image and its length.
    pub fn parse(bytes: &[u8]) -> Result<(FirmwareImage, usize), FirmwareError> {
        if bytes.len() < 8 {
            return Err(FirmwareError::Truncated);
        }
        if &bytes[..4] != MAGIC {
            return Err(FirmwareError::BadMagic);
        }
        let total = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if total < 14 + DIGEST_LEN || total > bytes.len() {
            return Err(FirmwareError::Truncated);
        }
        let image = &bytes[..total];
        let (body, digest) = image.split_at(total - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(FirmwareError::DigestMismatch);
        }
        let vlen = u16::from_le_bytes([body[8], body[9]]) as usize;
        let mut at = 10;
        let version = body.get(at..at + vlen).ok_or(FirmwareError::Truncated)?;
        let version = std::str::from_utf8(version).map_err(|_| FirmwareError::Version)?.to_string();
        at += vlen;
        let blen = body
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or(FirmwareError::Truncated)?;
        at += 4;
        let model_blob = body.get(at..at + blen).ok_or(FirmwareError::Truncated)?.to_vec();
        Ok((FirmwareImage { version, model_blob }, total))
    }
}

pub fn verify(bytes: &[u8]) -> bool {
    FirmwareImage::parse(bytes).is_ok()
}
