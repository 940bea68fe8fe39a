//! On-disk formats: the parameter container, model checkpoints, tensor
//! archives, and 16-bit PCM WAV.

pub mod archive;
pub mod container;
pub mod kv;
pub mod wav;

pub use archive::{ArchiveReader, ArchiveWriter};
pub use container::{read_checkpoint, read_params, write_checkpoint, write_params};

use std::io::Read;

use crate::error::{Error, Result};

pub(crate) fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(path, "unexpected end of file"))
}

pub(crate) fn read_u32(r: &mut impl Read, path: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read, path: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, path)?;
    Ok(u64::from_le_bytes(b))
}

/// FNV-1a over a byte stream; used to stamp run manifests.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
