//! Binary model format.
//!
//! ```text
//! "GMMP" | version: u16 | K: u32 | d: u32
//! weights: K x f64 | means: K*d x f64 | covariances: K*d*d x f64 (row-major)
//! crc32 of all preceding bytes: u32
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::gmm::Gmm;

pub const MAGIC: &[u8; 4] = b"GMMP";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4;
const CRC_LEN: usize = 4;

/// Serialized size of a model with `k` components in `d` dimensions.
pub fn encoded_len(k: usize, d: usize) -> Option<usize> {
    let floats = d.checked_mul(d)?.checked_add(d)?.checked_add(1)?.checked_mul(k)?;
    floats.checked_mul(8)?.checked_add(HEADER_LEN + CRC_LEN)
}

pub fn encode_model(gmm: &Gmm) -> Vec<u8> {
    let (k, d) = (gmm.components(), gmm.dim());
    let mut out = Vec::with_capacity(encoded_len(k, d).unwrap_or(0));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(k as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for w in gmm.weights() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    for m in gmm.means() {
        for v in m.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for c in gmm.covariances() {
        for i in 0..d {
            for j in 0..d {
                out.extend_from_slice(&c[(i, j)].to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<Gmm> {
    if bytes.len() < MAGIC.len() {
        return Err(Error::Truncated {
            needed: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            needed: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let k = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
    let needed = encoded_len(k, d).unwrap_or(usize::MAX);
    if bytes.len() < needed {
        return Err(Error::Truncated {
            needed,
            actual: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(Error::TrailingBytes(bytes.len() - needed));
    }
    let body = &bytes[..needed - CRC_LEN];
    let stored = u32::from_le_bytes(bytes[needed - CRC_LEN..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }

    let mut floats = body[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut take = |count: usize| -> Vec<f64> { floats.by_ref().take(count).collect() };
    let weights = take(k);
    let means = (0..k).map(|_| DVector::from_vec(take(d))).collect();
    let covariances = (0..k).map(|_| DMatrix::from_row_slice(d, d, &take(d * d))).collect();
    Gmm::new(weights, means, covariances)
}

/// Writes the model atomically.
pub fn save_model(gmm: &Gmm, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_model(gmm))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Gmm> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
