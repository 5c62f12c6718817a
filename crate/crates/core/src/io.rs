//! Portable binary latent files.
//!
//! Layout, all little-endian:
//!
//! | bytes      | content                         |
//! |------------|---------------------------------|
//! | 4          | magic `DLT1`                    |
//! | 1          | version, `1`                    |
//! | 1          | dtype, `1` = IEEE-754 binary64  |
//! | 1          | `ndim`                          |
//! | 4 * ndim   | dims as `u32`                   |
//! | 8 * prod   | row-major `f64` payload         |

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::latent::Latent;

pub const MAGIC: &[u8; 4] = b"DLT1";
pub const VERSION: u8 = 1;
pub const DTYPE_F64_LE: u8 = 1;

#[derive(Debug, Error)]
pub enum LatentFileError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, expected \"DLT1\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unsupported dtype {0}")]
    BadDtype(u8),
    #[error("truncated {section}: expected {expected} bytes, found {actual}")]
    Truncated { section: &'static str, expected: usize, actual: usize },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("invalid latent: {0}")]
    Invalid(String),
}

pub fn encode_latent(z: &Latent) -> Result<Vec<u8>, LatentFileError> {
    let shape = z.shape();
    let ndim = u8::try_from(shape.len())
        .map_err(|_| LatentFileError::Invalid(format!("{} dimensions do not fit in one byte", shape.len())))?;
    let mut out = Vec::with_capacity(7 + 4 * shape.len() + 8 * z.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, DTYPE_F64_LE, ndim]);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| LatentFileError::Invalid(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in z.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_latent(bytes: &[u8]) -> Result<Latent, LatentFileError> {
    let take = |from: usize, n: usize, section: &'static str| {
        bytes.get(from..from + n).ok_or(LatentFileError::Truncated {
            section,
            expected: n,
            actual: bytes.len().saturating_sub(from),
        })
    };
    let magic = take(0, 4, "magic")?;
    if magic != MAGIC {
        return Err(LatentFileError::BadMagic { found: magic.to_vec() });
    }
    let head = take(4, 3, "header")?;
    if head[0] != VERSION {
        return Err(LatentFileError::BadVersion(head[0]));
    }
    if head[1] != DTYPE_F64_LE {
        return Err(LatentFileError::BadDtype(head[1]));
    }
    let ndim = head[2] as usize;
    let dims_raw = take(7, 4 * ndim, "dims")?;
    let shape: Vec<usize> = dims_raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| LatentFileError::Invalid(format!("shape {shape:?} overflows")))?;
    let start = 7 + 4 * ndim;
    let payload = take(start, count, "payload")?;
    let trailing = bytes.len() - start - count;
    if trailing > 0 {
        return Err(LatentFileError::TrailingBytes(trailing));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Latent::from_vec(&shape, data).map_err(|e| LatentFileError::Invalid(e.to_string()))
}

pub fn write_latent(path: impl AsRef<Path>, z: &Latent) -> Result<(), LatentFileError> {
    fs::write(path, encode_latent(z)?)?;
    Ok(())
}

pub fn read_latent(path: impl AsRef<Path>) -> Result<Latent, LatentFileError> {
    decode_latent(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_layout() {
        let z = Latent::from_vec(&[1, 2], vec![1.0, -0.5]).unwrap();
        let bytes = encode_latent(&z).unwrap();
        let mut want = b"DLT1".to_vec();
        want.extend_from_slice(&[1, 1, 2, 1, 0, 0, 0, 2, 0, 0, 0]);
        want.extend_from_slice(&1.0f64.to_le_bytes());
        want.extend_from_slice(&(-0.5f64).to_le_bytes());
        assert_eq!(bytes, want);
        assert_eq!(decode_latent(&bytes).unwrap(), z);
    }

    #[test]
    fn distinct_errors() {
        let z = Latent::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let good = encode_latent(&z).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_latent(&bad), Err(LatentFileError::BadMagic { .. })));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode_latent(&bad), Err(LatentFileError::BadVersion(2))));
        let mut bad = good.clone();
        bad[5] = 2;
        assert!(matches!(decode_latent(&bad), Err(LatentFileError::BadDtype(2))));

        let err = decode_latent(&good[..good.len() - 5]).unwrap_err();
        assert!(matches!(err, LatentFileError::Truncated { section: "payload", expected: 24, actual: 19 }));
        assert!(err.to_string().contains("expected 24 bytes, found 19"));
        assert!(matches!(decode_latent(&good[..2]), Err(LatentFileError::Truncated { section: "magic", .. })));

        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode_latent(&long), Err(LatentFileError::TrailingBytes(1))));

        let mut nan = good;
        nan[11..19].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(matches!(decode_latent(&nan), Err(LatentFileError::Invalid(_))));
    }
}
