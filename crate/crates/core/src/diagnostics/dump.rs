//! Hidden-state dumps for CKA.
//!
//! Little-endian: magic `GRFTHDMP`, u32 version, u32 layer count, u64 row
//! count `n`, one u32 width per layer, then each layer's `n × width` values
//! as f32, row-major, and a trailing u64 FNV-1a over all preceding bytes.

use std::path::Path;

use crate::bank::provider::Cursor;
use crate::error::{Error, Result};
use crate::hash::fnv1a;
use crate::numerics::Matrix;

pub const HIDDEN_DUMP_MAGIC: &[u8; 8] = b"GRFTHDMP";
pub const HIDDEN_DUMP_VERSION: u32 = 1;

pub fn encode_hidden_dump(layers: &[Matrix]) -> Result<Vec<u8>> {
    let n = layers.first().map_or(0, Matrix::rows);
    if layers.iter().any(|m| m.rows() != n) {
        return Err(Error::Shape("all layers in a dump need the same row count".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(HIDDEN_DUMP_MAGIC);
    out.extend_from_slice(&HIDDEN_DUMP_VERSION.to_le_bytes());
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for m in layers {
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    }
    for m in layers {
        for &v in m.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

pub fn decode_hidden_dump(bytes: &[u8]) -> Result<Vec<Matrix>> {
    if bytes.len() < 8 || &bytes[..8] != HIDDEN_DUMP_MAGIC {
        return Err(Error::BadMagic { expected: "GRFTHDMP" });
    }
    let mut cur = Cursor { bytes, pos: 8 };
    let version = cur.u32()?;
    if version != HIDDEN_DUMP_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: HIDDEN_DUMP_VERSION,
        });
    }
    if bytes.len() < 32 {
        return Err(Error::Truncated("hidden dump header".into()));
    }
    let body = &bytes[..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    let computed = fnv1a(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut cur = Cursor { bytes: body, pos: 12 };
    let count = cur.u32()? as usize;
    let n = cur.u64()? as usize;
    let widths = (0..count).map(|_| cur.u32().map(|w| w as usize)).collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(count);
    for w in widths {
        let len = n
            .checked_mul(w)
            .and_then(|x| x.checked_mul(4))
            .ok_or_else(|| Error::Truncated("layer size overflows".into()))?;
        let data = cur
            .take(len)?
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
            .collect();
        layers.push(Matrix::from_vec(n, w, data)?);
    }
    if cur.pos != body.len() {
        return Err(Error::Shape("trailing bytes in hidden dump".into()));
    }
    Ok(layers)
}

pub fn write_hidden_dump(path: &Path, layers: &[Matrix]) -> Result<()> {
    std::fs::write(path, encode_hidden_dump(layers)?).map_err(|e| Error::io(path, e))
}

pub fn read_hidden_dump(path: &Path) -> Result<Vec<Matrix>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_hidden_dump(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_corruption() {
        let layers = vec![
            Matrix::from_fn(5, 3, |i, j| (i * 3 + j) as f64 * 0.5),
            Matrix::from_fn(5, 2, |i, j| i as f64 - j as f64),
        ];
        let bytes = encode_hidden_dump(&layers).unwrap();
        assert_eq!(decode_hidden_dump(&bytes).unwrap(), layers);
        for i in 0..bytes.len() {
            let mut b = bytes.clone();
            b[i] ^= 1;
            assert!(decode_hidden_dump(&b).is_err());
        }
        assert!(encode_hidden_dump(&[Matrix::zeros(2, 2), Matrix::zeros(3, 2)]).is_err());
    }
}
