//! Bank file layout, little-endian throughout:
//!
//! ```text
//! "GRFTBANK"                 8 bytes
//! version                    u32 (= 1)
//! dtype code                 u32 (1 = bf16, 2 = f16)
//! D_mem                      u32
//! order count                u32
//! per order: n, count        u32, u64
//! metadata length, bytes     u32, UTF-8 `key=value` lines
//! key section                per order ascending, sorted tuples of u32
//! row section                M × D_mem × u16
//! checksum                   u64 FNV-1a over every preceding byte
//! ```

use std::path::Path;

use super::provider::Cursor;
use super::{BankMeta, MemoryBank, StorageDtype};
use crate::corpus::MAX_ORDER;
use crate::error::{Error, Result};
use crate::hash::fnv1a;

pub const BANK_MAGIC: &[u8; 8] = b"GRFTBANK";
pub const BANK_VERSION: u32 = 1;

pub(crate) fn header_len(n_orders: usize, meta_len: usize) -> usize {
    8 + 4 * 4 + 12 * n_orders + 4 + meta_len
}

impl MemoryBank {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = self.meta.to_text();
        let total = super::bank_stats(self).total_bytes as usize;
        let mut out = Vec::with_capacity(total);
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&BANK_VERSION.to_le_bytes());
        out.extend_from_slice(&self.dtype.code().to_le_bytes());
        out.extend_from_slice(&(self.d_mem as u32).to_le_bytes());
        out.extend_from_slice(&(self.tables.len() as u32).to_le_bytes());
        for t in &self.tables {
            out.extend_from_slice(&(t.order as u32).to_le_bytes());
            out.extend_from_slice(&(t.count() as u64).to_le_bytes());
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        for t in &self.tables {
            for id in &t.keys {
                out.extend_from_slice(&id.to_le_bytes());
            }
        }
        for r in &self.rows {
            out.extend_from_slice(&r.to_le_bytes());
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        debug_assert_eq!(out.len(), total);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if bytes.len() < 8 || &bytes[..8] != BANK_MAGIC {
            return Err(Error::BadMagic { expected: "GRFTBANK" });
        }
        cur.pos = 8;
        let version = cur.u32()?;
        if version != BANK_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: BANK_VERSION,
            });
        }
        let dtype_code = cur.u32()?;
        let d_mem = cur.u32()? as usize;
        let n_orders = cur.u32()? as usize;
        if n_orders > MAX_ORDER {
            return Err(Error::Truncated(format!("implausible order count {n_orders}")));
        }
        let mut shape = Vec::with_capacity(n_orders);
        for _ in 0..n_orders {
            let n = cur.u32()? as usize;
            let count = cur.u64()?;
            shape.push((n, count));
        }
        let meta_len = cur.u32()? as usize;

        let declared = shape
            .iter()
            .try_fold(header_len(n_orders, meta_len) as u64 + 8, |acc, &(n, c)| {
                let per_key = 4 * n as u64 + 2 * d_mem as u64;
                c.checked_mul(per_key).and_then(|b| acc.checked_add(b))
            })
            .unwrap_or(u64::MAX);
        if declared != bytes.len() as u64 {
            return Err(Error::Truncated(format!(
                "header declares {declared} bytes, file has {}",
                bytes.len()
            )));
        }
        let body = &bytes[..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        let computed = fnv1a(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        // Structure below is covered by the checksum; violations mean the
        // writer was wrong, not that the bytes were damaged.
        let dtype = StorageDtype::from_code(dtype_code)?;
        if d_mem == 0 {
            return Err(Error::Config("bank declares D_mem = 0".into()));
        }
        let meta_text = std::str::from_utf8(cur.take(meta_len)?)
            .map_err(|_| Error::Config("bank metadata is not UTF-8".into()))?;
        let meta = BankMeta::from_text(meta_text)?;

        let mut per_order = Vec::with_capacity(n_orders);
        let mut prev_order = 0;
        for &(n, count) in &shape {
            if !(2..=MAX_ORDER).contains(&n) || n <= prev_order {
                return Err(Error::Config(format!("bad order {n} in bank header")));
            }
            prev_order = n;
            let raw = cur.take(4 * n * count as usize)?;
            let keys: Vec<u32> = raw
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if keys.chunks_exact(n).zip(keys.chunks_exact(n).skip(1)).any(|(a, b)| a >= b) {
                return Err(Error::Config(format!("order-{n} keys not strictly sorted")));
            }
            per_order.push((n, keys));
        }
        let m: usize = shape.iter().map(|&(_, c)| c as usize).sum();
        let raw = cur.take(2 * m * d_mem)?;
        let rows: Vec<u16> = raw
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = rows.iter().position(|&b| !dtype.decode(b).is_finite()) {
            return Err(Error::NonFinite(format!("row {} element {}", i / d_mem, i % d_mem)));
        }
        Ok(MemoryBank::assemble(d_mem, dtype, per_order, rows, meta))
    }
}

pub fn write_bank(bank: &MemoryBank, path: &Path) -> Result<()> {
    std::fs::write(path, bank.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_bank(path: &Path) -> Result<MemoryBank> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    MemoryBank::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::super::{bank_stats, build_bank, SyntheticProvider};
    use super::*;
    use crate::corpus::NgramKey;

    fn bank(n: u32, dtype: StorageDtype) -> MemoryBank {
        let keys: Vec<NgramKey> = (0..n)
            .map(|i| {
                let ids = [i % 97, i / 97, i % 13, i % 5];
                NgramKey::new(&ids[..2 + (i % 3) as usize]).unwrap()
            })
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        build_bank(&keys, &SyntheticProvider::new(5, 8), dtype, "24", vec![("seed".into(), "5".into())]).unwrap()
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        for dtype in [StorageDtype::Bf16, StorageDtype::F16] {
            let b = bank(1000, dtype);
            let bytes = b.to_bytes();
            assert_eq!(bytes.len() as u64, bank_stats(&b).total_bytes);
            let back = MemoryBank::from_bytes(&bytes).unwrap();
            assert_eq!(back.to_bytes(), bytes);
            assert_eq!(back.meta(), b.meta());
            assert_eq!(back.orders(), b.orders());
            for j in 0..b.len() {
                assert_eq!(back.row_bits(j), b.row_bits(j));
                assert_eq!(back.key_of_row(j), b.key_of_row(j));
            }
        }
    }

    #[test]
    fn payload_corruption_is_a_checksum_error() {
        let bytes = bank(300, StorageDtype::Bf16).to_bytes();
        let meta_len = u32::from_le_bytes(bytes[8 + 16 + 36..8 + 16 + 36 + 4].try_into().unwrap()) as usize;
        let payload_start = header_len(3, meta_len);
        for pos in (payload_start..bytes.len()).step_by(37) {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            assert!(
                matches!(MemoryBank::from_bytes(&bad), Err(Error::Checksum { .. })),
                "byte {pos}"
            );
        }
    }

    #[test]
    fn every_single_byte_corruption_is_detected() {
        let bytes = bank(40, StorageDtype::F16).to_bytes();
        for pos in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[pos] = bad[pos].wrapping_add(1);
            assert!(MemoryBank::from_bytes(&bad).is_err(), "byte {pos}");
        }
    }

    #[test]
    fn header_errors_name_the_problem() {
        let bytes = bank(10, StorageDtype::Bf16).to_bytes();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(MemoryBank::from_bytes(&bad), Err(Error::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            MemoryBank::from_bytes(&bad),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));

        assert!(matches!(
            MemoryBank::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(MemoryBank::from_bytes(&bytes[..14]), Err(Error::Truncated(_))));
    }
}
