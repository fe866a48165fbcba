//! Layer parameter blob.
//!
//! Little-endian: magic `GRFTLAYR`, u32 version, u32 mode code, u32 `D`,
//! `D_mem`, `d_fallback`, `C`, `ksize`, u32 group count, then per group a
//! u32 group index, u64 value count and that many f32 values. A u32 flag
//! follows; when 1 it introduces the fallback tables: u32 order count, the
//! orders as u32, u32 heads, u32 `V'`, one u64 seed per (order, head), u32
//! `d_sub` and every table row as f32. The file ends with a u64 FNV-1a over
//! all preceding bytes.

use std::path::Path;

use super::params::{GraftLayerParams, GraftMode, LayerShape, ParamGroup};
use crate::bank::provider::Cursor;
use crate::error::{Error, Result};
use crate::fallback::{FallbackTables, HashScheme};
use crate::hash::fnv1a;
use crate::numerics::Matrix;

pub const PARAMS_MAGIC: &[u8; 8] = b"GRFTLAYR";
pub const PARAMS_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64], what: &str) -> Result<()> {
    for &v in values {
        let x = v as f32;
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("{what} does not fit in f32")));
        }
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(())
}

fn get_f32s(cur: &mut Cursor<'_>, n: usize) -> Result<Vec<f64>> {
    let bytes = cur.take(n.checked_mul(4).ok_or_else(|| Error::Truncated("value count overflows".into()))?)?;
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("parameter blob payload".into()));
    }
    Ok(values)
}

fn small(v: u32, what: &str) -> Result<usize> {
    if v == 0 || v > 1 << 24 {
        return Err(Error::Shape(format!("implausible {what} {v}")));
    }
    Ok(v as usize)
}

/// Serialise parameters and, optionally, fallback tables.
pub fn write_params_blob(params: &GraftLayerParams, fallback: Option<&FallbackTables>) -> Result<Vec<u8>> {
    let s = params.shape;
    let mut out = Vec::new();
    out.extend_from_slice(PARAMS_MAGIC);
    for v in [PARAMS_VERSION, s.mode.code()] {
        put_u32(&mut out, v);
    }
    for v in [s.d, s.d_mem, s.d_fallback, s.branches, s.ksize] {
        put_u32(&mut out, v as u32);
    }
    let groups = params.groups();
    put_u32(&mut out, groups.len() as u32);
    for g in groups {
        let values = params.group(g);
        let idx = ParamGroup::ALL.iter().position(|x| *x == g).expect("known group");
        put_u32(&mut out, idx as u32);
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        put_f32s(&mut out, &values, g.name())?;
    }
    match fallback {
        None => put_u32(&mut out, 0),
        Some(fb) => {
            put_u32(&mut out, 1);
            let scheme = fb.scheme();
            put_u32(&mut out, scheme.orders().len() as u32);
            for &n in scheme.orders() {
                put_u32(&mut out, n as u32);
            }
            put_u32(&mut out, scheme.heads() as u32);
            put_u32(&mut out, scheme.table_size());
            for &seed in scheme.seeds() {
                out.extend_from_slice(&seed.to_le_bytes());
            }
            put_u32(&mut out, fb.d_sub() as u32);
            for t in fb.tables() {
                put_f32s(&mut out, t.as_slice(), "fallback table")?;
            }
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

pub fn read_params_blob(bytes: &[u8]) -> Result<(GraftLayerParams, Option<FallbackTables>)> {
    if bytes.len() < 8 || &bytes[..8] != PARAMS_MAGIC {
        return Err(Error::BadMagic { expected: "GRFTLAYR" });
    }
    let mut cur = Cursor { bytes, pos: 8 };
    let version = cur.u32()?;
    if version != PARAMS_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: PARAMS_VERSION,
        });
    }
    if bytes.len() < 20 {
        return Err(Error::Truncated("parameter blob header".into()));
    }
    let body = &bytes[..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    let computed = fnv1a(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let mut cur = Cursor { bytes: body, pos: 12 };
    let mode = GraftMode::from_code(cur.u32()?)?;
    let shape = LayerShape {
        d: small(cur.u32()?, "D")?,
        d_mem: small(cur.u32()?, "D_mem")?,
        d_fallback: small(cur.u32()?, "d_fallback")?,
        branches: small(cur.u32()?, "branch count")?,
        ksize: small(cur.u32()?, "kernel size")?,
        mode,
    };
    let mut params = GraftLayerParams::zeros(shape)?;
    let expected = params.groups();
    let n_groups = cur.u32()? as usize;
    if n_groups != expected.len() {
        return Err(Error::Shape(format!(
            "blob has {n_groups} parameter groups, mode {mode} needs {}",
            expected.len()
        )));
    }
    for want in expected {
        let idx = cur.u32()? as usize;
        let g = *ParamGroup::ALL
            .get(idx)
            .ok_or_else(|| Error::Shape(format!("unknown parameter group {idx}")))?;
        if g != want {
            return Err(Error::Shape(format!("expected group {}, found {}", want.name(), g.name())));
        }
        let count = cur.u64()? as usize;
        let values = get_f32s(&mut cur, count)?;
        params.set_group(g, &values)?;
    }

    let fallback = match cur.u32()? {
        0 => None,
        1 => {
            let n_orders = small(cur.u32()?, "order count")?;
            let orders = (0..n_orders)
                .map(|_| cur.u32().map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            let heads = small(cur.u32()?, "head count")?;
            let table_size = cur.u32()?;
            let seeds = (0..n_orders * heads).map(|_| cur.u64()).collect::<Result<Vec<_>>>()?;
            let scheme = HashScheme::with_seeds(&orders, heads, table_size, seeds)?;
            let d_sub = small(cur.u32()?, "d_sub")?;
            let tables = (0..scheme.num_tables())
                .map(|_| {
                    let values = get_f32s(&mut cur, table_size as usize * d_sub)?;
                    Matrix::from_vec(table_size as usize, d_sub, values)
                })
                .collect::<Result<Vec<_>>>()?;
            Some(FallbackTables::from_tables(scheme, tables)?)
        }
        flag => return Err(Error::Shape(format!("bad fallback flag {flag}"))),
    };
    if cur.pos != body.len() {
        return Err(Error::Shape(format!(
            "{} trailing bytes after parameter blob payload",
            body.len() - cur.pos
        )));
    }
    Ok((params, fallback))
}

pub fn save_params_blob(path: &Path, params: &GraftLayerParams, fallback: Option<&FallbackTables>) -> Result<()> {
    let bytes = write_params_blob(params, fallback)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_params_blob(path: &Path) -> Result<(GraftLayerParams, Option<FallbackTables>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_params_blob(&bytes)
}
