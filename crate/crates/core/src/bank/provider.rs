//! Sources of memory-row vectors.
//!
//! A provider maps a recipient-side n-gram key to a `D_mem` vector. Keys are
//! always recipient token ids; how a provider derives the vector (another
//! tokenizer, another model) is invisible to lookup.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::corpus::{NgramKey, MAX_ORDER};
use crate::error::{Error, Result};
use crate::hash::{hash_ids, mix64};

pub const PROVIDER_MAGIC: &[u8; 8] = b"GRFTPROV";

pub trait EmbeddingProvider: Sync {
    /// Output dimension `D_mem`.
    fn dim(&self) -> usize;

    /// Stable identifier recorded in bank metadata.
    fn id(&self) -> String;

    /// Must be deterministic: the same key always yields the same vector.
    fn embed(&self, key: &NgramKey, out: &mut [f64]) -> Result<()>;
}

/// Seeded Gaussian rows scaled to norm `√D_mem`.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    seed: u64,
    dim: usize,
}

impl SyntheticProvider {
    pub fn new(seed: u64, dim: usize) -> Self {
        SyntheticProvider { seed, dim }
    }
}

impl EmbeddingProvider for SyntheticProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn id(&self) -> String {
        format!("synthetic:{}", self.seed)
    }

    fn embed(&self, key: &NgramKey, out: &mut [f64]) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(hash_ids(mix64(self.seed), key.ids()));
        for o in out.iter_mut() {
            *o = StandardNormal.sample(&mut rng);
        }
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = (self.dim as f64).sqrt() / norm;
        out.iter_mut().for_each(|v| *v *= scale);
        Ok(())
    }
}

/// Vectors imported from a provider file.
///
/// Layout (little-endian): `"GRFTPROV"`, `u64 count`, `u32 D_mem`, then
/// `count` records of `u32 order`, `order × u32 ids`, `D_mem × f32`.
#[derive(Debug, Clone)]
pub struct FileProvider {
    label: String,
    dim: usize,
    vectors: HashMap<NgramKey, Vec<f32>>,
}

impl FileProvider {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut p = Self::parse(&bytes)?;
        p.label = format!("file:{}", path.display());
        Ok(p)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != PROVIDER_MAGIC {
            return Err(Error::BadMagic { expected: "GRFTPROV" });
        }
        let count = cur.u64()?;
        let dim = cur.u32()? as usize;
        if dim == 0 {
            return Err(Error::Config("provider file declares D_mem = 0".into()));
        }
        let mut vectors = HashMap::with_capacity(count.min(1 << 24) as usize);
        for _ in 0..count {
            let at = cur.pos;
            let order = cur.u32()? as usize;
            if !(2..=MAX_ORDER).contains(&order) {
                return Err(Error::Parse {
                    offset: at as u64,
                    msg: format!("record order {order} outside 2..={MAX_ORDER}"),
                });
            }
            let mut ids = [0u32; MAX_ORDER];
            for id in ids.iter_mut().take(order) {
                *id = cur.u32()?;
            }
            let key = NgramKey::new(&ids[..order])?;
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                let x = f32::from_le_bytes(cur.take(4)?.try_into().unwrap());
                if !x.is_finite() {
                    return Err(Error::NonFinite(format!("provider vector for key {key}")));
                }
                v.push(x);
            }
            if vectors.insert(key, v).is_some() {
                return Err(Error::DuplicateKey(key.to_string()));
            }
        }
        if cur.pos != bytes.len() {
            return Err(Error::Parse {
                offset: cur.pos as u64,
                msg: "trailing bytes after last record".into(),
            });
        }
        Ok(FileProvider {
            label: "file:<memory>".into(),
            dim,
            vectors,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Every key with a vector, sorted.
    pub fn keys(&self) -> Vec<NgramKey> {
        let mut keys: Vec<NgramKey> = self.vectors.keys().copied().collect();
        keys.sort_unstable();
        keys
    }
}

impl EmbeddingProvider for FileProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn id(&self) -> String {
        self.label.clone()
    }

    fn embed(&self, key: &NgramKey, out: &mut [f64]) -> Result<()> {
        let v = self
            .vectors
            .get(key)
            .ok_or_else(|| Error::MissingKey(key.to_string()))?;
        for (o, &x) in out.iter_mut().zip(v) {
            *o = f64::from(x);
        }
        Ok(())
    }
}

/// Serialize records in the provider file layout.
pub fn write_provider_file<W: Write>(mut w: W, dim: usize, records: &[(NgramKey, Vec<f32>)]) -> Result<()> {
    let io = |e| Error::io("<provider>", e);
    w.write_all(PROVIDER_MAGIC).map_err(io)?;
    w.write_all(&(records.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(dim as u32).to_le_bytes()).map_err(io)?;
    for (key, v) in records {
        if v.len() != dim {
            return Err(Error::Shape(format!("vector for {key} has {} dims, expected {dim}", v.len())));
        }
        w.write_all(&(key.order() as u32).to_le_bytes()).map_err(io)?;
        for id in key.ids() {
            w.write_all(&id.to_le_bytes()).map_err(io)?;
        }
        for x in v {
            w.write_all(&x.to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

/// Wraps a closure as a provider. Handy for hand-built geometries.
pub struct FnProvider<F> {
    dim: usize,
    label: String,
    f: F,
}

impl<F> FnProvider<F>
where
    F: Fn(&NgramKey, &mut [f64]) -> Result<()> + Sync,
{
    pub fn new(label: impl Into<String>, dim: usize, f: F) -> Self {
        FnProvider {
            dim,
            label: label.into(),
            f,
        }
    }
}

impl<F> EmbeddingProvider for FnProvider<F>
where
    F: Fn(&NgramKey, &mut [f64]) -> Result<()> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn id(&self) -> String {
        self.label.clone()
    }

    fn embed(&self, key: &NgramKey, out: &mut [f64]) -> Result<()> {
        (self.f)(key, out)
    }
}

pub(crate) struct Cursor<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Truncated(format!(
                "needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
