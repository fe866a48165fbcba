//! Multi-head hashed n-gram embeddings used where the frozen bank misses.
//!
//! For each order `n` and head `k` the trailing n-gram is hashed with its own
//! seed into a table of `V'` rows; the retrieved rows are concatenated in
//! ascending order, then ascending head. Collisions are expected and shared.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{validate_orders, TokenSequence};
use crate::error::{Error, Result};
use crate::hash::{hash_ids, mix64};
use crate::numerics::Matrix;

/// Row used by an order whose n-gram does not fit in the available history.
pub const BOUNDARY_ROW: u32 = 0;

/// `hash_ids(seed, ids) mod table_size`.
#[inline]
pub fn hash_index(seed: u64, ids: &[u32], table_size: u32) -> u32 {
    (hash_ids(seed, ids) % u64::from(table_size)) as u32
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct HashScheme {
    orders: Vec<usize>,
    heads: usize,
    table_size: u32,
    /// One seed per (order, head), order-major.
    seeds: Vec<u64>,
}

impl HashScheme {
    /// Derive per-(order, head) seeds from `base_seed`.
    pub fn new(orders: &[usize], heads: usize, table_size: u32, base_seed: u64) -> Result<Self> {
        let mut seeds = Vec::with_capacity(orders.len() * heads);
        for &n in orders {
            for k in 0..heads {
                seeds.push(mix64(base_seed ^ mix64(((n as u64) << 32) | k as u64)));
            }
        }
        Self::with_seeds(orders, heads, table_size, seeds)
    }

    pub fn with_seeds(orders: &[usize], heads: usize, table_size: u32, seeds: Vec<u64>) -> Result<Self> {
        validate_orders(orders)?;
        let mut sorted = orders.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != orders {
            return Err(Error::Config("fallback orders must be strictly ascending".into()));
        }
        if heads == 0 || table_size == 0 {
            return Err(Error::Config("fallback heads and table size must be >= 1".into()));
        }
        if seeds.len() != orders.len() * heads {
            return Err(Error::Config(format!(
                "{} seeds for {} (order, head) pairs",
                seeds.len(),
                orders.len() * heads
            )));
        }
        let mut uniq = seeds.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != seeds.len() {
            return Err(Error::Config("fallback seeds must be distinct per (order, head)".into()));
        }
        Ok(HashScheme {
            orders: orders.to_vec(),
            heads,
            table_size,
            seeds,
        })
    }

    pub fn orders(&self) -> &[usize] {
        &self.orders
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn table_size(&self) -> u32 {
        self.table_size
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    /// Number of (order, head) tables.
    pub fn num_tables(&self) -> usize {
        self.seeds.len()
    }

    pub fn max_order(&self) -> usize {
        *self.orders.last().unwrap()
    }

    pub fn seed(&self, order_idx: usize, head: usize) -> u64 {
        self.seeds[order_idx * self.heads + head]
    }

    /// Row of table (`order_idx`, `head`) addressed by `ids`.
    pub fn hash_ngram(&self, ids: &[u32], order_idx: usize, head: usize) -> Result<u32> {
        let n = self.orders[order_idx];
        if ids.len() != n {
            return Err(Error::Shape(format!("hashing a {}-gram with an order-{n} head", ids.len())));
        }
        Ok(hash_index(self.seed(order_idx, head), ids, self.table_size))
    }

    /// Rows addressed at the end of `context`, one per (order, head).
    pub fn address(&self, context: &[u32], out: &mut Vec<u32>) {
        out.clear();
        let len = context.len();
        for (oi, &n) in self.orders.iter().enumerate() {
            for k in 0..self.heads {
                out.push(if len >= n {
                    hash_index(self.seed(oi, k), &context[len - n..], self.table_size)
                } else {
                    BOUNDARY_ROW
                });
            }
        }
    }

    /// Addresses for every position of `seq`, position-major.
    pub fn address_sequence(&self, seq: &TokenSequence) -> Vec<u32> {
        let per_doc: Vec<Vec<u32>> = (0..seq.num_docs())
            .into_par_iter()
            .map(|d| {
                let doc = &seq.ids()[seq.doc_range(d)];
                let mut out = Vec::with_capacity(doc.len() * self.num_tables());
                let mut buf = Vec::with_capacity(self.num_tables());
                for t in 0..doc.len() {
                    self.address(&doc[..=t], &mut buf);
                    out.extend_from_slice(&buf);
                }
                out
            })
            .collect();
        per_doc.concat()
    }
}

/// Trainable embedding tables, one `V' × d_sub` matrix per (order, head).
#[derive(Debug, Clone, PartialEq)]
pub struct FallbackTables {
    scheme: HashScheme,
    d_sub: usize,
    tables: Vec<Matrix>,
    generation: u64,
}

/// Rows read by one retrieval, checked against the tables' generation when
/// gradients are taken.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Addressing {
    pub generation: u64,
    /// One row per (order, head).
    pub rows: Vec<u32>,
}

/// Sparse table gradient keyed by (table, row).
pub type SparseGrad = BTreeMap<(usize, u32), Vec<f64>>;

impl FallbackTables {
    /// Tables initialised uniformly in `[-1/√d_sub, 1/√d_sub]`.
    pub fn new(scheme: HashScheme, d_fallback: usize, init_seed: u64) -> Result<Self> {
        let parts = scheme.num_tables();
        if d_fallback == 0 || !d_fallback.is_multiple_of(parts) {
            return Err(Error::Config(format!(
                "fallback dim {d_fallback} not divisible by |orders|·heads = {parts}"
            )));
        }
        let d_sub = d_fallback / parts;
        let bound = 1.0 / (d_sub as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let v = scheme.table_size as usize;
        let tables = (0..parts)
            .map(|_| Matrix::from_fn(v, d_sub, |_, _| rng.gen_range(-bound..=bound)))
            .collect();
        Ok(FallbackTables {
            scheme,
            d_sub,
            tables,
            generation: 0,
        })
    }

    /// Tables with explicit contents.
    pub fn from_tables(scheme: HashScheme, tables: Vec<Matrix>) -> Result<Self> {
        if tables.len() != scheme.num_tables() {
            return Err(Error::Shape(format!(
                "{} tables for {} (order, head) pairs",
                tables.len(),
                scheme.num_tables()
            )));
        }
        let d_sub = tables[0].cols();
        for t in &tables {
            if t.rows() != scheme.table_size as usize || t.cols() != d_sub {
                return Err(Error::Shape(format!(
                    "table is {}x{}, expected {}x{d_sub}",
                    t.rows(),
                    t.cols(),
                    scheme.table_size
                )));
            }
        }
        Ok(FallbackTables {
            scheme,
            d_sub,
            tables,
            generation: 0,
        })
    }

    pub fn scheme(&self) -> &HashScheme {
        &self.scheme
    }

    pub fn d_sub(&self) -> usize {
        self.d_sub
    }

    /// Width of the concatenated feature.
    pub fn dim(&self) -> usize {
        self.d_sub * self.tables.len()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn tables(&self) -> &[Matrix] {
        &self.tables
    }

    /// Concatenated feature for the end of `context`, plus the rows it read.
    pub fn retrieve(&self, context: &[u32]) -> (Vec<f64>, Addressing) {
        let mut rows = Vec::with_capacity(self.tables.len());
        self.scheme.address(context, &mut rows);
        let mut out = vec![0.0; self.dim()];
        self.gather(&rows, &mut out);
        (
            out,
            Addressing {
                generation: self.generation,
                rows,
            },
        )
    }

    pub(crate) fn gather(&self, rows: &[u32], out: &mut [f64]) {
        for (i, (&r, table)) in rows.iter().zip(&self.tables).enumerate() {
            out[i * self.d_sub..(i + 1) * self.d_sub].copy_from_slice(table.row(r as usize));
        }
    }

    /// Scatter upstream feature gradients onto the rows each retrieval read.
    /// Rows never addressed are absent from the result.
    pub fn grad<'a, I>(&self, items: I) -> Result<SparseGrad>
    where
        I: IntoIterator<Item = (&'a Addressing, &'a [f64])>,
    {
        let mut grad = SparseGrad::new();
        for (addr, upstream) in items {
            if addr.generation != self.generation {
                return Err(Error::StaleRecord {
                    record: addr.generation,
                    tables: self.generation,
                });
            }
            if upstream.len() != self.dim() || addr.rows.len() != self.tables.len() {
                return Err(Error::Shape(format!(
                    "upstream gradient has {} values, expected {}",
                    upstream.len(),
                    self.dim()
                )));
            }
            for (i, &r) in addr.rows.iter().enumerate() {
                let g = grad.entry((i, r)).or_insert_with(|| vec![0.0; self.d_sub]);
                for (gd, u) in g.iter_mut().zip(&upstream[i * self.d_sub..(i + 1) * self.d_sub]) {
                    *gd += u;
                }
            }
        }
        Ok(grad)
    }

    /// `row -= lr · grad` for every entry. Bumps the generation, which makes
    /// earlier addressing records stale.
    pub fn apply_grad(&mut self, grad: &SparseGrad, lr: f64) {
        for (&(t, r), g) in grad {
            let row = self.tables[t].row_mut(r as usize);
            for (w, gd) in row.iter_mut().zip(g) {
                *w -= lr * gd;
            }
        }
        self.generation += 1;
    }

    /// Mutable access to raw table values, for checkpoint loading and
    /// finite-difference probes. Bumps the generation.
    pub fn tables_mut(&mut self) -> &mut [Matrix] {
        self.generation += 1;
        &mut self.tables
    }
}
