//! Frozen n-gram memory banks.
//!
//! A bank stores one row per n-gram key. Keys are grouped by order and kept
//! sorted within each order; the row index of a key is its position in that
//! concatenated, order-ascending key list. Lookups probe the longest
//! available suffix first and stop at the first exact hit, so the cost per
//! token is bounded by the number of stored orders.

mod format;
mod index;
pub mod provider;
pub mod storage;

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;

use crate::corpus::{NgramKey, TokenSequence, MAX_ORDER};
use crate::error::{Error, Result};
use crate::hash::Fnv1a;

pub use format::{read_bank, write_bank, BANK_MAGIC, BANK_VERSION};
pub use provider::{EmbeddingProvider, FileProvider, FnProvider, SyntheticProvider};
pub use storage::StorageDtype;

use index::KeyIndex;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BankMeta {
    pub provider: String,
    /// Which layer of the grafting model the rows were taken from.
    pub source_layer: String,
    /// FNV-1a over the key and row sections.
    pub creation_hash: u64,
    /// Effective run configuration, echoed verbatim.
    pub config: Vec<(String, String)>,
}

impl BankMeta {
    pub(crate) fn to_text(&self) -> String {
        let mut s = format!(
            "provider={}\nsource_layer={}\ncreation_hash={:#018x}\n",
            self.provider, self.source_layer, self.creation_hash
        );
        for (k, v) in &self.config {
            s.push_str(&format!("config.{k}={v}\n"));
        }
        s
    }

    pub(crate) fn from_text(text: &str) -> Result<Self> {
        let mut meta = BankMeta::default();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad bank metadata line {line:?}")))?;
            match k {
                "provider" => meta.provider = v.to_string(),
                "source_layer" => meta.source_layer = v.to_string(),
                "creation_hash" => {
                    meta.creation_hash = u64::from_str_radix(v.trim_start_matches("0x"), 16)
                        .map_err(|_| Error::Config(format!("bad creation hash {v:?}")))?
                }
                _ => match k.strip_prefix("config.") {
                    Some(key) => meta.config.push((key.to_string(), v.to_string())),
                    None => return Err(Error::Config(format!("unknown bank metadata key {k:?}"))),
                },
            }
        }
        Ok(meta)
    }
}

#[derive(Debug, Clone)]
struct OrderTable {
    order: usize,
    /// Flat, lexicographically sorted `count × order` ids.
    keys: Vec<u32>,
    /// Row index of this order's first key.
    base: u32,
    index: KeyIndex,
}

impl OrderTable {
    fn new(order: usize, keys: Vec<u32>, base: u32) -> Self {
        let index = KeyIndex::build(order, &keys);
        OrderTable {
            order,
            keys,
            base,
            index,
        }
    }

    fn count(&self) -> usize {
        self.keys.len() / self.order
    }
}

/// A matched bank row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BankMatch {
    pub row: u32,
    pub order: u8,
}

/// Outcome of one exact lookup. A miss carries neither row nor order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct LookupResult(pub Option<BankMatch>);

impl LookupResult {
    pub const MISS: LookupResult = LookupResult(None);

    pub fn hit(&self) -> bool {
        self.0.is_some()
    }

    pub fn row(&self) -> Option<usize> {
        self.0.map(|m| m.row as usize)
    }

    pub fn matched_order(&self) -> Option<usize> {
        self.0.map(|m| m.order as usize)
    }
}

impl fmt::Display for LookupResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(m) => write!(f, "hit row={} order={}", m.row, m.order),
            None => f.write_str("miss"),
        }
    }
}

/// Frozen key → row table. There is no API that mutates rows or keys after
/// construction.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    d_mem: usize,
    dtype: StorageDtype,
    tables: Vec<OrderTable>,
    by_order: [Option<u8>; MAX_ORDER + 1],
    rows: Vec<u16>,
    meta: BankMeta,
}

impl MemoryBank {
    fn assemble(
        d_mem: usize,
        dtype: StorageDtype,
        per_order: Vec<(usize, Vec<u32>)>,
        rows: Vec<u16>,
        meta: BankMeta,
    ) -> Self {
        let mut tables = Vec::with_capacity(per_order.len());
        let mut by_order = [None; MAX_ORDER + 1];
        let mut base = 0u32;
        for (order, keys) in per_order {
            let t = OrderTable::new(order, keys, base);
            base += t.count() as u32;
            by_order[order] = Some(tables.len() as u8);
            tables.push(t);
        }
        MemoryBank {
            d_mem,
            dtype,
            tables,
            by_order,
            rows,
            meta,
        }
    }

    pub fn d_mem(&self) -> usize {
        self.d_mem
    }

    pub fn dtype(&self) -> StorageDtype {
        self.dtype
    }

    pub fn meta(&self) -> &BankMeta {
        &self.meta
    }

    /// Total number of rows `M`.
    pub fn len(&self) -> usize {
        self.tables.iter().map(OrderTable::count).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stored orders, ascending.
    pub fn orders(&self) -> Vec<usize> {
        self.tables.iter().map(|t| t.order).collect()
    }

    pub fn max_order(&self) -> usize {
        self.tables.last().map_or(0, |t| t.order)
    }

    pub fn count_for_order(&self, order: usize) -> usize {
        self.table(order).map_or(0, OrderTable::count)
    }

    fn table(&self, order: usize) -> Option<&OrderTable> {
        self.by_order
            .get(order)
            .copied()
            .flatten()
            .map(|i| &self.tables[i as usize])
    }

    /// Keys of one order in row order.
    pub fn keys(&self, order: usize) -> impl Iterator<Item = NgramKey> + '_ {
        self.table(order)
            .into_iter()
            .flat_map(move |t| t.keys.chunks_exact(order).map(NgramKey::from_slice_unchecked))
    }

    pub fn key_of_row(&self, row: usize) -> Option<NgramKey> {
        self.tables.iter().find_map(|t| {
            let r = row.checked_sub(t.base as usize)?;
            (r < t.count()).then(|| NgramKey::from_slice_unchecked(&t.keys[r * t.order..(r + 1) * t.order]))
        })
    }

    pub fn row_of_key(&self, key: &NgramKey) -> Option<usize> {
        let t = self.table(key.order())?;
        t.index.find(key.ids(), &t.keys).map(|r| (t.base + r) as usize)
    }

    /// Raw stored bits of one row.
    pub fn row_bits(&self, row: usize) -> &[u16] {
        &self.rows[row * self.d_mem..(row + 1) * self.d_mem]
    }

    pub fn row_into(&self, row: usize, out: &mut [f64]) {
        for (o, &b) in out.iter_mut().zip(self.row_bits(row)) {
            *o = self.dtype.decode(b);
        }
    }

    pub fn row(&self, row: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.d_mem];
        self.row_into(row, &mut v);
        v
    }

    /// Longest-match lookup for the suffix of `context`, which must be the
    /// in-document history ending at the current token. Contexts shorter than
    /// two tokens always miss.
    #[inline]
    pub fn exact_lookup(&self, context: &[u32]) -> LookupResult {
        let len = context.len();
        if len < 2 {
            return LookupResult::MISS;
        }
        for t in self.tables.iter().rev() {
            if t.order > len {
                continue;
            }
            if let Some(rank) = t.index.find(&context[len - t.order..], &t.keys) {
                return LookupResult(Some(BankMatch {
                    row: t.base + rank,
                    order: t.order as u8,
                }));
            }
        }
        LookupResult::MISS
    }

    /// Every stored suffix of `context`, longest first.
    pub fn all_matches(&self, context: &[u32]) -> Vec<BankMatch> {
        let len = context.len();
        if len < 2 {
            return Vec::new();
        }
        self.tables
            .iter()
            .rev()
            .filter(|t| t.order <= len)
            .filter_map(|t| {
                t.index.find(&context[len - t.order..], &t.keys).map(|rank| BankMatch {
                    row: t.base + rank,
                    order: t.order as u8,
                })
            })
            .collect()
    }

    /// [`exact_lookup`](Self::exact_lookup) at every position of `seq`,
    /// never reading across document boundaries.
    pub fn batch_lookup(&self, seq: &TokenSequence) -> Vec<LookupResult> {
        let mut out = Vec::with_capacity(seq.len());
        for d in 0..seq.num_docs() {
            let doc = &seq.ids()[seq.doc_range(d)];
            self.lookup_doc(doc, &mut out);
        }
        out
    }

    /// Looks up one document in blocks: the first pass hashes every probe in
    /// the block and issues cache hints for its slot, the second resolves the
    /// probes longest order first.
    fn lookup_doc(&self, doc: &[u32], out: &mut Vec<LookupResult>) {
        const BLOCK: usize = 16;
        let nt = self.tables.len();
        let mut slots = vec![(0u64, 0usize); BLOCK * nt];
        let mut start = 0;
        while start < doc.len() {
            let end = (start + BLOCK).min(doc.len());
            for t in start..end {
                let len = t + 1;
                for (i, table) in self.tables.iter().enumerate() {
                    if table.order <= len {
                        let s = table.index.slot_for(&doc[len - table.order..len]);
                        table.index.prefetch(s.1);
                        slots[(t - start) * nt + i] = s;
                    }
                }
            }
            for t in start..end {
                let len = t + 1;
                let mut result = LookupResult::MISS;
                if len >= 2 {
                    for (i, table) in self.tables.iter().enumerate().rev() {
                        if table.order > len {
                            continue;
                        }
                        let (tag, pos) = slots[(t - start) * nt + i];
                        if let Some(rank) = table.index.find_from(tag, pos, &doc[len - table.order..len], &table.keys) {
                            result = LookupResult(Some(BankMatch {
                                row: table.base + rank,
                                order: table.order as u8,
                            }));
                            break;
                        }
                    }
                }
                out.push(result);
            }
            start = end;
        }
    }

    /// Approximate resident size of the in-memory key index.
    pub fn index_memory_bytes(&self) -> usize {
        self.tables.iter().map(|t| t.index.memory_bytes()).sum()
    }
}

/// Build a frozen bank. Row `j` is the provider's vector for key `j`, encoded
/// at `dtype`.
pub fn build_bank(
    keys: &[NgramKey],
    provider: &dyn EmbeddingProvider,
    dtype: StorageDtype,
    source_layer: &str,
    config: Vec<(String, String)>,
) -> Result<MemoryBank> {
    let d_mem = provider.dim();
    if d_mem == 0 {
        return Err(Error::Config("D_mem must be >= 1".into()));
    }
    let mut grouped: BTreeMap<usize, Vec<NgramKey>> = BTreeMap::new();
    for k in keys {
        grouped.entry(k.order()).or_default().push(*k);
    }
    let mut sorted_keys = Vec::with_capacity(keys.len());
    let mut per_order = Vec::with_capacity(grouped.len());
    for (order, mut ks) in grouped {
        ks.sort_unstable();
        if let Some(w) = ks.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicateKey(w[0].to_string()));
        }
        let mut flat = Vec::with_capacity(ks.len() * order);
        for k in &ks {
            flat.extend_from_slice(k.ids());
        }
        sorted_keys.extend(ks);
        per_order.push((order, flat));
    }
    if sorted_keys.len() >= u32::MAX as usize {
        return Err(Error::Config("bank exceeds 2^32-1 rows".into()));
    }

    let mut rows = vec![0u16; sorted_keys.len() * d_mem];
    rows.par_chunks_mut(d_mem.max(1))
        .zip(sorted_keys.par_iter())
        .try_for_each_init(
            || vec![0.0f64; d_mem],
            |buf, (dst, key)| -> Result<()> {
                provider.embed(key, buf)?;
                if buf.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("provider vector for key {key}")));
                }
                for (d, &v) in dst.iter_mut().zip(buf.iter()) {
                    *d = dtype.encode(v);
                }
                Ok(())
            },
        )?;

    let mut meta = BankMeta {
        provider: provider.id(),
        source_layer: source_layer.to_string(),
        creation_hash: 0,
        config,
    };
    meta.creation_hash = content_hash(&per_order, &rows);
    Ok(MemoryBank::assemble(d_mem, dtype, per_order, rows, meta))
}

fn content_hash(per_order: &[(usize, Vec<u32>)], rows: &[u16]) -> u64 {
    let mut h = Fnv1a::default();
    for (order, keys) in per_order {
        h.update(&(*order as u32).to_le_bytes());
        for id in keys {
            h.update(&id.to_le_bytes());
        }
    }
    for r in rows {
        h.update(&r.to_le_bytes());
    }
    h.finish()
}

/// Sizes of a bank and of its serialized file.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct BankStats {
    pub entries: u64,
    pub per_order: Vec<(usize, u64)>,
    pub d_mem: usize,
    pub dtype: String,
    pub row_bytes: u64,
    /// Serialized key section.
    pub key_bytes: u64,
    /// Fixed header, order table, metadata, and checksum.
    pub header_bytes: u64,
    pub total_bytes: u64,
}

impl BankStats {
    /// Sizes for a bank with the given shape, without materializing it.
    pub fn plan(per_order: &[(usize, u64)], d_mem: usize, dtype: StorageDtype, meta_len: usize) -> Self {
        let entries: u64 = per_order.iter().map(|(_, c)| c).sum();
        let row_bytes = entries * d_mem as u64 * dtype.size_bytes() as u64;
        let key_bytes: u64 = per_order.iter().map(|&(n, c)| 4 * n as u64 * c).sum();
        let header_bytes = format::header_len(per_order.len(), meta_len) as u64 + 8;
        BankStats {
            entries,
            per_order: per_order.to_vec(),
            d_mem,
            dtype: dtype.name().to_string(),
            row_bytes,
            key_bytes,
            header_bytes,
            total_bytes: row_bytes + key_bytes + header_bytes,
        }
    }
}

pub fn bank_stats(bank: &MemoryBank) -> BankStats {
    let per_order: Vec<(usize, u64)> = bank
        .tables
        .iter()
        .map(|t| (t.order, t.count() as u64))
        .collect();
    BankStats::plan(&per_order, bank.d_mem, bank.dtype, bank.meta.to_text().len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn key(ids: &[u32]) -> NgramKey {
        NgramKey::new(ids).unwrap()
    }

    fn small_bank(keys: &[NgramKey]) -> MemoryBank {
        build_bank(keys, &SyntheticProvider::new(1, 4), StorageDtype::Bf16, "test", vec![]).unwrap()
    }

    #[test]
    fn longest_match_examples() {
        // Sorted order puts the bigram at row 0 and the trigram at row 1.
        let bank = small_bank(&[key(&[3, 5, 7]), key(&[5, 7])]);
        let r = bank.exact_lookup(&[1, 3, 5, 7]);
        assert_eq!((r.row(), r.matched_order()), (Some(1), Some(3)));
        let r = bank.exact_lookup(&[9, 5, 7]);
        assert_eq!((r.row(), r.matched_order()), (Some(0), Some(2)));
        assert!(!bank.exact_lookup(&[9, 9, 7]).hit());
        assert!(!bank.exact_lookup(&[7]).hit());
    }

    #[test]
    fn batch_lookup_examples() {
        let bank = small_bank(&[key(&[5, 7]), key(&[3, 5, 7])]);
        let seq = TokenSequence::single(vec![3, 5, 7]);
        let got = bank.batch_lookup(&seq);
        assert_eq!(got[0], LookupResult::MISS);
        assert_eq!(got[1], LookupResult::MISS);
        assert_eq!(got[2].row(), Some(1));

        let empty = small_bank(&[]);
        assert!(empty.batch_lookup(&seq).iter().all(|r| !r.hit()));

        // Boundary: (7, 3) spans two documents and must never be probed.
        let bank = small_bank(&[key(&[7, 3])]);
        let seq = TokenSequence::from_docs([vec![5, 7], vec![3, 1]]).unwrap();
        assert!(bank.batch_lookup(&seq).iter().all(|r| !r.hit()));
    }

    #[test]
    fn full_bigram_coverage_hits_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let docs: Vec<Vec<u32>> = (0..20)
            .map(|_| (0..rng.gen_range(2..30)).map(|_| rng.gen_range(0..15)).collect())
            .collect();
        let seq = TokenSequence::from_docs(docs).unwrap();
        let counts = crate::corpus::count_ngrams(&seq, &[2]).unwrap();
        let keys: Vec<NgramKey> = counts.order(2).unwrap().keys().copied().collect();
        let bank = small_bank(&keys);
        let res = bank.batch_lookup(&seq);
        for d in 0..seq.num_docs() {
            let r = seq.doc_range(d);
            assert!(!res[r.start].hit());
            assert!(res[r.start + 1..r.end].iter().all(LookupResult::hit));
        }
    }

    #[test]
    fn build_rejects_duplicates_and_reports_missing_keys() {
        assert!(matches!(
            build_bank(&[key(&[1, 2]), key(&[1, 2])], &SyntheticProvider::new(1, 4), StorageDtype::Bf16, "", vec![]),
            Err(Error::DuplicateKey(_))
        ));
        let mut buf = Vec::new();
        provider::write_provider_file(&mut buf, 2, &[(key(&[1, 2]), vec![1.0, 2.0])]).unwrap();
        let fp = FileProvider::parse(&buf).unwrap();
        match build_bank(&[key(&[1, 2]), key(&[3, 4])], &fp, StorageDtype::F16, "", vec![]) {
            Err(Error::MissingKey(k)) => assert_eq!(k, "3 4"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn synthetic_builds_are_deterministic() {
        let keys: Vec<NgramKey> = (0..200u32).map(|i| key(&[i, i + 1, i % 7])).collect();
        let a = small_bank(&keys);
        let b = small_bank(&keys);
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.meta, b.meta);
    }

    #[test]
    fn key_row_bijection() {
        let keys: Vec<NgramKey> = (0..50u32)
            .map(|i| key(&[i, 2 * i]))
            .chain((0..30u32).map(|i| key(&[i, i, i, 1])))
            .collect();
        let bank = small_bank(&keys);
        assert_eq!(bank.len(), 80);
        for j in 0..bank.len() {
            let k = bank.key_of_row(j).unwrap();
            assert_eq!(bank.row_of_key(&k), Some(j));
        }
        assert_eq!(bank.key_of_row(80), None);
    }

    #[test]
    fn stats_examples() {
        let per_order = [(2, 1_000_000), (3, 1_000_000), (4, 1_000_000)];
        let s = BankStats::plan(&per_order, 2048, StorageDtype::Bf16, 0);
        assert_eq!(s.entries, 3_000_000);
        assert_eq!(s.row_bytes, 12_288_000_000);

        let empty = bank_stats(&small_bank(&[]));
        assert_eq!(empty.entries, 0);

        let one = build_bank(&[key(&[1, 2])], &SyntheticProvider::new(1, 4), StorageDtype::F16, "", vec![]).unwrap();
        let s = bank_stats(&one);
        assert_eq!(s.row_bytes, 8);
        assert_eq!(s.key_bytes, 8);
    }

    #[test]
    fn meta_text_roundtrip() {
        let meta = BankMeta {
            provider: "synthetic:3".into(),
            source_layer: "8".into(),
            creation_hash: 0xdead_beef,
            config: vec![("d_mem".into(), "64".into())],
        };
        assert_eq!(BankMeta::from_text(&meta.to_text()).unwrap(), meta);
    }
}
