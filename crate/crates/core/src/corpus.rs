//! Corpus ingestion, vocabulary compression, and suffix n-gram counting.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Largest n-gram order any key may have.
pub const MAX_ORDER: usize = 8;

/// Token ids plus document boundaries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
    doc_starts: Vec<usize>,
}

impl TokenSequence {
    /// Build from per-document id lists. Empty documents are rejected.
    pub fn from_docs<I, D>(docs: I) -> Result<Self>
    where
        I: IntoIterator<Item = D>,
        D: AsRef<[u32]>,
    {
        let mut ids = Vec::new();
        let mut doc_starts = Vec::new();
        for (i, doc) in docs.into_iter().enumerate() {
            let doc = doc.as_ref();
            if doc.is_empty() {
                return Err(Error::Config(format!("document {i} is empty")));
            }
            doc_starts.push(ids.len());
            ids.extend_from_slice(doc);
        }
        Ok(TokenSequence { ids, doc_starts })
    }

    /// A single document.
    pub fn single(ids: Vec<u32>) -> Self {
        let doc_starts = if ids.is_empty() { vec![] } else { vec![0] };
        TokenSequence { ids, doc_starts }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn doc_starts(&self) -> &[usize] {
        &self.doc_starts
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_docs(&self) -> usize {
        self.doc_starts.len()
    }

    pub fn doc_range(&self, d: usize) -> std::ops::Range<usize> {
        let end = self.doc_starts.get(d + 1).copied().unwrap_or(self.ids.len());
        self.doc_starts[d]..end
    }

    pub fn docs(&self) -> impl Iterator<Item = &[u32]> + '_ {
        (0..self.num_docs()).map(move |d| &self.ids[self.doc_range(d)])
    }

    /// First index of the document containing `pos`.
    pub fn doc_start_of(&self, pos: usize) -> usize {
        match self.doc_starts.binary_search(&pos) {
            Ok(i) => self.doc_starts[i],
            Err(i) => self.doc_starts[i - 1],
        }
    }

    /// The in-document history ending at `pos` (inclusive).
    pub fn context(&self, pos: usize) -> &[u32] {
        &self.ids[self.doc_start_of(pos)..=pos]
    }

    /// Rejects any id `>= vocab_size`.
    pub fn validate_vocab(&self, vocab_size: u32) -> Result<()> {
        match self.ids.iter().position(|&id| id >= vocab_size) {
            Some(i) => Err(Error::Parse {
                offset: i as u64,
                msg: format!("token id {} >= vocab size {vocab_size} (token index {i})", self.ids[i]),
            }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    /// Whitespace-separated decimal ids, one document per line.
    TextInt,
    /// `u32 doc_count`, `doc_count × u32 length`, then the id stream; all
    /// little-endian.
    BinaryU32,
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" | "text-int" => Ok(CorpusFormat::TextInt),
            "bin" | "binary-u32" => Ok(CorpusFormat::BinaryU32),
            other => Err(Error::Config(format!("unknown corpus format {other:?}"))),
        }
    }
}

pub fn ingest_corpus(path: &Path, format: CorpusFormat, vocab_size: u32) -> Result<TokenSequence> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        CorpusFormat::TextInt => parse_text_corpus(&bytes, vocab_size),
        CorpusFormat::BinaryU32 => parse_binary_corpus(&bytes, vocab_size),
    }
}

pub fn parse_text_corpus(bytes: &[u8], vocab_size: u32) -> Result<TokenSequence> {
    let mut ids = Vec::new();
    let mut doc_starts = Vec::new();
    let mut offset = 0usize;
    for line in bytes.split(|&b| b == b'\n') {
        let line_start = offset;
        offset += line.len() + 1;
        let mut doc_len = 0usize;
        let mut pos = 0usize;
        while pos < line.len() {
            if line[pos].is_ascii_whitespace() {
                pos += 1;
                continue;
            }
            let tok_start = pos;
            while pos < line.len() && !line[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let tok = &line[tok_start..pos];
            let at = (line_start + tok_start) as u64;
            let id = std::str::from_utf8(tok)
                .ok()
                .and_then(|s| s.parse::<u32>().ok())
                .ok_or_else(|| Error::Parse {
                    offset: at,
                    msg: format!("malformed integer {:?}", String::from_utf8_lossy(tok)),
                })?;
            if id >= vocab_size {
                return Err(Error::Parse {
                    offset: at,
                    msg: format!("token id {id} >= vocab size {vocab_size}"),
                });
            }
            if doc_len == 0 {
                doc_starts.push(ids.len());
            }
            ids.push(id);
            doc_len += 1;
        }
    }
    if ids.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(TokenSequence { ids, doc_starts })
}

pub fn parse_binary_corpus(bytes: &[u8], vocab_size: u32) -> Result<TokenSequence> {
    if bytes.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let word = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::Parse {
                offset: off as u64,
                msg: "truncated u32".into(),
            })
    };
    let n_docs = word(0)? as usize;
    if n_docs == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut lens = Vec::with_capacity(n_docs.min(1 << 20));
    let mut total = 0usize;
    for d in 0..n_docs {
        let off = 4 + 4 * d;
        let len = word(off)? as usize;
        if len == 0 {
            return Err(Error::Parse {
                offset: off as u64,
                msg: format!("document {d} has zero length"),
            });
        }
        total += len;
        lens.push(len);
    }
    let body = 4 + 4 * n_docs;
    let expected = body + 4 * total;
    if bytes.len() != expected {
        return Err(Error::Parse {
            offset: bytes.len().min(expected) as u64,
            msg: format!("expected {expected} bytes from preamble, file has {}", bytes.len()),
        });
    }
    let mut ids = Vec::with_capacity(total);
    for (i, chunk) in bytes[body..].chunks_exact(4).enumerate() {
        let id = u32::from_le_bytes(chunk.try_into().unwrap());
        if id >= vocab_size {
            return Err(Error::Parse {
                offset: (body + 4 * i) as u64,
                msg: format!("token id {id} >= vocab size {vocab_size}"),
            });
        }
        ids.push(id);
    }
    let mut doc_starts = Vec::with_capacity(n_docs);
    let mut at = 0;
    for len in lens {
        doc_starts.push(at);
        at += len;
    }
    Ok(TokenSequence { ids, doc_starts })
}

pub fn encode_binary_corpus(seq: &TokenSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * (seq.num_docs() + seq.len()));
    out.extend_from_slice(&(seq.num_docs() as u32).to_le_bytes());
    for d in 0..seq.num_docs() {
        out.extend_from_slice(&(seq.doc_range(d).len() as u32).to_le_bytes());
    }
    for id in seq.ids() {
        out.extend_from_slice(&id.to_le_bytes());
    }
    out
}

/// Canonicalizing map over token ids. Ids not listed map to themselves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressionMap {
    table: Vec<u32>,
}

impl CompressionMap {
    pub fn identity(vocab_size: u32) -> Self {
        CompressionMap {
            table: (0..vocab_size).collect(),
        }
    }

    /// Build from explicit `from → to` pairs; rejects maps that are not
    /// idempotent.
    pub fn from_pairs(vocab_size: u32, pairs: &[(u32, u32)]) -> Result<Self> {
        let mut table: Vec<u32> = (0..vocab_size).collect();
        for &(from, to) in pairs {
            if from >= vocab_size || to >= vocab_size {
                return Err(Error::Config(format!(
                    "compression pair {from} -> {to} outside vocab {vocab_size}"
                )));
            }
            table[from as usize] = to;
        }
        for (x, &px) in table.iter().enumerate() {
            if table[px as usize] != px {
                return Err(Error::Config(format!(
                    "compression map is not idempotent at {x}: {x} -> {px} -> {}",
                    table[px as usize]
                )));
            }
        }
        Ok(CompressionMap { table })
    }

    /// Two-column decimal text, `from to` per line. `#` starts a comment.
    pub fn load(path: &Path, vocab_size: u32) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = Vec::new();
        let mut offset = 0u64;
        for line in text.lines() {
            let at = offset;
            offset += line.len() as u64 + 1;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let mut cols = body.split_whitespace();
            let parse = |s: Option<&str>| s.and_then(|v| v.parse::<u32>().ok());
            match (parse(cols.next()), parse(cols.next()), cols.next()) {
                (Some(a), Some(b), None) => pairs.push((a, b)),
                _ => {
                    return Err(Error::Parse {
                        offset: at,
                        msg: format!("expected `from to`, got {body:?}"),
                    })
                }
            }
        }
        Self::from_pairs(vocab_size, &pairs)
    }

    pub fn vocab_size(&self) -> u32 {
        self.table.len() as u32
    }

    #[inline]
    pub fn apply(&self, id: u32) -> u32 {
        self.table.get(id as usize).copied().unwrap_or(id)
    }
}

/// Apply `map` to every id. Document boundaries are preserved.
pub fn compress(seq: &TokenSequence, map: &CompressionMap) -> TokenSequence {
    TokenSequence {
        ids: seq.ids.iter().map(|&id| map.apply(id)).collect(),
        doc_starts: seq.doc_starts.clone(),
    }
}

/// A compressed n-gram. Stored inline; order is the tuple length.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct NgramKey {
    len: u8,
    ids: [u32; MAX_ORDER],
}

impl NgramKey {
    pub fn new(ids: &[u32]) -> Result<Self> {
        if ids.len() < 2 || ids.len() > MAX_ORDER {
            return Err(Error::Config(format!(
                "n-gram order {} outside 2..={MAX_ORDER}",
                ids.len()
            )));
        }
        Ok(Self::from_slice_unchecked(ids))
    }

    #[inline]
    pub(crate) fn from_slice_unchecked(ids: &[u32]) -> Self {
        let mut buf = [0u32; MAX_ORDER];
        buf[..ids.len()].copy_from_slice(ids);
        NgramKey {
            len: ids.len() as u8,
            ids: buf,
        }
    }

    #[inline]
    pub fn order(&self) -> usize {
        self.len as usize
    }

    #[inline]
    pub fn ids(&self) -> &[u32] {
        &self.ids[..self.len as usize]
    }
}

impl Ord for NgramKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.len.cmp(&other.len).then_with(|| self.ids().cmp(other.ids()))
    }
}

impl PartialOrd for NgramKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Debug for NgramKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.ids())
    }
}

impl fmt::Display for NgramKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, id) in self.ids().iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{id}")?;
        }
        Ok(())
    }
}

pub fn validate_orders(orders: &[usize]) -> Result<()> {
    if orders.is_empty() {
        return Err(Error::Config("at least one n-gram order is required".into()));
    }
    for &n in orders {
        if !(2..=MAX_ORDER).contains(&n) {
            return Err(Error::Config(format!("order {n} outside 2..={MAX_ORDER}")));
        }
    }
    Ok(())
}

/// Exact per-order n-gram counts.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NgramCountTable {
    per_order: BTreeMap<usize, HashMap<NgramKey, u64>>,
}

impl NgramCountTable {
    pub fn orders(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_order.keys().copied()
    }

    pub fn order(&self, n: usize) -> Option<&HashMap<NgramKey, u64>> {
        self.per_order.get(&n)
    }

    pub fn get(&self, key: &NgramKey) -> u64 {
        self.per_order
            .get(&key.order())
            .and_then(|m| m.get(key))
            .copied()
            .unwrap_or(0)
    }

    pub fn total(&self, n: usize) -> u64 {
        self.per_order.get(&n).map_or(0, |m| m.values().sum())
    }

    pub fn insert(&mut self, key: NgramKey, count: u64) {
        if count > 0 {
            *self
                .per_order
                .entry(key.order())
                .or_default()
                .entry(key)
                .or_insert(0) += count;
        }
    }

    /// Add `other`'s counts into `self`. Associative and commutative.
    pub fn merge(&mut self, other: NgramCountTable) {
        for (n, map) in other.per_order {
            let dst = self.per_order.entry(n).or_default();
            for (k, c) in map {
                *dst.entry(k).or_insert(0) += c;
            }
        }
    }

    /// Keys of order `n` ranked by descending count, ties by ascending ids.
    pub fn ranked(&self, n: usize) -> Vec<(NgramKey, u64)> {
        let mut v: Vec<(NgramKey, u64)> = self
            .per_order
            .get(&n)
            .map(|m| m.iter().map(|(k, c)| (*k, *c)).collect())
            .unwrap_or_default();
        v.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v
    }

    pub fn write_to<W: Write>(&self, mut w: W, header: &[String]) -> std::io::Result<()> {
        writeln!(w, "# memgraft-counts v1")?;
        for line in header {
            writeln!(w, "# {line}")?;
        }
        for n in self.orders() {
            writeln!(w, "@order {n}")?;
            for (k, c) in self.ranked(n) {
                writeln!(w, "{k}:{c}")?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut table = NgramCountTable::default();
        let mut order: Option<usize> = None;
        let mut offset = 0u64;
        for line in r.lines() {
            let line = line.map_err(|e| Error::io("<counts>", e))?;
            let at = offset;
            offset += line.len() as u64 + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| Error::Parse { offset: at, msg };
            if let Some(rest) = line.strip_prefix("@order") {
                let n: usize = rest
                    .trim()
                    .parse()
                    .map_err(|_| bad(format!("bad order header {line:?}")))?;
                validate_orders(&[n]).map_err(|e| bad(e.to_string()))?;
                order = Some(n);
                continue;
            }
            let n = order.ok_or_else(|| bad("count line before any @order header".into()))?;
            let (ids, count) = line
                .rsplit_once(':')
                .ok_or_else(|| bad(format!("expected `ids:count`, got {line:?}")))?;
            let ids: Vec<u32> = ids
                .split_whitespace()
                .map(|s| s.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(format!("bad id list {ids:?}")))?;
            if ids.len() != n {
                return Err(bad(format!("key of length {} under @order {n}", ids.len())));
            }
            let count: u64 = count
                .trim()
                .parse()
                .map_err(|_| bad(format!("bad count {count:?}")))?;
            if count == 0 {
                return Err(bad("zero count".into()));
            }
            table.insert(NgramKey::new(&ids)?, count);
        }
        Ok(table)
    }
}

fn count_docs<'a>(docs: impl Iterator<Item = &'a [u32]>, orders: &[usize]) -> NgramCountTable {
    let mut table = NgramCountTable::default();
    for &n in orders {
        table.per_order.entry(n).or_default();
    }
    for doc in docs {
        for &n in orders {
            if doc.len() < n {
                continue;
            }
            let map = table.per_order.get_mut(&n).unwrap();
            for w in doc.windows(n) {
                *map.entry(NgramKey::from_slice_unchecked(w)).or_insert(0) += 1;
            }
        }
    }
    table
}

/// Exact counts of every n-gram of each requested order. N-grams never span
/// a document boundary. Documents are sharded across the rayon pool.
pub fn count_ngrams(seq: &TokenSequence, orders: &[usize]) -> Result<NgramCountTable> {
    validate_orders(orders)?;
    const SHARD_DOCS: usize = 256;
    let doc_ids: Vec<usize> = (0..seq.num_docs()).collect();
    let table = doc_ids
        .par_chunks(SHARD_DOCS)
        .map(|chunk| count_docs(chunk.iter().map(|&d| &seq.ids[seq.doc_range(d)]), orders))
        .reduce(
            || {
                let mut t = NgramCountTable::default();
                for &n in orders {
                    t.per_order.entry(n).or_default();
                }
                t
            },
            |mut a, b| {
                a.merge(b);
                a
            },
        );
    Ok(table)
}

/// Per order, the `k` most frequent keys in rank order.
pub fn select_topk(table: &NgramCountTable, k_per_order: usize) -> Result<BTreeMap<usize, Vec<NgramKey>>> {
    if k_per_order == 0 {
        return Err(Error::Config("k_per_order must be >= 1".into()));
    }
    let mut out = BTreeMap::new();
    for n in table.orders() {
        let ranked = table.ranked(n);
        if ranked.len() < k_per_order {
            log::warn!(
                "order {n}: only {} distinct keys, fewer than k={k_per_order}",
                ranked.len()
            );
        }
        out.insert(n, ranked.into_iter().take(k_per_order).map(|(k, _)| k).collect());
    }
    Ok(out)
}
