//! Lookup latency measurement and synthetic scaling workloads.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::bank::{build_bank, MemoryBank, StorageDtype, SyntheticProvider};
use crate::corpus::{count_ngrams, NgramKey, TokenSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, serde::Serialize)]
pub struct LookupBench {
    pub bank_entries: usize,
    pub tokens: usize,
    pub hit_fraction: f64,
    /// Median over repeats.
    pub ns_per_token: f64,
    pub repeats: usize,
}

/// Time [`MemoryBank::batch_lookup`] over `seq`, `repeats` times.
pub fn bench_lookup(bank: &MemoryBank, seq: &TokenSequence, repeats: usize) -> Result<LookupBench> {
    if seq.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let repeats = repeats.max(1);
    // Warm-up pass also provides the hit count.
    let results = bank.batch_lookup(seq);
    let hits = results.iter().filter(|r| r.hit()).count();
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        let r = bank.batch_lookup(seq);
        let elapsed = start.elapsed();
        std::hint::black_box(&r);
        times.push(elapsed.as_nanos() as f64 / seq.len() as f64);
    }
    times.sort_by(f64::total_cmp);
    Ok(LookupBench {
        bank_entries: bank.len(),
        tokens: seq.len(),
        hit_fraction: hits as f64 / seq.len() as f64,
        ns_per_token: times[times.len() / 2],
        repeats,
    })
}

/// Seeded Zipf-distributed corpus split into documents of 50 to 500 tokens.
pub fn zipf_corpus(tokens: usize, vocab: u32, exponent: f64, seed: u64) -> TokenSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zipf = Zipf::new(u64::from(vocab), exponent).expect("valid zipf parameters");
    let mut docs = Vec::new();
    let mut left = tokens;
    while left > 0 {
        let len = rng.gen_range(50..=500).min(left);
        docs.push((0..len).map(|_| zipf.sample(&mut rng) as u32 - 1).collect::<Vec<u32>>());
        left -= len;
    }
    TokenSequence::from_docs(docs).expect("documents are nonempty")
}

/// `entries` distinct keys spread evenly over `orders`: the corpus's most
/// frequent n-grams of each order first, then seeded random tuples over
/// `vocab` until the quota is met.
pub fn scaling_keys(seq: &TokenSequence, orders: &[usize], entries: usize, vocab: u32, seed: u64) -> Result<Vec<NgramKey>> {
    let counts = count_ngrams(seq, orders)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(entries);
    for (i, &n) in orders.iter().enumerate() {
        let quota = entries / orders.len() + usize::from(i < entries % orders.len());
        let mut chosen: BTreeSet<NgramKey> = counts
            .ranked(n)
            .into_iter()
            .take(quota)
            .map(|(k, _)| k)
            .collect();
        let mut ids = vec![0u32; n];
        while chosen.len() < quota {
            ids.iter_mut().for_each(|x| *x = rng.gen_range(0..vocab));
            chosen.insert(NgramKey::new(&ids)?);
        }
        out.extend(chosen);
    }
    Ok(out)
}

/// A synthetic bank of `entries` keys for lookup benchmarking.
pub fn scaling_bank(seq: &TokenSequence, orders: &[usize], entries: usize, vocab: u32, d_mem: usize, seed: u64) -> Result<MemoryBank> {
    let keys = scaling_keys(seq, orders, entries, vocab, seed)?;
    build_bank(
        &keys,
        &SyntheticProvider::new(seed, d_mem),
        StorageDtype::Bf16,
        "synthetic",
        vec![],
    )
}
