use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;

use crate::corpus::{NgramKey, TokenSequence};

/// `(k, hit rate)` pairs, where `k` is the per-order prefix length of the
/// ranked key lists.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct HitRateCurve {
    pub points: Vec<(usize, f64)>,
    /// Positions with at least one preceding in-document token.
    pub eligible: usize,
}

impl HitRateCurve {
    /// Two-column CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,hit_rate\n");
        for (k, r) in &self.points {
            s.push_str(&format!("{k},{r}\n"));
        }
        s
    }
}

/// Hit rate of the bank holding the first `k` keys of every order in
/// `ranked`, for each `k` in `checkpoints`. A position hits when any order's
/// suffix is among that order's first `k` keys.
pub fn hit_rate_curve(seq: &TokenSequence, ranked: &BTreeMap<usize, Vec<NgramKey>>, checkpoints: &[usize]) -> HitRateCurve {
    let ranks: Vec<(usize, HashMap<NgramKey, usize>)> = ranked
        .iter()
        .map(|(&n, keys)| (n, keys.iter().enumerate().map(|(i, k)| (*k, i)).collect()))
        .collect();

    // Smallest rank over orders at each eligible position; usize::MAX if none.
    let best: Vec<usize> = (0..seq.num_docs())
        .into_par_iter()
        .flat_map_iter(|d| {
            let doc = &seq.ids()[seq.doc_range(d)];
            let ranks = &ranks;
            (1..doc.len()).map(move |t| {
                ranks
                    .iter()
                    .filter(|(n, _)| *n <= t + 1)
                    .filter_map(|(n, map)| map.get(&NgramKey::from_slice_unchecked(&doc[t + 1 - n..=t])).copied())
                    .min()
                    .unwrap_or(usize::MAX)
            })
        })
        .collect();

    let mut sorted = best;
    sorted.sort_unstable();
    let eligible = sorted.len();
    let points = checkpoints
        .iter()
        .map(|&k| {
            let hits = sorted.partition_point(|&r| r < k);
            let rate = if eligible == 0 { 0.0 } else { hits as f64 / eligible as f64 };
            (k, rate)
        })
        .collect();
    HitRateCurve { points, eligible }
}
