use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::KeyValueReport;
use crate::bank::MemoryBank;
use crate::error::{Error, Result};
use crate::hash::mix64;
use crate::numerics::{dot, norm2, Matrix};

/// Rows drawn for each statistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct SampleSizes {
    pub norms: usize,
    pub rank: usize,
    pub nn: usize,
}

impl Default for SampleSizes {
    fn default() -> Self {
        SampleSizes {
            norms: 10_000,
            rank: 2_048,
            nn: 1_024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GeometryReport {
    pub seed: u64,
    pub rows: usize,
    pub dim: usize,
    /// Sizes actually used after clamping to the row count.
    pub samples: SampleSizes,
    /// `exp` of the Shannon entropy of the normalised singular values of the
    /// centred rank sample.
    pub effective_rank: f64,
    /// Largest covariance eigenvalue over their sum.
    pub pc1_fraction: f64,
    pub norm_mean: f64,
    pub norm_std: f64,
    /// Coefficient of variation of row norms.
    pub norm_cv: f64,
    /// Mean over sampled rows of the best cosine to another sampled row.
    pub nn_cosine_mean: f64,
    pub nn_cosine_p95: f64,
}

impl KeyValueReport for GeometryReport {
    fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("rows", self.rows.to_string()),
            ("dim", self.dim.to_string()),
            ("sample_norms", self.samples.norms.to_string()),
            ("sample_rank", self.samples.rank.to_string()),
            ("sample_nn", self.samples.nn.to_string()),
            ("effective_rank", format!("{}", self.effective_rank)),
            ("pc1_fraction", format!("{}", self.pc1_fraction)),
            ("norm_mean", format!("{}", self.norm_mean)),
            ("norm_std", format!("{}", self.norm_std)),
            ("norm_cv", format!("{}", self.norm_cv)),
            ("nn_cosine_mean", format!("{}", self.nn_cosine_mean)),
            ("nn_cosine_p95", format!("{}", self.nn_cosine_p95)),
        ]
    }
}

/// Geometry of the decoded rows of `bank`.
pub fn geometry(bank: &MemoryBank, sizes: SampleSizes, seed: u64) -> Result<GeometryReport> {
    geometry_with(bank.len(), bank.d_mem(), |r, out| bank.row_into(r, out), sizes, seed)
}

/// Geometry of the rows of an in-memory matrix.
pub fn geometry_of_rows(rows: &Matrix, sizes: SampleSizes, seed: u64) -> Result<GeometryReport> {
    geometry_with(rows.rows(), rows.cols(), |r, out| out.copy_from_slice(rows.row(r)), sizes, seed)
}

fn clamp(what: &str, want: usize, have: usize) -> usize {
    if want > have {
        log::warn!("{what} sample of {want} exceeds {have} rows; using all rows");
        have
    } else {
        want
    }
}

fn sample(n: usize, k: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ stream));
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

fn gather<F: Fn(usize, &mut [f64]) + Sync>(idx: &[usize], dim: usize, fetch: &F) -> Vec<f64> {
    let mut out = vec![0.0; idx.len() * dim];
    out.par_chunks_mut(dim).zip(idx).for_each(|(row, &r)| fetch(r, row));
    out
}

fn geometry_with<F>(n: usize, dim: usize, fetch: F, sizes: SampleSizes, seed: u64) -> Result<GeometryReport>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    if n == 0 {
        return Err(Error::Config("geometry needs a nonempty bank".into()));
    }
    if sizes.norms == 0 || sizes.rank == 0 || sizes.nn == 0 {
        return Err(Error::Config("sample sizes must be >= 1".into()));
    }
    let samples = SampleSizes {
        norms: clamp("norm", sizes.norms, n),
        rank: clamp("rank", sizes.rank, n),
        nn: clamp("nearest-neighbour", sizes.nn, n),
    };

    let norm_rows = gather(&sample(n, samples.norms, seed, 1), dim, &fetch);
    let norms: Vec<f64> = norm_rows.chunks(dim).map(norm2).collect();
    let norm_mean = norms.iter().sum::<f64>() / norms.len() as f64;
    let norm_std = (norms.iter().map(|x| (x - norm_mean).powi(2)).sum::<f64>() / norms.len() as f64).sqrt();
    let norm_cv = if norm_mean > 0.0 { norm_std / norm_mean } else { 0.0 };

    let rank_rows = gather(&sample(n, samples.rank, seed, 2), dim, &fetch);
    let (effective_rank, pc1_fraction) = spectrum(&rank_rows, samples.rank, dim);

    let nn_rows = gather(&sample(n, samples.nn, seed, 3), dim, &fetch);
    let (nn_cosine_mean, nn_cosine_p95) = nearest_cosines(&nn_rows, samples.nn, dim);

    Ok(GeometryReport {
        seed,
        rows: n,
        dim,
        samples,
        effective_rank,
        pc1_fraction,
        norm_mean,
        norm_std,
        norm_cv,
        nn_cosine_mean,
        nn_cosine_p95,
    })
}

/// Effective rank and first-component share of the centred `m × dim` sample.
fn spectrum(rows: &[f64], m: usize, dim: usize) -> (f64, f64) {
    let mut x = DMatrix::from_row_slice(m, dim, rows);
    for mut col in x.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
    // The nonzero spectrum of XᵀX equals that of XXᵀ; use the smaller one.
    let gram = if m < dim { &x * x.transpose() } else { x.transpose() * &x };
    let eig = SymmetricEigen::new(gram).eigenvalues;
    let lambdas: Vec<f64> = eig.iter().map(|&l| l.max(0.0)).collect();
    let total: f64 = lambdas.iter().sum();
    if total <= 0.0 {
        return (1.0, 1.0);
    }
    let pc1 = lambdas.iter().copied().fold(0.0, f64::max) / total;
    let sv: Vec<f64> = lambdas.iter().map(|l| l.sqrt()).collect();
    let sv_total: f64 = sv.iter().sum();
    let entropy: f64 = sv
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|s| {
            let p = s / sv_total;
            -p * p.ln()
        })
        .sum();
    (entropy.exp(), pc1)
}

fn nearest_cosines(rows: &[f64], m: usize, dim: usize) -> (f64, f64) {
    if m < 2 {
        return (0.0, 0.0);
    }
    let unit: Vec<Vec<f64>> = rows
        .chunks(dim)
        .map(|r| {
            let n = norm2(r);
            if n > 0.0 {
                r.iter().map(|v| v / n).collect()
            } else {
                vec![0.0; dim]
            }
        })
        .collect();
    let mut best: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|i| {
            (0..m)
                .filter(|&j| j != i)
                .map(|j| dot(&unit[i], &unit[j]))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let mean = best.iter().sum::<f64>() / m as f64;
    best.sort_by(f64::total_cmp);
    let rank = ((0.95 * m as f64).ceil() as usize).clamp(1, m);
    (mean, best[rank - 1])
}
