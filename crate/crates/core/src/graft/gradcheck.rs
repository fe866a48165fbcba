//! Finite-difference verification of [`graft_backward`] on small random
//! instances.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{graft_backward, graft_forward, GraftForwardRecord, GraftLayerParams, GraftMode, HiddenBlock, LayerShape};
use crate::bank::{build_bank, MemoryBank, StorageDtype, SyntheticProvider};
use crate::corpus::{NgramKey, TokenSequence};
use crate::error::Result;
use crate::fallback::{FallbackTables, HashScheme, SparseGrad};
use crate::numerics::{finite_diff_check, Matrix};

pub(crate) const CHECK_D_MEM: usize = 6;
pub(crate) const CHECK_D_FALLBACK: usize = 8;
const VOCAB: u32 = 4;

/// A random layer instance: tokens over a 4-symbol vocabulary so that
/// matches are frequent, a bank holding about half the corpus's 2- to
/// 4-grams, fallback tables over orders {2, 3} with two heads.
#[derive(Debug, Clone)]
pub struct GradCheckInstance {
    pub seq: TokenSequence,
    pub bank: MemoryBank,
    pub fallback: FallbackTables,
    pub h: HiddenBlock,
    pub params: GraftLayerParams,
}

impl GradCheckInstance {
    /// `dims` is `(B, T, C, D)`.
    pub fn random(seed: u64, mode: GraftMode, dims: (usize, usize, usize, usize)) -> Result<Self> {
        let (b, t, c, d) = dims;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<u32> = (0..b * t).map(|_| rng.gen_range(0..VOCAB)).collect();
        let seq = if ids.len() >= 4 && rng.gen_bool(0.5) {
            let cut = rng.gen_range(1..ids.len());
            TokenSequence::from_docs(vec![ids[..cut].to_vec(), ids[cut..].to_vec()])?
        } else {
            TokenSequence::single(ids)
        };
        let mut keys = BTreeSet::new();
        for doc in seq.docs() {
            for n in 2..=4 {
                for w in doc.windows(n) {
                    if rng.gen_bool(0.5) {
                        keys.insert(NgramKey::new(w)?);
                    }
                }
            }
        }
        for _ in 0..5 {
            let n = rng.gen_range(2..=4);
            let ids: Vec<u32> = (0..n).map(|_| rng.gen_range(0..VOCAB)).collect();
            keys.insert(NgramKey::new(&ids)?);
        }
        let keys: Vec<NgramKey> = keys.into_iter().collect();
        let bank = build_bank(
            &keys,
            &SyntheticProvider::new(seed, CHECK_D_MEM),
            StorageDtype::Bf16,
            "gradcheck",
            vec![],
        )?;
        let scheme = HashScheme::new(&[2, 3], 2, 7, seed)?;
        let fallback = FallbackTables::new(scheme, CHECK_D_FALLBACK, seed ^ 1)?;
        let data: Vec<f64> = (0..b * t * c * d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let h = HiddenBlock::new(b, t, c, d, data)?;
        let shape = LayerShape {
            d,
            d_mem: CHECK_D_MEM,
            d_fallback: CHECK_D_FALLBACK,
            branches: c,
            ksize: 4,
            mode,
        };
        let mut params = GraftLayerParams::init(shape, seed ^ 2)?;
        // Move away from the zero-kernel, unit-scale init so every group is
        // exercised.
        for ci in 0..c {
            params.conv[ci]
                .as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-0.3..0.3));
            params.q_norm[ci].iter_mut().for_each(|v| *v = rng.gen_range(0.8..1.2));
            params.k_norm[ci].iter_mut().for_each(|v| *v = rng.gen_range(0.8..1.2));
        }
        Ok(GradCheckInstance {
            seq,
            bank,
            fallback,
            h,
            params,
        })
    }

    pub fn forward(&self) -> Result<(HiddenBlock, GraftForwardRecord)> {
        self.forward_with(&self.h, &self.params, &self.fallback)
    }

    fn forward_with(
        &self,
        h: &HiddenBlock,
        params: &GraftLayerParams,
        fallback: &FallbackTables,
    ) -> Result<(HiddenBlock, GraftForwardRecord)> {
        graft_forward(h, &self.seq, Some(&self.bank), Some(fallback), params)
    }
}

/// Maximum relative error per checked tensor.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GradCheckReport {
    pub mode: GraftMode,
    /// `(tensor name, max relative error)`, covering every parameter group,
    /// the hidden input and, when used, the fallback tables.
    pub errors: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().map(|e| e.1).fold(0.0, f64::max)
    }
}

/// Loss `Σ r·H̃ + ½ Σ H̃²` against fixed random weights `r`.
pub fn check_loss(out: &HiddenBlock, r: &[f64]) -> f64 {
    out.as_slice().iter().zip(r).map(|(y, ri)| ri * y + 0.5 * y * y).sum()
}

fn check_loss_grad(out: &HiddenBlock, r: &[f64]) -> Result<HiddenBlock> {
    let g: Vec<f64> = out.as_slice().iter().zip(r).map(|(y, ri)| ri + y).collect();
    HiddenBlock::new(out.batch(), out.time(), out.branches(), out.dim(), g)
}

// The loss minus its H-only part, for probes that hold H fixed. Working on
// ΔH keeps round-off proportional to the update rather than to H.
fn loss_at_fixed_h(h: &HiddenBlock, rec: &GraftForwardRecord, r: &[f64]) -> f64 {
    h.as_slice()
        .iter()
        .zip(&rec.delta)
        .zip(r)
        .map(|((x, dx), ri)| (ri + x) * dx + 0.5 * dx * dx)
        .sum()
}

fn dense_fallback_grad(fb: &FallbackTables, grads: &SparseGrad) -> Vec<f64> {
    let rows = fb.scheme().table_size() as usize;
    let d_sub = fb.d_sub();
    let mut dense = vec![0.0; fb.tables().len() * rows * d_sub];
    for (&(t, r), g) in grads {
        let o = (t * rows + r as usize) * d_sub;
        dense[o..o + d_sub].copy_from_slice(g);
    }
    dense
}

fn tables_from_flat(fb: &FallbackTables, flat: &[f64]) -> Result<FallbackTables> {
    let rows = fb.scheme().table_size() as usize;
    let d_sub = fb.d_sub();
    let tables = flat
        .chunks(rows * d_sub)
        .map(|c| Matrix::from_vec(rows, d_sub, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    FallbackTables::from_tables(fb.scheme().clone(), tables)
}

/// Compare analytic gradients with central differences of step `step`.
pub fn gradient_check(inst: &GradCheckInstance, step: f64, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (out, rec) = inst.forward()?;
    let r: Vec<f64> = (0..out.as_slice().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let grads = graft_backward(&inst.params, &rec, &check_loss_grad(&out, &r)?, Some(&inst.fallback))?;
    let mut errors = Vec::new();
    // Forward failures inside a probe surface as NaN, which the checker
    // reports as an error.
    for g in inst.params.groups() {
        let err = finite_diff_check(
            |x| {
                let mut p = inst.params.clone();
                if p.set_group(g, x).is_err() {
                    return f64::NAN;
                }
                inst.forward_with(&inst.h, &p, &inst.fallback)
                    .map_or(f64::NAN, |(_, rec)| loss_at_fixed_h(&inst.h, &rec, &r))
            },
            &inst.params.group(g),
            &grads.params.group(g),
            step,
        )?;
        errors.push((g.name().to_string(), err));
    }
    let h = &inst.h;
    let err = finite_diff_check(
        |x| {
            HiddenBlock::new(h.batch(), h.time(), h.branches(), h.dim(), x.to_vec())
                .and_then(|hx| inst.forward_with(&hx, &inst.params, &inst.fallback))
                .map_or(f64::NAN, |(o, _)| check_loss(&o, &r))
        },
        h.as_slice(),
        grads.d_hidden.as_slice(),
        step,
    )?;
    errors.push(("hidden".to_string(), err));
    if inst.params.shape.mode.uses_fallback() {
        let flat: Vec<f64> = inst.fallback.tables().iter().flat_map(|t| t.as_slice().iter().copied()).collect();
        let err = finite_diff_check(
            |x| {
                tables_from_flat(&inst.fallback, x)
                    .and_then(|fb| inst.forward_with(&inst.h, &inst.params, &fb))
                    .map_or(f64::NAN, |(_, rec)| loss_at_fixed_h(&inst.h, &rec, &r))
            },
            &flat,
            &dense_fallback_grad(&inst.fallback, &grads.fallback),
            step,
        )?;
        errors.push(("fallback_tables".to_string(), err));
    }
    Ok(GradCheckReport {
        mode: inst.params.shape.mode,
        errors,
    })
}
