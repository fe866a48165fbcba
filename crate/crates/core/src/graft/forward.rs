use rayon::prelude::*;

use super::attn::{attn_trace, AttnTrace};
use super::params::{GraftLayerParams, GraftMode, LayerShape};
use super::HiddenBlock;
use crate::bank::{BankMatch, LookupResult, MemoryBank};
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};
use crate::fallback::{Addressing, FallbackTables};
use crate::numerics::{conv_acc, dot, rmsnorm_into, sigmoid};

/// Where the memory feature at one position came from.
#[derive(Debug, Clone, PartialEq)]
pub enum MemorySource {
    /// Miss without fallback: a zero feature.
    Zero,
    /// Longest exact match, decoded bank row.
    Bank { feature: Vec<f64> },
    /// Hashed fallback feature and the rows it read.
    Fallback { feature: Vec<f64>, addressing: Addressing },
    /// Every matched order, aggregated per branch by attention.
    Attn {
        matches: Vec<BankMatch>,
        features: Vec<Vec<f64>>,
        traces: Vec<AttnTrace>,
    },
}

/// Everything the backward pass and the probes need from one forward call.
#[derive(Debug, Clone)]
pub struct GraftForwardRecord {
    pub(crate) shape: LayerShape,
    pub(crate) batch: usize,
    pub(crate) time: usize,
    pub(crate) lookups: Vec<LookupResult>,
    pub(crate) sources: Vec<MemorySource>,
    pub(crate) h: Vec<f64>,
    pub(crate) k: Vec<f64>,
    pub(crate) kbar: Vec<f64>,
    pub(crate) q: Vec<f64>,
    pub(crate) v: Vec<f64>,
    /// Empty for the ungated mode.
    pub(crate) alpha: Vec<f64>,
    pub(crate) u: Vec<f64>,
    pub(crate) delta: Vec<f64>,
    pub(crate) fallback_generation: Option<u64>,
}

impl GraftForwardRecord {
    pub fn mode(&self) -> GraftMode {
        self.shape.mode
    }

    pub fn shape(&self) -> LayerShape {
        self.shape
    }

    pub fn positions(&self) -> usize {
        self.batch * self.time
    }

    /// Longest exact match per position; all misses for the fallback-only mode.
    pub fn lookups(&self) -> &[LookupResult] {
        &self.lookups
    }

    pub fn hit_mask(&self) -> Vec<bool> {
        self.lookups.iter().map(LookupResult::hit).collect()
    }

    pub fn source(&self, pos: usize) -> &MemorySource {
        &self.sources[pos]
    }

    fn slot(&self, pos: usize, c: usize) -> std::ops::Range<usize> {
        let o = (pos * self.shape.branches + c) * self.shape.d;
        o..o + self.shape.d
    }

    /// Gate value, or `None` in the ungated mode.
    pub fn alpha(&self, pos: usize, c: usize) -> Option<f64> {
        self.alpha.get(pos * self.shape.branches + c).copied()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn key(&self, pos: usize, c: usize) -> &[f64] {
        &self.k[self.slot(pos, c)]
    }

    pub fn value(&self, pos: usize, c: usize) -> &[f64] {
        &self.v[self.slot(pos, c)]
    }

    pub fn gated(&self, pos: usize, c: usize) -> &[f64] {
        &self.u[self.slot(pos, c)]
    }

    /// Residual update `ΔH` at one position and branch.
    pub fn delta(&self, pos: usize, c: usize) -> &[f64] {
        &self.delta[self.slot(pos, c)]
    }
}

struct PositionOut {
    lookup: LookupResult,
    source: MemorySource,
    k: Vec<f64>,
    kbar: Vec<f64>,
    q: Vec<f64>,
    v: Vec<f64>,
    alpha: Vec<f64>,
    u: Vec<f64>,
}

/// Run the layer over `h`. Row `b` of the batch reads tokens
/// `seq.ids()[b·T .. (b+1)·T]`; lookups never reach before the start of the
/// row or of the token's document.
pub fn graft_forward(
    h: &HiddenBlock,
    seq: &TokenSequence,
    bank: Option<&MemoryBank>,
    fallback: Option<&FallbackTables>,
    params: &GraftLayerParams,
) -> Result<(HiddenBlock, GraftForwardRecord)> {
    let shape = params.shape;
    check_inputs(h, seq, bank, fallback, params)?;
    let (batch, time, c_n, d) = (h.batch(), h.time(), shape.branches, shape.d);
    let ids = seq.ids();

    let outs: Vec<PositionOut> = (0..batch * time)
        .into_par_iter()
        .map(|pos| {
            let row_start = (pos / time.max(1)) * time;
            let start = row_start.max(seq.doc_start_of(pos));
            let context = &ids[start..=pos];
            position_forward(h.position(pos), context, bank, fallback, params)
        })
        .collect::<Result<_>>()?;

    let n = batch * time * c_n * d;
    let mut rec = GraftForwardRecord {
        shape,
        batch,
        time,
        lookups: Vec::with_capacity(batch * time),
        sources: Vec::with_capacity(batch * time),
        h: h.as_slice().to_vec(),
        k: Vec::with_capacity(n),
        kbar: Vec::with_capacity(n),
        q: Vec::with_capacity(n),
        v: Vec::with_capacity(n),
        alpha: Vec::with_capacity(if shape.mode.is_gated() { batch * time * c_n } else { 0 }),
        u: Vec::with_capacity(n),
        delta: vec![0.0; n],
        fallback_generation: fallback.filter(|_| shape.mode.uses_fallback()).map(FallbackTables::generation),
    };
    for o in outs {
        rec.lookups.push(o.lookup);
        rec.sources.push(o.source);
        rec.k.extend(o.k);
        rec.kbar.extend(o.kbar);
        rec.q.extend(o.q);
        rec.v.extend(o.v);
        rec.alpha.extend(o.alpha);
        rec.u.extend(o.u);
    }

    // ΔH = U + ShortConv(U), per batch row and branch over time.
    let mut ubuf = vec![0.0; time * d];
    let mut ybuf = vec![0.0; time * d];
    for b in 0..batch {
        for c in 0..c_n {
            for t in 0..time {
                let o = ((b * time + t) * c_n + c) * d;
                ubuf[t * d..(t + 1) * d].copy_from_slice(&rec.u[o..o + d]);
            }
            ybuf.fill(0.0);
            conv_acc(&ubuf, time, &params.conv[c], &mut ybuf);
            for t in 0..time {
                let o = ((b * time + t) * c_n + c) * d;
                for j in 0..d {
                    rec.delta[o + j] = ubuf[t * d + j] + ybuf[t * d + j];
                }
            }
        }
    }

    let mut out = h.clone();
    for (x, dx) in out.as_mut_slice().iter_mut().zip(&rec.delta) {
        *x += dx;
    }
    if let Some(i) = out.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("graft output element {i}")));
    }
    Ok((out, rec))
}

fn check_inputs(
    h: &HiddenBlock,
    seq: &TokenSequence,
    bank: Option<&MemoryBank>,
    fallback: Option<&FallbackTables>,
    params: &GraftLayerParams,
) -> Result<()> {
    let shape = params.shape;
    shape.validate()?;
    if h.branches() != shape.branches || h.dim() != shape.d {
        return Err(Error::Shape(format!(
            "hidden block has C={} D={}, layer expects C={} D={}",
            h.branches(),
            h.dim(),
            shape.branches,
            shape.d
        )));
    }
    if seq.len() != h.positions() {
        return Err(Error::Shape(format!(
            "token sequence has {} ids, hidden block has B·T = {}",
            seq.len(),
            h.positions()
        )));
    }
    if shape.mode.uses_bank() {
        let bank = bank.ok_or_else(|| Error::Config(format!("mode {} needs a memory bank", shape.mode)))?;
        if bank.d_mem() != shape.d_mem {
            return Err(Error::Shape(format!(
                "bank rows have {} dims, layer expects {}",
                bank.d_mem(),
                shape.d_mem
            )));
        }
    }
    if shape.mode.uses_fallback() {
        let fb = fallback.ok_or_else(|| Error::Config(format!("mode {} needs fallback tables", shape.mode)))?;
        if fb.dim() != shape.d_fallback {
            return Err(Error::Shape(format!(
                "fallback feature has {} dims, layer expects {}",
                fb.dim(),
                shape.d_fallback
            )));
        }
    }
    if !params.all_finite() {
        return Err(Error::NonFinite("layer parameters".into()));
    }
    Ok(())
}

fn position_forward(
    h_pos: &[f64],
    context: &[u32],
    bank: Option<&MemoryBank>,
    fallback: Option<&FallbackTables>,
    params: &GraftLayerParams,
) -> Result<PositionOut> {
    let shape = params.shape;
    let (c_n, d) = (shape.branches, shape.d);
    let mode = shape.mode;

    let (lookup, source) = match mode {
        GraftMode::EngramOnly => (LookupResult::MISS, fallback_source(context, fallback)),
        GraftMode::AttnOnly | GraftMode::AttnGated => {
            let bank = bank.expect("checked");
            let matches = bank.all_matches(context);
            let lookup = LookupResult(matches.first().copied());
            let features: Vec<Vec<f64>> = matches.iter().map(|m| bank.row(m.row as usize)).collect();
            let attn = params.attn.as_ref().expect("attn params exist in attn modes");
            let traces = (0..c_n)
                .map(|c| attn_trace(&h_pos[c * d..(c + 1) * d], &features, attn))
                .collect();
            (
                lookup,
                MemorySource::Attn {
                    matches,
                    features,
                    traces,
                },
            )
        }
        GraftMode::LongestGated | GraftMode::LongestGatedFallback => {
            let bank = bank.expect("checked");
            let lookup = bank.exact_lookup(context);
            let source = match lookup.row() {
                Some(r) => MemorySource::Bank { feature: bank.row(r) },
                None if mode == GraftMode::LongestGatedFallback => fallback_source(context, fallback),
                None => MemorySource::Zero,
            };
            (lookup, source)
        }
    };

    let mut out = PositionOut {
        lookup,
        source,
        k: vec![0.0; c_n * d],
        kbar: vec![0.0; c_n * d],
        q: vec![0.0; c_n * d],
        v: vec![0.0; c_n * d],
        alpha: Vec::with_capacity(c_n),
        u: vec![0.0; c_n * d],
    };
    let zero = vec![0.0; shape.d_mem];
    for c in 0..c_n {
        let r = c * d..(c + 1) * d;
        let hc = &h_pos[r.clone()];
        let (feature, w_k, w_v) = match &out.source {
            MemorySource::Zero => (zero.as_slice(), &params.w_k_mem[c], &params.w_v_mem),
            MemorySource::Bank { feature } => (feature.as_slice(), &params.w_k_mem[c], &params.w_v_mem),
            MemorySource::Fallback { feature, .. } => (feature.as_slice(), &params.w_k_eng[c], &params.w_v_eng),
            MemorySource::Attn { traces, .. } => (traces[c].output.as_slice(), &params.w_k_mem[c], &params.w_v_mem),
        };
        w_v.matvec_into(feature, &mut out.v[r.clone()]);
        if !mode.is_gated() {
            out.u[r.clone()].copy_from_slice(&out.v[r]);
            continue;
        }
        w_k.matvec_into(feature, &mut out.k[r.clone()]);
        rmsnorm_into(hc, &params.q_norm[c], &mut out.q[r.clone()])?;
        rmsnorm_into(&out.k[r.clone()], &params.k_norm[c], &mut out.kbar[r.clone()])?;
        let s = dot(&out.kbar[r.clone()], &out.q[r.clone()]) / (d as f64).sqrt();
        let a = sigmoid(s);
        out.alpha.push(a);
        for (u, v) in out.u[r.clone()].iter_mut().zip(&out.v[r]) {
            *u = a * v;
        }
    }
    Ok(out)
}

fn fallback_source(context: &[u32], fallback: Option<&FallbackTables>) -> MemorySource {
    let (feature, addressing) = fallback.expect("checked").retrieve(context);
    MemorySource::Fallback { feature, addressing }
}
