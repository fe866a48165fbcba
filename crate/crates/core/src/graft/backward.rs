use super::attn::attn_backward;
use super::forward::{GraftForwardRecord, MemorySource};
use super::params::GraftLayerParams;
use super::HiddenBlock;
use crate::error::{Error, Result};
use crate::fallback::{Addressing, FallbackTables, SparseGrad};
use crate::numerics::{conv_backward_acc, dot, rmsnorm_backward};

/// Gradients from one backward call. The memory bank has no slot here: it
/// is frozen.
#[derive(Debug, Clone)]
pub struct GraftGrads {
    /// Same layout as the layer parameters.
    pub params: GraftLayerParams,
    /// Touched fallback rows only.
    pub fallback: SparseGrad,
    pub d_hidden: HiddenBlock,
}

/// Backpropagate `d_out = ∂L/∂H̃` through the forward call that produced
/// `record`. `fallback` must be the tables the forward pass read, unmodified
/// since.
pub fn graft_backward(
    params: &GraftLayerParams,
    record: &GraftForwardRecord,
    d_out: &HiddenBlock,
    fallback: Option<&FallbackTables>,
) -> Result<GraftGrads> {
    let shape = record.shape;
    if params.shape != shape {
        return Err(Error::Shape("parameters differ in shape from the forward record".into()));
    }
    let (batch, time, c_n, d) = (record.batch, record.time, shape.branches, shape.d);
    if d_out.batch() != batch || d_out.time() != time || d_out.branches() != c_n || d_out.dim() != d {
        return Err(Error::Shape(format!(
            "upstream gradient is ({},{},{},{}), record is ({batch},{time},{c_n},{d})",
            d_out.batch(),
            d_out.time(),
            d_out.branches(),
            d_out.dim()
        )));
    }
    if let Some(generation) = record.fallback_generation {
        let fb = fallback.ok_or_else(|| Error::Config("backward needs the fallback tables used in forward".into()))?;
        if fb.generation() != generation {
            return Err(Error::StaleRecord {
                record: generation,
                tables: fb.generation(),
            });
        }
    }

    let mut grads = GraftLayerParams::zeros(shape)?;
    let dy = d_out.as_slice();
    let mut dh = dy.to_vec();

    // Through ΔH = U + conv(U).
    let mut du = dy.to_vec();
    let mut ubuf = vec![0.0; time * d];
    let mut dybuf = vec![0.0; time * d];
    let mut dubuf = vec![0.0; time * d];
    for b in 0..batch {
        for c in 0..c_n {
            for t in 0..time {
                let o = ((b * time + t) * c_n + c) * d;
                ubuf[t * d..(t + 1) * d].copy_from_slice(&record.u[o..o + d]);
                dybuf[t * d..(t + 1) * d].copy_from_slice(&dy[o..o + d]);
            }
            dubuf.fill(0.0);
            conv_backward_acc(&ubuf, time, &params.conv[c], &dybuf, &mut dubuf, &mut grads.conv[c]);
            for t in 0..time {
                let o = ((b * time + t) * c_n + c) * d;
                for j in 0..d {
                    du[o + j] += dubuf[t * d + j];
                }
            }
        }
    }

    let gated = shape.mode.is_gated();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut fallback_items: Vec<(&Addressing, Vec<f64>)> = Vec::new();
    let mut dv = vec![0.0; d];
    let mut dk = vec![0.0; d];
    let mut dkbar = vec![0.0; d];
    let mut dq = vec![0.0; d];
    for pos in 0..batch * time {
        let source = &record.sources[pos];
        let mut de_fallback = match source {
            MemorySource::Fallback { feature, .. } => Some(vec![0.0; feature.len()]),
            _ => None,
        };
        for c in 0..c_n {
            let o = (pos * c_n + c) * d;
            let r = o..o + d;
            let du_c = &du[r.clone()];
            let hc = &record.h[r.clone()];
            dk.fill(0.0);
            if gated {
                let a = record.alpha[pos * c_n + c];
                let v = &record.v[r.clone()];
                let da = dot(du_c, v);
                let ds = da * a * (1.0 - a) * inv_sqrt_d;
                for j in 0..d {
                    dv[j] = a * du_c[j];
                    dkbar[j] = ds * record.q[o + j];
                    dq[j] = ds * record.kbar[o + j];
                }
                rmsnorm_backward(hc, &params.q_norm[c], &dq, &mut dh[r.clone()], &mut grads.q_norm[c]);
                rmsnorm_backward(&record.k[r.clone()], &params.k_norm[c], &dkbar, &mut dk, &mut grads.k_norm[c]);
            } else {
                dv.copy_from_slice(du_c);
            }

            let (feature, eng) = match source {
                MemorySource::Zero => continue,
                MemorySource::Bank { feature } => (feature.as_slice(), false),
                MemorySource::Fallback { feature, .. } => (feature.as_slice(), true),
                MemorySource::Attn { traces, .. } => (traces[c].output.as_slice(), false),
            };
            let (w_k, w_v, g_k, g_v) = if eng {
                (&params.w_k_eng[c], &params.w_v_eng, &mut grads.w_k_eng[c], &mut grads.w_v_eng)
            } else {
                (&params.w_k_mem[c], &params.w_v_mem, &mut grads.w_k_mem[c], &mut grads.w_v_mem)
            };
            g_v.add_outer(&dv, feature);
            if gated {
                g_k.add_outer(&dk, feature);
            }

            match source {
                MemorySource::Fallback { .. } => {
                    let de = de_fallback.as_mut().expect("set for fallback sources");
                    w_v.matvec_t_acc(&dv, de);
                    if gated {
                        w_k.matvec_t_acc(&dk, de);
                    }
                }
                MemorySource::Attn { features, traces, .. } => {
                    let mut de = vec![0.0; feature.len()];
                    w_v.matvec_t_acc(&dv, &mut de);
                    if gated {
                        w_k.matvec_t_acc(&dk, &mut de);
                    }
                    let attn = params.attn.as_ref().expect("attn params exist in attn modes");
                    let ga = grads.attn.as_mut().expect("attn grads exist in attn modes");
                    attn_backward(hc, features, &traces[c], attn, &de, &mut dh[r], &mut ga.w_q, &mut ga.w_k);
                }
                // Bank rows are frozen.
                _ => {}
            }
        }
        if let (Some(de), MemorySource::Fallback { addressing, .. }) = (de_fallback, source) {
            fallback_items.push((addressing, de));
        }
    }

    let fallback_grad = match fallback.filter(|_| record.fallback_generation.is_some()) {
        Some(fb) => fb.grad(fallback_items.iter().map(|(a, g)| (*a, g.as_slice())))?,
        None => SparseGrad::new(),
    };
    Ok(GraftGrads {
        params: grads,
        fallback: fallback_grad,
        d_hidden: HiddenBlock::new(batch, time, c_n, d, dh)?,
    })
}
