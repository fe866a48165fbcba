use super::forward::GraftForwardRecord;
use crate::numerics::norm2;

/// Gate and output-magnitude summary of one forward call.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GateProbe {
    /// Counts of α over `bins` equal-width bins of `[0, 1]`; empty when the
    /// mode has no gate.
    pub histogram: Vec<u64>,
    pub mean_alpha_hits: Option<f64>,
    pub mean_alpha_misses: Option<f64>,
    /// Mean L2 norm of ΔH over (position, branch) at hit positions.
    pub mean_delta_hits: Option<f64>,
    pub mean_delta_misses: Option<f64>,
    pub hit_fraction: f64,
    pub positions: usize,
}

pub fn probe_gates(record: &GraftForwardRecord, bins: usize) -> GateProbe {
    let bins = bins.max(1);
    let c_n = record.shape.branches;
    let positions = record.positions();
    let mut histogram = if record.alpha.is_empty() { Vec::new() } else { vec![0u64; bins] };
    let mut alpha_sum = [0.0f64; 2];
    let mut delta_sum = [0.0f64; 2];
    let mut n = [0usize; 2];
    for pos in 0..positions {
        let side = usize::from(!record.lookups[pos].hit());
        n[side] += c_n;
        for c in 0..c_n {
            delta_sum[side] += norm2(record.delta(pos, c));
            if let Some(a) = record.alpha(pos, c) {
                alpha_sum[side] += a;
                let b = ((a * bins as f64) as usize).min(bins - 1);
                histogram[b] += 1;
            }
        }
    }
    let mean = |sum: f64, count: usize| (count > 0).then(|| sum / count as f64);
    let gated = !record.alpha.is_empty();
    GateProbe {
        histogram,
        mean_alpha_hits: mean(alpha_sum[0], n[0]).filter(|_| gated),
        mean_alpha_misses: mean(alpha_sum[1], n[1]).filter(|_| gated),
        mean_delta_hits: mean(delta_sum[0], n[0]),
        mean_delta_misses: mean(delta_sum[1], n[1]),
        hit_fraction: if positions == 0 {
            0.0
        } else {
            (n[0] / c_n.max(1)) as f64 / positions as f64
        },
        positions,
    }
}
