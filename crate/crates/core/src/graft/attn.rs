use super::params::AttnParams;
use crate::numerics::{axpy, dot, Matrix};

/// Per-branch attention state kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnTrace {
    /// `W_q · h`
    pub query: Vec<f64>,
    /// `W_k · e_n` for each matched feature.
    pub keys: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// Weighted sum of the matched features.
    pub output: Vec<f64>,
}

/// Softmax-weighted sum of `features` with logits
/// `⟨W_q·h, W_k·e_n⟩ / √D`. An empty feature list yields the zero vector.
pub fn attn_aggregate(h: &[f64], features: &[Vec<f64>], params: &AttnParams) -> (Vec<f64>, Vec<f64>) {
    let t = attn_trace(h, features, params);
    (t.output, t.weights)
}

pub(crate) fn attn_trace(h: &[f64], features: &[Vec<f64>], params: &AttnParams) -> AttnTrace {
    let d_mem = params.w_k.cols();
    let query = params.w_q.matvec(h);
    if features.is_empty() {
        return AttnTrace {
            query,
            keys: Vec::new(),
            weights: Vec::new(),
            output: vec![0.0; d_mem],
        };
    }
    let scale = 1.0 / (h.len() as f64).sqrt();
    let keys: Vec<Vec<f64>> = features.iter().map(|e| params.w_k.matvec(e)).collect();
    let logits: Vec<f64> = keys.iter().map(|k| dot(&query, k) * scale).collect();
    let weights = softmax(&logits);
    let mut output = vec![0.0; d_mem];
    for (w, e) in weights.iter().zip(features) {
        axpy(*w, e, &mut output);
    }
    AttnTrace {
        query,
        keys,
        weights,
        output,
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Backward through [`attn_trace`] given `d_output`. Features are frozen
/// bank rows and receive no gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attn_backward(
    h: &[f64],
    features: &[Vec<f64>],
    trace: &AttnTrace,
    params: &AttnParams,
    d_output: &[f64],
    dh: &mut [f64],
    d_wq: &mut Matrix,
    d_wk: &mut Matrix,
) {
    if features.is_empty() {
        return;
    }
    let scale = 1.0 / (h.len() as f64).sqrt();
    let da: Vec<f64> = features.iter().map(|e| dot(d_output, e)).collect();
    let mean: f64 = trace.weights.iter().zip(&da).map(|(w, d)| w * d).sum();
    let mut dq = vec![0.0; trace.query.len()];
    for (n, e) in features.iter().enumerate() {
        let dl = trace.weights[n] * (da[n] - mean) * scale;
        if dl == 0.0 {
            continue;
        }
        axpy(dl, &trace.keys[n], &mut dq);
        let dk: Vec<f64> = trace.query.iter().map(|q| q * dl).collect();
        d_wk.add_outer(&dk, e);
    }
    d_wq.add_outer(&dq, h);
    params.w_q.matvec_t_acc(&dq, dh);
}
