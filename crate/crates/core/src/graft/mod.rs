//! Gated residual injection of retrieved memory.

mod attn;
mod backward;
mod blob;
mod forward;
pub mod gradcheck;
mod params;
mod probe;

pub use attn::{attn_aggregate, AttnTrace};
pub use backward::{graft_backward, GraftGrads};
pub use blob::{
    load_params_blob, read_params_blob, save_params_blob, write_params_blob, PARAMS_MAGIC, PARAMS_VERSION,
};
pub use forward::{graft_forward, GraftForwardRecord, MemorySource};
pub use params::{AttnParams, GraftLayerParams, GraftMode, LayerShape, ParamGroup};
pub use probe::{probe_gates, GateProbe};

use crate::error::{Error, Result};

/// Dense `(B, T, C, D)` hidden states, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenBlock {
    batch: usize,
    time: usize,
    branches: usize,
    dim: usize,
    data: Vec<f64>,
}

impl HiddenBlock {
    pub fn new(batch: usize, time: usize, branches: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if branches == 0 || dim == 0 {
            return Err(Error::Shape("hidden block needs C >= 1 and D >= 1".into()));
        }
        if data.len() != batch * time * branches * dim {
            return Err(Error::Shape(format!(
                "hidden block ({batch},{time},{branches},{dim}) needs {} values, got {}",
                batch * time * branches * dim,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("hidden state element {i}")));
        }
        Ok(HiddenBlock {
            batch,
            time,
            branches,
            dim,
            data,
        })
    }

    pub fn zeros(batch: usize, time: usize, branches: usize, dim: usize) -> Self {
        HiddenBlock {
            batch,
            time,
            branches,
            dim,
            data: vec![0.0; batch * time * branches * dim],
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn branches(&self) -> usize {
        self.branches
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of (b, t) positions.
    pub fn positions(&self) -> usize {
        self.batch * self.time
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    fn offset(&self, pos: usize, c: usize) -> usize {
        (pos * self.branches + c) * self.dim
    }

    /// Vector at flat position `pos = b·T + t` and branch `c`.
    pub fn at(&self, pos: usize, c: usize) -> &[f64] {
        let o = self.offset(pos, c);
        &self.data[o..o + self.dim]
    }

    pub fn at_mut(&mut self, pos: usize, c: usize) -> &mut [f64] {
        let o = self.offset(pos, c);
        &mut self.data[o..o + self.dim]
    }

    /// All branches at one position, `C·D` values.
    pub fn position(&self, pos: usize) -> &[f64] {
        let w = self.branches * self.dim;
        &self.data[pos * w..(pos + 1) * w]
    }
}
