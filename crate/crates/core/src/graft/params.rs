use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// How retrieved memory reaches the residual stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub enum GraftMode {
    /// Attention over every matched order, added without the gate.
    AttnOnly,
    /// Attention over every matched order, then the query-key gate.
    AttnGated,
    /// Longest exact match through the gate; misses contribute zero memory.
    LongestGated,
    /// Longest exact match through the gate; misses use the hashed fallback.
    LongestGatedFallback,
    /// Hashed fallback at every position; the bank is never consulted.
    EngramOnly,
}

impl GraftMode {
    pub const ALL: [GraftMode; 5] = [
        GraftMode::AttnOnly,
        GraftMode::AttnGated,
        GraftMode::LongestGated,
        GraftMode::LongestGatedFallback,
        GraftMode::EngramOnly,
    ];

    pub fn code(self) -> u32 {
        match self {
            GraftMode::AttnOnly => 1,
            GraftMode::AttnGated => 2,
            GraftMode::LongestGated => 3,
            GraftMode::LongestGatedFallback => 4,
            GraftMode::EngramOnly => 5,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        GraftMode::ALL
            .into_iter()
            .find(|m| m.code() == code)
            .ok_or_else(|| Error::Config(format!("unknown graft mode code {code}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            GraftMode::AttnOnly => "attn_only",
            GraftMode::AttnGated => "attn_gated",
            GraftMode::LongestGated => "longest_gated",
            GraftMode::LongestGatedFallback => "longest_gated_fallback",
            GraftMode::EngramOnly => "engram_only",
        }
    }

    pub fn is_attn(self) -> bool {
        matches!(self, GraftMode::AttnOnly | GraftMode::AttnGated)
    }

    pub fn is_gated(self) -> bool {
        self != GraftMode::AttnOnly
    }

    pub fn uses_bank(self) -> bool {
        self != GraftMode::EngramOnly
    }

    pub fn uses_fallback(self) -> bool {
        matches!(self, GraftMode::LongestGatedFallback | GraftMode::EngramOnly)
    }
}

impl FromStr for GraftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let by_number = match s {
            "1" => Some(GraftMode::AttnOnly),
            "2" => Some(GraftMode::AttnGated),
            "3" => Some(GraftMode::LongestGated),
            "4" => Some(GraftMode::LongestGatedFallback),
            _ => None,
        };
        by_number
            .or_else(|| GraftMode::ALL.into_iter().find(|m| m.name() == s))
            .ok_or_else(|| Error::Config(format!("unknown graft mode {s:?}")))
    }
}

impl fmt::Display for GraftMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Dimensions of a graft layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct LayerShape {
    /// Branch width `D`.
    pub d: usize,
    /// Bank row width.
    pub d_mem: usize,
    /// Concatenated fallback feature width.
    pub d_fallback: usize,
    /// Residual branches `C`.
    pub branches: usize,
    pub ksize: usize,
    pub mode: GraftMode,
}

impl LayerShape {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d_mem == 0 || self.d_fallback == 0 || self.branches == 0 || self.ksize == 0 {
            return Err(Error::Config(format!("all layer dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }
}

/// Parameter tensors addressable as a flat group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    KeyMem,
    ValueMem,
    KeyEng,
    ValueEng,
    QueryNorm,
    KeyNorm,
    Conv,
    AttnQuery,
    AttnKey,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 9] = [
        ParamGroup::KeyMem,
        ParamGroup::ValueMem,
        ParamGroup::KeyEng,
        ParamGroup::ValueEng,
        ParamGroup::QueryNorm,
        ParamGroup::KeyNorm,
        ParamGroup::Conv,
        ParamGroup::AttnQuery,
        ParamGroup::AttnKey,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::KeyMem => "w_k_mem",
            ParamGroup::ValueMem => "w_v_mem",
            ParamGroup::KeyEng => "w_k_eng",
            ParamGroup::ValueEng => "w_v_eng",
            ParamGroup::QueryNorm => "q_norm_scale",
            ParamGroup::KeyNorm => "k_norm_scale",
            ParamGroup::Conv => "conv_kernels",
            ParamGroup::AttnQuery => "w_q_attn",
            ParamGroup::AttnKey => "w_k_attn",
        }
    }
}

/// Query/key projections used only by the attention modes.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams {
    /// `D × D`, applied to the branch hidden state.
    pub w_q: Matrix,
    /// `D × D_mem`, applied to each matched bank row.
    pub w_k: Matrix,
}

/// Trainable recipient-side parameters. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct GraftLayerParams {
    pub shape: LayerShape,
    /// Per branch, `D × D_mem`.
    pub w_k_mem: Vec<Matrix>,
    /// Shared, `D × D_mem`.
    pub w_v_mem: Matrix,
    /// Per branch, `D × d_fallback`.
    pub w_k_eng: Vec<Matrix>,
    /// Shared, `D × d_fallback`.
    pub w_v_eng: Matrix,
    pub q_norm: Vec<Vec<f64>>,
    pub k_norm: Vec<Vec<f64>>,
    /// Per branch, `ksize × D`.
    pub conv: Vec<Matrix>,
    pub attn: Option<AttnParams>,
}

impl GraftLayerParams {
    /// All-zero tensors of the right shapes.
    pub fn zeros(shape: LayerShape) -> Result<Self> {
        shape.validate()?;
        let LayerShape {
            d,
            d_mem,
            d_fallback,
            branches,
            ksize,
            mode,
        } = shape;
        Ok(GraftLayerParams {
            shape,
            w_k_mem: vec![Matrix::zeros(d, d_mem); branches],
            w_v_mem: Matrix::zeros(d, d_mem),
            w_k_eng: vec![Matrix::zeros(d, d_fallback); branches],
            w_v_eng: Matrix::zeros(d, d_fallback),
            q_norm: vec![vec![0.0; d]; branches],
            k_norm: vec![vec![0.0; d]; branches],
            conv: vec![Matrix::zeros(ksize, d); branches],
            attn: mode.is_attn().then(|| AttnParams {
                w_q: Matrix::zeros(d, d),
                w_k: Matrix::zeros(d, d_mem),
            }),
        })
    }

    /// Projections uniform in `±1/√fan_in`, norm scales one, conv kernels
    /// zero.
    pub fn init(shape: LayerShape, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |m: &mut Matrix| {
            let bound = 1.0 / (m.cols() as f64).sqrt();
            m.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-bound..=bound));
        };
        p.w_k_mem.iter_mut().for_each(&mut fill);
        fill(&mut p.w_v_mem);
        p.w_k_eng.iter_mut().for_each(&mut fill);
        fill(&mut p.w_v_eng);
        if let Some(a) = p.attn.as_mut() {
            fill(&mut a.w_q);
            fill(&mut a.w_k);
        }
        p.q_norm.iter_mut().for_each(|s| s.fill(1.0));
        p.k_norm.iter_mut().for_each(|s| s.fill(1.0));
        Ok(p)
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        ParamGroup::ALL
            .into_iter()
            .filter(|g| !matches!(g, ParamGroup::AttnQuery | ParamGroup::AttnKey) || self.attn.is_some())
            .collect()
    }

    fn slices(&self, g: ParamGroup) -> Vec<&[f64]> {
        match g {
            ParamGroup::KeyMem => self.w_k_mem.iter().map(Matrix::as_slice).collect(),
            ParamGroup::ValueMem => vec![self.w_v_mem.as_slice()],
            ParamGroup::KeyEng => self.w_k_eng.iter().map(Matrix::as_slice).collect(),
            ParamGroup::ValueEng => vec![self.w_v_eng.as_slice()],
            ParamGroup::QueryNorm => self.q_norm.iter().map(Vec::as_slice).collect(),
            ParamGroup::KeyNorm => self.k_norm.iter().map(Vec::as_slice).collect(),
            ParamGroup::Conv => self.conv.iter().map(Matrix::as_slice).collect(),
            ParamGroup::AttnQuery => self.attn.iter().map(|a| a.w_q.as_slice()).collect(),
            ParamGroup::AttnKey => self.attn.iter().map(|a| a.w_k.as_slice()).collect(),
        }
    }

    fn slices_mut(&mut self, g: ParamGroup) -> Vec<&mut [f64]> {
        match g {
            ParamGroup::KeyMem => self.w_k_mem.iter_mut().map(Matrix::as_mut_slice).collect(),
            ParamGroup::ValueMem => vec![self.w_v_mem.as_mut_slice()],
            ParamGroup::KeyEng => self.w_k_eng.iter_mut().map(Matrix::as_mut_slice).collect(),
            ParamGroup::ValueEng => vec![self.w_v_eng.as_mut_slice()],
            ParamGroup::QueryNorm => self.q_norm.iter_mut().map(Vec::as_mut_slice).collect(),
            ParamGroup::KeyNorm => self.k_norm.iter_mut().map(Vec::as_mut_slice).collect(),
            ParamGroup::Conv => self.conv.iter_mut().map(Matrix::as_mut_slice).collect(),
            ParamGroup::AttnQuery => self.attn.iter_mut().map(|a| a.w_q.as_mut_slice()).collect(),
            ParamGroup::AttnKey => self.attn.iter_mut().map(|a| a.w_k.as_mut_slice()).collect(),
        }
    }

    /// The group's values, concatenated branch by branch.
    pub fn group(&self, g: ParamGroup) -> Vec<f64> {
        self.slices(g).concat()
    }

    pub fn set_group(&mut self, g: ParamGroup, values: &[f64]) -> Result<()> {
        let want: usize = self.slices(g).iter().map(|s| s.len()).sum();
        if values.len() != want {
            return Err(Error::Shape(format!(
                "group {} has {want} values, got {}",
                g.name(),
                values.len()
            )));
        }
        let mut at = 0;
        for s in self.slices_mut(g) {
            s.copy_from_slice(&values[at..at + s.len()]);
            at += s.len();
        }
        Ok(())
    }

    pub fn num_values(&self) -> usize {
        self.groups().iter().map(|&g| self.slices(g).iter().map(|s| s.len()).sum::<usize>()).sum()
    }

    /// `self -= lr · grads`
    pub fn sgd_step(&mut self, grads: &GraftLayerParams, lr: f64) -> Result<()> {
        if grads.shape != self.shape {
            return Err(Error::Shape("gradient shape differs from parameters".into()));
        }
        for g in self.groups() {
            for (p, d) in self.slices_mut(g).into_iter().zip(grads.slices(g)) {
                for (pi, di) in p.iter_mut().zip(d) {
                    *pi -= lr * di;
                }
            }
        }
        Ok(())
    }

    pub(crate) fn all_finite(&self) -> bool {
        self.groups()
            .into_iter()
            .all(|g| self.slices(g).iter().all(|s| s.iter().all(|v| v.is_finite())))
    }
}
