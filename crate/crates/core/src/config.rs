//! Flat `key=value` run configuration.

use std::path::Path;
use std::str::FromStr;

use crate::bank::StorageDtype;
use crate::corpus::{validate_orders, CorpusFormat};
use crate::error::{Error, Result};
use crate::graft::{GraftMode, LayerShape};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub vocab_size: u32,
    pub orders_bank: Vec<usize>,
    pub orders_fallback: Vec<usize>,
    pub k_per_order: usize,
    /// Branch width `D`.
    pub d: usize,
    pub d_mem: usize,
    pub d_mem_fallback: usize,
    /// Residual branches `C`.
    pub branches: usize,
    /// Fallback hash heads `K` per order.
    pub heads: usize,
    /// Rows `V'` of each fallback table.
    pub table_size: u32,
    pub ksize: usize,
    pub dtype: StorageDtype,
    /// `synthetic:SEED` or `file:PATH`.
    pub provider: String,
    pub source_layer: String,
    pub mode: GraftMode,
    pub seed: u64,
    pub hash_seed: u64,
    pub corpus_format: CorpusFormat,
    /// Compression map path; empty for the identity map.
    pub compression: String,
    pub batch: usize,
    pub time: usize,
    pub steps: usize,
    pub lr: f64,
    pub sample_norms: usize,
    pub sample_rank: usize,
    pub sample_nn: usize,
    pub repeats: usize,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            vocab_size: 65_536,
            orders_bank: vec![2, 3, 4],
            orders_fallback: vec![2, 3],
            k_per_order: 1_000,
            d: 64,
            d_mem: 64,
            d_mem_fallback: 384,
            branches: 1,
            heads: 8,
            table_size: 112_865,
            ksize: 4,
            dtype: StorageDtype::Bf16,
            provider: "synthetic:0".into(),
            source_layer: "0".into(),
            mode: GraftMode::LongestGatedFallback,
            seed: 0,
            hash_seed: 0,
            corpus_format: CorpusFormat::TextInt,
            compression: String::new(),
            batch: 4,
            time: 64,
            steps: 100,
            lr: 0.05,
            sample_norms: 10_000,
            sample_rank: 2_048,
            sample_nn: 1_024,
            repeats: 5,
            threads: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub const KEYS: [&'static str; 29] = [
        "vocab_size",
        "orders_bank",
        "orders_fallback",
        "k_per_order",
        "d",
        "d_mem",
        "d_mem_fallback",
        "branches",
        "heads",
        "table_size",
        "ksize",
        "dtype",
        "provider",
        "source_layer",
        "mode",
        "seed",
        "hash_seed",
        "corpus_format",
        "compression",
        "batch",
        "time",
        "steps",
        "lr",
        "sample_norms",
        "sample_rank",
        "sample_nn",
        "repeats",
        "threads",
        "config_version",
    ];

    /// Set one key. Hyphens in `key` are read as underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        let v = value.trim();
        match key.as_str() {
            "vocab_size" => self.vocab_size = parse(&key, v)?,
            "orders_bank" => self.orders_bank = parse_list(&key, v)?,
            "orders_fallback" => self.orders_fallback = parse_list(&key, v)?,
            "k_per_order" => self.k_per_order = parse(&key, v)?,
            "d" => self.d = parse(&key, v)?,
            "d_mem" => self.d_mem = parse(&key, v)?,
            "d_mem_fallback" => self.d_mem_fallback = parse(&key, v)?,
            "branches" => self.branches = parse(&key, v)?,
            "heads" => self.heads = parse(&key, v)?,
            "table_size" => self.table_size = parse(&key, v)?,
            "ksize" => self.ksize = parse(&key, v)?,
            "dtype" => self.dtype = v.parse()?,
            "provider" => self.provider = v.to_string(),
            "source_layer" => self.source_layer = v.to_string(),
            "mode" => self.mode = v.parse()?,
            "seed" => self.seed = parse(&key, v)?,
            "hash_seed" => self.hash_seed = parse(&key, v)?,
            "corpus_format" => self.corpus_format = v.parse()?,
            "compression" => self.compression = v.to_string(),
            "batch" => self.batch = parse(&key, v)?,
            "time" => self.time = parse(&key, v)?,
            "steps" => self.steps = parse(&key, v)?,
            "lr" => self.lr = parse(&key, v)?,
            "sample_norms" => self.sample_norms = parse(&key, v)?,
            "sample_rank" => self.sample_rank = parse(&key, v)?,
            "sample_nn" => self.sample_nn = parse(&key, v)?,
            "repeats" => self.repeats = parse(&key, v)?,
            "threads" => self.threads = parse(&key, v)?,
            "config_version" => {
                if v != "1" {
                    return Err(Error::Config(format!("unsupported config_version {v}")));
                }
            }
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Parse `key=value` lines; `#` starts a comment line.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    /// Every key with its current value, in [`Self::KEYS`] order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let values = [
            self.vocab_size.to_string(),
            join(&self.orders_bank),
            join(&self.orders_fallback),
            self.k_per_order.to_string(),
            self.d.to_string(),
            self.d_mem.to_string(),
            self.d_mem_fallback.to_string(),
            self.branches.to_string(),
            self.heads.to_string(),
            self.table_size.to_string(),
            self.ksize.to_string(),
            self.dtype.to_string(),
            self.provider.clone(),
            self.source_layer.clone(),
            self.mode.to_string(),
            self.seed.to_string(),
            self.hash_seed.to_string(),
            match self.corpus_format {
                CorpusFormat::TextInt => "text".to_string(),
                CorpusFormat::BinaryU32 => "bin".to_string(),
            },
            self.compression.clone(),
            self.batch.to_string(),
            self.time.to_string(),
            self.steps.to_string(),
            self.lr.to_string(),
            self.sample_norms.to_string(),
            self.sample_rank.to_string(),
            self.sample_nn.to_string(),
            self.repeats.to_string(),
            self.threads.to_string(),
            "1".to_string(),
        ];
        Self::KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        validate_orders(&self.orders_bank)?;
        validate_orders(&self.orders_fallback)?;
        let dims = [
            ("vocab_size", self.vocab_size as usize),
            ("k_per_order", self.k_per_order),
            ("d", self.d),
            ("d_mem", self.d_mem),
            ("d_mem_fallback", self.d_mem_fallback),
            ("branches", self.branches),
            ("heads", self.heads),
            ("table_size", self.table_size as usize),
            ("ksize", self.ksize),
            ("batch", self.batch),
            ("time", self.time),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        let parts = self.orders_fallback.len() * self.heads;
        if !self.d_mem_fallback.is_multiple_of(parts) {
            return Err(Error::Config(format!(
                "d_mem_fallback {} not divisible by |orders_fallback|·heads = {parts}",
                self.d_mem_fallback
            )));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr {} must be finite and >= 0", self.lr)));
        }
        Ok(())
    }

    pub fn layer_shape(&self) -> LayerShape {
        LayerShape {
            d: self.d,
            d_mem: self.d_mem,
            d_fallback: self.d_mem_fallback,
            branches: self.branches,
            ksize: self.ksize,
            mode: self.mode,
        }
    }
}
