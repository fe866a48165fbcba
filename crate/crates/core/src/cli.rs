//! The `memgraft` command line.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bank::{
    bank_stats, build_bank, read_bank, write_bank, BankMeta, BankStats, EmbeddingProvider, FileProvider,
    MemoryBank, SyntheticProvider,
};
use crate::bench::{bench_lookup, scaling_bank, zipf_corpus, LookupBench};
use crate::config::RunConfig;
use crate::corpus::{
    compress, count_ngrams, ingest_corpus, select_topk, CompressionMap, NgramCountTable, NgramKey, TokenSequence,
};
use crate::diagnostics::{
    cka_heatmap, geometry, hit_rate_curve, read_hidden_dump, write_hidden_dump, GeometryReport, KeyValueReport, SampleSizes,
};
use crate::error::{Error, Result};
use crate::fallback::{FallbackTables, HashScheme};
use crate::graft::gradcheck::{gradient_check, GradCheckInstance};
use crate::graft::{
    graft_backward, graft_forward, load_params_blob, probe_gates, save_params_blob, GateProbe, GraftLayerParams,
    GraftMode, HiddenBlock,
};
use crate::hash::{hash_ids, mix64};
use crate::numerics::Matrix;

macro_rules! overrides {
    ($($field:ident),* $(,)?) => {
        /// Per-key overrides of the config file. Each takes the key's name
        /// with hyphens or underscores.
        #[derive(Debug, Default, Args)]
        pub struct Overrides {
            $(
                #[arg(long, alias = stringify!($field), value_name = "VALUE", global = true, hide_short_help = true,
                      help = concat!("Override `", stringify!($field), "`"))]
                $field: Option<String>,
            )*
        }

        impl Overrides {
            fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
                $(
                    if let Some(v) = &self.$field {
                        cfg.set(stringify!($field), v)?;
                    }
                )*
                Ok(())
            }
        }
    };
}

overrides!(
    vocab_size,
    orders_bank,
    orders_fallback,
    k_per_order,
    d,
    d_mem,
    d_mem_fallback,
    branches,
    heads,
    table_size,
    ksize,
    dtype,
    provider,
    source_layer,
    mode,
    seed,
    hash_seed,
    corpus_format,
    compression,
    batch,
    time,
    steps,
    lr,
    sample_norms,
    sample_rank,
    sample_nn,
    repeats,
    threads,
);

#[derive(Debug, Parser)]
#[command(name = "memgraft", version, args_override_self = true, about = "Frozen n-gram memory banks with hashed fallback and gated grafting")]
pub struct Cli {
    /// Flat key=value config file; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Count suffix n-grams of a corpus.
    Count {
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Orders to count; defaults to orders_bank.
        #[arg(long, value_delimiter = ',')]
        orders: Option<Vec<usize>>,
    },
    /// Select top-k keys and embed them into a bank file.
    BuildBank {
        /// Counts file from `count`.
        #[arg(long, conflicts_with = "corpus")]
        counts: Option<PathBuf>,
        /// Corpus to count directly.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, required_unless_present = "dry_run")]
        out: Option<PathBuf>,
        /// Report sizes without embedding or writing anything.
        #[arg(long)]
        dry_run: bool,
        /// Emit the stats as JSON instead of key=value lines.
        #[arg(long)]
        json: bool,
    },
    /// Longest-match lookups against a bank.
    Lookup {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long, required_unless_present = "context")]
        corpus: Option<PathBuf>,
        /// Whitespace-separated ids, last id is the current token.
        #[arg(long)]
        context: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Lookup latency and hit rate.
    Bench {
        #[arg(long, requires = "corpus")]
        bank: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Compare a small and a large synthetic bank on a Zipf corpus.
        #[arg(long, conflicts_with = "bank")]
        scale: bool,
        #[arg(long, default_value_t = 100_000)]
        tokens: usize,
        #[arg(long, default_value_t = 10_000)]
        small: usize,
        #[arg(long, default_value_t = 1_000_000)]
        large: usize,
        #[arg(long)]
        json: bool,
    },
    /// Train the layer on a toy regression target and print the loss trace.
    Graft {
        #[arg(long)]
        corpus: PathBuf,
        /// Bank file; built from the corpus with the configured provider when absent.
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Parameter blob to start from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Where to write the final parameter blob.
        #[arg(long)]
        save: Option<PathBuf>,
        /// Loss trace CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the input and final output hidden states as a two-layer dump.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Finite-difference check of the layer gradients on random instances.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: u64,
        /// `all` or one mode name.
        #[arg(long, default_value = "all")]
        modes: String,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Geometry, hit-rate and CKA reports.
    Diagnose {
        #[command(subcommand)]
        what: Diagnose,
    },
}

#[derive(Debug, Subcommand)]
enum Diagnose {
    /// Effective rank, PC1 share, norm and nearest-neighbour statistics.
    Geometry {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a JSON report here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Hit rate of nested top-k banks.
    Hitrate {
        #[arg(long)]
        corpus: PathBuf,
        /// Counts file; the corpus is counted when absent.
        #[arg(long)]
        counts: Option<PathBuf>,
        /// Per-order k values; defaults to 0 and powers of two up to k_per_order.
        #[arg(long, value_delimiter = ',')]
        checkpoints: Option<Vec<usize>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Linear CKA between the layers of two hidden dumps.
    Cka {
        #[arg(long)]
        a: PathBuf,
        /// Defaults to `a`.
        #[arg(long)]
        b: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

/// Parse arguments, run, and return the process exit code.
pub fn main_entry() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cli.overrides.apply(&mut cfg)?;
    cfg.validate()?;
    if cfg.threads > 0 {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    match cli.command {
        Command::Count { corpus, out, orders } => cmd_count(&cfg, &corpus, &out, orders),
        Command::BuildBank {
            counts,
            corpus,
            out,
            dry_run,
            json,
        } => cmd_build_bank(&mut cfg, counts.as_deref(), corpus.as_deref(), out.as_deref(), dry_run, json),
        Command::Lookup {
            bank,
            corpus,
            context,
            out,
        } => cmd_lookup(&cfg, &bank, corpus.as_deref(), context.as_deref(), out.as_deref()),
        Command::Bench {
            bank,
            corpus,
            scale,
            tokens,
            small,
            large,
            json,
        } => match (scale, bank, corpus) {
            (true, _, _) => cmd_bench_scale(&cfg, tokens, small, large, json),
            (false, Some(bank), Some(corpus)) => cmd_bench(&cfg, &bank, &corpus, json),
            (false, _, corpus) => {
                // A corpus without a bank: build one from it.
                let corpus = corpus.ok_or_else(|| Error::Config("bench needs --bank and --corpus, or --scale".into()))?;
                let seq = load_corpus(&cfg, &corpus)?;
                let bank = bank_from_corpus(&mut cfg.clone(), &seq)?;
                print_bench(&cfg, &bench_lookup(&bank, &seq, cfg.repeats)?, json)
            }
        },
        Command::Graft {
            corpus,
            bank,
            resume,
            save,
            out,
            dump,
        } => cmd_graft(
            &mut cfg,
            &corpus,
            bank.as_deref(),
            [resume.as_deref(), save.as_deref(), out.as_deref(), dump.as_deref()],
        ),
        Command::Gradcheck { instances, modes, step } => cmd_gradcheck(&cfg, instances, &modes, step),
        Command::Diagnose { what } => match what {
            Diagnose::Geometry { bank, out, json } => cmd_geometry(&cfg, &bank, out.as_deref(), json.as_deref()),
            Diagnose::Hitrate {
                corpus,
                counts,
                checkpoints,
                out,
            } => cmd_hitrate(&cfg, &corpus, counts.as_deref(), checkpoints, out.as_deref()),
            Diagnose::Cka { a, b, out, json } => cmd_cka(&cfg, &a, b.as_deref(), out.as_deref(), json.as_deref()),
        },
    }
}

// ---------------------------------------------------------------- helpers

fn header(command: &str, cfg: &RunConfig) -> String {
    let mut s = format!("# memgraft {command}\n");
    for (k, v) in cfg.pairs() {
        s.push_str(&format!("# config.{k}={v}\n"));
    }
    s
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn config_json(cfg: &RunConfig) -> serde_json::Value {
    serde_json::Value::Object(
        cfg.pairs()
            .into_iter()
            .map(|(k, v)| (k, serde_json::Value::String(v)))
            .collect(),
    )
}

fn to_json<T: serde::Serialize>(cfg: &RunConfig, report: &T) -> Result<String> {
    let v = serde_json::json!({ "config": config_json(cfg), "report": report });
    serde_json::to_string_pretty(&v)
        .map(|s| s + "\n")
        .map_err(|e| Error::Invariant(format!("report serialisation: {e}")))
}

fn load_corpus(cfg: &RunConfig, path: &Path) -> Result<TokenSequence> {
    let seq = ingest_corpus(path, cfg.corpus_format, cfg.vocab_size)?;
    if cfg.compression.is_empty() {
        return Ok(seq);
    }
    let map = CompressionMap::load(Path::new(&cfg.compression), cfg.vocab_size)?;
    Ok(compress(&seq, &map))
}

fn read_counts(path: &Path) -> Result<NgramCountTable> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    NgramCountTable::read_from(BufReader::new(f))
}

fn ranked_keys(cfg: &RunConfig, table: &NgramCountTable) -> Result<BTreeMap<usize, Vec<NgramKey>>> {
    let mut top = select_topk(table, cfg.k_per_order)?;
    top.retain(|n, _| cfg.orders_bank.contains(n));
    for &n in &cfg.orders_bank {
        top.entry(n).or_default();
    }
    Ok(top)
}

enum Provider {
    Synthetic(SyntheticProvider),
    File(FileProvider),
}

impl Provider {
    fn as_dyn(&self) -> &dyn EmbeddingProvider {
        match self {
            Provider::Synthetic(p) => p,
            Provider::File(p) => p,
        }
    }
}

/// Resolve the provider spec. A file provider fixes `d_mem`, which is
/// written back into the config so artifacts echo the real width.
fn open_provider(cfg: &mut RunConfig) -> Result<Provider> {
    let spec = cfg.provider.clone();
    if let Some(seed) = spec.strip_prefix("synthetic:") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| Error::Config(format!("bad synthetic provider seed {seed:?}")))?;
        return Ok(Provider::Synthetic(SyntheticProvider::new(seed, cfg.d_mem)));
    }
    if let Some(path) = spec.strip_prefix("file:") {
        let p = FileProvider::load(Path::new(path))?;
        if p.dim() != cfg.d_mem {
            log::info!("provider file has D_mem = {}; using it", p.dim());
            cfg.d_mem = p.dim();
        }
        return Ok(Provider::File(p));
    }
    Err(Error::Config(format!(
        "provider must be synthetic:SEED or file:PATH, got {spec:?}"
    )))
}

fn bank_from_corpus(cfg: &mut RunConfig, seq: &TokenSequence) -> Result<MemoryBank> {
    let table = count_ngrams(seq, &cfg.orders_bank)?;
    let keys: Vec<NgramKey> = ranked_keys(cfg, &table)?.into_values().flatten().collect();
    let provider = open_provider(cfg)?;
    build_bank(&keys, provider.as_dyn(), cfg.dtype, &cfg.source_layer, cfg.pairs())
}

impl KeyValueReport for BankStats {
    fn fields(&self) -> Vec<(&'static str, String)> {
        let per_order = self
            .per_order
            .iter()
            .map(|(n, c)| format!("{n}:{c}"))
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("entries", self.entries.to_string()),
            ("per_order", per_order),
            ("d_mem", self.d_mem.to_string()),
            ("dtype", self.dtype.clone()),
            ("row_bytes", self.row_bytes.to_string()),
            ("key_bytes", self.key_bytes.to_string()),
            ("header_bytes", self.header_bytes.to_string()),
            ("total_bytes", self.total_bytes.to_string()),
        ]
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

impl KeyValueReport for GateProbe {
    fn fields(&self) -> Vec<(&'static str, String)> {
        let hist = self.histogram.iter().map(u64::to_string).collect::<Vec<_>>().join(",");
        vec![
            ("positions", self.positions.to_string()),
            ("hit_fraction", self.hit_fraction.to_string()),
            ("gate_histogram", hist),
            ("mean_alpha_hits", opt(self.mean_alpha_hits)),
            ("mean_alpha_misses", opt(self.mean_alpha_misses)),
            ("mean_delta_norm_hits", opt(self.mean_delta_hits)),
            ("mean_delta_norm_misses", opt(self.mean_delta_misses)),
        ]
    }
}

// --------------------------------------------------------------- commands

fn cmd_count(cfg: &RunConfig, corpus: &Path, out: &Path, orders: Option<Vec<usize>>) -> Result<()> {
    let seq = load_corpus(cfg, corpus)?;
    let orders = orders.unwrap_or_else(|| cfg.orders_bank.clone());
    let table = count_ngrams(&seq, &orders)?;
    let mut lines = vec!["memgraft count".to_string()];
    lines.extend(cfg.pairs().into_iter().map(|(k, v)| format!("config.{k}={v}")));
    let f = File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = BufWriter::new(f);
    table
        .write_to(&mut w, &lines)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(out, e))?;
    let summary: String = orders
        .iter()
        .map(|&n| format!("order_{n}_distinct={}\norder_{n}_total={}\n", table.order(n).map_or(0, |m| m.len()), table.total(n)))
        .collect();
    emit(None, &format!("tokens={}\ndocs={}\n{summary}", seq.len(), seq.num_docs()))
}

fn cmd_build_bank(
    cfg: &mut RunConfig,
    counts: Option<&Path>,
    corpus: Option<&Path>,
    out: Option<&Path>,
    dry_run: bool,
    json: bool,
) -> Result<()> {
    let table = match (counts, corpus) {
        (Some(c), _) => Some(read_counts(c)?),
        (None, Some(p)) => Some(count_ngrams(&load_corpus(cfg, p)?, &cfg.orders_bank)?),
        (None, None) => None,
    };
    let ranked = table.as_ref().map(|t| ranked_keys(cfg, t)).transpose()?;

    let report = |cfg: &RunConfig, stats: &BankStats| -> Result<()> {
        if json {
            emit(None, &to_json(cfg, stats)?)
        } else {
            emit(None, &format!("{}{}", header("build-bank", cfg), stats.to_kv()))
        }
    };

    if dry_run {
        let per_order: Vec<(usize, u64)> = match &ranked {
            Some(r) => r.iter().map(|(&n, k)| (n, k.len() as u64)).collect(),
            None => cfg.orders_bank.iter().map(|&n| (n, cfg.k_per_order as u64)).collect(),
        };
        if cfg.provider.starts_with("file:") {
            open_provider(cfg)?;
        }
        let meta = BankMeta {
            provider: cfg.provider.clone(),
            source_layer: cfg.source_layer.clone(),
            creation_hash: 0,
            config: cfg.pairs(),
        };
        let stats = BankStats::plan(&per_order, cfg.d_mem, cfg.dtype, meta.to_text().len());
        return report(cfg, &stats);
    }

    let provider = open_provider(cfg)?;
    let keys: Vec<NgramKey> = match (ranked, &provider) {
        (Some(r), _) => r.into_values().flatten().collect(),
        (None, Provider::File(p)) => p.keys(),
        (None, Provider::Synthetic(_)) => {
            return Err(Error::Config("build-bank needs --counts or --corpus with a synthetic provider".into()))
        }
    };
    let bank = build_bank(&keys, provider.as_dyn(), cfg.dtype, &cfg.source_layer, cfg.pairs())?;
    let out = out.ok_or_else(|| Error::Config("build-bank needs --out".into()))?;
    write_bank(&bank, out)?;
    report(cfg, &bank_stats(&bank))
}

fn parse_context(text: &str) -> Result<Vec<u32>> {
    text.split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Config(format!("bad token id {t:?} in --context")))
        })
        .collect()
}

fn cmd_lookup(cfg: &RunConfig, bank: &Path, corpus: Option<&Path>, context: Option<&str>, out: Option<&Path>) -> Result<()> {
    let bank = read_bank(bank)?;
    if let Some(ctx) = context {
        let ids = parse_context(ctx)?;
        let ids: Vec<u32> = if cfg.compression.is_empty() {
            ids
        } else {
            let map = CompressionMap::load(Path::new(&cfg.compression), cfg.vocab_size)?;
            ids.into_iter().map(|x| map.apply(x)).collect()
        };
        return emit(out, &format!("{}\n", bank.exact_lookup(&ids)));
    }
    let corpus = corpus.ok_or_else(|| Error::Config("lookup needs --corpus or --context".into()))?;
    let seq = load_corpus(cfg, corpus)?;
    let results = bank.batch_lookup(&seq);
    let hits = results.iter().filter(|r| r.hit()).count();
    let mut s = header("lookup", cfg);
    s.push_str(&format!(
        "# positions={} hits={} hit_fraction={}\npos\tresult\n",
        results.len(),
        hits,
        hits as f64 / results.len() as f64
    ));
    for (i, r) in results.iter().enumerate() {
        s.push_str(&format!("{i}\t{r}\n"));
    }
    emit(out, &s)
}

fn print_bench(cfg: &RunConfig, b: &LookupBench, json: bool) -> Result<()> {
    if json {
        return emit(None, &to_json(cfg, b)?);
    }
    emit(
        None,
        &format!(
            "{}bank_entries={}\ntokens={}\nhit_fraction={}\nrepeats={}\n[timing]\nns_per_token={}\n",
            header("bench", cfg),
            b.bank_entries,
            b.tokens,
            b.hit_fraction,
            b.repeats,
            b.ns_per_token
        ),
    )
}

fn cmd_bench(cfg: &RunConfig, bank: &Path, corpus: &Path, json: bool) -> Result<()> {
    let bank = read_bank(bank)?;
    let seq = load_corpus(cfg, corpus)?;
    print_bench(cfg, &bench_lookup(&bank, &seq, cfg.repeats)?, json)
}

#[derive(serde::Serialize)]
struct ScaleReport {
    small: LookupBench,
    large: LookupBench,
    latency_ratio: f64,
}

fn cmd_bench_scale(cfg: &RunConfig, tokens: usize, small: usize, large: usize, json: bool) -> Result<()> {
    if tokens == 0 {
        return Err(Error::EmptyCorpus);
    }
    let seq = zipf_corpus(tokens, cfg.vocab_size, 1.1, cfg.seed);
    let a = scaling_bank(&seq, &cfg.orders_bank, small, cfg.vocab_size, cfg.d_mem, cfg.seed)?;
    let ra = bench_lookup(&a, &seq, cfg.repeats)?;
    drop(a);
    let b = scaling_bank(&seq, &cfg.orders_bank, large, cfg.vocab_size, cfg.d_mem, cfg.seed)?;
    let rb = bench_lookup(&b, &seq, cfg.repeats)?;
    let report = ScaleReport {
        latency_ratio: rb.ns_per_token / ra.ns_per_token,
        small: ra,
        large: rb,
    };
    if json {
        return emit(None, &to_json(cfg, &report)?);
    }
    emit(
        None,
        &format!(
            "{}tokens={}\nsmall_entries={}\nlarge_entries={}\nsmall_hit_fraction={}\nlarge_hit_fraction={}\n\
             [timing]\nsmall_ns_per_token={}\nlarge_ns_per_token={}\nlatency_ratio={}\nwithin_2x={}\n",
            header("bench --scale", cfg),
            tokens,
            report.small.bank_entries,
            report.large.bank_entries,
            report.small.hit_fraction,
            report.large.hit_fraction,
            report.small.ns_per_token,
            report.large.ns_per_token,
            report.latency_ratio,
            report.latency_ratio <= 2.0
        ),
    )
}

/// First `n` tokens of `seq`, keeping document boundaries.
fn prefix(seq: &TokenSequence, n: usize) -> Result<TokenSequence> {
    let docs: Vec<Vec<u32>> = (0..seq.num_docs())
        .map(|d| seq.doc_range(d))
        .take_while(|r| r.start < n)
        .map(|r| seq.ids()[r.start..r.end.min(n)].to_vec())
        .collect();
    TokenSequence::from_docs(docs)
}

fn gaussian_vec(seed: u64, ids: &[u32], dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(hash_ids(seed, ids));
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Hidden states keyed by the current token, and a regression target that
/// adds a component keyed by the in-document bigram ending at each token.
fn toy_problem(cfg: &RunConfig, seq: &TokenSequence) -> Result<(HiddenBlock, Vec<f64>)> {
    let (b, t, c_n, d) = (cfg.batch, cfg.time, cfg.branches, cfg.d);
    let h_seed = mix64(cfg.seed ^ 0x6869_6464_656e);
    let y_seed = mix64(cfg.seed ^ 0x7461_7267_6574);
    let ids = seq.ids();
    let mut h = Vec::with_capacity(b * t * c_n * d);
    let mut y = Vec::with_capacity(b * t * c_n * d);
    for pos in 0..b * t {
        let row_start = pos / t * t;
        let start = row_start.max(seq.doc_start_of(pos));
        let context = &ids[start..=pos];
        let tail = &context[context.len().saturating_sub(2)..];
        for c in 0..c_n {
            let hv = gaussian_vec(h_seed, &[ids[pos], c as u32], d);
            let mut key = tail.to_vec();
            key.push(c as u32);
            let yv = gaussian_vec(y_seed, &key, d);
            y.extend(hv.iter().zip(&yv).map(|(a, b)| a + 0.5 * b));
            h.extend(hv);
        }
    }
    Ok((HiddenBlock::new(b, t, c_n, d, h)?, y))
}

fn toy_loss(out: &HiddenBlock, target: &[f64], positions: usize) -> (f64, HiddenBlock) {
    let scale = 1.0 / positions as f64;
    let mut loss = 0.0;
    let grad: Vec<f64> = out
        .as_slice()
        .iter()
        .zip(target)
        .map(|(o, y)| {
            let r = o - y;
            loss += 0.5 * r * r * scale;
            r * scale
        })
        .collect();
    let g = HiddenBlock::new(out.batch(), out.time(), out.branches(), out.dim(), grad).expect("same shape as output");
    (loss, g)
}

fn cmd_graft(
    cfg: &mut RunConfig,
    corpus: &Path,
    bank_path: Option<&Path>,
    [resume, save, out, dump]: [Option<&Path>; 4],
) -> Result<()> {
    let full = load_corpus(cfg, corpus)?;
    let need = cfg.batch * cfg.time;
    if full.len() < need {
        return Err(Error::Config(format!(
            "corpus has {} tokens, graft needs batch·time = {need}",
            full.len()
        )));
    }
    let seq = prefix(&full, need)?;

    let bank = if !cfg.mode.uses_bank() {
        None
    } else if let Some(p) = bank_path {
        Some(read_bank(p)?)
    } else {
        Some(bank_from_corpus(cfg, &full)?)
    };
    if let Some(b) = &bank {
        cfg.d_mem = b.d_mem();
    }

    let (mut params, mut fallback) = match resume {
        Some(p) => {
            let (params, fb) = load_params_blob(p)?;
            if params.shape != cfg.layer_shape() {
                return Err(Error::Config(format!(
                    "resumed parameters have shape {:?}, config gives {:?}",
                    params.shape,
                    cfg.layer_shape()
                )));
            }
            (params, fb)
        }
        None => (GraftLayerParams::init(cfg.layer_shape(), cfg.seed)?, None),
    };
    if cfg.mode.uses_fallback() && fallback.is_none() {
        let scheme = HashScheme::new(&cfg.orders_fallback, cfg.heads, cfg.table_size, cfg.hash_seed)?;
        fallback = Some(FallbackTables::new(scheme, cfg.d_mem_fallback, mix64(cfg.seed ^ 0xfb))?);
    }

    let (h, target) = toy_problem(cfg, &seq)?;
    let mut trace = header("graft", cfg);
    trace.push_str("step,loss\n");
    let mut last = None;
    for step in 0..=cfg.steps {
        let (out_h, rec) = graft_forward(&h, &seq, bank.as_ref(), fallback.as_ref(), &params)?;
        let (loss, d_out) = toy_loss(&out_h, &target, need);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        trace.push_str(&format!("{step},{loss}\n"));
        if step < cfg.steps {
            let grads = graft_backward(&params, &rec, &d_out, fallback.as_ref())?;
            params.sgd_step(&grads.params, cfg.lr)?;
            if let Some(fb) = fallback.as_mut() {
                fb.apply_grad(&grads.fallback, cfg.lr);
            }
        }
        last = Some((out_h, rec));
    }
    let (last_h, last_record) = last.expect("at least one step");
    emit(out, &trace)?;
    if let Some(p) = save {
        save_params_blob(p, &params, fallback.as_ref())?;
    }
    if let Some(p) = dump {
        let width = cfg.branches * cfg.d;
        let layers = [
            Matrix::from_vec(need, width, h.into_vec())?,
            Matrix::from_vec(need, width, last_h.into_vec())?,
        ];
        write_hidden_dump(p, &layers)?;
    }
    if out.is_some() {
        let probe = probe_gates(&last_record, 10);
        emit(None, &probe.to_kv())?;
    }
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, instances: u64, modes: &str, step: f64) -> Result<()> {
    let modes: Vec<GraftMode> = if modes == "all" {
        GraftMode::ALL.to_vec()
    } else {
        modes.split(',').map(str::parse).collect::<Result<_>>()?
    };
    let mut worst = 0.0f64;
    let mut s = String::new();
    for &mode in &modes {
        let mut per_tensor: BTreeMap<String, f64> = BTreeMap::new();
        for i in 0..instances {
            let seed = cfg.seed.wrapping_add(i);
            let inst = GradCheckInstance::random(seed, mode, (2, 4, 2, 8))?;
            let report = gradient_check(&inst, step, seed)?;
            for (name, e) in report.errors {
                let slot = per_tensor.entry(name).or_insert(0.0);
                *slot = slot.max(e);
            }
        }
        for (name, e) in &per_tensor {
            s.push_str(&format!("mode={mode} tensor={name} max_rel_error={e:.3e}\n"));
            worst = worst.max(*e);
        }
    }
    s.push_str(&format!("instances={instances}\nmax_rel_error={worst:.3e}\n"));
    emit(None, &s)?;
    if worst > 1e-4 {
        return Err(Error::Invariant(format!(
            "gradient check failed: max relative error {worst:.3e} > 1e-4"
        )));
    }
    Ok(())
}

fn cmd_geometry(cfg: &RunConfig, bank: &Path, out: Option<&Path>, json: Option<&Path>) -> Result<()> {
    let bank = read_bank(bank)?;
    let sizes = SampleSizes {
        norms: cfg.sample_norms,
        rank: cfg.sample_rank,
        nn: cfg.sample_nn,
    };
    let report: GeometryReport = geometry(&bank, sizes, cfg.seed)?;
    if let Some(p) = json {
        emit(Some(p), &to_json(cfg, &report)?)?;
    }
    emit(out, &format!("{}{}", header("diagnose geometry", cfg), report.to_kv()))
}

fn cmd_hitrate(
    cfg: &RunConfig,
    corpus: &Path,
    counts: Option<&Path>,
    checkpoints: Option<Vec<usize>>,
    out: Option<&Path>,
) -> Result<()> {
    let seq = load_corpus(cfg, corpus)?;
    let table = match counts {
        Some(c) => read_counts(c)?,
        None => count_ngrams(&seq, &cfg.orders_bank)?,
    };
    let ranked = ranked_keys(cfg, &table)?;
    let checkpoints = checkpoints.unwrap_or_else(|| {
        let mut v = vec![0];
        let mut k = 1;
        while k < cfg.k_per_order {
            v.push(k);
            k *= 2;
        }
        v.push(cfg.k_per_order);
        v
    });
    let curve = hit_rate_curve(&seq, &ranked, &checkpoints);
    emit(out, &format!("{}{}", header("diagnose hitrate", cfg), curve.to_csv()))
}

fn cmd_cka(cfg: &RunConfig, a: &Path, b: Option<&Path>, out: Option<&Path>, json: Option<&Path>) -> Result<()> {
    let la = read_hidden_dump(a)?;
    let lb = match b {
        Some(p) => read_hidden_dump(p)?,
        None => la.clone(),
    };
    let heat = cka_heatmap(&la, &lb)?;
    if let Some(p) = json {
        emit(Some(p), &to_json(cfg, &heat)?)?;
    }
    emit(out, &format!("{}{}", header("diagnose cka", cfg), heat.to_csv()))
}
