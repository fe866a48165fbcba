use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use memgraft::bank::provider::write_provider_file;
use memgraft::bank::{bank_stats, read_bank};
use memgraft::corpus::{count_ngrams, parse_text_corpus, NgramCountTable, NgramKey};
use memgraft::diagnostics::{read_hidden_dump, write_hidden_dump};
use memgraft::numerics::Matrix;
use tempfile::TempDir;

const CORPUS: &str = "\
1 2 3 1 2 3 4 5 1 2
3 1 2 4 4 4 1 2 3 9
7 1 2 3 1 2 3 4 5 6 1 2 3
";

struct Env {
    dir: TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("c.txt"), CORPUS).unwrap();
        Env { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_memgraft"))
            .current_dir(self.dir.path())
            .args(["--vocab-size", "16"])
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key} in\n{text}"))
}

fn read_counts(p: &Path) -> NgramCountTable {
    NgramCountTable::read_from(BufReader::new(File::open(p).unwrap())).unwrap()
}

#[test]
fn count_matches_library_and_echoes_config() {
    let env = Env::new();
    env.ok(&["count", "c.txt", "--out", "counts.tsv"]);
    let got = read_counts(&env.path("counts.tsv"));
    let want = count_ngrams(&parse_text_corpus(CORPUS.as_bytes(), 16).unwrap(), &[2, 3, 4]).unwrap();
    for n in [2, 3, 4] {
        assert_eq!(got.ranked(n), want.ranked(n));
    }
    let text = fs::read_to_string(env.path("counts.tsv")).unwrap();
    assert!(text.contains("# config.vocab_size=16"));
    assert!(text.contains("# config.orders_bank=2,3,4"));
    assert!(text.contains("1 2:"));
}

#[test]
fn count_orders_flag_restricts_output() {
    let env = Env::new();
    env.ok(&["count", "c.txt", "--out", "two.tsv", "--orders", "2"]);
    let t = read_counts(&env.path("two.tsv"));
    assert_eq!(t.orders().collect::<Vec<_>>(), vec![2]);
}

#[test]
fn data_errors_exit_2_usage_errors_exit_1() {
    let env = Env::new();
    let out = env.run(&["count", "missing.txt", "--out", "x"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.txt"));

    fs::write(env.path("bad.txt"), "1 2 x\n").unwrap();
    assert_eq!(code(&env.run(&["count", "bad.txt", "--out", "x"])), 2);
    fs::write(env.path("big.txt"), "1 2 99\n").unwrap();
    assert_eq!(code(&env.run(&["count", "big.txt", "--out", "x"])), 2);

    assert_eq!(code(&env.run(&["count"])), 1);
    assert_eq!(code(&env.run(&["frobnicate"])), 1);
    assert_eq!(code(&env.run(&["--heads", "5", "gradcheck", "--instances", "1"])), 1);
    assert_eq!(code(&env.run(&["--mode", "9", "gradcheck", "--instances", "1"])), 1);
    assert_eq!(code(&env.run(&["--help"])), 0);
}

#[test]
fn config_file_with_flag_override() {
    let env = Env::new();
    fs::write(env.path("run.cfg"), "# test\nk_per_order=3\nd_mem=8\norders_bank=2,3\n").unwrap();
    let out = env.ok(&["--config", "run.cfg", "--d-mem", "4", "build-bank", "--corpus", "c.txt", "--out", "b.bin"]);
    assert_eq!(field(&out, "entries"), "6");
    assert_eq!(field(&out, "d_mem"), "4");
    assert_eq!(field(&out, "# config.d_mem"), "4");
    assert_eq!(field(&out, "# config.k_per_order"), "3");

    // Underscore spellings are accepted too.
    let out = env.ok(&["--config", "run.cfg", "--k_per_order", "1", "build-bank", "--dry-run"]);
    assert_eq!(field(&out, "entries"), "2");

    fs::write(env.path("bad.cfg"), "colour=blue\n").unwrap();
    assert_eq!(code(&env.run(&["--config", "bad.cfg", "gradcheck"])), 1);
}

#[test]
fn build_bank_is_deterministic_and_sized_by_k() {
    let env = Env::new();
    env.ok(&["count", "c.txt", "--out", "counts.tsv"]);
    let args = |out: &'static str| ["--provider", "synthetic:7", "--k-per-order", "2", "--d-mem", "8", "build-bank", "--counts", "counts.tsv", "--out", out];
    let s1 = env.ok(&args("a.bin"));
    let s2 = env.ok(&args("b.bin"));
    assert_eq!(s1, s2);
    assert_eq!(fs::read(env.path("a.bin")).unwrap(), fs::read(env.path("b.bin")).unwrap());

    let bank = read_bank(&env.path("a.bin")).unwrap();
    let stats = bank_stats(&bank);
    assert_eq!(stats.entries, 6);
    assert_eq!(stats.per_order, vec![(2, 2), (3, 2), (4, 2)]);
    assert_eq!(stats.total_bytes, fs::metadata(env.path("a.bin")).unwrap().len());
    assert_eq!(field(&s1, "total_bytes"), stats.total_bytes.to_string());
    let meta = bank.meta();
    assert_eq!(meta.provider, "synthetic:7");
    assert!(meta.config.iter().any(|(k, v)| k == "k_per_order" && v == "2"));

    let other = env.ok(&["--provider", "synthetic:8", "--k-per-order", "2", "--d-mem", "8", "build-bank", "--counts", "counts.tsv", "--out", "c.bin"]);
    assert_eq!(field(&other, "entries"), "6");
    assert_ne!(fs::read(env.path("a.bin")).unwrap(), fs::read(env.path("c.bin")).unwrap());
}

#[test]
fn dry_run_plans_without_writing() {
    let env = Env::new();
    let out = env.ok(&["--k-per-order", "1000000", "--d-mem", "2048", "build-bank", "--dry-run"]);
    assert_eq!(field(&out, "entries"), "3000000");
    assert_eq!(field(&out, "row_bytes"), "12288000000");
    let json = env.ok(&["--k-per-order", "1000000", "--d-mem", "2048", "build-bank", "--dry-run", "--json"]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["report"]["row_bytes"], 12_288_000_000u64);
    assert_eq!(v["config"]["d_mem"], "2048");
    assert_eq!(fs::read_dir(env.dir.path()).unwrap().count(), 1);
}

#[test]
fn file_provider_with_three_vectors() {
    let env = Env::new();
    let records: Vec<(NgramKey, Vec<f32>)> = [[1u32, 2].as_slice(), &[2, 3], &[1, 2, 3]]
        .iter()
        .enumerate()
        .map(|(i, ids)| (NgramKey::new(ids).unwrap(), vec![i as f32 + 1.0; 5]))
        .collect();
    let f = File::create(env.path("prov.bin")).unwrap();
    write_provider_file(f, 5, &records).unwrap();
    let out = env.ok(&["--provider", "file:prov.bin", "--dtype", "f16", "build-bank", "--out", "fp.bin"]);
    assert_eq!(field(&out, "entries"), "3");
    assert_eq!(field(&out, "# config.d_mem"), "5");
    let bank = read_bank(&env.path("fp.bin")).unwrap();
    assert_eq!(bank.len(), 3);
    let row = bank.row_of_key(&NgramKey::new(&[1, 2, 3]).unwrap()).unwrap();
    assert_eq!(bank.row(row), vec![3.0; 5]);

    // Keys the file lacks are an error.
    env.ok(&["count", "c.txt", "--out", "counts.tsv"]);
    let out = env.run(&["--provider", "file:prov.bin", "build-bank", "--counts", "counts.tsv", "--out", "x.bin"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no vector"));
}

#[test]
fn lookup_by_context_and_corpus() {
    let env = Env::new();
    env.ok(&["--k-per-order", "50", "--d-mem", "4", "build-bank", "--corpus", "c.txt", "--out", "b.bin"]);
    assert!(env.ok(&["lookup", "--bank", "b.bin", "--context", "9 1 2 3"]).starts_with("hit "));
    assert!(env.ok(&["lookup", "--bank", "b.bin", "--context", "3 1 2 3"]).contains("order=4"));
    assert_eq!(env.ok(&["lookup", "--bank", "b.bin", "--context", "15 14"]), "miss\n");

    let out = env.ok(&["lookup", "--bank", "b.bin", "--corpus", "c.txt"]);
    let rows: Vec<&str> = out.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 33);
    // First token of every document misses.
    assert_eq!(rows[0], "0\tmiss");
    assert_eq!(rows[10], "10\tmiss");
    assert!(out.contains("hit_fraction="));
}

#[test]
fn bench_reports_hit_fraction_and_separates_timing() {
    let env = Env::new();
    env.ok(&["--k-per-order", "5", "--d-mem", "4", "build-bank", "--corpus", "c.txt", "--out", "b.bin"]);
    let a = env.ok(&["--repeats", "2", "bench", "--bank", "b.bin", "--corpus", "c.txt"]);
    let b = env.ok(&["--repeats", "2", "bench", "--bank", "b.bin", "--corpus", "c.txt"]);
    let stable = |s: &str| s.split("[timing]").next().unwrap().to_string();
    assert_eq!(stable(&a), stable(&b));
    assert!(field(&a, "hit_fraction").parse::<f64>().unwrap() > 0.0);
    assert!(field(&a, "ns_per_token").parse::<f64>().unwrap() > 0.0);

    fs::write(env.path("empty.txt"), "\n\n").unwrap();
    let out = env.run(&["bench", "--bank", "b.bin", "--corpus", "empty.txt"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty corpus"));

    let scale = env.ok(&["--repeats", "1", "--vocab-size", "500", "--d-mem", "2", "bench", "--scale", "--tokens", "3000", "--small", "100", "--large", "10000", "--json"]);
    let v: serde_json::Value = serde_json::from_str(&scale).unwrap();
    assert_eq!(v["report"]["large"]["bank_entries"], 10_000);
    assert!(v["report"]["latency_ratio"].as_f64().unwrap() > 0.0);
}

fn losses(trace: &str) -> Vec<f64> {
    trace
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("step"))
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}

const GRAFT: [&str; 12] = ["--d", "4", "--d-mem", "4", "--branches", "2", "--batch", "2", "--time", "8", "--k-per-order", "20"];

#[test]
fn graft_steps_zero_gives_initial_loss() {
    let env = Env::new();
    let mut args = GRAFT.to_vec();
    args.extend(["--steps", "0", "graft", "--corpus", "c.txt"]);
    let out = env.ok(&args);
    assert!(out.starts_with("# memgraft graft\n"));
    assert_eq!(losses(&out).len(), 1);
}

#[test]
fn graft_trains_saves_and_resumes() {
    let env = Env::new();
    let mut args = GRAFT.to_vec();
    args.extend(["--steps", "30", "--lr", "0.1", "graft", "--corpus", "c.txt", "--save", "p.bin", "--out", "t.csv", "--dump", "h.bin"]);
    let probe = env.ok(&args);
    let trace = losses(&fs::read_to_string(env.path("t.csv")).unwrap());
    assert_eq!(trace.len(), 31);
    assert!(trace[30] < trace[0], "{trace:?}");
    assert!(field(&probe, "hit_fraction").parse::<f64>().unwrap() > 0.0);
    assert_eq!(field(&probe, "gate_histogram").split(',').count(), 10);

    let dump = read_hidden_dump(&env.path("h.bin")).unwrap();
    assert_eq!(dump.len(), 2);
    assert_eq!((dump[0].rows(), dump[0].cols()), (16, 8));

    // Resuming reproduces the final loss up to f32 storage of the parameters.
    let mut args = GRAFT.to_vec();
    args.extend(["--steps", "0", "--lr", "0.1", "graft", "--corpus", "c.txt", "--resume", "p.bin"]);
    let resumed = losses(&env.ok(&args));
    assert!((resumed[0] - trace[30]).abs() < 1e-5 * trace[30].max(1.0));

    let mut args = GRAFT.to_vec();
    args.extend(["--d", "6", "graft", "--corpus", "c.txt", "--resume", "p.bin"]);
    assert_eq!(code(&env.run(&args)), 1);
}

#[test]
fn graft_is_deterministic_and_runs_every_mode() {
    let env = Env::new();
    let mut finals = Vec::new();
    for mode in ["attn_only", "attn_gated", "longest_gated", "longest_gated_fallback", "engram_only"] {
        let mut args = GRAFT.to_vec();
        args.extend(["--mode", mode, "--steps", "5", "--d-mem-fallback", "16", "--heads", "2", "--table-size", "31", "graft", "--corpus", "c.txt"]);
        let a = env.ok(&args);
        assert_eq!(a, env.ok(&args), "{mode}");
        finals.push((mode, *losses(&a).last().unwrap()));
    }
    eprintln!("final losses after 5 steps: {finals:?}");
}

#[test]
fn graft_needs_enough_tokens() {
    let env = Env::new();
    let out = env.run(&["--batch", "8", "--time", "64", "graft", "--corpus", "c.txt"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn gradcheck_reports_and_passes() {
    let env = Env::new();
    let out = env.ok(&["gradcheck", "--instances", "3"]);
    let max: f64 = field(&out, "max_rel_error").parse().unwrap();
    assert!(max <= 1e-4);
    assert!(out.contains("mode=engram_only tensor=fallback_tables"));
    let one = env.ok(&["gradcheck", "--instances", "1", "--modes", "attn_gated"]);
    assert!(!one.contains("mode=longest"));
    // A huge step makes the difference quotients meaningless: an invariant failure.
    assert_eq!(code(&env.run(&["gradcheck", "--instances", "2", "--step", "0.5"])), 3);
}

#[test]
fn diagnose_geometry_hitrate_cka() {
    let env = Env::new();
    env.ok(&["--k-per-order", "50", "--d-mem", "8", "build-bank", "--corpus", "c.txt", "--out", "b.bin"]);
    let g = env.ok(&["diagnose", "geometry", "--bank", "b.bin", "--json", "g.json"]);
    assert!(g.starts_with("# memgraft diagnose geometry\n"));
    let rank: f64 = field(&g, "effective_rank").parse().unwrap();
    assert!(rank > 1.0 && rank <= 8.0);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(env.path("g.json")).unwrap()).unwrap();
    assert_eq!(v["report"]["effective_rank"].as_f64().unwrap(), rank);
    assert_eq!(g, env.ok(&["diagnose", "geometry", "--bank", "b.bin"]));

    let h = env.ok(&["--k-per-order", "4", "diagnose", "hitrate", "--corpus", "c.txt"]);
    let curve: Vec<(usize, f64)> = h
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with('k'))
        .map(|l| {
            let (k, r) = l.split_once(',').unwrap();
            (k.parse().unwrap(), r.parse().unwrap())
        })
        .collect();
    assert_eq!(curve.iter().map(|c| c.0).collect::<Vec<_>>(), vec![0, 1, 2, 4]);
    assert_eq!(curve[0].1, 0.0);
    assert!(curve.windows(2).all(|w| w[0].1 <= w[1].1));

    let a = Matrix::from_fn(20, 3, |i, j| ((i * 7 + j * 5) % 11) as f64);
    let b = Matrix::from_fn(20, 2, |i, j| ((i * 3 + j) % 5) as f64);
    write_hidden_dump(&env.path("d.bin"), &[a, b]).unwrap();
    let c = env.ok(&["diagnose", "cka", "--a", "d.bin"]);
    let rows: Vec<&str> = c.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "layer_a,b0,b1,argmax");
    let grid: Vec<Vec<f64>> = rows[1..]
        .iter()
        .map(|r| r.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert!((grid[0][1] - 1.0).abs() < 1e-12 && (grid[1][2] - 1.0).abs() < 1e-12);
    assert_eq!(grid[0][2], grid[1][1]);
    assert_eq!((grid[0][3], grid[1][3]), (0.0, 1.0));
}

#[test]
fn threads_setting_does_not_change_artifacts() {
    let env = Env::new();
    let one = env.ok(&["--threads", "1", "--k-per-order", "9", "build-bank", "--corpus", "c.txt", "--out", "t1.bin"]);
    let four = env.ok(&["--threads", "4", "--k-per-order", "9", "build-bank", "--corpus", "c.txt", "--out", "t4.bin"]);
    assert_eq!(one.replace("threads=1", ""), four.replace("threads=4", ""));
    let b1 = read_bank(&env.path("t1.bin")).unwrap();
    let b4 = read_bank(&env.path("t4.bin")).unwrap();
    assert_eq!(bank_stats(&b1), bank_stats(&b4));
    assert!((0..b1.len()).all(|r| b1.row_bits(r) == b4.row_bits(r) && b1.key_of_row(r) == b4.key_of_row(r)));
}
