use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hyperprompt::gformer::decode_soft_prompt;
use serde_json::Value;

const TINY: &str = r#"{
  "model": {
    "encoder": {"dim": 16, "layers": 1, "heads": 2},
    "gformer": {"queries": 3, "hidden": 16, "layers": 1, "heads": 2, "node_dim": 16, "lm_dim": 32, "max_text": 128},
    "lm": {"dim": 32, "layers": 2, "heads": 2, "ffn_mult": 2, "max_positions": 256, "max_len": 160, "max_new": 16},
    "prompt_tokens": 3
  },
  "train": {"batch_size": 3}
}"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hyperprompt"));
    c.env_remove("HYPERPROMPT_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn error_json(out: &Output) -> Value {
    let line = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(line.trim()).unwrap_or_else(|_| panic!("stderr is not JSON: {line}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Work {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn work() -> Work {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("tiny.json");
    fs::write(&config, TINY).unwrap();
    Work {
        _dir: dir,
        root,
        config,
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in walk(dir) {
        out.push((
            e.strip_prefix(dir).unwrap().display().to_string(),
            fs::read(&e).unwrap(),
        ));
    }
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut v = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            v.extend(walk(&p));
        } else {
            v.push(p);
        }
    }
    v
}

#[test]
fn convert_csv_counts() {
    let w = work();
    let input = w.root.join("t.csv");
    fs::write(&input, "a,b,c\n1,2,3\n4,5,6\n").unwrap();
    let out = w.root.join("g.json");
    let v = ok(&["convert", "--format", "csv", s(&input), s(&out)]);
    assert_eq!(v["nodes"], 6);
    assert_eq!(v["hyperedges"], 5);
    assert_eq!(v["incidences"], 12);
    let hg: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(hg["nodes"].as_array().unwrap().len(), 6);
}

#[test]
fn convert_triples() {
    let w = work();
    let input = w.root.join("kg.tsv");
    fs::write(&input, "paris\tcapital of\tfrance\nlyon\tcity in\tfrance\n").unwrap();
    let out = w.root.join("g.json");
    let v = ok(&["convert", "--format", "triples", s(&input), s(&out)]);
    assert_eq!(v["hyperedges"], 4);
    assert_eq!(v["incidences"], 8);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_json(&out);
    assert_eq!(e["error"], "Usage");
    assert!(e["message"].as_str().unwrap().contains("Usage:"));
}

#[test]
fn missing_input_is_a_usage_error() {
    let w = work();
    let out = run(&[
        "convert",
        "--format",
        "csv",
        s(&w.root.join("nope.csv")),
        s(&w.root.join("g.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "Usage");
}

#[test]
fn bad_config_is_a_usage_error() {
    let w = work();
    let cfg = w.root.join("bad.json");
    fs::write(&cfg, r#"{"train": {"learning_rate": 1}}"#).unwrap();
    let out = run(&[
        "--config",
        s(&cfg),
        "gen-pretrain",
        "--synthetic",
        "1",
        "--out",
        s(&w.root.join("c")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_table_is_a_runtime_error() {
    let w = work();
    let input = w.root.join("t.csv");
    fs::write(&input, "a,b\n1,2,3\n").unwrap();
    let out = run(&["convert", "--format", "csv", s(&input), s(&w.root.join("g.json"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "RaggedRow");
}

#[test]
fn gen_pretrain_is_reproducible_and_seeded() {
    let w = work();
    let gen = |name: &str, env: Option<&str>, flag: Option<&str>| {
        let out = w.root.join(name);
        let mut c = bin();
        if let Some(e) = env {
            c.env("HYPERPROMPT_SEED", e);
        }
        c.args(["gen-pretrain", "--synthetic", "3", "--per-table", "5", "--out", s(&out)]);
        if let Some(f) = flag {
            c.args(["--seed", f]);
        }
        assert!(c.output().unwrap().status.success());
        files(&out)
    };
    let a = gen("a", None, None);
    assert_eq!(a, gen("b", None, None));
    assert_eq!(a, gen("c", None, Some("0")));
    let env7 = gen("d", Some("7"), None);
    assert_ne!(a, env7);
    assert_eq!(env7, gen("e", Some("3"), Some("7")));
}

#[test]
fn gen_pretrain_from_table_files() {
    let w = work();
    let t = w.root.join("cities.csv");
    fs::write(&t, "city,country\nparis,france\nrome,italy\n").unwrap();
    let out = w.root.join("corpus");
    let v = ok(&["gen-pretrain", "--table", s(&t), "--per-table", "4", "--out", s(&out)]);
    assert_eq!(v["examples"], 4);
    let shard = fs::read_to_string(out.join("shard-00000.jsonl")).unwrap();
    let first: Value = serde_json::from_str(shard.lines().next().unwrap()).unwrap();
    assert_eq!(first["table_id"], "cities");
    for k in ["template", "question", "answer", "hypergraph_path"] {
        assert!(first.get(k).is_some(), "{k}");
    }
}

#[test]
fn end_to_end_pipeline() {
    let w = work();
    let cfg = s(&w.config);
    let corpus = w.root.join("corpus");
    ok(&[
        "--config",
        cfg,
        "gen-pretrain",
        "--synthetic",
        "3",
        "--per-table",
        "4",
        "--out",
        s(&corpus),
    ]);

    let st = ok(&["--config", cfg, "stats", "--corpus", s(&corpus), "--split", "train"]);
    let keys: Vec<_> = st.as_object().unwrap().keys().cloned().collect();
    assert_eq!(
        keys,
        [
            "split",
            "count",
            "input_avg",
            "input_max",
            "output_avg",
            "output_max",
            "trunc_count",
            "nodes_avg"
        ]
    );
    assert_eq!(st["count"], 12);

    let pre = |name: &str, extra: &[&str]| {
        let out = w.root.join(name);
        let mut args = vec![
            "--config",
            cfg,
            "pretrain",
            "--corpus",
            s(&corpus),
            "--out",
            s(&out),
            "--no-timestamps",
        ];
        args.extend_from_slice(&["--max-steps", "6"]);
        args.extend_from_slice(extra);
        ok(&args);
        out
    };
    let p1 = pre("pre1", &[]);
    let p2 = pre("pre2", &[]);
    assert_eq!(files(&p1), files(&p2));
    let log = fs::read_to_string(p1.join("loss.csv")).unwrap();
    assert!(log.starts_with("step,lr,loss,task\n"));
    assert_eq!(log.lines().count(), 7);

    // Interrupted after 2 steps, then resumed: same artifacts as one run.
    let p3 = pre("pre3", &["--stop-after", "2"]);
    assert_eq!(fs::read_to_string(p3.join("loss.csv")).unwrap().lines().count(), 3);
    let state = w.root.join("state-at-2.ckpt");
    fs::copy(p3.join("state.ckpt"), &state).unwrap();
    pre("pre3", &["--resume", s(&state)]);
    assert_eq!(files(&p1), files(&p3));

    let pretrained = p1.join("model.ckpt");
    let bundle = w.root.join("bundle");
    ok(&[
        "--config",
        cfg,
        "train-toy",
        "--corpus",
        s(&corpus),
        "--out",
        s(&bundle),
        "--pretrained",
        s(&pretrained),
        "--max-steps",
        "3",
        "--no-timestamps",
    ]);
    let log = fs::read_to_string(bundle.join("loss.csv")).unwrap();
    assert!(log.lines().skip(1).all(|l| l.ends_with(",instruction")));

    let table = w.root.join("t.csv");
    fs::write(&table, "name,city\nana,lima\nbo,oslo\n").unwrap();
    let graph = w.root.join("g.json");
    ok(&["convert", "--format", "csv", s(&table), s(&graph)]);
    let prompt = w.root.join("prompt.bin");
    let v = ok(&[
        "encode",
        "--bundle",
        s(&bundle),
        "--graph",
        s(&graph),
        "--out",
        s(&prompt),
    ]);
    let q = decode_soft_prompt(&fs::read(&prompt).unwrap()).unwrap();
    assert_eq!((q.rows(), q.cols()), (3, 32));
    assert_eq!((v["rows"].as_u64(), v["cols"].as_u64()), (Some(3), Some(32)));

    let ev = w.root.join("eval");
    let rep = ok(&["eval", "--bundle", s(&bundle), "--corpus", s(&corpus), "--out", s(&ev)]);
    assert_eq!(rep["count"], 12);
    let em = rep["exact_match"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&em));
    assert_eq!(
        fs::read_to_string(ev.join("predictions.jsonl"))
            .unwrap()
            .lines()
            .count(),
        12
    );
}

#[test]
fn train_toy_requires_pretrained_weights_for_full() {
    let w = work();
    let cfg = s(&w.config);
    let corpus = w.root.join("corpus");
    ok(&[
        "--config",
        cfg,
        "gen-pretrain",
        "--synthetic",
        "1",
        "--per-table",
        "2",
        "--out",
        s(&corpus),
    ]);
    let out = run(&[
        "--config",
        cfg,
        "train-toy",
        "--corpus",
        s(&corpus),
        "--out",
        s(&w.root.join("b")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_after_overfitting_scores_high() {
    let w = work();
    let cfg = s(&w.config);
    let corpus = w.root.join("corpus");
    ok(&[
        "--config",
        cfg,
        "gen-pretrain",
        "--synthetic",
        "1",
        "--per-table",
        "2",
        "--out",
        s(&corpus),
    ]);
    let bundle = w.root.join("bundle");
    ok(&[
        "--config",
        cfg,
        "train-toy",
        "--corpus",
        s(&corpus),
        "--out",
        s(&bundle),
        "--ablation",
        "no-pretrain",
        "--tuning",
        "full",
        "--max-steps",
        "300",
        "--lr",
        "3e-3",
        "--batch-size",
        "2",
        "--no-timestamps",
    ]);
    let ev = w.root.join("eval");
    let rep = ok(&["eval", "--bundle", s(&bundle), "--corpus", s(&corpus), "--out", s(&ev)]);
    assert!(rep["exact_match"].as_f64().unwrap() >= 0.95, "{rep}");
    let saved: Value = serde_json::from_slice(&fs::read(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(saved, rep);
}
