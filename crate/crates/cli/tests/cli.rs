use std::path::Path;
use std::process::{Command, Output};

fn headline(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_headline"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, count: usize, seed: u64) -> std::path::PathBuf {
    let path = dir.join(format!("corpus-{count}-{seed}.jsonl"));
    let out = headline(&["synth", "--count", &count.to_string(), "--seed", &seed.to_string(), "--out", s(&path)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    path
}

fn report(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn evaluating_references_against_themselves_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), 20, 3);
    let out = headline(&["evaluate", "--refs", s(&corpus), "--hyps", s(&corpus)]);
    assert!(out.status.success());
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["rouge1", "rouge2", "rougeL"] {
        assert_eq!(r[key]["f1"].as_f64(), Some(1.0), "{r}");
    }
}

#[test]
fn first_sentence_baseline_writes_one_line_per_article() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    std::fs::write(
        &corpus,
        "{\"title\":\"t\",\"text\":\"first bit here. second bit.\"}\n{\"title\":\"u\",\"text\":\"no terminator\"}\n",
    )
    .unwrap();
    let hyps = dir.path().join("out/h.jsonl");
    let out = headline(&["baseline", "first-sentence", "--input", s(&corpus), "--out", s(&hyps)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&hyps)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["title_hyp"], "first bit here.");
    assert_eq!(lines[1]["title_hyp"], "no terminator");
}

#[test]
fn mismatched_counts_and_bad_records_are_user_errors() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), 5, 1);
    let b = synth(dir.path(), 6, 1);
    assert_eq!(headline(&["evaluate", "--refs", s(&a), "--hyps", s(&b)]).status.code(), Some(1));
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"title\": 3}\n").unwrap();
    let out = headline(&["baseline", "first-sentence", "--input", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.jsonl"));
    let missing = dir.path().join("missing.jsonl");
    assert_eq!(headline(&["baseline", "first-sentence", "--input", s(&missing)]).status.code(), Some(1));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(headline(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(headline(&["evaluate"]).status.code(), Some(1));
    assert_eq!(headline(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_config_key_exits_one_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), 10, 2);
    let out_dir = dir.path().join("run");
    let out = headline(&[
        "pipeline", "--corpus", s(&corpus), "--preset", "micro", "--set", "learning_rate=3", "--out-dir", s(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    assert!(!out_dir.exists());
}

fn tiny_pipeline(corpus: &Path, out_dir: &Path) -> Output {
    headline(&[
        "pipeline", "--corpus", s(corpus), "--preset", "micro",
        "--set", "max_steps=30", "--set", "eval_every=15", "--set", "test_size=8",
        "--set", "bpe_vocab=320", "--set", "sgns_epochs=1", "--set", "beam=2",
        "--set", "d_model=16", "--set", "max_len=12",
        "--seed", "5", "--out-dir", s(out_dir),
    ])
}

#[test]
fn pipeline_is_end_to_end_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth(dir.path(), 80, 4);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = tiny_pipeline(&corpus, d);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["split.json", "bpe.vocab", "model.ckpt", "hypotheses.jsonl", "report.json", "first_sentence_report.json"] {
        let (x, y) = (std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap());
        assert!(x == y, "{name} differs between identical runs");
    }
    let r = report(&a.join("report.json"));
    assert_eq!(r["count"].as_u64(), Some(8), "{r}");
}

#[test]
fn staged_commands_chain_together() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let corpus = synth(dir.path(), 60, 8);
    let ok = |out: Output| assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    ok(headline(&["train-bpe", "--corpus", s(&corpus), "--vocab-size", "300", "--out", s(&p("bpe.vocab"))]));
    ok(headline(&[
        "train-embeddings", "--corpus", s(&corpus), "--bpe", s(&p("bpe.vocab")), "--dim", "16", "--epochs", "1",
        "--out", s(&p("emb.txt")),
    ]));
    for kind in ["ut", "rnn"] {
        let ckpt = p(&format!("{kind}.ckpt"));
        ok(headline(&[
            "train", "--model", kind, "--corpus", s(&corpus), "--bpe", s(&p("bpe.vocab")), "--embeddings",
            s(&p("emb.txt")), "--preset", "micro", "--set", "d_model=16", "--set", "max_steps=10", "--set",
            "eval_every=5", "--out", s(&ckpt),
        ]));
        let hyps = p(&format!("{kind}.jsonl"));
        ok(headline(&[
            "generate", "--ckpt", s(&ckpt), "--bpe", s(&p("bpe.vocab")), "--input", s(&corpus), "--beam", "2",
            "--max-len", "6", "--out", s(&hyps),
        ]));
        let out = headline(&["evaluate", "--refs", s(&corpus), "--hyps", s(&hyps)]);
        ok(out.clone());
        let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(r["count"].as_u64(), Some(60));
    }
    // embeddings of the wrong width are a configuration error
    let out = headline(&[
        "train", "--corpus", s(&corpus), "--bpe", s(&p("bpe.vocab")), "--embeddings", s(&p("emb.txt")),
        "--preset", "micro", "--set", "d_model=32", "--out", s(&p("x.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!p("x.ckpt").exists());
}
