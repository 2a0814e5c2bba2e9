use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn sefun(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sefun")).args(args).output().expect("spawn sefun")
}

fn ok(args: &[&str]) -> String {
    let out = sefun(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every training, prediction, indexing and decoding artifact, built in `dir`.
fn build_all(dir: &Path) -> Vec<PathBuf> {
    let p = |name: &str| dir.join(name);
    ok(&["--seed", "9", "corpus", "synth", "--pairs", "200", "--keyword", "--noise", "0.2", "--out", s(&p("c.jsonl"))]);
    ok(&["--seed", "9", "cfm", "train", "--corpus", s(&p("c.jsonl")), "--encoder", "cnn", "--epochs", "2", "--out", s(&p("cfm.bin"))]);
    ok(&[
        "--seed", "9", "cft", "train", "--corpus", s(&p("c.jsonl")), "--with-query-sf", "--epochs", "2", "--out",
        s(&p("cft.bin")),
    ]);
    ok(&["ir", "build-index", s(&p("c.jsonl")), s(&p("idx.bin"))]);
    ok(&[
        "--seed", "9", "gen", "train", "--model", "cseq2seq", "--level", "2", "--corpus", s(&p("c.jsonl")), "--epochs",
        "1", "--out", s(&p("gen.bin")), "--vocab-out", s(&p("vocab.txt")),
    ]);
    fs::write(p("queries.txt"), "我喜欢猫咪。\n为什么电影？\n\n快点跑步！\n").unwrap();
    ok(&["cfm", "predict", "--model", s(&p("cfm.bin")), "--input", s(&p("queries.txt")), "--out", s(&p("cfm.jsonl"))]);
    ok(&["cfm", "annotate", "--model", s(&p("cfm.bin")), s(&p("c.jsonl")), s(&p("annotated.jsonl"))]);
    ok(&[
        "cft", "predict", "--model", s(&p("cft.bin")), "--cfm", s(&p("cfm.bin")), "--input", s(&p("queries.txt")),
        "--out", s(&p("cft.jsonl")),
    ]);
    ok(&[
        "ir", "respond", "--index", s(&p("idx.bin")), "--cfm", s(&p("cfm.bin")), "--cft", s(&p("cft.bin")), "--level",
        "2", "--rerank", "--candidates", "--input", s(&p("queries.txt")), "--out", s(&p("ir.jsonl")),
    ]);
    ok(&[
        "gen", "decode", "--model", s(&p("gen.bin")), "--target-sf", "IN:Yes-no IN", "--beam", "3", "--max-len", "8",
        "--nbest", "2", "--input", s(&p("queries.txt")), "--out", s(&p("gen.jsonl")),
    ]);
    [
        "c.jsonl", "cfm.bin", "cft.bin", "idx.bin", "gen.bin", "vocab.txt", "cfm.jsonl", "annotated.jsonl", "cft.jsonl",
        "ir.jsonl", "gen.jsonl",
    ]
    .iter()
    .map(|n| p(n))
    .collect()
}

#[test]
fn reruns_with_the_same_seed_are_byte_identical() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let fa = build_all(a.path());
    let fb = build_all(b.path());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }
    // Three non-blank queries give three output lines.
    for name in ["cfm.jsonl", "cft.jsonl", "ir.jsonl", "gen.jsonl"] {
        let text = fs::read_to_string(a.path().join(name)).unwrap();
        assert_eq!(text.lines().count(), 3, "{name}");
        for line in text.lines() {
            serde_json::from_str::<serde_json::Value>(line).unwrap();
        }
    }
    let gen: serde_json::Value =
        serde_json::from_str(fs::read_to_string(a.path().join("gen.jsonl")).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(gen["target"], "IN:Yes-no IN");
    assert_eq!(gen["nbest"].as_array().unwrap().len(), 2);
    assert!(fs::read_to_string(a.path().join("vocab.txt")).unwrap().starts_with("#sefun-vocab v1\n"));
}

#[test]
fn different_seeds_give_different_corpora() {
    let d = TempDir::new().unwrap();
    let (x, y) = (d.path().join("x"), d.path().join("y"));
    ok(&["--seed", "1", "corpus", "synth", "--pairs", "50", "--out", s(&x)]);
    ok(&["--seed", "2", "corpus", "synth", "--pairs", "50", "--out", s(&y)]);
    assert_ne!(fs::read(&x).unwrap(), fs::read(&y).unwrap());
}

#[test]
fn taxonomy_lists_every_label() {
    let out = ok(&["taxonomy"]);
    assert!(out.contains("DE:Other types of DE"));
    assert!(out.contains("EX:EX with greetings"));
    assert!(out.contains("4 coarse, 20 fine-grained labels"));
}

#[test]
fn stats_count_primary_labels() {
    let d = TempDir::new().unwrap();
    let c = d.path().join("c.jsonl");
    ok(&["corpus", "synth", "--pairs", "120", "--weights", "dataset-query", "--out", s(&c)]);
    let out = ok(&["corpus", "stats", s(&c)]);
    assert!(out.starts_with("pairs: 120\n"));
    assert!(out.contains("segments: query 120 (0 unlabeled), response 120 (0 unlabeled)"));
    let total = out.lines().find(|l| l.starts_with("total labeled")).unwrap();
    let nums: Vec<&str> = total.split_whitespace().collect();
    assert_eq!(&nums[2..], ["120", "120"]);
}

fn record(pair: usize, who: &str, query: &[&str], response: &[&str]) -> String {
    let seg = |labels: &[&str]| serde_json::json!([{ "level2": labels }]);
    serde_json::json!({ "pair_index": pair, "annotator": who, "query": seg(query), "response": seg(response) }).to_string()
}

#[test]
fn adjudicate_then_confirm() {
    let d = TempDir::new().unwrap();
    let p = |n: &str| d.path().join(n);
    let raw = (0..3)
        .map(|i| format!(r#"{{"query":[{{"text":"问题{i}？"}}],"response":[{{"text":"回答{i}。"}}]}}"#))
        .collect::<Vec<_>>()
        .join("\n");
    fs::write(p("pairs.jsonl"), format!("#sefun-corpus v1\n{raw}\n")).unwrap();
    let (pos, neg, oth, yn) = ("DE:Positive DE", "DE:Negative DE", "DE:Other types of DE", "IN:Yes-no IN");
    let records = [
        // Unanimous.
        record(0, "a", &[yn], &[pos]),
        record(0, "b", &[yn], &[pos]),
        record(0, "c", &[yn], &[pos]),
        // Annotator c adds a second label: pending on c.
        record(1, "a", &[yn], &[pos]),
        record(1, "b", &[yn], &[pos]),
        record(1, "c", &[yn], &[pos, neg]),
        // No two annotators share a response label.
        record(2, "a", &[yn], &[pos]),
        record(2, "b", &[yn], &[neg]),
        record(2, "c", &[yn], &[oth]),
    ];
    fs::write(p("records.jsonl"), records.join("\n")).unwrap();
    let out = ok(&[
        "corpus", "adjudicate", s(&p("pairs.jsonl")), s(&p("records.jsonl")), "--out", s(&p("gold.jsonl")), "--pending",
        s(&p("pending.jsonl")),
    ]);
    assert!(out.contains("accepted: 1\n"), "{out}");
    assert!(out.contains("pending confirmation: 1\n"), "{out}");
    assert!(out.contains("dropped (labels from all annotators have no overlap): 1\n"), "{out}");
    let pending = fs::read_to_string(p("pending.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(pending.lines().next().unwrap()).unwrap();
    assert_eq!(v["pair_index"], 1);
    assert_eq!(v["dissenter"], "c");
    assert_eq!(v["pair"]["response"][0]["sf2"], pos);

    fs::write(p("answers.jsonl"), r#"{"pair_index": 1, "agrees": true}"#).unwrap();
    let out = ok(&["corpus", "confirm", s(&p("pending.jsonl")), s(&p("answers.jsonl")), "--out", s(&p("more.jsonl"))]);
    assert!(out.contains("accepted: 1\n"), "{out}");
    let stats = ok(&["corpus", "stats", s(&p("more.jsonl"))]);
    assert!(stats.starts_with("pairs: 1\n"));

    fs::write(p("answers.jsonl"), r#"{"pair_index": 1, "agrees": false}"#).unwrap();
    let out = ok(&["corpus", "confirm", s(&p("pending.jsonl")), s(&p("answers.jsonl")), "--out", s(&p("none.jsonl"))]);
    assert!(out.contains("accepted: 0\nrejected: 1\n"), "{out}");
}

#[test]
fn metrics_from_label_files() {
    let d = TempDir::new().unwrap();
    let (g, p) = (d.path().join("gold"), d.path().join("pred"));
    fs::write(&g, "DE:Positive DE\nIN:Yes-no IN\nIM:IM with request\nEX:EX with greetings\n").unwrap();
    fs::write(&p, "DE:Negative DE\nIN:Yes-no IN\nIM:IM with request\nIN:Wh-style IN\n").unwrap();
    let l2 = ok(&["eval", "metrics", s(&g), s(&p)]);
    assert!(l2.starts_with("samples 4  accuracy 0.5000"), "{l2}");
    let l1 = ok(&["eval", "metrics", s(&g), s(&p), "--level", "1"]);
    assert!(l1.starts_with("samples 4  accuracy 0.7500"), "{l1}");
    fs::write(&p, "DE\n").unwrap();
    assert!(!sefun(&["eval", "metrics", s(&g), s(&p)]).status.success());
}

#[test]
fn pipeline_writes_sheets_that_ingest_back() {
    let d = TempDir::new().unwrap();
    let cfg = d.path().join("cfg.toml");
    fs::write(
        &cfg,
        "[pipeline]\nlevel = 2\ngrading_sample = 6\n\n[pipeline.synthetic]\ntrain_pairs = 200\ntest_pairs = 8\n\n\
         [pipeline.classifier]\nmax_epochs = 2\n",
    )
    .unwrap();
    let out_dir = d.path().join("out");
    let report = ok(&["--config", s(&cfg), "--seed", "5", "pipeline", "--out-dir", s(&out_dir)]);
    assert!(report.contains("== ir-rerank"));
    for f in ["report.txt", "records.jsonl", "grading.csv", "grading_key.csv"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(out_dir.join("records.jsonl")).unwrap().lines().count(), 16);

    let sheet = fs::read_to_string(out_dir.join("grading.csv")).unwrap();
    let filled: String = sheet
        .lines()
        .enumerate()
        .map(|(i, l)| if i == 0 { format!("{l}\n") } else { format!("{}5,4,3,0\n", l.trim_end_matches(",,,")) })
        .collect();
    let graded = d.path().join("graded.csv");
    fs::write(&graded, filled).unwrap();
    let scores = ok(&["eval", "grades", "--key", s(&out_dir.join("grading_key.csv")), s(&graded)]);
    assert!(scores.contains("ir-rerank"), "{scores}");
    assert!(scores.contains("1.0000") && scores.contains("0.8000") && scores.contains("0.6000"), "{scores}");
}

#[test]
fn helpful_errors() {
    let d = TempDir::new().unwrap();
    let cfg = d.path().join("bad.toml");
    fs::write(&cfg, "[train]\nnot_a_field = 1\n").unwrap();
    let out = sefun(&["--config", s(&cfg), "taxonomy"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not_a_field"));

    let c = d.path().join("c.jsonl");
    ok(&["corpus", "synth", "--pairs", "60", "--out", s(&c)]);
    let cft = d.path().join("cft.bin");
    ok(&["cft", "train", "--corpus", s(&c), "--with-query-sf", "--epochs", "1", "--out", s(&cft)]);
    let out = sefun(&["cft", "predict", "--model", s(&cft), "你好吗？"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--cfm"));

    let out = sefun(&["cfm", "predict", "--model", s(&d.path().join("missing.bin")), "x"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.bin"));
}
