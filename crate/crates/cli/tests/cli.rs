use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data").join(name)
}

fn postocr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_postocr"))
        .args(args)
        .env_remove("POSTOCR_CONFIG")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = postocr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn triplet(ocr_aligned: &str, gs_aligned: &str) -> String {
    let raw: String = ocr_aligned.chars().filter(|&c| c != '@').collect();
    format!("[OCR_toInput] {raw}\n[OCR_aligned] {ocr_aligned}\n[GS_aligned] {gs_aligned}\n")
}

fn synth(dir: &Path, name: &str, seed: &str, n: &str) -> PathBuf {
    let out = dir.join(name);
    ok(&[
        "synth",
        "--words",
        p(&data("modern_words.tsv")),
        "--matrix",
        p(&data("confusion_demo.tsv")),
        "--sentences",
        n,
        "--seed",
        seed,
        "-o",
        p(&out),
    ]);
    out
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = fs::read(synth(dir.path(), "a.txt", "5", "50")).unwrap();
    let b = fs::read(synth(dir.path(), "b.txt", "5", "50")).unwrap();
    let c = fs::read(synth(dir.path(), "c.txt", "6", "50")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert_ne!(a, c);
    let stats: Value = serde_json::from_str(&ok(&["stats", "-i", p(&dir.path().join("a.txt"))])).unwrap();
    assert_eq!(stats["n_sentences"], 50);
}

#[test]
fn pipeline_on_error_free_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let text: String = ["котка спи", "кучето лае", "хлѣбъ и соль", "зима е", "котка лае", "кучето спи"]
        .iter()
        .map(|s| triplet(s, s))
        .collect::<Vec<_>>()
        .join("\n");
    let corpus = dir.path().join("clean.txt");
    fs::write(&corpus, text).unwrap();
    let lexicon = dir.path().join("lexicon.tsv");
    fs::write(&lexicon, "котка\nспи\nкучето\nлае\nхлѣбъ\nи\nсоль\nзима\nе\n").unwrap();
    let report_path = dir.path().join("report.json");
    ok(&[
        "pipeline",
        "--corpus",
        p(&corpus),
        "--test-corpus",
        p(&corpus),
        "--detector",
        "dict",
        "--corrector",
        "knn",
        "--lexicon",
        p(&lexicon),
        "-o",
        p(&report_path),
    ]);
    let report: Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["improvement"]["improvement_pct"], 0.0);
    assert_eq!(report["detection"]["degenerate"], true);
    assert_eq!(report["detection"]["tp"], 0);
    assert_eq!(report["detection"]["fn"], 0);
}

fn hand_corpus(dir: &Path) -> PathBuf {
    let text = [
        triplet("котка спи", "котка спи"),
        triplet("к@тка яде", "котка яде"),
        triplet("дом@ бѣлъ", "домъ бѣлъ"),
    ]
    .join("\n");
    let path = dir.join("hand.txt");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn evaluate_matches_hand_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = hand_corpus(dir.path());
    // second sentence: the error is fixed and a clean token is flagged but
    // left alone; third sentence: the error is missed
    let rec = |sid: u32, i: usize, orig: &str, corr: &str, flagged: bool| {
        format!(
            r#"{{"source_id":"{sid}","token_index":{i},"original":"{orig}","corrected":"{corr}","flagged":{flagged},"candidates":[],"log_prob":null}}"#
        )
    };
    let lines = [
        rec(1, 0, "котка", "котка", false),
        rec(1, 1, "спи", "спи", false),
        rec(2, 0, "ктка", "котка", true),
        rec(2, 1, "яде", "яде", true),
        rec(3, 0, "дом", "дом", false),
        rec(3, 1, "бѣлъ", "бѣлъ", false),
    ];
    let corrections = dir.path().join("corr.jsonl");
    fs::write(&corrections, lines.join("\n")).unwrap();
    let report: Value = serde_json::from_str(&ok(&["evaluate", "-i", p(&corpus), "--corrections", p(&corrections)])).unwrap();
    let d = &report["detection"];
    assert_eq!((d["tp"].as_u64(), d["fp"].as_u64(), d["fn"].as_u64(), d["tn"].as_u64()), (Some(1), Some(1), Some(1), Some(3)));
    assert_eq!(d["precision"], 0.5);
    assert_eq!(d["recall"], 0.5);
    assert_eq!(d["f1"], 0.5);
    let i = &report["improvement"];
    assert_eq!(i["lev_ocr_sum"], 2);
    assert_eq!(i["lev_corrected_sum"], 1);
    assert_eq!(i["gs_len_sum"], 27);
    assert!((i["improvement_pct"].as_f64().unwrap() - 1.0 / 27.0).abs() < 1e-15);
    assert_eq!(report["test_stats"]["n_errors"], 2);
}

#[test]
fn pipeline_equals_composed_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    let train = synth(dir.path(), "train.txt", "1", "200");
    let test = synth(dir.path(), "test.txt", "2", "40");
    let lexicon = data("modern_words.tsv");
    let common = ["--seed", "3", "--threshold", "0.4"];

    let report_path = dir.path().join("pipe.json");
    let mut args = vec![
        "pipeline",
        "--corpus",
        p(&train),
        "--test-corpus",
        p(&test),
        "--detector",
        "ngram",
        "--corrector",
        "knn",
        "--lexicon",
        p(&lexicon),
        "-o",
        p(&report_path),
    ];
    args.extend(common);
    ok(&args);

    let model = dir.path().join("det.bin");
    let mut args = vec!["train-detect", "--corpus", p(&train), "-o", p(&model)];
    args.extend(common);
    ok(&args);
    let corrections = dir.path().join("corr.jsonl");
    let mut args = vec![
        "correct",
        "-i",
        p(&test),
        "--detector",
        "ngram",
        "--detector-model",
        p(&model),
        "--corrector",
        "knn",
        "--lexicon",
        p(&lexicon),
        "-o",
        p(&corrections),
    ];
    args.extend(common);
    ok(&args);
    let mut args = vec!["evaluate", "-i", p(&test), "--corrections", p(&corrections)];
    args.extend(common);
    let composed: Value = serde_json::from_str(&ok(&args)).unwrap();

    let piped: Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    for key in ["detection", "improvement", "test_stats", "census"] {
        assert_eq!(piped[key], composed[key], "{key}");
    }
    assert!(piped["detection"]["tp"].as_u64().unwrap() > 0);
}

#[test]
fn seq2seq_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let train = synth(dir.path(), "train.txt", "4", "60");
    let config = dir.path().join("tiny.toml");
    fs::write(
        &config,
        "seed = 9\n[correct]\nembedding_dim = 8\nhidden = 8\nepochs = 1\nbeam_width = 2\nmax_output_len = 12\n",
    )
    .unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let vocab = dir.path().join("vocab.txt");
    let cfg = p(&config);
    ok(&["train-correct", "--config", cfg, "--corpus", p(&train), "-o", p(&ckpt), "--vocab", p(&vocab)]);
    let out = ok(&[
        "correct",
        "--config",
        cfg,
        "-i",
        p(&train),
        "--detector",
        "oracle",
        "--checkpoint",
        p(&ckpt),
        "--vocab",
        p(&vocab),
        "--candidates",
        "2",
    ]);
    let records: Vec<Value> = out.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let flagged: Vec<&Value> = records.iter().filter(|r| r["flagged"] == true).collect();
    assert!(!flagged.is_empty());
    for r in &flagged {
        let c = r["candidates"].as_array().unwrap();
        assert!(!c.is_empty() && c.len() <= 2);
        assert_eq!(r["corrected"], c[0]["text"]);
        assert!(r["log_prob"].as_f64().unwrap() <= 0.0);
    }
    assert!(records.iter().filter(|r| r["flagged"] == false).all(|r| r["corrected"] == r["original"]));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(postocr(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(postocr(&["stats"]).status.code(), Some(1));
    assert_eq!(postocr(&["--help"]).status.code(), Some(0));

    let missing = dir.path().join("missing.txt");
    assert_eq!(postocr(&["stats", "-i", p(&missing)]).status.code(), Some(2));
    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "[OCR_toInput] ab\n[OCR_aligned] ab\n[GS_aligned] abc\n").unwrap();
    assert_eq!(postocr(&["stats", "-i", p(&bad)]).status.code(), Some(2));

    let corpus = hand_corpus(dir.path());
    let junk = dir.path().join("junk.bin");
    fs::write(&junk, b"not a model").unwrap();
    let detect = postocr(&["detect", "-i", p(&corpus), "--detector", "ngram", "--detector-model", p(&junk)]);
    assert_eq!(detect.status.code(), Some(3));
    let vocab = dir.path().join("vocab.txt");
    fs::write(&vocab, "").unwrap();
    let correct = postocr(&[
        "correct",
        "-i",
        p(&corpus),
        "--detector",
        "oracle",
        "--checkpoint",
        p(&missing),
        "--vocab",
        p(&vocab),
    ]);
    assert_eq!(correct.status.code(), Some(3));

    let config = dir.path().join("c.toml");
    fs::write(&config, "threshold = 7.0\n").unwrap();
    assert_eq!(postocr(&["--config", p(&config), "stats", "-i", p(&corpus)]).status.code(), Some(1));
}

#[test]
fn config_from_environment_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = hand_corpus(dir.path());
    let config = dir.path().join("c.toml");
    fs::write(&config, "seed = 11\nthreshold = 0.25\n[detect]\nepochs = 3\n").unwrap();
    let run = |extra: &[&str]| -> Value {
        let mut args = vec!["evaluate", "-i", p(&corpus), "--corrections"];
        let corr = dir.path().join("empty.jsonl");
        let out = postocr(&["correct", "-i", p(&corpus), "--detector", "oracle", "--corrector", "identity"]);
        fs::write(&corr, out.stdout).unwrap();
        let corr = corr.to_str().unwrap().to_string();
        args.push(&corr);
        args.extend(extra);
        let out = Command::new(env!("CARGO_BIN_EXE_postocr"))
            .args(&args)
            .env("POSTOCR_CONFIG", &config)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        serde_json::from_slice(&out.stdout).unwrap()
    };
    let from_file = run(&[]);
    assert_eq!(from_file["config"]["seed"], 11);
    assert_eq!(from_file["config"]["threshold"], 0.25);
    // partial tables keep the remaining defaults
    assert_eq!(from_file["config"]["detect"]["epochs"], 3);
    assert_eq!(from_file["config"]["detect"]["shape"]["hash_bits"], 20);
    let overridden = run(&["--seed", "12", "--threshold", "0.75"]);
    assert_eq!(overridden["config"]["seed"], 12);
    assert_eq!(overridden["config"]["detect"]["seed"], 12);
    assert_eq!(overridden["config"]["threshold"], 0.75);
    // oracle detection with identity correction leaves every error in place
    assert_eq!(from_file["improvement"]["improvement_pct"], 0.0);
    assert_eq!(from_file["detection"]["recall"], 1.0);
}
