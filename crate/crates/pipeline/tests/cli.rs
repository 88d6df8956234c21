use std::fs;
use std::path::Path;
use std::process::Command;

use cm3_core::vq::GrayImage;
use cm3_core::{Document, TokenId};
use cm3_pipeline::config::{RunConfig, THREADS_ENV};
use cm3_pipeline::formats::{read_jsonl, write_pgm};
use serde_json::Value;

struct Out {
    code: i32,
    stdout: String,
    stderr: String,
}

fn cm3(dir: &Path, args: &[&str]) -> Out {
    cm3_env(dir, args, None)
}

fn cm3_env(dir: &Path, args: &[&str], threads: Option<&str>) -> Out {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cm3"));
    cmd.current_dir(dir).args(args).env_remove(THREADS_ENV);
    if let Some(t) = threads {
        cmd.env(THREADS_ENV, t);
    }
    let o = cmd.output().expect("binary runs");
    Out {
        code: o.status.code().unwrap_or(-1),
        stdout: String::from_utf8(o.stdout).unwrap(),
        stderr: String::from_utf8(o.stderr).unwrap(),
    }
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = cm3(dir, args);
    assert_eq!(o.code, 0, "{args:?}\n{}", o.stderr);
    o.stdout
}

/// Synthetic corpus, bank and model in `dir`.
fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["synth", "--output", "corpus.jsonl", "--n-docs", "300"]);
    ok(d, &["build-bank", "--corpus", "corpus.jsonl", "--output", "bank.bin"]);
    ok(
        d,
        &[
            "transform",
            "--corpus",
            "corpus.jsonl",
            "--bank",
            "bank.bin",
            "--output",
            "train.jsonl",
        ],
    );
    ok(d, &["train", "--input", "train.jsonl", "--output", "model.bin"]);
    dir
}

fn first_caption(d: &Path) -> String {
    let docs: Vec<Document> = read_jsonl(&d.join("corpus.jsonl")).unwrap();
    docs[0]
        .caption
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

#[test]
fn generate_is_deterministic_and_reranks_a_mixed_pool() {
    let dir = prepared();
    let d = dir.path();
    let cap = first_caption(d);
    let args = [
        "--seed",
        "7",
        "--n",
        "8",
        "--mix",
        "cfg=4,cdk=4",
        "generate",
        "--model",
        "model.bin",
        "--bank",
        "bank.bin",
        "--caption-tokens",
        &cap,
    ];
    let a = ok(d, &args);
    let b = ok(d, &args);
    assert_eq!(a, b);

    let v: Value = serde_json::from_str(&a).unwrap();
    let cands = v["candidates"].as_array().unwrap();
    assert_eq!(cands.len(), 8);
    let tags: Vec<&str> = cands.iter().map(|c| c["strategy"].as_str().unwrap()).collect();
    assert_eq!(tags, ["cfg", "cfg", "cfg", "cfg", "cdk", "cdk", "cdk", "cdk"]);
    let scores: Vec<f64> = cands.iter().map(|c| c["score"].as_f64().unwrap()).collect();
    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let first_top = scores.iter().position(|&s| s == top).unwrap();
    assert_eq!(v["best"], cands[first_top]);
    for c in cands {
        for t in c["tokens"].as_array().unwrap() {
            let t = t.as_u64().unwrap() as TokenId;
            assert!(t == 1 || (517..581).contains(&t), "token {t}");
        }
    }

    let other = ok(d, &[&["--seed", "8"][..], &args[2..]].concat());
    assert_ne!(a, other);
}

#[test]
fn flag_overrides_config_file_and_unknown_keys_warn() {
    let dir = prepared();
    let d = dir.path();
    fs::write(
        d.join("run.json"),
        r#"{"seed": 7, "decode": {"n_candidates": 2}, "shiny": true}"#,
    )
    .unwrap();
    let cap = first_caption(d);
    let base = [
        "generate",
        "--model",
        "model.bin",
        "--bank",
        "bank.bin",
        "--caption-tokens",
        &cap,
    ];

    let o = cm3(d, &[&["--config", "run.json", "--seed", "9"][..], &base].concat());
    assert_eq!(o.code, 0, "{}", o.stderr);
    assert!(o.stderr.contains("shiny"), "{}", o.stderr);
    let v: Value = serde_json::from_str(&o.stdout).unwrap();
    assert_eq!(v["effective_config"]["seed"], 9);
    assert_eq!(v["effective_config"]["decode"]["seed"], 9);
    assert_eq!(v["candidates"].as_array().unwrap().len(), 2);

    let v: Value = serde_json::from_str(&ok(d, &[&["--config", "run.json"][..], &base].concat())).unwrap();
    assert_eq!(v["effective_config"]["seed"], 7);
}

#[test]
fn empty_config_file_gives_defaults() {
    let dir = prepared();
    let d = dir.path();
    fs::write(d.join("empty.json"), "").unwrap();
    let cap = first_caption(d);
    let out = ok(
        d,
        &[
            "--config",
            "empty.json",
            "generate",
            "--model",
            "model.bin",
            "--bank",
            "bank.bin",
            "--caption-tokens",
            &cap,
        ],
    );
    let v: Value = serde_json::from_str(&out).unwrap();
    let got: RunConfig = serde_json::from_value(v["effective_config"].clone()).unwrap();
    let mut want = RunConfig::default();
    want.decode.base.seed = want.seed;
    assert_eq!(got.vocab, want.vocab);
    assert_eq!(got.decode, want.decode);
    assert_eq!(got.retrieval, want.retrieval);
    assert_eq!(got.experiment, want.experiment);
    assert_eq!(
        (got.seed, got.seq_len, got.retrieved),
        (want.seed, want.seq_len, want.retrieved)
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(cm3(d, &["bogus"]).code, 1);
    assert_eq!(cm3(d, &["--retrieved", "5", "synth", "--output", "x.jsonl"]).code, 1);
    assert_eq!(cm3(d, &["--help"]).code, 0);

    let o = cm3(d, &["build-bank", "--corpus", "missing.jsonl", "--output", "bank.bin"]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("missing.jsonl"), "{}", o.stderr);

    fs::write(d.join("bad.json"), "{seed: ").unwrap();
    let o = cm3(d, &["--config", "bad.json", "synth", "--output", "x.jsonl"]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("bad.json"), "{}", o.stderr);

    fs::write(d.join("junk.jsonl"), "{\"id\": 3}\n").unwrap();
    let o = cm3(d, &["build-bank", "--corpus", "junk.jsonl", "--output", "bank.bin"]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("junk.jsonl"), "{}", o.stderr);
}

#[test]
fn thread_environment_variable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(cm3_env(d, &["synth", "--output", "a.jsonl"], Some("lots")).code, 1);
    assert_eq!(
        cm3_env(d, &["synth", "--output", "a.jsonl", "--n-docs", "50"], Some("1")).code,
        0
    );
    assert_eq!(
        cm3_env(d, &["synth", "--output", "b.jsonl", "--n-docs", "50"], Some("4")).code,
        0
    );
    assert_eq!(
        fs::read(d.join("a.jsonl")).unwrap(),
        fs::read(d.join("b.jsonl")).unwrap()
    );
}

fn stripes(offset: usize) -> GrayImage {
    let pixels = (0..32 * 32)
        .map(|i| {
            if ((i % 32) / 8 + offset).is_multiple_of(2) {
                20
            } else {
                230
            }
        })
        .collect();
    GrayImage::new(32, 32, pixels).unwrap()
}

#[test]
fn ingest_text_and_pgm_documents() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_pgm(&d.join("img/a.pgm"), &stripes(0)).unwrap();
    write_pgm(&d.join("img/b.pgm"), &stripes(1)).unwrap();
    fs::write(
        d.join("raw.jsonl"),
        "{\"id\":\"a\",\"caption_text\":\"a striped card\",\"image_pgm\":\"img/a.pgm\"}\n\
         {\"id\":\"b\",\"caption_text\":\"the other card\",\"image_pgm\":\"img/b.pgm\"}\n",
    )
    .unwrap();
    ok(d, &["fit-vq", "raw.jsonl", "--output", "cb.bin", "--k", "4"]);
    ok(
        d,
        &[
            "ingest",
            "--input",
            "raw.jsonl",
            "--output",
            "docs.jsonl",
            "--codebook",
            "cb.bin",
        ],
    );
    let docs: Vec<Document> = read_jsonl(&d.join("docs.jsonl")).unwrap();
    assert_eq!(docs.len(), 2);
    for doc in &docs {
        assert_eq!(doc.caption.len(), 3);
        assert!(doc.caption.iter().all(|t| (5..517).contains(t)));
        assert_eq!(doc.image.len(), 16);
        assert!(doc.image.iter().all(|t| (517..581).contains(t)));
    }
    assert_ne!(docs[0].image, docs[1].image);
    // Token-form documents pass through unchanged.
    ok(d, &["ingest", "--input", "docs.jsonl", "--output", "again.jsonl"]);
    assert_eq!(
        fs::read(d.join("docs.jsonl")).unwrap(),
        fs::read(d.join("again.jsonl")).unwrap()
    );

    let o = cm3(d, &["ingest", "--input", "raw.jsonl", "--output", "x.jsonl"]);
    assert_eq!(o.code, 1, "{}", o.stderr);
}

#[test]
fn render_sft_records() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let img: Vec<u32> = (517..533).collect();
    let img = serde_json::to_string(&img).unwrap();
    fs::write(
        d.join("tasks.jsonl"),
        format!(
            "{{\"task\":\"ocr\",\"variant\":0,\"fields\":{{\"ocr_content\":\"STOP\",\"image\":{img}}}}}\n\
             {{\"task\":\"ocr\",\"fields\":{{\"ocr_content\":\"EXIT\",\"image\":{img}}}}}\n"
        ),
    )
    .unwrap();
    ok(d, &["render-sft", "--input", "tasks.jsonl", "--output", "sft.jsonl"]);
    let rows: Vec<Value> = read_jsonl(&d.join("sft.jsonl")).unwrap();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        let toks: Vec<u64> = serde_json::from_value(r["tokens"].clone()).unwrap();
        assert_eq!(toks.iter().filter(|&&t| t == 2).count(), 1);
        assert!(toks.ends_with(&(517..533).collect::<Vec<u64>>()));
    }

    fs::write(
        d.join("bad.jsonl"),
        "{\"task\":\"ocr\",\"fields\":{\"colour\":\"red\"}}\n",
    )
    .unwrap();
    let o = cm3(d, &["render-sft", "--input", "bad.jsonl", "--output", "x.jsonl"]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("colour"), "{}", o.stderr);
}
