//! Exit codes, seed precedence and the forge command through the binary.

use std::path::Path;
use std::process::{Command, Output};

fn triqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_triqa"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn manifest_seed(path: &Path) -> u64 {
    let text = std::fs::read_to_string(path).unwrap();
    let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    header["master_seed"].as_u64().unwrap()
}

fn one_image_corpus(dir: &Path) -> String {
    let corpus = dir.join("corpus");
    let out = triqa(&[
        "synth",
        "--out",
        corpus.to_str().unwrap(),
        "--count",
        "1",
        "--size",
        "64",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    corpus.to_str().unwrap().to_string()
}

#[test]
fn exit_codes() {
    assert_eq!(code(&triqa(&["--help"])), 0);
    assert_eq!(code(&triqa(&["forge", "--help"])), 0);
    assert_eq!(code(&triqa(&["bake"])), 1);
    assert_eq!(code(&triqa(&["forge"])), 1);
    assert_eq!(
        code(&triqa(&[
            "forge",
            "--images",
            "/nonexistent/dir",
            "--out",
            "/tmp/x.jsonl"
        ])),
        2
    );

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "no_such_key = 1\n").unwrap();
    let out = triqa(&["--config", bad.to_str().unwrap(), "forge", "--out", "m.jsonl"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn forge_counts_and_seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = one_image_corpus(dir.path());
    let manifest = dir.path().join("work/m.jsonl");
    let m = manifest.to_str().unwrap();

    let out = triqa(&["forge", "--images", &corpus, "--out", m, "--no-combined"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("400 triplets"));
    assert_eq!(manifest_seed(&manifest), 0);

    let out = triqa(&["forge", "--images", &corpus, "--out", m]);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("1008 triplets"));

    let config = dir.path().join("run.toml");
    std::fs::write(&config, "master_seed = 7\ninclude_combined = false\n").unwrap();
    let c = config.to_str().unwrap();
    assert_eq!(
        code(&triqa(&["--config", c, "forge", "--images", &corpus, "--out", m])),
        0
    );
    assert_eq!(manifest_seed(&manifest), 7);
    assert_eq!(
        code(&triqa(&[
            "--config", c, "forge", "--images", &corpus, "--out", m, "--seed", "9"
        ])),
        0
    );
    assert_eq!(manifest_seed(&manifest), 9);

    // training under a seed other than the manifest's is refused
    let out = triqa(&[
        "train",
        "--manifest",
        m,
        "--images",
        &corpus,
        "--seed",
        "8",
        "--out",
        "x.ckpt",
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("master seed"));
}
