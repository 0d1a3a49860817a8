//! Every pipeline stage on a tiny corpus, plus the artifact consistency checks.

use std::path::Path;

use triqa::encoder::EncoderConfig;
use triqa::eval::ReportKind;
use triqa::pipeline::{run_pipeline, PipelineConfig, PipelinePaths, Stage};
use triqa::regression::RegressionModel;
use triqa::synth::{write_corpus, write_toy_dataset};
use triqa::triplet::Manifest;
use triqa::Error;

fn tiny_config(root: &Path) -> PipelineConfig {
    let corpus = root.join("corpus");
    write_corpus(&corpus, 3, 256, 5).unwrap();
    let toy = write_toy_dataset(&root.join("toy"), 4, 3, 128, 5).unwrap();
    PipelineConfig {
        master_seed: 5,
        paths: PipelinePaths {
            corpus,
            work: root.join("work"),
            dataset: Some(toy.nr_table),
            fr_tables: vec![toy.fr_table],
            ..PipelinePaths::default()
        },
        encoder: EncoderConfig {
            max_triplets_per_epoch: Some(32),
            crop: 128,
            batch_size: 16,
            ..EncoderConfig::default()
        },
        ..PipelineConfig::default()
    }
}

#[test]
fn all_stages_then_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out = run_pipeline(&config, &Stage::ALL).unwrap();
    let art = config.artifacts();
    for f in [
        &art.manifest,
        &art.checkpoint,
        &art.features,
        &art.head,
        &art.report,
        &art.report_fr,
        &art.report_ablation,
    ] {
        assert!(f.is_file(), "missing {}", f.display());
        assert!(out.files.contains(f), "{} not reported", f.display());
    }
    let kinds: Vec<ReportKind> = out.reports.iter().map(|r| r.kind).collect();
    assert_eq!(kinds, [ReportKind::Nr, ReportKind::Fr, ReportKind::Ablation]);
    assert_eq!(out.reports[1].results[0].method, "TRIQA-FR");
    assert_eq!(out.reports[2].deltas.len(), 1);

    let head = RegressionModel::load(&art.head).unwrap();
    assert_eq!(head.seed, 5);
    assert_eq!(Manifest::load(&art.manifest).unwrap().entries.len(), 3 * 1008);
    assert_eq!(Manifest::load(&art.manifest_without).unwrap().entries.len(), 3 * 400);

    // a manifest re-forged under another seed orphans the checkpoint
    let reseeded = PipelineConfig {
        master_seed: 6,
        ..config.clone()
    };
    run_pipeline(&reseeded, &[Stage::Forge]).unwrap();
    let err = run_pipeline(&config, &[Stage::Eval]).unwrap_err();
    assert!(matches!(err, Error::FingerprintMismatch(_)), "{err}");
    run_pipeline(&config, &[Stage::Forge]).unwrap();
    run_pipeline(&config, &[Stage::Eval]).unwrap();

    // features computed without the content branch do not match this config
    let no_content = PipelineConfig {
        content_features: false,
        ..config.clone()
    };
    run_pipeline(&no_content, &[Stage::Extract]).unwrap();
    let err = run_pipeline(&config, &[Stage::Eval]).unwrap_err();
    assert!(matches!(err, Error::FingerprintMismatch(_)), "{err}");

    // features from the original weights no longer match an edited checkpoint
    run_pipeline(&config, &[Stage::Extract]).unwrap();
    let mut bytes = std::fs::read(&art.checkpoint).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    std::fs::write(&art.checkpoint, bytes).unwrap();
    assert!(run_pipeline(&config, &[Stage::Eval]).is_err());
}

#[test]
fn toml_config_drives_a_forge() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("c"), 2, 64, 1).unwrap();
    let text = format!(
        "master_seed = 3\ninclude_combined = false\n[paths]\ncorpus = {:?}\nwork = {:?}\n",
        dir.path().join("c"),
        dir.path().join("w")
    );
    let path = dir.path().join("run.toml");
    std::fs::write(&path, text).unwrap();
    let config = PipelineConfig::load(&path).unwrap();
    run_pipeline(&config, &[Stage::Forge]).unwrap();
    let manifest = Manifest::load(&config.artifacts().manifest).unwrap();
    assert_eq!(manifest.header.master_seed, 3);
    assert_eq!(manifest.entries.len(), 800);

    let err = PipelineConfig::from_toml("master_seed = 1\nbogus = 2\n").unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}
