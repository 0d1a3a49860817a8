//! End-to-end driver: forge a manifest, train the encoder, extract features,
//! fit the regression head and evaluate, with every stage checking the
//! fingerprints of what it consumes.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{DirCorpus, ImageSource};
use crate::distortion::DistortionGrouping;
use crate::encoder::{train, BackbonePreset, Checkpoint, EncoderConfig, TrainOptions};
use crate::error::{Error, Result};
use crate::eval::{
    emit_report, evaluate_fr, evaluate_nr_features, extract_dataset_features, run_ablation, DatasetAdapter,
    DatasetTable, EvalReport, NrOptions, ReportFormat,
};
use crate::features::{ContentEncoder, FeatureSet, Scales};
use crate::regression::{fit, Grid, RegressionModel, SplitProtocol};
use crate::triplet::{build_manifest, render_chain, DegradationChain, Manifest};

/// Pipeline stages in dependency order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Forge,
    Train,
    Extract,
    FitHead,
    Eval,
    EvalFr,
    Ablation,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Forge,
        Stage::Train,
        Stage::Extract,
        Stage::FitHead,
        Stage::Eval,
        Stage::EvalFr,
        Stage::Ablation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Forge => "forge",
            Stage::Train => "train",
            Stage::Extract => "extract",
            Stage::FitHead => "fit-head",
            Stage::Eval => "eval",
            Stage::EvalFr => "eval-fr",
            Stage::Ablation => "ablation",
        }
    }

    /// Parses a comma-separated stage list; `all` selects every stage.
    pub fn parse_list(s: &str) -> Result<Vec<Stage>> {
        if s.trim() == "all" {
            return Ok(Stage::ALL.to_vec());
        }
        s.split(',').map(|p| p.trim().parse()).collect()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelinePaths {
    /// Directory of pristine training images.
    pub corpus: PathBuf,
    /// Where every artifact is written.
    pub work: PathBuf,
    /// MOS table for extract, fit-head, eval and ablation.
    pub dataset: Option<PathBuf>,
    pub dataset_adapter: Option<PathBuf>,
    /// Root the table paths are resolved against; the table's directory
    /// when unset.
    pub dataset_images: Option<PathBuf>,
    /// Full-reference tables (`reference_path,distorted_path,mos`).
    pub fr_tables: Vec<PathBuf>,
    /// Custom grouping file; replaces the built-in table named by
    /// `grouping_version`.
    pub grouping: Option<PathBuf>,
}

/// Everything a run needs. Seeds inside `encoder`, `protocol` and `grid`
/// are overwritten by `master_seed` when resolved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub master_seed: u64,
    pub grouping_version: String,
    pub preset: BackbonePreset,
    pub include_combined: bool,
    pub scales: Scales,
    /// Fuse frozen content features with the quality features.
    pub content_features: bool,
    pub logistic_fit: bool,
    /// Formats written next to each report's JSON.
    pub report_formats: Vec<ReportFormat>,
    pub paths: PipelinePaths,
    pub encoder: EncoderConfig,
    pub protocol: SplitProtocol,
    pub grid: Grid,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            grouping_version: "default".into(),
            preset: BackbonePreset::default(),
            include_combined: true,
            scales: Scales::default(),
            content_features: true,
            logistic_fit: false,
            report_formats: vec![ReportFormat::TableText],
            paths: PipelinePaths::default(),
            encoder: EncoderConfig::default(),
            protocol: SplitProtocol::default(),
            grid: Grid::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Propagates the master seed and preset into the nested sections.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        c.encoder.seed = c.master_seed;
        c.encoder.preset = c.preset;
        c.protocol.seed = c.master_seed;
        c.grid.seed = c.master_seed;
        c.encoder.validate()?;
        c.protocol.validate()?;
        c.grid.validate()?;
        c.scales.provenance()?;
        Ok(c)
    }

    pub fn grouping(&self) -> Result<DistortionGrouping> {
        match &self.paths.grouping {
            Some(p) => DistortionGrouping::load(p),
            None => DistortionGrouping::builtin(&self.grouping_version),
        }
    }

    pub fn artifacts(&self) -> Artifacts {
        Artifacts::in_dir(&self.paths.work)
    }

    fn content_encoder(&self) -> Option<ContentEncoder> {
        self.content_features.then(|| ContentEncoder::frozen(self.preset))
    }

    fn dataset(&self) -> Result<(DatasetTable, PathBuf)> {
        let csv = self
            .paths
            .dataset
            .as_deref()
            .ok_or_else(|| Error::Config("no MOS table configured (paths.dataset)".into()))?;
        let adapter = match &self.paths.dataset_adapter {
            Some(p) => DatasetAdapter::load(p)?,
            None => DatasetAdapter::default(),
        };
        let table = DatasetTable::load(csv, &adapter)?;
        let root = self
            .paths
            .dataset_images
            .clone()
            .unwrap_or_else(|| csv.parent().map(Path::to_path_buf).unwrap_or_default());
        Ok((table, root))
    }

    fn nr_options(&self) -> NrOptions {
        NrOptions {
            grid: self.grid.clone(),
            scales: self.scales,
            logistic_fit: self.logistic_fit,
            ..NrOptions::default()
        }
    }
}

/// File names of the pipeline artifacts inside the work directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    pub manifest: PathBuf,
    pub checkpoint: PathBuf,
    pub features: PathBuf,
    pub head: PathBuf,
    pub report: PathBuf,
    pub report_fr: PathBuf,
    pub manifest_without: PathBuf,
    pub checkpoint_without: PathBuf,
    pub report_ablation: PathBuf,
}

impl Artifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            manifest: dir.join("manifest.jsonl"),
            checkpoint: dir.join("encoder.ckpt"),
            features: dir.join("features.bin"),
            head: dir.join("head.json"),
            report: dir.join("report.json"),
            report_fr: dir.join("report-fr.json"),
            manifest_without: dir.join("manifest-without-combined.jsonl"),
            checkpoint_without: dir.join("encoder-without-combined.ckpt"),
            report_ablation: dir.join("report-ablation.json"),
        }
    }
}

fn require(path: &Path, stage: Stage) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(format!(
            "stage {stage} needs {}; run the upstream stage first",
            path.display()
        )))
    }
}

fn mismatch(what: &str, expected: impl fmt::Display, found: impl fmt::Display) -> Error {
    Error::FingerprintMismatch(format!("{what}: expected {expected}, found {found}"))
}

/// Checks that a manifest was forged from this corpus, grouping and seed.
pub fn check_manifest(
    manifest: &Manifest,
    config: &PipelineConfig,
    corpus_ids: &[String],
    include_combined: bool,
) -> Result<()> {
    let h = &manifest.header;
    if h.master_seed != config.master_seed {
        return Err(mismatch("manifest master seed", config.master_seed, h.master_seed));
    }
    let grouping = config.grouping()?;
    if h.grouping != grouping {
        return Err(mismatch("manifest grouping", &grouping.version, &h.grouping_version));
    }
    if h.include_combined != include_combined {
        return Err(mismatch(
            "manifest include_combined",
            include_combined,
            h.include_combined,
        ));
    }
    if h.images != corpus_ids {
        return Err(Error::FingerprintMismatch(
            "manifest images differ from the corpus".into(),
        ));
    }
    Ok(())
}

/// Checks that a checkpoint was trained on `manifest` with this config.
pub fn check_checkpoint(ckpt: &Checkpoint, manifest: &Manifest, config: &PipelineConfig) -> Result<()> {
    let expected = manifest.fingerprint();
    if ckpt.manifest_fingerprint != expected {
        return Err(mismatch("checkpoint manifest", expected, &ckpt.manifest_fingerprint));
    }
    if ckpt.config != config.encoder {
        return Err(Error::FingerprintMismatch(
            "checkpoint was trained with a different encoder config".into(),
        ));
    }
    Ok(())
}

/// Checks that features came from `ckpt` and the configured content branch.
pub fn check_features(features: &FeatureSet, ckpt: &Checkpoint, config: &PipelineConfig) -> Result<()> {
    let expected = ckpt.fingerprint()?;
    if features.meta.checkpoint_fingerprint != expected {
        return Err(mismatch(
            "features checkpoint",
            expected,
            &features.meta.checkpoint_fingerprint,
        ));
    }
    let content = config.content_encoder().map(|c| c.fingerprint()).transpose()?;
    if features.meta.content_fingerprint != content {
        return Err(Error::FingerprintMismatch(
            "features use a different content branch".into(),
        ));
    }
    if features.meta.master_seed != config.master_seed {
        return Err(mismatch(
            "features master seed",
            config.master_seed,
            features.meta.master_seed,
        ));
    }
    Ok(())
}

/// Writes every distinct degraded image of the manifest as
/// `<out>/<image stem>/<chain>.png`. Returns the number of files written.
pub fn materialize(manifest: &Manifest, images: &dyn ImageSource, out: &Path) -> Result<usize> {
    let mut written = 0;
    for id in &manifest.header.images {
        let mut seen = HashSet::new();
        let chains: Vec<&DegradationChain> = manifest
            .entries
            .iter()
            .filter(|e| &e.image_id == id)
            .flat_map(|e| e.chains())
            .filter(|c| seen.insert(*c))
            .collect();
        let stem = Path::new(id).file_stem().and_then(|s| s.to_str()).unwrap_or(id);
        let dir = out.join(stem);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let pristine = images.load(id)?;
        chains.par_iter().try_for_each(|chain| {
            let img = render_chain(id, chain, &pristine, manifest.header.master_seed)?;
            img.save_png(&dir.join(format!("{chain}.png")))
        })?;
        written += chains.len();
    }
    Ok(written)
}

/// Files produced by [`run_pipeline`], in the order they were written.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineOutputs {
    pub files: Vec<PathBuf>,
    pub reports: Vec<EvalReport>,
}

fn save_report(report: &EvalReport, json: &Path, formats: &[ReportFormat], out: &mut PipelineOutputs) -> Result<()> {
    out.files.extend(emit_report(report, ReportFormat::Json, json)?);
    for &f in formats {
        let path = match f {
            ReportFormat::Json => continue,
            ReportFormat::Csv => json.with_extension("csv"),
            ReportFormat::TableText => json.with_extension("txt"),
            ReportFormat::Plots => json.with_extension("plots"),
        };
        out.files.extend(emit_report(report, f, &path)?);
    }
    out.reports.push(report.clone());
    Ok(())
}

fn forge(config: &PipelineConfig, corpus: &DirCorpus, include_combined: bool, path: &Path) -> Result<Manifest> {
    let manifest = build_manifest(
        &corpus.image_ids(),
        &config.grouping()?,
        include_combined,
        config.master_seed,
    )?;
    manifest.save(path)?;
    let c = manifest.counts();
    info!(
        "forged {} triplets ({} single, {} combined) into {}",
        c.total,
        c.single,
        c.combined,
        path.display()
    );
    Ok(manifest)
}

fn train_stage(
    config: &PipelineConfig,
    corpus: &DirCorpus,
    manifest_path: &Path,
    include_combined: bool,
    out: &Path,
) -> Result<()> {
    require(manifest_path, Stage::Train)?;
    let manifest = Manifest::load(manifest_path)?;
    check_manifest(&manifest, config, &corpus.image_ids(), include_combined)?;
    let outcome = train(&manifest, corpus, &config.encoder, &TrainOptions::default())?;
    if let Some((first, last)) = outcome.history.loss_at_ends(0.1) {
        info!(
            "training loss {first:.4} -> {last:.4} over {} steps",
            outcome.checkpoint.steps
        );
    }
    outcome.checkpoint.save(out)
}

fn load_trained(
    config: &PipelineConfig,
    corpus: &DirCorpus,
    manifest: &Path,
    ckpt: &Path,
    stage: Stage,
    combined: bool,
) -> Result<Checkpoint> {
    require(manifest, stage)?;
    require(ckpt, stage)?;
    let manifest = Manifest::load(manifest)?;
    check_manifest(&manifest, config, &corpus.image_ids(), combined)?;
    let ckpt = Checkpoint::load(ckpt)?;
    check_checkpoint(&ckpt, &manifest, config)?;
    Ok(ckpt)
}

/// Runs the requested stages in dependency order. Each stage reads its
/// inputs from the work directory, so stages can be run in separate
/// invocations.
pub fn run_pipeline(config: &PipelineConfig, stages: &[Stage]) -> Result<PipelineOutputs> {
    let config = config.resolved()?;
    let art = config.artifacts();
    std::fs::create_dir_all(&config.paths.work).map_err(|e| Error::io(&config.paths.work, e))?;
    let stages: BTreeSet<Stage> = stages.iter().copied().collect();
    let corpus = DirCorpus::open(&config.paths.corpus)?;
    let content = config.content_encoder();
    let mut out = PipelineOutputs::default();
    info!("pipeline stages {:?}, master seed {}", stages, config.master_seed);

    for &stage in &stages {
        info!("stage {stage}");
        match stage {
            Stage::Forge => {
                forge(&config, &corpus, config.include_combined, &art.manifest)?;
                out.files.push(art.manifest.clone());
            }
            Stage::Train => {
                train_stage(
                    &config,
                    &corpus,
                    &art.manifest,
                    config.include_combined,
                    &art.checkpoint,
                )?;
                out.files.push(art.checkpoint.clone());
            }
            Stage::Extract => {
                let ckpt = load_trained(
                    &config,
                    &corpus,
                    &art.manifest,
                    &art.checkpoint,
                    stage,
                    config.include_combined,
                )?;
                let (table, root) = config.dataset()?;
                let features = extract_dataset_features(&table, &root, &ckpt, content.as_ref(), config.scales)?;
                features.save(&art.features)?;
                out.files.push(art.features.clone());
            }
            Stage::FitHead | Stage::Eval => {
                let ckpt = load_trained(
                    &config,
                    &corpus,
                    &art.manifest,
                    &art.checkpoint,
                    stage,
                    config.include_combined,
                )?;
                require(&art.features, stage)?;
                let features = FeatureSet::load(&art.features)?;
                check_features(&features, &ckpt, &config)?;
                let (table, _) = config.dataset()?;
                if stage == Stage::FitHead {
                    let rows: Vec<Vec<f64>> = table
                        .rows
                        .iter()
                        .map(|r| {
                            features
                                .row_of(&r.path)
                                .map(|v| v.iter().map(|&x| f64::from(x)).collect())
                                .ok_or_else(|| Error::MissingArtifact(format!("no features for `{}`", r.path)))
                        })
                        .collect::<Result<_>>()?;
                    let mut model: RegressionModel = fit(&rows, &table.mos(), &config.grid)?;
                    model.feature_fingerprint = Some(features.fingerprint()?);
                    model.save(&art.head)?;
                    out.files.push(art.head.clone());
                } else {
                    let mut report = evaluate_nr_features(&table, &features, &config.protocol, &config.nr_options())?;
                    report
                        .fingerprints
                        .insert("manifest".into(), ckpt.manifest_fingerprint.clone());
                    save_report(&report, &art.report, &config.report_formats, &mut out)?;
                }
            }
            Stage::EvalFr => {
                let ckpt = load_trained(
                    &config,
                    &corpus,
                    &art.manifest,
                    &art.checkpoint,
                    stage,
                    config.include_combined,
                )?;
                if config.paths.fr_tables.is_empty() {
                    return Err(Error::Config(
                        "no full-reference tables configured (paths.fr_tables)".into(),
                    ));
                }
                let tables = config
                    .paths
                    .fr_tables
                    .iter()
                    .map(|p| DatasetTable::load(p, &DatasetAdapter::full_reference()))
                    .collect::<Result<Vec<_>>>()?;
                let root = config
                    .paths
                    .dataset_images
                    .clone()
                    .or_else(|| config.paths.fr_tables[0].parent().map(Path::to_path_buf))
                    .unwrap_or_default();
                let mut report = evaluate_fr(&tables, &root, &ckpt, config.scales, config.logistic_fit)?;
                report
                    .fingerprints
                    .insert("manifest".into(), ckpt.manifest_fingerprint.clone());
                save_report(&report, &art.report_fr, &config.report_formats, &mut out)?;
            }
            Stage::Ablation => {
                if !config.include_combined {
                    return Err(Error::Config(
                        "the ablation compares against a run with combined triplets".into(),
                    ));
                }
                let with = load_trained(&config, &corpus, &art.manifest, &art.checkpoint, stage, true)?;
                forge(&config, &corpus, false, &art.manifest_without)?;
                train_stage(&config, &corpus, &art.manifest_without, false, &art.checkpoint_without)?;
                let without = Checkpoint::load(&art.checkpoint_without)?;
                out.files
                    .extend([art.manifest_without.clone(), art.checkpoint_without.clone()]);
                let (table, root) = config.dataset()?;
                let report = run_ablation(
                    &table,
                    &root,
                    &with,
                    &without,
                    content.as_ref(),
                    &config.protocol,
                    &config.nr_options(),
                )?;
                save_report(&report, &art.report_ablation, &config.report_formats, &mut out)?;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_lists() {
        assert_eq!(Stage::parse_list("all").unwrap(), Stage::ALL.to_vec());
        assert_eq!(
            Stage::parse_list("eval, forge").unwrap(),
            vec![Stage::Eval, Stage::Forge]
        );
        assert!(Stage::parse_list("forge,bake").is_err());
        for s in Stage::ALL {
            assert_eq!(s.to_string().parse::<Stage>().unwrap(), s);
        }
    }

    #[test]
    fn config_toml_round_trip_and_resolution() {
        let text = "master_seed = 7\n[encoder]\nepochs = 2\nseed = 99\n[paths]\ncorpus = \"c\"\nwork = \"w\"\n";
        let c = PipelineConfig::from_toml(text).unwrap();
        assert_eq!(c.encoder.epochs, 2);
        assert_eq!(PipelineConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        let r = c.resolved().unwrap();
        assert_eq!((r.encoder.seed, r.protocol.seed, r.grid.seed), (7, 7, 7));
        assert!(PipelineConfig::from_toml("master_seed = 1\nbogus = 2\n").is_err());
    }

    #[test]
    fn forge_only_on_one_image() {
        let dir = tempfile::tempdir().unwrap();
        crate::synth::write_corpus(&dir.path().join("corpus"), 1, 64, 3).unwrap();
        let config = PipelineConfig {
            include_combined: false,
            paths: PipelinePaths {
                corpus: dir.path().join("corpus"),
                work: dir.path().join("work"),
                ..PipelinePaths::default()
            },
            ..PipelineConfig::default()
        };
        run_pipeline(&config, &[Stage::Forge]).unwrap();
        let manifest = Manifest::load(&config.artifacts().manifest).unwrap();
        assert_eq!(manifest.entries.len(), 400);
        let err = run_pipeline(&config, &[Stage::Extract]).unwrap_err();
        assert!(matches!(err, Error::MissingArtifact(_)), "{err}");

        let reseeded = PipelineConfig {
            master_seed: 1,
            ..config.clone()
        };
        let err = run_pipeline(&reseeded, &[Stage::Train]).unwrap_err();
        assert!(matches!(err, Error::FingerprintMismatch(_)), "{err}");
    }
}
