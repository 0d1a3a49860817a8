//! `triqa` command-line front end.
//!
//! Settings resolve as flags > `--config` TOML > built-in defaults. Exit
//! codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use triqa::corpus::{DirCorpus, ImageSource};
use triqa::encoder::{train, BackbonePreset, Checkpoint, Schedule, TrainOptions, ValidationSet};
use triqa::error::{Error, ErrorClass, Result};
use triqa::eval::{
    ablation_from_reports, emit_report, evaluate_fr, evaluate_nr, evaluate_nr_features, run_ablation, DatasetAdapter,
    DatasetTable, EvalReport, NrOptions, ReportFormat, ReportKind,
};
use triqa::features::{
    extract_content_features, extract_feature_set, extract_quality_features, fuse, ContentEncoder, FeatureSet, Scales,
};
use triqa::fr::score_fr;
use triqa::image::ImageBuffer;
use triqa::pipeline::{materialize, run_pipeline, PipelineConfig, Stage};
use triqa::regression::{fit, raw_scorer, run_protocol_with, RegressionModel};
use triqa::synth::{write_corpus, write_toy_dataset};
use triqa::triplet::{build_manifest, Manifest};

#[derive(Debug, Parser)]
#[command(name = "triqa", version, about = "Triplet-trained image quality assessment", long_about = None)]
struct Cli {
    /// TOML configuration; explicit flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Enumerate the triplet manifest for a directory of pristine images.
    Forge(ForgeArgs),
    /// Train the quality encoder on a manifest.
    Train(TrainArgs),
    /// Extract quality (and content) features for a set of images.
    Extract(ExtractArgs),
    /// Fit the regression head on features and MOS labels.
    FitHead(FitHeadArgs),
    /// Predict the quality of one image with a trained head.
    Score(ScoreArgs),
    /// Full-reference score of a distorted image against its reference.
    ScoreFr(ScoreFrArgs),
    /// Full-reference evaluation over reference/distorted MOS tables.
    EvalFr(EvalFrArgs),
    /// No-reference evaluation over repeated train/test splits.
    Eval(EvalArgs),
    /// Compare encoders trained with and without combined triplets.
    Ablation(AblationArgs),
    /// Run pipeline stages from a configuration file.
    Run(RunArgs),
    /// Write procedural images and an optional toy MOS dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct ForgeArgs {
    /// Directory of pristine images.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Manifest output (JSON Lines).
    #[arg(long)]
    out: PathBuf,
    /// Include cross-group combined triplets (default).
    #[arg(long, overrides_with = "no_combined")]
    include_combined: bool,
    /// Single-distortion triplets only.
    #[arg(long)]
    no_combined: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Grouping table (TOML); the built-in default when omitted.
    #[arg(long)]
    grouping: Option<PathBuf>,
    /// Also render every distinct degraded image into this directory.
    #[arg(long, value_name = "DIR")]
    materialize: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of the pristine images named in the manifest.
    #[arg(long)]
    images: Option<PathBuf>,
    /// desk-scale or paper-scale.
    #[arg(long)]
    preset: Option<BackbonePreset>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Square training crop side.
    #[arg(long)]
    crop: Option<u32>,
    /// cosine or constant.
    #[arg(long)]
    schedule: Option<Schedule>,
    /// Use at most this many shuffled triplets per epoch.
    #[arg(long)]
    max_triplets: Option<usize>,
    /// Defaults to the manifest's seed; a different value is rejected.
    #[arg(long)]
    seed: Option<u64>,
    /// Held-out pristine images used to track validation loss.
    #[arg(long)]
    holdout: Option<PathBuf>,
    /// Number of held-out triplets evaluated per validation pass.
    #[arg(long, default_value_t = 256)]
    holdout_limit: usize,
    /// Write the lowest-validation-loss checkpoint instead of the last one.
    #[arg(long, requires = "holdout")]
    keep_best: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FeatureFlags {
    /// Comma-separated subset of full,half.
    #[arg(long)]
    scales: Option<Scales>,
    /// Quality features only (skip the frozen content branch).
    #[arg(long)]
    no_content: bool,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    /// Image directory (all images) or root of the `--dataset` paths.
    #[arg(long)]
    images: PathBuf,
    /// Restrict extraction to the rows of this MOS table.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    adapter: Option<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    features: FeatureFlags,
    /// Feature matrix output; a JSON sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ProtocolFlags {
    /// Random train/test splits.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Single split, as for very large datasets.
    #[arg(long)]
    large: bool,
    /// Report PLCC after a 4-parameter logistic remapping.
    #[arg(long)]
    logistic_fit: bool,
}

#[derive(Debug, Args)]
struct ReportFlags {
    /// Report destination (a directory for `plots`).
    #[arg(long)]
    report: Option<PathBuf>,
    /// json, csv, table-text or plots.
    #[arg(long, default_value = "json")]
    format: ReportFormat,
}

#[derive(Debug, Args)]
struct FitHeadArgs {
    #[arg(long)]
    features: PathBuf,
    /// MOS table whose paths match the feature image ids.
    #[arg(long)]
    mos: PathBuf,
    #[arg(long)]
    adapter: Option<PathBuf>,
    #[command(flatten)]
    protocol: ProtocolFlags,
    #[command(flatten)]
    report: ReportFlags,
    /// Model output (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    scales: Option<Scales>,
}

#[derive(Debug, Args)]
struct ScoreFrArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    dist: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    scales: Option<Scales>,
}

#[derive(Debug, Args)]
struct EvalFrArgs {
    /// Table with reference_path,distorted_path,mos columns; repeatable.
    #[arg(long, required = true)]
    table: Vec<PathBuf>,
    /// Root of the table paths; each table's directory when omitted.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    scales: Option<Scales>,
    #[arg(long)]
    logistic_fit: bool,
    #[command(flatten)]
    report: ReportFlags,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    adapter: Option<PathBuf>,
    /// Root of the dataset paths; the table's directory when omitted.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long, required_unless_present = "features")]
    ckpt: Option<PathBuf>,
    /// Precomputed features (skips extraction).
    #[arg(long, conflicts_with = "ckpt")]
    features: Option<PathBuf>,
    #[command(flatten)]
    feature_flags: FeatureFlags,
    #[command(flatten)]
    protocol: ProtocolFlags,
    #[command(flatten)]
    report: ReportFlags,
}

#[derive(Debug, Args)]
struct AblationArgs {
    /// Checkpoint trained with combined triplets.
    #[arg(long = "with", requires = "without")]
    with: Option<PathBuf>,
    /// Checkpoint trained on single-distortion triplets only.
    #[arg(long, requires = "with")]
    without: Option<PathBuf>,
    /// Existing NR report of the with-combined encoder.
    #[arg(long, conflicts_with_all = ["with", "without"], requires = "without_report")]
    with_report: Option<PathBuf>,
    #[arg(long, requires = "with_report")]
    without_report: Option<PathBuf>,
    #[arg(long, required_unless_present = "with_report")]
    dataset: Option<PathBuf>,
    #[arg(long)]
    adapter: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[command(flatten)]
    feature_flags: FeatureFlags,
    #[command(flatten)]
    protocol: ProtocolFlags,
    #[command(flatten)]
    report: ReportFlags,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Comma-separated stages, or `all`.
    #[arg(long, default_value = "forge,train,extract,fit-head,eval")]
    stages: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    work: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_triplets: Option<usize>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Number of pristine images.
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 256)]
    size: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write a toy MOS dataset with this many references under OUT/toy.
    #[arg(long)]
    toy_references: Option<usize>,
}

/// Config file values, if any, layered over the defaults.
struct Layers {
    config: PipelineConfig,
    from_file: bool,
}

impl Layers {
    fn load(path: Option<&Path>) -> Result<Self> {
        Ok(match path {
            Some(p) => Self {
                config: PipelineConfig::load(p)?,
                from_file: true,
            },
            None => Self {
                config: PipelineConfig::default(),
                from_file: false,
            },
        })
    }

    /// Flag, then config file, then the seed recorded in an input artifact.
    fn seed(&self, flag: Option<u64>, artifact: u64) -> u64 {
        flag.unwrap_or(if self.from_file {
            self.config.master_seed
        } else {
            artifact
        })
    }

    fn scales(&self, flag: Option<Scales>) -> Scales {
        flag.unwrap_or(self.config.scales)
    }

    fn content(&self, no_content: bool) -> bool {
        !no_content && self.config.content_features
    }

    fn nr_options(&self, flags: &ProtocolFlags, features: &FeatureFlags, seed: u64) -> NrOptions {
        let mut grid = self.config.grid.clone();
        grid.seed = seed;
        NrOptions {
            grid,
            scales: self.scales(features.scales),
            logistic_fit: flags.logistic_fit || self.config.logistic_fit,
            ..NrOptions::default()
        }
    }

    fn protocol(&self, flags: &ProtocolFlags, seed: u64) -> Result<triqa::regression::SplitProtocol> {
        let mut p = self.config.protocol.clone();
        p.seed = seed;
        if let Some(n) = flags.iters {
            p.iterations = n;
        }
        if let Some(f) = flags.train_fraction {
            p.train_fraction = f;
        }
        p.large |= flags.large;
        p.validate()?;
        Ok(p)
    }
}

fn log_resolved(what: &str, seed: u64, config: &impl serde::Serialize) {
    info!("{what}: master seed {seed}");
    match serde_json::to_string(config) {
        Ok(json) => info!("resolved config: {json}"),
        Err(e) => info!("resolved config not serializable: {e}"),
    }
}

fn dataset_table(csv: &Path, adapter: Option<&Path>) -> Result<DatasetTable> {
    let adapter = match adapter {
        Some(p) => DatasetAdapter::load(p)?,
        None => DatasetAdapter::default(),
    };
    DatasetTable::load(csv, &adapter)
}

fn table_root(images: Option<&Path>, csv: &Path) -> PathBuf {
    images
        .map(Path::to_path_buf)
        .or_else(|| csv.parent().map(Path::to_path_buf))
        .unwrap_or_default()
}

fn write_report(report: &EvalReport, flags: &ReportFlags) -> Result<()> {
    match &flags.report {
        Some(out) => {
            create_parent(out)?;
            for f in emit_report(report, flags.format, out)? {
                info!("wrote {}", f.display());
            }
        }
        None => print!("{}", report.to_table_text()),
    }
    Ok(())
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn corpus_dir(flag: Option<&Path>, layers: &Layers) -> Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| layers.from_file.then(|| layers.config.paths.corpus.clone()))
        .ok_or_else(|| Error::Config("--images is required".into()))
}

fn forge(args: ForgeArgs, layers: &Layers) -> Result<()> {
    let dir = corpus_dir(args.images.as_deref(), layers)?;
    let corpus = DirCorpus::open(&dir)?;
    let include_combined = if args.no_combined {
        false
    } else {
        args.include_combined || layers.config.include_combined
    };
    let seed = layers.seed(args.seed, 0);
    let grouping = match args.grouping.as_deref().or(layers.config.paths.grouping.as_deref()) {
        Some(p) => triqa::distortion::DistortionGrouping::load(p)?,
        None => triqa::distortion::DistortionGrouping::builtin(&layers.config.grouping_version)?,
    };
    log_resolved(
        "forge",
        seed,
        &serde_json::json!({
            "images": dir, "include_combined": include_combined, "grouping": grouping.version,
        }),
    );
    let manifest = build_manifest(&corpus.image_ids(), &grouping, include_combined, seed)?;
    create_parent(&args.out)?;
    manifest.save(&args.out)?;
    let c = manifest.counts();
    println!(
        "{} triplets ({} single, {} combined) -> {}",
        c.total,
        c.single,
        c.combined,
        args.out.display()
    );
    if let Some(dir) = args.materialize {
        let n = materialize(&manifest, &corpus, &dir)?;
        println!("rendered {n} images -> {}", dir.display());
    }
    Ok(())
}

fn train_cmd(args: TrainArgs, layers: &Layers) -> Result<()> {
    let manifest = Manifest::load(&args.manifest)?;
    let seed = layers.seed(args.seed, manifest.header.master_seed);
    if seed != manifest.header.master_seed {
        return Err(Error::FingerprintMismatch(format!(
            "seed {seed} differs from the manifest's master seed {}",
            manifest.header.master_seed
        )));
    }
    let mut config = layers.config.encoder.clone();
    if layers.from_file {
        config.preset = layers.config.preset;
    }
    config.seed = seed;
    if let Some(v) = args.preset {
        config.preset = v;
    }
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.margin {
        config.margin = v;
    }
    if let Some(v) = args.lr {
        config.learning_rate = v;
    }
    if let Some(v) = args.batch {
        config.batch_size = v;
    }
    if let Some(v) = args.crop {
        config.crop = v;
    }
    if let Some(v) = args.schedule {
        config.schedule = v;
    }
    if args.max_triplets.is_some() {
        config.max_triplets_per_epoch = args.max_triplets;
    }
    config.validate()?;
    log_resolved("train", seed, &config);
    let corpus = DirCorpus::open(&corpus_dir(args.images.as_deref(), layers)?)?;

    let holdout = args.holdout.as_deref().map(DirCorpus::open).transpose()?;
    let holdout_manifest = holdout
        .as_ref()
        .map(|h| {
            build_manifest(
                &h.image_ids(),
                &manifest.header.grouping,
                manifest.header.include_combined,
                seed,
            )
        })
        .transpose()?;
    let options = TrainOptions {
        validation: holdout
            .as_ref()
            .zip(holdout_manifest.as_ref())
            .map(|(h, m)| ValidationSet {
                manifest: m,
                images: h,
                limit: Some(args.holdout_limit),
            }),
        keep_best: args.keep_best,
    };
    let outcome = train(&manifest, &corpus, &config, &options)?;
    if let Some((first, last)) = outcome.history.loss_at_ends(0.1) {
        info!("loss {first:.4} (first decile) -> {last:.4} (last decile)");
    }
    let ckpt = match (args.keep_best, outcome.best) {
        (true, Some(best)) => best,
        _ => outcome.checkpoint,
    };
    create_parent(&args.out)?;
    ckpt.save(&args.out)?;
    println!("{} steps -> {}", ckpt.steps, args.out.display());
    Ok(())
}

fn extract_cmd(args: ExtractArgs, layers: &Layers) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let scales = layers.scales(args.features.scales);
    let content = layers
        .content(args.features.no_content)
        .then(|| ContentEncoder::frozen(ckpt.config.preset));
    log_resolved(
        "extract",
        ckpt.config.seed,
        &serde_json::json!({
            "images": args.images, "dataset": args.dataset, "scales": scales, "content": content.is_some(),
        }),
    );
    let features = match &args.dataset {
        Some(csv) => {
            let table = dataset_table(csv, args.adapter.as_deref())?;
            triqa::eval::extract_dataset_features(&table, &args.images, &ckpt, content.as_ref(), scales)?
        }
        None => {
            let corpus = DirCorpus::open(&args.images)?;
            extract_feature_set(&corpus, &corpus.image_ids(), &ckpt, content.as_ref(), scales)?
        }
    };
    create_parent(&args.out)?;
    features.save(&args.out)?;
    println!(
        "{} x {} features -> {}",
        features.rows(),
        features.dim(),
        args.out.display()
    );
    Ok(())
}

fn rows_for(table: &DatasetTable, features: &FeatureSet) -> Result<Vec<Vec<f64>>> {
    table
        .rows
        .iter()
        .map(|r| {
            features
                .row_of(&r.path)
                .map(|v| v.iter().map(|&x| f64::from(x)).collect())
                .ok_or_else(|| Error::MissingArtifact(format!("no features for `{}`", r.path)))
        })
        .collect()
}

fn fit_head(args: FitHeadArgs, layers: &Layers) -> Result<()> {
    let features = FeatureSet::load(&args.features)?;
    let table = dataset_table(&args.mos, args.adapter.as_deref())?;
    let seed = layers.seed(args.protocol.seed, features.meta.master_seed);
    let protocol = layers.protocol(&args.protocol, seed)?;
    let options = layers.nr_options(
        &args.protocol,
        &FeatureFlags {
            scales: None,
            no_content: false,
        },
        seed,
    );
    log_resolved(
        "fit-head",
        seed,
        &serde_json::json!({ "protocol": protocol, "grid": options.grid }),
    );
    let rows = rows_for(&table, &features)?;
    let scorer: triqa::regression::Scorer = if options.logistic_fit {
        triqa::eval::logistic_scorer
    } else {
        raw_scorer
    };
    let result = run_protocol_with(&rows, &table.mos(), &protocol, &options.grid, scorer, None)?;
    let fmt = |v: Option<f64>| v.map_or("degenerate".to_string(), |v| format!("{v:.4}"));
    println!(
        "median SRCC {} / PLCC {} over {} splits",
        fmt(result.median_srcc),
        fmt(result.median_plcc),
        result.iterations.len()
    );
    if args.report.report.is_some() {
        let report = evaluate_nr_features(&table, &features, &protocol, &options)?;
        write_report(&report, &args.report)?;
    }
    let mut model: RegressionModel = fit(&rows, &table.mos(), &options.grid)?;
    model.feature_fingerprint = Some(features.fingerprint()?);
    create_parent(&args.out)?;
    model.save(&args.out)?;
    println!("C = {}, epsilon = {} -> {}", model.c, model.epsilon, args.out.display());
    Ok(())
}

fn score(args: ScoreArgs, layers: &Layers) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let model = RegressionModel::load(&args.model)?;
    let scales = layers.scales(args.scales);
    let img = ImageBuffer::load(&args.image)?;
    let quality = extract_quality_features(&img, &ckpt, scales)?;
    let content = ContentEncoder::frozen(ckpt.config.preset);
    // the head's input width tells whether it was fit on fused features
    let features = if model.dim() == quality.dim() {
        quality
    } else if model.dim() == quality.dim() + content.dim() {
        fuse(&extract_content_features(&img, &content)?, &quality)?
    } else {
        return Err(Error::DimensionMismatch(format!(
            "head expects {} features; the checkpoint yields {} (quality) or {} (fused)",
            model.dim(),
            quality.dim(),
            quality.dim() + content.dim()
        )));
    };
    println!("{}", model.predict(&features.to_f64())?);
    Ok(())
}

fn score_fr_cmd(args: ScoreFrArgs, layers: &Layers) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let r = ImageBuffer::load(&args.reference)?;
    let d = ImageBuffer::load(&args.dist)?;
    println!("{}", score_fr(&r, &d, &ckpt, layers.scales(args.scales))?);
    Ok(())
}

fn eval_fr(args: EvalFrArgs, layers: &Layers) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let scales = layers.scales(args.scales);
    let logistic = args.logistic_fit || layers.config.logistic_fit;
    log_resolved(
        "eval-fr",
        ckpt.config.seed,
        &serde_json::json!({ "tables": args.table, "scales": scales }),
    );
    let mut reports = Vec::new();
    for table in &args.table {
        let t = DatasetTable::load(table, &DatasetAdapter::full_reference())?;
        let root = table_root(args.images.as_deref(), table);
        reports.push(evaluate_fr(std::slice::from_ref(&t), &root, &ckpt, scales, logistic)?);
    }
    let results = reports.into_iter().flat_map(|r| r.results).collect();
    let mut report = EvalReport::new(ReportKind::Fr, results, None, ckpt.config.seed);
    report.logistic_fit = logistic;
    report.fingerprints.insert("checkpoint".into(), ckpt.fingerprint()?);
    write_report(&report, &args.report)
}

fn eval(args: EvalArgs, layers: &Layers) -> Result<()> {
    let table = dataset_table(&args.dataset, args.adapter.as_deref())?;
    let root = table_root(args.images.as_deref(), &args.dataset);
    let report = match (&args.features, &args.ckpt) {
        (Some(path), _) => {
            let features = FeatureSet::load(path)?;
            let seed = layers.seed(args.protocol.seed, features.meta.master_seed);
            let protocol = layers.protocol(&args.protocol, seed)?;
            let options = layers.nr_options(&args.protocol, &args.feature_flags, seed);
            log_resolved(
                "eval",
                seed,
                &serde_json::json!({ "protocol": protocol, "grid": options.grid }),
            );
            evaluate_nr_features(&table, &features, &protocol, &options)?
        }
        (None, Some(ckpt)) => {
            let ckpt = Checkpoint::load(ckpt)?;
            let seed = layers.seed(args.protocol.seed, ckpt.config.seed);
            let protocol = layers.protocol(&args.protocol, seed)?;
            let options = layers.nr_options(&args.protocol, &args.feature_flags, seed);
            let content = layers
                .content(args.feature_flags.no_content)
                .then(|| ContentEncoder::frozen(ckpt.config.preset));
            log_resolved(
                "eval",
                seed,
                &serde_json::json!({
                    "protocol": protocol, "grid": options.grid, "scales": options.scales, "content": content.is_some(),
                }),
            );
            evaluate_nr(&table, &root, &ckpt, content.as_ref(), &protocol, &options)?
        }
        (None, None) => return Err(Error::Config("either --ckpt or --features is required".into())),
    };
    write_report(&report, &args.report)
}

fn ablation(args: AblationArgs, layers: &Layers) -> Result<()> {
    let report = if let (Some(w), Some(wo)) = (&args.with_report, &args.without_report) {
        let read = |p: &Path| -> Result<EvalReport> {
            EvalReport::from_json(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)
        };
        ablation_from_reports(&read(w)?, &read(wo)?)?
    } else {
        let (Some(with), Some(without), Some(csv)) = (&args.with, &args.without, &args.dataset) else {
            return Err(Error::Config("--with, --without and --dataset are required".into()));
        };
        let with = Checkpoint::load(with)?;
        let without = Checkpoint::load(without)?;
        let table = dataset_table(csv, args.adapter.as_deref())?;
        let root = table_root(args.images.as_deref(), csv);
        let seed = layers.seed(args.protocol.seed, with.config.seed);
        let protocol = layers.protocol(&args.protocol, seed)?;
        let options = layers.nr_options(&args.protocol, &args.feature_flags, seed);
        let content = layers
            .content(args.feature_flags.no_content)
            .then(|| ContentEncoder::frozen(with.config.preset));
        log_resolved(
            "ablation",
            seed,
            &serde_json::json!({ "protocol": protocol, "grid": options.grid }),
        );
        run_ablation(&table, &root, &with, &without, content.as_ref(), &protocol, &options)?
    };
    write_report(&report, &args.report)
}

fn run(args: RunArgs, layers: &Layers) -> Result<()> {
    let mut config = layers.config.clone();
    if let Some(v) = args.seed {
        config.master_seed = v;
    }
    if let Some(v) = args.corpus {
        config.paths.corpus = v;
    }
    if let Some(v) = args.work {
        config.paths.work = v;
    }
    if args.dataset.is_some() {
        config.paths.dataset = args.dataset;
    }
    if let Some(v) = args.epochs {
        config.encoder.epochs = v;
    }
    if args.max_triplets.is_some() {
        config.encoder.max_triplets_per_epoch = args.max_triplets;
    }
    let stages = Stage::parse_list(&args.stages)?;
    let resolved = config.resolved()?;
    log_resolved("run", resolved.master_seed, &resolved);
    let out = run_pipeline(&config, &stages)?;
    for f in &out.files {
        println!("{}", f.display());
    }
    for r in &out.reports {
        print!("{}", r.to_table_text());
    }
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let files = write_corpus(&args.out, args.count, args.size, args.seed)?;
    println!("{} images -> {}", files.len(), args.out.display());
    if let Some(n) = args.toy_references {
        let toy = write_toy_dataset(&args.out.join("toy"), n, 4, args.size, args.seed)?;
        println!(
            "{} rows -> {} and {}",
            toy.rows,
            toy.nr_table.display(),
            toy.fr_table.display()
        );
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let layers = Layers::load(cli.config.as_deref())?;
    match cli.command {
        Command::Forge(a) => forge(a, &layers),
        Command::Train(a) => train_cmd(a, &layers),
        Command::Extract(a) => extract_cmd(a, &layers),
        Command::FitHead(a) => fit_head(a, &layers),
        Command::Score(a) => score(a, &layers),
        Command::ScoreFr(a) => score_fr_cmd(a, &layers),
        Command::EvalFr(a) => eval_fr(a, &layers),
        Command::Eval(a) => eval(a, &layers),
        Command::Ablation(a) => ablation(a, &layers),
        Command::Run(a) => run(a, &layers),
        Command::Synth(a) => synth(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numerical => 3,
            })
        }
    }
}
