//! Correlation metrics, dataset ingestion, and the NR, FR and ablation
//! evaluations built on them.

pub mod dataset;
pub mod metrics;
pub mod report;

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::PathCorpus;
use crate::encoder::Checkpoint;
use crate::error::{Error, Result};
use crate::features::{extract_feature_set, extract_quality_features, ContentEncoder, FeatureSet, Scales};
use crate::fr::cosine_similarity;
use crate::image::ImageBuffer;
use crate::regression::{raw_scorer, run_protocol_with, Grid, Scorer, SplitProtocol};

pub use dataset::{DatasetAdapter, DatasetRow, DatasetTable};
pub use metrics::{average_ranks, median, plcc, plcc_logistic, srcc, std_dev, Logistic4};
pub use report::{
    emit_report, format_delta, percent_delta, AblationDelta, EvalReport, MethodAverage, MethodResult, ReportFormat,
    ReportKind,
};

/// SRCC on raw scores and PLCC after a logistic remapping.
pub fn logistic_scorer(pred: &[f64], mos: &[f64]) -> (Option<f64>, Option<f64>) {
    (srcc(pred, mos).ok(), plcc_logistic(pred, mos).ok())
}

fn scorer(logistic_fit: bool) -> Scorer {
    if logistic_fit {
        logistic_scorer
    } else {
        raw_scorer
    }
}

#[derive(Debug, Clone)]
pub struct NrOptions {
    pub grid: Grid,
    pub scales: Scales,
    pub logistic_fit: bool,
    pub method: String,
}

impl Default for NrOptions {
    fn default() -> Self {
        Self {
            grid: Grid::default(),
            scales: Scales::default(),
            logistic_fit: false,
            method: "TRIQA".into(),
        }
    }
}

/// Fused features for every row of a dataset, keyed by the row path.
pub fn extract_dataset_features(
    dataset: &DatasetTable,
    images_root: &Path,
    ckpt: &Checkpoint,
    content: Option<&ContentEncoder>,
    scales: Scales,
) -> Result<FeatureSet> {
    let paths = dataset.paths();
    let source = PathCorpus::new(images_root, paths.clone());
    extract_feature_set(&source, &paths, ckpt, content, scales)
}

fn nr_result(
    dataset: &DatasetTable,
    features: &FeatureSet,
    protocol: &SplitProtocol,
    options: &NrOptions,
) -> Result<MethodResult> {
    let rows: Vec<Vec<f64>> = dataset
        .rows
        .iter()
        .map(|r| {
            features
                .row_of(&r.path)
                .map(|v| v.iter().map(|&x| x as f64).collect())
                .ok_or_else(|| Error::MissingArtifact(format!("no features for `{}`", r.path)))
        })
        .collect::<Result<_>>()?;
    let mos = dataset.mos();
    let mut protocol = protocol.clone();
    protocol.large |= dataset.large;
    let result = run_protocol_with(
        &rows,
        &mos,
        &protocol,
        &options.grid,
        scorer(options.logistic_fit),
        None,
    )?;
    let first = &result.iterations[0];
    let scatter = first
        .predictions
        .iter()
        .zip(&first.test_rows)
        .map(|(&p, &r)| (p, mos[r]))
        .collect();
    Ok(MethodResult::new(
        dataset.name.clone(),
        options.method.clone(),
        result.iterations.iter().map(|i| i.srcc).collect(),
        result.iterations.iter().map(|i| i.plcc).collect(),
        scatter,
    ))
}

/// NR evaluation from precomputed features: split, fit, score per iteration.
pub fn evaluate_nr_features(
    dataset: &DatasetTable,
    features: &FeatureSet,
    protocol: &SplitProtocol,
    options: &NrOptions,
) -> Result<EvalReport> {
    let result = nr_result(dataset, features, protocol, options)?;
    let mut report = EvalReport::new(ReportKind::Nr, vec![result], Some(protocol.clone()), protocol.seed);
    report.logistic_fit = options.logistic_fit;
    report.fingerprints.insert("features".into(), features.fingerprint()?);
    report
        .fingerprints
        .insert("checkpoint".into(), features.meta.checkpoint_fingerprint.clone());
    Ok(report)
}

/// Extract, fuse, fit and score.
pub fn evaluate_nr(
    dataset: &DatasetTable,
    images_root: &Path,
    ckpt: &Checkpoint,
    content: Option<&ContentEncoder>,
    protocol: &SplitProtocol,
    options: &NrOptions,
) -> Result<EvalReport> {
    let features = extract_dataset_features(dataset, images_root, ckpt, content, options.scales)?;
    evaluate_nr_features(dataset, &features, protocol, options)
}

/// Scores every `(reference, distorted)` row by cosine similarity of quality
/// features and correlates the scores with MOS, per dataset.
pub fn evaluate_fr(
    datasets: &[DatasetTable],
    images_root: &Path,
    ckpt: &Checkpoint,
    scales: Scales,
    logistic_fit: bool,
) -> Result<EvalReport> {
    let before = ckpt.fingerprint()?;
    let mut results = Vec::new();
    for dataset in datasets {
        let mut unique: Vec<&str> = Vec::new();
        for r in &dataset.rows {
            let reference = r.reference.as_deref().ok_or_else(|| {
                Error::MissingArtifact(format!("row `{}` of {} has no reference", r.path, dataset.name))
            })?;
            for p in [reference, r.path.as_str()] {
                if !unique.contains(&p) {
                    unique.push(p);
                }
            }
        }
        let vectors: Vec<Vec<f64>> = unique
            .par_iter()
            .map(|p| {
                let path = dataset::resolve(images_root, p);
                let img = ImageBuffer::load(&path)?;
                Ok(extract_quality_features(&img, ckpt, scales)?.to_f64())
            })
            .collect::<Result<_>>()?;
        let lookup: HashMap<&str, &Vec<f64>> = unique.iter().copied().zip(&vectors).collect();
        let scores: Vec<f64> = dataset
            .rows
            .iter()
            .map(|r| {
                cosine_similarity(
                    lookup[r.reference.as_deref().expect("checked")],
                    lookup[r.path.as_str()],
                )
            })
            .collect::<Result<_>>()?;
        let mos = dataset.mos();
        let (s, p) = scorer(logistic_fit)(&scores, &mos);
        results.push(MethodResult::new(
            dataset.name.clone(),
            "TRIQA-FR",
            vec![s],
            vec![p],
            scores.into_iter().zip(mos).collect(),
        ));
    }
    if ckpt.fingerprint()? != before {
        return Err(Error::Numerical(
            "checkpoint changed during full-reference evaluation".into(),
        ));
    }
    let mut report = EvalReport::new(ReportKind::Fr, results, None, ckpt.config.seed);
    report.logistic_fit = logistic_fit;
    report.fingerprints.insert("checkpoint".into(), before);
    Ok(report)
}

pub const ABLATION_WITH: &str = "with combined";
pub const ABLATION_WITHOUT: &str = "without combined";

fn deltas(results: &[MethodResult]) -> Vec<AblationDelta> {
    let mut out = Vec::new();
    for with in results.iter().filter(|r| r.method == ABLATION_WITH) {
        if let Some(without) = results
            .iter()
            .find(|r| r.method == ABLATION_WITHOUT && r.dataset == with.dataset)
        {
            let d = |a: Option<f64>, b: Option<f64>| a.zip(b).and_then(|(a, b)| percent_delta(a, b));
            out.push(AblationDelta {
                dataset: with.dataset.clone(),
                srcc_pct: d(with.median_srcc, without.median_srcc),
                plcc_pct: d(with.median_plcc, without.median_plcc),
            });
        }
    }
    out
}

/// Side-by-side NR results for checkpoints trained with and without
/// combined triplets, plus percentage improvements of the medians.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    dataset: &DatasetTable,
    images_root: &Path,
    ckpt_with: &Checkpoint,
    ckpt_without: &Checkpoint,
    content: Option<&ContentEncoder>,
    protocol: &SplitProtocol,
    options: &NrOptions,
) -> Result<EvalReport> {
    let mut results = Vec::new();
    let mut fingerprints = Vec::new();
    for (ckpt, method) in [(ckpt_without, ABLATION_WITHOUT), (ckpt_with, ABLATION_WITH)] {
        let features = extract_dataset_features(dataset, images_root, ckpt, content, options.scales)?;
        let opts = NrOptions {
            method: method.into(),
            ..options.clone()
        };
        results.push(nr_result(dataset, &features, protocol, &opts)?);
        fingerprints.push(features.meta.checkpoint_fingerprint.clone());
    }
    let mut report = EvalReport::new(ReportKind::Ablation, results, Some(protocol.clone()), protocol.seed);
    report.deltas = deltas(&report.results);
    report.logistic_fit = options.logistic_fit;
    report
        .fingerprints
        .insert("checkpoint_without".into(), fingerprints[0].clone());
    report
        .fingerprints
        .insert("checkpoint_with".into(), fingerprints[1].clone());
    Ok(report)
}

/// Combines two NR reports produced under the same protocol.
pub fn ablation_from_reports(with: &EvalReport, without: &EvalReport) -> Result<EvalReport> {
    if with.protocol != without.protocol || with.logistic_fit != without.logistic_fit {
        return Err(Error::Config("ablation reports use mismatched protocols".into()));
    }
    let relabel = |r: &EvalReport, method: &str| -> Vec<MethodResult> {
        r.results
            .iter()
            .map(|m| MethodResult {
                method: method.into(),
                ..m.clone()
            })
            .collect()
    };
    let mut results = relabel(without, ABLATION_WITHOUT);
    results.extend(relabel(with, ABLATION_WITH));
    let mut report = EvalReport::new(ReportKind::Ablation, results, with.protocol.clone(), with.master_seed);
    report.deltas = deltas(&report.results);
    report.logistic_fit = with.logistic_fit;
    for (prefix, r) in [("with", with), ("without", without)] {
        for (k, v) in &r.fingerprints {
            report.fingerprints.insert(format!("{prefix}.{k}"), v.clone());
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nr(method: &str, srcc: f64, plcc: f64) -> EvalReport {
        let mut r = EvalReport::new(
            ReportKind::Nr,
            vec![MethodResult::new(
                "KonIQ",
                method,
                vec![Some(srcc)],
                vec![Some(plcc)],
                vec![],
            )],
            Some(SplitProtocol::default()),
            0,
        );
        r.fingerprints.insert("checkpoint".into(), method.into());
        r
    }

    #[test]
    fn ablation_deltas() {
        let r = ablation_from_reports(&nr("a", 0.877, 0.884), &nr("b", 0.853, 0.860)).unwrap();
        assert_eq!(r.deltas.len(), 1);
        assert_eq!(format_delta(r.deltas[0].srcc_pct.unwrap()), "+2.81%");
        let same = ablation_from_reports(&nr("a", 0.9, 0.8), &nr("a", 0.9, 0.8)).unwrap();
        assert_eq!(same.deltas[0].srcc_pct, Some(0.0));
        assert_eq!(same.deltas[0].plcc_pct, Some(0.0));
        let mut other = nr("b", 0.853, 0.86);
        other.protocol = Some(SplitProtocol {
            iterations: 3,
            ..SplitProtocol::default()
        });
        assert!(ablation_from_reports(&nr("a", 0.877, 0.884), &other).is_err());
    }
}
