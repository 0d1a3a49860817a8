//! Linear epsilon-insensitive support vector regression with grid search, and
//! the repeated random train/test split protocol.
//!
//! The regressor minimises `0.5 |w|^2 + (C / n) sum_i max(0, |y_i - f(x_i)| - eps)`
//! on z-scored features, solved by dual coordinate descent. Normalising `C`
//! by `n` makes the solution invariant to replicating the dataset.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::metrics::{median, plcc, srcc, std_dev};
use crate::seed::{derive_seed, rng_from_seed};

/// Constant feature appended to every row so the offset is learned too.
const BIAS_FEATURE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub c: Vec<f64>,
    pub epsilon: Vec<f64>,
    pub folds: usize,
    /// Relative reduction of the projected-gradient norm that ends a solve.
    pub tolerance: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            c: vec![1e-2, 1e-1, 1.0, 10.0, 100.0],
            epsilon: vec![0.1, 0.5, 1.0],
            folds: 5,
            tolerance: 1e-4,
            max_epochs: 2000,
            seed: 0,
        }
    }
}

impl Grid {
    pub fn validate(&self) -> Result<()> {
        if self.c.is_empty() || self.epsilon.is_empty() {
            return Err(Error::Config("hyperparameter grid is empty".into()));
        }
        if self.c.iter().any(|&c| !(c > 0.0)) || self.epsilon.iter().any(|&e| !(e >= 0.0)) {
            return Err(Error::Config("grid needs C > 0 and epsilon >= 0".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("cross-validation needs at least 2 folds".into()));
        }
        if !(self.tolerance > 0.0) || self.max_epochs == 0 {
            return Err(Error::Config(
                "solver tolerance and epoch budget must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    /// Weights on standardised features.
    pub weights: Vec<f64>,
    pub bias: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub c: f64,
    pub epsilon: f64,
    /// Cross-validated mean absolute error of the selected configuration.
    pub cv_mae: Option<f64>,
    pub feature_fingerprint: Option<String>,
    /// Seed of the cross-validation folds.
    #[serde(default)]
    pub seed: u64,
}

impl RegressionModel {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Constant model.
    pub fn constant(dim: usize, bias: f64) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias,
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
            c: 0.0,
            epsilon: 0.0,
            cv_mae: None,
            feature_fingerprint: None,
            seed: 0,
        }
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "model expects {} features, got {}",
                self.dim(),
                x.len()
            )));
        }
        let mut s = self.bias;
        for j in 0..x.len() {
            s += self.weights[j] * (x[j] - self.mean[j]) / self.scale[j];
        }
        Ok(s)
    }

    pub fn predict_batch(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        rows.iter().map(|r| self.predict(r)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let d = model.weights.len();
        if model.mean.len() != d || model.scale.len() != d {
            return Err(Error::format(path, "inconsistent model dimensions"));
        }
        Ok(model)
    }
}

/// What a fitting stage looked at, in global row indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuditEvent {
    Standardize(Vec<usize>),
    GridSearch(Vec<usize>),
    Fit(Vec<usize>),
}

/// Records every row set used for standardisation and model selection.
#[derive(Debug, Default)]
pub struct Audit {
    events: Mutex<Vec<(Option<usize>, AuditEvent)>>,
}

impl Audit {
    pub fn new() -> Self {
        Self::default()
    }

    fn record(&self, iteration: Option<usize>, event: AuditEvent) {
        self.events.lock().expect("audit lock").push((iteration, event));
    }

    /// `(protocol iteration, event)` pairs in recording order per iteration.
    pub fn events(&self) -> Vec<(Option<usize>, AuditEvent)> {
        self.events.lock().expect("audit lock").clone()
    }
}

#[derive(Clone, Copy)]
struct Tracer<'a> {
    audit: Option<&'a Audit>,
    iteration: Option<usize>,
}

impl Tracer<'_> {
    fn record(&self, event: impl FnOnce() -> AuditEvent) {
        if let Some(a) = self.audit {
            a.record(self.iteration, event());
        }
    }
}

struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    /// Population mean and standard deviation; constant columns get scale 1.
    fn fit(x: &[Vec<f64>], rows: &[usize]) -> Self {
        let d = x[rows[0]].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for &r in rows {
            for (m, v) in mean.iter_mut().zip(&x[r]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for &r in rows {
            for j in 0..d {
                var[j] += (x[r][j] - mean[j]).powi(2);
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dual coordinate descent for the epsilon-insensitive loss with box
/// `[-c_i, c_i]`. Returns weights and the coefficient of the bias feature.
fn solve_dual(z: &[Vec<f64>], y: &[f64], c_per_sample: f64, eps: f64, grid: &Grid) -> (Vec<f64>, f64) {
    let n = z.len();
    let d = z[0].len();
    let mut w = vec![0.0; d];
    let mut wb = 0.0;
    let mut beta = vec![0.0; n];
    let qd: Vec<f64> = z.iter().map(|r| dot(r, r) + BIAS_FEATURE * BIAS_FEATURE).collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from_seed(derive_seed(grid.seed, "svr-order", &[]));
    let mut initial_norm = None;
    let c = c_per_sample;
    for _ in 0..grid.max_epochs {
        order.shuffle(&mut rng);
        let mut norm = 0.0;
        for &i in &order {
            let g = dot(&w, &z[i]) + wb * BIAS_FEATURE - y[i];
            let (gp, gn) = (g + eps, g - eps);
            let b = beta[i];
            let violation = if b == 0.0 {
                if gp < 0.0 {
                    -gp
                } else if gn > 0.0 {
                    gn
                } else {
                    0.0
                }
            } else if b >= c {
                gp.max(0.0)
            } else if b <= -c {
                (-gn).max(0.0)
            } else if b > 0.0 {
                gp.abs()
            } else {
                gn.abs()
            };
            norm += violation;
            let h = qd[i];
            let step = if gp < h * b {
                -gp / h
            } else if gn > h * b {
                -gn / h
            } else {
                -b
            };
            if step.abs() < 1e-14 {
                continue;
            }
            let nb = (b + step).clamp(-c, c);
            let delta = nb - b;
            beta[i] = nb;
            if delta != 0.0 {
                for (wj, xj) in w.iter_mut().zip(&z[i]) {
                    *wj += delta * xj;
                }
                wb += delta * BIAS_FEATURE;
            }
        }
        let init = *initial_norm.get_or_insert(norm);
        if norm <= grid.tolerance * init || norm == 0.0 {
            break;
        }
    }
    (w, wb * BIAS_FEATURE)
}

/// Standardises on `rows`, centres the targets and solves one configuration.
fn fit_fixed(
    x: &[Vec<f64>],
    y: &[f64],
    rows: &[usize],
    c: f64,
    eps: f64,
    grid: &Grid,
    tracer: Tracer<'_>,
) -> RegressionModel {
    tracer.record(|| AuditEvent::Standardize(rows.to_vec()));
    tracer.record(|| AuditEvent::Fit(rows.to_vec()));
    let std = Standardizer::fit(x, rows);
    let z: Vec<Vec<f64>> = rows.iter().map(|&r| std.apply(&x[r])).collect();
    let y_mean = rows.iter().map(|&r| y[r]).sum::<f64>() / rows.len() as f64;
    let yc: Vec<f64> = rows.iter().map(|&r| y[r] - y_mean).collect();
    let (weights, offset) = solve_dual(&z, &yc, c / rows.len() as f64, eps, grid);
    RegressionModel {
        weights,
        bias: y_mean + offset,
        mean: std.mean,
        scale: std.scale,
        c,
        epsilon: eps,
        cv_mae: None,
        feature_fingerprint: None,
        seed: grid.seed,
    }
}

/// Fold index per row. Identical rows form one group so replicated data
/// never straddles folds; groups are dealt round-robin after a seeded shuffle.
fn assign_folds(x: &[Vec<f64>], y: &[f64], rows: &[usize], folds: usize, seed: u64) -> Vec<usize> {
    let mut group_of_key: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut group_of_row = Vec::with_capacity(rows.len());
    for &r in rows {
        let key: Vec<u64> = x[r].iter().chain(std::iter::once(&y[r])).map(|v| v.to_bits()).collect();
        let next = group_of_key.len();
        group_of_row.push(*group_of_key.entry(key).or_insert(next));
    }
    let mut groups: Vec<usize> = (0..group_of_key.len()).collect();
    groups.shuffle(&mut rng_from_seed(derive_seed(seed, "cv-folds", &[])));
    let mut fold_of_group = vec![0; groups.len()];
    for (pos, &g) in groups.iter().enumerate() {
        fold_of_group[g] = pos % folds;
    }
    group_of_row.into_iter().map(|g| fold_of_group[g]).collect()
}

fn check_inputs(x: &[Vec<f64>], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature rows but {} scores",
            x.len(),
            y.len()
        )));
    }
    let Some(first) = x.first() else {
        return Err(Error::InvalidInput("no training rows".into()));
    };
    if first.is_empty() || x.iter().any(|r| r.len() != first.len()) {
        return Err(Error::DimensionMismatch("feature rows differ in length".into()));
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("features and scores must be finite".into()));
    }
    Ok(())
}

fn fit_rows(x: &[Vec<f64>], y: &[f64], rows: &[usize], grid: &Grid, tracer: Tracer<'_>) -> Result<RegressionModel> {
    grid.validate()?;
    let unique: std::collections::HashSet<Vec<u64>> = rows
        .iter()
        .map(|&r| x[r].iter().map(|v| v.to_bits()).collect())
        .collect();
    if unique.len() < grid.folds {
        return Err(Error::Degenerate(format!(
            "{} distinct training rows cannot fill {} folds",
            unique.len(),
            grid.folds
        )));
    }
    let y0 = y[rows[0]];
    if rows.iter().all(|&r| y[r] == y0) {
        return Err(Error::Degenerate("constant target scores".into()));
    }
    tracer.record(|| AuditEvent::GridSearch(rows.to_vec()));
    let fold_of = assign_folds(x, y, rows, grid.folds, grid.seed);

    let mut configs = Vec::new();
    for &c in &grid.c {
        for &e in &grid.epsilon {
            configs.push((c, e));
        }
    }
    let mut scores = Vec::with_capacity(configs.len());
    for &(c, e) in &configs {
        let (mut abs_err, mut count) = (0.0, 0usize);
        for fold in 0..grid.folds {
            let train: Vec<usize> = rows
                .iter()
                .zip(&fold_of)
                .filter(|(_, &f)| f != fold)
                .map(|(&r, _)| r)
                .collect();
            let held: Vec<usize> = rows
                .iter()
                .zip(&fold_of)
                .filter(|(_, &f)| f == fold)
                .map(|(&r, _)| r)
                .collect();
            let model = fit_fixed(x, y, &train, c, e, grid, tracer);
            for &r in &held {
                abs_err += (model.predict(&x[r])? - y[r]).abs();
                count += 1;
            }
        }
        scores.push(abs_err / count as f64);
    }
    let best = scores.iter().copied().fold(f64::INFINITY, f64::min);
    // first configuration within round-off of the best
    let pick = scores
        .iter()
        .position(|&s| s <= best + 1e-9 * best.abs().max(1.0))
        .expect("non-empty grid");
    let (c, e) = configs[pick];
    let mut model = fit_fixed(x, y, rows, c, e, grid, tracer);
    model.cv_mae = Some(scores[pick]);
    Ok(model)
}

/// Standardises, selects `(C, epsilon)` by k-fold cross-validated MAE on the
/// given data only, and refits on all of it.
pub fn fit(features: &[Vec<f64>], mos: &[f64], grid: &Grid) -> Result<RegressionModel> {
    fit_audited(features, mos, grid, None)
}

pub fn fit_audited(features: &[Vec<f64>], mos: &[f64], grid: &Grid, audit: Option<&Audit>) -> Result<RegressionModel> {
    check_inputs(features, mos)?;
    let rows: Vec<usize> = (0..features.len()).collect();
    fit_rows(features, mos, &rows, grid, Tracer { audit, iteration: None })
}

pub fn predict(model: &RegressionModel, features: &[f64]) -> Result<f64> {
    model.predict(features)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitProtocol {
    pub train_fraction: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Large corpora are evaluated with a single split.
    pub large: bool,
}

impl Default for SplitProtocol {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            iterations: 10,
            seed: 0,
            large: false,
        }
    }
}

impl SplitProtocol {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train fraction {} not in (0, 1)",
                self.train_fraction
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        Ok(())
    }

    pub fn effective_iterations(&self) -> usize {
        if self.large {
            1
        } else {
            self.iterations
        }
    }

    /// Row indices of the train and test parts of iteration `it`.
    pub fn split(&self, n: usize, it: usize) -> (Vec<usize>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng_from_seed(derive_seed(self.seed, "split", &[&it.to_string()])));
        let n_train = ((n as f64 * self.train_fraction).round() as usize).clamp(1, n - 1);
        let test = idx.split_off(n_train);
        (idx, test)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationResult {
    pub iteration: usize,
    /// `None` when the test-split correlation is undefined.
    pub srcc: Option<f64>,
    pub plcc: Option<f64>,
    pub c: f64,
    pub epsilon: f64,
    pub test_rows: Vec<usize>,
    pub predictions: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub iterations: Vec<IterationResult>,
    pub median_srcc: Option<f64>,
    pub median_plcc: Option<f64>,
    pub std_srcc: Option<f64>,
    pub std_plcc: Option<f64>,
}

impl ProtocolResult {
    pub fn from_iterations(iterations: Vec<IterationResult>) -> Self {
        let s: Vec<f64> = iterations.iter().filter_map(|r| r.srcc).collect();
        let p: Vec<f64> = iterations.iter().filter_map(|r| r.plcc).collect();
        Self {
            median_srcc: median(&s),
            median_plcc: median(&p),
            std_srcc: std_dev(&s),
            std_plcc: std_dev(&p),
            iterations,
        }
    }
}

/// Per-iteration metric hook: maps `(predictions, mos)` to `(srcc, plcc)`.
pub type Scorer = fn(&[f64], &[f64]) -> (Option<f64>, Option<f64>);

/// SRCC and PLCC on raw predictions.
pub fn raw_scorer(pred: &[f64], mos: &[f64]) -> (Option<f64>, Option<f64>) {
    (srcc(pred, mos).ok(), plcc(pred, mos).ok())
}

/// Fresh split per iteration, fit on train, score on test; medians over
/// iterations.
pub fn run_protocol(
    features: &[Vec<f64>],
    mos: &[f64],
    protocol: &SplitProtocol,
    grid: &Grid,
) -> Result<ProtocolResult> {
    run_protocol_with(features, mos, protocol, grid, raw_scorer, None)
}

pub fn run_protocol_with(
    features: &[Vec<f64>],
    mos: &[f64],
    protocol: &SplitProtocol,
    grid: &Grid,
    scorer: Scorer,
    audit: Option<&Audit>,
) -> Result<ProtocolResult> {
    protocol.validate()?;
    grid.validate()?;
    check_inputs(features, mos)?;
    if features.len() < 10 {
        return Err(Error::InvalidInput(format!(
            "protocol needs at least 10 samples, got {}",
            features.len()
        )));
    }
    let iterations: Vec<IterationResult> = (0..protocol.effective_iterations())
        .into_par_iter()
        .map(|it| {
            let (train, test) = protocol.split(features.len(), it);
            let tracer = Tracer {
                audit,
                iteration: Some(it),
            };
            let model = fit_rows(features, mos, &train, grid, tracer)?;
            let predictions: Vec<f64> = test
                .iter()
                .map(|&r| model.predict(&features[r]))
                .collect::<Result<_>>()?;
            let truth: Vec<f64> = test.iter().map(|&r| mos[r]).collect();
            let (s, p) = scorer(&predictions, &truth);
            Ok(IterationResult {
                iteration: it,
                srcc: s,
                plcc: p,
                c: model.c,
                epsilon: model.epsilon,
                test_rows: test,
                predictions,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ProtocolResult::from_iterations(iterations))
}
