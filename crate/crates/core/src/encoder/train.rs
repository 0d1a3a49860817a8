//! Mini-batch optimisation of the triplet margin loss.
//!
//! Per-triplet gradients are accumulated in fixed-size chunks and the chunks
//! are reduced in order, so a run is bit-reproducible whatever the number of
//! worker threads.

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{
    center_crop, image_to_tensor, synchronized_crop, triplet_loss_and_grad, Checkpoint, EncoderConfig, QualityEncoder,
    Schedule,
};
use crate::corpus::ImageSource;
use crate::error::{Error, Result};
use crate::image::{ImageBuffer, MIN_TRIPLET_SIDE};
use crate::seed::{derive_seed, rng_from_seed};
use crate::triplet::{render_chain, render_extension, DegradationChain, Manifest, TripletSpec};

/// Triplets per gradient accumulation chunk.
const CHUNK: usize = 8;
/// Rendered single-step chains are cached up to this many bytes.
const CACHE_BUDGET_BYTES: usize = 1 << 30;

type ChainKey = (String, DegradationChain);

/// Lazily renders chains, caching pristine images and single-step chains.
/// Longer chains are rendered from their cached prefix.
pub struct RenderCache<'a> {
    images: &'a dyn ImageSource,
    master_seed: u64,
    cached: Mutex<(HashMap<ChainKey, Arc<ImageBuffer>>, usize)>,
}

impl<'a> RenderCache<'a> {
    pub fn new(images: &'a dyn ImageSource, master_seed: u64) -> Self {
        Self {
            images,
            master_seed,
            cached: Mutex::new((HashMap::new(), 0)),
        }
    }

    fn lookup(&self, key: &ChainKey) -> Option<Arc<ImageBuffer>> {
        self.cached.lock().expect("cache lock").0.get(key).cloned()
    }

    fn store(&self, key: ChainKey, img: Arc<ImageBuffer>) {
        let mut guard = self.cached.lock().expect("cache lock");
        let size = img.as_raw().len();
        if guard.1 + size <= CACHE_BUDGET_BYTES && !guard.0.contains_key(&key) {
            guard.1 += size;
            guard.0.insert(key, img);
        }
    }

    pub fn chain(&self, image_id: &str, chain: &DegradationChain) -> Result<Arc<ImageBuffer>> {
        let key = (image_id.to_string(), chain.clone());
        if let Some(img) = self.lookup(&key) {
            return Ok(img);
        }
        let img = match chain.len() {
            0 => {
                let img = self.images.load(image_id)?;
                img.ensure_min_side(MIN_TRIPLET_SIDE)?;
                img
            }
            1 => render_chain(
                image_id,
                chain,
                &*self.chain(image_id, &DegradationChain::pristine())?,
                self.master_seed,
            )?,
            len => {
                let prefix = DegradationChain::from_steps(&chain.steps()[..len - 1])?;
                let base = self.chain(image_id, &prefix)?;
                return Ok(Arc::new(render_extension(
                    image_id,
                    chain,
                    (*base).clone(),
                    len - 1,
                    self.master_seed,
                )?));
            }
        };
        let img = Arc::new(img);
        self.store(key, img.clone());
        Ok(img)
    }

    pub fn triplet(&self, spec: &TripletSpec) -> Result<[Arc<ImageBuffer>; 3]> {
        Ok([
            self.chain(&spec.image_id, &spec.anchor)?,
            self.chain(&spec.image_id, &spec.positive)?,
            self.chain(&spec.image_id, &spec.negative)?,
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub learning_rate: f64,
    pub loss: f64,
    /// Fraction of the batch with `d(a, p) < d(a, n)`.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationRecord {
    pub step: u64,
    pub loss: f64,
    pub accuracy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub validations: Vec<ValidationRecord>,
}

impl TrainHistory {
    /// Mean step loss over the first and the last `fraction` of the steps.
    pub fn loss_at_ends(&self, fraction: f64) -> Option<(f64, f64)> {
        let n = self.steps.len();
        let k = ((n as f64 * fraction).round() as usize).max(1);
        if n < 2 * k {
            return None;
        }
        let mean = |s: &[StepRecord]| s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64;
        Some((mean(&self.steps[..k]), mean(&self.steps[n - k..])))
    }
}

pub struct ValidationSet<'a> {
    pub manifest: &'a Manifest,
    pub images: &'a dyn ImageSource,
    /// Evaluate a seeded subset of this many triplets.
    pub limit: Option<usize>,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    pub validation: Option<ValidationSet<'a>>,
    /// Also return the checkpoint with the lowest validation loss.
    pub keep_best: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// End-of-run checkpoint.
    pub checkpoint: Checkpoint,
    pub best: Option<Checkpoint>,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletEvaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub count: usize,
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(encoder: &QualityEncoder, config: &EncoderConfig) -> Self {
        Self {
            m: encoder.zero_grads(),
            v: encoder.zero_grads(),
            t: 0,
            beta1: config.adam_betas.0,
            beta2: config.adam_betas.1,
            eps: config.adam_eps,
        }
    }

    fn step(&mut self, params: Vec<&mut [f32]>, grads: &[Vec<f32>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] as f64 / c1;
                let v_hat = v[i] as f64 / c2;
                p[i] -= (lr * m_hat / (v_hat.sqrt() + self.eps)) as f32;
            }
        }
    }
}

fn learning_rate(config: &EncoderConfig, step: u64, total: u64) -> f64 {
    match config.schedule {
        Schedule::Constant => config.learning_rate,
        Schedule::Cosine => {
            let progress = step as f64 / total.max(1) as f64;
            config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

struct ChunkResult {
    grads: Vec<Vec<f32>>,
    loss_sum: f64,
    correct: usize,
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

#[allow(clippy::too_many_arguments)]
fn process_chunk(
    encoder: &QualityEncoder,
    cache: &RenderCache<'_>,
    manifest: &Manifest,
    chunk: &[usize],
    config: &EncoderConfig,
    epoch: usize,
    scale: f32,
    step: u64,
) -> Result<ChunkResult> {
    let mut out = ChunkResult {
        grads: encoder.zero_grads(),
        loss_sum: 0.0,
        correct: 0,
    };
    let n_conv = 2 * encoder.backbone.layers.len();
    for &idx in chunk {
        let spec = &manifest.entries[idx];
        let [a, p, n] = cache.triplet(spec)?;
        let crop_seed = derive_seed(config.seed, "crop", &[&epoch.to_string(), &idx.to_string()]);
        let crops = synchronized_crop(&a, &p, &n, config.crop, crop_seed)?;
        let mut pooled = Vec::with_capacity(3);
        let mut traces = Vec::with_capacity(3);
        let mut embeds = Vec::with_capacity(3);
        for img in &crops {
            let (feat, trace) = encoder.backbone.forward_trace(&image_to_tensor(img));
            embeds.push(to_f64(&encoder.projection.forward(&feat)));
            pooled.push(feat);
            traces.push(trace);
        }
        let lg = triplet_loss_and_grad(&embeds[0], &embeds[1], &embeds[2], config.margin)?;
        if !lg.loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss at step {step} on triplet {idx} ({}: {} / {} / {}); d(a,p)={}, d(a,n)={}",
                spec.image_id, spec.anchor, spec.positive, spec.negative, lg.d_ap, lg.d_an
            )));
        }
        out.loss_sum += lg.loss;
        if lg.d_ap < lg.d_an {
            out.correct += 1;
        }
        if lg.loss <= 0.0 {
            continue;
        }
        for (k, g) in [&lg.grad_a, &lg.grad_p, &lg.grad_n].into_iter().enumerate() {
            let dy: Vec<f32> = g.iter().map(|&v| v as f32 * scale).collect();
            let (conv_grads, proj_grads) = out.grads.split_at_mut(n_conv);
            let (dw, db) = proj_grads.split_at_mut(1);
            let dpooled = encoder.projection.backward(&pooled[k], &dy, &mut dw[0], &mut db[0]);
            encoder.backbone.backward(&traces[k], &dpooled, conv_grads);
        }
    }
    Ok(out)
}

fn check_closure(manifest: &Manifest, images: &dyn ImageSource) -> Result<()> {
    for id in &manifest.header.images {
        if !images.contains(id) {
            return Err(Error::MissingArtifact(format!(
                "manifest image `{id}` is not in the corpus"
            )));
        }
    }
    Ok(())
}

/// Seeded subset of entry indices, returned in manifest order.
fn subset(len: usize, limit: Option<usize>, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if let Some(limit) = limit.filter(|&l| l < len) {
        idx.shuffle(&mut rng_from_seed(derive_seed(seed, "validation-subset", &[])));
        idx.truncate(limit);
        idx.sort_unstable();
    }
    idx
}

/// Loss and ordering accuracy on centre crops. Each distinct chain is
/// rendered and embedded once.
pub fn evaluate_triplets(
    encoder: &QualityEncoder,
    entries: &[&TripletSpec],
    images: &dyn ImageSource,
    master_seed: u64,
    crop: u32,
    margin: f64,
) -> Result<TripletEvaluation> {
    if entries.is_empty() {
        return Err(Error::InvalidInput("no triplets to evaluate".into()));
    }
    let cache = RenderCache::new(images, master_seed);
    let mut seen = HashSet::new();
    let keys: Vec<ChainKey> = entries
        .iter()
        .flat_map(|e| e.chains().map(|c| (e.image_id.clone(), c.clone())))
        .filter(|k| seen.insert(k.clone()))
        .collect();
    let embedded: Vec<Vec<f64>> = keys
        .par_iter()
        .map(|(id, chain)| {
            let img = center_crop(&*cache.chain(id, chain)?, crop)?;
            Ok(encoder.embed(&img)?.vector)
        })
        .collect::<Result<_>>()?;
    let lookup: HashMap<&ChainKey, &Vec<f64>> = keys.iter().zip(&embedded).collect();
    let (mut loss, mut correct) = (0.0, 0usize);
    for e in entries {
        let get = |c: &DegradationChain| lookup[&(e.image_id.clone(), c.clone())];
        let lg = triplet_loss_and_grad(get(&e.anchor), get(&e.positive), get(&e.negative), margin)?;
        loss += lg.loss;
        correct += usize::from(lg.d_ap < lg.d_an);
    }
    Ok(TripletEvaluation {
        loss: loss / entries.len() as f64,
        accuracy: correct as f64 / entries.len() as f64,
        count: entries.len(),
    })
}

/// Trains a freshly initialised encoder.
pub fn train(
    manifest: &Manifest,
    images: &dyn ImageSource,
    config: &EncoderConfig,
    options: &TrainOptions<'_>,
) -> Result<TrainOutcome> {
    train_from(Checkpoint::initial(config), manifest, images, config, options)
}

/// Trains starting from the parameters of `init` (e.g. pretrained weights).
pub fn train_from(
    init: Checkpoint,
    manifest: &Manifest,
    images: &dyn ImageSource,
    config: &EncoderConfig,
    options: &TrainOptions<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if manifest.entries.is_empty() {
        return Err(Error::InvalidInput("manifest has no triplets".into()));
    }
    check_closure(manifest, images)?;
    if let Some(v) = &options.validation {
        check_closure(v.manifest, v.images)?;
    }
    let cache = RenderCache::new(images, manifest.header.master_seed);
    for id in &manifest.header.images {
        let img = cache.chain(id, &DegradationChain::pristine())?;
        if img.width() < config.crop || img.height() < config.crop {
            return Err(Error::Config(format!(
                "crop {} exceeds image `{id}` ({}x{})",
                config.crop,
                img.width(),
                img.height()
            )));
        }
    }

    let fingerprint = manifest.fingerprint();
    let mut encoder = init.encoder;
    let mut adam = Adam::new(&encoder, config);
    let per_epoch = config
        .max_triplets_per_epoch
        .map_or(manifest.entries.len(), |m| m.min(manifest.entries.len()));
    let steps_per_epoch = per_epoch.div_ceil(config.batch_size) as u64;
    let total_steps = steps_per_epoch * config.epochs as u64;
    let validate_every = ((total_steps as f64 * config.validation_interval).round() as u64).max(1);
    log::info!(
        "training on {} triplets per epoch, {} epochs, {} steps, {} parameters",
        per_epoch,
        config.epochs,
        total_steps,
        encoder.parameter_count()
    );

    let validation_entries: Option<Vec<&TripletSpec>> = options.validation.as_ref().map(|v| {
        subset(v.manifest.entries.len(), v.limit, config.seed)
            .into_iter()
            .map(|i| &v.manifest.entries[i])
            .collect()
    });
    let validate = |encoder: &QualityEncoder| -> Result<Option<TripletEvaluation>> {
        match (&options.validation, &validation_entries) {
            (Some(v), Some(entries)) => Ok(Some(evaluate_triplets(
                encoder,
                entries,
                v.images,
                v.manifest.header.master_seed,
                config.crop,
                config.margin,
            )?)),
            _ => Ok(None),
        }
    };

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut step = init.steps;
    let mut local_step = 0u64;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..manifest.entries.len()).collect();
        order.shuffle(&mut rng_from_seed(derive_seed(
            config.seed,
            "shuffle",
            &[&epoch.to_string()],
        )));
        order.truncate(per_epoch);
        for batch in order.chunks(config.batch_size) {
            let lr = learning_rate(config, local_step, total_steps);
            let scale = 1.0 / batch.len() as f32;
            let chunks: Vec<Result<ChunkResult>> = batch
                .par_chunks(CHUNK)
                .map(|c| process_chunk(&encoder, &cache, manifest, c, config, epoch, scale, step))
                .collect();
            let mut grads = encoder.zero_grads();
            let (mut loss_sum, mut correct) = (0.0, 0);
            for chunk in chunks {
                let chunk = chunk?;
                loss_sum += chunk.loss_sum;
                correct += chunk.correct;
                for (g, c) in grads.iter_mut().zip(&chunk.grads) {
                    g.iter_mut().zip(c).for_each(|(a, b)| *a += b);
                }
            }
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient at step {step}")));
            }
            adam.step(encoder.parameters_mut(), &grads, lr);
            step += 1;
            local_step += 1;
            let record = StepRecord {
                step,
                learning_rate: lr,
                loss: loss_sum / batch.len() as f64,
                accuracy: correct as f64 / batch.len() as f64,
            };
            log::debug!(
                "step {step}: loss {:.4} acc {:.3} lr {:.2e}",
                record.loss,
                record.accuracy,
                lr
            );
            history.steps.push(record);

            if local_step.is_multiple_of(validate_every) || local_step == total_steps {
                let recent = &history.steps[history.steps.len().saturating_sub(validate_every as usize)..];
                let train_loss = recent.iter().map(|r| r.loss).sum::<f64>() / recent.len() as f64;
                let train_acc = recent.iter().map(|r| r.accuracy).sum::<f64>() / recent.len() as f64;
                match validate(&encoder)? {
                    Some(v) => {
                        log::info!(
                            "step {step}/{total_steps}: train loss {train_loss:.4} acc {train_acc:.3}, validation loss {:.4} acc {:.3}",
                            v.loss,
                            v.accuracy
                        );
                        history.validations.push(ValidationRecord {
                            step,
                            loss: v.loss,
                            accuracy: v.accuracy,
                            count: v.count,
                        });
                        if options.keep_best && best.as_ref().is_none_or(|(l, _)| v.loss < *l) {
                            best = Some((
                                v.loss,
                                Checkpoint {
                                    config: config.clone(),
                                    steps: step,
                                    manifest_fingerprint: fingerprint.clone(),
                                    encoder: encoder.clone(),
                                },
                            ));
                        }
                    }
                    None => log::info!("step {step}/{total_steps}: train loss {train_loss:.4} acc {train_acc:.3}"),
                }
            }
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            config: config.clone(),
            steps: step,
            manifest_fingerprint: fingerprint,
            encoder,
        },
        best: best.map(|(_, c)| c),
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let c = EncoderConfig::default();
        assert_eq!(learning_rate(&c, 0, 10), 5e-4);
        assert!((learning_rate(&c, 5, 10) - 2.5e-4).abs() < 1e-15);
        assert!(learning_rate(&c, 9, 10) < 2e-5);
    }

    #[test]
    fn subset_is_sorted_and_bounded() {
        let s = subset(100, Some(10), 3);
        assert_eq!(s.len(), 10);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(subset(5, Some(10), 3), vec![0, 1, 2, 3, 4]);
    }
}
