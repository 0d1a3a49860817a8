//! Quality encoder: a convolutional backbone with a linear projection to the
//! embedding space, trained with the triplet margin loss.

mod checkpoint;
pub(crate) mod container;
mod loss;
pub mod nn;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::seed::{derive_seed, rng_from_seed};

pub use checkpoint::Checkpoint;
pub use loss::{triplet_distance, triplet_loss_and_grad, triplet_margin_loss, TripletLossGrad};
pub use nn::{Architecture, ConvNet, Linear, Tensor};
pub use train::{
    evaluate_triplets, train, train_from, RenderCache, StepRecord, TrainHistory, TrainOptions, TrainOutcome,
    TripletEvaluation, ValidationRecord, ValidationSet,
};

pub const DEFAULT_EMBEDDING_DIM: usize = 128;

/// Per-channel input normalisation applied to `[0, 1]` RGB.
const INPUT_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const INPUT_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackbonePreset {
    /// Wide backbone whose branches pool to 768 (quality, per scale) and
    /// 1,536 (content) features. Random init unless weights are loaded.
    PaperScale,
    /// Small backbone that trains on one CPU core.
    #[default]
    DeskScale,
}

impl BackbonePreset {
    pub fn quality_architecture(self) -> Architecture {
        match self {
            Self::PaperScale => Architecture {
                stem_width: 96,
                stem_patch: 4,
                stage_widths: vec![192, 384, 768],
            },
            Self::DeskScale => Architecture {
                stem_width: 16,
                stem_patch: 4,
                stage_widths: vec![32, 64, 128, 256],
            },
        }
    }

    pub fn content_architecture(self) -> Architecture {
        match self {
            Self::PaperScale => Architecture {
                stem_width: 192,
                stem_patch: 4,
                stage_widths: vec![384, 768, 1536],
            },
            Self::DeskScale => Architecture {
                stem_width: 32,
                stem_patch: 4,
                stage_widths: vec![64, 128, 256, 512],
            },
        }
    }
}

impl std::str::FromStr for BackbonePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-scale" => Ok(Self::PaperScale),
            "desk-scale" => Ok(Self::DeskScale),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected paper-scale or desk-scale)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

impl std::str::FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "constant" => Ok(Self::Constant),
            other => Err(Error::Config(format!(
                "unknown schedule `{other}` (cosine or constant)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub preset: BackbonePreset,
    pub embedding_dim: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub adam_eps: f64,
    pub adam_betas: (f64, f64),
    pub schedule: Schedule,
    pub crop: u32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Cap on triplets drawn per epoch (after shuffling); `None` uses all.
    pub max_triplets_per_epoch: Option<usize>,
    /// Validation cadence as a fraction of the run.
    pub validation_interval: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            preset: BackbonePreset::DeskScale,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            margin: 1.5,
            learning_rate: 5e-4,
            adam_eps: 1e-8,
            adam_betas: (0.9, 0.999),
            schedule: Schedule::Cosine,
            crop: 256,
            epochs: 1,
            batch_size: 64,
            seed: 0,
            max_triplets_per_epoch: None,
            validation_interval: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return fail(format!("margin must be positive, got {}", self.margin));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.adam_eps > 0.0) {
            return fail("optimizer epsilon must be positive".into());
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return fail(format!("optimizer betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if self.embedding_dim == 0 || self.epochs == 0 || self.batch_size == 0 || self.crop == 0 {
            return fail("embedding dim, epochs, batch size and crop must be positive".into());
        }
        if self.max_triplets_per_epoch == Some(0) {
            return fail("max_triplets_per_epoch must be positive".into());
        }
        if !(self.validation_interval > 0.0 && self.validation_interval <= 1.0) {
            return fail("validation interval must lie in (0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityEmbedding {
    pub vector: Vec<f64>,
}

impl QualityEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.vector
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Normalised channel-major input tensor.
pub fn image_to_tensor(img: &ImageBuffer) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(3, h, w);
    let plane = w * h;
    for (i, px) in img.as_raw().chunks_exact(3).enumerate() {
        for c in 0..3 {
            t.data[c * plane + i] = (px[c] as f32 / 255.0 - INPUT_MEAN[c]) / INPUT_STD[c];
        }
    }
    t
}

/// Backbone plus projection head; the backbone's pooled output is the
/// quality feature, the projection output is the loss-space embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityEncoder {
    pub backbone: ConvNet,
    pub projection: Linear,
}

impl QualityEncoder {
    pub fn init(preset: BackbonePreset, embedding_dim: usize, seed: u64) -> Self {
        let backbone = ConvNet::init(
            &preset.quality_architecture(),
            derive_seed(seed, "quality-backbone", &[]),
        );
        let projection = Linear::init(
            backbone.output_dim(),
            embedding_dim,
            derive_seed(seed, "projection", &[]),
        );
        Self { backbone, projection }
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.output_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.projection.out_dim
    }

    pub fn min_input_side(&self) -> u32 {
        self.backbone.min_input_side() as u32
    }

    /// Pooled pre-projection features.
    pub fn features(&self, img: &ImageBuffer) -> Result<Vec<f32>> {
        img.ensure_min_side(self.min_input_side())?;
        Ok(self.backbone.forward(&image_to_tensor(img)))
    }

    pub fn embed(&self, img: &ImageBuffer) -> Result<QualityEmbedding> {
        let features = self.features(img)?;
        Ok(QualityEmbedding {
            vector: self.projection.forward(&features).into_iter().map(f64::from).collect(),
        })
    }

    /// `(name, shape)` of every parameter tensor, in optimizer order.
    pub fn parameter_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, l) in self.backbone.layers.iter().enumerate() {
            out.push((
                format!("backbone.{i}.weight"),
                vec![l.shape.out_channels, l.shape.patch_len()],
            ));
            out.push((format!("backbone.{i}.bias"), vec![l.shape.out_channels]));
        }
        out.push((
            "projection.weight".into(),
            vec![self.projection.out_dim, self.projection.in_dim],
        ));
        out.push(("projection.bias".into(), vec![self.projection.out_dim]));
        out
    }

    pub fn parameters(&self) -> Vec<&[f32]> {
        let mut out: Vec<&[f32]> = Vec::new();
        for l in &self.backbone.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&self.projection.weight);
        out.push(&self.projection.bias);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out: Vec<&mut [f32]> = Vec::new();
        for l in &mut self.backbone.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.projection.weight);
        out.push(&mut self.projection.bias);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grads(&self) -> Vec<Vec<f32>> {
        self.parameters().iter().map(|p| vec![0.0; p.len()]).collect()
    }
}

/// Deterministic checkpoint inference: 128-d (by default) embedding.
pub fn embed(img: &ImageBuffer, checkpoint: &Checkpoint) -> Result<QualityEmbedding> {
    checkpoint.encoder.embed(img)
}

/// Top-left corner of a `crop x crop` window drawn uniformly over the valid
/// offsets.
pub fn crop_window(width: u32, height: u32, crop: u32, seed: u64) -> Result<(u32, u32)> {
    if width < crop || height < crop {
        return Err(Error::ImageTooSmall(format!(
            "{width}x{height} image cannot be cropped to {crop}x{crop}"
        )));
    }
    let mut rng = rng_from_seed(derive_seed(seed, "crop-window", &[]));
    Ok((rng.random_range(0..=width - crop), rng.random_range(0..=height - crop)))
}

/// Crops the same window out of all three triplet members.
pub fn synchronized_crop(
    a: &ImageBuffer,
    p: &ImageBuffer,
    n: &ImageBuffer,
    crop: u32,
    seed: u64,
) -> Result<[ImageBuffer; 3]> {
    if a.dimensions() != p.dimensions() || a.dimensions() != n.dimensions() {
        return Err(Error::DimensionMismatch(format!(
            "triplet members are {:?}, {:?} and {:?}",
            a.dimensions(),
            p.dimensions(),
            n.dimensions()
        )));
    }
    let (x, y) = crop_window(a.width(), a.height(), crop, seed)?;
    Ok([
        a.crop(x, y, crop, crop)?,
        p.crop(x, y, crop, crop)?,
        n.crop(x, y, crop, crop)?,
    ])
}

/// Centre window used for validation and evaluation crops.
pub fn center_crop(img: &ImageBuffer, crop: u32) -> Result<ImageBuffer> {
    img.ensure_min_side(crop)?;
    img.crop((img.width() - crop) / 2, (img.height() - crop) / 2, crop, crop)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::procedural_image;

    #[test]
    fn desk_encoder_shapes() {
        let enc = QualityEncoder::init(BackbonePreset::DeskScale, 128, 1);
        assert_eq!(enc.feature_dim(), 256);
        assert_eq!(enc.embedding_dim(), 128);
        let n = enc.parameter_count();
        assert!((300_000..1_200_000).contains(&n), "{n} parameters");
        let layout = enc.parameter_layout();
        for ((_, shape), p) in layout.iter().zip(enc.parameters()) {
            assert_eq!(shape.iter().product::<usize>(), p.len());
        }
    }

    #[test]
    fn paper_preset_dimensions() {
        assert_eq!(BackbonePreset::PaperScale.quality_architecture().output_dim(), 768);
        assert_eq!(BackbonePreset::PaperScale.content_architecture().output_dim(), 1536);
        assert_eq!(BackbonePreset::DeskScale.content_architecture().output_dim(), 512);
    }

    #[test]
    fn untrained_embedding_is_finite_and_deterministic() {
        let enc = QualityEncoder::init(BackbonePreset::DeskScale, 128, 5);
        let img = procedural_image(64, 48, 2);
        let e = enc.embed(&img).unwrap();
        assert_eq!(e.dim(), 128);
        assert!(e.vector.iter().all(|v| v.is_finite()) && e.norm() > 0.0);
        assert_eq!(e, enc.embed(&img).unwrap());
        assert!(enc.embed(&procedural_image(3, 40, 2)).is_err());
    }

    #[test]
    fn crop_edges() {
        let img = procedural_image(256, 256, 1);
        let [a, ..] = synchronized_crop(&img, &img, &img, 256, 3).unwrap();
        assert_eq!(a, img);
        let small = procedural_image(255, 300, 1);
        assert!(synchronized_crop(&small, &small, &small, 256, 3).is_err());
        assert!(synchronized_crop(&img, &img, &small, 200, 3).is_err());
        assert_eq!(
            crop_window(512, 512, 256, 77).unwrap(),
            crop_window(512, 512, 256, 77).unwrap()
        );
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig {
            margin: 0.0,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig {
            adam_betas: (0.9, 1.0),
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
