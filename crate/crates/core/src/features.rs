//! Content features from a frozen encoder, two-scale quality features from a
//! trained checkpoint, their fusion, and on-disk feature matrices.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::ImageSource;
use crate::encoder::container::{decode, encode, take};
use crate::encoder::{image_to_tensor, Architecture, BackbonePreset, Checkpoint, ConvNet};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::seed::{derive_seed, fingerprint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Content,
    QualityFull,
    QualityHalf,
    /// Full-scale features followed by half-scale features.
    Quality,
    Fused,
}

impl Provenance {
    fn is_quality(self) -> bool {
        matches!(self, Self::Quality | Self::QualityFull | Self::QualityHalf)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f32>,
    pub provenance: Provenance,
}

impl FeatureVector {
    pub fn new(values: Vec<f32>, provenance: Provenance) -> Self {
        Self { values, provenance }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

/// Which scales the quality branch is evaluated at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scales {
    pub full: bool,
    pub half: bool,
}

impl Default for Scales {
    fn default() -> Self {
        Self { full: true, half: true }
    }
}

impl Scales {
    pub const FULL_ONLY: Scales = Scales {
        full: true,
        half: false,
    };

    pub fn provenance(self) -> Result<Provenance> {
        match (self.full, self.half) {
            (true, true) => Ok(Provenance::Quality),
            (true, false) => Ok(Provenance::QualityFull),
            (false, true) => Ok(Provenance::QualityHalf),
            (false, false) => Err(Error::Config("at least one scale must be selected".into())),
        }
    }

    pub fn count(self) -> usize {
        usize::from(self.full) + usize::from(self.half)
    }
}

impl std::str::FromStr for Scales {
    type Err = Error;

    /// Comma-separated list of `full` and `half`.
    fn from_str(s: &str) -> Result<Self> {
        let mut scales = Scales {
            full: false,
            half: false,
        };
        for part in s.split(',').map(str::trim) {
            match part {
                "full" => scales.full = true,
                "half" => scales.half = true,
                other => return Err(Error::Config(format!("unknown scale `{other}`"))),
            }
        }
        scales.provenance()?;
        Ok(scales)
    }
}

const CONTENT_MAGIC: &[u8; 8] = b"TRIQACNT";

#[derive(Serialize, Deserialize)]
struct ContentMeta {
    architecture: Architecture,
}

/// Frozen content branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentEncoder {
    pub architecture: Architecture,
    pub backbone: ConvNet,
}

impl ContentEncoder {
    /// Randomly initialised from a fixed seed, so every run sees the same
    /// frozen weights. Stands in for pretrained weights offline.
    pub fn frozen(preset: BackbonePreset) -> Self {
        let architecture = preset.content_architecture();
        let backbone = ConvNet::init(&architecture, derive_seed(0, "content-backbone", &[]));
        Self { architecture, backbone }
    }

    pub fn dim(&self) -> usize {
        self.backbone.output_dim()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors: Vec<(String, Vec<usize>, &[f32])> = self
            .backbone
            .layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (
                        format!("{i}.weight"),
                        vec![l.shape.out_channels, l.shape.patch_len()],
                        &l.weight[..],
                    ),
                    (format!("{i}.bias"), vec![l.shape.out_channels], &l.bias[..]),
                ]
            })
            .collect();
        let borrowed: Vec<(&str, Vec<usize>, &[f32])> =
            tensors.iter().map(|(n, s, d)| (n.as_str(), s.clone(), *d)).collect();
        encode(
            CONTENT_MAGIC,
            &ContentMeta {
                architecture: self.architecture.clone(),
            },
            &borrowed,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    /// Loads weights (for instance converted pretrained weights).
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (meta, mut tensors): (ContentMeta, _) = decode(CONTENT_MAGIC, &bytes, path)?;
        let mut backbone = ConvNet::init(&meta.architecture, 0);
        for (i, l) in backbone.layers.iter_mut().enumerate() {
            l.weight = take(
                &mut tensors,
                &format!("{i}.weight"),
                &[l.shape.out_channels, l.shape.patch_len()],
                path,
            )?;
            l.bias = take(&mut tensors, &format!("{i}.bias"), &[l.shape.out_channels], path)?;
        }
        Ok(Self {
            architecture: meta.architecture,
            backbone,
        })
    }

    pub fn fingerprint(&self) -> Result<String> {
        Ok(fingerprint(&self.to_bytes()?))
    }
}

pub fn extract_content_features(img: &ImageBuffer, encoder: &ContentEncoder) -> Result<FeatureVector> {
    img.ensure_min_side(encoder.backbone.min_input_side() as u32)?;
    Ok(FeatureVector::new(
        encoder.backbone.forward(&image_to_tensor(img)),
        Provenance::Content,
    ))
}

/// Pooled pre-projection quality features at the selected scales, full
/// scale first. The half scale uses [`ImageBuffer::half_scale`].
pub fn extract_quality_features(img: &ImageBuffer, ckpt: &Checkpoint, scales: Scales) -> Result<FeatureVector> {
    let provenance = scales.provenance()?;
    let mut values = Vec::with_capacity(ckpt.encoder.feature_dim() * scales.count());
    if scales.full {
        values.extend(ckpt.encoder.features(img)?);
    }
    if scales.half {
        values.extend(ckpt.encoder.features(&img.half_scale()?)?);
    }
    Ok(FeatureVector::new(values, provenance))
}

/// Concatenation, content first.
pub fn fuse(content: &FeatureVector, quality: &FeatureVector) -> Result<FeatureVector> {
    if content.provenance != Provenance::Content || !quality.provenance.is_quality() {
        return Err(Error::InvalidInput(format!(
            "cannot fuse {:?} with {:?}; expected content then quality",
            content.provenance, quality.provenance
        )));
    }
    let mut values = Vec::with_capacity(content.dim() + quality.dim());
    values.extend_from_slice(&content.values);
    values.extend_from_slice(&quality.values);
    Ok(FeatureVector::new(values, Provenance::Fused))
}

/// Column ranges of each branch within a feature matrix row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub content: usize,
    pub quality_full: usize,
    pub quality_half: usize,
}

impl FeatureLayout {
    pub fn dim(&self) -> usize {
        self.content + self.quality_full + self.quality_half
    }
}

pub const FEATURE_FORMAT: &str = "triqa-features";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub format: String,
    pub format_version: u32,
    pub provenance: Provenance,
    pub layout: FeatureLayout,
    pub rows: usize,
    pub image_ids: Vec<String>,
    pub checkpoint_fingerprint: String,
    pub content_fingerprint: Option<String>,
    pub master_seed: u64,
}

/// Row-major feature matrix, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub meta: FeatureMeta,
    pub values: Vec<f32>,
}

impl FeatureSet {
    pub fn dim(&self) -> usize {
        self.meta.layout.dim()
    }

    pub fn rows(&self) -> usize {
        self.meta.rows
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim()..(i + 1) * self.dim()]
    }

    pub fn row_of(&self, image_id: &str) -> Option<&[f32]> {
        self.meta
            .image_ids
            .iter()
            .position(|id| id == image_id)
            .map(|i| self.row(i))
    }

    /// Rows as f64 vectors.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows())
            .map(|i| self.row(i).iter().map(|&v| v as f64).collect())
            .collect()
    }

    /// Fingerprint of the binary payload and its sidecar.
    pub fn fingerprint(&self) -> Result<String> {
        let mut bytes = serde_json::to_vec(&self.meta)?;
        bytes.extend(self.values.iter().flat_map(|v| v.to_le_bytes()));
        Ok(fingerprint(&bytes))
    }

    fn sidecar(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    /// Writes `path` (raw little-endian f32) and a JSON sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let sidecar = Self::sidecar(path);
        let json = serde_json::to_string_pretty(&self.meta)?;
        std::fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let sidecar = Self::sidecar(path);
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let meta: FeatureMeta = serde_json::from_str(&text).map_err(|e| Error::format(&sidecar, e.to_string()))?;
        if meta.format != FEATURE_FORMAT {
            return Err(Error::format(&sidecar, "not a feature sidecar"));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() != 4 * meta.rows * meta.layout.dim() || meta.image_ids.len() != meta.rows {
            return Err(Error::format(path, "payload size does not match the sidecar"));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self { meta, values })
    }
}

/// Extracts fused (or quality-only when `content` is `None`) features for
/// every listed image.
pub fn extract_feature_set(
    images: &dyn ImageSource,
    image_ids: &[String],
    ckpt: &Checkpoint,
    content: Option<&ContentEncoder>,
    scales: Scales,
) -> Result<FeatureSet> {
    if image_ids.is_empty() {
        return Err(Error::InvalidInput("no images to extract".into()));
    }
    let rows: Vec<Vec<f32>> = image_ids
        .par_iter()
        .map(|id| {
            let img = images.load(id)?;
            let quality = extract_quality_features(&img, ckpt, scales)?;
            Ok(match content {
                Some(enc) => fuse(&extract_content_features(&img, enc)?, &quality)?.values,
                None => quality.values,
            })
        })
        .collect::<Result<_>>()?;
    let per_scale = ckpt.encoder.feature_dim();
    let layout = FeatureLayout {
        content: content.map_or(0, ContentEncoder::dim),
        quality_full: if scales.full { per_scale } else { 0 },
        quality_half: if scales.half { per_scale } else { 0 },
    };
    Ok(FeatureSet {
        meta: FeatureMeta {
            format: FEATURE_FORMAT.into(),
            format_version: 1,
            provenance: if content.is_some() {
                Provenance::Fused
            } else {
                scales.provenance()?
            },
            layout,
            rows: rows.len(),
            image_ids: image_ids.to_vec(),
            checkpoint_fingerprint: ckpt.fingerprint()?,
            content_fingerprint: content.map(ContentEncoder::fingerprint).transpose()?,
            master_seed: ckpt.config.seed,
        },
        values: rows.into_iter().flatten().collect(),
    })
}
