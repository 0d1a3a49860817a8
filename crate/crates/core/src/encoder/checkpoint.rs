use std::path::Path;

use serde::{Deserialize, Serialize};

use super::container::{decode, encode, take};
use super::{EncoderConfig, QualityEmbedding, QualityEncoder};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::seed::fingerprint;

const MAGIC: &[u8; 8] = b"TRIQACKP";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    config: EncoderConfig,
    steps: u64,
    manifest_fingerprint: String,
}

/// Encoder parameters with the configuration and the manifest they were
/// trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub steps: u64,
    /// Empty for an untrained encoder.
    pub manifest_fingerprint: String,
    pub encoder: QualityEncoder,
}

impl Checkpoint {
    /// Freshly initialised encoder for `config`.
    pub fn initial(config: &EncoderConfig) -> Self {
        Self {
            config: config.clone(),
            steps: 0,
            manifest_fingerprint: String::new(),
            encoder: QualityEncoder::init(config.preset, config.embedding_dim, config.seed),
        }
    }

    pub fn embed(&self, img: &ImageBuffer) -> Result<QualityEmbedding> {
        self.encoder.embed(img)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            steps: self.steps,
            manifest_fingerprint: self.manifest_fingerprint.clone(),
        };
        let layout = self.encoder.parameter_layout();
        let params = self.encoder.parameters();
        let tensors: Vec<(&str, Vec<usize>, &[f32])> = layout
            .iter()
            .zip(params)
            .map(|((name, shape), data)| (name.as_str(), shape.clone(), data))
            .collect();
        encode(MAGIC, &meta, &tensors)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let (meta, mut tensors): (Meta, _) = decode(MAGIC, bytes, origin)?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported checkpoint version {}", meta.format_version),
            ));
        }
        meta.config
            .validate()
            .map_err(|e| Error::format(origin, format!("embedded config: {e}")))?;
        let mut encoder = QualityEncoder::init(meta.config.preset, meta.config.embedding_dim, 0);
        let layout = encoder.parameter_layout();
        for ((name, shape), slot) in layout.iter().zip(encoder.parameters_mut()) {
            slot.copy_from_slice(&take(&mut tensors, name, shape, origin)?);
        }
        if let Some(extra) = tensors.first() {
            return Err(Error::format(origin, format!("unexpected tensor `{}`", extra.name)));
        }
        Ok(Self {
            config: meta.config,
            steps: meta.steps,
            manifest_fingerprint: meta.manifest_fingerprint,
            encoder,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Hash of the serialised checkpoint.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(fingerprint(&self.to_bytes()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::procedural_image;

    #[test]
    fn save_load_embeds_bit_identically() {
        let mut ckpt = Checkpoint::initial(&EncoderConfig {
            seed: 42,
            ..EncoderConfig::default()
        });
        ckpt.steps = 17;
        ckpt.manifest_fingerprint = "abc".into();
        let probe = procedural_image(96, 80, 3);
        let before = ckpt.embed(&probe).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        let after = back.embed(&probe).unwrap();
        assert!(before
            .vector
            .iter()
            .zip(&after.vector)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"TRIQACKP\x02\0\0\0{}", Path::new("x")).is_err());
        assert!(Checkpoint::from_bytes(b"nope", Path::new("x")).is_err());
    }
}
