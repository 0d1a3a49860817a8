//! Full-reference scoring: cosine similarity between the quality features of
//! a reference and a distorted image. No parameters are fitted.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::Checkpoint;
use crate::error::{Error, Result};
use crate::features::{extract_quality_features, Scales};
use crate::image::ImageBuffer;

/// `u . v / (|u| |v|)`, accumulated in f64.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} vs {} components",
            u.len(),
            v.len()
        )));
    }
    let (mut uv, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        uv += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return Err(Error::Degenerate("cosine similarity with a zero vector".into()));
    }
    if u == v {
        return Ok(1.0);
    }
    Ok((uv / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrScore {
    pub value: f64,
    pub reference_id: String,
    pub distorted_id: String,
}

fn quality_vector(img: &ImageBuffer, ckpt: &Checkpoint, scales: Scales) -> Result<Vec<f64>> {
    Ok(extract_quality_features(img, ckpt, scales)?.to_f64())
}

/// Cosine similarity of the two images' quality features; higher means
/// closer to the reference.
pub fn score_fr(reference: &ImageBuffer, distorted: &ImageBuffer, ckpt: &Checkpoint, scales: Scales) -> Result<f64> {
    let r = quality_vector(reference, ckpt, scales)?;
    let d = quality_vector(distorted, ckpt, scales)?;
    cosine_similarity(&r, &d)
}

/// Scores many distorted images against one reference, extracting the
/// reference features once.
pub fn score_fr_many(
    reference: &ImageBuffer,
    distorted: &[ImageBuffer],
    ckpt: &Checkpoint,
    scales: Scales,
) -> Result<Vec<f64>> {
    let r = quality_vector(reference, ckpt, scales)?;
    distorted
        .par_iter()
        .map(|d| cosine_similarity(&r, &quality_vector(d, ckpt, scales)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::synth::procedural_image;

    #[test]
    fn analytic_cases() {
        let v = [0.3, -1.2, 4.0];
        assert_eq!(cosine_similarity(&v, &v).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[0.0; 3], &v).is_err());
        assert!(cosine_similarity(&[1.0], &v).is_err());
    }

    #[test]
    fn self_score_is_exactly_one() {
        let ckpt = Checkpoint::initial(&EncoderConfig::default());
        let img = procedural_image(80, 80, 4);
        assert_eq!(score_fr(&img, &img, &ckpt, Scales::default()).unwrap(), 1.0);
        let other = procedural_image(80, 80, 5);
        let s = score_fr(&img, &other, &ckpt, Scales::default()).unwrap();
        assert!((-1.0..=1.0).contains(&s));
    }
}
