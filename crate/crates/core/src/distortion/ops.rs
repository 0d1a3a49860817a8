//! The distortion implementations and their five-level parameter ladders.
//!
//! Ladders follow the KADID-10k families. Where a published level would be a
//! no-op after 8-bit rounding, or would break monotone severity, the ladder
//! was respaced and checked against the PSNR oracle in the test suite.

use image::codecs::jpeg::JpegEncoder;
use image::{ExtendedColorType, ImageFormat};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{color, filters, wavelet, DistortionId, DistortionSpec};
use crate::error::{Error, Result};
use crate::image::{ImageBuffer, Planes};
use crate::seed::rng_from_seed;

const LADDERS: [(DistortionId, [f32; 5]); 20] = [
    // sigma, pixels
    (DistortionId::GaussianBlur, [0.5, 1.0, 2.0, 3.0, 5.0]),
    // disk radius, pixels
    (DistortionId::LensBlur, [1.0, 2.0, 4.0, 6.0, 8.0]),
    // line length, pixels
    (DistortionId::MotionBlur, [3.0, 5.0, 9.0, 13.0, 21.0]),
    // sigma of the Lab chroma blur
    (DistortionId::ColorDiffuse, [1.0, 3.0, 6.0, 8.0, 12.0]),
    // green-channel displacement, pixels
    (DistortionId::ColorShift, [1.0, 3.0, 6.0, 8.0, 12.0]),
    // quantisation levels per channel
    (DistortionId::ColorQuantization, [16.0, 10.0, 7.0, 5.0, 3.0]),
    // HSV saturation multiplier
    (DistortionId::ColorSaturate1, [0.7, 0.5, 0.3, 0.15, 0.0]),
    // Lab chroma multiplier
    (DistortionId::ColorSaturate2, [1.5, 2.0, 3.0, 5.0, 8.0]),
    // encoder quality
    (DistortionId::Jpeg, [43.0, 36.0, 24.0, 7.0, 2.0]),
    // wavelet quantiser step (luma; chroma uses twice the step)
    (DistortionId::Jpeg2000, [0.02, 0.04, 0.08, 0.16, 0.3]),
    // exponent offset of the brightening curve
    (DistortionId::Brighten, [0.1, 0.2, 0.4, 0.7, 1.1]),
    // exponent offset of the darkening curve
    (DistortionId::Darken, [0.05, 0.1, 0.2, 0.4, 0.8]),
    // absolute mean shift
    (DistortionId::MeanShift, [0.04, 0.08, 0.12, 0.16, 0.2]),
    // noise variance
    (DistortionId::WhiteNoise, [0.001, 0.002, 0.003, 0.005, 0.01]),
    // chroma noise variance
    (DistortionId::WhiteNoiseColor, [0.001, 0.002, 0.004, 0.007, 0.012]),
    // corrupted-sample probability
    (DistortionId::ImpulseNoise, [0.001, 0.005, 0.01, 0.02, 0.03]),
    // speckle variance
    (DistortionId::MultiplicativeNoise, [0.001, 0.005, 0.01, 0.02, 0.05]),
    // variance of the noise removed by the smoothing denoiser
    (DistortionId::DenoiseOversmooth, [0.001, 0.002, 0.003, 0.005, 0.01]),
    // maximum displacement, pixels
    (DistortionId::Jitter, [1.0, 1.5, 2.0, 3.0, 4.5]),
    // block size, pixels
    (DistortionId::Pixelate, [2.0, 3.0, 4.0, 6.0, 8.0]),
];

/// Raw ladder parameter for a (type, level) pair.
pub fn level_parameter(spec: DistortionSpec) -> f32 {
    let ladder = LADDERS
        .iter()
        .find(|(id, _)| *id == spec.distortion)
        .map(|(_, l)| l)
        .expect("every distortion has a ladder");
    ladder[spec.level.get() as usize - 1]
}

fn denoise_sigma(variance: f32) -> f32 {
    0.5 + 12.0 * variance.sqrt()
}

/// Smallest image side a distortion accepts at the given level.
pub(super) fn min_side(spec: DistortionSpec) -> u32 {
    let p = level_parameter(spec);
    let radius = match spec.distortion {
        DistortionId::GaussianBlur => (3.0 * p).ceil(),
        DistortionId::LensBlur => p.ceil(),
        DistortionId::MotionBlur => (p / 2.0).ceil(),
        DistortionId::ColorDiffuse => (3.0 * p).ceil(),
        DistortionId::DenoiseOversmooth => (3.0 * denoise_sigma(p)).ceil(),
        DistortionId::ColorShift | DistortionId::Jitter => p.ceil(),
        DistortionId::Pixelate => return p as u32,
        DistortionId::Jpeg | DistortionId::Jpeg2000 => return 8,
        _ => 0.0,
    };
    2 * radius as u32 + 1
}

pub(super) fn apply(img: &ImageBuffer, spec: DistortionSpec, seed: u64) -> Result<ImageBuffer> {
    let p = level_parameter(spec);
    let mut rng = rng_from_seed(seed);
    if spec.distortion == DistortionId::Jpeg {
        return jpeg(img, p as u8);
    }
    let mut planes = img.to_planes();
    let (w, h) = (planes.width, planes.height);
    match spec.distortion {
        DistortionId::GaussianBlur => {
            for plane in &mut planes.data {
                *plane = filters::gaussian_blur(plane, w, h, p);
            }
        }
        DistortionId::LensBlur => convolve_all(&mut planes, &filters::disk_kernel(p)),
        DistortionId::MotionBlur => {
            let angle = rng.random::<f32>() * std::f32::consts::PI;
            convolve_all(&mut planes, &filters::line_kernel(p, angle));
        }
        DistortionId::ColorDiffuse => {
            map_lab(&mut planes, |lab| {
                let (w, h) = (lab.width, lab.height);
                for c in 1..3 {
                    lab.data[c] = filters::gaussian_blur(&lab.data[c], w, h, p);
                }
            });
        }
        DistortionId::ColorShift => {
            let angle = rng.random::<f32>() * std::f32::consts::TAU;
            // whole pixels: a fractional offset would also low-pass the channel
            let (dx, dy) = ((p * angle.cos()).round(), (p * angle.sin()).round());
            planes.data[1] = translate(&planes.data[1], w, h, dx, dy);
        }
        DistortionId::ColorQuantization => {
            let steps = p - 1.0;
            planes.map(|v| (v * steps).round() / steps);
        }
        DistortionId::ColorSaturate1 => map_pixels(&mut planes, |rgb| {
            let [hh, s, v] = color::rgb_to_hsv(rgb);
            color::hsv_to_rgb([hh, s * p, v])
        }),
        DistortionId::ColorSaturate2 => map_pixels(&mut planes, |rgb| {
            let [l, a, b] = color::rgb_to_lab(rgb);
            color::lab_to_rgb([l, a * p, b * p])
        }),
        DistortionId::Jpeg2000 => jpeg2000(&mut planes, p),
        DistortionId::Brighten => {
            let gamma = 1.0 / (1.0 + p);
            planes.map(|v| v.max(0.0).powf(gamma));
        }
        DistortionId::Darken => {
            let gamma = 1.0 + p;
            planes.map(|v| v.max(0.0).powf(gamma));
        }
        DistortionId::MeanShift => {
            let mean = planes.data.iter().flatten().sum::<f32>() / (3 * planes.len()) as f32;
            // shift toward the side with more headroom so clipping stays small
            let shift = if mean < 0.5 { p } else { -p };
            planes.map(|v| v + shift);
        }
        DistortionId::WhiteNoise => {
            let sigma = p.sqrt();
            add_noise(&mut planes, &mut rng, |v, z| v + sigma * z);
        }
        DistortionId::WhiteNoiseColor => {
            let sigma = p.sqrt();
            map_ycbcr(&mut planes, |ycc| {
                for c in 1..3 {
                    for v in ycc.data[c].iter_mut() {
                        let z: f32 = rng.sample(StandardNormal);
                        *v += sigma * z;
                    }
                }
            });
        }
        DistortionId::ImpulseNoise => {
            for i in 0..planes.len() {
                for c in 0..3 {
                    let u: f32 = rng.random();
                    let salt: bool = rng.random();
                    if u < p {
                        planes.data[c][i] = if salt { 1.0 } else { 0.0 };
                    }
                }
            }
        }
        DistortionId::MultiplicativeNoise => {
            let sigma = p.sqrt();
            add_noise(&mut planes, &mut rng, |v, z| v + v * sigma * z);
        }
        DistortionId::DenoiseOversmooth => {
            let sigma = p.sqrt();
            add_noise(&mut planes, &mut rng, |v, z| v + sigma * z);
            let blur = denoise_sigma(p);
            for plane in &mut planes.data {
                plane.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
                *plane = filters::gaussian_blur(plane, w, h, blur);
            }
        }
        DistortionId::Jitter => jitter(&mut planes, &mut rng, p),
        DistortionId::Pixelate => pixelate(&mut planes, p as usize),
        DistortionId::Jpeg => unreachable!("handled above"),
    }
    Ok(planes.to_image())
}

fn convolve_all(planes: &mut Planes, kernel: &filters::SparseKernel) {
    let (w, h) = (planes.width, planes.height);
    for plane in &mut planes.data {
        *plane = filters::convolve_sparse(plane, w, h, kernel);
    }
}

fn map_pixels(planes: &mut Planes, f: impl Fn([f32; 3]) -> [f32; 3]) {
    for i in 0..planes.len() {
        let out = f([planes.data[0][i], planes.data[1][i], planes.data[2][i]]);
        for c in 0..3 {
            planes.data[c][i] = out[c];
        }
    }
}

fn map_lab(planes: &mut Planes, body: impl FnOnce(&mut Planes)) {
    map_pixels(planes, color::rgb_to_lab);
    body(planes);
    map_pixels(planes, color::lab_to_rgb);
}

fn map_ycbcr(planes: &mut Planes, body: impl FnOnce(&mut Planes)) {
    map_pixels(planes, color::rgb_to_ycbcr);
    body(planes);
    map_pixels(planes, color::ycbcr_to_rgb);
}

/// Draws one standard normal per sample in pixel-major, channel-minor order
/// so that every level of a ladder sees the same noise field.
fn add_noise(planes: &mut Planes, rng: &mut ChaCha8Rng, f: impl Fn(f32, f32) -> f32) {
    for i in 0..planes.len() {
        for c in 0..3 {
            let z: f32 = rng.sample(StandardNormal);
            planes.data[c][i] = f(planes.data[c][i], z);
        }
    }
}

fn bilinear(plane: &[f32], w: usize, h: usize, x: f32, y: f32) -> f32 {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let at = |xi: isize, yi: isize| plane[filters::reflect(yi, h) * w + filters::reflect(xi, w)];
    let (xi, yi) = (x0 as isize, y0 as isize);
    (1.0 - fy) * ((1.0 - fx) * at(xi, yi) + fx * at(xi + 1, yi))
        + fy * ((1.0 - fx) * at(xi, yi + 1) + fx * at(xi + 1, yi + 1))
}

fn translate(plane: &[f32], w: usize, h: usize, dx: f32, dy: f32) -> Vec<f32> {
    let mut out = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = bilinear(plane, w, h, x as f32 - dx, y as f32 - dy);
        }
    }
    out
}

fn jitter(planes: &mut Planes, rng: &mut ChaCha8Rng, amount: f32) {
    let (w, h) = (planes.width, planes.height);
    let src = planes.clone();
    for y in 0..h {
        for x in 0..w {
            let u: f32 = rng.random_range(-1.0..=1.0);
            let v: f32 = rng.random_range(-1.0..=1.0);
            let sx = filters::reflect(x as isize + (amount * u).round() as isize, w);
            let sy = filters::reflect(y as isize + (amount * v).round() as isize, h);
            for c in 0..3 {
                planes.data[c][y * w + x] = src.data[c][sy * w + sx];
            }
        }
    }
}

fn pixelate(planes: &mut Planes, block: usize) {
    let (w, h) = (planes.width, planes.height);
    for plane in &mut planes.data {
        for by in (0..h).step_by(block) {
            for bx in (0..w).step_by(block) {
                let (ey, ex) = ((by + block).min(h), (bx + block).min(w));
                let mut sum = 0.0;
                for y in by..ey {
                    sum += plane[y * w + bx..y * w + ex].iter().sum::<f32>();
                }
                let mean = sum / ((ey - by) * (ex - bx)) as f32;
                for y in by..ey {
                    plane[y * w + bx..y * w + ex].fill(mean);
                }
            }
        }
    }
}

fn jpeg2000(planes: &mut Planes, step: f32) {
    const LEVELS: usize = 5;
    map_ycbcr(planes, |ycc| {
        let (w, h) = (ycc.width, ycc.height);
        for (c, plane) in ycc.data.iter_mut().enumerate() {
            plane.iter_mut().for_each(|v| *v -= 0.5);
            wavelet::forward_2d(plane, w, h, LEVELS);
            wavelet::quantize(plane, if c == 0 { step } else { 2.0 * step });
            wavelet::inverse_2d(plane, w, h, LEVELS);
            plane.iter_mut().for_each(|v| *v += 0.5);
        }
    });
}

fn jpeg(img: &ImageBuffer, quality: u8) -> Result<ImageBuffer> {
    let mut bytes = Vec::new();
    JpegEncoder::new_with_quality(&mut bytes, quality).encode(
        img.as_raw(),
        img.width(),
        img.height(),
        ExtendedColorType::Rgb8,
    )?;
    let decoded = image::load_from_memory_with_format(&bytes, ImageFormat::Jpeg)?.to_rgb8();
    if decoded.dimensions() != img.dimensions() {
        return Err(Error::Numerical("jpeg round trip changed dimensions".into()));
    }
    ImageBuffer::from_rgb_image(decoded)
}
