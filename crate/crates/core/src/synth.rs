//! Procedural "pristine" images for offline desk-scale corpora and tests.
//!
//! Images combine a colour gradient, multi-octave value noise with a roughly
//! 1/f spectrum, hard- and soft-edged shapes, and a few oriented gratings, so
//! they carry edges, smooth regions and fine texture like natural photos.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::distortion::{apply_distortion, DistortionId, DistortionSpec, Level};
use crate::error::{Error, Result};
use crate::image::{ImageBuffer, Planes};
use crate::seed::{derive_seed, rng_from_seed};

struct ValueNoise {
    cell: f32,
    cols: usize,
    grid: Vec<f32>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, width: usize, height: usize, cell: f32) -> Self {
        let cols = (width as f32 / cell).ceil() as usize + 2;
        let rows = (height as f32 / cell).ceil() as usize + 2;
        let grid = (0..cols * rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self { cell, cols, grid }
    }

    fn sample(&self, x: f32, y: f32) -> f32 {
        let (gx, gy) = (x / self.cell, y / self.cell);
        let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
        let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth(gx.fract()), smooth(gy.fract()));
        let at = |cx: usize, cy: usize| self.grid[cy * self.cols + cx];
        let top = at(x0, y0) * (1.0 - tx) + at(x0 + 1, y0) * tx;
        let bottom = at(x0, y0 + 1) * (1.0 - tx) + at(x0 + 1, y0 + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

fn random_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [
        rng.random_range(0.05..0.95),
        rng.random_range(0.05..0.95),
        rng.random_range(0.05..0.95),
    ]
}

/// Generates one procedural image; identical `(width, height, seed)` give
/// identical pixels.
pub fn procedural_image(width: u32, height: u32, seed: u64) -> ImageBuffer {
    let (w, h) = (width as usize, height as usize);
    let mut rng = rng_from_seed(seed);
    let mut planes = Planes {
        width: w,
        height: h,
        data: [vec![0.0; w * h], vec![0.0; w * h], vec![0.0; w * h]],
    };

    let (c0, c1) = (random_color(&mut rng), random_color(&mut rng));
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let diag = (w * w + h * h) as f32;
    let diag = diag.sqrt();

    let octaves: Vec<(ValueNoise, f32)> = [96.0f32, 48.0, 24.0, 12.0, 6.0, 3.0]
        .iter()
        .map(|&cell| (ValueNoise::new(&mut rng, w, h, cell), 0.22 * cell / 96.0 + 0.015))
        .collect();
    let tint: [f32; 3] = [
        rng.random_range(0.6..1.4),
        rng.random_range(0.6..1.4),
        rng.random_range(0.6..1.4),
    ];

    for y in 0..h {
        for x in 0..w {
            let t = ((x as f32 - w as f32 / 2.0) * ca + (y as f32 - h as f32 / 2.0) * sa) / diag + 0.5;
            let n: f32 = octaves.iter().map(|(o, amp)| amp * o.sample(x as f32, y as f32)).sum();
            for c in 0..3 {
                planes.data[c][y * w + x] = c0[c] * (1.0 - t) + c1[c] * t + n * tint[c];
            }
        }
    }

    let shapes = rng.random_range(8..16);
    for _ in 0..shapes {
        let color = random_color(&mut rng);
        let (cx, cy) = (rng.random_range(0.0..w as f32), rng.random_range(0.0..h as f32));
        let (rx, ry) = (
            rng.random_range(0.04..0.3) * w as f32,
            rng.random_range(0.04..0.3) * h as f32,
        );
        let softness: f32 = if rng.random_bool(0.5) {
            0.5
        } else {
            rng.random_range(2.0..10.0)
        };
        let alpha: f32 = rng.random_range(0.5..1.0);
        let is_rect = rng.random_bool(0.4);
        // oriented texture whose phase wanders, so it is only locally periodic
        let grating = if rng.random_bool(0.35) {
            let period = rng.random_range(2.5f32..12.0);
            let warp = ValueNoise::new(&mut rng, w, h, 2.0 * period);
            Some((period, rng.random_range(0.0..std::f32::consts::PI), warp))
        } else {
            None
        };
        let (x0, x1) = (
            (cx - rx - softness * 3.0).max(0.0) as usize,
            ((cx + rx + softness * 3.0) as usize).min(w),
        );
        let (y0, y1) = (
            (cy - ry - softness * 3.0).max(0.0) as usize,
            ((cy + ry + softness * 3.0) as usize).min(h),
        );
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f32 - cx, y as f32 - cy);
                // signed distance in pixels, negative inside
                let dist = if is_rect {
                    (dx.abs() - rx).max(dy.abs() - ry)
                } else {
                    let r = ((dx / rx).powi(2) + (dy / ry).powi(2)).sqrt();
                    (r - 1.0) * rx.min(ry)
                };
                let cover = alpha * (0.5 - dist / (2.0 * softness)).clamp(0.0, 1.0);
                if cover <= 0.0 {
                    continue;
                }
                let modulation = grating.as_ref().map_or(1.0, |(period, theta, warp)| {
                    let phase = (x as f32 * theta.cos() + y as f32 * theta.sin()) / period
                        + 2.0 * warp.sample(x as f32, y as f32);
                    0.8 + 0.2 * (phase * std::f32::consts::TAU).sin()
                });
                let i = y * w + x;
                for c in 0..3 {
                    let target = color[c] * modulation;
                    planes.data[c][i] = planes.data[c][i] * (1.0 - cover) + target * cover;
                }
            }
        }
    }
    planes.to_image()
}

/// Writes `count` procedural PNGs named `img_000.png`, `img_001.png`, ...
pub fn write_corpus(dir: &Path, count: usize, size: u32, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..count)
        .map(|i| {
            let img = procedural_image(size, size, derive_seed(seed, "synth", &[&i.to_string()]));
            let path = dir.join(format!("img_{i:03}.png"));
            img.save_png(&path)?;
            Ok(path)
        })
        .collect()
}

/// Paths of a toy MOS dataset written by [`write_toy_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    /// `path,mos,reference_path` over the distorted images.
    pub nr_table: PathBuf,
    /// `reference_path,distorted_path,mos`.
    pub fr_table: PathBuf,
    pub rows: usize,
}

/// Writes `count` procedural references under `dir/ref`, each degraded by
/// `per_image` distortions at every level under `dir/dist`, with a MOS that
/// falls linearly in the level. Table paths are relative to `dir`.
pub fn write_toy_dataset(dir: &Path, count: usize, per_image: usize, size: u32, seed: u64) -> Result<ToyDataset> {
    let (ref_dir, dist_dir) = (dir.join("ref"), dir.join("dist"));
    for d in [&ref_dir, &dist_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut nr = String::from("path,mos,reference_path\n");
    let mut fr = String::from("reference_path,distorted_path,mos\n");
    let mut rows = 0;
    for i in 0..count {
        let img = procedural_image(size, size, derive_seed(seed, "toy-ref", &[&i.to_string()]));
        let reference = format!("ref/r{i:03}.png");
        img.save_png(&dir.join(&reference))?;
        for j in 0..per_image {
            let id = DistortionId::ALL[(i * 7 + j * 3) % DistortionId::ALL.len()];
            for level in Level::all() {
                let spec = DistortionSpec::new(id, level.get())?;
                let name = format!("dist/r{i:03}_{}_{}.png", id.as_str(), level.get());
                let s = derive_seed(seed, "toy-dist", &[&name]);
                apply_distortion(&img, spec, s)?.save_png(&dir.join(&name))?;
                let mos = 95.0 - 17.5 * f64::from(level.get() - 1) - 2.0 * j as f64;
                nr.push_str(&format!("{name},{mos},{reference}\n"));
                fr.push_str(&format!("{reference},{name},{mos}\n"));
                rows += 1;
            }
        }
    }
    let out = ToyDataset {
        nr_table: dir.join("mos.csv"),
        fr_table: dir.join("fr.csv"),
        rows,
    };
    std::fs::write(&out.nr_table, nr).map_err(|e| Error::io(&out.nr_table, e))?;
    std::fs::write(&out.fr_table, fr).map_err(|e| Error::io(&out.fr_table, e))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = procedural_image(64, 48, 3);
        assert_eq!(a, procedural_image(64, 48, 3));
        assert_ne!(a, procedural_image(64, 48, 4));
        assert_eq!(a.dimensions(), (64, 48));
    }

    #[test]
    fn images_are_not_flat() {
        let img = procedural_image(128, 128, 11);
        let raw = img.as_raw();
        let mean = raw.iter().map(|&v| v as f64).sum::<f64>() / raw.len() as f64;
        let var = raw.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / raw.len() as f64;
        assert!(var > 100.0, "variance {var}");
    }

    #[test]
    fn toy_dataset_tables_load() {
        let dir = tempfile::tempdir().unwrap();
        let toy = write_toy_dataset(dir.path(), 2, 2, 96, 1).unwrap();
        assert_eq!(toy.rows, 20);
        let nr = crate::eval::DatasetTable::load(&toy.nr_table, &Default::default()).unwrap();
        assert_eq!(nr.rows.len(), 20);
        assert!(dir.path().join(&nr.rows[0].path).is_file());
        let fr =
            crate::eval::DatasetTable::load(&toy.fr_table, &crate::eval::DatasetAdapter::full_reference()).unwrap();
        assert_eq!(fr.rows[3].reference.as_deref(), Some("ref/r000.png"));
    }
}
