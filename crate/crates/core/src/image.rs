//! 8-bit sRGB image buffers and the floating-point working representation
//! used by the distortion engine.

use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};

/// Smallest side accepted for any image that enters triplet rendering.
pub const MIN_TRIPLET_SIDE: u32 = 256;

/// Interleaved 8-bit RGB image in sRGB.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageBuffer")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl ImageBuffer {
    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("image dimensions must be non-zero".into()));
        }
        let expected = width as usize * height as usize * 3;
        if data.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} RGB image needs {expected} bytes, got {}",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dimensions(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Fails unless both sides are at least `min_side` pixels.
    pub fn ensure_min_side(&self, min_side: u32) -> Result<()> {
        if self.width < min_side || self.height < min_side {
            return Err(Error::ImageTooSmall(format!(
                "{}x{} is below the {min_side}x{min_side} minimum",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn crop(&self, x: u32, y: u32, width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 || x + width > self.width || y + height > self.height {
            return Err(Error::InvalidInput(format!(
                "crop window {width}x{height}+{x}+{y} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        let stride = self.width as usize * 3;
        for row in y as usize..(y + height) as usize {
            let start = row * stride + x as usize * 3;
            data.extend_from_slice(&self.data[start..start + width as usize * 3]);
        }
        Ok(Self { width, height, data })
    }

    /// Downsample by exactly two with the antialiased bilinear (triangle)
    /// kernel `[1, 3, 3, 1] / 8`, applied separably. Output size is
    /// `floor(w / 2) x floor(h / 2)`; taps falling outside the image are
    /// dropped and the remaining weights renormalised.
    pub fn half_scale(&self) -> Result<Self> {
        let (w, h) = (self.width as usize, self.height as usize);
        let (ow, oh) = (w / 2, h / 2);
        if ow == 0 || oh == 0 {
            return Err(Error::ImageTooSmall(format!("{w}x{h} cannot be halved")));
        }
        const TAPS: [f64; 4] = [1.0, 3.0, 3.0, 1.0];
        let tap = |center: usize, len: usize| {
            // taps cover input indices 2i-1 ..= 2i+2
            let mut out = [(0usize, 0.0f64); 4];
            let mut n = 0;
            let mut norm = 0.0;
            for (t, weight) in TAPS.iter().enumerate() {
                let idx = 2 * center as isize - 1 + t as isize;
                if idx >= 0 && (idx as usize) < len {
                    out[n] = (idx as usize, *weight);
                    norm += weight;
                    n += 1;
                }
            }
            for entry in &mut out[..n] {
                entry.1 /= norm;
            }
            (out, n)
        };

        // horizontal pass into f64 rows
        let mut tmp = vec![0.0f64; ow * h * 3];
        for ox in 0..ow {
            let (taps, n) = tap(ox, w);
            for y in 0..h {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for &(ix, wt) in &taps[..n] {
                        acc += wt * self.data[(y * w + ix) * 3 + c] as f64;
                    }
                    tmp[(y * ow + ox) * 3 + c] = acc;
                }
            }
        }
        let mut data = vec![0u8; ow * oh * 3];
        for oy in 0..oh {
            let (taps, n) = tap(oy, h);
            for x in 0..ow {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for &(iy, wt) in &taps[..n] {
                        acc += wt * tmp[(iy * ow + x) * 3 + c];
                    }
                    data[(oy * ow + x) * 3 + c] = acc.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        Self::from_raw(ow as u32, oh as u32, data)
    }

    pub fn to_planes(&self) -> Planes {
        let n = self.width as usize * self.height as usize;
        let mut planes = [vec![0.0f32; n], vec![0.0f32; n], vec![0.0f32; n]];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                planes[c][i] = px[c] as f32 / 255.0;
            }
        }
        Planes {
            width: self.width as usize,
            height: self.height as usize,
            data: planes,
        }
    }

    pub fn from_rgb_image(img: RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        Self::from_raw(w, h, img.into_raw())
    }

    pub fn to_rgb_image(&self) -> RgbImage {
        RgbImage::from_raw(self.width, self.height, self.data.clone()).expect("buffer length checked at construction")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let img = image::load_from_memory(&bytes)?.to_rgb8();
        Self::from_rgb_image(img)
    }

    /// Lossless PNG encoding.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        self.to_rgb_image()
            .write_to(&mut std::io::Cursor::new(&mut bytes), ImageFormat::Png)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Planar floating-point RGB in `[0, 1]`. Distortions work in this space and
/// round back to 8 bits exactly once.
#[derive(Clone, Debug)]
pub struct Planes {
    pub width: usize,
    pub height: usize,
    pub data: [Vec<f32>; 3],
}

impl Planes {
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_image(&self) -> ImageBuffer {
        let n = self.len();
        let mut data = Vec::with_capacity(n * 3);
        for i in 0..n {
            for c in 0..3 {
                data.push(quantize(self.data[c][i]));
            }
        }
        ImageBuffer {
            width: self.width as u32,
            height: self.height as u32,
            data,
        }
    }

    pub fn map(&mut self, mut f: impl FnMut(f32) -> f32) {
        for plane in &mut self.data {
            for v in plane.iter_mut() {
                *v = f(*v);
            }
        }
    }
}

#[inline]
pub(crate) fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Peak signal-to-noise ratio over the 8-bit range. Identical images yield
/// `f64::INFINITY`.
pub fn psnr(reference: &ImageBuffer, test: &ImageBuffer) -> Result<f64> {
    if reference.dimensions() != test.dimensions() {
        return Err(Error::DimensionMismatch(format!(
            "psnr between {:?} and {:?}",
            reference.dimensions(),
            test.dimensions()
        )));
    }
    let sse: u64 = reference
        .data
        .iter()
        .zip(&test.data)
        .map(|(&a, &b)| {
            let d = a as i64 - b as i64;
            (d * d) as u64
        })
        .sum();
    if sse == 0 {
        return Ok(f64::INFINITY);
    }
    let mse = sse as f64 / reference.data.len() as f64;
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}
