//! Spatial filtering on single `f32` planes with half-sample symmetric
//! boundary extension.

/// Maps an out-of-range index into `0..len` by mirroring about the edges
/// (`-1 -> 0`, `len -> len - 1`).
#[inline]
pub fn reflect(mut i: isize, len: usize) -> usize {
    let n = len as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    i = i.rem_euclid(period);
    if i >= n {
        i = period - 1 - i;
    }
    i as usize
}

/// Normalised 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let denom = 2.0 * sigma * sigma;
    let mut taps: Vec<f32> = (-radius..=radius).map(|x| (-(x * x) as f32 / denom).exp()).collect();
    let sum: f32 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable convolution with an odd-length horizontal and vertical kernel.
pub fn convolve_separable(plane: &[f32], width: usize, height: usize, kx: &[f32], ky: &[f32]) -> Vec<f32> {
    let rx = (kx.len() / 2) as isize;
    let ry = (ky.len() / 2) as isize;
    let mut tmp = vec![0.0f32; plane.len()];
    for y in 0..height {
        let row = &plane[y * width..(y + 1) * width];
        for x in 0..width {
            let mut acc = 0.0f32;
            for (k, w) in kx.iter().enumerate() {
                acc += w * row[reflect(x as isize + k as isize - rx, width)];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0f32; plane.len()];
    for y in 0..height {
        for (k, w) in ky.iter().enumerate() {
            let sy = reflect(y as isize + k as isize - ry, height);
            let src = &tmp[sy * width..(sy + 1) * width];
            let dst = &mut out[y * width..(y + 1) * width];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    out
}

pub fn gaussian_blur(plane: &[f32], width: usize, height: usize, sigma: f32) -> Vec<f32> {
    let k = gaussian_kernel(sigma);
    convolve_separable(plane, width, height, &k, &k)
}

/// Sparse 2-D kernel: `(dx, dy, weight)` taps.
pub type SparseKernel = Vec<(isize, isize, f32)>;

pub fn convolve_sparse(plane: &[f32], width: usize, height: usize, kernel: &SparseKernel) -> Vec<f32> {
    let mut out = vec![0.0f32; plane.len()];
    for &(dx, dy, w) in kernel {
        for y in 0..height {
            let sy = reflect(y as isize + dy, height);
            let src = &plane[sy * width..(sy + 1) * width];
            let dst = &mut out[y * width..(y + 1) * width];
            for (x, d) in dst.iter_mut().enumerate() {
                *d += w * src[reflect(x as isize + dx, width)];
            }
        }
    }
    out
}

/// Uniform disk of the given radius (pixel centres within `radius`).
pub fn disk_kernel(radius: f32) -> SparseKernel {
    let r = radius.ceil() as isize;
    let mut taps = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dx * dx + dy * dy) as f32) <= radius * radius {
                taps.push((dx, dy, 1.0));
            }
        }
    }
    normalise(taps)
}

/// Line kernel of `length` pixels at `angle` radians, rasterised by bilinear
/// splatting of densely sampled points along the segment.
pub fn line_kernel(length: f32, angle: f32) -> SparseKernel {
    let half = (length - 1.0) / 2.0;
    let samples = (length * 8.0).ceil() as usize + 1;
    let (s, c) = angle.sin_cos();
    let mut acc = std::collections::BTreeMap::<(isize, isize), f32>::new();
    for i in 0..samples {
        let t = -half + 2.0 * half * i as f32 / (samples - 1).max(1) as f32;
        let (x, y) = (t * c, t * s);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        for (ox, oy, w) in [
            (0, 0, (1.0 - fx) * (1.0 - fy)),
            (1, 0, fx * (1.0 - fy)),
            (0, 1, (1.0 - fx) * fy),
            (1, 1, fx * fy),
        ] {
            if w > 0.0 {
                *acc.entry((x0 as isize + ox, y0 as isize + oy)).or_default() += w;
            }
        }
    }
    normalise(acc.into_iter().map(|((dx, dy), w)| (dx, dy, w)).collect())
}

fn normalise(mut taps: SparseKernel) -> SparseKernel {
    let sum: f32 = taps.iter().map(|t| t.2).sum();
    taps.iter_mut().for_each(|t| t.2 /= sum);
    taps
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_mirrors_about_edges() {
        assert_eq!(reflect(-1, 5), 0);
        assert_eq!(reflect(-2, 5), 1);
        assert_eq!(reflect(5, 5), 4);
        assert_eq!(reflect(6, 5), 3);
        assert_eq!(reflect(12, 5), 2);
        assert_eq!(reflect(3, 1), 0);
    }

    #[test]
    fn kernels_are_normalised() {
        for k in [gaussian_kernel(0.5), gaussian_kernel(4.0)] {
            assert!((k.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        for k in [disk_kernel(1.0), disk_kernel(6.0), line_kernel(9.0, 0.7)] {
            assert!((k.iter().map(|t| t.2).sum::<f32>() - 1.0).abs() < 1e-5);
        }
        assert_eq!(disk_kernel(1.0).len(), 5);
    }

    #[test]
    fn blurring_a_constant_plane_is_identity() {
        let plane = vec![0.25f32; 12 * 7];
        let out = gaussian_blur(&plane, 12, 7, 2.0);
        assert!(out.iter().all(|v| (v - 0.25).abs() < 1e-6));
        let out = convolve_sparse(&plane, 12, 7, &line_kernel(5.0, 1.0));
        assert!(out.iter().all(|v| (v - 0.25).abs() < 1e-6));
    }
}
