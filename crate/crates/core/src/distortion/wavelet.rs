//! CDF 9/7 lifting wavelet (the JPEG 2000 irreversible transform) with
//! whole-sample symmetric extension, plus deadzone scalar quantisation.

const ALPHA: f32 = -1.586_134_3;
const BETA: f32 = -0.052_980_118;
const GAMMA: f32 = 0.882_911_1;
const DELTA: f32 = 0.443_506_85;
const K: f32 = 1.149_604_4;

/// One analysis step on `x` (length >= 2). Output layout: lowpass in
/// `[0, ceil(n/2))`, highpass after it.
fn forward_1d(x: &mut [f32], scratch: &mut Vec<f32>) {
    let n = x.len();
    let ns = n.div_ceil(2);
    let nd = n / 2;
    scratch.clear();
    scratch.extend(x.iter().step_by(2));
    scratch.extend(x.iter().skip(1).step_by(2));
    let (s, d) = scratch.split_at_mut(ns);
    lift(s, d, ALPHA, BETA);
    lift(s, d, GAMMA, DELTA);
    s.iter_mut().for_each(|v| *v *= K);
    d.iter_mut().for_each(|v| *v /= K);
    debug_assert_eq!(d.len(), nd);
    x.copy_from_slice(scratch);
}

fn inverse_1d(x: &mut [f32], scratch: &mut Vec<f32>) {
    let n = x.len();
    let ns = n.div_ceil(2);
    scratch.clear();
    scratch.extend_from_slice(x);
    let (s, d) = scratch.split_at_mut(ns);
    s.iter_mut().for_each(|v| *v /= K);
    d.iter_mut().for_each(|v| *v *= K);
    unlift(s, d, GAMMA, DELTA);
    unlift(s, d, ALPHA, BETA);
    for (i, v) in x.iter_mut().enumerate() {
        *v = if i % 2 == 0 { s[i / 2] } else { d[i / 2] };
    }
}

#[inline]
fn s_at(s: &[f32], i: usize) -> f32 {
    // x[n] mirrors to x[n-2] when n is even
    s[i.min(s.len() - 1)]
}

#[inline]
fn d_at(d: &[f32], i: isize) -> f32 {
    if i < 0 {
        d[0]
    } else {
        d[(i as usize).min(d.len() - 1)]
    }
}

fn lift(s: &mut [f32], d: &mut [f32], predict: f32, update: f32) {
    for i in 0..d.len() {
        d[i] += predict * (s[i] + s_at(s, i + 1));
    }
    for i in 0..s.len() {
        s[i] += update * (d_at(d, i as isize - 1) + d_at(d, i as isize));
    }
}

fn unlift(s: &mut [f32], d: &mut [f32], predict: f32, update: f32) {
    for i in 0..s.len() {
        s[i] -= update * (d_at(d, i as isize - 1) + d_at(d, i as isize));
    }
    for i in 0..d.len() {
        d[i] -= predict * (s[i] + s_at(s, i + 1));
    }
}

/// Region sizes `(w, h)` of the lowpass band before each decomposition level.
fn level_sizes(width: usize, height: usize, levels: usize) -> Vec<(usize, usize)> {
    let mut sizes = Vec::new();
    let (mut w, mut h) = (width, height);
    for _ in 0..levels {
        if w < 2 || h < 2 {
            break;
        }
        sizes.push((w, h));
        w = w.div_ceil(2);
        h = h.div_ceil(2);
    }
    sizes
}

pub fn forward_2d(plane: &mut [f32], width: usize, height: usize, levels: usize) {
    let mut scratch = Vec::new();
    let mut line = Vec::new();
    for (w, h) in level_sizes(width, height, levels) {
        for y in 0..h {
            forward_1d(&mut plane[y * width..y * width + w], &mut scratch);
        }
        for x in 0..w {
            line.clear();
            line.extend((0..h).map(|y| plane[y * width + x]));
            forward_1d(&mut line, &mut scratch);
            for (y, v) in line.iter().enumerate() {
                plane[y * width + x] = *v;
            }
        }
    }
}

pub fn inverse_2d(plane: &mut [f32], width: usize, height: usize, levels: usize) {
    let mut scratch = Vec::new();
    let mut line = Vec::new();
    for (w, h) in level_sizes(width, height, levels).into_iter().rev() {
        for x in 0..w {
            line.clear();
            line.extend((0..h).map(|y| plane[y * width + x]));
            inverse_1d(&mut line, &mut scratch);
            for (y, v) in line.iter().enumerate() {
                plane[y * width + x] = *v;
            }
        }
        for y in 0..h {
            inverse_1d(&mut plane[y * width..y * width + w], &mut scratch);
        }
    }
}

/// Deadzone quantiser with midpoint reconstruction.
pub fn quantize(plane: &mut [f32], step: f32) {
    for v in plane.iter_mut() {
        let q = (v.abs() / step).floor();
        *v = if q == 0.0 { 0.0 } else { v.signum() * (q + 0.5) * step };
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_reconstruction_for_odd_and_even_sizes() {
        for (w, h) in [(16, 16), (17, 9), (33, 20), (2, 3)] {
            let orig: Vec<f32> = (0..w * h).map(|i| ((i * 37 % 101) as f32 / 101.0).sin()).collect();
            let mut plane = orig.clone();
            forward_2d(&mut plane, w, h, 5);
            inverse_2d(&mut plane, w, h, 5);
            for (a, b) in orig.iter().zip(&plane) {
                assert!((a - b).abs() < 1e-4, "{w}x{h}");
            }
        }
    }

    #[test]
    fn constant_signal_has_no_highpass_energy() {
        let mut x = vec![0.5f32; 10];
        let mut scratch = Vec::new();
        forward_1d(&mut x, &mut scratch);
        for v in &x[5..] {
            assert!(v.abs() < 1e-5);
        }
    }
}
