//! Minimal convolutional network with manual backpropagation.
//!
//! Convolutions are lowered to matrix products (im2col) and evaluated with
//! single-precision GEMM. Every convolution is followed by a ReLU; the network
//! output is the global average of the last feature map.

use matrixmultiply::sgemm;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::seed::{derive_seed, rng_from_seed};

/// Channel-major feature map of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }
}

/// `c = a * b + beta * c` for row-major `c` (m x n); `a` and `b` are given
/// with explicit (row, column) strides so transposed views need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (usize, usize),
    b: &[f32],
    b_strides: (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides describe views that stay within the asserted lengths.
    unsafe {
        sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvShape {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn output_size(&self, height: usize, width: usize) -> Option<(usize, usize)> {
        let (h, w) = (height + 2 * self.padding, width + 2 * self.padding);
        if h < self.kernel || w < self.kernel {
            return None;
        }
        Some(((h - self.kernel) / self.stride + 1, (w - self.kernel) / self.stride + 1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub shape: ConvShape,
    /// `out_channels x patch_len`, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv2d {
    /// He-normal weights, zero bias.
    pub fn init(shape: ConvShape, seed: u64) -> Self {
        let fan_in = shape.patch_len() as f32;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let mut rng = rng_from_seed(seed);
        let weight = (0..shape.out_channels * shape.patch_len())
            .map(|_| normal.sample(&mut rng))
            .collect();
        Self {
            shape,
            weight,
            bias: vec![0.0; shape.out_channels],
        }
    }

    fn im2col(&self, x: &Tensor, oh: usize, ow: usize) -> Vec<f32> {
        let ConvShape {
            kernel: k,
            stride: s,
            padding: p,
            ..
        } = self.shape;
        let n = oh * ow;
        let mut cols = vec![0.0f32; self.shape.patch_len() * n];
        for ci in 0..x.channels {
            let plane = &x.data[ci * x.plane_len()..(ci + 1) * x.plane_len()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * n..][..n];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.width..][..x.width];
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < x.width as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], height: usize, width: usize, oh: usize, ow: usize) -> Tensor {
        let ConvShape {
            kernel: k,
            stride: s,
            padding: p,
            ..
        } = self.shape;
        let n = oh * ow;
        let mut x = Tensor::zeros(self.shape.in_channels, height, width);
        let plane_len = x.plane_len();
        for ci in 0..self.shape.in_channels {
            let plane = &mut x.data[ci * plane_len..(ci + 1) * plane_len];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * n..][..n];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= height as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * width..][..width];
                        for (ox, &v) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < width as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// Convolution + bias + ReLU. Also returns the im2col matrix for backward.
    fn forward(&self, x: &Tensor) -> (Tensor, Vec<f32>) {
        let (oh, ow) = self
            .shape
            .output_size(x.height, x.width)
            .expect("input checked against the network minimum");
        let cols = self.im2col(x, oh, ow);
        let n = oh * ow;
        let mut out = Tensor::zeros(self.shape.out_channels, oh, ow);
        let k = self.shape.patch_len();
        gemm(
            self.shape.out_channels,
            k,
            n,
            &self.weight,
            (k, 1),
            &cols,
            (n, 1),
            0.0,
            &mut out.data,
        );
        for (co, plane) in out.data.chunks_mut(n).enumerate() {
            let b = self.bias[co];
            plane.iter_mut().for_each(|v| *v = (*v + b).max(0.0));
        }
        (out, cols)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim x in_dim`, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Linear {
    /// Glorot-normal weights, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let normal = Normal::new(0.0, (2.0 / (in_dim + out_dim) as f32).sqrt()).expect("positive std");
        let mut rng = rng_from_seed(seed);
        Self {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim).map(|_| normal.sample(&mut rng)).collect(),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        self.weight
            .chunks(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f32>() + b)
            .collect()
    }

    /// Accumulates weight and bias gradients and returns the input gradient.
    pub fn backward(&self, x: &[f32], dy: &[f32], dw: &mut [f32], db: &mut [f32]) -> Vec<f32> {
        let mut dx = vec![0.0f32; self.in_dim];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let drow = &mut dw[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                drow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }
}

/// Layer widths of a backbone: a non-overlapping patch stem followed by
/// stride-2 3x3 stages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub stem_width: usize,
    pub stem_patch: usize,
    pub stage_widths: Vec<usize>,
}

impl Architecture {
    pub fn layer_shapes(&self) -> Vec<ConvShape> {
        let mut shapes = vec![ConvShape {
            in_channels: 3,
            out_channels: self.stem_width,
            kernel: self.stem_patch,
            stride: self.stem_patch,
            padding: 0,
        }];
        let mut cin = self.stem_width;
        for &w in &self.stage_widths {
            shapes.push(ConvShape {
                in_channels: cin,
                out_channels: w,
                kernel: 3,
                stride: 2,
                padding: 1,
            });
            cin = w;
        }
        shapes
    }

    pub fn output_dim(&self) -> usize {
        *self.stage_widths.last().unwrap_or(&self.stem_width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    pub layers: Vec<Conv2d>,
}

/// Activations kept by [`ConvNet::forward_trace`] for the backward pass.
pub struct Trace {
    input_sizes: Vec<(usize, usize)>,
    cols: Vec<Vec<f32>>,
    outputs: Vec<Tensor>,
}

impl ConvNet {
    pub fn init(arch: &Architecture, seed: u64) -> Self {
        Self {
            layers: arch
                .layer_shapes()
                .into_iter()
                .enumerate()
                .map(|(i, shape)| Conv2d::init(shape, derive_seed(seed, "conv-init", &[&i.to_string()])))
                .collect(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.shape.out_channels)
    }

    /// Smallest input side that yields a non-empty final feature map.
    pub fn min_input_side(&self) -> usize {
        (1..4096)
            .find(|&side| {
                let mut s = side;
                self.layers.iter().all(|l| match l.shape.output_size(s, s) {
                    Some((o, _)) => {
                        s = o;
                        true
                    }
                    None => false,
                })
            })
            .unwrap_or(usize::MAX)
    }

    fn pool(t: &Tensor) -> Vec<f32> {
        let n = t.plane_len() as f32;
        t.data
            .chunks(t.plane_len())
            .map(|p| p.iter().sum::<f32>() / n)
            .collect()
    }

    /// Globally pooled output features.
    pub fn forward(&self, x: &Tensor) -> Vec<f32> {
        let mut cur: Option<Tensor> = None;
        for layer in &self.layers {
            let (out, _) = layer.forward(cur.as_ref().unwrap_or(x));
            cur = Some(out);
        }
        Self::pool(cur.as_ref().unwrap_or(x))
    }

    pub fn forward_trace(&self, x: &Tensor) -> (Vec<f32>, Trace) {
        let mut trace = Trace {
            input_sizes: Vec::with_capacity(self.layers.len()),
            cols: Vec::with_capacity(self.layers.len()),
            outputs: Vec::with_capacity(self.layers.len()),
        };
        for layer in &self.layers {
            let input = trace.outputs.last().unwrap_or(x);
            trace.input_sizes.push((input.height, input.width));
            let (out, cols) = layer.forward(input);
            trace.cols.push(cols);
            trace.outputs.push(out);
        }
        let pooled = Self::pool(trace.outputs.last().unwrap_or(x));
        (pooled, trace)
    }

    /// Accumulates parameter gradients given the gradient of the pooled
    /// output. `grads[2i]` and `grads[2i + 1]` are layer `i`'s weight and
    /// bias gradients.
    pub fn backward(&self, trace: &Trace, dpooled: &[f32], grads: &mut [Vec<f32>]) {
        let last = trace.outputs.last().expect("non-empty network");
        let n = last.plane_len();
        let mut d = Tensor::zeros(last.channels, last.height, last.width);
        for (c, plane) in d.data.chunks_mut(n).enumerate() {
            plane.fill(dpooled[c] / n as f32);
        }
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let out = &trace.outputs[i];
            for (g, &o) in d.data.iter_mut().zip(&out.data) {
                if o <= 0.0 {
                    *g = 0.0;
                }
            }
            let p = out.plane_len();
            let k = layer.shape.patch_len();
            let cout = layer.shape.out_channels;
            let cols = &trace.cols[i];
            let (gw, rest) = grads[2 * i..].split_at_mut(1);
            gemm(cout, p, k, &d.data, (p, 1), cols, (1, p), 1.0, &mut gw[0]);
            for (b, plane) in rest[0].iter_mut().zip(d.data.chunks(p)) {
                *b += plane.iter().sum::<f32>();
            }
            if i == 0 {
                break;
            }
            let mut dcols = vec![0.0f32; k * p];
            gemm(k, cout, p, &layer.weight, (1, k), &d.data, (p, 1), 0.0, &mut dcols);
            let (h, w) = trace.input_sizes[i];
            d = layer.col2im(&dcols, h, w, out.height, out.width);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (ConvNet, Tensor) {
        let arch = Architecture {
            stem_width: 4,
            stem_patch: 2,
            stage_widths: vec![5, 6],
        };
        let net = ConvNet::init(&arch, 3);
        let mut rng = rng_from_seed(9);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let mut x = Tensor::zeros(3, 9, 11);
        x.data.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        (net, x)
    }

    #[test]
    fn direct_convolution_matches_im2col() {
        let (net, x) = tiny();
        let layer = &net.layers[0];
        let (out, _) = layer.forward(&x);
        let ConvShape {
            kernel: k, stride: s, ..
        } = layer.shape;
        for co in 0..out.channels {
            for oy in 0..out.height {
                for ox in 0..out.width {
                    let mut acc = layer.bias[co] as f64;
                    for ci in 0..3 {
                        for ky in 0..k {
                            for kx in 0..k {
                                let w = layer.weight[co * layer.shape.patch_len() + (ci * k + ky) * k + kx];
                                let v = x.data[ci * 99 + (oy * s + ky) * 11 + ox * s + kx];
                                acc += (w * v) as f64;
                            }
                        }
                    }
                    let got = out.data[(co * out.height + oy) * out.width + ox] as f64;
                    assert!((got - acc.max(0.0)).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (mut net, x) = tiny();
        // loss = sum_c r_c * pooled_c with fixed random r
        let r: Vec<f32> = (0..6).map(|c| (c as f32 * 0.7).sin() + 0.3).collect();
        let loss = |net: &ConvNet| -> f64 { net.forward(&x).iter().zip(&r).map(|(a, b)| (a * b) as f64).sum() };
        let (_, trace) = net.forward_trace(&x);
        let mut grads: Vec<Vec<f32>> = net
            .layers
            .iter()
            .flat_map(|l| [vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]])
            .collect();
        net.backward(&trace, &r, &mut grads);
        let h = 1e-2f32;
        for (li, idx) in [(0usize, 3usize), (1, 17), (2, 40), (1, 0)] {
            let orig = net.layers[li].weight[idx];
            net.layers[li].weight[idx] = orig + h;
            let up = loss(&net);
            net.layers[li].weight[idx] = orig - h;
            let down = loss(&net);
            net.layers[li].weight[idx] = orig;
            let fd = (up - down) / (2.0 * h as f64);
            let an = grads[2 * li][idx] as f64;
            assert!(
                (fd - an).abs() < 2e-3 + 2e-2 * an.abs(),
                "layer {li} idx {idx}: fd {fd} vs {an}"
            );
        }
    }

    #[test]
    fn linear_backward() {
        let lin = Linear::init(4, 3, 1);
        let x = [0.5f32, -1.0, 2.0, 0.25];
        let dy = [1.0f32, 0.0, -2.0];
        let mut dw = vec![0.0; 12];
        let mut db = vec![0.0; 3];
        let dx = lin.backward(&x, &dy, &mut dw, &mut db);
        assert_eq!(db, vec![1.0, 0.0, -2.0]);
        assert_eq!(dw[2], 2.0);
        assert_eq!(dw[8 + 1], 2.0);
        let expect0 = lin.weight[0] - 2.0 * lin.weight[8];
        assert!((dx[0] - expect0).abs() < 1e-6);
    }

    #[test]
    fn minimum_side() {
        let arch = Architecture {
            stem_width: 4,
            stem_patch: 4,
            stage_widths: vec![8, 8],
        };
        assert_eq!(ConvNet::init(&arch, 0).min_input_side(), 4);
    }
}
