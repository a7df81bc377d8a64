//! Minimal convolutional building blocks with hand-written backward passes.
//!
//! Tensors are single-sample `C x H x W` buffers; batching is done by the
//! callers. All parameters of a network live in one flat vector and every
//! layer addresses its slice of it by offset, which keeps optimizer state,
//! checkpoints and gradient accumulation trivial.

mod adam;
pub mod evaluator_net;
pub mod unet;

pub use adam::{Adam, AdamConfig};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::SeedStream;
use crate::scalar::Scalar;

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_data(channels: usize, height: usize, width: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), channels * height * width, "tensor buffer size");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    /// Stacks tensors of equal spatial size along the channel axis.
    pub fn concat(parts: &[&Tensor<T>]) -> Self {
        let (h, w) = (parts[0].height, parts[0].width);
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.data.len()).sum());
        let mut channels = 0;
        for t in parts {
            assert_eq!((t.height, t.width), (h, w), "concat spatial mismatch");
            data.extend_from_slice(&t.data);
            channels += t.channels;
        }
        Self::from_data(channels, h, w, data)
    }

    /// Splits along channels into pieces of the given sizes.
    pub fn split(&self, sizes: &[usize]) -> Vec<Tensor<T>> {
        let p = self.plane();
        let mut start = 0;
        sizes
            .iter()
            .map(|&c| {
                let t = Self::from_data(c, self.height, self.width, self.data[start * p..(start + c) * p].to_vec());
                start += c;
                t
            })
            .collect()
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.data.len(), other.data.len(), "add shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Convolution layer descriptor; weights are `[out][in][ky][kx]` followed by
/// `out` biases, starting at `offset` in the parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub offset: usize,
}

impl Conv2d {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.out_channels
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    /// Valid output-column range for kernel column `kx`, plus the input
    /// column of the first valid output.
    fn column_span(&self, kx: usize, w: usize, wo: usize) -> (usize, usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
        let hi = ((w + p - kx).div_ceil(s)).min(wo);
        (lo, hi.max(lo), lo * s + kx - p)
    }

    fn im2col<T: Scalar>(&self, x: &Tensor<T>, ho: usize, wo: usize) -> Vec<T> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let (h, w) = (x.height, x.width);
        let n = ho * wo;
        let mut cols = vec![T::zero(); self.patch_len() * n];
        for c in 0..self.in_channels {
            let src = x.channel(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    let (lo, hi, ix0) = self.column_span(kx, w, wo);
                    for oy in 0..ho {
                        let iy = oy * s + ky;
                        if iy < p || iy - p >= h {
                            continue;
                        }
                        let src_row = &src[(iy - p) * w..(iy - p + 1) * w];
                        let dst_row = &mut dst[oy * wo + lo..oy * wo + hi];
                        if s == 1 {
                            dst_row.copy_from_slice(&src_row[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (i, d) in dst_row.iter_mut().enumerate() {
                                *d = src_row[ix0 + i * s];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T], h: usize, w: usize, ho: usize, wo: usize) -> Tensor<T> {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let n = ho * wo;
        let mut out = Tensor::zeros(self.in_channels, h, w);
        let plane = h * w;
        for c in 0..self.in_channels {
            let dst = &mut out.data[c * plane..(c + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    let (lo, hi, ix0) = self.column_span(kx, w, wo);
                    for oy in 0..ho {
                        let iy = oy * s + ky;
                        if iy < p || iy - p >= h {
                            continue;
                        }
                        let dst_row = &mut dst[(iy - p) * w..(iy - p + 1) * w];
                        let src_row = &src[oy * wo + lo..oy * wo + hi];
                        for (i, &v) in src_row.iter().enumerate() {
                            dst_row[ix0 + i * s] += v;
                        }
                    }
                }
            }
        }
        out
    }

    /// Returns the output and the im2col buffer needed by [`Conv2d::backward`].
    pub fn forward<T: Scalar>(&self, params: &[T], x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let (ho, wo) = self.output_size(x.height, x.width);
        let cols = self.im2col(x, ho, wo);
        let n = ho * wo;
        let kk = self.patch_len();
        let weights = &params[self.offset..self.offset + self.weight_len()];
        let bias = &params[self.offset + self.weight_len()..self.offset + self.param_len()];
        let mut data = vec![T::zero(); self.out_channels * n];
        for (o, chunk) in data.chunks_exact_mut(n).enumerate() {
            chunk.fill(bias[o]);
        }
        T::gemm(self.out_channels, kk, n, T::one(), weights, (kk, 1), &cols, (n, 1), T::one(), &mut data, (n, 1));
        (Tensor::from_data(self.out_channels, ho, wo, data), cols)
    }

    /// Accumulates parameter gradients into `grads` (the full gradient
    /// vector) and optionally returns the input gradient.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        input_shape: (usize, usize),
        cols: &[T],
        dy: &Tensor<T>,
        grads: Option<&mut [T]>,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let n = dy.plane();
        let kk = self.patch_len();
        if let Some(grads) = grads {
            let (gw, gb) = grads[self.offset..self.offset + self.param_len()].split_at_mut(self.weight_len());
            for (o, b) in gb.iter_mut().enumerate() {
                *b += dy.data[o * n..(o + 1) * n].iter().copied().sum::<T>();
            }
            T::gemm(self.out_channels, n, kk, T::one(), &dy.data, (n, 1), cols, (1, n), T::one(), gw, (kk, 1));
        }
        if !need_input {
            return None;
        }
        let weights = &params[self.offset..self.offset + self.weight_len()];
        let mut dcols = vec![T::zero(); kk * n];
        T::gemm(kk, self.out_channels, n, T::one(), weights, (1, kk), &dy.data, (n, 1), T::zero(), &mut dcols, (n, 1));
        Some(self.col2im(&dcols, input_shape.0, input_shape.1, dy.height, dy.width))
    }
}

/// Assigns consecutive parameter ranges to layers.
#[derive(Debug, Default)]
pub struct ParamLayout {
    len: usize,
}

impl ParamLayout {
    pub fn conv(&mut self, in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Conv2d {
        let c = Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            offset: self.len,
        };
        self.len += c.param_len();
        c
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Weight initialization for a conv layer: zero-mean normal weights with
/// standard deviation `gain * sqrt(2 / fan_in)` and zero biases.
pub fn init_conv<T: Scalar>(conv: &Conv2d, params: &mut [T], gain: f64, stream: &mut SeedStream) {
    let std = gain * (2.0 / (conv.in_channels * conv.kernel * conv.kernel) as f64).sqrt();
    let range = conv.offset..conv.offset + conv.weight_len();
    if std > 0.0 {
        let normal = Normal::new(0.0, std).expect("finite std");
        for w in &mut params[range] {
            *w = T::lit(normal.sample(stream));
        }
    } else {
        params[range].fill(T::zero());
    }
    params[conv.offset + conv.weight_len()..conv.offset + conv.param_len()].fill(T::zero());
}

pub fn leaky_relu<T: Scalar>(mut t: Tensor<T>) -> Tensor<T> {
    let slope = T::lit(LEAKY_SLOPE);
    for v in t.data.iter_mut() {
        if *v < T::zero() {
            *v *= slope;
        }
    }
    t
}

/// Backward of [`leaky_relu`] given its output (the sign is preserved).
pub fn leaky_relu_backward<T: Scalar>(output: &Tensor<T>, mut grad: Tensor<T>) -> Tensor<T> {
    let slope = T::lit(LEAKY_SLOPE);
    for (g, &y) in grad.data.iter_mut().zip(&output.data) {
        if y < T::zero() {
            *g *= slope;
        }
    }
    grad
}

pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (x.height, x.width);
    let mut out = Tensor::zeros(x.channels, 2 * h, 2 * w);
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = &mut out.data[c * 4 * h * w..(c + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(grad: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (grad.height / 2, grad.width / 2);
    let mut out = Tensor::zeros(grad.channels, h, w);
    for c in 0..grad.channels {
        let src = grad.channel(c);
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for y in 0..2 * h {
            for x in 0..2 * w {
                dst[(y / 2) * w + x / 2] += src[y * 2 * w + x];
            }
        }
    }
    out
}

/// Pads a tensor by edge replication so both sides become multiples of
/// `multiple`.
pub fn pad_to_multiple<T: Scalar>(x: &Tensor<T>, multiple: usize) -> Tensor<T> {
    let hp = x.height.div_ceil(multiple) * multiple;
    let wp = x.width.div_ceil(multiple) * multiple;
    if (hp, wp) == (x.height, x.width) {
        return x.clone();
    }
    let mut out = Tensor::zeros(x.channels, hp, wp);
    for c in 0..x.channels {
        let src = x.channel(c);
        for y in 0..hp {
            for xx in 0..wp {
                out.data[c * hp * wp + y * wp + xx] = src[y.min(x.height - 1) * x.width + xx.min(x.width - 1)];
            }
        }
    }
    out
}

/// Adjoint of [`pad_to_multiple`]: folds padded gradients back onto the
/// replicated edge pixels.
pub fn pad_backward<T: Scalar>(grad: &Tensor<T>, height: usize, width: usize) -> Tensor<T> {
    if (grad.height, grad.width) == (height, width) {
        return grad.clone();
    }
    let mut out = Tensor::zeros(grad.channels, height, width);
    for c in 0..grad.channels {
        let src = grad.channel(c);
        for y in 0..grad.height {
            for x in 0..grad.width {
                out.data[c * height * width + y.min(height - 1) * width + x.min(width - 1)] += src[y * grad.width + x];
            }
        }
    }
    out
}

/// Crops the top-left `height x width` region.
pub fn crop<T: Scalar>(x: &Tensor<T>, height: usize, width: usize) -> Tensor<T> {
    if (x.height, x.width) == (height, width) {
        return x.clone();
    }
    let mut data = Vec::with_capacity(x.channels * height * width);
    for c in 0..x.channels {
        let src = x.channel(c);
        for y in 0..height {
            data.extend_from_slice(&src[y * x.width..y * x.width + width]);
        }
    }
    Tensor::from_data(x.channels, height, width, data)
}

/// Adjoint of [`crop`].
pub fn crop_backward<T: Scalar>(grad: &Tensor<T>, height: usize, width: usize) -> Tensor<T> {
    if (grad.height, grad.width) == (height, width) {
        return grad.clone();
    }
    let mut out = Tensor::zeros(grad.channels, height, width);
    for c in 0..grad.channels {
        let src = grad.channel(c);
        for y in 0..grad.height {
            let dst = c * height * width + y * width;
            out.data[dst..dst + grad.width].copy_from_slice(&src[y * grad.width..(y + 1) * grad.width]);
        }
    }
    out
}
