//! Minimal layer kernels with hand-written backward passes.
//!
//! Activations are channels-last: a [`FeatureMap`] is a matrix whose rows are
//! the `(image, y, x)` positions in row-major order and whose columns are
//! channels. 3×3 convolutions (stride 1, zero padding 1) go through im2col so
//! every heavy operation is a single matrix product.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use crate::gemm;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub data: Array2<f64>,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    /// Build from rows of images stored channel-major `(c, y, x)`.
    pub fn from_chw_rows(rows: ArrayView2<'_, f64>, channels: usize, height: usize, width: usize) -> Self {
        let batch = rows.nrows();
        assert_eq!(rows.ncols(), channels * height * width, "image size mismatch");
        let plane = height * width;
        let mut data = Array2::zeros((batch * plane, channels));
        {
            let dst = data.as_slice_mut().expect("standard layout");
            for (b, row) in rows.outer_iter().enumerate() {
                for c in 0..channels {
                    for p in 0..plane {
                        dst[(b * plane + p) * channels + c] = row[c * plane + p];
                    }
                }
            }
        }
        FeatureMap {
            data,
            batch,
            height,
            width,
        }
    }

    /// Inverse of [`FeatureMap::from_chw_rows`].
    pub fn to_chw_rows(&self) -> Array2<f64> {
        let c = self.channels();
        let plane = self.height * self.width;
        let mut out = Array2::zeros((self.batch, c * plane));
        let src = self.data.as_slice().expect("standard layout");
        for (b, mut row) in out.outer_iter_mut().enumerate() {
            for ch in 0..c {
                for p in 0..plane {
                    row[ch * plane + p] = src[(b * plane + p) * c + ch];
                }
            }
        }
        out
    }

    fn like(&self, data: Array2<f64>, height: usize, width: usize) -> FeatureMap {
        FeatureMap {
            data,
            batch: self.batch,
            height,
            width,
        }
    }
}

/// Uniform init in `[-bound, bound]`.
pub fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

/// Conv weight `(out, 9·in)` and bias `(out)` with fan-in scaled init.
pub fn conv3x3_init(rng: &mut impl Rng, in_ch: usize, out_ch: usize) -> (Tensor, Tensor) {
    let bound = 1.0 / ((9 * in_ch) as f64).sqrt();
    (
        uniform_tensor(rng, &[out_ch, 9 * in_ch], bound),
        uniform_tensor(rng, &[out_ch], bound),
    )
}

/// He-uniform conv weights for ReLU stacks, zero bias.
pub fn conv3x3_he_init(rng: &mut impl Rng, in_ch: usize, out_ch: usize) -> (Tensor, Tensor) {
    let bound = (6.0 / (9 * in_ch) as f64).sqrt();
    (uniform_tensor(rng, &[out_ch, 9 * in_ch], bound), Tensor::zeros(&[out_ch]))
}

/// He-uniform linear weights, zero bias.
pub fn linear_he_init(rng: &mut impl Rng, in_dim: usize, out_dim: usize) -> (Tensor, Tensor) {
    let bound = (6.0 / in_dim as f64).sqrt();
    (uniform_tensor(rng, &[out_dim, in_dim], bound), Tensor::zeros(&[out_dim]))
}

/// Linear weight `(out, in)` and bias `(out)`.
pub fn linear_init(rng: &mut impl Rng, in_dim: usize, out_dim: usize) -> (Tensor, Tensor) {
    let bound = 1.0 / (in_dim as f64).sqrt();
    (
        uniform_tensor(rng, &[out_dim, in_dim], bound),
        uniform_tensor(rng, &[out_dim], bound),
    )
}

fn im2col(x: &FeatureMap) -> Array2<f64> {
    let (n, h, w, c) = (x.batch, x.height, x.width, x.channels());
    let k = 9 * c;
    let mut cols = Array2::zeros((n * h * w, k));
    let src = x.data.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("standard layout");
    for b in 0..n {
        for y in 0..h {
            for ky in 0..3 {
                if y + ky < 1 || y + ky > h {
                    continue;
                }
                let src_base = (b * h + y + ky - 1) * w;
                let dst_base = (b * h + y) * w;
                for kx in 0..3 {
                    // output columns whose tap (ky, kx) lands inside the image
                    let lo = 1usize.saturating_sub(kx);
                    let hi = (w + 1 - kx).min(w);
                    let tap = (ky * 3 + kx) * c;
                    for xx in lo..hi {
                        let s = (src_base + xx + kx - 1) * c;
                        let d = (dst_base + xx) * k + tap;
                        if c == 1 {
                            dst[d] = src[s];
                        } else {
                            dst[d..d + c].copy_from_slice(&src[s..s + c]);
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, n: usize, h: usize, w: usize, c: usize) -> Array2<f64> {
    let k = 9 * c;
    let mut out = Array2::zeros((n * h * w, c));
    let src = cols.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("standard layout");
    for b in 0..n {
        for y in 0..h {
            for ky in 0..3 {
                if y + ky < 1 || y + ky > h {
                    continue;
                }
                let dst_base = (b * h + y + ky - 1) * w;
                let src_base = (b * h + y) * w;
                for kx in 0..3 {
                    let lo = 1usize.saturating_sub(kx);
                    let hi = (w + 1 - kx).min(w);
                    let tap = (ky * 3 + kx) * c;
                    for xx in lo..hi {
                        let s = (src_base + xx) * k + tap;
                        let d = (dst_base + xx + kx - 1) * c;
                        for ch in 0..c {
                            dst[d + ch] += src[s + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Saved state of a convolution forward pass.
pub struct ConvCache {
    cols: Array2<f64>,
    in_channels: usize,
}

pub fn conv3x3_forward(x: &FeatureMap, weight: &Tensor, bias: &Tensor) -> (FeatureMap, ConvCache) {
    assert_eq!(weight.shape()[1], 9 * x.channels(), "conv input channels");
    let cols = im2col(x);
    let mut out = gemm::matmul_wt(&cols, weight.view2());
    out += &bias.view1();
    (
        x.like(out, x.height, x.width),
        ConvCache {
            cols,
            in_channels: x.channels(),
        },
    )
}

/// Forward-only convolution that skips the im2col buffer when a direct
/// kernel exists for the output width.
pub fn conv3x3_infer(x: &FeatureMap, weight: &Tensor, bias: &Tensor) -> FeatureMap {
    match gemm::conv3x3_direct(&x.data, (x.batch, x.height, x.width), weight.view2(), bias.data()) {
        Some(data) => x.like(data, x.height, x.width),
        None => conv3x3_forward(x, weight, bias).0,
    }
}

/// Returns `(dx, dweight, dbias)`; `dx` is skipped when `need_input_grad` is false.
pub fn conv3x3_backward(
    cache: &ConvCache,
    weight: &Tensor,
    dy: &FeatureMap,
    need_input_grad: bool,
) -> (Option<FeatureMap>, Tensor, Tensor) {
    let dw = gemm::matmul_tn(&dy.data, &cache.cols);
    let db = dy.data.sum_axis(Axis(0));
    let dx = need_input_grad.then(|| {
        let dcols = gemm::matmul_nn(&dy.data, weight.view2());
        let data = col2im(&dcols, dy.batch, dy.height, dy.width, cache.in_channels);
        dy.like(data, dy.height, dy.width)
    });
    (
        dx,
        Tensor::from_vec(weight.shape(), dw.into_raw_vec_and_offset().0).expect("dw shape"),
        Tensor::from_vec(&[db.len()], db.to_vec()).expect("db shape"),
    )
}

pub fn linear_forward(x: &Array2<f64>, weight: &Tensor, bias: &Tensor) -> Array2<f64> {
    let mut out = x.dot(&weight.view2().t());
    out += &bias.view1();
    out
}

pub fn linear_backward(
    x: &Array2<f64>,
    weight: &Tensor,
    dy: &Array2<f64>,
    need_input_grad: bool,
) -> (Option<Array2<f64>>, Tensor, Tensor) {
    let dw = dy.t().dot(x);
    let db = dy.sum_axis(Axis(0));
    let dx = need_input_grad.then(|| dy.dot(&weight.view2()));
    (
        dx,
        Tensor::from_vec(weight.shape(), dw.into_raw_vec_and_offset().0).expect("dw shape"),
        Tensor::from_vec(&[db.len()], db.to_vec()).expect("db shape"),
    )
}

pub fn relu_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(output: &Array2<f64>, dy: &mut Array2<f64>) {
    ndarray::Zip::from(dy)
        .and(output)
        .for_each(|g, &o| {
            if o <= 0.0 {
                *g = 0.0;
            }
        });
}

/// `max(x, slope·x)` for `0 < slope < 1`.
pub fn leaky_relu_inplace(x: &mut Array2<f64>, slope: f64) {
    x.mapv_inplace(|v| if v > 0.0 { v } else { slope * v });
}

/// Gradient through a leaky ReLU given its output.
pub fn leaky_relu_backward(output: &Array2<f64>, dy: &mut Array2<f64>, slope: f64) {
    ndarray::Zip::from(dy).and(output).for_each(|g, &o| {
        if o <= 0.0 {
            *g *= slope;
        }
    });
}

pub fn avgpool2_forward(x: &FeatureMap) -> FeatureMap {
    let (n, h, w, c) = (x.batch, x.height, x.width, x.channels());
    assert!(h % 2 == 0 && w % 2 == 0, "avgpool2 needs even spatial dims");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array2::zeros((n * oh * ow, c));
    let src = x.data.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("standard layout");
    for (orow, o) in dst.chunks_exact_mut(c).enumerate() {
        let (b, rem) = (orow / (oh * ow), orow % (oh * ow));
        let (y, xx) = (rem / ow, rem % ow);
        let top = ((b * h + 2 * y) * w + 2 * xx) * c;
        let bottom = top + w * c;
        let (r0, r1) = (&src[top..top + 2 * c], &src[bottom..bottom + 2 * c]);
        for ch in 0..c {
            o[ch] = 0.25 * (r0[ch] + r0[c + ch] + r1[ch] + r1[c + ch]);
        }
    }
    x.like(out, oh, ow)
}

/// Gradient of [`avgpool2_forward`]; `dy` is at the pooled resolution.
pub fn avgpool2_backward(dy: &FeatureMap) -> FeatureMap {
    let (n, oh, ow, c) = (dy.batch, dy.height, dy.width, dy.channels());
    let (h, w) = (oh * 2, ow * 2);
    let mut out = Array2::zeros((n * h * w, c));
    let src = dy.data.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("standard layout");
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let irow = (b * h + y) * w + xx;
                let orow = (b * oh + y / 2) * ow + xx / 2;
                for ch in 0..c {
                    dst[irow * c + ch] = 0.25 * src[orow * c + ch];
                }
            }
        }
    }
    dy.like(out, h, w)
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2_forward(x: &FeatureMap) -> FeatureMap {
    let (n, h, w, c) = (x.batch, x.height, x.width, x.channels());
    let (oh, ow) = (h * 2, w * 2);
    let mut out = Array2::zeros((n * oh * ow, c));
    let src = x.data.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("standard layout");
    for b in 0..n {
        for y in 0..oh {
            for xx in 0..ow {
                let orow = (b * oh + y) * ow + xx;
                let irow = (b * h + y / 2) * w + xx / 2;
                dst[orow * c..(orow + 1) * c].copy_from_slice(&src[irow * c..(irow + 1) * c]);
            }
        }
    }
    x.like(out, oh, ow)
}

pub fn upsample2_backward(dy: &FeatureMap) -> FeatureMap {
    let (n, oh, ow, c) = (dy.batch, dy.height, dy.width, dy.channels());
    let (h, w) = (oh / 2, ow / 2);
    let mut out = Array2::zeros((n * h * w, c));
    let src = dy.data.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("standard layout");
    for b in 0..n {
        for y in 0..oh {
            for xx in 0..ow {
                let orow = (b * oh + y) * ow + xx;
                let irow = (b * h + y / 2) * w + xx / 2;
                for ch in 0..c {
                    dst[irow * c + ch] += src[orow * c + ch];
                }
            }
        }
    }
    dy.like(out, h, w)
}

/// Mean over spatial positions: `(n·h·w, c)` → `(n, c)`.
pub fn global_avg_pool_forward(x: &FeatureMap) -> Array2<f64> {
    let plane = x.height * x.width;
    let c = x.channels();
    let mut out = Array2::zeros((x.batch, c));
    for b in 0..x.batch {
        let block = x.data.slice(ndarray::s![b * plane..(b + 1) * plane, ..]);
        out.row_mut(b).assign(&block.mean_axis(Axis(0)).expect("non-empty plane"));
    }
    out
}

pub fn global_avg_pool_backward(dy: &Array2<f64>, height: usize, width: usize) -> FeatureMap {
    let plane = height * width;
    let (n, c) = dy.dim();
    let mut out = Array2::zeros((n * plane, c));
    let scale = 1.0 / plane as f64;
    for b in 0..n {
        let g = dy.row(b).mapv(|v| v * scale);
        for p in 0..plane {
            out.row_mut(b * plane + p).assign(&g);
        }
    }
    FeatureMap {
        data: out,
        batch: n,
        height,
        width,
    }
}

/// Add a per-image channel vector (`bias` is `(n, c)`) to every position.
pub fn add_image_bias(x: &mut FeatureMap, bias: &Array2<f64>) {
    let c = x.channels();
    let plane = x.height * x.width;
    let dst = x.data.as_slice_mut().expect("standard layout");
    for (block, row) in dst.chunks_exact_mut(plane * c).zip(bias.outer_iter()) {
        let row = row.to_vec();
        for px in block.chunks_exact_mut(c) {
            for (v, b) in px.iter_mut().zip(&row) {
                *v += b;
            }
        }
    }
}

/// Gradient of [`add_image_bias`] w.r.t. the bias.
pub fn image_bias_backward(dy: &FeatureMap) -> Array2<f64> {
    let c = dy.channels();
    let plane = dy.height * dy.width;
    let mut out = Array2::zeros((dy.batch, c));
    let src = dy.data.as_slice().expect("standard layout");
    for (block, mut row) in src.chunks_exact(plane * c).zip(out.outer_iter_mut()) {
        let mut acc = vec![0.0; c];
        for px in block.chunks_exact(c) {
            for (a, v) in acc.iter_mut().zip(px) {
                *a += v;
            }
        }
        row.assign(&ndarray::ArrayView1::from(&acc));
    }
    out
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}
