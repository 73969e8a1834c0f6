//! Matrix products specialised for the narrow shapes of small conv layers,
//! where one side has only a handful of columns and general GEMM packing
//! dominates. Wider shapes fall back to ndarray.

use ndarray::{Array2, ArrayView2};

const MAX_NARROW: usize = 32;

#[inline(always)]
fn madd<const FMA: bool>(a: f64, b: f64, c: f64) -> f64 {
    if FMA {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

/// `out[m×N] = a[m×k] · wt[k×N]`, `R` rows at a time.
#[inline(always)]
fn narrow_kernel<const N: usize, const R: usize, const FMA: bool>(a: &[f64], wt: &[f64], out: &mut [f64], k: usize) {
    let m = out.len() / N;
    let full = m - m % R;
    for r0 in (0..full).step_by(R) {
        let mut acc = [[0.0f64; N]; R];
        for (j, w) in wt.chunks_exact(N).enumerate() {
            let w: &[f64; N] = w.try_into().expect("chunk");
            for (i, row) in acc.iter_mut().enumerate() {
                let x = a[(r0 + i) * k + j];
                for o in 0..N {
                    row[o] = madd::<FMA>(x, w[o], row[o]);
                }
            }
        }
        for (i, row) in acc.iter().enumerate() {
            out[(r0 + i) * N..(r0 + i + 1) * N].copy_from_slice(row);
        }
    }
    for r in full..m {
        let mut acc = [0.0f64; N];
        for (x, w) in a[r * k..(r + 1) * k].iter().zip(wt.chunks_exact(N)) {
            for o in 0..N {
                acc[o] = madd::<FMA>(*x, w[o], acc[o]);
            }
        }
        out[r * N..(r + 1) * N].copy_from_slice(&acc);
    }
}

/// `out[n×k] += Σ_r dy[r,:]ᵀ a[r,:]`
#[inline(always)]
fn tn_kernel<const FMA: bool>(dy: &[f64], a: &[f64], out: &mut [f64], n: usize, k: usize) {
    for (d, x) in dy.chunks_exact(n).zip(a.chunks_exact(k)) {
        for (dv, o) in d.iter().zip(out.chunks_exact_mut(k)) {
            if *dv == 0.0 {
                continue;
            }
            for (ov, xv) in o.iter_mut().zip(x) {
                *ov = madd::<FMA>(*dv, *xv, *ov);
            }
        }
    }
}

/// `out[m×k] = dy[m×n] · w[n×k]`
#[inline(always)]
fn nn_kernel<const FMA: bool>(dy: &[f64], w: &[f64], out: &mut [f64], n: usize, k: usize) {
    for (d, o) in dy.chunks_exact(n).zip(out.chunks_exact_mut(k)) {
        for (dv, wr) in d.iter().zip(w.chunks_exact(k)) {
            if *dv == 0.0 {
                continue;
            }
            for (ov, wv) in o.iter_mut().zip(wr) {
                *ov = madd::<FMA>(*dv, *wv, *ov);
            }
        }
    }
}

/// Direct 3×3 convolution (stride 1, zero padding 1) over channels-last
/// input `src[n·h·w × c]` with `wt[(9·c) × N]`, processing `R` horizontally
/// adjacent output pixels together where every tap is in range.
#[inline(always)]
fn conv_kernel<const N: usize, const R: usize, const FMA: bool>(
    src: &[f64],
    wt: &[f64],
    bias: &[f64; N],
    out: &mut [f64],
    dims: (usize, usize, usize, usize),
) {
    let (n, h, w, c) = dims;
    let single = |out: &mut [f64], b: usize, y: usize, x: usize| {
        let mut acc = *bias;
        for ky in 0..3 {
            if y + ky < 1 || y + ky > h {
                continue;
            }
            for kx in 0..3 {
                if x + kx < 1 || x + kx > w {
                    continue;
                }
                let s = &src[((b * h + y + ky - 1) * w + x + kx - 1) * c..][..c];
                let wr = &wt[(ky * 3 + kx) * c * N..][..c * N];
                for (a, wv) in s.iter().zip(wr.chunks_exact(N)) {
                    for o in 0..N {
                        acc[o] = madd::<FMA>(*a, wv[o], acc[o]);
                    }
                }
            }
        }
        out[((b * h + y) * w + x) * N..][..N].copy_from_slice(&acc);
    };
    for b in 0..n {
        for y in 0..h {
            let mut x = 0;
            while x < w {
                if x >= 1 && x + R < w {
                    let mut acc = [*bias; R];
                    for ky in 0..3 {
                        if y + ky < 1 || y + ky > h {
                            continue;
                        }
                        let row = (b * h + y + ky - 1) * w;
                        for kx in 0..3 {
                            let base = (row + x + kx - 1) * c;
                            let wr = &wt[(ky * 3 + kx) * c * N..][..c * N];
                            for (ci, wv) in wr.chunks_exact(N).enumerate() {
                                let wv: &[f64; N] = wv.try_into().expect("chunk");
                                for (i, a) in acc.iter_mut().enumerate() {
                                    let v = src[base + i * c + ci];
                                    for o in 0..N {
                                        a[o] = madd::<FMA>(v, wv[o], a[o]);
                                    }
                                }
                            }
                        }
                    }
                    for (i, a) in acc.iter().enumerate() {
                        out[((b * h + y) * w + x + i) * N..][..N].copy_from_slice(a);
                    }
                    x += R;
                } else {
                    single(out, b, y, x);
                    x += 1;
                }
            }
        }
    }
}

/// Single-output-channel direct convolution, vectorised over `C` input
/// channels with `R` pixels in flight.
#[inline(always)]
fn conv1_kernel<const C: usize, const R: usize, const FMA: bool>(
    src: &[f64],
    wt: &[f64],
    bias: f64,
    out: &mut [f64],
    dims: (usize, usize, usize),
) {
    let (n, h, w) = dims;
    let total = n * h * w;
    let mut p0 = 0;
    while p0 < total {
        let count = R.min(total - p0);
        let mut acc = [[0.0f64; C]; R];
        for (i, a) in acc.iter_mut().enumerate().take(count) {
            let p = p0 + i;
            let (b, y, x) = (p / (h * w), (p / w) % h, p % w);
            for ky in 0..3 {
                if y + ky < 1 || y + ky > h {
                    continue;
                }
                for kx in 0..3 {
                    if x + kx < 1 || x + kx > w {
                        continue;
                    }
                    let s: &[f64; C] = src[((b * h + y + ky - 1) * w + x + kx - 1) * C..][..C]
                        .try_into()
                        .expect("pixel");
                    let wv: &[f64; C] = wt[(ky * 3 + kx) * C..][..C].try_into().expect("tap");
                    for ch in 0..C {
                        a[ch] = madd::<FMA>(s[ch], wv[ch], a[ch]);
                    }
                }
            }
        }
        for (i, a) in acc.iter().enumerate().take(count) {
            out[p0 + i] = bias + a.iter().sum::<f64>();
        }
        p0 += count;
    }
}

#[cfg(target_arch = "x86_64")]
mod avx {
    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn narrow<const N: usize, const R: usize>(a: &[f64], wt: &[f64], out: &mut [f64], k: usize) {
        super::narrow_kernel::<N, R, true>(a, wt, out, k)
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn conv<const N: usize, const R: usize>(
        src: &[f64],
        wt: &[f64],
        bias: &[f64; N],
        out: &mut [f64],
        dims: (usize, usize, usize, usize),
    ) {
        super::conv_kernel::<N, R, true>(src, wt, bias, out, dims)
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn conv1<const C: usize, const R: usize>(
        src: &[f64],
        wt: &[f64],
        bias: f64,
        out: &mut [f64],
        dims: (usize, usize, usize),
    ) {
        super::conv1_kernel::<C, R, true>(src, wt, bias, out, dims)
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn tn(dy: &[f64], a: &[f64], out: &mut [f64], n: usize, k: usize) {
        super::tn_kernel::<true>(dy, a, out, n, k)
    }

    #[target_feature(enable = "avx2,fma")]
    pub unsafe fn nn(dy: &[f64], w: &[f64], out: &mut [f64], n: usize, k: usize) {
        super::nn_kernel::<true>(dy, w, out, n, k)
    }
}

fn has_avx2_fma() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

fn narrow<const N: usize, const R: usize>(a: &[f64], wt: &[f64], out: &mut [f64], k: usize) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2_fma() {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { avx::narrow::<N, R>(a, wt, out, k) };
        return;
    }
    narrow_kernel::<N, R, false>(a, wt, out, k)
}

fn conv<const N: usize, const R: usize>(src: &[f64], wt: &[f64], bias: &[f64], out: &mut [f64], dims: (usize, usize, usize, usize)) {
    let bias: &[f64; N] = bias.try_into().expect("bias length");
    #[cfg(target_arch = "x86_64")]
    if has_avx2_fma() {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { avx::conv::<N, R>(src, wt, bias, out, dims) };
        return;
    }
    conv_kernel::<N, R, false>(src, wt, bias, out, dims)
}

fn conv1<const C: usize, const R: usize>(src: &[f64], wt: &[f64], bias: f64, out: &mut [f64], dims: (usize, usize, usize)) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2_fma() {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { avx::conv1::<C, R>(src, wt, bias, out, dims) };
        return;
    }
    conv1_kernel::<C, R, false>(src, wt, bias, out, dims)
}

/// Direct 3×3 convolution of channels-last `x` (`n·h·w × c`) with weight
/// `w: out × 9c` and bias. `None` when `out` has no specialised kernel.
pub fn conv3x3_direct(
    x: &Array2<f64>,
    dims: (usize, usize, usize),
    w: ArrayView2<'_, f64>,
    bias: &[f64],
) -> Option<Array2<f64>> {
    let (n, h, wd) = dims;
    let c = x.ncols();
    let o = w.nrows();
    assert_eq!(w.ncols(), 9 * c, "conv input channels");
    let src = x.as_slice()?;
    let wt = contiguous(&w.t());
    let wt = wt.as_slice().expect("standard");
    let mut out = Array2::zeros((n * h * wd, o));
    let dst = out.as_slice_mut().expect("standard");
    let d = (n, h, wd, c);
    match (o, c) {
        (1, 4) => conv1::<4, 4>(src, wt, bias[0], dst, dims),
        (1, 8) => conv1::<8, 4>(src, wt, bias[0], dst, dims),
        (1, 16) => conv1::<16, 2>(src, wt, bias[0], dst, dims),
        _ => {}
    }
    if o == 1 && matches!(c, 4 | 8 | 16) {
        return Some(out);
    }
    match o {
        1 => conv::<1, 8>(src, wt, bias, dst, d),
        2 => conv::<2, 8>(src, wt, bias, dst, d),
        3 => conv::<3, 4>(src, wt, bias, dst, d),
        4 => conv::<4, 4>(src, wt, bias, dst, d),
        8 => conv::<8, 4>(src, wt, bias, dst, d),
        12 => conv::<12, 2>(src, wt, bias, dst, d),
        16 => conv::<16, 2>(src, wt, bias, dst, d),
        _ => return None,
    }
    Some(out)
}

fn contiguous(a: &ArrayView2<'_, f64>) -> Array2<f64> {
    a.as_standard_layout().into_owned()
}

/// `a · wᵀ` for `a: m×k`, `w: n×k`.
pub fn matmul_wt(a: &Array2<f64>, w: ArrayView2<'_, f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let n = w.nrows();
    assert_eq!(w.ncols(), k, "inner dimensions");
    if n > MAX_NARROW || k == 0 || !a.is_standard_layout() {
        return a.dot(&w.t());
    }
    let wt = contiguous(&w.t());
    let wt = wt.as_slice().expect("standard");
    let src = a.as_slice().expect("standard");
    let mut out = Array2::zeros((m, n));
    let dst = out.as_slice_mut().expect("standard");
    match n {
        1 => narrow::<1, 8>(src, wt, dst, k),
        2 => narrow::<2, 4>(src, wt, dst, k),
        3 => narrow::<3, 4>(src, wt, dst, k),
        4 => narrow::<4, 4>(src, wt, dst, k),
        8 => narrow::<8, 4>(src, wt, dst, k),
        12 => narrow::<12, 2>(src, wt, dst, k),
        16 => narrow::<16, 2>(src, wt, dst, k),
        _ => return a.dot(&w.t()),
    }
    out
}

/// `dyᵀ · a` for `dy: m×n`, `a: m×k`, producing `n×k`.
pub fn matmul_tn(dy: &Array2<f64>, a: &Array2<f64>) -> Array2<f64> {
    let (m, n) = dy.dim();
    let k = a.ncols();
    assert_eq!(a.nrows(), m, "outer dimensions");
    if n > MAX_NARROW || !dy.is_standard_layout() || !a.is_standard_layout() {
        return dy.t().dot(a);
    }
    let mut out = Array2::zeros((n, k));
    let (d, x, o) = (
        dy.as_slice().expect("standard"),
        a.as_slice().expect("standard"),
        out.as_slice_mut().expect("standard"),
    );
    #[cfg(target_arch = "x86_64")]
    if has_avx2_fma() {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { avx::tn(d, x, o, n, k) };
        return out;
    }
    tn_kernel::<false>(d, x, o, n, k);
    out
}

/// `dy · w` for `dy: m×n`, `w: n×k`.
pub fn matmul_nn(dy: &Array2<f64>, w: ArrayView2<'_, f64>) -> Array2<f64> {
    let (m, n) = dy.dim();
    let k = w.ncols();
    assert_eq!(w.nrows(), n, "inner dimensions");
    if n > MAX_NARROW || !dy.is_standard_layout() || !w.is_standard_layout() {
        return dy.dot(&w);
    }
    let mut out = Array2::zeros((m, k));
    let (d, wv, o) = (
        dy.as_slice().expect("standard"),
        w.as_slice().expect("standard"),
        out.as_slice_mut().expect("standard"),
    );
    #[cfg(target_arch = "x86_64")]
    if has_avx2_fma() {
        // SAFETY: the required CPU features were detected at runtime.
        unsafe { avx::nn(d, wv, o, n, k) };
        return out;
    }
    nn_kernel::<false>(d, wv, o, n, k);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn random(rows: usize, cols: usize, s: u64) -> Array2<f64> {
        let mut rng = seed::rng(s);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    fn close(a: &Array2<f64>, b: &Array2<f64>) -> bool {
        a.dim() == b.dim() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-10)
    }

    #[test]
    fn narrow_products_match_ndarray() {
        for &(m, k, n) in &[(7, 9, 1), (13, 72, 8), (5, 27, 3), (9, 144, 16), (6, 10, 12), (11, 5, 5), (3, 4, 40)] {
            let a = random(m, k, 1);
            let w = random(n, k, 2);
            assert!(close(&matmul_wt(&a, w.view()), &a.dot(&w.t())), "wt {m}x{k}x{n}");
            let dy = random(m, n, 3);
            assert!(close(&matmul_tn(&dy, &a), &dy.t().dot(&a)), "tn {m}x{k}x{n}");
            assert!(close(&matmul_nn(&dy, w.view()), &dy.dot(&w)), "nn {m}x{k}x{n}");
        }
    }

    #[test]
    fn portable_kernel_matches_dispatched() {
        let a = random(10, 18, 4);
        let w = random(8, 18, 5);
        let wt = w.t().as_standard_layout().into_owned();
        let mut out = vec![0.0; 80];
        narrow_kernel::<8, 4, false>(a.as_slice().unwrap(), wt.as_slice().unwrap(), &mut out, 18);
        let fast = matmul_wt(&a, w.view());
        for (x, y) in out.iter().zip(fast.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
