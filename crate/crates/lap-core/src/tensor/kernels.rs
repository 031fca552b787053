//! Raw f64 compute kernels behind the tape ops.
//!
//! Accumulation order is fixed in every kernel, so results are bit-identical
//! across runs. The convolution kernels keep the per-element contribution
//! order `(c, kh, kw)` identical to the textbook triple loop; fast paths are
//! exercised against that definition in tests.

const NR: usize = 16; // column block, two 8-wide vectors
const MR: usize = 4; // row block

/// C[m,n] += A[m,k] * B[k,n]. Register-blocked; every C element accumulates
/// its k terms in ascending order, so the result is bit-stable and agrees
/// with the naive triple loop.
pub fn gemm_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    #[cfg(target_arch = "x86_64")]
    let use_avx512 = avx512_available();
    let mut bpack = vec![0.0; k * NR];
    let mut j0 = 0;
    while j0 < n {
        let jw = NR.min(n - j0);
        if jw == NR {
            for kk in 0..k {
                bpack[kk * NR..kk * NR + NR].copy_from_slice(&b[kk * n + j0..kk * n + j0 + NR]);
            }
            let mut i0 = 0;
            #[cfg(target_arch = "x86_64")]
            if use_avx512 {
                while i0 + 2 * MR <= m {
                    // SAFETY: avx512f presence checked above; index bounds
                    // hold by the loop conditions.
                    unsafe { simd::kernel_8x16_avx512(c, a, &bpack, k, n, i0, j0) };
                    i0 += 2 * MR;
                }
            }
            while i0 + MR <= m {
                kernel_mrxnr(c, a, &bpack, k, n, i0, j0);
                i0 += MR;
            }
            if i0 < m {
                edge_block(c, a, b, k, n, i0, m, j0, j0 + jw);
            }
        } else {
            edge_block(c, a, b, k, n, 0, m, j0, j0 + jw);
        }
        j0 += NR;
    }
}

#[cfg(target_arch = "x86_64")]
fn avx512_available() -> bool {
    use std::sync::OnceLock;
    static AVX512: OnceLock<bool> = OnceLock::new();
    *AVX512.get_or_init(|| {
        std::env::var_os("LAP_NO_SIMD").is_none() && is_x86_feature_detected!("avx512f")
    })
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use std::arch::x86_64::*;

    /// 8x16 FMA micro-kernel. Same ascending-k accumulation per C element
    /// as the scalar kernel; only the rounding of fused multiply-adds
    /// differs (well inside the 1e-12 fast-path tolerance).
    #[target_feature(enable = "avx512f")]
    pub unsafe fn kernel_8x16_avx512(
        c: &mut [f64],
        a: &[f64],
        bpack: &[f64],
        k: usize,
        n: usize,
        i0: usize,
        j0: usize,
    ) {
        let mut acc = [[_mm512_setzero_pd(); 2]; 8];
        let ap = a.as_ptr();
        let bp = bpack.as_ptr();
        for kk in 0..k {
            let b0 = _mm512_loadu_pd(bp.add(kk * 16));
            let b1 = _mm512_loadu_pd(bp.add(kk * 16 + 8));
            for (r, accr) in acc.iter_mut().enumerate() {
                let av = _mm512_set1_pd(*ap.add((i0 + r) * k + kk));
                accr[0] = _mm512_fmadd_pd(av, b0, accr[0]);
                accr[1] = _mm512_fmadd_pd(av, b1, accr[1]);
            }
        }
        let cp = c.as_mut_ptr();
        for (r, accr) in acc.iter().enumerate() {
            let base = cp.add((i0 + r) * n + j0);
            _mm512_storeu_pd(base, _mm512_add_pd(_mm512_loadu_pd(base), accr[0]));
            _mm512_storeu_pd(base.add(8), _mm512_add_pd(_mm512_loadu_pd(base.add(8)), accr[1]));
        }
    }
}

#[inline]
fn kernel_mrxnr(c: &mut [f64], a: &[f64], bpack: &[f64], k: usize, n: usize, i0: usize, j0: usize) {
    let mut acc = [[0.0f64; NR]; MR];
    for kk in 0..k {
        let brow: &[f64; NR] = bpack[kk * NR..kk * NR + NR].try_into().unwrap();
        for (r, accr) in acc.iter_mut().enumerate() {
            let av = a[(i0 + r) * k + kk];
            for j in 0..NR {
                accr[j] += av * brow[j];
            }
        }
    }
    for (r, accr) in acc.iter().enumerate() {
        let crow = &mut c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR];
        for j in 0..NR {
            crow[j] += accr[j];
        }
    }
}

#[inline]
fn edge_block(
    c: &mut [f64],
    a: &[f64],
    b: &[f64],
    k: usize,
    n: usize,
    i_lo: usize,
    i_hi: usize,
    j_lo: usize,
    j_hi: usize,
) {
    for i in i_lo..i_hi {
        for j in j_lo..j_hi {
            let mut s = 0.0;
            for kk in 0..k {
                s += a[i * k + kk] * b[kk * n + j];
            }
            c[i * n + j] += s;
        }
    }
}

/// C[m,n] = A[m,k] * B[k,n].
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_acc(&mut c, a, b, m, k, n);
    c
}

/// B[c,r] = A[r,c] transposed.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// y[i] += alpha * x[i]
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Output spatial size of a convolution: floor((input + 2p - k) / stride) + 1,
/// or None when the kernel does not fit the padded input.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Direct cross-correlation. x: [B,C,H,W], w: [F,C,KH,KW] -> y: [B,F,OH,OW].
///
/// Zero padding; per-output accumulation order is (c, kh, kw).
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    w: &[f64],
    b: usize,
    c: usize,
    h: usize,
    wd: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; b * f * oh * ow];
    let x_im = h * wd;
    let y_im = oh * ow;
    for bi in 0..b {
        let xb = &x[bi * c * x_im..(bi + 1) * c * x_im];
        let yb = &mut y[bi * f * y_im..(bi + 1) * f * y_im];
        for fi in 0..f {
            let yf = &mut yb[fi * y_im..(fi + 1) * y_im];
            for ci in 0..c {
                let xc = &xb[ci * x_im..(ci + 1) * x_im];
                let wbase = ((fi * c) + ci) * kh * kw;
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let wv = w[wbase + khi * kw + kwi];
                        accumulate_shifted_rows(
                            yf, xc, wv, h, wd, oh, ow, stride, padding, khi, kwi,
                        );
                    }
                }
            }
        }
    }
    y
}

/// y[oh,ow] += wv * x[oh*s+khi-p, ow*s+kwi-p] over the valid index range.
#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate_shifted_rows(
    y: &mut [f64],
    x: &[f64],
    wv: f64,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
    khi: usize,
    kwi: usize,
) {
    // Valid output rows: 0 <= oh*s + khi - p < h
    let (oh_lo, oh_hi) = valid_range(oh, stride, khi, padding, h);
    let (ow_lo, ow_hi) = valid_range(ow, stride, kwi, padding, w);
    if oh_lo >= oh_hi || ow_lo >= ow_hi {
        return;
    }
    for o_r in oh_lo..oh_hi {
        let i_r = o_r * stride + khi - padding;
        let yrow = &mut y[o_r * ow + ow_lo..o_r * ow + ow_hi];
        if stride == 1 {
            let i_c0 = ow_lo + kwi - padding;
            let xrow = &x[i_r * w + i_c0..i_r * w + i_c0 + (ow_hi - ow_lo)];
            for (yv, &xv) in yrow.iter_mut().zip(xrow) {
                *yv += wv * xv;
            }
        } else {
            for (j, yv) in yrow.iter_mut().enumerate() {
                let i_c = (ow_lo + j) * stride + kwi - padding;
                *yv += wv * x[i_r * w + i_c];
            }
        }
    }
}

/// Output index range [lo, hi) for which `o*stride + k - p` lands in [0, dim).
#[inline]
fn valid_range(out_dim: usize, stride: usize, k: usize, padding: usize, dim: usize) -> (usize, usize) {
    // o*stride + k - p >= 0  =>  o >= ceil((p - k) / stride)
    let lo = if k >= padding {
        0
    } else {
        (padding - k).div_ceil(stride)
    };
    // o*stride + k - p < dim  =>  o <= floor((dim - 1 + p - k) / stride)
    let hi = if dim + padding > k {
        ((dim + padding - k - 1) / stride + 1).min(out_dim)
    } else {
        0
    };
    (lo.min(out_dim), hi)
}

/// Gradient w.r.t. the convolution input.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_input(
    dy: &[f64],
    w: &[f64],
    b: usize,
    c: usize,
    h: usize,
    wd: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; b * c * h * wd];
    let x_im = h * wd;
    let y_im = oh * ow;
    for bi in 0..b {
        let dyb = &dy[bi * f * y_im..(bi + 1) * f * y_im];
        let dxb = &mut dx[bi * c * x_im..(bi + 1) * c * x_im];
        for fi in 0..f {
            let dyf = &dyb[fi * y_im..(fi + 1) * y_im];
            for ci in 0..c {
                let dxc = &mut dxb[ci * x_im..(ci + 1) * x_im];
                let wbase = ((fi * c) + ci) * kh * kw;
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let wv = w[wbase + khi * kw + kwi];
                        scatter_shifted_rows(
                            dxc, dyf, wv, h, wd, oh, ow, stride, padding, khi, kwi,
                        );
                    }
                }
            }
        }
    }
    dx
}

/// dx[oh*s+khi-p, ow*s+kwi-p] += wv * dy[oh,ow] over the valid range.
#[allow(clippy::too_many_arguments)]
#[inline]
fn scatter_shifted_rows(
    dx: &mut [f64],
    dy: &[f64],
    wv: f64,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
    khi: usize,
    kwi: usize,
) {
    let (oh_lo, oh_hi) = valid_range(oh, stride, khi, padding, h);
    let (ow_lo, ow_hi) = valid_range(ow, stride, kwi, padding, w);
    if oh_lo >= oh_hi || ow_lo >= ow_hi {
        return;
    }
    for o_r in oh_lo..oh_hi {
        let i_r = o_r * stride + khi - padding;
        let dyrow = &dy[o_r * ow + ow_lo..o_r * ow + ow_hi];
        if stride == 1 {
            let i_c0 = ow_lo + kwi - padding;
            let dxrow = &mut dx[i_r * w + i_c0..i_r * w + i_c0 + (ow_hi - ow_lo)];
            for (xv, &gv) in dxrow.iter_mut().zip(dyrow) {
                *xv += wv * gv;
            }
        } else {
            for (j, &gv) in dyrow.iter().enumerate() {
                let i_c = (ow_lo + j) * stride + kwi - padding;
                dx[i_r * w + i_c] += wv * gv;
            }
        }
    }
}

/// Gradient w.r.t. the convolution kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_kernel(
    dy: &[f64],
    x: &[f64],
    b: usize,
    c: usize,
    h: usize,
    wd: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut dw = vec![0.0; f * c * kh * kw];
    let x_im = h * wd;
    let y_im = oh * ow;
    for bi in 0..b {
        let xb = &x[bi * c * x_im..(bi + 1) * c * x_im];
        let dyb = &dy[bi * f * y_im..(bi + 1) * f * y_im];
        for fi in 0..f {
            let dyf = &dyb[fi * y_im..(fi + 1) * y_im];
            for ci in 0..c {
                let xc = &xb[ci * x_im..(ci + 1) * x_im];
                let wbase = ((fi * c) + ci) * kh * kw;
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let (oh_lo, oh_hi) = valid_range(oh, stride, khi, padding, h);
                        let (ow_lo, ow_hi) = valid_range(ow, stride, kwi, padding, wd);
                        if oh_lo >= oh_hi || ow_lo >= ow_hi {
                            continue;
                        }
                        let mut acc = 0.0;
                        for o_r in oh_lo..oh_hi {
                            let i_r = o_r * stride + khi - padding;
                            let dyrow = &dyf[o_r * ow + ow_lo..o_r * ow + ow_hi];
                            if stride == 1 {
                                let i_c0 = ow_lo + kwi - padding;
                                let xrow = &xc[i_r * wd + i_c0..i_r * wd + i_c0 + (ow_hi - ow_lo)];
                                let mut s0 = 0.0;
                                let mut s1 = 0.0;
                                let mut chunks = dyrow.chunks_exact(2).zip(xrow.chunks_exact(2));
                                for (g2, x2) in &mut chunks {
                                    s0 += g2[0] * x2[0];
                                    s1 += g2[1] * x2[1];
                                }
                                let rem = dyrow.len() & !1;
                                if rem < dyrow.len() {
                                    s0 += dyrow[rem] * xrow[rem];
                                }
                                acc += s0 + s1;
                            } else {
                                for (j, &gv) in dyrow.iter().enumerate() {
                                    let i_c = (ow_lo + j) * stride + kwi - padding;
                                    acc += gv * xc[i_r * wd + i_c];
                                }
                            }
                        }
                        dw[wbase + khi * kw + kwi] += acc;
                    }
                }
            }
        }
    }
    dw
}

/// Unrolls one sample's receptive fields into a [C*KH*KW, OH*OW] matrix
/// (zero-filled where the kernel overhangs the padding).
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f64],
) {
    debug_assert_eq!(x.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    cols.fill(0.0);
    let x_im = h * w;
    for ci in 0..c {
        let xc = &x[ci * x_im..(ci + 1) * x_im];
        for khi in 0..kh {
            for kwi in 0..kw {
                let row = ((ci * kh + khi) * kw + kwi) * oh * ow;
                let (oh_lo, oh_hi) = valid_range(oh, stride, khi, padding, h);
                let (ow_lo, ow_hi) = valid_range(ow, stride, kwi, padding, w);
                for o_r in oh_lo..oh_hi {
                    let i_r = o_r * stride + khi - padding;
                    let dst = &mut cols[row + o_r * ow + ow_lo..row + o_r * ow + ow_hi];
                    if stride == 1 {
                        let i_c0 = ow_lo + kwi - padding;
                        dst.copy_from_slice(&xc[i_r * w + i_c0..i_r * w + i_c0 + dst.len()]);
                    } else {
                        for (j, d) in dst.iter_mut().enumerate() {
                            *d = xc[i_r * w + (ow_lo + j) * stride + kwi - padding];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of a [C*KH*KW, OH*OW] gradient matrix back onto the image.
#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
) {
    let x_im = h * w;
    for ci in 0..c {
        let dxc = &mut dx[ci * x_im..(ci + 1) * x_im];
        for khi in 0..kh {
            for kwi in 0..kw {
                let row = ((ci * kh + khi) * kw + kwi) * oh * ow;
                let (oh_lo, oh_hi) = valid_range(oh, stride, khi, padding, h);
                let (ow_lo, ow_hi) = valid_range(ow, stride, kwi, padding, w);
                for o_r in oh_lo..oh_hi {
                    let i_r = o_r * stride + khi - padding;
                    let src = &cols[row + o_r * ow + ow_lo..row + o_r * ow + ow_hi];
                    if stride == 1 {
                        let i_c0 = ow_lo + kwi - padding;
                        let dst = &mut dxc[i_r * w + i_c0..i_r * w + i_c0 + src.len()];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    } else {
                        for (j, &s) in src.iter().enumerate() {
                            dxc[i_r * w + (ow_lo + j) * stride + kwi - padding] += s;
                        }
                    }
                }
            }
        }
    }
}

/// GEMM-backed convolution; numerically identical to [`conv2d`] (same
/// per-output accumulation order, plus exact zero terms for padding).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_fast(
    x: &[f64],
    w: &[f64],
    b: usize,
    c: usize,
    h: usize,
    wd: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ck = c * kh * kw;
    let pos = oh * ow;
    let mut y = vec![0.0; b * f * pos];
    let mut cols = vec![0.0; ck * pos];
    for bi in 0..b {
        im2col(
            &x[bi * c * h * wd..(bi + 1) * c * h * wd],
            c,
            h,
            wd,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
            &mut cols,
        );
        gemm_acc(&mut y[bi * f * pos..(bi + 1) * f * pos], w, &cols, f, ck, pos);
    }
    y
}

/// GEMM-backed gradient w.r.t. the convolution input.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_fast_backward_input(
    dy: &[f64],
    w: &[f64],
    b: usize,
    c: usize,
    h: usize,
    wd: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ck = c * kh * kw;
    let pos = oh * ow;
    let wt = transpose(w, f, ck);
    let mut dx = vec![0.0; b * c * h * wd];
    let mut dcols = vec![0.0; ck * pos];
    for bi in 0..b {
        dcols.fill(0.0);
        gemm_acc(
            &mut dcols,
            &wt,
            &dy[bi * f * pos..(bi + 1) * f * pos],
            ck,
            f,
            pos,
        );
        col2im_acc(
            &dcols,
            c,
            h,
            wd,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
            &mut dx[bi * c * h * wd..(bi + 1) * c * h * wd],
        );
    }
    dx
}

/// GEMM-backed gradient w.r.t. the convolution kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_fast_backward_kernel(
    dy: &[f64],
    x: &[f64],
    b: usize,
    c: usize,
    h: usize,
    wd: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ck = c * kh * kw;
    let pos = oh * ow;
    let mut dw = vec![0.0; f * ck];
    let mut cols = vec![0.0; ck * pos];
    for bi in 0..b {
        im2col(
            &x[bi * c * h * wd..(bi + 1) * c * h * wd],
            c,
            h,
            wd,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
            &mut cols,
        );
        let colst = transpose(&cols, ck, pos);
        gemm_acc(
            &mut dw,
            &dy[bi * f * pos..(bi + 1) * f * pos],
            &colst,
            f,
            pos,
            ck,
        );
    }
    dw
}

/// Mean over rows of per-row cross-entropy of softmax(logits) vs labels.
///
/// Numerically stabilized by max-subtraction; also returns the softmax
/// probabilities for the backward pass.
pub fn softmax_cross_entropy(logits: &[f64], n_classes: usize, labels: &[usize]) -> (f64, Vec<f64>) {
    let b = labels.len();
    debug_assert_eq!(logits.len(), b * n_classes);
    let mut probs = vec![0.0; b * n_classes];
    let mut total = 0.0;
    for (bi, &label) in labels.iter().enumerate() {
        let row = &logits[bi * n_classes..(bi + 1) * n_classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        total += lse - row[label];
        for (j, &v) in row.iter().enumerate() {
            probs[bi * n_classes + j] = (v - lse).exp();
        }
    }
    (total / b as f64, probs)
}
