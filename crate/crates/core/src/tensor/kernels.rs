//! Numeric kernels backing the layer set.
//!
//! Everything is generic over [`Real`] so the same code runs the fast `f32`
//! training path and the `f64` instantiation used by finite-difference
//! gradient checks. Convolution is expressed as im2col plus a small set of
//! row-major GEMM loops; the `ikj` loop order keeps the inner loop contiguous
//! in both operands, which the autovectorizer handles well.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Scalar type the engine can run on. Implemented by `f32` and `f64`.
pub trait Real: Float + NumAssign + FromPrimitive + Send + Sync + Debug + 'static {
    fn from_usize_(v: usize) -> Self {
        Self::from_usize(v).expect("usize fits in Real")
    }
    fn from_f64_(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to Real")
    }
    fn to_f64_(self) -> f64;
}

impl Real for f32 {
    fn to_f64_(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn to_f64_(self) -> f64 {
        self
    }
}

/// `C[m x n] += A[m x k] · B[k x n]`, all row-major.
pub fn gemm_nn<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
}

/// `C[m x n] += A[m x k] · B[n x k]ᵀ` (dot products of rows).
///
/// The reduction runs in eight independent lanes so the compiler can keep it
/// in vector registers; the lane partials are combined in a fixed order, so
/// results stay deterministic (though not bit-equal to a naive left fold).
pub fn gemm_nt<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    const LANES: usize = 8;
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut lanes = [F::zero(); LANES];
            let mut a_chunks = arow.chunks_exact(LANES);
            let mut b_chunks = brow.chunks_exact(LANES);
            for (ca, cb) in (&mut a_chunks).zip(&mut b_chunks) {
                for l in 0..LANES {
                    lanes[l] += ca[l] * cb[l];
                }
            }
            let mut acc = F::zero();
            for &lane in &lanes {
                acc += lane;
            }
            for (&av, &bv) in a_chunks.remainder().iter().zip(b_chunks.remainder()) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// `C[m x n] += A[k x m]ᵀ · B[k x n]`.
pub fn gemm_tn<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
}

/// Spatial output size of a convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Unfold one sample `x (C,H,W)` into `cols ((C·K·K) x (OH·OW))` with zero
/// padding. Row `c·K·K + ky·K + kx` holds the input value under kernel tap
/// `(ky, kx)` of channel `c` for every output position.
#[allow(clippy::too_many_arguments)]
pub fn im2col<F: Real>(
    x: &[F],
    c_in: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    cols: &mut [F],
) {
    let oh = conv_out_len(h, kernel, stride, padding).expect("validated shape");
    let ow = conv_out_len(w, kernel, stride, padding).expect("validated shape");
    debug_assert_eq!(cols.len(), c_in * kernel * kernel * oh * ow);
    let out_hw = oh * ow;
    for c in 0..c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = &mut cols[(c * kernel * kernel + ky * kernel + kx) * out_hw
                    ..(c * kernel * kernel + ky * kernel + kx + 1) * out_hw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        for v in dst.iter_mut() {
                            *v = F::zero();
                        }
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            F::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold `cols` gradients back onto the input layout (scatter-add); the exact
/// adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im<F: Real>(
    cols: &[F],
    c_in: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dx: &mut [F],
) {
    let oh = conv_out_len(h, kernel, stride, padding).expect("validated shape");
    let ow = conv_out_len(w, kernel, stride, padding).expect("validated shape");
    let out_hw = oh * ow;
    for c in 0..c_in {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = &cols[(c * kernel * kernel + ky * kernel + kx) * out_hw
                    ..(c * kernel * kernel + ky * kernel + kx + 1) * out_hw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &row[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// 2x2 max pooling with stride 2 on one sample-channel plane, recording the
/// flat input index of each winner. Ties go to the first element in
/// (top-left, top-right, bottom-left, bottom-right) scan order.
pub fn maxpool2_plane<F: Real>(x: &[F], h: usize, w: usize, out: &mut [F], argmax: &mut [usize]) {
    let oh = h / 2;
    let ow = w / 2;
    debug_assert_eq!(out.len(), oh * ow);
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * 2) * w + ox * 2;
            let candidates = [base, base + 1, base + w, base + w + 1];
            let mut best = candidates[0];
            let mut best_v = x[best];
            for &idx in &candidates[1..] {
                if x[idx] > best_v {
                    best_v = x[idx];
                    best = idx;
                }
            }
            out[oy * ow + ox] = best_v;
            argmax[oy * ow + ox] = best;
        }
    }
}

/// Bilinear upsampling of one channel plane by an integer factor, sampling at
/// pixel centers (`src = (dst + 0.5)/f - 0.5`, clamped to the frame).
pub fn upsample_plane<F: Real>(x: &[F], h: usize, w: usize, factor: usize, out: &mut [F]) {
    let (oh, ow) = (h * factor, w * factor);
    debug_assert_eq!(out.len(), oh * ow);
    let f = factor as f64;
    for oy in 0..oh {
        let sy = ((oy as f64 + 0.5) / f - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = F::from_f64_(sy - y0 as f64);
        for ox in 0..ow {
            let sx = ((ox as f64 + 0.5) / f - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = F::from_f64_(sx - x0 as f64);
            let one = F::one();
            let top = x[y0 * w + x0] * (one - wx) + x[y0 * w + x1] * wx;
            let bot = x[y1 * w + x0] * (one - wx) + x[y1 * w + x1] * wx;
            out[oy * ow + ox] = top * (one - wy) + bot * wy;
        }
    }
}

/// Adjoint of [`upsample_plane`]: scatter output gradients back through the
/// same interpolation weights.
pub fn upsample_plane_backward<F: Real>(
    dy: &[F],
    h: usize,
    w: usize,
    factor: usize,
    dx: &mut [F],
) {
    let (oh, ow) = (h * factor, w * factor);
    debug_assert_eq!(dy.len(), oh * ow);
    let f = factor as f64;
    for oy in 0..oh {
        let sy = ((oy as f64 + 0.5) / f - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = F::from_f64_(sy - y0 as f64);
        for ox in 0..ow {
            let sx = ((ox as f64 + 0.5) / f - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = F::from_f64_(sx - x0 as f64);
            let one = F::one();
            let g = dy[oy * ow + ox];
            dx[y0 * w + x0] += g * (one - wx) * (one - wy);
            dx[y0 * w + x1] += g * wx * (one - wy);
            dx[y1 * w + x0] += g * (one - wx) * wy;
            dx[y1 * w + x1] += g * wx * wy;
        }
    }
}

/// Numerically safe logistic function.
pub fn sigmoid_scalar<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Row-wise softmax on an `(rows x cols)` matrix, max-subtracted for safety.
pub fn softmax_rows<F: Real>(data: &mut [F], rows: usize, cols: usize) {
    debug_assert_eq!(data.len(), rows * cols);
    for r in 0..rows {
        let row = &mut data[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}
