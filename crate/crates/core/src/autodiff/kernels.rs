//! Raw forward/backward kernels over contiguous channels-last buffers.
//!
//! Nothing here records anything; the tape calls these and owns the buffers.

use crate::scalar::Scalar;

/// Geometry of a channels-last 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub k: usize,
    pub c_out: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    fn col_width(&self) -> usize {
        self.k * self.k * self.c_in
    }
    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds one image into rows of `k·k·c_in` patch values ordered (ky, kx, c),
/// matching the kernel's `[k, k, c_in, c_out]` layout.
fn im2col<T: Scalar>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let cw = g.col_width();
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let row = &mut cols[(oy * g.w_out + ox) * cw..][..cw];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    let dst = &mut row[(ky * g.k + kx) * g.c_in..][..g.c_in];
                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                        dst.fill(T::zero());
                    } else {
                        let src = (iy as usize * g.w + ix as usize) * g.c_in;
                        dst.copy_from_slice(&img[src..src + g.c_in]);
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let cw = g.col_width();
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            let row = &cols[(oy * g.w_out + ox) * cw..][..cw];
            for ky in 0..g.k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = &row[(ky * g.k + kx) * g.c_in..][..g.c_in];
                    let dst = &mut img[(iy as usize * g.w + ix as usize) * g.c_in..][..g.c_in];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], kernel: &[T], out: &mut [T]) {
    let cw = g.col_width();
    let p = g.positions();
    let mut cols = vec![T::zero(); p * cw];
    for b in 0..g.batch {
        im2col(g, &x[b * g.h * g.w * g.c_in..][..g.h * g.w * g.c_in], &mut cols);
        let o = &mut out[b * p * g.c_out..][..p * g.c_out];
        T::gemm(
            p,
            cw,
            g.c_out,
            &cols,
            cw as isize,
            1,
            kernel,
            g.c_out as isize,
            1,
            T::zero(),
            o,
        );
    }
}

/// Accumulates input and kernel gradients for [`conv2d_forward`].
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    kernel: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dkernel: Option<&mut [T]>,
) {
    let cw = g.col_width();
    let p = g.positions();
    let img_len = g.h * g.w * g.c_in;
    let mut cols = vec![T::zero(); p * cw];
    for b in 0..g.batch {
        let dout_b = &dout[b * p * g.c_out..][..p * g.c_out];
        if let Some(dk) = dkernel.as_deref_mut() {
            im2col(g, &x[b * img_len..][..img_len], &mut cols);
            // dK += cols^T · dout
            T::gemm(
                cw,
                p,
                g.c_out,
                &cols,
                1,
                cw as isize,
                dout_b,
                g.c_out as isize,
                1,
                T::one(),
                dk,
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dcols = dout · K^T
            T::gemm(
                p,
                g.c_out,
                cw,
                dout_b,
                g.c_out as isize,
                1,
                kernel,
                1,
                g.c_out as isize,
                T::zero(),
                &mut cols,
            );
            col2im_add(g, &cols, &mut dx[b * img_len..][..img_len]);
        }
    }
}

/// Reorders a `[s, s, c_in, c_out]` kernel into a `[c_in, s·s·c_out]` matrix.
fn pack_transpose_kernel<T: Scalar>(kernel: &[T], s: usize, c_in: usize, c_out: usize) -> Vec<T> {
    let mut packed = vec![T::zero(); kernel.len()];
    for dy in 0..s {
        for dx in 0..s {
            for ci in 0..c_in {
                for co in 0..c_out {
                    packed[ci * s * s * c_out + (dy * s + dx) * c_out + co] =
                        kernel[((dy * s + dx) * c_in + ci) * c_out + co];
                }
            }
        }
    }
    packed
}

/// Transposed convolution with kernel size equal to stride: every input pixel
/// writes one disjoint `s×s` output block.
pub fn conv_transpose2d_forward<T: Scalar>(
    (b, h, w, c_in): (usize, usize, usize, usize),
    s: usize,
    c_out: usize,
    x: &[T],
    kernel: &[T],
    out: &mut [T],
) {
    let packed = pack_transpose_kernel(kernel, s, c_in, c_out);
    let rows = b * h * w;
    let block = s * s * c_out;
    let mut y = vec![T::zero(); rows * block];
    T::gemm(
        rows,
        c_in,
        block,
        x,
        c_in as isize,
        1,
        &packed,
        block as isize,
        1,
        T::zero(),
        &mut y,
    );
    let (ho, wo) = (h * s, w * s);
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let src = &y[((bi * h + i) * w + j) * block..][..block];
                for dy in 0..s {
                    for dx in 0..s {
                        let dst = ((bi * ho + i * s + dy) * wo + j * s + dx) * c_out;
                        out[dst..dst + c_out].copy_from_slice(&src[(dy * s + dx) * c_out..][..c_out]);
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<T: Scalar>(
    (b, h, w, c_in): (usize, usize, usize, usize),
    s: usize,
    c_out: usize,
    x: &[T],
    kernel: &[T],
    dout: &[T],
    dx: Option<&mut [T]>,
    dkernel: Option<&mut [T]>,
) {
    let rows = b * h * w;
    let block = s * s * c_out;
    let (ho, wo) = (h * s, w * s);
    let mut dy_mat = vec![T::zero(); rows * block];
    for bi in 0..b {
        for i in 0..h {
            for j in 0..w {
                let dst = &mut dy_mat[((bi * h + i) * w + j) * block..][..block];
                for dy in 0..s {
                    for dx_ in 0..s {
                        let src = ((bi * ho + i * s + dy) * wo + j * s + dx_) * c_out;
                        dst[(dy * s + dx_) * c_out..][..c_out].copy_from_slice(&dout[src..src + c_out]);
                    }
                }
            }
        }
    }
    if let Some(dx) = dx {
        let packed = pack_transpose_kernel(kernel, s, c_in, c_out);
        T::gemm(
            rows,
            block,
            c_in,
            &dy_mat,
            block as isize,
            1,
            &packed,
            1,
            block as isize,
            T::one(),
            dx,
        );
    }
    if let Some(dk) = dkernel {
        let mut dpacked = vec![T::zero(); c_in * block];
        T::gemm(
            c_in,
            rows,
            block,
            x,
            1,
            c_in as isize,
            &dy_mat,
            block as isize,
            1,
            T::zero(),
            &mut dpacked,
        );
        for dy in 0..s {
            for dx_ in 0..s {
                for ci in 0..c_in {
                    for co in 0..c_out {
                        dk[((dy * s + dx_) * c_in + ci) * c_out + co] +=
                            dpacked[ci * block + (dy * s + dx_) * c_out + co];
                    }
                }
            }
        }
    }
}

/// Interpolation taps along one axis for align-corners-false resizing:
/// `(lower index, upper index, upper weight)` per output coordinate.
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

pub fn bilinear_forward<T: Scalar>(
    (b, h, w, c): (usize, usize, usize, usize),
    (oh, ow): (usize, usize),
    x: &[T],
    out: &mut [T],
) {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    for bi in 0..b {
        let img = &x[bi * h * w * c..][..h * w * c];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let weights = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x1, (1.0 - fy) * fx),
                    (y1, x0, fy * (1.0 - fx)),
                    (y1, x1, fy * fx),
                ];
                let dst = &mut out[((bi * oh + i) * ow + j) * c..][..c];
                dst.fill(T::zero());
                for (yy, xx, wt) in weights {
                    let wt = T::from_f64_lossy(wt);
                    let src = &img[(yy * w + xx) * c..][..c];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wt * *s;
                    }
                }
            }
        }
    }
}

pub fn bilinear_backward<T: Scalar>(
    (b, h, w, c): (usize, usize, usize, usize),
    (oh, ow): (usize, usize),
    dout: &[T],
    dx: &mut [T],
) {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    for bi in 0..b {
        let img = &mut dx[bi * h * w * c..][..h * w * c];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let src = &dout[((bi * oh + i) * ow + j) * c..][..c];
                let weights = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x1, (1.0 - fy) * fx),
                    (y1, x0, fy * (1.0 - fx)),
                    (y1, x1, fy * fx),
                ];
                for (yy, xx, wt) in weights {
                    let wt = T::from_f64_lossy(wt);
                    let dst = &mut img[(yy * w + xx) * c..][..c];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wt * *s;
                    }
                }
            }
        }
    }
}

/// 2×2 stride-2 max pooling; returns the flat input index of each maximum
/// (first occurrence wins on ties).
pub fn max_pool2_forward<T: Scalar>((b, h, w, c): (usize, usize, usize, usize), x: &[T], out: &mut [T]) -> Vec<usize> {
    let (oh, ow) = (h / 2, w / 2);
    let mut arg = vec![0usize; b * oh * ow * c];
    for bi in 0..b {
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let mut best = usize::MAX;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let idx = ((bi * h + 2 * i + dy) * w + 2 * j + dx) * c + ch;
                        if best == usize::MAX || x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    let o = ((bi * oh + i) * ow + j) * c + ch;
                    out[o] = x[best];
                    arg[o] = best;
                }
            }
        }
    }
    arg
}

/// Permuted copy: output axis `i` is input axis `axes[i]`.
pub fn permute<T: Scalar>(shape: &[usize], axes: &[usize], x: &[T]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..x.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(x[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf<T: Scalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    half * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn normal_pdf<T: Scalar>(x: T) -> T {
    let inv_sqrt_2pi = T::from_f64_lossy(0.398_942_280_401_432_7);
    inv_sqrt_2pi * (-(x * x) * T::from_f64_lossy(0.5)).exp()
}
