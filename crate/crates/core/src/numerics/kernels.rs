// SPDX-License-Identifier: MIT OR Apache-2.0

//! Slice-level compute kernels shared by the inference path and the tape.
//!
//! Every reduction runs in a fixed left-to-right order. Matrix products are
//! written in `axpy` form (`out += x[i] * row_i`) so each output element is
//! accumulated over the inner index in ascending order while the loop over
//! output columns still vectorizes. A batched product is row-for-row
//! identical to the single-row product, which is what lets the sweep engine
//! reuse partial results without changing a single bit.

pub const LAYER_NORM_EPS: f32 = 1e-5;

/// `out = x · w` where `w` is `[x.len(), out.len()]` row-major.
#[inline]
pub fn vec_mat(x: &[f32], w: &[f32], out: &mut [f32]) {
    let n = out.len();
    debug_assert_eq!(w.len(), x.len() * n);
    out.fill(0.0);
    for (xi, row) in x.iter().zip(w.chunks_exact(n)) {
        for (o, &r) in out.iter_mut().zip(row) {
            *o += xi * r;
        }
    }
}

/// `out = x · w + b`.
#[inline]
pub fn vec_mat_bias(x: &[f32], w: &[f32], b: &[f32], out: &mut [f32]) {
    vec_mat(x, w, out);
    add_assign(out, b);
}

/// `[m,k] · [k,n] -> [m,n]`.
pub fn mat_mul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for (row, dst) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        vec_mat(row, b, dst);
    }
    out
}

/// `[m,k] · [n,k]ᵀ -> [m,n]` via sequential dot products.
pub fn mat_mul_t(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    for (row, dst) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (o, col) in dst.iter_mut().zip(b.chunks_exact(k)) {
            *o = dot(row, col);
        }
    }
    out
}

/// `[m,k]ᵀ · [m,n] -> [k,n]`, accumulated over `m` in ascending order.
pub fn mat_t_mul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    debug_assert_eq!(a.len(), m * k);
    let mut out = vec![0.0; k * n];
    for (arow, brow) in a.chunks_exact(k).zip(b.chunks_exact(n)) {
        for (&av, dst) in arow.iter().zip(out.chunks_exact_mut(n)) {
            for (o, &bv) in dst.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
pub fn add_assign(dst: &mut [f32], src: &[f32]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu_in_place(v: &mut [f32]) {
    for x in v {
        *x = gelu(*x);
    }
}

/// Row layer normalization. Returns `(mean, reciprocal std)`.
pub fn layer_norm_row(x: &[f32], gamma: &[f32], beta: &[f32], out: &mut [f32]) -> (f32, f32) {
    let n = x.len() as f32;
    let mut mean = 0.0f32;
    for &v in x {
        mean += v;
    }
    mean /= n;
    let mut var = 0.0f32;
    for &v in x {
        let c = v - mean;
        var += c * c;
    }
    var /= n;
    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = (x[i] - mean) * rstd * gamma[i] + beta[i];
    }
    (mean, rstd)
}

/// Numerically stable softmax of a slice, in place.
pub fn softmax_in_place(v: &mut [f32]) {
    let mut m = f32::NEG_INFINITY;
    for &x in v.iter() {
        m = m.max(x);
    }
    let mut s = 0.0f32;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Output side length of a convolution, if the kernel fits.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if k == 0 || stride == 0 || k > padded {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        c: usize,
        h: usize,
        w: usize,
        f: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        Some(Self {
            c,
            h,
            w,
            f,
            k,
            stride,
            pad,
            oh: conv_out_len(h, k, stride, pad)?,
            ow: conv_out_len(w, k, stride, pad)?,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Patch matrix `[oh*ow, c*k*k]`, zero where the window covers padding.
    pub fn im2col(&self, input: &[f32]) -> Vec<f32> {
        let pl = self.patch_len();
        let mut cols = vec![0.0; self.oh * self.ow * pl];
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let base = (oy * self.ow + ox) * pl;
                let mut i = 0;
                for ci in 0..self.c {
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w
                            {
                                cols[base + i] =
                                    input[(ci * self.h + iy as usize) * self.w + ix as usize];
                            }
                            i += 1;
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter-add a patch-matrix gradient back onto the input grid.
    pub fn col2im(&self, cols: &[f32], grad_in: &mut [f32]) {
        let pl = self.patch_len();
        for oy in 0..self.oh {
            for ox in 0..self.ow {
                let base = (oy * self.ow + ox) * pl;
                let mut i = 0;
                for ci in 0..self.c {
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w
                            {
                                grad_in[(ci * self.h + iy as usize) * self.w + ix as usize] +=
                                    cols[base + i];
                            }
                            i += 1;
                        }
                    }
                }
            }
        }
    }

    /// Kernels `[f, c, k, k]` transposed to `[c*k*k, f]`.
    pub fn kernel_matrix(&self, kernels: &[f32]) -> Vec<f32> {
        transpose(kernels, self.f, self.patch_len())
    }

    /// Forward convolution `[c,h,w] -> [f,oh,ow]`, no bias.
    ///
    /// Each output is accumulated over `(channel, ky, kx)` in ascending
    /// order, the same order as a direct nested loop.
    pub fn forward(&self, input: &[f32], kernels: &[f32]) -> Vec<f32> {
        let cols = self.im2col(input);
        let kmat = self.kernel_matrix(kernels);
        let n = self.oh * self.ow;
        let pos_major = mat_mul(&cols, &kmat, n, self.patch_len(), self.f);
        transpose(&pos_major, n, self.f)
    }
}
