// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tensor-level operations for callers that do not need gradients.

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{shape, usage, Error, Result};

/// Splits a shape around `axis` into `(outer, len, inner)`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Softmax along `axis`, with max-subtraction.
pub fn softmax(v: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= v.rank() {
        return Err(usage(format!(
            "softmax axis {axis} out of range for rank {}",
            v.rank()
        )));
    }
    v.ensure_finite("softmax input")?;
    let (outer, len, inner) = axis_split(v.shape(), axis);
    let src = v.data();
    let mut out = vec![0.0; src.len()];
    let mut buf = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = src[(o * len + j) * inner + i];
            }
            kernels::softmax_in_place(&mut buf);
            for (j, &b) in buf.iter().enumerate() {
                out[(o * len + j) * inner + i] = b;
            }
        }
    }
    Ok(Tensor::from_parts(v.shape().to_vec(), out))
}

pub(crate) fn conv_geom(input: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<ConvGeom> {
    if input.rank() != 3 || kernels.rank() != 4 {
        return Err(shape(format!(
            "conv2d expects [C,H,W] input and [F,C,k,k] kernels, got {:?} and {:?}",
            input.shape(),
            kernels.shape()
        )));
    }
    let (c, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let (f, kc, kh, kw) = (kernels.dim(0), kernels.dim(1), kernels.dim(2), kernels.dim(3));
    if kc != c || kh != kw {
        return Err(shape(format!(
            "kernel shape {:?} incompatible with input {:?}",
            kernels.shape(),
            input.shape()
        )));
    }
    if stride == 0 {
        return Err(shape("stride must be at least 1"));
    }
    ConvGeom::new(c, h, w, f, kh, stride, padding).ok_or_else(|| {
        shape(format!(
            "kernel {kh} larger than padded input {}x{} (padding {padding})",
            h + 2 * padding,
            w + 2 * padding
        ))
    })
}

/// 2-D cross-correlation `[C,H,W] * [F,C,k,k] -> [F,H',W']`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = conv_geom(input, kernels, stride, padding)?;
    let out = g.forward(input.data(), kernels.data());
    Ok(Tensor::from_parts(vec![g.f, g.oh, g.ow], out))
}

/// Matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0) {
        return Err(shape(format!(
            "matmul of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    Ok(Tensor::from_parts(
        vec![m, n],
        kernels::mat_mul(a.data(), b.data(), m, k, n),
    ))
}

/// Central-difference gradient of a scalar function.
///
/// Each coordinate is perturbed by `±eps` in `f32`; the quotient divides by
/// the perturbation actually realised after rounding, evaluated in `f64`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, eps: f32) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(usage("finite-difference eps must be positive"));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let x0 = x.data()[i];
        let hi = x0 + eps;
        let lo = x0 - eps;
        probe.data_mut()[i] = hi;
        let f_hi = f(&probe)?;
        probe.data_mut()[i] = lo;
        let f_lo = f(&probe)?;
        probe.data_mut()[i] = x0;
        let step = hi as f64 - lo as f64;
        let g = (f_hi - f_lo) / step;
        if !g.is_finite() {
            return Err(Error::NumericDomain(format!(
                "non-finite difference at coordinate {i}"
            )));
        }
        grad.push(g as f32);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), grad))
}

/// Largest coordinate error normalised by the largest reference magnitude.
pub fn max_relative_error(actual: &Tensor, reference: &Tensor) -> f64 {
    let scale = reference
        .data()
        .iter()
        .fold(0.0f64, |m, &v| m.max(v.abs() as f64))
        .max(1e-12);
    actual
        .data()
        .iter()
        .zip(reference.data())
        .fold(0.0f64, |m, (&a, &r)| m.max((a as f64 - r as f64).abs()))
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_uniform_and_single() {
        let s = softmax(&Tensor::zeros(&[3]), 0).unwrap();
        assert!(close(s.data(), &[1.0 / 3.0; 3], 1e-7));
        let one = softmax(&Tensor::scalar(42.0), 0).unwrap();
        assert_eq!(one.data(), &[1.0]);
    }

    #[test]
    fn softmax_analytic_exponentials() {
        let v = Tensor::vector(vec![0.0, 2f32.ln(), 4f32.ln()]);
        let s = softmax(&v, 0).unwrap();
        assert!(close(s.data(), &[1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0], 1e-6));
    }

    #[test]
    fn softmax_rejects_non_finite_and_bad_axis() {
        let v = Tensor::vector(vec![0.0, f32::NAN]);
        assert!(matches!(softmax(&v, 0), Err(Error::NumericDomain(_))));
        assert!(matches!(softmax(&v, 1), Err(Error::Usage(_))));
    }

    #[test]
    fn softmax_inner_axis() {
        // [2,3] along axis 0: each column is a 2-way softmax.
        let v = Tensor::new(vec![2, 3], vec![0.0, 0.0, 1.0, 0.0, 2f32.ln(), 1.0]).unwrap();
        let s = softmax(&v, 0).unwrap();
        assert!(close(
            s.data(),
            &[0.5, 1.0 / 3.0, 0.5, 0.5, 2.0 / 3.0, 0.5],
            1e-6
        ));
    }

    #[test]
    fn conv_scaling_kernel() {
        let input = Tensor::filled(&[1, 3, 3], 1.0);
        let k = Tensor::filled(&[1, 1, 1, 1], 2.0);
        let out = conv2d(&input, &k, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_identity_kernel_with_padding() {
        let input = Tensor::from_fn(&[1, 4, 5], |i| i as f32 * 0.37 - 2.0);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let out = conv2d(&input, &k, 1, 1).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_kernel_too_large() {
        let input = Tensor::zeros(&[1, 3, 3]);
        let k = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(matches!(conv2d(&input, &k, 1, 0), Err(Error::Shape(_))));
        assert!(conv2d(&input, &k, 1, 1).is_ok());
    }

    #[test]
    fn finite_diff_sum_and_quadratic() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let g = finite_diff_grad(
            |t| Ok(t.data().iter().map(|&v| v as f64).sum()),
            &x,
            1e-2,
        )
        .unwrap();
        assert!(close(g.data(), &[1.0; 3], 1e-6));

        let x = Tensor::scalar(1.0);
        let g = finite_diff_grad(
            |t| {
                let v = t.item() as f64;
                Ok(v * v)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!((g.item() - 2.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_rejects_bad_eps() {
        let x = Tensor::scalar(1.0);
        assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
    }
}
