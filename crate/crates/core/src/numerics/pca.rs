// SPDX-License-Identifier: MIT OR Apache-2.0

//! Principal components via cyclic Jacobi rotations on the sample covariance.

use super::tensor::Tensor;
use crate::error::{usage, Result};

const JACOBI_TOL: f64 = 1e-9;
const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Clone, Debug)]
pub struct Pca {
    /// `[k, D]`, rows orthonormal.
    pub components: Tensor,
    /// Fraction of total variance per component, nonincreasing.
    pub explained_variance_ratios: Vec<f32>,
    /// Per-feature mean removed before projection.
    pub mean: Vec<f32>,
    /// Set when the data has (numerically) zero variance.
    pub degenerate: bool,
}

impl Pca {
    /// Projects one `D`-vector onto the components.
    pub fn project(&self, x: &[f32]) -> Vec<f32> {
        let d = self.mean.len();
        self.components
            .data()
            .chunks_exact(d)
            .map(|c| {
                let mut s = 0.0f64;
                for i in 0..d {
                    s += (x[i] - self.mean[i]) as f64 * c[i] as f64;
                }
                s as f32
            })
            .collect()
    }
}

/// Top-`k` principal components of the rows of `samples: [N, D]`.
///
/// Zero-variance input is not an error: it yields zero ratios, the first `k`
/// standard basis vectors and `degenerate = true`.
pub fn pca_top_k(samples: &Tensor, k: usize) -> Result<Pca> {
    if samples.rank() != 2 {
        return Err(usage("pca expects [N, D] samples"));
    }
    let (n, d) = (samples.dim(0), samples.dim(1));
    if n < 2 {
        return Err(usage("pca needs at least two samples"));
    }
    if k == 0 || k > n.min(d) {
        return Err(usage(format!("k={k} must be in 1..={}", n.min(d))));
    }
    let x = samples.data();
    let mut mean = vec![0.0f64; d];
    for row in x.chunks_exact(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0f64; d * d];
    for row in x.chunks_exact(d) {
        for i in 0..d {
            let ci = row[i] as f64 - mean[i];
            for j in i..d {
                cov[i * d + j] += ci * (row[j] as f64 - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    let total: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let mean32: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
    if !(total > 1e-12) {
        let comps = Tensor::from_fn(&[k, d], |i| if i % d == i / d { 1.0 } else { 0.0 });
        return Ok(Pca {
            components: comps,
            explained_variance_ratios: vec![0.0; k],
            mean: mean32,
            degenerate: true,
        });
    }

    let (values, vectors) = jacobi_eigen(cov, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));

    let mut comps = Vec::with_capacity(k * d);
    let mut ratios = Vec::with_capacity(k);
    for &col in order.iter().take(k) {
        let mut v: Vec<f64> = (0..d).map(|r| vectors[r * d + col]).collect();
        let pivot = v
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.abs() > v[best].abs() { i } else { best });
        if v[pivot] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        comps.extend(v.iter().map(|&x| x as f32));
        ratios.push((values[col].max(0.0) / total).clamp(0.0, 1.0) as f32);
    }
    Ok(Pca {
        components: Tensor::from_parts(vec![k, d], comps),
        explained_variance_ratios: ratios,
        mean: mean32,
        degenerate: false,
    })
}

/// Eigen-decomposition of a symmetric `d×d` matrix. Returns eigenvalues and a
/// row-major matrix whose columns are the eigenvectors.
fn jacobi_eigen(mut a: Vec<f64>, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0f64; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = (0..d).map(|i| a[i * d + i].abs()).sum::<f64>().max(1.0);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * d + j] * a[i * d + j])
            .sum::<f64>()
            .sqrt();
        if off < JACOBI_TOL * scale {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..d).map(|i| a[i * d + i]).collect(), v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gram_error(c: &Tensor) -> f32 {
        let (k, d) = (c.dim(0), c.dim(1));
        let mut worst = 0.0f32;
        for i in 0..k {
            for j in 0..k {
                let dot: f32 = (0..d).map(|t| c.at(&[i, t]) * c.at(&[j, t])).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        worst
    }

    #[test]
    fn rank_one_line() {
        let s = Tensor::new(vec![4, 2], vec![1.0, 2.0, -1.0, -2.0, 3.0, 6.0, -0.5, -1.0]).unwrap();
        let p = pca_top_k(&s, 1).unwrap();
        assert!((p.explained_variance_ratios[0] - 1.0).abs() < 1e-6);
        let c = p.components.data();
        let norm = 5f32.sqrt();
        assert!((c[0] - 1.0 / norm).abs() < 1e-5 && (c[1] - 2.0 / norm).abs() < 1e-5);
    }

    #[test]
    fn isotropic_square() {
        let s = Tensor::new(vec![4, 2], vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]).unwrap();
        let p = pca_top_k(&s, 2).unwrap();
        for r in &p.explained_variance_ratios {
            assert!((r - 0.5).abs() < 1e-6);
        }
        assert!(gram_error(&p.components) < 1e-5);
    }

    #[test]
    fn zero_variance_is_flagged() {
        let s = Tensor::filled(&[5, 3], 2.5);
        let p = pca_top_k(&s, 2).unwrap();
        assert!(p.degenerate);
        assert_eq!(p.explained_variance_ratios, vec![0.0, 0.0]);
        assert!(gram_error(&p.components) < 1e-6);
    }

    #[test]
    fn rejects_bad_k() {
        let s = Tensor::zeros(&[3, 2]);
        assert!(pca_top_k(&s, 3).is_err());
        assert!(pca_top_k(&Tensor::zeros(&[1, 2]), 1).is_err());
    }
}
