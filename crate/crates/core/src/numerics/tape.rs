// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode differentiation over a fixed primitive set.
//!
//! A [`GradTape`] records operations in execution order, so the node list is
//! already topologically sorted; [`GradTape::backward`] walks it once in
//! reverse. Values are computed eagerly with the same kernels the inference
//! path uses.

use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom};
use super::ops::{axis_split, conv_geom};
use super::tensor::Tensor;
use crate::error::{shape, usage, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(f32, f32)>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    RowSoftmax {
        x: Var,
        ranges: Vec<(usize, usize)>,
    },
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    AddChannelBias(Var, Var),
    Gather {
        src: Var,
        idx: Vec<Option<usize>>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Select(Var, usize),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        scale: f32,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed primitives.
pub struct GradTape {
    id: u64,
    nodes: Vec<Node>,
}

/// Gradients produced by [`GradTape::backward`].
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros if `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf (parameter or input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx].value
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            Err(usage("variable does not belong to this tape"))
        } else {
            Ok(())
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { tape: self.id, idx }
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.idx].needs_grad)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx].value
    }

    fn rows_cols(&self, v: Var) -> Result<(usize, usize)> {
        let t = self.val(v);
        if t.rank() != 2 {
            return Err(shape(format!("expected rank-2 tensor, got {:?}", t.shape())));
        }
        Ok((t.dim(0), t.dim(1)))
    }

    // -----------------------------------------------------------------------
    // Primitives
    // -----------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (m, k) = self.rows_cols(a)?;
        let (k2, n) = self.rows_cols(b)?;
        if k != k2 {
            return Err(shape(format!("matmul inner dims {k} vs {k2}")));
        }
        let out = kernels::mat_mul(self.val(a).data(), self.val(b).data(), m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (m, k) = self.rows_cols(a)?;
        let (n, k2) = self.rows_cols(b)?;
        if k != k2 {
            return Err(shape(format!("matmul_t inner dims {k} vs {k2}")));
        }
        let out = kernels::mat_mul_t(self.val(a).data(), self.val(b).data(), m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulT(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        if self.val(a).shape() != self.val(b).shape() {
            return Err(shape("add: shape mismatch"));
        }
        let mut out = self.val(a).clone();
        kernels::add_assign(out.data_mut(), self.val(b).data());
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// Broadcast-add a row vector `[n]` to every row of `[m,n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check(a)?;
        self.check(row)?;
        let (_, n) = self.rows_cols(a)?;
        if self.val(row).len() != n {
            return Err(shape("add_row: width mismatch"));
        }
        let mut out = self.val(a).clone();
        let r = self.val(row).data().to_vec();
        for dst in out.data_mut().chunks_exact_mut(n) {
            kernels::add_assign(dst, &r);
        }
        let ng = self.ng(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        if self.val(a).shape() != self.val(b).shape() {
            return Err(shape("mul: shape mismatch"));
        }
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::from_parts(self.val(a).shape().to_vec(), data);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        self.check(a)?;
        let out = self.val(a).map(|v| v * s);
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Scale(a, s), ng))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.val(a).map(kernels::gelu);
        let ng = self.ng(&[a]);
        Ok(self.push(out, Op::Gelu(a), ng))
    }

    /// Row-wise layer normalization of `[m,n]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let (m, n) = self.rows_cols(x)?;
        if self.val(gamma).len() != n || self.val(beta).len() != n {
            return Err(shape("layer_norm: parameter width mismatch"));
        }
        let mut out = vec![0.0; m * n];
        let mut stats = Vec::with_capacity(m);
        {
            let (xs, g, b) = (self.val(x).data(), self.val(gamma).data(), self.val(beta).data());
            for (row, dst) in xs.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
                stats.push(kernels::layer_norm_row(row, g, b, dst));
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            ng,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let out = super::ops::softmax(self.val(x), axis)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, ng))
    }

    /// Row softmax of `[m,n]` restricted to columns `ranges[r].0..ranges[r].1`;
    /// all other entries are exactly zero.
    pub fn row_softmax(&mut self, x: Var, ranges: Vec<(usize, usize)>) -> Result<Var> {
        self.check(x)?;
        let (m, n) = self.rows_cols(x)?;
        if ranges.len() != m || ranges.iter().any(|&(a, b)| a >= b || b > n) {
            return Err(shape("row_softmax: invalid ranges"));
        }
        self.val(x).ensure_finite("softmax input")?;
        let mut out = vec![0.0; m * n];
        for (r, &(a, b)) in ranges.iter().enumerate() {
            let dst = &mut out[r * n + a..r * n + b];
            dst.copy_from_slice(&self.val(x).data()[r * n + a..r * n + b]);
            kernels::softmax_in_place(dst);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::RowSoftmax { x, ranges },
            ng,
        ))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        self.check(x)?;
        self.check(k)?;
        let geom = conv_geom(self.val(x), self.val(k), stride, padding)?;
        let out = geom.forward(self.val(x).data(), self.val(k).data());
        let ng = self.ng(&[x, k]);
        Ok(self.push(
            Tensor::from_parts(vec![geom.f, geom.oh, geom.ow], out),
            Op::Conv2d { x, k, geom },
            ng,
        ))
    }

    /// `[C,H,W] + bias[C]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let t = self.val(x);
        if t.rank() != 3 || self.val(bias).len() != t.dim(0) {
            return Err(shape("add_channel_bias: shape mismatch"));
        }
        let plane = t.dim(1) * t.dim(2);
        let mut out = t.clone();
        let b = self.val(bias).data().to_vec();
        for (c, dst) in out.data_mut().chunks_exact_mut(plane).enumerate() {
            for v in dst {
                *v += b[c];
            }
        }
        let ng = self.ng(&[x, bias]);
        Ok(self.push(out, Op::AddChannelBias(x, bias), ng))
    }

    /// Embedding-style lookup: `out[i] = src.flat[idx[i]]`, or zero for `None`.
    pub fn gather(&mut self, src: Var, idx: Vec<Option<usize>>, out_shape: &[usize]) -> Result<Var> {
        self.check(src)?;
        let n = self.val(src).len();
        if idx.iter().flatten().any(|&i| i >= n) {
            return Err(usage("gather index out of range"));
        }
        let data: Vec<f32> = {
            let s = self.val(src).data();
            idx.iter().map(|i| i.map_or(0.0, |i| s[i])).collect()
        };
        let out = Tensor::new(out_shape.to_vec(), data)?;
        let ng = self.ng(&[src]);
        Ok(self.push(out, Op::Gather { src, idx }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let (m, n) = self.rows_cols(x)?;
        if len == 0 || start + len > n {
            return Err(shape("slice_cols out of range"));
        }
        let mut out = Vec::with_capacity(m * len);
        for row in self.val(x).data().chunks_exact(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![m, len], out),
            Op::SliceCols { x, start },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        for &p in parts {
            self.check(p)?;
        }
        let Some(&first) = parts.first() else {
            return Err(shape("concat of nothing"));
        };
        let (m, _) = self.rows_cols(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mm, w) = self.rows_cols(p)?;
            if mm != m {
                return Err(shape("concat_cols: row mismatch"));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.val(p).data()[r * w..(r + 1) * w]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(
            Tensor::from_parts(vec![m, total], out),
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    /// Stack tensors along a new leading row axis; each part is flattened.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        for &p in parts {
            self.check(p)?;
        }
        let Some(&first) = parts.first() else {
            return Err(shape("concat of nothing"));
        };
        let w = self.val(first).len();
        let mut out = Vec::with_capacity(w * parts.len());
        for &p in parts {
            if self.val(p).len() != w {
                return Err(shape("concat_rows: width mismatch"));
            }
            out.extend_from_slice(self.val(p).data());
        }
        let ng = self.ng(parts);
        Ok(self.push(
            Tensor::from_parts(vec![parts.len(), w], out),
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, new_shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let out = self.val(x).clone().reshape(new_shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let mut s = 0.0f32;
        for &v in self.val(x).data() {
            s += v;
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), ng))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.val(x).len() as f32;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Scalar at a flat index.
    pub fn select(&mut self, x: Var, flat: usize) -> Result<Var> {
        self.check(x)?;
        let Some(&v) = self.val(x).data().get(flat) else {
            return Err(usage("select index out of range"));
        };
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::scalar(v), Op::Select(x, flat), ng))
    }

    /// `scale · Σ_r −ln softmax(logits_r)[targets_r]` over rows of `[m,k]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>, scale: f32) -> Result<Var> {
        self.check(logits)?;
        let (m, k) = self.rows_cols(logits)?;
        if targets.len() != m || targets.iter().any(|&t| t >= k) {
            return Err(usage("cross_entropy: bad targets"));
        }
        let mut total = 0.0f32;
        let mut buf = vec![0.0; k];
        for (row, &t) in self.val(logits).data().chunks_exact(k).zip(&targets) {
            buf.copy_from_slice(row);
            let mx = buf.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let mut s = 0.0f32;
            for &v in &buf {
                s += (v - mx).exp();
            }
            total += mx + s.ln() - row[t];
        }
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(total * scale),
            Op::CrossEntropy {
                logits,
                targets,
                scale,
            },
            ng,
        ))
    }

    // -----------------------------------------------------------------------
    // Reverse pass
    // -----------------------------------------------------------------------

    /// Gradients of a scalar node with respect to every node feeding it.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        self.check(output)?;
        if self.val(output).len() != 1 {
            return Err(usage("backward needs a scalar output"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=output.idx).map(|_| None).collect();
        grads[output.idx] = Some(Tensor::filled(self.val(output).shape(), 1.0));

        for idx in (0..=output.idx).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.val(*a));
                let n = self.val(*b).dim(1);
                if self.wants(*a) {
                    let bt = kernels::transpose(self.val(*b).data(), k, n);
                    let ga = kernels::mat_mul(gd, &bt, m, n, k);
                    accumulate(grads, *a, &[m, k], ga);
                }
                if self.wants(*b) {
                    let gb = kernels::mat_t_mul(self.val(*a).data(), gd, m, k, n);
                    accumulate(grads, *b, &[k, n], gb);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = dims2(self.val(*a));
                let n = self.val(*b).dim(0);
                if self.wants(*a) {
                    let ga = kernels::mat_mul(gd, self.val(*b).data(), m, n, k);
                    accumulate(grads, *a, &[m, k], ga);
                }
                if self.wants(*b) {
                    let gb = kernels::mat_t_mul(gd, self.val(*a).data(), m, n, k);
                    accumulate(grads, *b, &[n, k], gb);
                }
            }
            Op::Add(a, b) => {
                let shape = g.shape().to_vec();
                if self.wants(*a) {
                    accumulate(grads, *a, &shape, gd.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, &shape, gd.to_vec());
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.shape(), gd.to_vec());
                }
                if self.wants(*row) {
                    let n = self.val(*row).len();
                    let mut gr = vec![0.0; n];
                    for r in gd.chunks_exact(n) {
                        kernels::add_assign(&mut gr, r);
                    }
                    accumulate(grads, *row, self.val(*row).shape(), gr);
                }
            }
            Op::Mul(a, b) => {
                let shape = g.shape().to_vec();
                if self.wants(*a) {
                    let v: Vec<f32> = gd.iter().zip(self.val(*b).data()).map(|(g, y)| g * y).collect();
                    accumulate(grads, *a, &shape, v);
                }
                if self.wants(*b) {
                    let v: Vec<f32> = gd.iter().zip(self.val(*a).data()).map(|(g, x)| g * x).collect();
                    accumulate(grads, *b, &shape, v);
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.shape(), gd.iter().map(|v| v * s).collect());
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let v = gd
                        .iter()
                        .zip(self.val(*a).data())
                        .map(|(g, &x)| g * kernels::gelu_grad(x))
                        .collect();
                    accumulate(grads, *a, g.shape(), v);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let (m, n) = dims2(self.val(*x));
                let xs = self.val(*x).data();
                let gam = self.val(*gamma).data();
                let mut gx = vec![0.0; m * n];
                let mut gg = vec![0.0; n];
                let mut gb = vec![0.0; n];
                let nf = n as f32;
                for r in 0..m {
                    let (mean, rstd) = stats[r];
                    let row = &xs[r * n..(r + 1) * n];
                    let gr = &gd[r * n..(r + 1) * n];
                    let mut sum_dy = 0.0f32;
                    let mut sum_dy_xhat = 0.0f32;
                    for i in 0..n {
                        let xhat = (row[i] - mean) * rstd;
                        let dy = gr[i] * gam[i];
                        sum_dy += dy;
                        sum_dy_xhat += dy * xhat;
                        gg[i] += gr[i] * xhat;
                        gb[i] += gr[i];
                    }
                    for i in 0..n {
                        let xhat = (row[i] - mean) * rstd;
                        let dy = gr[i] * gam[i];
                        gx[r * n + i] = rstd * (dy - sum_dy / nf - xhat * sum_dy_xhat / nf);
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, &[m, n], gx);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, self.val(*gamma).shape(), gg);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, self.val(*beta).shape(), gb);
                }
            }
            Op::Softmax { x, axis } => {
                if self.wants(*x) {
                    let p = node.value.data();
                    let (outer, len, inner) = axis_split(g.shape(), *axis);
                    let mut gx = vec![0.0; p.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let mut s = 0.0f32;
                            for j in 0..len {
                                s += gd[at(j)] * p[at(j)];
                            }
                            for j in 0..len {
                                gx[at(j)] = p[at(j)] * (gd[at(j)] - s);
                            }
                        }
                    }
                    accumulate(grads, *x, g.shape(), gx);
                }
            }
            Op::RowSoftmax { x, ranges } => {
                if self.wants(*x) {
                    let n = g.dim(1);
                    let p = node.value.data();
                    let mut gx = vec![0.0; p.len()];
                    for (r, &(a, b)) in ranges.iter().enumerate() {
                        let base = r * n;
                        let mut s = 0.0f32;
                        for j in a..b {
                            s += gd[base + j] * p[base + j];
                        }
                        for j in a..b {
                            gx[base + j] = p[base + j] * (gd[base + j] - s);
                        }
                    }
                    accumulate(grads, *x, g.shape(), gx);
                }
            }
            Op::Conv2d { x, k, geom } => {
                let npos = geom.oh * geom.ow;
                let pl = geom.patch_len();
                // g is [f, oh*ow]; work in position-major [oh*ow, f].
                let gpos = kernels::transpose(gd, geom.f, npos);
                if self.wants(*k) {
                    let cols = geom.im2col(self.val(*x).data());
                    let gk = kernels::mat_t_mul(&cols, &gpos, npos, pl, geom.f);
                    let gk = kernels::transpose(&gk, pl, geom.f);
                    accumulate(grads, *k, self.val(*k).shape(), gk);
                }
                if self.wants(*x) {
                    // kernels are [f, pl] row-major already.
                    let gcols = kernels::mat_mul(&gpos, self.val(*k).data(), npos, geom.f, pl);
                    let mut gx = vec![0.0; self.val(*x).len()];
                    geom.col2im(&gcols, &mut gx);
                    accumulate(grads, *x, self.val(*x).shape(), gx);
                }
            }
            Op::AddChannelBias(x, bias) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.shape(), gd.to_vec());
                }
                if self.wants(*bias) {
                    let plane = g.dim(1) * g.dim(2);
                    let gb = gd
                        .chunks_exact(plane)
                        .map(|c| {
                            let mut s = 0.0f32;
                            for &v in c {
                                s += v;
                            }
                            s
                        })
                        .collect();
                    accumulate(grads, *bias, self.val(*bias).shape(), gb);
                }
            }
            Op::Gather { src, idx } => {
                if self.wants(*src) {
                    let mut gs = vec![0.0; self.val(*src).len()];
                    for (i, j) in idx.iter().enumerate() {
                        if let Some(j) = j {
                            gs[*j] += gd[i];
                        }
                    }
                    accumulate(grads, *src, self.val(*src).shape(), gs);
                }
            }
            Op::SliceCols { x, start } => {
                if self.wants(*x) {
                    let (m, n) = dims2(self.val(*x));
                    let len = g.dim(1);
                    let mut gx = vec![0.0; m * n];
                    for r in 0..m {
                        gx[r * n + start..r * n + start + len]
                            .copy_from_slice(&gd[r * len..(r + 1) * len]);
                    }
                    accumulate(grads, *x, &[m, n], gx);
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (g.dim(0), g.dim(1));
                let mut off = 0;
                for &p in parts {
                    let w = self.val(p).dim(1);
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            gp.extend_from_slice(&gd[r * total + off..r * total + off + w]);
                        }
                        accumulate(grads, p, &[m, w], gp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let w = g.dim(1);
                for (r, &p) in parts.iter().enumerate() {
                    if self.wants(p) {
                        accumulate(
                            grads,
                            p,
                            self.val(p).shape(),
                            gd[r * w..(r + 1) * w].to_vec(),
                        );
                    }
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    accumulate(grads, *x, self.val(*x).shape(), gd.to_vec());
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    let n = self.val(*x).len();
                    accumulate(grads, *x, self.val(*x).shape(), vec![gd[0]; n]);
                }
            }
            Op::Select(x, flat) => {
                if self.wants(*x) {
                    let mut gx = vec![0.0; self.val(*x).len()];
                    gx[*flat] = gd[0];
                    accumulate(grads, *x, self.val(*x).shape(), gx);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                scale,
            } => {
                if self.wants(*logits) {
                    let (m, k) = dims2(self.val(*logits));
                    let mut gl = self.val(*logits).data().to_vec();
                    for (row, &t) in gl.chunks_exact_mut(k).zip(targets) {
                        kernels::softmax_in_place(row);
                        row[t] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= scale * gd[0];
                        }
                    }
                    accumulate(grads, *logits, &[m, k], gl);
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.idx].needs_grad
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.dim(0), t.dim(1))
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], g: Vec<f32>) {
    match &mut grads[v.idx] {
        Some(existing) => kernels::add_assign(existing.data_mut(), &g),
        slot @ None => *slot = Some(Tensor::from_parts(shape.to_vec(), g)),
    }
}
