// SPDX-License-Identifier: MIT OR Apache-2.0

//! Inference path.
//!
//! At frame `t` the transformer runs over the `n = min(t+1, W)` newest
//! frames, held compactly as positions `0..n`; position `i` is window slot
//! `W-n+i`. Every per-position quantity is produced by one of the row
//! kernels below, so partial recomputation (ablation sweeps) reproduces the
//! full forward bit-for-bit.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::params::Policy;
use crate::error::{usage, Result};
use crate::numerics::kernels::{self, ConvGeom};
use crate::world::ObsFrame;

/// Per-frame quantities that do not depend on the rest of the window:
/// the embedding and its layer-0 projections.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameEntry {
    pub t: u32,
    pub x0: Vec<f32>,
    pub q0: Vec<f32>,
    pub k0: Vec<f32>,
    pub v0: Vec<f32>,
}

/// Sliding window of at most `W` frame entries, oldest first.
#[derive(Clone, Debug)]
pub struct WindowCache {
    cap: usize,
    entries: VecDeque<FrameEntry>,
}

impl WindowCache {
    pub fn new(window: usize) -> Self {
        Self {
            cap: window,
            entries: VecDeque::with_capacity(window),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.cap
    }

    pub fn last_t(&self) -> Option<u32> {
        self.entries.back().map(|e| e.t)
    }

    /// Appends an entry, evicting the oldest when full.
    pub fn push(&mut self, e: FrameEntry) {
        if self.entries.len() == self.cap {
            self.entries.pop_front();
        }
        self.entries.push_back(e);
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn entries(&self) -> Vec<&FrameEntry> {
        self.entries.iter().collect()
    }
}

/// Replacement of one head's output vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadPatch {
    pub layer: usize,
    pub head: usize,
    /// Window slot; `None` patches every position.
    pub slot: Option<usize>,
    /// Replacement vector of length `d/H`; `None` means zeros.
    pub value: Option<Vec<f32>>,
}

/// `alpha · vector` added to the block-0 MLP hidden activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Steer {
    pub vector: Vec<f32>,
    pub alpha: f32,
}

/// Low-level intervention hooks for one forward pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Hooks {
    pub patches: Vec<HeadPatch>,
    pub steer: Option<Steer>,
}

impl Hooks {
    pub fn is_empty(&self) -> bool {
        self.patches.is_empty() && self.steer.is_none()
    }

    pub fn validate(&self, policy: &Policy) -> Result<()> {
        let c = &policy.config;
        for p in &self.patches {
            if p.layer >= c.layers || p.head >= c.heads {
                return Err(usage(format!(
                    "ablation target (layer {}, head {}) outside {}x{}",
                    p.layer, p.head, c.layers, c.heads
                )));
            }
            if p.slot.is_some_and(|s| s >= c.window) {
                return Err(usage(format!("window position {:?} >= {}", p.slot, c.window)));
            }
            if p.value.as_ref().is_some_and(|v| v.len() != c.head_dim()) {
                return Err(usage("replacement vector length differs from head width"));
            }
        }
        if let Some(s) = &self.steer {
            if s.vector.len() != c.mlp_hidden {
                return Err(usage(format!(
                    "steering vector length {} differs from site width {}",
                    s.vector.len(),
                    c.mlp_hidden
                )));
            }
            if !s.alpha.is_finite() {
                return Err(usage("steering coefficient must be finite"));
            }
        }
        Ok(())
    }
}

/// Factored categorical distribution over the composite action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    pub logits: Vec<Vec<f32>>,
    pub probs: Vec<Vec<f32>>,
}

impl ActionDistribution {
    pub fn from_logits(flat: &[f32], sizes: &[usize]) -> Self {
        let mut logits = Vec::with_capacity(sizes.len());
        let mut probs = Vec::with_capacity(sizes.len());
        let mut o = 0;
        for &n in sizes {
            let l = flat[o..o + n].to_vec();
            let mut p = l.clone();
            kernels::softmax_in_place(&mut p);
            logits.push(l);
            probs.push(p);
            o += n;
        }
        Self { logits, probs }
    }

    pub fn from_probs(probs: Vec<Vec<f32>>) -> Self {
        let logits = probs
            .iter()
            .map(|p| p.iter().map(|&v| v.max(1e-30).ln()).collect())
            .collect();
        Self { logits, probs }
    }

    pub fn flat_logits(&self) -> Vec<f32> {
        self.logits.concat()
    }

    pub fn flat_probs(&self) -> Vec<f32> {
        self.probs.concat()
    }

    /// Probability that factor `f` takes a non-zero category, computed in
    /// f64 from the logits so that it stays below 1 unless index 0 is
    /// truly impossible.
    pub fn p_active(&self, f: usize) -> f64 {
        let l = &self.logits[f];
        let m = l.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let e: Vec<f64> = l.iter().map(|&v| (v as f64 - m).exp()).collect();
        let total: f64 = e.iter().sum();
        e[1..].iter().sum::<f64>() / total
    }
}

/// Everything recorded for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationRecord {
    /// `[L, H, W]` weights of the current query; empty slots are 0.
    pub attn: Vec<f32>,
    /// `[L, H, W, d/H]` head outputs, if requested; empty slots are 0.
    pub outputs: Option<Vec<f32>>,
    /// Block-0 MLP hidden activation at the current position.
    pub mlp0: Vec<f32>,
    pub logits: Vec<f32>,
}

/// Full per-position activations of one window forward.
#[derive(Clone, Debug)]
pub struct WindowActs {
    pub n: usize,
    /// Residual stream entering each block, plus the final one: `L+1` × `[n, d]`.
    pub x: Vec<Vec<f32>>,
    pub q: Vec<Vec<f32>>,
    pub k: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    /// Concatenated head outputs after patches: `L` × `[n, d]`.
    pub heads: Vec<Vec<f32>>,
    /// `[L, H, n]` weights of the newest query.
    pub last_weights: Vec<f32>,
    pub mlp0_last: Vec<f32>,
    pub logits: Vec<f32>,
    /// Whether the last layer was evaluated at every position.
    pub full_last: bool,
}

impl Policy {
    /// Frame pixels as `[C, H, W]` floats in `[0,1]`.
    pub fn frame_input(&self, frame: &ObsFrame) -> Vec<f32> {
        frame.to_chw()
    }

    /// Post-activation output of every conv layer.
    pub fn conv_activations(&self, input: &[f32]) -> Vec<Vec<f32>> {
        let cfg = &self.config;
        let mut acts = Vec::with_capacity(cfg.conv.len());
        let (mut c, mut side) = (cfg.input_channels, cfg.input_size);
        let mut cur: Vec<f32> = input.to_vec();
        for (spec, &(wi, bi)) in cfg.conv.iter().zip(&self.layout.conv) {
            let g = ConvGeom::new(c, side, side, spec.f, spec.k, spec.s, spec.p)
                .expect("validated conv stack");
            let mut out = g.forward(&cur, self.p(wi));
            let plane = g.oh * g.ow;
            for (ch, dst) in out.chunks_exact_mut(plane).enumerate() {
                let b = self.p(bi)[ch];
                for v in dst {
                    *v = kernels::gelu(*v + b);
                }
            }
            c = spec.f;
            side = g.oh;
            cur = out;
            acts.push(cur.clone());
        }
        acts
    }

    /// Frame embedding `x0`.
    pub fn embed(&self, input: &[f32]) -> Vec<f32> {
        let acts = self.conv_activations(input);
        let flat = acts.last().map_or(input, |a| a.as_slice());
        let mut x0 = vec![0.0; self.config.d_model];
        kernels::vec_mat_bias(flat, self.p(self.layout.embed_w), self.p(self.layout.embed_b), &mut x0);
        x0
    }

    pub fn frame_entry_from_embedding(&self, t: u32, x0: Vec<f32>) -> FrameEntry {
        let d = self.config.d_model;
        let (mut q, mut k, mut v) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
        self.qkv_row(0, &x0, &mut q, &mut k, &mut v);
        FrameEntry {
            t,
            x0,
            q0: q,
            k0: k,
            v0: v,
        }
    }

    pub fn frame_entry(&self, frame: &ObsFrame) -> FrameEntry {
        let x0 = self.embed(&self.frame_input(frame));
        self.frame_entry_from_embedding(frame.t, x0)
    }

    /// Pre-norm query/key/value projections of one residual row.
    pub fn qkv_row(&self, l: usize, x: &[f32], q: &mut [f32], k: &mut [f32], v: &mut [f32]) {
        let b = &self.layout.blocks[l];
        let mut ln = vec![0.0; x.len()];
        kernels::layer_norm_row(x, self.p(b.ln1_g), self.p(b.ln1_b), &mut ln);
        kernels::vec_mat(&ln, self.p(b.wq), q);
        kernels::vec_mat(&ln, self.p(b.wk), k);
        kernels::vec_mat(&ln, self.p(b.wv), v);
    }

    /// Causal attention of query `i` over positions `0..=i` for one head.
    /// Writes the head output and the `i+1` weights.
    #[allow(clippy::too_many_arguments)]
    pub fn attend(
        &self,
        l: usize,
        h: usize,
        i: usize,
        q: &[f32],
        k: &[f32],
        v: &[f32],
        out: &mut [f32],
        weights: &mut [f32],
    ) {
        let cfg = &self.config;
        let (d, dh, w) = (cfg.d_model, cfg.head_dim(), cfg.window);
        let scale = 1.0 / (dh as f32).sqrt();
        let rel = &self.p(self.layout.blocks[l].rel)[h * w..(h + 1) * w];
        let qi = &q[i * d + h * dh..i * d + (h + 1) * dh];
        for j in 0..=i {
            let kj = &k[j * d + h * dh..j * d + (h + 1) * dh];
            weights[j] = kernels::dot(qi, kj) * scale + rel[i - j];
        }
        kernels::softmax_in_place(&mut weights[..=i]);
        out.fill(0.0);
        for j in 0..=i {
            let vj = &v[j * d + h * dh..j * d + (h + 1) * dh];
            let wj = weights[j];
            for (o, &vv) in out.iter_mut().zip(vj) {
                *o += wj * vv;
            }
        }
    }

    /// Output projection, residual add and MLP for one position.
    /// Returns the MLP hidden activation (after steering, if any).
    pub fn block_tail(
        &self,
        l: usize,
        x: &[f32],
        heads: &[f32],
        steer: Option<&Steer>,
        x_next: &mut [f32],
    ) -> Vec<f32> {
        let b = &self.layout.blocks[l];
        let d = x.len();
        let mut a = vec![0.0; d];
        kernels::vec_mat_bias(heads, self.p(b.wo), self.p(b.bo), &mut a);
        let mut h = vec![0.0; d];
        for i in 0..d {
            h[i] = x[i] + a[i];
        }
        let mut ln = vec![0.0; d];
        kernels::layer_norm_row(&h, self.p(b.ln2_g), self.p(b.ln2_b), &mut ln);
        let mut hid = vec![0.0; self.config.mlp_hidden];
        kernels::vec_mat_bias(&ln, self.p(b.w1), self.p(b.b1), &mut hid);
        kernels::gelu_in_place(&mut hid);
        if let Some(s) = steer {
            for (hv, &sv) in hid.iter_mut().zip(&s.vector) {
                *hv += s.alpha * sv;
            }
        }
        kernels::vec_mat_bias(&hid, self.p(b.w2), self.p(b.b2), x_next);
        for i in 0..d {
            x_next[i] += h[i];
        }
        hid
    }

    /// Action logits from the final residual row.
    pub fn head_logits(&self, x: &[f32]) -> Vec<f32> {
        let mut ln = vec![0.0; x.len()];
        kernels::layer_norm_row(x, self.p(self.layout.lnf_g), self.p(self.layout.lnf_b), &mut ln);
        let mut out = vec![0.0; self.config.n_actions()];
        kernels::vec_mat_bias(&ln, self.p(self.layout.head_w), self.p(self.layout.head_b), &mut out);
        out
    }

    /// Applies the patches targeting layer `l` to its concatenated head outputs.
    pub fn apply_patches(&self, l: usize, n: usize, heads: &mut [f32], hooks: &Hooks) {
        let cfg = &self.config;
        let (d, dh, w) = (cfg.d_model, cfg.head_dim(), cfg.window);
        for p in hooks.patches.iter().filter(|p| p.layer == l) {
            let rows: Vec<usize> = match p.slot {
                None => (0..n).collect(),
                Some(s) if s + n >= w => vec![s + n - w],
                Some(_) => Vec::new(),
            };
            for i in rows {
                let dst = &mut heads[i * d + p.head * dh..i * d + (p.head + 1) * dh];
                match &p.value {
                    Some(v) => dst.copy_from_slice(v),
                    None => dst.fill(0.0),
                }
            }
        }
    }

    /// Runs the transformer over a window of entries (oldest first).
    pub fn forward_window(&self, entries: &[&FrameEntry], hooks: &Hooks, full_last: bool) -> WindowActs {
        let cfg = &self.config;
        let (d, dh, nl, nh) = (cfg.d_model, cfg.head_dim(), cfg.layers, cfg.heads);
        let n = entries.len();
        assert!(n >= 1 && n <= cfg.window, "window of {n} entries");
        let mut x0 = Vec::with_capacity(n * d);
        let (mut q0, mut k0, mut v0) = (Vec::with_capacity(n * d), Vec::with_capacity(n * d), Vec::with_capacity(n * d));
        for e in entries {
            x0.extend_from_slice(&e.x0);
            q0.extend_from_slice(&e.q0);
            k0.extend_from_slice(&e.k0);
            v0.extend_from_slice(&e.v0);
        }
        let mut acts = WindowActs {
            n,
            x: vec![x0],
            q: Vec::with_capacity(nl),
            k: Vec::with_capacity(nl),
            v: Vec::with_capacity(nl),
            heads: Vec::with_capacity(nl),
            last_weights: vec![0.0; nl * nh * n],
            mlp0_last: Vec::new(),
            logits: Vec::new(),
            full_last,
        };
        let mut wbuf = vec![0.0; n];
        for l in 0..nl {
            let (q, k, v) = if l == 0 {
                (std::mem::take(&mut q0), std::mem::take(&mut k0), std::mem::take(&mut v0))
            } else {
                let (mut q, mut k, mut v) = (vec![0.0; n * d], vec![0.0; n * d], vec![0.0; n * d]);
                let x = &acts.x[l];
                for i in 0..n {
                    let r = i * d..(i + 1) * d;
                    self.qkv_row(l, &x[r.clone()], &mut q[r.clone()], &mut k[r.clone()], &mut v[r]);
                }
                (q, k, v)
            };
            let last = l + 1 == nl;
            let first_i = if last && !full_last { n - 1 } else { 0 };
            let mut heads = vec![0.0; n * d];
            for i in first_i..n {
                for h in 0..nh {
                    let out = &mut heads[i * d + h * dh..i * d + (h + 1) * dh];
                    self.attend(l, h, i, &q, &k, &v, out, &mut wbuf);
                    if i == n - 1 {
                        let dst = (l * nh + h) * n;
                        acts.last_weights[dst..dst + n].copy_from_slice(&wbuf[..n]);
                    }
                }
            }
            self.apply_patches(l, n, &mut heads, hooks);
            let steer = if l == 0 { hooks.steer.as_ref() } else { None };
            let mut xn = vec![0.0; n * d];
            for i in first_i..n {
                let r = i * d..(i + 1) * d;
                let hid = self.block_tail(l, &acts.x[l][r.clone()], &heads[r.clone()], steer, &mut xn[r]);
                if l == 0 && i == n - 1 {
                    acts.mlp0_last = hid;
                }
            }
            acts.q.push(q);
            acts.k.push(k);
            acts.v.push(v);
            acts.heads.push(heads);
            acts.x.push(xn);
        }
        acts.logits = self.head_logits(&acts.x[nl][(n - 1) * d..n * d]);
        acts
    }

    /// Slot-aligned record of a window forward.
    pub fn record(&self, acts: &WindowActs, with_outputs: bool) -> ActivationRecord {
        let cfg = &self.config;
        let (d, dh, nl, nh, w) = (cfg.d_model, cfg.head_dim(), cfg.layers, cfg.heads, cfg.window);
        let n = acts.n;
        let off = w - n;
        let mut attn = vec![0.0; nl * nh * w];
        for lh in 0..nl * nh {
            attn[lh * w + off..(lh + 1) * w].copy_from_slice(&acts.last_weights[lh * n..(lh + 1) * n]);
        }
        let outputs = with_outputs.then(|| {
            let mut o = vec![0.0; nl * nh * w * dh];
            for l in 0..nl {
                for h in 0..nh {
                    for i in 0..n {
                        let dst = ((l * nh + h) * w + off + i) * dh;
                        let src = i * d + h * dh;
                        o[dst..dst + dh].copy_from_slice(&acts.heads[l][src..src + dh]);
                    }
                }
            }
            o
        });
        ActivationRecord {
            attn,
            outputs,
            mlp0: acts.mlp0_last.clone(),
            logits: acts.logits.clone(),
        }
    }

    pub fn distribution(&self, logits: &[f32]) -> ActionDistribution {
        ActionDistribution::from_logits(logits, &self.config.action_sizes)
    }
}

/// One forward step for the newest frame in `frames`.
///
/// Without a cache the window is rebuilt from the last `W` frames. With a
/// cache, frames newer than the cached ones are pushed first; the result is
/// identical either way.
pub fn policy_forward(
    policy: &Policy,
    frames: &[ObsFrame],
    cache: Option<WindowCache>,
    hooks: &Hooks,
    with_outputs: bool,
) -> Result<(ActionDistribution, ActivationRecord, WindowCache)> {
    if frames.is_empty() {
        return Err(usage("policy_forward needs at least one frame"));
    }
    hooks.validate(policy)?;
    let w = policy.config.window;
    let start = frames.len().saturating_sub(w);
    let cache = match cache {
        Some(mut c) if c.capacity() == w && !c.is_empty() => {
            for f in &frames[start..] {
                if c.last_t().map_or(true, |t| f.t > t) {
                    c.push(policy.frame_entry(f));
                }
            }
            c
        }
        _ => {
            let mut c = WindowCache::new(w);
            for f in &frames[start..] {
                c.push(policy.frame_entry(f));
            }
            c
        }
    };
    let acts = policy.forward_window(&cache.entries(), hooks, with_outputs);
    let rec = policy.record(&acts, with_outputs);
    Ok((policy.distribution(&acts.logits), rec, cache))
}
