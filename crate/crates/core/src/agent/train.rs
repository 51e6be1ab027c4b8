// SPDX-License-Identifier: MIT OR Apache-2.0

//! Differentiable forward on the tape, and behavior cloning.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::{Hooks, WindowCache};
use super::params::Policy;
use super::sample::argmax;
use crate::error::{Error, Result};
use crate::numerics::{GradTape, Tensor, Var};
use crate::world::{
    expert_decision, generate_world, Action, Move, ObsFrame, Turn, WorldState,
};

/// One frame fed to the tape forward.
#[derive(Clone, Copy, Debug)]
pub enum FrameInput {
    /// `[C, H, W]` pixels, passed through the conv encoder.
    Pixels(Var),
    /// Precomputed embedding of length `d`.
    Embedding(Var),
}

/// Puts every parameter on the tape, as leaves or as constants.
pub fn bind_params(policy: &Policy, tape: &mut GradTape, trainable: bool) -> Vec<Var> {
    policy
        .params
        .iter()
        .map(|t| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect()
}

/// Conv encoder on the tape; returns the output of every conv layer.
pub fn tape_conv(policy: &Policy, tape: &mut GradTape, pv: &[Var], x: Var) -> Result<Vec<Var>> {
    let mut cur = x;
    let mut outs = Vec::with_capacity(policy.config.conv.len());
    for (spec, &(wi, bi)) in policy.config.conv.iter().zip(&policy.layout.conv) {
        let c = tape.conv2d(cur, pv[wi], spec.s, spec.p)?;
        let c = tape.add_channel_bias(c, pv[bi])?;
        cur = tape.gelu(c)?;
        outs.push(cur);
    }
    Ok(outs)
}

/// Logits `[n, A]` for every position of a window (causal within it).
pub fn tape_forward(policy: &Policy, tape: &mut GradTape, pv: &[Var], inputs: &[FrameInput]) -> Result<Var> {
    let cfg = &policy.config;
    let lay = &policy.layout;
    let (d, dh, nh, w) = (cfg.d_model, cfg.head_dim(), cfg.heads, cfg.window);
    let n = inputs.len();
    if n == 0 || n > w {
        return Err(Error::Shape(format!("window of {n} frames (max {w})")));
    }
    let mut rows = Vec::with_capacity(n);
    for inp in inputs {
        let row = match *inp {
            FrameInput::Embedding(e) => tape.reshape(e, &[1, d])?,
            FrameInput::Pixels(p) => {
                let feats = tape_conv(policy, tape, pv, p)?;
                let last = feats.last().copied().unwrap_or(p);
                let len = tape.value(last).len();
                let flat = tape.reshape(last, &[1, len])?;
                let e = tape.matmul(flat, pv[lay.embed_w])?;
                tape.add_row(e, pv[lay.embed_b])?
            }
        };
        rows.push(row);
    }
    let mut x = tape.concat_rows(&rows)?;
    let ranges: Vec<(usize, usize)> = (0..n).map(|i| (0, i + 1)).collect();
    let scale = 1.0 / (dh as f32).sqrt();
    for b in &lay.blocks {
        let ln = tape.layer_norm(x, pv[b.ln1_g], pv[b.ln1_b])?;
        let q = tape.matmul(ln, pv[b.wq])?;
        let k = tape.matmul(ln, pv[b.wk])?;
        let v = tape.matmul(ln, pv[b.wv])?;
        let mut heads = Vec::with_capacity(nh);
        for h in 0..nh {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let s = tape.matmul_t(qh, kh)?;
            let s = tape.scale(s, scale)?;
            let idx: Vec<Option<usize>> = (0..n * n)
                .map(|ij| {
                    let (i, j) = (ij / n, ij % n);
                    if j <= i {
                        Some(h * w + i - j)
                    } else {
                        None
                    }
                })
                .collect();
            let bias = tape.gather(pv[b.rel], idx, &[n, n])?;
            let s = tape.add(s, bias)?;
            let wts = tape.row_softmax(s, ranges.clone())?;
            heads.push(tape.matmul(wts, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let a = tape.matmul(cat, pv[b.wo])?;
        let a = tape.add_row(a, pv[b.bo])?;
        let hres = tape.add(x, a)?;
        let ln2 = tape.layer_norm(hres, pv[b.ln2_g], pv[b.ln2_b])?;
        let hid = tape.matmul(ln2, pv[b.w1])?;
        let hid = tape.add_row(hid, pv[b.b1])?;
        let hid = tape.gelu(hid)?;
        let out = tape.matmul(hid, pv[b.w2])?;
        let out = tape.add_row(out, pv[b.b2])?;
        x = tape.add(hres, out)?;
    }
    let lnf = tape.layer_norm(x, pv[lay.lnf_g], pv[lay.lnf_b])?;
    let logits = tape.matmul(lnf, pv[lay.head_w])?;
    tape.add_row(logits, pv[lay.head_b])
}

/// One demonstration episode: observation `t` is followed by action `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub frames: Vec<ObsFrame>,
    pub actions: Vec<Action>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DemoConfig {
    pub episodes: usize,
    pub seed: u64,
    pub world_size: usize,
    /// Probability of executing a random move/turn instead of the expert
    /// action (the recorded label stays the expert's).
    pub noise: f64,
    pub max_steps: usize,
    /// Idle frames kept after the pickaxe is crafted.
    pub tail: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            seed: 0,
            world_size: 32,
            noise: 0.1,
            max_steps: 400,
            tail: 8,
        }
    }
}

/// Scripted-expert episodes on procedural worlds `seed, seed+1, ...`.
pub fn generate_demos(cfg: &DemoConfig) -> Result<Vec<Episode>> {
    (0..cfg.episodes)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.seed.wrapping_add(i as u64);
            let world = generate_world(seed, (cfg.world_size, cfg.world_size))?;
            Ok(expert_episode(world, cfg, seed))
        })
        .collect()
}

fn expert_episode(mut world: WorldState, cfg: &DemoConfig, seed: u64) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdead_beef);
    let mut frames = vec![world.render()];
    let mut actions = Vec::new();
    let mut after = 0;
    while actions.len() < cfg.max_steps && world.alive() {
        let d = expert_decision(&world);
        if d.explore {
            world.flag_explore();
        }
        actions.push(d.action);
        let executed = if rng.gen_bool(cfg.noise.clamp(0.0, 1.0)) && !world.agent.inventory_open {
            Action {
                movement: [Move::None, Move::Forward, Move::Back, Move::StrafeLeft, Move::StrafeRight]
                    [rng.gen_range(0..5)],
                turn: [Turn::None, Turn::Left, Turn::Right][rng.gen_range(0..3)],
                ..Action::NOOP
            }
        } else {
            d.action
        };
        if world.agent.inventory.wooden_pickaxe > 0 {
            after += 1;
            if after > cfg.tail {
                actions.pop();
                break;
            }
        }
        let (f, _) = world.step(&executed).expect("alive world steps");
        if actions.len() < cfg.max_steps {
            frames.push(f);
        }
    }
    frames.truncate(actions.len());
    Episode { frames, actions }
}

/// Shuffles action labels across all frames of all episodes.
pub fn permute_labels(demos: &[Episode], seed: u64) -> Vec<Episode> {
    let mut all: Vec<Action> = demos.iter().flat_map(|e| e.actions.iter().copied()).collect();
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut it = all.into_iter();
    demos
        .iter()
        .map(|e| Episode {
            frames: e.frames.clone(),
            actions: (0..e.actions.len()).map(|_| it.next().unwrap()).collect(),
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub clip: f32,
    /// Chunks per optimizer step.
    pub batch: usize,
    /// Frames per chunk; defaults to the window.
    pub chunk: Option<usize>,
    pub seed: u64,
    /// Fraction of episodes held out for accuracy.
    pub holdout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 0.05,
            momentum: 0.9,
            clip: 1.0,
            batch: 8,
            chunk: None,
            seed: 0,
            holdout: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainMetrics {
    /// Mean per-frame loss (summed over factors) for each epoch.
    pub epoch_loss: Vec<f64>,
    /// Joint exact-match accuracy on held-out episodes after each epoch.
    pub heldout_accuracy: Vec<f64>,
    /// Per-factor held-out accuracy after the last epoch.
    pub factor_accuracy: Vec<f64>,
    pub train_frames: usize,
    pub heldout_frames: usize,
}

fn validate_demos(demos: &[Episode]) -> Result<()> {
    if demos.is_empty() {
        return Err(Error::Data("no demonstrations".into()));
    }
    for (i, e) in demos.iter().enumerate() {
        if e.frames.is_empty() {
            return Err(Error::Data(format!("demo {i} has an empty window")));
        }
        if e.frames.len() != e.actions.len() {
            return Err(Error::Data(format!(
                "demo {i}: {} frames but {} actions",
                e.frames.len(),
                e.actions.len()
            )));
        }
    }
    Ok(())
}

/// Loss and parameter gradients of one chunk, scaled by `scale`.
fn chunk_grad(policy: &Policy, ep: &Episode, start: usize, len: usize, scale: f32) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = GradTape::new();
    let pv = bind_params(policy, &mut tape, true);
    let c = policy.config.input_channels;
    let s = policy.config.input_size;
    let inputs: Vec<FrameInput> = ep.frames[start..start + len]
        .iter()
        .map(|f| FrameInput::Pixels(tape.constant(Tensor::from_parts(vec![c, s, s], f.to_chw()))))
        .collect();
    let logits = tape_forward(policy, &mut tape, &pv, &inputs)?;
    let mut loss: Option<Var> = None;
    for (fi, (&off, &size)) in policy.config.factor_offsets().iter().zip(&policy.config.action_sizes).enumerate() {
        let targets: Vec<usize> = ep.actions[start..start + len].iter().map(|a| a.indices()[fi]).collect();
        let part = tape.slice_cols(logits, off, size)?;
        let ce = tape.cross_entropy(part, targets, scale)?;
        loss = Some(match loss {
            None => ce,
            Some(l) => tape.add(l, ce)?,
        });
    }
    let loss = loss.expect("at least one factor");
    let value = tape.value(loss).item() as f64;
    let grads = tape.backward(loss)?;
    let g = pv
        .iter()
        .zip(&policy.params)
        .map(|(&v, p)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((value, g))
}

/// Argmax action indices for every frame of an episode, with the sliding
/// window and no interventions.
pub fn greedy_indices(policy: &Policy, frames: &[ObsFrame]) -> Vec<Vec<usize>> {
    let mut cache = WindowCache::new(policy.config.window);
    let hooks = Hooks::default();
    frames
        .iter()
        .map(|f| {
            cache.push(policy.frame_entry(f));
            let acts = policy.forward_window(&cache.entries(), &hooks, false);
            policy
                .distribution(&acts.logits)
                .logits
                .iter()
                .map(|l| argmax(l))
                .collect()
        })
        .collect()
}

/// `(joint accuracy, per-factor accuracy, frames)` of greedy predictions.
pub fn action_accuracy(policy: &Policy, demos: &[Episode]) -> (f64, Vec<f64>, usize) {
    let nf = policy.config.action_sizes.len();
    let per: Vec<(usize, Vec<usize>, usize)> = demos
        .par_iter()
        .map(|e| {
            let pred = greedy_indices(policy, &e.frames);
            let mut joint = 0;
            let mut fac = vec![0; nf];
            for (p, a) in pred.iter().zip(&e.actions) {
                let t = a.indices();
                let mut all = true;
                for f in 0..nf {
                    if p[f] == t[f] {
                        fac[f] += 1;
                    } else {
                        all = false;
                    }
                }
                joint += all as usize;
            }
            (joint, fac, e.frames.len())
        })
        .collect();
    let total: usize = per.iter().map(|p| p.2).sum();
    let joint: usize = per.iter().map(|p| p.0).sum();
    let mut fac = vec![0usize; nf];
    for p in &per {
        for f in 0..nf {
            fac[f] += p.1[f];
        }
    }
    let denom = total.max(1) as f64;
    (
        joint as f64 / denom,
        fac.iter().map(|&c| c as f64 / denom).collect(),
        total,
    )
}

/// Splits episode indices into (train, held-out) with a seeded shuffle.
pub fn split_demos(n: usize, holdout: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5711));
    let k = ((n as f64) * holdout.clamp(0.0, 1.0)).round() as usize;
    let k = k.min(n.saturating_sub(1));
    let held = idx.split_off(n - k);
    (idx, held)
}

/// Behavior cloning with momentum SGD and global-norm clipping.
///
/// Episodes are cut into non-overlapping chunks of `chunk` frames starting
/// at a fresh random offset each epoch; each chunk is a causal window and
/// every position contributes to the loss.
pub fn train_bc(
    policy: &mut Policy,
    demos: &[Episode],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64, Option<f64>),
) -> Result<TrainMetrics> {
    validate_demos(demos)?;
    if cfg.epochs == 0 || cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("epochs, batch and lr must be positive".into()));
    }
    let chunk = cfg.chunk.unwrap_or(policy.config.window).clamp(1, policy.config.window);
    let (train_idx, held_idx) = split_demos(demos.len(), cfg.holdout, cfg.seed);
    let held: Vec<Episode> = held_idx.iter().map(|&i| demos[i].clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity: Vec<Vec<f32>> = policy.params.iter().map(|p| vec![0.0; p.len()]).collect();
    let mut metrics = TrainMetrics {
        train_frames: train_idx.iter().map(|&i| demos[i].frames.len()).sum(),
        heldout_frames: held.iter().map(|e| e.frames.len()).sum(),
        ..Default::default()
    };

    for epoch in 0..cfg.epochs {
        let mut chunks: Vec<(usize, usize, usize)> = Vec::new();
        for &e in &train_idx {
            let len = demos[e].frames.len();
            let offset = rng.gen_range(0..chunk.min(len));
            if offset > 0 {
                chunks.push((e, 0, offset));
            }
            let mut s = offset;
            while s < len {
                let l = chunk.min(len - s);
                chunks.push((e, s, l));
                s += l;
            }
        }
        chunks.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in chunks.chunks(cfg.batch) {
            let frames: usize = batch.iter().map(|c| c.2).sum();
            let scale = 1.0 / frames as f32;
            let results: Vec<Result<(f64, Vec<Tensor>)>> = batch
                .par_iter()
                .map(|&(e, s, l)| chunk_grad(policy, &demos[e], s, l, scale))
                .collect();
            let mut grads: Vec<Vec<f32>> = policy.params.iter().map(|p| vec![0.0; p.len()]).collect();
            for r in results {
                let (loss, g) = r?;
                epoch_loss += loss * frames as f64;
                for (acc, gi) in grads.iter_mut().zip(&g) {
                    for (a, &v) in acc.iter_mut().zip(gi.data()) {
                        *a += v;
                    }
                }
            }
            let mut norm2 = 0.0f64;
            for g in &grads {
                for &v in g {
                    norm2 += (v as f64) * (v as f64);
                }
            }
            let norm = norm2.sqrt();
            if !norm.is_finite() {
                return Err(Error::Optimization("non-finite gradient".into()));
            }
            let clip = if norm > cfg.clip as f64 { (cfg.clip as f64 / norm) as f32 } else { 1.0 };
            for ((p, v), g) in policy.params.iter_mut().zip(&mut velocity).zip(&grads) {
                for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                    *vv = cfg.momentum * *vv + gv * clip;
                    *pv -= cfg.lr * *vv;
                }
            }
        }
        let loss = epoch_loss / metrics.train_frames.max(1) as f64;
        metrics.epoch_loss.push(loss);
        let acc = if held.is_empty() {
            None
        } else {
            let (joint, fac, _) = action_accuracy(policy, &held);
            metrics.factor_accuracy = fac;
            Some(joint)
        };
        if let Some(a) = acc {
            metrics.heldout_accuracy.push(a);
        }
        on_epoch(epoch, loss, acc);
    }
    policy.ensure_finite()?;
    Ok(metrics)
}
