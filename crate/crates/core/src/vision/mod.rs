// SPDX-License-Identifier: MIT OR Apache-2.0

//! Introspection of the convolutional encoder: saliency, receptive fields,
//! feature visualization, activation overlays and PCA colour maps.

mod rf;

pub use rf::{receptive_field, receptive_field_table, ReceptiveField, RfRow};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{bind_params, tape_conv, tape_forward, FrameInput, Policy};
use crate::error::{usage, Error, Result};
use crate::numerics::stats::spearman_f32;
use crate::numerics::{pca_top_k, GradTape, Pca, Tensor, Var};
use crate::world::ObsFrame;

/// Scalar whose input gradient is visualized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SaliencyTarget {
    /// Pre-softmax logit of category `index` of action factor `factor`.
    Logit { factor: usize, index: usize },
    /// Mean activation of one conv channel.
    Channel { layer: usize, channel: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum SaliencyMethod {
    Gradient,
    Smoothgrad { n: usize, sigma: f32, seed: u64 },
}

impl SaliencyMethod {
    pub const DEFAULT_SMOOTHGRAD_N: usize = 32;
    pub const DEFAULT_SMOOTHGRAD_SIGMA: f32 = 0.1;

    pub fn smoothgrad_default(seed: u64) -> Self {
        Self::Smoothgrad {
            n: Self::DEFAULT_SMOOTHGRAD_N,
            sigma: Self::DEFAULT_SMOOTHGRAD_SIGMA,
            seed,
        }
    }
}

/// Per-pixel input-gradient magnitude, summed over colour channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    /// `[height, width]`, all nonnegative.
    pub values: Vec<f32>,
    pub target: SaliencyTarget,
    pub method: SaliencyMethod,
}

impl SaliencyMap {
    pub fn max(&self) -> f32 {
        self.values.iter().fold(0.0, |m, &v| m.max(v))
    }

    /// Min-max normalized 8-bit intensities; `invert` maps high saliency to dark.
    pub fn to_gray(&self, invert: bool) -> Vec<u8> {
        normalize_u8(&self.values, invert)
    }
}

/// Min-max normalizes into `0..=255`. Constant input maps to 0 (255 inverted).
pub fn normalize_u8(v: &[f32], invert: bool) -> Vec<u8> {
    let (lo, hi) = min_max(v);
    v.iter()
        .map(|&x| {
            let u = if hi > lo { (x - lo) / (hi - lo) } else { 0.0 };
            let u = if invert { 1.0 - u } else { u };
            (u * 255.0).round() as u8
        })
        .collect()
}

fn min_max(v: &[f32]) -> (f32, f32) {
    v.iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

fn check_target(policy: &Policy, target: SaliencyTarget) -> Result<()> {
    let c = &policy.config;
    match target {
        SaliencyTarget::Logit { factor, index } => {
            if factor >= c.action_sizes.len() || index >= c.action_sizes[factor] {
                return Err(usage(format!("no logit ({factor}, {index})")));
            }
        }
        SaliencyTarget::Channel { layer, channel } => {
            if layer >= c.conv.len() || channel >= c.conv[layer].f {
                return Err(usage(format!("no conv channel ({layer}, {channel})")));
            }
        }
    }
    Ok(())
}

/// The frames a saliency computation at `t` sees: the window ending at `t`.
fn window_of(policy: &Policy, frames: &[ObsFrame], t: usize) -> Result<(Vec<Vec<f32>>, Vec<f32>)> {
    if t >= frames.len() {
        return Err(usage(format!("frame {t} outside {} frames", frames.len())));
    }
    let n = (t + 1).min(policy.config.window);
    let prev = frames[t + 1 - n..t].par_iter().map(|f| policy.embed(&f.to_chw())).collect();
    Ok((prev, frames[t].to_chw()))
}

/// Scalar target on the tape; `x` is the pixel leaf.
fn target_var(policy: &Policy, tape: &mut GradTape, pv: &[Var], prev: &[Vec<f32>], x: Var, target: SaliencyTarget) -> Result<Var> {
    match target {
        SaliencyTarget::Logit { factor, index } => {
            let mut inputs: Vec<FrameInput> = prev
                .iter()
                .map(|e| FrameInput::Embedding(tape.constant(Tensor::vector(e.clone()))))
                .collect();
            inputs.push(FrameInput::Pixels(x));
            let logits = tape_forward(policy, tape, pv, &inputs)?;
            let a = policy.config.n_actions();
            let col = policy.config.factor_offsets()[factor] + index;
            tape.select(logits, (inputs.len() - 1) * a + col)
        }
        SaliencyTarget::Channel { layer, channel } => {
            let outs = tape_conv(policy, tape, pv, x)?;
            channel_mean(tape, outs[layer], channel)
        }
    }
}

fn channel_mean(tape: &mut GradTape, act: Var, channel: usize) -> Result<Var> {
    let shape = tape.value(act).shape().to_vec();
    let plane = shape[1] * shape[2];
    let idx = (0..plane).map(|i| Some(channel * plane + i)).collect();
    let ch = tape.gather(act, idx, &[plane])?;
    tape.mean(ch)
}

/// Value and `[C, H, W]` input gradient of `target`.
fn target_grad(policy: &Policy, prev: &[Vec<f32>], input: &[f32], target: SaliencyTarget) -> Result<(f32, Vec<f32>)> {
    let c = &policy.config;
    let mut tape = GradTape::new();
    let pv = bind_params(policy, &mut tape, false);
    let x = tape.leaf(Tensor::new(
        vec![c.input_channels, c.input_size, c.input_size],
        input.to_vec(),
    )?);
    let y = target_var(policy, &mut tape, &pv, prev, x, target)?;
    let value = tape.value(y).item();
    let g = tape.backward(y)?;
    let grad = g
        .wrt(x)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; input.len()]);
    Ok((value, grad))
}

fn channel_abs_sum(policy: &Policy, grad: &[f32]) -> Vec<f32> {
    let side = policy.config.input_size;
    let plane = side * side;
    let mut out = vec![0.0f32; plane];
    for ch in grad.chunks_exact(plane) {
        for (o, &g) in out.iter_mut().zip(ch) {
            *o += g.abs();
        }
    }
    out
}

/// Absolute input gradient of `target` at frame `t`, with the earlier frames
/// of its window held fixed.
pub fn gradient_saliency(policy: &Policy, frames: &[ObsFrame], t: usize, target: SaliencyTarget) -> Result<SaliencyMap> {
    let (prev, input) = window_of(policy, frames, t)?;
    input_saliency(policy, &prev, &input, target)
}

/// Gradient saliency of a raw `[C, H, W]` input of the policy's input size,
/// given the embeddings of the earlier frames in its window (oldest first).
pub fn input_saliency(policy: &Policy, prev: &[Vec<f32>], input: &[f32], target: SaliencyTarget) -> Result<SaliencyMap> {
    check_target(policy, target)?;
    let cfg = &policy.config;
    let side = cfg.input_size;
    if input.len() != cfg.input_channels * side * side {
        return Err(Error::Shape(format!("input has {} values, the policy takes {}x{}x{}", input.len(), cfg.input_channels, side, side)));
    }
    if prev.len() >= cfg.window || prev.iter().any(|e| e.len() != cfg.d_model) {
        return Err(usage("earlier embeddings must fit the window and have length d_model"));
    }
    let (_, grad) = target_grad(policy, prev, input, target)?;
    Ok(SaliencyMap {
        height: side,
        width: side,
        values: channel_abs_sum(policy, &grad),
        target,
        method: SaliencyMethod::Gradient,
    })
}

/// Mean gradient saliency over `n` noisy copies of frame `t`. The noise is
/// Gaussian with standard deviation `sigma` times the input range (1.0).
pub fn smoothgrad(
    policy: &Policy,
    frames: &[ObsFrame],
    t: usize,
    target: SaliencyTarget,
    n: usize,
    sigma: f32,
    seed: u64,
) -> Result<SaliencyMap> {
    if n == 0 || !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(usage("smoothgrad needs n >= 1 and a finite sigma >= 0"));
    }
    let method = SaliencyMethod::Smoothgrad { n, sigma, seed };
    if sigma == 0.0 {
        // Every copy is identical; skip the redundant passes so the result
        // is the plain gradient map exactly.
        let mut m = gradient_saliency(policy, frames, t, target)?;
        m.method = method;
        return Ok(m);
    }
    check_target(policy, target)?;
    let (prev, input) = window_of(policy, frames, t)?;
    let maps: Vec<Vec<f32>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let noise = Normal::new(0.0f32, sigma).expect("finite sigma");
            let noisy: Vec<f32> = input.iter().map(|&v| v + noise.sample(&mut rng)).collect();
            target_grad(policy, &prev, &noisy, target).map(|(_, g)| channel_abs_sum(policy, &g))
        })
        .collect::<Result<_>>()?;
    let mut values = vec![0.0f32; maps[0].len()];
    for m in &maps {
        for (v, &x) in values.iter_mut().zip(m) {
            *v += x;
        }
    }
    for v in &mut values {
        *v /= n as f32;
    }
    let side = policy.config.input_size;
    Ok(SaliencyMap {
        height: side,
        width: side,
        values,
        target,
        method,
    })
}

pub fn saliency(policy: &Policy, frames: &[ObsFrame], t: usize, target: SaliencyTarget, method: SaliencyMethod) -> Result<SaliencyMap> {
    match method {
        SaliencyMethod::Gradient => gradient_saliency(policy, frames, t, target),
        SaliencyMethod::Smoothgrad { n, sigma, seed } => smoothgrad(policy, frames, t, target, n, sigma, seed),
    }
}

/// Parameter-name prefixes of each randomization stage, output side first.
pub fn randomization_stages(policy: &Policy) -> Vec<String> {
    let mut s = vec!["head".to_string(), "lnf".to_string()];
    s.extend((0..policy.config.layers).rev().map(|l| format!("block{l}.")));
    s.push("embed".into());
    s.extend((0..policy.config.conv.len()).rev().map(|i| format!("conv{i}.")));
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomizationStage {
    /// `"none"` or the prefix of the block randomized at this stage.
    pub stage: String,
    pub spearman: f64,
}

/// Cascading model-parameter randomization: blocks are re-drawn one at a
/// time from the output head down to the first conv layer, and each
/// cumulatively randomized model's map is rank-correlated with the original.
pub fn sanity_param_randomization(
    policy: &Policy,
    frames: &[ObsFrame],
    t: usize,
    target: SaliencyTarget,
    method: SaliencyMethod,
    seed: u64,
) -> Result<Vec<RandomizationStage>> {
    let original = saliency(policy, frames, t, target, method)?;
    let mut out = vec![RandomizationStage {
        stage: "none".into(),
        spearman: spearman_f32(&original.values, &original.values),
    }];
    let mut p = policy.clone();
    for (i, prefix) in randomization_stages(policy).into_iter().enumerate() {
        p.reinit_prefix(&prefix, seed.wrapping_add(i as u64 + 1))?;
        let m = saliency(&p, frames, t, target, method)?;
        out.push(RandomizationStage {
            stage: prefix.trim_end_matches('.').to_string(),
            spearman: spearman_f32(&original.values, &m.values),
        });
    }
    Ok(out)
}

/// Rank correlation of two policies' saliency maps on each listed frame; the
/// comparison step of the data randomization test.
pub fn saliency_agreement(
    a: &Policy,
    b: &Policy,
    frames: &[ObsFrame],
    ts: &[usize],
    target: SaliencyTarget,
    method: SaliencyMethod,
) -> Result<Vec<f64>> {
    ts.iter()
        .map(|&t| {
            let ma = saliency(a, frames, t, target, method)?;
            let mb = saliency(b, frames, t, target, method)?;
            Ok(spearman_f32(&ma.values, &mb.values))
        })
        .collect()
}

/// Gradient-ascent settings for feature visualization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizationConfig {
    pub steps: usize,
    /// Step length in pixel units, applied to the max-normalized gradient.
    pub step_size: f32,
    /// Maximum random shift per axis before each step, counted in units of
    /// the layer's stride product so the shifted objective stays in phase.
    pub jitter: usize,
    /// Multiplicative shrink of the image towards mid-grey per step.
    pub weight_decay: f32,
    /// The objective is recorded every this many steps.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        Self {
            steps: 128,
            step_size: 0.05,
            jitter: 1,
            weight_decay: 1e-3,
            checkpoint_every: 8,
            seed: 0,
        }
    }
}

impl OptimizationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(usage("feature visualization needs at least one step"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(usage("step size must be positive"));
        }
        if !(0.0..1.0).contains(&self.weight_decay) {
            return Err(usage("weight decay must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureViz {
    pub layer: usize,
    pub channel: usize,
    /// `[C, H, W]` in `[0, 1]`.
    pub image: Vec<f32>,
    /// `(step, objective)` at every checkpoint, including step 0 and the last step.
    pub history: Vec<(usize, f32)>,
    pub objective: f32,
}

impl FeatureViz {
    /// Interleaved 8-bit RGB.
    pub fn to_rgb(&self, side: usize) -> Vec<u8> {
        chw_to_rgb(&self.image, side)
    }
}

pub fn chw_to_rgb(chw: &[f32], side: usize) -> Vec<u8> {
    let plane = side * side;
    let mut out = vec![0u8; plane * 3];
    for i in 0..plane {
        for c in 0..3 {
            out[i * 3 + c] = (chw[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    out
}

/// Channel-mean activation of an input image, without the tape.
pub fn channel_objective(policy: &Policy, layer: usize, channel: usize, input: &[f32]) -> f32 {
    let acts = policy.conv_activations(input);
    let a = &acts[layer];
    let plane = a.len() / policy.config.conv[layer].f;
    let s: f64 = a[channel * plane..(channel + 1) * plane].iter().map(|&v| v as f64).sum();
    (s / plane as f64) as f32
}

/// Shifts every plane of a `[C, S, S]` image by `(dy, dx)` with wrap-around.
fn roll(img: &[f32], side: usize, dy: isize, dx: isize) -> Vec<f32> {
    let plane = side * side;
    let s = side as isize;
    let mut out = vec![0.0; img.len()];
    for (src, dst) in img.chunks_exact(plane).zip(out.chunks_exact_mut(plane)) {
        for y in 0..s {
            let sy = (y - dy).rem_euclid(s);
            for x in 0..s {
                let sx = (x - dx).rem_euclid(s);
                dst[(y * s + x) as usize] = src[(sy * s + sx) as usize];
            }
        }
    }
    out
}

/// Synthesizes an input that maximizes the mean activation of one conv channel.
pub fn feature_viz(policy: &Policy, layer: usize, channel: usize, cfg: &OptimizationConfig) -> Result<FeatureViz> {
    cfg.validate()?;
    check_target(policy, SaliencyTarget::Channel { layer, channel })?;
    let c = &policy.config;
    let side = c.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut img: Vec<f32> = (0..c.input_channels * side * side)
        .map(|_| rng.gen_range(0.4..=0.6))
        .collect();
    let target = SaliencyTarget::Channel { layer, channel };
    let mut history = vec![(0, channel_objective(policy, layer, channel, &img))];
    let j = cfg.jitter as isize;
    let jump = receptive_field(&c.conv, layer)?.jump as isize;
    for step in 1..=cfg.steps {
        let (dy, dx) = if j > 0 {
            (jump * rng.gen_range(-j..=j), jump * rng.gen_range(-j..=j))
        } else {
            (0, 0)
        };
        let shifted = roll(&img, side, dy, dx);
        let (value, g) = target_grad(policy, &[], &shifted, target)?;
        if !value.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Optimization(format!("non-finite objective at step {step}")));
        }
        let g = roll(&g, side, -dy, -dx);
        let scale = g.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
        let scale = if scale > 0.0 { cfg.step_size / scale } else { 0.0 };
        for (p, &gi) in img.iter_mut().zip(&g) {
            let v = *p + scale * gi;
            let v = 0.5 + (v - 0.5) * (1.0 - cfg.weight_decay);
            *p = v.clamp(0.0, 1.0);
        }
        if step % cfg.checkpoint_every.max(1) == 0 || step == cfg.steps {
            let obj = channel_objective(policy, layer, channel, &img);
            if !obj.is_finite() {
                return Err(Error::Optimization(format!("non-finite objective at step {step}")));
            }
            history.push((step, obj));
        }
    }
    let objective = history.last().map_or(0.0, |h| h.1);
    Ok(FeatureViz {
        layer,
        channel,
        image: img,
        history,
        objective,
    })
}

/// One filter's activation map blended over the frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overlay {
    pub filter: usize,
    /// Normalized activation, nearest-neighbour upscaled to the frame: `[H, W]`.
    pub upscaled: Vec<f32>,
    /// Interleaved 8-bit RGB `[H, W, 3]`.
    pub pixels: Vec<u8>,
    /// The activation map was constant and was blended with zero opacity.
    pub constant: bool,
}

pub const OVERLAY_ALPHA: f32 = 0.5;

fn heat(v: f32) -> [f32; 3] {
    [(3.0 * v).min(1.0), (3.0 * v - 1.0).clamp(0.0, 1.0), (3.0 * v - 2.0).clamp(0.0, 1.0)]
}

/// Nearest-neighbour upscale of `[h, w]` to `[out, out]`.
pub fn upscale_nearest(map: &[f32], h: usize, w: usize, out: usize) -> Vec<f32> {
    let mut o = vec![0.0; out * out];
    for y in 0..out {
        let sy = y * h / out;
        for x in 0..out {
            o[y * out + x] = map[sy * w + x * w / out];
        }
    }
    o
}

/// Overlays every filter of conv layer `layer` on the frame.
pub fn activation_overlay(policy: &Policy, frame: &ObsFrame, layer: usize) -> Result<Vec<Overlay>> {
    let c = &policy.config;
    if layer >= c.conv.len() {
        return Err(usage(format!("conv layer {layer} outside {}", c.conv.len())));
    }
    let shapes = c.conv_shapes()?;
    let (f, s) = shapes[layer];
    let acts = policy.conv_activations(&frame.to_chw());
    let side = c.input_size;
    Ok(acts[layer]
        .par_chunks_exact(s * s)
        .enumerate()
        .take(f)
        .map(|(filter, map)| {
            let (lo, hi) = min_max(map);
            let constant = !(hi > lo);
            let norm: Vec<f32> = map
                .iter()
                .map(|&v| if constant { 0.0 } else { (v - lo) / (hi - lo) })
                .collect();
            let upscaled = upscale_nearest(&norm, s, s, side);
            let alpha = if constant { 0.0 } else { OVERLAY_ALPHA };
            let mut pixels = frame.pixels.clone();
            if alpha > 0.0 {
                for (px, &v) in pixels.chunks_exact_mut(3).zip(&upscaled) {
                    let h = heat(v);
                    for ch in 0..3 {
                        let base = px[ch] as f32 / 255.0;
                        px[ch] = (((1.0 - alpha) * base + alpha * h[ch]) * 255.0).round() as u8;
                    }
                }
            }
            Overlay {
                filter,
                upscaled,
                pixels,
                constant,
            }
        })
        .collect())
}

/// Top-3 principal-component colouring of a conv layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaImage {
    /// Spatial size of the layer.
    pub side: usize,
    /// Interleaved RGB `[side, side, 3]`.
    pub pixels: Vec<u8>,
    pub explained_variance: Vec<f32>,
    /// Planes zeroed because the activations have fewer than three directions of variance.
    pub degenerate: [bool; 3],
}

/// Projection of every row of `samples: [N, D]` onto its top three components.
pub fn project_top3(samples: &Tensor) -> Result<(Pca, Vec<[f32; 3]>)> {
    let pca = pca_top_k(samples, 3)?;
    let d = samples.dim(1);
    let proj = samples
        .data()
        .chunks_exact(d)
        .map(|row| {
            let p = pca.project(row);
            [p[0], p[1], p[2]]
        })
        .collect();
    Ok((pca, proj))
}

const DEGENERATE_RATIO: f32 = 1e-6;

pub fn kernel_pca_rgb(policy: &Policy, frame: &ObsFrame, layer: usize) -> Result<PcaImage> {
    let c = &policy.config;
    if layer >= c.conv.len() {
        return Err(usage(format!("conv layer {layer} outside {}", c.conv.len())));
    }
    let (f, s) = c.conv_shapes()?[layer];
    if f < 3 {
        return Err(usage(format!("layer {layer} has {f} channels; PCA colouring needs 3")));
    }
    let acts = policy.conv_activations(&frame.to_chw());
    let a = &acts[layer];
    let plane = s * s;
    // [pixels, channels]
    let samples = Tensor::from_fn(&[plane, f], |i| a[(i % f) * plane + i / f]);
    let (pca, proj) = project_top3(&samples)?;
    let mut degenerate = [false; 3];
    let mut pixels = vec![0u8; plane * 3];
    for k in 0..3 {
        let col: Vec<f32> = proj.iter().map(|p| p[k]).collect();
        let (lo, hi) = min_max(&col);
        degenerate[k] = pca.degenerate || pca.explained_variance_ratios[k] < DEGENERATE_RATIO || !(hi > lo);
        if degenerate[k] {
            continue;
        }
        for (i, &v) in col.iter().enumerate() {
            pixels[i * 3 + k] = ((v - lo) / (hi - lo) * 255.0).round() as u8;
        }
    }
    Ok(PcaImage {
        side: s,
        pixels,
        explained_variance: pca.explained_variance_ratios.clone(),
        degenerate,
    })
}
