// SPDX-License-Identifier: MIT OR Apache-2.0

//! Ablations, sweeps, memory resets, frame edits, steering and gating.

mod spec;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{frame_entries, ActionDistribution, FrameEntry, Hooks, Policy, WindowActs};
use crate::error::{usage, Error, Result};
use crate::trace::{record_rollout_with, window_starts, NdArray, RecordingPlan, Trace};
use crate::world::{
    build_scenario, expert_decision, generate_world, Action, ObsFrame, Pitch, ScenarioSpec, Turn, WorldState,
};

pub use crate::agent::gated_sample;
pub use spec::{resolve, AblationMode, FrameControl, FrameEdit, InterventionKind, InterventionSpec, Scope, SteerSite};

/// Floor applied to probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-9;

/// Probability and log-probability differences between two distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Impact {
    /// `p' - p` per factor and category.
    pub dp: Vec<Vec<f64>>,
    /// `ln p' - ln p` per factor and category, probabilities floored at 1e-9.
    pub dlogp: Vec<Vec<f64>>,
    pub max_abs_dp: f64,
    pub max_abs_dlogp: f64,
}

pub fn impact_metrics(baseline: &ActionDistribution, modified: &ActionDistribution) -> Result<Impact> {
    if baseline.probs.len() != modified.probs.len()
        || baseline.probs.iter().zip(&modified.probs).any(|(a, b)| a.len() != b.len())
    {
        return Err(Error::Shape("distributions have different factor shapes".into()));
    }
    let (mut dp, mut dl) = (Vec::new(), Vec::new());
    let (mut mp, mut ml) = (0.0f64, 0.0f64);
    for (a, b) in baseline.probs.iter().zip(&modified.probs) {
        let p: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| y as f64 - x as f64).collect();
        let l: Vec<f64> = a
            .iter()
            .zip(b)
            .map(|(&x, &y)| (y as f64).max(LOG_FLOOR).ln() - (x as f64).max(LOG_FLOOR).ln())
            .collect();
        mp = p.iter().fold(mp, |m, v| m.max(v.abs()));
        ml = l.iter().fold(ml, |m, v| m.max(v.abs()));
        dp.push(p);
        dl.push(l);
    }
    Ok(Impact {
        dp,
        dlogp: dl,
        max_abs_dp: mp,
        max_abs_dlogp: ml,
    })
}

/// Per-(layer, head) mean of the current-position head output over a
/// reference trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadMeans {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// `[L, H, d/H]`.
    pub means: Vec<f32>,
}

impl HeadMeans {
    pub fn from_trace(trace: &Trace) -> Result<Self> {
        let c = trace.config();
        let (nl, nh, dh, w) = (c.layers, c.heads, c.head_dim(), c.window);
        if trace.is_empty() {
            return Err(Error::MissingData("empty reference trace".into()));
        }
        let mut acc = vec![0.0f64; nl * nh * dh];
        for t in 0..trace.len() {
            for l in 0..nl {
                for h in 0..nh {
                    let o = trace.output(t, l, h, w - 1)?;
                    let dst = &mut acc[(l * nh + h) * dh..(l * nh + h + 1) * dh];
                    for (a, &v) in dst.iter_mut().zip(o) {
                        *a += v as f64;
                    }
                }
            }
        }
        let n = trace.len() as f64;
        Ok(Self {
            layers: nl,
            heads: nh,
            head_dim: dh,
            means: acc.into_iter().map(|v| (v / n) as f32).collect(),
        })
    }

    pub fn get(&self, layer: usize, head: usize) -> Result<&[f32]> {
        if layer >= self.layers || head >= self.heads {
            return Err(usage(format!("no statistics for head ({layer}, {head})")));
        }
        let o = (layer * self.heads + head) * self.head_dim;
        Ok(&self.means[o..o + self.head_dim])
    }
}

fn check_trace_policy(policy: &Policy, trace: &Trace) -> Result<()> {
    if policy.config != trace.manifest.policy {
        return Err(usage("policy configuration differs from the one that recorded the trace"));
    }
    Ok(())
}

fn window_entries(policy: &Policy, frames: &[ObsFrame], start: usize, t: usize) -> Vec<FrameEntry> {
    frame_entries(policy, &frames[start..=t])
}

/// Baseline from the trace and the distribution with `spec` active at frame
/// `t` only (on top of whatever the trace was recorded under).
pub fn ablate_and_eval(
    policy: &Policy,
    trace: &Trace,
    t: usize,
    spec: &InterventionSpec,
) -> Result<(ActionDistribution, ActionDistribution)> {
    check_trace_policy(policy, trace)?;
    if t >= trace.len() {
        return Err(usage(format!("frame {t} outside trace of {} frames", trace.len())));
    }
    spec.validate(policy)?;
    let mut frames = trace.all_frames()?.to_vec();
    if let InterventionKind::FrameEdit { edit } = &spec.kind {
        frames = edit_frames(&frames, edit)?;
        if t >= frames.len() {
            return Err(usage("frame index outside the edited stream"));
        }
    }
    let mut specs = trace.manifest.interventions.clone();
    specs.push(InterventionSpec::at_frame(spec.kind.clone(), t));
    let start = window_starts(&specs, t + 1, policy.config.window)[t];
    let fc = resolve(&specs, t, policy)?;
    let entries = window_entries(policy, &frames, start, t);
    let refs: Vec<&FrameEntry> = entries.iter().collect();
    let acts = policy.forward_window(&refs, &fc.hooks, false);
    Ok((trace.distribution(t), policy.distribution(&acts.logits)))
}

/// Outcome of ablating every `(layer, head, position)` output at one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub t: usize,
    /// Valid window positions at `t`; position `i` is slot `W-n+i`.
    pub n: usize,
    pub window: usize,
    pub layers: usize,
    pub heads: usize,
    pub mode: AblationMode,
    pub action_sizes: Vec<usize>,
    /// Flat baseline probabilities.
    pub baseline: Vec<f32>,
    /// `[L, H, n, A]` probability differences.
    #[serde(skip)]
    pub dp: Vec<f32>,
    /// `[L, H, n, A]` log-probability differences.
    #[serde(skip)]
    pub dlogp: Vec<f32>,
}

impl SweepResult {
    pub fn target_count(&self) -> usize {
        self.layers * self.heads * self.n
    }

    fn a(&self) -> usize {
        self.action_sizes.iter().sum()
    }

    pub fn slot(&self, i: usize) -> usize {
        self.window - self.n + i
    }

    pub fn dp_at(&self, l: usize, h: usize, i: usize) -> &[f32] {
        let a = self.a();
        let o = ((l * self.heads + h) * self.n + i) * a;
        &self.dp[o..o + a]
    }

    pub fn dlogp_at(&self, l: usize, h: usize, i: usize) -> &[f32] {
        let a = self.a();
        let o = ((l * self.heads + h) * self.n + i) * a;
        &self.dlogp[o..o + a]
    }

    /// Flat index of the attack category.
    pub fn attack_index(&self) -> usize {
        self.action_sizes[..2].iter().sum::<usize>() + 1
    }

    /// `[H, n]` map of |Δp(attack)| for one layer.
    pub fn attack_heatmap(&self, layer: usize) -> Vec<f32> {
        let k = self.attack_index();
        (0..self.heads)
            .flat_map(|h| (0..self.n).map(move |i| (h, i)))
            .map(|(h, i)| self.dp_at(layer, h, i)[k].abs())
            .collect()
    }

    /// `[H, n]` map of the max |Δp| over all categories for one layer.
    pub fn max_heatmap(&self, layer: usize) -> Vec<f32> {
        (0..self.heads)
            .flat_map(|h| (0..self.n).map(move |i| (h, i)))
            .map(|(h, i)| self.dp_at(layer, h, i).iter().fold(0.0f32, |m, v| m.max(v.abs())))
            .collect()
    }

    pub fn max_attack_impact(&self) -> f32 {
        (0..self.layers).flat_map(|l| self.attack_heatmap(l)).fold(0.0, f32::max)
    }

    pub fn max_impact(&self) -> f32 {
        self.dp.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Arrays for persistence: `dp`, `dlogp` (`[L,H,n,A]`) and `baseline`.
    pub fn arrays(&self) -> Result<Vec<(String, NdArray)>> {
        let shape = vec![self.layers, self.heads, self.n, self.a()];
        Ok(vec![
            ("dp".into(), NdArray::f32(shape.clone(), self.dp.clone())?),
            ("dlogp".into(), NdArray::f32(shape, self.dlogp.clone())?),
            ("baseline".into(), NdArray::f32(vec![self.a()], self.baseline.clone())?),
        ])
    }
}

/// Logits after replacing head `h`'s output at position `i` of layer `l`,
/// recomputing only what depends on it.
fn ablated_logits(policy: &Policy, base: &WindowActs, hooks: &Hooks, l: usize, h: usize, i: usize, value: Option<&[f32]>) -> Vec<f32> {
    let cfg = &policy.config;
    let (d, dh, nl, nh, n) = (cfg.d_model, cfg.head_dim(), cfg.layers, cfg.heads, base.n);
    if l + 1 == nl && i + 1 != n {
        // Earlier positions of the last layer do not reach the logits.
        return base.logits.clone();
    }
    let row = |j: usize| j * d..(j + 1) * d;
    let mut heads = base.heads[l][row(i)].to_vec();
    let dst = &mut heads[h * dh..(h + 1) * dh];
    match value {
        Some(v) => dst.copy_from_slice(v),
        None => dst.fill(0.0),
    }
    let steer = if l == 0 { hooks.steer.as_ref() } else { None };
    let mut x = base.x[l + 1].clone();
    policy.block_tail(l, &base.x[l][row(i)], &heads, steer, &mut x[row(i)]);
    let mut wbuf = vec![0.0; n];
    for l2 in l + 1..nl {
        let (mut q, mut k, mut v) = (base.q[l2].clone(), base.k[l2].clone(), base.v[l2].clone());
        for j in i..n {
            policy.qkv_row(l2, &x[row(j)], &mut q[row(j)], &mut k[row(j)], &mut v[row(j)]);
        }
        let rows = if l2 + 1 == nl { n - 1..n } else { i..n };
        let mut hd = base.heads[l2].clone();
        for j in rows.clone() {
            for hh in 0..nh {
                policy.attend(l2, hh, j, &q, &k, &v, &mut hd[j * d + hh * dh..j * d + (hh + 1) * dh], &mut wbuf);
            }
        }
        policy.apply_patches(l2, n, &mut hd, hooks);
        let mut xn = base.x[l2 + 1].clone();
        for j in rows {
            policy.block_tail(l2, &x[row(j)], &hd[row(j)], None, &mut xn[row(j)]);
        }
        x = xn;
    }
    policy.head_logits(&x[row(n - 1)])
}

/// Ablates every head output at every valid window position of frame `t`,
/// one at a time. Mean mode needs `means`.
pub fn sweep_frame(policy: &Policy, trace: &Trace, t: usize, mode: AblationMode, means: Option<&HeadMeans>) -> Result<SweepResult> {
    check_trace_policy(policy, trace)?;
    if t >= trace.len() {
        return Err(usage(format!("frame {t} outside trace of {} frames", trace.len())));
    }
    let frames = trace.all_frames()?;
    let start = trace.window_starts()[t];
    let fc = resolve(&trace.manifest.interventions, t, policy)?;
    let entries = window_entries(policy, frames, start, t);
    sweep_entries(policy, &entries, &fc.hooks, t, mode, means)
}

/// Sweep over an explicit window of entries (oldest first).
pub fn sweep_entries(
    policy: &Policy,
    entries: &[FrameEntry],
    hooks: &Hooks,
    t: usize,
    mode: AblationMode,
    means: Option<&HeadMeans>,
) -> Result<SweepResult> {
    let cfg = &policy.config;
    let (nl, nh) = (cfg.layers, cfg.heads);
    if mode == AblationMode::Mean && means.is_none() {
        return Err(usage("mean ablation needs reference statistics"));
    }
    let refs: Vec<&FrameEntry> = entries.iter().collect();
    let base = policy.forward_window(&refs, hooks, false);
    let n = base.n;
    let baseline = policy.distribution(&base.logits);
    let targets: Vec<(usize, usize, usize)> = (0..nl)
        .flat_map(|l| (0..nh).flat_map(move |h| (0..n).map(move |i| (l, h, i))))
        .collect();
    let rows: Vec<Result<(Vec<f32>, Vec<f32>)>> = targets
        .par_iter()
        .map(|&(l, h, i)| {
            let value = match mode {
                AblationMode::Zero => None,
                AblationMode::Mean => Some(means.unwrap().get(l, h)?),
            };
            let logits = ablated_logits(policy, &base, hooks, l, h, i, value);
            let m = impact_metrics(&baseline, &policy.distribution(&logits))?;
            Ok((
                m.dp.concat().into_iter().map(|v| v as f32).collect(),
                m.dlogp.concat().into_iter().map(|v| v as f32).collect(),
            ))
        })
        .collect();
    let a = cfg.n_actions();
    let mut dp = Vec::with_capacity(targets.len() * a);
    let mut dlogp = Vec::with_capacity(targets.len() * a);
    for r in rows {
        let (p, l) = r?;
        dp.extend(p);
        dlogp.extend(l);
    }
    Ok(SweepResult {
        t,
        n,
        window: cfg.window,
        layers: nl,
        heads: nh,
        mode,
        action_sizes: cfg.action_sizes.clone(),
        baseline: baseline.flat_probs(),
        dp,
        dlogp,
    })
}

/// Live rollout with one head's outputs replaced by its reference mean at
/// every position and frame.
#[allow(clippy::too_many_arguments)]
pub fn mean_ablate_head_rollout(
    policy: &Policy,
    world: WorldState,
    layer: usize,
    head: usize,
    stats: Option<&HeadMeans>,
    plan: &RecordingPlan,
    max_steps: usize,
    rng_seed: u64,
) -> Result<Trace> {
    let stats = stats.ok_or_else(|| usage("mean ablation needs reference statistics"))?;
    let spec = InterventionKind::AblateHead {
        layer,
        head,
        mode: AblationMode::Mean,
        mean: Some(stats.get(layer, head)?.to_vec()),
    };
    record_rollout_with(world, policy, plan, max_steps, rng_seed, vec![spec.into()])
}

/// Live rollout in which the policy only ever sees the current frame.
pub fn memory_reset_rollout(policy: &Policy, world: WorldState, plan: &RecordingPlan, max_steps: usize, rng_seed: u64) -> Result<Trace> {
    record_rollout_with(world, policy, plan, max_steps, rng_seed, vec![InterventionKind::MemoryReset.into()])
}

/// Live rollout with `alpha · vector` added to the block-0 MLP hidden layer.
#[allow(clippy::too_many_arguments)]
pub fn steer_rollout(
    policy: &Policy,
    world: WorldState,
    vector: &[f32],
    alpha: f32,
    plan: &RecordingPlan,
    max_steps: usize,
    rng_seed: u64,
) -> Result<Trace> {
    let spec = InterventionKind::Steer {
        site: SteerSite::Block0Mlp,
        vector: vector.to_vec(),
        alpha,
    };
    record_rollout_with(world, policy, plan, max_steps, rng_seed, vec![spec.into()])
}

/// Live rollout with an action-factor gate.
#[allow(clippy::too_many_arguments)]
pub fn gate_rollout(
    policy: &Policy,
    world: WorldState,
    factor: usize,
    threshold: f64,
    plan: &RecordingPlan,
    max_steps: usize,
    rng_seed: u64,
) -> Result<Trace> {
    let spec = InterventionKind::Gate { factor, threshold };
    record_rollout_with(world, policy, plan, max_steps, rng_seed, vec![spec.into()])
}

/// Applies a frame edit. Frames are renumbered `0..` in the result.
pub fn edit_frames(frames: &[ObsFrame], edit: &FrameEdit) -> Result<Vec<ObsFrame>> {
    if frames.is_empty() {
        return Err(usage("no frames to edit"));
    }
    let mut out: Vec<ObsFrame> = match *edit {
        FrameEdit::RepeatFirst { n } => {
            if n == 0 {
                return Err(usage("repeat count must be at least 1"));
            }
            std::iter::repeat(frames[0].clone()).take(n).chain(frames[1..].iter().cloned()).collect()
        }
        FrameEdit::Replace { t_dst, t_src } => {
            if t_dst >= frames.len() || t_src >= frames.len() {
                return Err(usage(format!("replace({t_dst}, {t_src}) outside {} frames", frames.len())));
            }
            let mut v = frames.to_vec();
            v[t_dst].pixels = frames[t_src].pixels.clone();
            v
        }
        FrameEdit::SolidColor { t_start, length, rgb } => {
            if length == 0 || t_start + length > frames.len() {
                return Err(usage(format!(
                    "solid color [{t_start}, {}) outside {} frames",
                    t_start + length,
                    frames.len()
                )));
            }
            let mut v = frames.to_vec();
            for f in &mut v[t_start..t_start + length] {
                *f = ObsFrame::solid(f.t, rgb);
            }
            v
        }
    };
    for (i, f) in out.iter_mut().enumerate() {
        f.t = i as u32;
    }
    Ok(out)
}

/// Mean block-0 MLP activation over `pos` minus the mean over `neg`, each
/// frame seen alone.
pub fn compute_steering_vector(policy: &Policy, pos: &[ObsFrame], neg: &[ObsFrame], site: SteerSite) -> Result<Vec<f32>> {
    let SteerSite::Block0Mlp = site;
    if pos.is_empty() || neg.is_empty() {
        return Err(usage("steering vector needs positive and negative frames"));
    }
    let mean = |frames: &[ObsFrame]| -> Vec<f64> {
        let acts: Vec<Vec<f32>> = frames
            .par_iter()
            .map(|f| {
                let e = policy.frame_entry(f);
                policy.forward_window(&[&e], &Hooks::default(), false).mlp0_last
            })
            .collect();
        let mut acc = vec![0.0f64; policy.config.mlp_hidden];
        for a in &acts {
            for (s, &v) in acc.iter_mut().zip(a) {
                *s += v as f64;
            }
        }
        acc.iter().map(|s| s / frames.len() as f64).collect()
    };
    let (p, n) = (mean(pos), mean(neg));
    Ok(p.iter().zip(&n).map(|(a, b)| (a - b) as f32).collect())
}

/// Frames for the default tree-minus-field steering vector.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SteeringRecipe {
    /// Procedural worlds `base_seed..base_seed + worlds` supply positive frames.
    pub base_seed: u64,
    pub worlds: usize,
    pub steps: usize,
    /// Empty-field frames used as negatives.
    pub negatives: usize,
}

impl Default for SteeringRecipe {
    fn default() -> Self {
        Self {
            base_seed: 20_000,
            worlds: 10,
            steps: 200,
            negatives: 40,
        }
    }
}

impl SteeringRecipe {
    /// Positives are frames on which the scripted expert attacks a trunk at
    /// level pitch; negatives walk and turn around an empty field.
    pub fn frames(&self) -> Result<(Vec<ObsFrame>, Vec<ObsFrame>)> {
        let pos: Vec<Vec<ObsFrame>> = (0..self.worlds as u64)
            .into_par_iter()
            .map(|i| {
                let mut w = generate_world(self.base_seed + i, (32, 32))?;
                let mut out = Vec::new();
                for _ in 0..self.steps {
                    if !w.alive() {
                        break;
                    }
                    let a = expert_decision(&w).action;
                    if a.attack && w.agent.pitch == Pitch::Level {
                        out.push(w.render());
                    }
                    w.step(&a)?;
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;
        let pos: Vec<ObsFrame> = pos.into_iter().flatten().collect();
        let mut w = build_scenario(&ScenarioSpec::preset("empty_field", self.base_seed)?)?;
        let mut neg = Vec::with_capacity(self.negatives);
        for i in 0..self.negatives {
            neg.push(w.render());
            let a = if i % 3 == 2 { Action::turn(Turn::Right) } else { Action::forward() };
            w.step(&a)?;
        }
        Ok((pos, neg))
    }
}

#[cfg(test)]
mod tests;
