// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{window_starts, RecordingPlan, Trace, TraceManifest, TRACE_VERSION};
use crate::agent::{frame_entries, sample_indices, to_action, FrameEntry, Policy, ReplayStep, WindowCache};
use crate::error::{usage, Result};
use crate::intervention::{resolve, InterventionKind, InterventionSpec, Scope};
use crate::world::{ObsFrame, WorldState, EPISODE_CAP};

/// Live instrumented rollout that can be advanced step by step.
#[derive(Clone, Debug)]
pub struct Recorder {
    world: WorldState,
    cache: WindowCache,
    rng: ChaCha8Rng,
    plan: RecordingPlan,
    current: ObsFrame,
    tick0: u32,
    trace: Trace,
}

impl Recorder {
    pub fn new(
        world: WorldState,
        policy: &Policy,
        plan: RecordingPlan,
        rng_seed: u64,
        interventions: Vec<InterventionSpec>,
    ) -> Result<Self> {
        if plan.frame_stride == 0 {
            return Err(usage("frame stride must be at least 1"));
        }
        for s in &interventions {
            check_live(s, policy)?;
        }
        let mut current = world.render();
        current.t = 0;
        let tick0 = world.tick;
        let manifest = TraceManifest {
            format_version: TRACE_VERSION,
            seed: rng_seed,
            scenario: plan.scenario.clone(),
            policy_digest: policy.digest(),
            policy: policy.config.clone(),
            frames: 0,
            frame_stride: plan.frame_stride,
            temperature: policy.config.temperature,
            interventions,
            events: Vec::new(),
            arrays: Vec::new(),
        };
        Ok(Self {
            cache: WindowCache::new(policy.config.window),
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            trace: Trace {
                manifest,
                frames: Vec::new(),
                attn: Vec::new(),
                outputs: plan.store_outputs.then(Vec::new),
                mlp: plan.store_mlp.then(Vec::new),
                logits: Vec::new(),
                actions: Vec::new(),
                positions: Vec::new(),
            },
            world,
            plan,
            current,
            tick0,
        })
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn frames_recorded(&self) -> usize {
        self.trace.manifest.frames
    }

    pub fn done(&self) -> bool {
        !self.world.alive()
    }

    pub fn interventions(&self) -> &[InterventionSpec] {
        &self.trace.manifest.interventions
    }

    /// Replaces the interventions in force from the next frame on. Earlier
    /// frames keep the ones they were recorded under.
    pub fn set_interventions(&mut self, policy: &Policy, specs: Vec<InterventionSpec>) -> Result<()> {
        for s in &specs {
            check_live(s, policy)?;
        }
        let t = self.frames_recorded();
        let list = &mut self.trace.manifest.interventions;
        list.retain_mut(|s| {
            let sc = s.scope.unwrap_or_default();
            if sc.start >= t {
                return false;
            }
            if sc.end.map_or(true, |e| e > t) {
                s.scope = Some(Scope { start: sc.start, end: Some(t) });
            }
            true
        });
        for mut s in specs {
            let sc = s.scope.unwrap_or_default();
            let start = sc.start.max(t);
            if sc.end.is_some_and(|e| e <= start) {
                continue;
            }
            s.scope = Some(Scope { start, end: sc.end });
            list.push(s);
        }
        Ok(())
    }

    /// Observes, acts and advances the world once. Returns `false` when the
    /// episode had already ended.
    pub fn step(&mut self, policy: &Policy) -> Result<bool> {
        if self.done() {
            return Ok(false);
        }
        let t = self.frames_recorded();
        let fc = resolve(&self.trace.manifest.interventions, t, policy)?;
        if fc.memory_reset {
            self.cache.clear();
        }
        self.cache.push(policy.frame_entry(&self.current));
        let acts = policy.forward_window(&self.cache.entries(), &fc.hooks, self.plan.store_outputs);
        let rec = policy.record(&acts, self.plan.store_outputs);
        let dist = policy.distribution(&acts.logits);
        let idx = sample_indices(&dist, policy.config.temperature, &mut self.rng, &fc.gates);
        let action = to_action(&idx);

        let tr = &mut self.trace;
        if t % self.plan.frame_stride == 0 {
            tr.frames.push(self.current.clone());
        }
        tr.attn.extend_from_slice(&rec.attn);
        if let (Some(o), Some(src)) = (tr.outputs.as_mut(), rec.outputs.as_ref()) {
            o.extend_from_slice(src);
        }
        if let Some(m) = tr.mlp.as_mut() {
            m.extend_from_slice(&rec.mlp0);
        }
        tr.logits.extend_from_slice(&rec.logits);
        tr.actions.push(action);
        let a = &self.world.agent;
        tr.positions.push([a.x as i32, a.y as i32, a.facing.index() as i32, a.pitch as i32]);
        tr.manifest.frames += 1;

        let (mut next, events) = self.world.step(&action)?;
        for mut e in events {
            e.t -= self.tick0;
            tr.manifest.events.push(e);
        }
        next.t = (t + 1) as u32;
        self.current = next;
        Ok(true)
    }

    /// Steps until `max_steps` frames are recorded in total or the episode ends.
    pub fn run(&mut self, policy: &Policy, max_steps: usize) -> Result<()> {
        while self.frames_recorded() < max_steps && self.step(policy)? {}
        Ok(())
    }

    /// The trace recorded so far. Its manifest's array table is only filled
    /// in by [`Recorder::snapshot`] and [`Recorder::finish`].
    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    /// Copy of the trace recorded so far.
    pub fn snapshot(&self) -> Trace {
        let mut t = self.trace.clone();
        t.manifest.arrays = t.array_entries();
        t
    }

    pub fn finish(self) -> Trace {
        let mut t = self.trace;
        t.manifest.arrays = t.array_entries();
        t
    }
}

fn check_live(s: &InterventionSpec, policy: &Policy) -> Result<()> {
    if matches!(s.kind, InterventionKind::FrameEdit { .. }) {
        return Err(usage("frame edits apply to recorded frame streams, not live rollouts"));
    }
    s.validate(policy)
}

/// Plain instrumented rollout.
pub fn record_rollout(world: WorldState, policy: &Policy, plan: &RecordingPlan, max_steps: usize, rng_seed: u64) -> Result<Trace> {
    record_rollout_with(world, policy, plan, max_steps, rng_seed, Vec::new())
}

/// Rollout with live interventions in force.
pub fn record_rollout_with(
    world: WorldState,
    policy: &Policy,
    plan: &RecordingPlan,
    max_steps: usize,
    rng_seed: u64,
    interventions: Vec<InterventionSpec>,
) -> Result<Trace> {
    if max_steps > EPISODE_CAP as usize {
        return Err(usage(format!("max_steps {max_steps} exceeds the episode cap {EPISODE_CAP}")));
    }
    let mut r = Recorder::new(world, policy, plan.clone(), rng_seed, interventions)?;
    r.run(policy, max_steps)?;
    Ok(r.finish())
}

/// Teacher-forced replay under per-frame interventions. Frame `t` sees the
/// same window, hooks and memory resets a live rollout would have applied.
pub fn replay_with(
    policy: &Policy,
    frames: &[ObsFrame],
    specs: &[InterventionSpec],
    with_outputs: bool,
) -> Result<Vec<ReplayStep>> {
    if frames.is_empty() {
        return Err(usage("replay needs at least one frame"));
    }
    let entries = frame_entries(policy, frames);
    replay_entries_with(policy, &entries, specs, with_outputs)
}

pub(crate) fn replay_entries_with(
    policy: &Policy,
    entries: &[FrameEntry],
    specs: &[InterventionSpec],
    with_outputs: bool,
) -> Result<Vec<ReplayStep>> {
    let controls = (0..entries.len())
        .map(|t| resolve(specs, t, policy))
        .collect::<Result<Vec<_>>>()?;
    let starts = window_starts(specs, entries.len(), policy.config.window);
    Ok((0..entries.len())
        .into_par_iter()
        .map(|t| {
            let win: Vec<&FrameEntry> = entries[starts[t]..=t].iter().collect();
            let acts = policy.forward_window(&win, &controls[t].hooks, with_outputs);
            (policy.distribution(&acts.logits), policy.record(&acts, with_outputs))
        })
        .collect())
}

/// Replays a recorded trace with the interventions it was recorded under.
pub fn replay_trace(policy: &Policy, trace: &Trace) -> Result<Vec<ReplayStep>> {
    if policy.config != trace.manifest.policy {
        return Err(usage("policy configuration differs from the one that recorded the trace"));
    }
    replay_with(policy, trace.all_frames()?, &trace.manifest.interventions, trace.outputs.is_some())
}
