// SPDX-License-Identifier: MIT OR Apache-2.0

use rayon::prelude::*;

use super::forward::{ActionDistribution, ActivationRecord, FrameEntry, Hooks};
use super::params::Policy;
use crate::error::{usage, Result};
use crate::world::ObsFrame;

/// Per-frame output of a teacher-forced replay.
pub type ReplayStep = (ActionDistribution, ActivationRecord);

/// Frame entries for a whole episode, computed in parallel.
pub fn frame_entries(policy: &Policy, frames: &[ObsFrame]) -> Vec<FrameEntry> {
    frames
        .par_iter()
        .enumerate()
        .map(|(t, f)| {
            let x0 = policy.embed(&policy.frame_input(f));
            policy.frame_entry_from_embedding(t as u32, x0)
        })
        .collect()
}

/// Teacher-forced forward over a full episode. Output `t` equals what a
/// live rollout would have computed at frame `t`.
pub fn replay_forward(policy: &Policy, frames: &[ObsFrame], hooks: &Hooks, with_outputs: bool) -> Result<Vec<ReplayStep>> {
    if frames.is_empty() {
        return Err(usage("replay needs at least one frame"));
    }
    hooks.validate(policy)?;
    let entries = frame_entries(policy, frames);
    Ok(replay_entries(policy, &entries, hooks, with_outputs, false))
}

/// Replay from precomputed entries. With `reset`, every frame is processed
/// alone, as if the window were cleared before each step.
pub fn replay_entries(policy: &Policy, entries: &[FrameEntry], hooks: &Hooks, with_outputs: bool, reset: bool) -> Vec<ReplayStep> {
    let w = policy.config.window;
    (0..entries.len())
        .into_par_iter()
        .map(|t| {
            let start = if reset { t } else { (t + 1).saturating_sub(w) };
            let win: Vec<&FrameEntry> = entries[start..=t].iter().collect();
            let acts = policy.forward_window(&win, hooks, with_outputs);
            (policy.distribution(&acts.logits), policy.record(&acts, with_outputs))
        })
        .collect()
}
