// SPDX-License-Identifier: MIT OR Apache-2.0

//! The instrumented policy: conv encoder, causal transformer over a strict
//! sliding window, factored action heads, sampling and behavior cloning.
//!
//! Positions are encoded only through a learned per-head bias on the
//! attention score, indexed by query-key distance.

mod config;
mod forward;
mod params;
mod replay;
mod sample;
mod train;

pub use config::{ConvSpec, PolicyConfig, DEFAULT_CONV_STACK};
pub use forward::{
    policy_forward, ActionDistribution, ActivationRecord, FrameEntry, HeadPatch, Hooks, Steer,
    WindowActs, WindowCache,
};
pub use params::{BlockIdx, Layout, Policy, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use replay::{frame_entries, replay_entries, replay_forward, ReplayStep};
pub use sample::{argmax, gated_sample, sample_action, sample_indices, to_action};
pub use train::{
    action_accuracy, bind_params, generate_demos, greedy_indices, permute_labels, split_demos,
    tape_conv, tape_forward, train_bc, DemoConfig, Episode, FrameInput, TrainConfig, TrainMetrics,
};

#[cfg(test)]
pub(crate) mod tests;
