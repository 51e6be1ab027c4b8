// SPDX-License-Identifier: MIT OR Apache-2.0

//! Serializable intervention descriptions and their per-frame resolution
//! into forward hooks.

use serde::{Deserialize, Serialize};

use crate::agent::{HeadPatch, Hooks, Policy, Steer};
use crate::error::{usage, Result};
use crate::world::Rgb;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    #[default]
    Zero,
    Mean,
}

/// Where a steering vector is added. Only the block-0 MLP hidden layer is
/// instrumented.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteerSite {
    #[default]
    Block0Mlp,
}

/// Transformation of a recorded frame stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "edit")]
pub enum FrameEdit {
    /// `n` copies of frame 0 followed by the original frames `1..`.
    RepeatFirst { n: usize },
    Replace { t_dst: usize, t_src: usize },
    SolidColor { t_start: usize, length: usize, rgb: Rgb },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InterventionKind {
    /// One head output at one window position.
    AblateOutput {
        layer: usize,
        head: usize,
        position: usize,
        #[serde(default)]
        mode: AblationMode,
        /// Replacement for `mode = mean`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mean: Option<Vec<f32>>,
    },
    /// Every position of one head.
    AblateHead {
        layer: usize,
        head: usize,
        #[serde(default)]
        mode: AblationMode,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mean: Option<Vec<f32>>,
    },
    MemoryReset,
    FrameEdit { edit: FrameEdit },
    Steer {
        #[serde(default)]
        site: SteerSite,
        vector: Vec<f32>,
        alpha: f32,
    },
    Gate { factor: usize, threshold: f64 },
}

/// Half-open frame range `[start, end)`; `end = None` is unbounded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scope {
    pub start: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end: Option<usize>,
}

impl Scope {
    pub fn contains(&self, t: usize) -> bool {
        t >= self.start && self.end.map_or(true, |e| t < e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    #[serde(flatten)]
    pub kind: InterventionKind,
    /// Frames the intervention applies to; all frames when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<Scope>,
}

impl From<InterventionKind> for InterventionSpec {
    fn from(kind: InterventionKind) -> Self {
        Self { kind, scope: None }
    }
}

impl InterventionSpec {
    pub fn at_frame(kind: InterventionKind, t: usize) -> Self {
        Self {
            kind,
            scope: Some(Scope { start: t, end: Some(t + 1) }),
        }
    }

    pub fn applies(&self, t: usize) -> bool {
        self.scope.map_or(true, |s| s.contains(t))
    }

    /// Checks indices and sizes against a policy configuration.
    pub fn validate(&self, policy: &Policy) -> Result<()> {
        let c = &policy.config;
        let head_ok = |layer: usize, head: usize| {
            if layer >= c.layers || head >= c.heads {
                Err(usage(format!("head ({layer}, {head}) outside {}x{}", c.layers, c.heads)))
            } else {
                Ok(())
            }
        };
        let mean_ok = |mode: AblationMode, mean: &Option<Vec<f32>>| match (mode, mean) {
            (AblationMode::Mean, None) => Err(usage("mean ablation without reference statistics")),
            (AblationMode::Mean, Some(m)) if m.len() != c.head_dim() => {
                Err(usage("mean vector length differs from head width"))
            }
            _ => Ok(()),
        };
        match &self.kind {
            InterventionKind::AblateOutput { layer, head, position, mode, mean } => {
                head_ok(*layer, *head)?;
                if *position >= c.window {
                    return Err(usage(format!("window position {position} >= {}", c.window)));
                }
                mean_ok(*mode, mean)
            }
            InterventionKind::AblateHead { layer, head, mode, mean } => {
                head_ok(*layer, *head)?;
                mean_ok(*mode, mean)
            }
            InterventionKind::Steer { vector, alpha, .. } => {
                if vector.len() != c.mlp_hidden {
                    return Err(usage(format!(
                        "steering vector length {} differs from site width {}",
                        vector.len(),
                        c.mlp_hidden
                    )));
                }
                if !alpha.is_finite() {
                    return Err(usage("steering coefficient must be finite"));
                }
                Ok(())
            }
            InterventionKind::Gate { factor, threshold } => {
                if *factor >= c.action_sizes.len() {
                    return Err(usage(format!("action factor {factor} out of range")));
                }
                if !(0.0..=1.0).contains(threshold) {
                    return Err(usage("gate threshold must lie in [0, 1]"));
                }
                Ok(())
            }
            InterventionKind::MemoryReset | InterventionKind::FrameEdit { .. } => Ok(()),
        }
    }
}

/// Everything an intervention list asks of one frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameControl {
    pub hooks: Hooks,
    pub gates: Vec<(usize, f64)>,
    pub memory_reset: bool,
}

/// Resolves the interventions active at frame `t`. Frame edits are ignored
/// here; they act on the frame stream, not on the forward pass.
pub fn resolve(specs: &[InterventionSpec], t: usize, policy: &Policy) -> Result<FrameControl> {
    let mut fc = FrameControl::default();
    for s in specs {
        s.validate(policy)?;
        if !s.applies(t) {
            continue;
        }
        let value = |mode: AblationMode, mean: &Option<Vec<f32>>| match mode {
            AblationMode::Zero => None,
            AblationMode::Mean => mean.clone(),
        };
        match &s.kind {
            InterventionKind::AblateOutput { layer, head, position, mode, mean } => fc.hooks.patches.push(HeadPatch {
                layer: *layer,
                head: *head,
                slot: Some(*position),
                value: value(*mode, mean),
            }),
            InterventionKind::AblateHead { layer, head, mode, mean } => fc.hooks.patches.push(HeadPatch {
                layer: *layer,
                head: *head,
                slot: None,
                value: value(*mode, mean),
            }),
            InterventionKind::MemoryReset => fc.memory_reset = true,
            InterventionKind::FrameEdit { .. } => {}
            InterventionKind::Steer { vector, alpha, .. } => match &mut fc.hooks.steer {
                None => {
                    fc.hooks.steer = Some(Steer {
                        vector: vector.clone(),
                        alpha: *alpha,
                    })
                }
                Some(_) => return Err(usage("at most one steering vector may be active per frame")),
            },
            InterventionKind::Gate { factor, threshold } => fc.gates.push((*factor, *threshold)),
        }
    }
    Ok(fc)
}
