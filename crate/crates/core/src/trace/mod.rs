// SPDX-License-Identifier: MIT OR Apache-2.0

//! Instrumented rollouts and their on-disk record.
//!
//! A trace directory holds a JSON `manifest` plus one flat binary array per
//! quantity. Slot `m` of an attention row at frame `t` refers to absolute
//! frame `t-(W-1)+m`; slots before the window start hold exact zeros.

pub mod format;
mod demos;
mod record;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::{ActionDistribution, PolicyConfig};
use crate::error::{Error, Result};
use crate::intervention::{InterventionKind, InterventionSpec};
use crate::world::{Action, Event, EventKind, Facing, ObsFrame, FRAME_CHANNELS, FRAME_SIZE};

pub use format::{encoded_len, ArrayData, DType, NdArray, ARRAY_MAGIC, ARRAY_VERSION};
pub use demos::{load_demos, save_demos, DEMOS_FILE};
pub use record::{record_rollout, record_rollout_with, replay_trace, replay_with, Recorder};

pub const TRACE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordingPlan {
    /// Keep per-position head outputs (large).
    pub store_outputs: bool,
    /// Keep the block-0 MLP hidden activation of the current position.
    pub store_mlp: bool,
    /// Store every `frame_stride`-th observation; 1 keeps the trace replayable.
    pub frame_stride: usize,
    /// Free-form scenario label written to the manifest.
    pub scenario: String,
}

impl Default for RecordingPlan {
    fn default() -> Self {
        Self {
            store_outputs: true,
            store_mlp: true,
            frame_stride: 1,
            scenario: "custom".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub file: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Exact encoded file size.
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceManifest {
    pub format_version: u32,
    pub seed: u64,
    pub scenario: String,
    pub policy_digest: String,
    pub policy: PolicyConfig,
    /// Frame count `T`.
    pub frames: usize,
    pub frame_stride: usize,
    pub temperature: f32,
    pub interventions: Vec<InterventionSpec>,
    /// World events; `t` is the frame whose action produced the event.
    pub events: Vec<Event>,
    pub arrays: Vec<ArrayEntry>,
}

/// Per-frame agent pose: `(x, y, facing, pitch)` as stored in `positions.bin`.
pub type Pose = [i32; 4];

/// Per-frame record of one rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub manifest: TraceManifest,
    /// Stored observations, every `frame_stride`-th frame.
    pub frames: Vec<ObsFrame>,
    /// `[T, L, H, W]`.
    pub attn: Vec<f32>,
    /// `[T, L, H, W, d/H]`.
    pub outputs: Option<Vec<f32>>,
    /// `[T, mlp_hidden]`.
    pub mlp: Option<Vec<f32>>,
    /// `[T, A]`.
    pub logits: Vec<f32>,
    pub actions: Vec<Action>,
    pub positions: Vec<Pose>,
}

/// One point of a top-down trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: usize,
    pub x: i32,
    pub y: i32,
    pub facing: Facing,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.manifest.frames
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.manifest.policy
    }

    fn check_head(&self, layer: usize, head: usize) -> Result<()> {
        let c = self.config();
        if layer >= c.layers || head >= c.heads {
            return Err(Error::Usage(format!("head ({layer}, {head}) outside {}x{}", c.layers, c.heads)));
        }
        Ok(())
    }

    /// Stored weights of head `(layer, head)` at frame `t`, length `W`.
    pub fn attn_row(&self, t: usize, layer: usize, head: usize) -> &[f32] {
        let c = self.config();
        let w = c.window;
        let o = ((t * c.layers + layer) * c.heads + head) * w;
        &self.attn[o..o + w]
    }

    /// Stored output of `(layer, head)` at window slot `slot` of frame `t`.
    pub fn output(&self, t: usize, layer: usize, head: usize, slot: usize) -> Result<&[f32]> {
        let out = self
            .outputs
            .as_ref()
            .ok_or_else(|| Error::MissingData("trace was recorded without head outputs".into()))?;
        self.check_head(layer, head)?;
        let c = self.config();
        let dh = c.head_dim();
        let o = (((t * c.layers + layer) * c.heads + head) * c.window + slot) * dh;
        Ok(&out[o..o + dh])
    }

    pub fn logits_at(&self, t: usize) -> &[f32] {
        let a = self.config().n_actions();
        &self.logits[t * a..(t + 1) * a]
    }

    /// The distribution the policy produced at frame `t`.
    pub fn distribution(&self, t: usize) -> ActionDistribution {
        ActionDistribution::from_logits(self.logits_at(t), &self.config().action_sizes)
    }

    pub fn frame(&self, t: usize) -> Option<&ObsFrame> {
        let s = self.manifest.frame_stride;
        if t % s != 0 {
            return None;
        }
        self.frames.get(t / s)
    }

    /// Every observation, for replay.
    pub fn all_frames(&self) -> Result<&[ObsFrame]> {
        if self.manifest.frame_stride != 1 {
            return Err(Error::MissingData(format!(
                "frames stored with stride {}; replay needs every frame",
                self.manifest.frame_stride
            )));
        }
        Ok(&self.frames)
    }

    pub fn events_at(&self, t: usize) -> impl Iterator<Item = &Event> {
        self.manifest.events.iter().filter(move |e| e.t as usize == t)
    }

    /// Frames carrying an event matching `pred`.
    pub fn event_frames(&self, pred: impl Fn(&EventKind) -> bool) -> Vec<usize> {
        let mut v: Vec<usize> = self.manifest.events.iter().filter(|e| pred(&e.kind)).map(|e| e.t as usize).collect();
        v.dedup();
        v
    }

    pub fn craft_count(&self) -> usize {
        self.manifest.events.iter().filter(|e| matches!(e.kind, EventKind::Craft { .. })).count()
    }

    pub fn attack_count(&self) -> usize {
        self.actions.iter().filter(|a| a.attack).count()
    }

    /// Start frame of the window seen at each frame (memory resets shorten it).
    pub fn window_starts(&self) -> Vec<usize> {
        window_starts(&self.manifest.interventions, self.len(), self.config().window)
    }

    /// Checks normalization and causality of every stored attention row.
    pub fn check_attention(&self, tol: f32) -> std::result::Result<(), String> {
        let c = self.config();
        let w = c.window;
        for (t, &start) in self.window_starts().iter().enumerate() {
            let valid = t + 1 - start;
            for l in 0..c.layers {
                for h in 0..c.heads {
                    let row = self.attn_row(t, l, h);
                    if row[..w - valid].iter().any(|&x| x != 0.0) {
                        return Err(format!("t={t} ({l},{h}): weight on an empty or future slot"));
                    }
                    let s: f32 = row.iter().sum();
                    if (s - 1.0).abs() > tol {
                        return Err(format!("t={t} ({l},{h}): row sums to {s}"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Array descriptors matching the data held.
    pub fn array_entries(&self) -> Vec<ArrayEntry> {
        self.arrays().into_iter().map(|(name, a)| entry(&name, &a)).collect()
    }

    fn arrays(&self) -> Vec<(String, NdArray)> {
        let c = self.config();
        let t = self.len();
        let (nl, nh, w, dh) = (c.layers, c.heads, c.window, c.head_dim());
        let mut pixels = Vec::with_capacity(self.frames.len() * FRAME_SIZE * FRAME_SIZE * FRAME_CHANNELS);
        for f in &self.frames {
            pixels.extend_from_slice(&f.pixels);
        }
        let mk = |r: Result<NdArray>| r.expect("trace buffers match their shapes");
        let mut v = vec![
            (
                "frames".to_string(),
                mk(NdArray::u8(vec![self.frames.len(), FRAME_SIZE, FRAME_SIZE, FRAME_CHANNELS], pixels)),
            ),
            ("attn".to_string(), mk(NdArray::f32(vec![t, nl, nh, w], self.attn.clone()))),
        ];
        if let Some(o) = &self.outputs {
            v.push(("outputs".into(), mk(NdArray::f32(vec![t, nl, nh, w, dh], o.clone()))));
        }
        if let Some(m) = &self.mlp {
            v.push(("mlp".into(), mk(NdArray::f32(vec![t, c.mlp_hidden], m.clone()))));
        }
        v.push(("logits".into(), mk(NdArray::f32(vec![t, c.n_actions()], self.logits.clone()))));
        let acts: Vec<u8> = self.actions.iter().flat_map(|a| a.indices().map(|i| i as u8)).collect();
        v.push(("actions".into(), mk(NdArray::u8(vec![t, 4], acts))));
        let pos: Vec<i32> = self.positions.iter().flatten().copied().collect();
        v.push(("positions".into(), mk(NdArray::i32(vec![t, 4], pos))));
        v
    }

    /// Encoded files `(name, bytes)`, manifest last.
    pub fn to_files(&self) -> Result<Vec<(String, Vec<u8>)>> {
        let mut files = Vec::new();
        let mut manifest = self.manifest.clone();
        manifest.arrays.clear();
        for (name, a) in self.arrays() {
            manifest.arrays.push(entry(&name, &a));
            files.push((format!("{name}.bin"), a.to_bytes()));
        }
        let mut text = serde_json::to_vec_pretty(&manifest)?;
        text.push(b'\n');
        files.push((MANIFEST_FILE.to_string(), text));
        Ok(files)
    }
}

fn entry(name: &str, a: &NdArray) -> ArrayEntry {
    ArrayEntry {
        name: name.to_string(),
        file: format!("{name}.bin"),
        dtype: a.dtype(),
        shape: a.shape.clone(),
        bytes: encoded_len(a.dtype(), &a.shape),
    }
}

pub fn window_starts(specs: &[InterventionSpec], len: usize, window: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(len);
    let mut reset_at = 0;
    for t in 0..len {
        if specs.iter().any(|s| matches!(s.kind, InterventionKind::MemoryReset) && s.applies(t)) {
            reset_at = t;
        }
        out.push(reset_at.max((t + 1).saturating_sub(window)));
    }
    out
}

/// Writes a trace directory. Existing array files are overwritten.
pub fn save_trace(trace: &Trace, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, bytes) in trace.to_files()? {
        std::fs::write(dir.join(name), bytes)?;
    }
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<TraceManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read(&path)?;
    let value: serde_json::Value = serde_json::from_slice(&text).map_err(|e| Error::Corruption {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let version = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != TRACE_VERSION {
        return Err(Error::Version {
            found: version,
            expected: TRACE_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| Error::Corruption {
        path,
        reason: e.to_string(),
    })
}

/// Reads a trace directory; any checksum, shape or size mismatch is a
/// corruption error.
pub fn load_trace(dir: &Path) -> Result<Trace> {
    let manifest = load_manifest(dir)?;
    let c = manifest.policy.clone();
    c.validate()?;
    let t = manifest.frames;
    let corrupt = |p: &Path, r: String| Error::Corruption {
        path: p.to_path_buf(),
        reason: r,
    };
    let get = |name: &str, required: bool| -> Result<Option<NdArray>> {
        let Some(e) = manifest.arrays.iter().find(|e| e.name == name) else {
            if required {
                return Err(corrupt(&dir.join(MANIFEST_FILE), format!("manifest lists no '{name}' array")));
            }
            return Ok(None);
        };
        let path = dir.join(&e.file);
        let a = NdArray::load(&path)?;
        if a.shape != e.shape || a.dtype() != e.dtype {
            return Err(corrupt(&path, "array differs from manifest".into()));
        }
        if a.shape.first() != Some(&t) && name != "frames" {
            return Err(corrupt(&path, format!("leading dimension is not {t}")));
        }
        Ok(Some(a))
    };
    let frames_a = get("frames", true)?.unwrap();
    let attn = get("attn", true)?.unwrap();
    let outputs = get("outputs", false)?;
    let mlp = get("mlp", false)?;
    let logits = get("logits", true)?.unwrap();
    let actions = get("actions", true)?.unwrap();
    let positions = get("positions", true)?.unwrap();

    let stride = manifest.frame_stride.max(1);
    let expect = |a: &NdArray, shape: Vec<usize>, name: &str| -> Result<()> {
        if a.shape != shape {
            return Err(corrupt(&dir.join(format!("{name}.bin")), format!("shape {:?}, expected {shape:?}", a.shape)));
        }
        Ok(())
    };
    let nf = t.div_ceil(stride);
    expect(&frames_a, vec![nf, FRAME_SIZE, FRAME_SIZE, FRAME_CHANNELS], "frames")?;
    expect(&attn, vec![t, c.layers, c.heads, c.window], "attn")?;
    if let Some(o) = &outputs {
        expect(o, vec![t, c.layers, c.heads, c.window, c.head_dim()], "outputs")?;
    }
    if let Some(m) = &mlp {
        expect(m, vec![t, c.mlp_hidden], "mlp")?;
    }
    expect(&logits, vec![t, c.n_actions()], "logits")?;
    expect(&actions, vec![t, 4], "actions")?;
    expect(&positions, vec![t, 4], "positions")?;

    let frame_len = FRAME_SIZE * FRAME_SIZE * FRAME_CHANNELS;
    let frames = match frames_a.data {
        ArrayData::U8(px) => px
            .chunks_exact(frame_len)
            .enumerate()
            .map(|(i, p)| ObsFrame {
                t: (i * stride) as u32,
                pixels: p.to_vec(),
            })
            .collect(),
        _ => return Err(corrupt(&dir.join("frames.bin"), "expected u8 frames".into())),
    };
    let f32s = |a: NdArray, name: &str| a.into_f32(&dir.join(format!("{name}.bin")));
    let actions = match actions.data {
        ArrayData::U8(v) => v
            .chunks_exact(4)
            .map(|c| {
                Action::from_indices([c[0] as usize, c[1] as usize, c[2] as usize, c[3] as usize])
                    .ok_or_else(|| corrupt(&dir.join("actions.bin"), "invalid action index".into()))
            })
            .collect::<Result<Vec<_>>>()?,
        _ => return Err(corrupt(&dir.join("actions.bin"), "expected u8 actions".into())),
    };
    let positions = match positions.data {
        ArrayData::I32(v) => v.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
        _ => return Err(corrupt(&dir.join("positions.bin"), "expected i32 positions".into())),
    };
    Ok(Trace {
        attn: f32s(attn, "attn")?,
        outputs: outputs.map(|o| f32s(o, "outputs")).transpose()?,
        mlp: mlp.map(|m| f32s(m, "mlp")).transpose()?,
        logits: f32s(logits, "logits")?,
        manifest,
        frames,
        actions,
        positions,
    })
}

/// Top-down path of the agent, one record per frame.
pub fn export_trajectory(trace: &Trace) -> Vec<TrajectoryPoint> {
    trace
        .positions
        .iter()
        .enumerate()
        .map(|(t, p)| TrajectoryPoint {
            t,
            x: p[0],
            y: p[1],
            facing: Facing::ALL[p[2].clamp(0, 3) as usize],
        })
        .collect()
}
