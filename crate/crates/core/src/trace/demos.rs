// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk demonstration sets: a `demos` JSON index plus one frames array
//! and one actions array per episode, in the trace array format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::format::{ArrayData, NdArray};
use crate::agent::Episode;
use crate::error::{Error, Result};
use crate::world::{Action, ObsFrame, FRAME_CHANNELS, FRAME_SIZE};

pub const DEMOS_FILE: &str = "demos";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DemoIndex {
    episodes: Vec<DemoEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DemoEntry {
    frames: usize,
    frames_file: String,
    actions_file: String,
}

pub fn save_demos(demos: &[Episode], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut index = DemoIndex { episodes: Vec::new() };
    for (i, ep) in demos.iter().enumerate() {
        let n = ep.frames.len();
        let frames_file = format!("ep{i:05}.frames.bin");
        let actions_file = format!("ep{i:05}.actions.bin");
        let pixels: Vec<u8> = ep.frames.iter().flat_map(|f| f.pixels.iter().copied()).collect();
        NdArray::u8(vec![n, FRAME_SIZE, FRAME_SIZE, FRAME_CHANNELS], pixels)?.save(&dir.join(&frames_file))?;
        let acts: Vec<u8> = ep.actions.iter().flat_map(|a| a.indices().map(|v| v as u8)).collect();
        NdArray::u8(vec![ep.actions.len(), 4], acts)?.save(&dir.join(&actions_file))?;
        index.episodes.push(DemoEntry {
            frames: n,
            frames_file,
            actions_file,
        });
    }
    std::fs::write(dir.join(DEMOS_FILE), serde_json::to_vec_pretty(&index)?)?;
    Ok(())
}

pub fn load_demos(dir: &Path) -> Result<Vec<Episode>> {
    let index: DemoIndex = serde_json::from_slice(&std::fs::read(dir.join(DEMOS_FILE))?)?;
    let px = FRAME_SIZE * FRAME_SIZE * FRAME_CHANNELS;
    index
        .episodes
        .iter()
        .map(|e| {
            let fp = dir.join(&e.frames_file);
            let ap = dir.join(&e.actions_file);
            let corrupt = |p: &Path, r: &str| Error::Corruption {
                path: p.to_path_buf(),
                reason: r.into(),
            };
            let frames = match NdArray::load(&fp)? {
                NdArray { shape, data: ArrayData::U8(v) } if shape == [e.frames, FRAME_SIZE, FRAME_SIZE, FRAME_CHANNELS] => v
                    .chunks_exact(px)
                    .enumerate()
                    .map(|(t, c)| ObsFrame {
                        t: t as u32,
                        pixels: c.to_vec(),
                    })
                    .collect(),
                _ => return Err(corrupt(&fp, "unexpected frames array")),
            };
            let actions = match NdArray::load(&ap)? {
                NdArray { shape, data: ArrayData::U8(v) } if shape == [e.frames, 4] => v
                    .chunks_exact(4)
                    .map(|c| {
                        Action::from_indices([c[0] as usize, c[1] as usize, c[2] as usize, c[3] as usize])
                            .ok_or_else(|| corrupt(&ap, "invalid action"))
                    })
                    .collect::<Result<Vec<_>>>()?,
                _ => return Err(corrupt(&ap, "unexpected actions array")),
            };
            Ok(Episode { frames, actions })
        })
        .collect()
}
