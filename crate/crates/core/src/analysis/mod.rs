// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention analytics over recorded traces. Everything here is a pure
//! function of the trace.

use serde::{Deserialize, Serialize};

use crate::error::{usage, Error, Result};
use crate::trace::{NdArray, Trace};
use crate::world::{EventKind, Pitch};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// Rows `[r0, r1)`.
    pub fn rows_range(&self, r0: usize, r1: usize) -> Matrix {
        let r1 = r1.min(self.rows);
        let r0 = r0.min(r1);
        Matrix {
            rows: r1 - r0,
            cols: self.cols,
            data: self.data[r0 * self.cols..r1 * self.cols].to_vec(),
        }
    }

    /// Column means.
    pub fn column_means(&self) -> Vec<f64> {
        let mut m = vec![0.0f64; self.cols];
        for r in 0..self.rows {
            for (a, &v) in m.iter_mut().zip(self.row(r)) {
                *a += v as f64;
            }
        }
        m.iter().map(|v| v / self.rows.max(1) as f64).collect()
    }

    pub fn to_ndarray(&self) -> NdArray {
        NdArray::f32(vec![self.rows, self.cols], self.data.clone()).expect("matrix shape")
    }

    /// 8-bit intensities with 0 → 255 (white) and the maximum → 0 (black),
    /// laid out with time along the horizontal axis: `[cols][rows]`.
    pub fn grayscale_time_major(&self) -> Vec<u8> {
        let max = self.data.iter().fold(0.0f32, |m, &v| m.max(v));
        let mut out = vec![255u8; self.rows * self.cols];
        if max > 0.0 {
            for r in 0..self.rows {
                for c in 0..self.cols {
                    let v = (self.at(r, c).max(0.0) / max).min(1.0);
                    out[c * self.rows + r] = (255.0 * (1.0 - v)).round() as u8;
                }
            }
        }
        out
    }
}

/// `[T, W]` weights of one head: entry `(t, m)` is the weight frame `t`
/// placed on slot `m`.
pub fn attention_map(trace: &Trace, layer: usize, head: usize) -> Result<Matrix> {
    let c = trace.config();
    if layer >= c.layers || head >= c.heads {
        return Err(usage(format!("head ({layer}, {head}) outside {}x{}", c.layers, c.heads)));
    }
    let w = c.window;
    let mut data = Vec::with_capacity(trace.len() * w);
    for t in 0..trace.len() {
        data.extend_from_slice(trace.attn_row(t, layer, head));
    }
    Ok(Matrix {
        rows: trace.len(),
        cols: w,
        data,
    })
}

/// Pointwise maximum over every head of every layer.
pub fn max_attention_map(trace: &Trace) -> Matrix {
    let c = trace.config();
    let w = c.window;
    let mut data = vec![0.0f32; trace.len() * w];
    for t in 0..trace.len() {
        let dst = &mut data[t * w..(t + 1) * w];
        for l in 0..c.layers {
            for h in 0..c.heads {
                for (d, &v) in dst.iter_mut().zip(trace.attn_row(t, l, h)) {
                    *d = d.max(v);
                }
            }
        }
    }
    Matrix {
        rows: trace.len(),
        cols: w,
        data,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopFrame {
    pub layer: usize,
    pub head: usize,
    /// Absolute frame index.
    pub frame: usize,
    pub slot: usize,
    pub weight: f32,
}

/// For every head, the frame it weights most at time `t`; ties go to the
/// newest slot.
pub fn top_attended_frames(trace: &Trace, t: usize) -> Result<Vec<TopFrame>> {
    if t >= trace.len() {
        return Err(usage(format!("frame {t} outside trace of {} frames", trace.len())));
    }
    let c = trace.config();
    let w = c.window;
    let start = trace.window_starts()[t];
    let first_slot = w - (t + 1 - start);
    let mut out = Vec::with_capacity(c.layers * c.heads);
    for l in 0..c.layers {
        for h in 0..c.heads {
            let row = trace.attn_row(t, l, h);
            let mut best = first_slot;
            for m in first_slot..w {
                if row[m] >= row[best] {
                    best = m;
                }
            }
            out.push(TopFrame {
                layer: l,
                head: h,
                frame: t + best + 1 - w,
                slot: best,
                weight: row[best],
            });
        }
    }
    Ok(out)
}

/// Per-dimension standardized head outputs over an episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZScores {
    pub dims: usize,
    pub frames: usize,
    /// `[dims, T]`.
    pub z: Vec<f32>,
    /// Dimensions with zero variance (their rows are all zero).
    pub degenerate: Vec<bool>,
}

impl ZScores {
    pub fn any_degenerate(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.z[i * self.frames..(i + 1) * self.frames]
    }
}

/// Standardizes a `[dims, T]` series per dimension with population σ.
pub fn zscore_rows(series: &[f64], dims: usize, frames: usize) -> ZScores {
    let mut z = vec![0.0f32; dims * frames];
    let mut degenerate = vec![false; dims];
    for i in 0..dims {
        let x = &series[i * frames..(i + 1) * frames];
        let mu = x.iter().sum::<f64>() / frames as f64;
        let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / frames as f64;
        let sd = var.sqrt();
        if sd == 0.0 || !sd.is_finite() {
            degenerate[i] = true;
            continue;
        }
        for (dst, v) in z[i * frames..(i + 1) * frames].iter_mut().zip(x) {
            *dst = ((v - mu) / sd) as f32;
        }
    }
    ZScores {
        dims,
        frames,
        z,
        degenerate,
    }
}

/// Z-scores of the current-position output of `(layer, head)`.
pub fn output_zscores(trace: &Trace, layer: usize, head: usize) -> Result<ZScores> {
    let c = trace.config();
    if trace.outputs.is_none() {
        return Err(Error::MissingData("trace was recorded without head outputs".into()));
    }
    if trace.len() < 2 {
        return Err(usage("z-scores need at least two frames"));
    }
    let dh = c.head_dim();
    let t_len = trace.len();
    let mut series = vec![0.0f64; dh * t_len];
    for t in 0..t_len {
        let o = trace.output(t, layer, head, c.window - 1)?;
        for i in 0..dh {
            series[i * t_len + t] = o[i] as f64;
        }
    }
    Ok(zscore_rows(&series, dh, t_len))
}

/// Summary statistics of one head's attention pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadStats {
    pub layer: usize,
    pub head: usize,
    /// Mean weight on the newest slot.
    pub newest_mass: f64,
    /// Mean mass on slots `≡ W-1 (mod 4)` minus the 0.25 baseline.
    pub periodicity: f64,
    /// Mean weight on the previous slot while the inventory is open.
    pub inventory_prev_mass: Option<f64>,
    /// Mean weight on the newest slot while the agent looks up.
    pub lookup_newest_mass: Option<f64>,
}

/// Frames during which the inventory screen is shown.
pub fn inventory_open_frames(trace: &Trace) -> Vec<usize> {
    let mut open = vec![false; trace.len()];
    let mut state = false;
    let mut ev = trace.manifest.events.iter().peekable();
    for (t, o) in open.iter_mut().enumerate() {
        *o = state;
        while let Some(e) = ev.next_if(|e| e.t as usize == t) {
            match e.kind {
                EventKind::InventoryOpen => state = true,
                EventKind::InventoryClose => state = false,
                _ => {}
            }
        }
    }
    open.iter().enumerate().filter(|(_, &o)| o).map(|(t, _)| t).collect()
}

/// Frames during which the agent's pitch is up.
pub fn looking_up_frames(trace: &Trace) -> Vec<usize> {
    trace
        .positions
        .iter()
        .enumerate()
        .filter(|(_, p)| p[3] == Pitch::Up as i32)
        .map(|(t, _)| t)
        .collect()
}

pub fn specialization_scan(trace: &Trace) -> Vec<HeadStats> {
    let c = trace.config();
    let w = c.window;
    let inv = inventory_open_frames(trace);
    let up = looking_up_frames(trace);
    let mean_over = |frames: &[usize], f: &dyn Fn(usize) -> f64| -> Option<f64> {
        (!frames.is_empty()).then(|| frames.iter().map(|&t| f(t)).sum::<f64>() / frames.len() as f64)
    };
    let all: Vec<usize> = (0..trace.len()).collect();
    let mut out = Vec::with_capacity(c.layers * c.heads);
    for l in 0..c.layers {
        for h in 0..c.heads {
            let row = |t: usize| trace.attn_row(t, l, h);
            let newest = |t: usize| row(t)[w - 1] as f64;
            let periodic = |t: usize| {
                row(t)
                    .iter()
                    .enumerate()
                    .filter(|(m, _)| m % 4 == (w - 1) % 4)
                    .map(|(_, &v)| v as f64)
                    .sum::<f64>()
            };
            let prev = |t: usize| if w >= 2 { row(t)[w - 2] as f64 } else { 0.0 };
            out.push(HeadStats {
                layer: l,
                head: h,
                newest_mass: mean_over(&all, &newest).unwrap_or(0.0),
                periodicity: mean_over(&all, &periodic).map_or(0.0, |v| v - 0.25),
                inventory_prev_mass: mean_over(&inv, &prev),
                lookup_newest_mass: mean_over(&up, &newest),
            });
        }
    }
    out
}

/// Head indices `(layer, head)` sorted by `key`, highest first; ties keep
/// layer-major order.
pub fn rank_heads(stats: &[HeadStats], key: impl Fn(&HeadStats) -> f64) -> Vec<(usize, usize)> {
    let mut v: Vec<&HeadStats> = stats.iter().collect();
    v.sort_by(|a, b| key(b).total_cmp(&key(a)));
    v.iter().map(|s| (s.layer, s.head)).collect()
}

#[cfg(test)]
mod tests;
