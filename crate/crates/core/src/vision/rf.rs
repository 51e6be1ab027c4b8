// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::agent::ConvSpec;
use crate::error::{usage, Result};

/// Receptive field of the units of one conv layer (0-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub layer: usize,
    /// Side length `R` in input pixels.
    pub size: usize,
    /// Input-pixel spacing between neighbouring units (product of strides).
    pub jump: usize,
    /// Input coordinate of the top-left pixel of unit (0, 0); negative when
    /// it reaches into padding.
    pub start: isize,
}

impl ReceptiveField {
    /// Unclipped `(top, left, size, size)` of unit `(y, x)`.
    pub fn rect_unclipped(&self, y: usize, x: usize) -> (isize, isize, usize, usize) {
        let j = self.jump as isize;
        (self.start + y as isize * j, self.start + x as isize * j, self.size, self.size)
    }

    /// `(top, left, height, width)` clipped to an `side × side` image.
    pub fn rect(&self, y: usize, x: usize, side: usize) -> (usize, usize, usize, usize) {
        let (t, l, h, w) = self.rect_unclipped(y, x);
        let clip = |a: isize, len: usize| {
            let lo = a.clamp(0, side as isize) as usize;
            let hi = (a + len as isize).clamp(0, side as isize) as usize;
            (lo, hi - lo)
        };
        let (top, hh) = clip(t, h);
        let (left, ww) = clip(l, w);
        (top, left, hh, ww)
    }
}

/// `R_L = R_{L-1} + (K_L - 1) · ∏_{i<L} S_i` with `R_1 = K_1`.
pub fn receptive_field(stack: &[ConvSpec], layer: usize) -> Result<ReceptiveField> {
    if layer >= stack.len() {
        return Err(usage(format!("layer {layer} outside a stack of {}", stack.len())));
    }
    let (mut r, mut j, mut start) = (1usize, 1usize, 0isize);
    for c in &stack[..=layer] {
        r += (c.k - 1) * j;
        start -= (c.p * j) as isize;
        j *= c.s;
    }
    Ok(ReceptiveField {
        layer,
        size: r,
        jump: j,
        start,
    })
}

/// One row of the recursion table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RfRow {
    /// 1-based layer number.
    pub layer: usize,
    pub k: usize,
    pub s: usize,
    pub p: usize,
    pub r: usize,
}

pub fn receptive_field_table(stack: &[ConvSpec]) -> Vec<RfRow> {
    stack
        .iter()
        .enumerate()
        .map(|(i, c)| RfRow {
            layer: i + 1,
            k: c.k,
            s: c.s,
            p: c.p,
            r: receptive_field(stack, i).map(|f| f.size).unwrap_or(0),
        })
        .collect()
}
