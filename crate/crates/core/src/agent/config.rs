// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::kernels::conv_out_len;
use crate::world::{ACTION_FACTOR_SIZES, FRAME_CHANNELS, FRAME_SIZE};

/// One convolution layer: kernel, stride, padding, filters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub k: usize,
    pub s: usize,
    pub p: usize,
    pub f: usize,
}

impl ConvSpec {
    pub const fn new(k: usize, s: usize, p: usize, f: usize) -> Self {
        Self { k, s, p, f }
    }
}

pub const DEFAULT_CONV_STACK: [ConvSpec; 3] = [
    ConvSpec::new(8, 4, 0, 16),
    ConvSpec::new(4, 2, 0, 32),
    ConvSpec::new(3, 1, 0, 32),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub layers: usize,
    pub heads: usize,
    pub window: usize,
    pub d_model: usize,
    /// Hidden width of each block's two-layer MLP.
    pub mlp_hidden: usize,
    pub conv: Vec<ConvSpec>,
    pub action_sizes: Vec<usize>,
    pub temperature: f32,
    /// Input side length in pixels.
    #[serde(default = "default_input")]
    pub input_size: usize,
    #[serde(default = "default_channels")]
    pub input_channels: usize,
}

fn default_input() -> usize {
    FRAME_SIZE
}

fn default_channels() -> usize {
    FRAME_CHANNELS
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 16,
            window: 128,
            d_model: 128,
            mlp_hidden: 256,
            conv: DEFAULT_CONV_STACK.to_vec(),
            action_sizes: ACTION_FACTOR_SIZES.to_vec(),
            temperature: 1.0,
            input_size: FRAME_SIZE,
            input_channels: FRAME_CHANNELS,
        }
    }
}

impl PolicyConfig {
    /// Reduced transformer used for the trained agent.
    pub fn desk() -> Self {
        Self {
            layers: 2,
            heads: 4,
            window: 32,
            d_model: 64,
            mlp_hidden: 128,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn n_actions(&self) -> usize {
        self.action_sizes.iter().sum()
    }

    /// Start offset of each factor inside the concatenated logit vector.
    pub fn factor_offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.action_sizes.len());
        let mut acc = 0;
        for &n in &self.action_sizes {
            off.push(acc);
            acc += n;
        }
        off
    }

    /// `(channels, side)` after each conv layer.
    pub fn conv_shapes(&self) -> Result<Vec<(usize, usize)>> {
        let mut side = self.input_size;
        let mut out = Vec::with_capacity(self.conv.len());
        for (i, c) in self.conv.iter().enumerate() {
            side = conv_out_len(side, c.k, c.s, c.p).ok_or_else(|| {
                Error::Config(format!("conv layer {i} (k={}) does not fit input side {side}", c.k))
            })?;
            out.push((c.f, side));
        }
        Ok(out)
    }

    pub fn flat_features(&self) -> Result<usize> {
        Ok(match self.conv_shapes()?.last() {
            Some(&(c, s)) => c * s * s,
            None => self.input_channels * self.input_size * self.input_size,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.mlp_hidden == 0 {
            return bad("layers, heads, d_model and mlp_hidden must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.window == 0 {
            return bad("window must be at least 1".into());
        }
        if self.action_sizes.is_empty() || self.action_sizes.iter().any(|&n| n < 2) {
            return bad("every action factor needs at least two categories".into());
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be finite and non-negative".into());
        }
        if self.conv.iter().any(|c| c.s == 0 || c.f == 0 || c.k == 0) {
            return bad("conv stride, kernel and filters must be positive".into());
        }
        self.flat_features()?;
        Ok(())
    }
}
