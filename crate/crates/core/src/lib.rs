// SPDX-License-Identifier: MIT OR Apache-2.0
pub mod error;
pub mod numerics;
pub mod world;
pub mod agent;
pub mod analysis;
pub mod intervention;
pub mod trace;
pub mod vision;

pub use error::{Error, Result};
