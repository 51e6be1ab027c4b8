// SPDX-License-Identifier: MIT OR Apache-2.0

//! Benchmarks live in `benches/`; run them with `cargo bench -p agentlens-bench`.
