// SPDX-License-Identifier: MIT OR Apache-2.0

//! PNG encoding, directory digests and JSON emission.

use std::io::Cursor;
use std::path::Path;

use anyhow::{Context, Result};
use image::{ImageBuffer, ImageFormat, Luma, Rgb};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Encodes interleaved 8-bit RGB as PNG bytes.
pub fn rgb_png(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    let img: ImageBuffer<Rgb<u8>, Vec<u8>> =
        ImageBuffer::from_raw(width as u32, height as u32, pixels.to_vec()).context("rgb buffer size")?;
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn gray_png(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(width as u32, height as u32, pixels.to_vec()).context("gray buffer size")?;
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Nearest-neighbour enlargement of a single-channel image by `k`.
pub fn enlarge(width: usize, height: usize, pixels: &[u8], k: usize) -> Vec<u8> {
    let mut out = vec![0u8; width * height * k * k];
    for y in 0..height * k {
        for x in 0..width * k {
            out[y * width * k + x] = pixels[(y / k) * width + x / k];
        }
    }
    out
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_vec_pretty(value)?;
    s.push(b'\n');
    write_file(path, &s)
}

/// SHA-256 over every regular file of a directory, by sorted name.
pub fn dir_digest(dir: &Path) -> Result<String> {
    let mut names: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .map(|e| e.file_name())
        .collect();
    names.sort();
    let mut h = Sha256::new();
    for n in names {
        h.update(n.to_string_lossy().as_bytes());
        h.update([0]);
        let bytes = std::fs::read(dir.join(&n))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Prints one JSON document on stdout.
pub fn emit<T: Serialize>(value: &T) -> Result<()> {
    print_text(&format!("{}\n", serde_json::to_string_pretty(value)?))
}

pub fn print_text(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()) {
        // A closed pipe (`| head`) is not a failure of the command.
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}
