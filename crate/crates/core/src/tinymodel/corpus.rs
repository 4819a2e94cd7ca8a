//! Byte-level corpus handling.

use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

/// Milton's *Paradise Lost*, plain ASCII.
pub const BUNDLED: &[u8] = include_bytes!("../../data/paradise_lost.txt");

/// Byte vocabulary size.
pub const BYTE_VOCAB: usize = 256;

/// Fraction of the corpus used for training; the rest is held out.
pub const TRAIN_FRACTION: f64 = 0.9;

pub fn load(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() {
        return Err(invalid(format!("corpus {} is empty", path.display())));
    }
    Ok(bytes)
}

/// Splits into a leading training part and a trailing held-out part.
pub fn split(bytes: &[u8], train_fraction: f64) -> Result<(&[u8], &[u8])> {
    if !(0.0..1.0).contains(&train_fraction) || train_fraction == 0.0 {
        return Err(invalid(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let cut = (bytes.len() as f64 * train_fraction) as usize;
    Ok(bytes.split_at(cut))
}

pub fn tokens(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// `n` windows of `len` tokens at seeded uniform offsets.
pub fn sample_windows(data: &[u8], n: usize, len: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if len == 0 || data.len() < len {
        return Err(invalid(format!("cannot cut windows of {len} bytes from {} bytes", data.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let start = rng.random_range(0..=data.len() - len);
            tokens(&data[start..start + len])
        })
        .collect())
}
