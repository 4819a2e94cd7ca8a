//! Critical batch sizes per context length and the critical context.

use serde::Serialize;
use specdec_lab::costmodel::{critical_batch_size, critical_context};

use crate::config::Loaded;
use crate::error::CliResult;
use crate::output::csv_bytes;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriticalRow {
    #[serde(rename = "L")]
    pub context: u64,
    /// `none` when no batch size makes verification compute-bound.
    pub b_crit: String,
    pub l_crit: u64,
}

/// Powers of two up to 2^20 when no sweep grid is configured.
fn contexts(loaded: &Loaded) -> Vec<u64> {
    match &loaded.config.sweep {
        Some(s) => s.context_lengths.clone(),
        None => (0..=20).map(|e| 1u64 << e).collect(),
    }
}

pub fn rows(loaded: &Loaded) -> CliResult<Vec<CriticalRow>> {
    let config = &loaded.config;
    let target = &config.models()?.target;
    let hw = config.hardware()?;
    let k = config.specdec.k;
    let l_crit = critical_context(target, hw, k)?;
    Ok(contexts(loaded)
        .into_iter()
        .map(|l| CriticalRow {
            context: l,
            b_crit: critical_batch_size(target, hw, l, k).map_or_else(|| "none".to_string(), |b| b.to_string()),
            l_crit,
        })
        .collect())
}

pub fn run(loaded: &Loaded) -> CliResult<Vec<u8>> {
    csv_bytes(&rows(loaded)?)
}
