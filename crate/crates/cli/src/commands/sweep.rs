//! Speedup grids over batch size and context length.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use specdec_lab::arch::DraftKind;
use specdec_lab::costmodel::{evaluate_point, PointEvaluation, WorkloadPoint};

use crate::config::{Config, Loaded, SweepScenario, TauSource};
use crate::error::{CliError, CliResult};
use crate::output::csv_bytes;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scenario: String,
    #[serde(rename = "B")]
    pub batch: u64,
    #[serde(rename = "L")]
    pub context: u64,
    pub tau: f64,
    pub delta_t: f64,
    pub multiplier: f64,
    pub bound_draft: String,
    pub bound_verify: String,
}

/// One row of a CSV written by the `tau` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub scenario: String,
    #[serde(rename = "L")]
    pub context: usize,
    pub tau_mean: f64,
    pub ci_half_width: f64,
    pub n_rounds: usize,
}

/// Resolves the tau of a sweep scenario.
pub fn scenario_tau(loaded: &Loaded, scenario: &SweepScenario) -> CliResult<f64> {
    let source = scenario
        .tau
        .as_ref()
        .ok_or_else(|| CliError::MissingTau(format!("scenario '{}' has no tau", scenario.name)))?;
    match source {
        TauSource::Constant(t) => Ok(*t),
        TauSource::Measured(m) => {
            let path = loaded.path(&m.path);
            let wanted = m.scenario.as_deref().unwrap_or(&scenario.name);
            let mut reader = csv::Reader::from_path(&path)
                .map_err(|e| CliError::MissingTau(format!("{}: {e}", path.display())))?;
            for row in reader.deserialize::<TauRow>() {
                let row = row.map_err(|e| CliError::MissingTau(format!("{}: {e}", path.display())))?;
                if row.scenario == wanted && row.context == m.context {
                    return Ok(row.tau_mean);
                }
            }
            Err(CliError::MissingTau(format!(
                "{} has no row for scenario '{wanted}' at L = {}",
                path.display(),
                m.context
            )))
        }
    }
}

/// Evaluates a scenario at one grid point.
pub fn evaluate(config: &Config, draft: &DraftKind, tau: f64, batch: u64, context: u64) -> CliResult<PointEvaluation> {
    let models = config.models()?;
    let point = WorkloadPoint::new(batch, context, config.specdec.k);
    Ok(evaluate_point(&draft.spec, &models.target, config.hardware()?, point, tau))
}

pub fn rows(loaded: &Loaded) -> CliResult<Vec<SweepRow>> {
    let config = &loaded.config;
    let sweep = config.sweep()?;
    let models = config.models()?;
    config.hardware()?;
    let mut cells = Vec::new();
    for s in &sweep.scenarios {
        let draft = models.draft(&s.draft)?;
        let tau = scenario_tau(loaded, s)?;
        for &b in &sweep.batch_sizes {
            for &l in &sweep.context_lengths {
                cells.push((s.name.as_str(), draft, tau, b, l));
            }
        }
    }
    cells
        .par_iter()
        .map(|&(name, draft, tau, b, l)| {
            let e = evaluate(config, &draft, tau, b, l)?;
            Ok(SweepRow {
                scenario: name.to_string(),
                batch: b,
                context: l,
                tau: e.tau,
                delta_t: e.delta_t,
                multiplier: e.multiplier,
                bound_draft: e.bound_draft.as_str().to_string(),
                bound_verify: e.bound_verify.as_str().to_string(),
            })
        })
        .collect()
}

pub fn run(loaded: &Loaded) -> CliResult<Vec<u8>> {
    csv_bytes(&rows(loaded)?)
}
