//! Empirical tau of trained drafts on held-out contexts.

use std::path::Path;

use specdec_lab::arch::{AttentionPolicy, DraftFamily, DraftKind, TransformerSpec};
use specdec_lab::tinymodel::{checkpoint, corpus, measure_tau_report, DraftModel, ModelParams, Variant};

use super::sweep::TauRow;
use crate::config::{EvalSection, Loaded};
use crate::error::{CliError, CliResult};
use crate::output::csv_bytes;

/// Loads a checkpoint and checks it has the expected architecture.
pub fn load_checked(path: &Path, spec: &TransformerSpec, feedback: Option<bool>) -> CliResult<ModelParams<f32>> {
    let (params, _) = checkpoint::load(path).map_err(|e| match e {
        specdec_lab::Error::Io(io) => CliError::Checkpoint(format!("{}: {io}", path.display())),
        other => CliError::Checkpoint(format!("{}: {other}", path.display())),
    })?;
    if params.spec != *spec {
        return Err(CliError::Checkpoint(format!(
            "{} holds {:?}, config expects {:?}",
            path.display(),
            params.spec,
            spec
        )));
    }
    let ok = match (feedback, params.variant) {
        (None, Variant::Target) => true,
        (Some(false), Variant::Vanilla) => true,
        (Some(true), Variant::Spire { .. }) => true,
        _ => false,
    };
    if !ok {
        return Err(CliError::Checkpoint(format!(
            "{} holds a {:?} model",
            path.display(),
            params.variant
        )));
    }
    Ok(params)
}

/// Held-out bytes of the configured or bundled corpus.
pub fn eval_bytes(loaded: &Loaded, corpus_path: Option<&Path>) -> CliResult<Vec<u8>> {
    let bytes = match corpus_path {
        Some(p) => corpus::load(&loaded.path(p))?,
        None => corpus::BUNDLED.to_vec(),
    };
    Ok(bytes)
}

enum EvalDraft {
    SelfSpec { window: u64, sink: u64, kind: DraftKind },
    Trained(ModelParams<f32>),
}

pub fn rows(loaded: &Loaded, seed_override: Option<u64>) -> CliResult<Vec<TauRow>> {
    let config = &loaded.config;
    let eval: &EvalSection = config
        .specdec
        .eval
        .as_ref()
        .ok_or_else(|| CliError::schema("specdec.eval", "required"))?;
    let models = config.models()?;
    let seed = seed_override.unwrap_or(eval.seed);
    let k = config.specdec.k as usize;
    let target = load_checked(&loaded.path(&eval.target_checkpoint), &models.target, None)?;
    let drafts = eval
        .scenarios
        .iter()
        .map(|s| {
            let kind = models.draft(&s.draft)?;
            Ok(match kind.family {
                DraftFamily::MagicDec => {
                    let AttentionPolicy::Streaming { window, sink } = kind.spec.attention else {
                        unreachable!("self-speculation drafts stream");
                    };
                    EvalDraft::SelfSpec { window, sink, kind }
                }
                family => {
                    let path = loaded.path(s.checkpoint.as_ref().expect("validated"));
                    EvalDraft::Trained(load_checked(&path, &kind.spec, Some(family == DraftFamily::Spire))?)
                }
            })
        })
        .collect::<CliResult<Vec<_>>>()?;

    let bytes = eval_bytes(loaded, eval.corpus.as_deref())?;
    let (_, held_out) = corpus::split(&bytes, corpus::TRAIN_FRACTION)?;
    let mut rows = Vec::new();
    for &l in &eval.context_lengths {
        let contexts = corpus::sample_windows(held_out, eval.contexts, l, seed.wrapping_add(l as u64))?;
        for (s, d) in eval.scenarios.iter().zip(&drafts) {
            let model = match d {
                EvalDraft::SelfSpec { window, sink, kind } => DraftModel::SelfSpec {
                    window: *window,
                    sink: *sink,
                    positions: kind.spec.positions,
                },
                EvalDraft::Trained(p) if p.variant == Variant::Vanilla => DraftModel::Vanilla(p),
                EvalDraft::Trained(p) => DraftModel::Spire(p),
            };
            let r = measure_tau_report(&target, model, &contexts, eval.generate, k, seed)?;
            rows.push(TauRow {
                scenario: s.name.clone(),
                context: l,
                tau_mean: r.estimate.mean,
                ci_half_width: r.estimate.half_width_95,
                n_rounds: r.estimate.n_rounds,
            });
        }
    }
    Ok(rows)
}

pub fn run(loaded: &Loaded, seed: Option<u64>) -> CliResult<Vec<u8>> {
    csv_bytes(&rows(loaded, seed)?)
}
