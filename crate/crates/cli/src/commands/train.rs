//! Trains targets and drafts and writes checkpoints.

use std::path::{Path, PathBuf};

use specdec_lab::arch::DraftFamily;
use specdec_lab::tinymodel::{checkpoint, corpus, prune_init, train, LossKind, ModelParams, Variant};

use super::tau::{eval_bytes, load_checked};
use crate::config::{Loaded, TrainRun};
use crate::error::{CliError, CliResult};

/// Parameters to start from and the optional teacher.
fn initial(loaded: &Loaded, run: &TrainRun, path: &str, max_len: usize) -> CliResult<(ModelParams<f32>, Option<ModelParams<f32>>)> {
    let models = loaded.config.models()?;
    let teacher = match &run.target_checkpoint {
        Some(p) => Some(load_checked(&loaded.path(p), &models.target, None)?),
        None => None,
    };
    if run.model == "target" {
        let p = ModelParams::init(models.target, Variant::Target, max_len, run.init_seed)?;
        return Ok((p, None));
    }
    let kind = models.draft(&run.model)?;
    let need_teacher = |why: &str| CliError::schema(format!("{path}.target_checkpoint"), format!("required {why}"));
    match kind.family {
        DraftFamily::MagicDec => Err(CliError::schema(format!("{path}.model"), "self-speculation drafts are not trained")),
        DraftFamily::VanillaSmall => {
            if run.settings.loss == LossKind::Mixed && teacher.is_none() {
                return Err(need_teacher("for distillation"));
            }
            let max_len = teacher.as_ref().map_or(max_len, |t| t.max_len);
            let p = ModelParams::init(kind.spec, Variant::Vanilla, max_len, run.init_seed)?;
            Ok((p, teacher))
        }
        DraftFamily::Spire => {
            let target = teacher.ok_or_else(|| need_teacher("to prune and feed a feedback draft"))?;
            let p = prune_init(
                &target,
                kind.spec.n_layer as usize,
                kind.spec.attention,
                true,
                run.settings.substitution_offset,
            )?;
            Ok((p, Some(target)))
        }
    }
}

/// A finished run: where it was written and with which seed.
pub struct Trained {
    pub name: String,
    pub path: PathBuf,
    pub seed: u64,
}

/// Trains the selected runs (all of them by default) in order. `out`
/// replaces the checkpoint path of a single selected run.
pub fn run(loaded: &Loaded, only: Option<&str>, out: Option<&Path>, seed: Option<u64>, progress: bool) -> CliResult<Vec<Trained>> {
    let section = loaded
        .config
        .train
        .as_ref()
        .ok_or_else(|| CliError::schema("train", "required"))?;
    let selected: Vec<(usize, &TrainRun)> = section
        .runs
        .iter()
        .enumerate()
        .filter(|(_, r)| only.is_none_or(|n| r.name == n))
        .collect();
    if selected.is_empty() {
        return Err(CliError::schema("--run", format!("no run named '{}'", only.unwrap_or_default())));
    }
    if out.is_some() && selected.len() != 1 {
        return Err(CliError::schema("--out", "select a single run with --run to redirect its checkpoint"));
    }
    let bytes = eval_bytes(loaded, section.corpus.as_deref())?;
    let (train_part, _) = corpus::split(&bytes, corpus::TRAIN_FRACTION)?;
    let mut done = Vec::new();
    for (i, run) in selected {
        let mut settings = run.settings.clone();
        if let Some(s) = seed {
            settings.seed = s;
        }
        let path = format!("train.runs[{i}]");
        let (init, teacher) = initial(loaded, run, &path, section.max_len)?;
        let every = (settings.steps / 20).max(1);
        if progress {
            eprintln!("training '{}' ({} steps)", run.name, settings.steps);
        }
        let outcome = train(init, teacher.as_ref(), train_part, &settings, |s| {
            if progress && (s.step % every == 0 || s.step + 1 == settings.steps) {
                eprintln!("  step {:>6}  loss {:.4}  lr {:.2e}", s.step, s.loss, s.lr);
            }
        })?;
        let dest = out.map_or_else(|| loaded.path(&run.checkpoint), Path::to_path_buf);
        if let Some(dir) = dest.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        checkpoint::save(&dest, &outcome.params, settings.seed, settings.steps as u64)?;
        done.push(Trained {
            name: run.name.clone(),
            path: dest,
            seed: settings.seed,
        });
    }
    Ok(done)
}
