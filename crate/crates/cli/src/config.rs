//! The JSON configuration document and its validation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use specdec_lab::arch::{DraftFamily, DraftKind, TransformerSpec};
use specdec_lab::costmodel::HardwareSpec;
use specdec_lab::tinymodel::TrainConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub hardware: Option<HardwareSpec>,
    pub models: Option<Models>,
    #[serde(default)]
    pub specdec: Specdec,
    pub train: Option<TrainSection>,
    pub sweep: Option<SweepSection>,
    pub report: Option<ReportSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Models {
    pub target: TransformerSpec,
    #[serde(default)]
    pub drafts: BTreeMap<String, DraftConfig>,
}

/// A draft described relative to the target.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DraftConfig {
    pub family: DraftFamily,
    /// Feedback drafts: number of top target layers kept.
    pub layers_kept: Option<u64>,
    pub window: Option<u64>,
    pub sink: Option<u64>,
    /// Vanilla drafts: explicit architecture instead of a one-layer slice.
    pub spec: Option<TransformerSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Specdec {
    #[serde(default = "default_k")]
    pub k: u64,
    pub eval: Option<EvalSection>,
}

impl Default for Specdec {
    fn default() -> Self {
        Specdec { k: default_k(), eval: None }
    }
}

fn default_k() -> u64 {
    4
}

/// Measurement of tau with trained checkpoints.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub target_checkpoint: PathBuf,
    pub scenarios: Vec<EvalScenario>,
    pub context_lengths: Vec<usize>,
    /// Tokens generated per context.
    pub generate: usize,
    /// Contexts per context length.
    pub contexts: usize,
    #[serde(default)]
    pub seed: u64,
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalScenario {
    pub name: String,
    pub draft: String,
    /// Not needed for self-speculation.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub corpus: Option<PathBuf>,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Trained in order; later runs may read earlier checkpoints.
    pub runs: Vec<TrainRun>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    pub name: String,
    /// `target` or the name of a draft.
    pub model: String,
    /// Where the trained parameters are written.
    pub checkpoint: PathBuf,
    /// Teacher and pruning source for drafts.
    pub target_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default)]
    pub settings: TrainConfig,
}

fn default_max_len() -> usize {
    256
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub batch_sizes: Vec<u64>,
    pub context_lengths: Vec<u64>,
    pub scenarios: Vec<SweepScenario>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepScenario {
    pub name: String,
    pub draft: String,
    pub tau: Option<TauSource>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TauSource {
    /// Used unchanged at every context length.
    Constant(f64),
    /// A row of a CSV written by the `tau` command.
    Measured(MeasuredTau),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasuredTau {
    pub path: PathBuf,
    /// Defaults to the sweep scenario name.
    pub scenario: Option<String>,
    pub context: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    pub decode_budget: f64,
    pub entries: Vec<ReportEntry>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportEntry {
    pub name: String,
    pub multiplier: Option<f64>,
    /// Takes the multiplier from a sweep scenario at one grid point.
    pub at: Option<GridPoint>,
    #[serde(default)]
    pub train_cost: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridPoint {
    pub scenario: String,
    pub batch: u64,
    pub context: u64,
}

/// A parsed configuration together with its raw bytes and location.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: Config,
    pub bytes: Vec<u8>,
    pub dir: PathBuf,
}

impl Loaded {
    /// Resolves a config-relative path.
    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }
}

pub fn load(path: &Path) -> CliResult<Loaded> {
    let bytes = std::fs::read(path).map_err(|e| CliError::schema("<file>", format!("{}: {e}", path.display())))?;
    let config = parse(&bytes)?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Loaded { config, bytes, dir })
}

pub fn parse(bytes: &[u8]) -> CliResult<Config> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let config: Config = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::schema(if path.is_empty() { ".".to_string() } else { path }, e.into_inner().to_string())
    })?;
    config.validate()?;
    Ok(config)
}

fn require<T>(value: Option<T>, path: &str) -> CliResult<T> {
    value.ok_or_else(|| CliError::schema(path, "required"))
}

impl Config {
    fn validate(&self) -> CliResult<()> {
        if let Some(hw) = &self.hardware {
            hw.validate().map_err(|e| CliError::schema("hardware", e.to_string()))?;
        }
        if self.specdec.k == 0 {
            return Err(CliError::schema("specdec.k", "must be at least 1"));
        }
        if let Some(models) = &self.models {
            models
                .target
                .validate()
                .map_err(|e| CliError::schema("models.target", e.to_string()))?;
            if !models.target.attention.is_dense() {
                return Err(CliError::schema("models.target.attention", "the target must be dense"));
            }
            for name in models.drafts.keys() {
                models.draft(name)?;
            }
        }
        if let Some(sweep) = &self.sweep {
            nonempty(&sweep.batch_sizes, "sweep.batch_sizes")?;
            nonempty(&sweep.context_lengths, "sweep.context_lengths")?;
            nonempty(&sweep.scenarios, "sweep.scenarios")?;
            if sweep.batch_sizes.contains(&0) {
                return Err(CliError::schema("sweep.batch_sizes", "batch sizes must be at least 1"));
            }
            if sweep.context_lengths.contains(&0) {
                return Err(CliError::schema("sweep.context_lengths", "context lengths must be at least 1"));
            }
            for (i, s) in sweep.scenarios.iter().enumerate() {
                self.models()?.draft_at(&s.draft, &format!("sweep.scenarios[{i}].draft"))?;
                if let Some(TauSource::Constant(t)) = s.tau {
                    if !(t.is_finite() && t >= 1.0) {
                        return Err(CliError::schema(format!("sweep.scenarios[{i}].tau.constant"), "tau must be finite and at least 1"));
                    }
                }
            }
        }
        if let Some(eval) = &self.specdec.eval {
            nonempty(&eval.scenarios, "specdec.eval.scenarios")?;
            nonempty(&eval.context_lengths, "specdec.eval.context_lengths")?;
            if eval.generate == 0 || eval.contexts == 0 {
                return Err(CliError::schema("specdec.eval", "generate and contexts must be at least 1"));
            }
            if eval.context_lengths.contains(&0) {
                return Err(CliError::schema("specdec.eval.context_lengths", "context lengths must be at least 1"));
            }
            for (i, s) in eval.scenarios.iter().enumerate() {
                let kind = self.models()?.draft_at(&s.draft, &format!("specdec.eval.scenarios[{i}].draft"))?;
                if kind.family != DraftFamily::MagicDec && s.checkpoint.is_none() {
                    return Err(CliError::schema(format!("specdec.eval.scenarios[{i}].checkpoint"), "required for trained drafts"));
                }
            }
        }
        if let Some(train) = &self.train {
            nonempty(&train.runs, "train.runs")?;
            for (i, run) in train.runs.iter().enumerate() {
                run.settings
                    .validate()
                    .map_err(|e| CliError::schema(format!("train.runs[{i}].settings"), e.to_string()))?;
                if run.model != "target" {
                    self.models()?.draft_at(&run.model, &format!("train.runs[{i}].model"))?;
                }
                if train.runs[..i].iter().any(|r| r.name == run.name) {
                    return Err(CliError::schema(format!("train.runs[{i}].name"), "duplicate run name"));
                }
            }
        }
        if let Some(report) = &self.report {
            if !(report.decode_budget.is_finite() && report.decode_budget >= 0.0) {
                return Err(CliError::schema("report.decode_budget", "must be finite and nonnegative"));
            }
            nonempty(&report.entries, "report.entries")?;
            for (i, e) in report.entries.iter().enumerate() {
                if e.multiplier.is_some() == e.at.is_some() {
                    return Err(CliError::schema(format!("report.entries[{i}]"), "give exactly one of multiplier and at"));
                }
                if !(e.train_cost.is_finite() && e.train_cost >= 0.0) {
                    return Err(CliError::schema(format!("report.entries[{i}].train_cost"), "must be finite and nonnegative"));
                }
            }
        }
        Ok(())
    }

    pub fn models(&self) -> CliResult<&Models> {
        require(self.models.as_ref(), "models")
    }

    pub fn hardware(&self) -> CliResult<&HardwareSpec> {
        require(self.hardware.as_ref(), "hardware")
    }

    pub fn sweep(&self) -> CliResult<&SweepSection> {
        require(self.sweep.as_ref(), "sweep")
    }
}

fn nonempty<T>(v: &[T], path: &str) -> CliResult<()> {
    if v.is_empty() {
        return Err(CliError::schema(path, "must not be empty"));
    }
    Ok(())
}

impl Models {
    /// Resolves the named draft against the target.
    pub fn draft(&self, name: &str) -> CliResult<DraftKind> {
        let path = format!("models.drafts.{name}");
        let cfg = self
            .drafts
            .get(name)
            .ok_or_else(|| CliError::schema(&path, "no such draft"))?;
        let field = |f: &str| format!("{path}.{f}");
        let kind = match cfg.family {
            DraftFamily::VanillaSmall => match cfg.spec {
                Some(spec) => DraftKind {
                    family: DraftFamily::VanillaSmall,
                    spec,
                },
                None => DraftKind::vanilla(&self.target).map_err(|e| CliError::schema(&path, e.to_string()))?,
            },
            DraftFamily::MagicDec => DraftKind::magicdec(
                &self.target,
                require(cfg.window, &field("window"))?,
                require(cfg.sink, &field("sink"))?,
            ),
            DraftFamily::Spire => DraftKind::spire(
                &self.target,
                require(cfg.layers_kept, &field("layers_kept"))?,
                require(cfg.window, &field("window"))?,
                require(cfg.sink, &field("sink"))?,
            )
            .map_err(|e| CliError::schema(field("layers_kept"), e.to_string()))?,
        };
        if cfg.spec.is_some() && cfg.family != DraftFamily::VanillaSmall {
            return Err(CliError::schema(field("spec"), "only vanilla drafts take an explicit spec"));
        }
        kind.validate_against(&self.target)
            .map_err(|e| CliError::schema(&path, e.to_string()))?;
        Ok(kind)
    }

    /// Like [`Models::draft`], reporting a missing name at `path`.
    pub fn draft_at(&self, name: &str, path: &str) -> CliResult<DraftKind> {
        if !self.drafts.contains_key(name) {
            return Err(CliError::schema(path, format!("unknown draft '{name}'")));
        }
        self.draft(name)
    }
}
