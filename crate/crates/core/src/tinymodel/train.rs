//! Adam training of targets and drafts.

use std::rc::Rc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::autograd::{Graph, RopeTable, Scalar, Tensor, Var};
use super::model::{bind, check_offset, softmax_rows, spire_graph, target_graph, ModelParams, Variant};
use crate::error::{invalid, Error, Result};

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Cross-entropy against the next corpus token.
    Hard,
    /// Distillation cross-entropy against the teacher blended with the
    /// expected acceptance, weighted by `omega`.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Forward passes per training sequence for feedback drafts.
    pub k: usize,
    pub omega: f64,
    pub loss: LossKind,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Draft layer `i` reads target activation `i + offset - 1`; defaults to
    /// the number of pruned target layers.
    pub substitution_offset: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 4,
            omega: 0.5,
            loss: LossKind::Mixed,
            lr: 3e-3,
            warmup_steps: 100,
            min_lr_ratio: 0.1,
            beta1: 0.9,
            beta2: 0.99,
            steps: 1000,
            batch: 8,
            seq_len: 256,
            seed: 0,
            grad_clip: 1.0,
            substitution_offset: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(invalid(format!("omega = {} outside [0, 1]", self.omega)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr must be positive"));
        }
        if self.batch == 0 || self.seq_len == 0 || self.k == 0 {
            return Err(invalid("batch, seq_len and k must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(invalid("min_lr_ratio outside [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Linear warmup then cosine decay to `min_lr_ratio * lr`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cosine)
    }
}

/// Adam moments for every parameter tensor.
struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    fn new(params: &ModelParams<f32>) -> Self {
        let zeros = || params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        Adam {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams<f32>, grads: &[Vec<f32>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = lr as f32;
        for (i, tensor) in params.tensors.iter_mut().enumerate() {
            for (j, w) in tensor.data.iter_mut().enumerate() {
                let g = grads[i][j];
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + 1e-8);
            }
        }
    }
}

/// Loss of `params` on `batch`, built into `g`. Returns the scalar loss.
#[allow(clippy::too_many_arguments)]
fn batch_loss<F: Scalar>(
    g: &mut Graph<F>,
    params: &ModelParams<F>,
    vars: &[Var],
    teacher: Option<&ModelParams<F>>,
    batch: &[Vec<usize>],
    cfg: &TrainConfig,
    loss: LossKind,
    ropes: &Ropes<F>,
) -> Result<Var> {
    let len = batch[0].len() - 1;
    let inputs: Vec<&[usize]> = batch.iter().map(|s| &s[..len]).collect();
    let labels: Vec<usize> = batch.iter().flat_map(|s| s[1..].iter().copied()).collect();

    let teacher_out = match teacher {
        Some(t) => {
            let tv = bind(g, t, false);
            let rope = ropes.teacher.as_ref().expect("teacher rope table");
            Some(target_graph(g, t, &tv, &inputs, rope))
        }
        None => None,
    };
    let logits = match params.variant {
        Variant::Spire { .. } => {
            let (_, trace) = teacher_out.as_ref().ok_or_else(|| invalid("feedback drafts train against a teacher"))?;
            spire_graph(g, params, vars, &inputs, trace, cfg.k, &ropes.student)?
        }
        Variant::Target | Variant::Vanilla => target_graph(g, params, vars, &inputs, &ropes.student).0,
    };
    Ok(match loss {
        LossKind::Hard => g.cross_entropy(logits, &labels),
        LossKind::Mixed => {
            let (t_logits, _) = teacher_out.ok_or_else(|| invalid("the mixed loss needs a teacher"))?;
            let probs = Rc::new(softmax_rows(g.value(t_logits)));
            g.mixed_loss(logits, &probs, F::from_f64_lossy(cfg.omega))
        }
    })
}

struct Ropes<F> {
    student: Rc<RopeTable<F>>,
    teacher: Option<Rc<RopeTable<F>>>,
}

impl<F: Scalar> Ropes<F> {
    fn new(params: &ModelParams<F>, teacher: Option<&ModelParams<F>>) -> Self {
        Ropes {
            student: Rc::new(params.rope()),
            teacher: teacher.map(|t| Rc::new(t.rope())),
        }
    }
}

fn check_setup<F: Scalar>(params: &ModelParams<F>, teacher: Option<&ModelParams<F>>, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.seq_len > params.max_len {
        return Err(invalid(format!("seq_len {} exceeds max_len {}", cfg.seq_len, params.max_len)));
    }
    if let Some(t) = teacher {
        if t.spec.vocab != params.spec.vocab {
            return Err(invalid("teacher and student vocabularies differ"));
        }
        if cfg.seq_len > t.max_len {
            return Err(invalid("seq_len exceeds the teacher's max_len"));
        }
        if t.variant != Variant::Target {
            return Err(invalid("the teacher must be a target model"));
        }
    }
    if let Variant::Spire { offset } = params.variant {
        let t = teacher.ok_or_else(|| invalid("feedback drafts train against a teacher"))?;
        check_offset(t.spec.n_layer as usize, params.spec.n_layer as usize, offset)?;
        if t.spec.d_model != params.spec.d_model {
            return Err(invalid("feedback draft width differs from the teacher"));
        }
        if cfg.seq_len % cfg.k != 0 {
            return Err(invalid(format!("seq_len {} is not divisible by k = {}", cfg.seq_len, cfg.k)));
        }
    }
    if cfg.loss == LossKind::Mixed && teacher.is_none() {
        return Err(invalid("the mixed loss needs a teacher"));
    }
    Ok(())
}

/// Per-step record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f32,
    pub lr: f64,
    pub grad_norm: f32,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub log: Vec<StepLog>,
}

/// Trains `params` on seeded random windows of `data`.
pub fn train(
    mut params: ModelParams<f32>,
    teacher: Option<&ModelParams<f32>>,
    data: &[u8],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    check_setup(&params, teacher, cfg)?;
    if data.len() <= cfg.seq_len {
        return Err(invalid("training data is shorter than one sequence"));
    }
    let ropes = Ropes::new(&params, teacher);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&params);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<Vec<usize>> = (0..cfg.batch)
            .map(|_| {
                let start = rng.random_range(0..data.len() - cfg.seq_len);
                data[start..=start + cfg.seq_len].iter().map(|&b| b as usize).collect()
            })
            .collect();
        let mut g = Graph::new();
        let vars = bind(&mut g, &params, true);
        let loss_var = batch_loss(&mut g, &params, &vars, teacher, &batch, cfg, cfg.loss, &ropes)?;
        let loss = g.value(loss_var).data[0];
        if !loss.is_finite() {
            return Err(Error::TrainingFailure {
                step,
                loss: loss as f64,
            });
        }
        g.backward(loss_var);
        let mut grads: Vec<Vec<f32>> = vars
            .iter()
            .zip(&params.tensors)
            .map(|(&v, t)| g.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; t.data.len()]))
            .collect();
        let norm = grads.iter().flatten().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt() as f32;
        if !norm.is_finite() {
            return Err(Error::TrainingFailure {
                step,
                loss: f64::NAN,
            });
        }
        if cfg.grad_clip > 0.0 && norm as f64 > cfg.grad_clip {
            let s = (cfg.grad_clip / norm as f64) as f32;
            grads.iter_mut().flatten().for_each(|x| *x *= s);
        }
        let lr = cfg.lr_at(step);
        adam.step(&mut params, &grads, lr, cfg);
        let entry = StepLog {
            step,
            loss,
            lr,
            grad_norm: norm,
        };
        on_step(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { params, log })
}

/// Mean next-token cross-entropy over `windows` (each `seq_len + 1` long).
pub fn eval_hard_loss(
    params: &ModelParams<f32>,
    teacher: Option<&ModelParams<f32>>,
    windows: &[Vec<usize>],
    k: usize,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(invalid("no evaluation windows"));
    }
    let cfg = TrainConfig {
        k,
        loss: LossKind::Hard,
        seq_len: windows[0].len() - 1,
        ..TrainConfig::default()
    };
    check_setup(params, teacher, &cfg)?;
    let ropes = Ropes::new(params, teacher);
    let mut total = 0.0;
    for chunk in windows.chunks(8) {
        let mut g = Graph::new();
        let vars = bind(&mut g, params, false);
        let loss = batch_loss(&mut g, params, &vars, teacher, chunk, &cfg, LossKind::Hard, &ropes)?;
        total += g.value(loss).data[0] as f64 * chunk.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

/// Loss of `params` on one batch at any precision, with gradients for
/// every parameter tensor. Used for finite-difference checks.
pub fn loss_and_grads<F: Scalar>(
    params: &ModelParams<F>,
    teacher: Option<&ModelParams<F>>,
    batch: &[Vec<usize>],
    cfg: &TrainConfig,
) -> Result<(F, Vec<Tensor<F>>)> {
    let cfg = TrainConfig {
        seq_len: batch[0].len() - 1,
        ..cfg.clone()
    };
    check_setup(params, teacher, &cfg)?;
    let ropes = Ropes::new(params, teacher);
    let mut g = Graph::new();
    let vars = bind(&mut g, params, true);
    let loss = batch_loss(&mut g, params, &vars, teacher, batch, &cfg, cfg.loss, &ropes)?;
    g.backward(loss);
    let grads = vars
        .iter()
        .zip(&params.tensors)
        .map(|(&v, t)| {
            let data = g.grad(v).map(<[F]>::to_vec).unwrap_or_else(|| vec![F::zero(); t.data.len()]);
            Tensor::from_vec(t.rows(), t.cols(), data)
        })
        .collect();
    Ok((g.value(loss).data[0], grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{AttentionPolicy, PositionScheme, TransformerSpec};
    use crate::tinymodel::model::prune_init;

    fn spec() -> TransformerSpec {
        TransformerSpec {
            n_layer: 2,
            d_model: 16,
            n_heads: 2,
            n_kv_heads: 2,
            d_head: 8,
            d_ff: 32,
            vocab: 256,
            bytes_per_param: 4,
            attention: AttentionPolicy::Dense,
            positions: PositionScheme::TextAbsolute,
        }
    }

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig {
            lr: 1.0,
            warmup_steps: 10,
            steps: 110,
            min_lr_ratio: 0.1,
            ..TrainConfig::default()
        };
        assert!((cfg.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(10) - 1.0).abs() < 1e-12);
        assert!((cfg.lr_at(60) - 0.55).abs() < 1e-12);
        assert!((cfg.lr_at(109) - 0.1).abs() < 1e-3);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let data = super::super::corpus::BUNDLED;
        let cfg = TrainConfig {
            steps: 30,
            batch: 2,
            seq_len: 32,
            loss: LossKind::Hard,
            warmup_steps: 5,
            lr: 1e-2,
            seed: 3,
            ..TrainConfig::default()
        };
        let init = ModelParams::<f32>::init(spec(), Variant::Target, 64, 1).unwrap();
        let a = train(init.clone(), None, data, &cfg, |_| {}).unwrap();
        let b = train(init.clone(), None, data, &cfg, |_| {}).unwrap();
        assert_eq!(a.params, b.params);
        let windows = super::super::corpus::sample_windows(data, 8, 33, 4).unwrap();
        let before = eval_hard_loss(&init, None, &windows, 4).unwrap();
        let after = eval_hard_loss(&a.params, None, &windows, 4).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn feedback_draft_trains_against_teacher() {
        let data = super::super::corpus::BUNDLED;
        let teacher = ModelParams::<f32>::init(spec(), Variant::Target, 64, 2).unwrap();
        let draft = prune_init(&teacher, 1, AttentionPolicy::streaming(4, 1), true, None).unwrap();
        let cfg = TrainConfig {
            steps: 3,
            batch: 2,
            seq_len: 16,
            ..TrainConfig::default()
        };
        let out = train(draft.clone(), Some(&teacher), data, &cfg, |_| {}).unwrap();
        assert_eq!(out.log.len(), 3);
        assert!(train(draft.clone(), None, data, &cfg, |_| {}).is_err());
        let odd = TrainConfig { seq_len: 18, ..cfg };
        assert!(train(draft, Some(&teacher), data, &odd, |_| {}).is_err());
    }
}
