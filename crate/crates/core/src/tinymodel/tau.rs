//! Empirical tau: rounds of draft-then-verify with real model
//! distributions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::autograd::RopeTable;
use super::infer::{Drafter, SelfSpecDrafter, SpireDrafter, StepOut, TargetSession, VanillaDrafter};
use super::model::{ModelParams, Variant};
use crate::arch::PositionScheme;
use crate::error::{invalid, Result};
use crate::specdec::{verify_round_with, CategoricalDist, TauEstimate};

/// Draft used for a measurement.
#[derive(Debug, Clone, Copy)]
pub enum DraftModel<'a> {
    Vanilla(&'a ModelParams<f32>),
    /// The target itself behind a streaming mask.
    SelfSpec {
        window: u64,
        sink: u64,
        positions: PositionScheme,
    },
    Spire(&'a ModelParams<f32>),
}

/// Outcome of generating from one context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextRun {
    /// Tokens emitted by each round.
    pub counts: Vec<usize>,
    /// Largest draft decode state observed, in cached positions.
    pub max_draft_state: usize,
    pub draft_forwards: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TauReport {
    pub estimate: TauEstimate,
    pub max_draft_state: usize,
    pub draft_forwards: usize,
    pub contexts: usize,
}

fn make_drafter<'a>(
    target: &'a ModelParams<f32>,
    draft: DraftModel<'a>,
    draft_rope: &'a RopeTable<f32>,
) -> Result<Box<dyn Drafter + 'a>> {
    Ok(match draft {
        DraftModel::Vanilla(p) => {
            if p.spec.vocab != target.spec.vocab {
                return Err(invalid("draft and target vocabularies differ"));
            }
            Box::new(VanillaDrafter::new(p, draft_rope)?)
        }
        DraftModel::SelfSpec {
            window,
            sink,
            positions,
        } => Box::new(SelfSpecDrafter::new(target, window, sink, positions)?),
        DraftModel::Spire(p) => {
            if p.spec.vocab != target.spec.vocab || p.spec.d_model != target.spec.d_model {
                return Err(invalid("feedback draft does not match the target"));
            }
            if let Variant::Spire { offset } = p.variant {
                super::model::check_offset(target.spec.n_layer as usize, p.spec.n_layer as usize, offset)?;
            }
            Box::new(SpireDrafter::new(p, draft_rope)?)
        }
    })
}

fn draft_params<'a>(target: &'a ModelParams<f32>, draft: &DraftModel<'a>) -> &'a ModelParams<f32> {
    match *draft {
        DraftModel::Vanilla(p) | DraftModel::Spire(p) => p,
        DraftModel::SelfSpec { .. } => target,
    }
}

/// Generates at least `g` tokens after `context`, `k` drafts per round.
pub fn run_context(
    target: &ModelParams<f32>,
    draft: DraftModel,
    context: &[usize],
    g: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ContextRun> {
    if target.variant != Variant::Target {
        return Err(invalid("the verifier must be a target model"));
    }
    if context.is_empty() || g == 0 || k == 0 {
        return Err(invalid("context, G and k must be nonempty"));
    }
    let horizon = context.len() + g + k;
    let dp = draft_params(target, &draft);
    let max_len = target.max_len.min(dp.max_len);
    if horizon > max_len {
        return Err(invalid(format!(
            "context {} + G {g} + k {k} exceeds the maximum length {max_len}",
            context.len()
        )));
    }
    let rope = RopeTable::new(target.spec.d_head as usize, horizon);
    let draft_rope = RopeTable::new(dp.spec.d_head as usize, horizon);
    let mut session = TargetSession::new(target, &rope)?;
    let mut drafter = make_drafter(target, draft, &draft_rope)?;

    let mut tokens = context.to_vec();
    let prefill: Vec<StepOut> = context[..context.len() - 1]
        .iter()
        .map(|&t| session.step(t))
        .collect::<Result<_>>()?;
    drafter.observe(0, &prefill)?;
    drop(prefill);

    let mut counts = Vec::new();
    let mut generated = 0;
    while generated < g {
        let start = tokens.len() - 1;
        drafter.begin_round(&session, &tokens)?;
        let mut q_seq = Vec::with_capacity(k);
        let mut drafts = Vec::with_capacity(k);
        let mut tok = tokens[start];
        for j in 0..k {
            let logits = drafter.propose(&session, tok, start + j)?;
            let q = CategoricalDist::from_logits(&logits)?;
            tok = q.sample(rng);
            q_seq.push(q);
            drafts.push(tok);
        }
        let mut outs = Vec::with_capacity(k + 1);
        outs.push(session.step(tokens[start])?);
        for &d in &drafts {
            outs.push(session.step(d)?);
        }
        let p_seq = outs
            .iter()
            .map(|o| CategoricalDist::from_logits(&o.logits))
            .collect::<Result<Vec<_>>>()?;
        let outcome = verify_round_with(&p_seq, &q_seq, &drafts, rng)?;
        let a = outcome.accepted;
        session.truncate(start + a + 1);
        drafter.observe(start, &outs[..=a])?;
        drafter.end_round(start + a + 1);
        generated += outcome.emitted();
        counts.push(outcome.emitted());
        tokens.extend_from_slice(&outcome.tokens);
    }
    Ok(ContextRun {
        counts,
        max_draft_state: drafter.state_positions(),
        draft_forwards: drafter.forwards(),
    })
}

/// Generator for context `index` of a measurement seeded with `seed`.
pub fn context_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Runs every context (in parallel) and pools the rounds in context order.
pub fn measure_tau_report(
    target: &ModelParams<f32>,
    draft: DraftModel,
    contexts: &[Vec<usize>],
    g: usize,
    k: usize,
    seed: u64,
) -> Result<TauReport> {
    let runs = contexts
        .par_iter()
        .enumerate()
        .map(|(i, c)| run_context(target, draft, c, g, k, &mut context_rng(seed, i)))
        .collect::<Result<Vec<_>>>()?;
    let estimate = TauEstimate::from_counts(runs.iter().flat_map(|r| r.counts.iter().copied()))?;
    Ok(TauReport {
        estimate,
        max_draft_state: runs.iter().map(|r| r.max_draft_state).max().unwrap_or(0),
        draft_forwards: runs.iter().map(|r| r.draft_forwards).sum(),
        contexts: runs.len(),
    })
}

/// Mean tokens per round with a 95% interval, pooled over all rounds.
pub fn measure_tau(
    target: &ModelParams<f32>,
    draft: DraftModel,
    contexts: &[Vec<usize>],
    g: usize,
    k: usize,
    seed: u64,
) -> Result<TauEstimate> {
    Ok(measure_tau_report(target, draft, contexts, g, k, seed)?.estimate)
}
