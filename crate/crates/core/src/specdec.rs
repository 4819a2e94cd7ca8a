//! Token verification by modified rejection sampling.
//!
//! A draft token `x ~ q` is accepted with probability `min(1, p(x)/q(x))`.
//! On the first rejection one token is drawn from `norm(max(0, p - q))` and
//! the round ends; if all `k` drafts survive, a bonus token is drawn from
//! the target's next distribution. Either way the emitted tokens are exact
//! samples from `p`.
//!
//! Each position consumes one uniform for the accept test; the residual or
//! bonus draw consumes one more and inverts the CDF in index order.

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

/// Tolerance on the total mass of a [`CategoricalDist`].
pub const MASS_TOLERANCE: f64 = 1e-9;

/// z-score of a two-sided 95% normal interval.
pub const Z_95: f64 = 1.96;

/// Probability vector over a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDist {
    probs: Vec<f64>,
}

impl CategoricalDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(invalid("distribution must have at least one entry"));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(invalid("probabilities must be finite and nonnegative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(CategoricalDist { probs })
    }

    /// Normalizes nonnegative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(invalid("weights must have positive finite total"));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn one_hot(vocab: usize, index: usize) -> Result<Self> {
        if index >= vocab {
            return Err(invalid(format!("index {index} outside vocabulary of {vocab}")));
        }
        let mut probs = vec![0.0; vocab];
        probs[index] = 1.0;
        Ok(CategoricalDist { probs })
    }

    pub fn uniform(vocab: usize) -> Result<Self> {
        if vocab == 0 {
            return Err(invalid("empty vocabulary"));
        }
        Ok(CategoricalDist {
            probs: vec![1.0 / vocab as f64; vocab],
        })
    }

    /// Softmax of `logits` (any finite reals).
    pub fn from_logits(logits: &[f32]) -> Result<Self> {
        if logits.is_empty() {
            return Err(invalid("empty logits"));
        }
        let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = logits.iter().map(|&l| ((l - max) as f64).exp()).collect();
        Self::from_weights(&exps)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Inverse-CDF lookup of a uniform `u ∈ [0, 1)`, scanning in index
    /// order. Zero-probability entries are never returned.
    pub fn sample_with(&self, u: f64) -> usize {
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last_positive = i;
                if u < acc {
                    return i;
                }
            }
        }
        // Rounding left u above the accumulated mass.
        last_positive
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.sample_with(rng.random::<f64>())
    }
}

fn check_pair(p: &CategoricalDist, q: &CategoricalDist) -> Result<()> {
    if p.len() != q.len() {
        return Err(invalid(format!(
            "vocabulary mismatch: p has {} entries, q has {}",
            p.len(),
            q.len()
        )));
    }
    Ok(())
}

/// Expected acceptance probability `Σ min(p_i, q_i)`.
pub fn acceptance_prob(p: &CategoricalDist, q: &CategoricalDist) -> Result<f64> {
    check_pair(p, q)?;
    Ok(p.probs.iter().zip(&q.probs).map(|(a, b)| a.min(*b)).sum())
}

pub fn total_variation(p: &CategoricalDist, q: &CategoricalDist) -> Result<f64> {
    check_pair(p, q)?;
    Ok(0.5 * p.probs.iter().zip(&q.probs).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// `norm(max(0, p - q))`, the distribution sampled after a rejection.
pub fn residual(p: &CategoricalDist, q: &CategoricalDist) -> Result<CategoricalDist> {
    check_pair(p, q)?;
    let excess: Vec<f64> = p.probs.iter().zip(&q.probs).map(|(a, b)| (a - b).max(0.0)).collect();
    let mass: f64 = excess.iter().sum();
    if mass <= 0.0 {
        return Err(Error::UndefinedResidual);
    }
    Ok(CategoricalDist {
        probs: excess.into_iter().map(|e| e / mass).collect(),
    })
}

/// Probability that draft token `x` is accepted: `min(1, p(x)/q(x))`, with
/// `q(x) = 0` counted as certain rejection.
pub fn acceptance_ratio(p: &CategoricalDist, q: &CategoricalDist, x: usize) -> f64 {
    let qx = q.probs[x];
    if qx <= 0.0 {
        0.0
    } else {
        (p.probs[x] / qx).min(1.0)
    }
}

/// Outcome of one verification position given its two uniforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepDecision {
    Accept,
    /// Rejected; carries the replacement token.
    Reject(usize),
}

/// Verifies draft token `x` using `u_accept` for the accept test and
/// `u_resample` for the residual draw.
pub fn verify_step(
    p: &CategoricalDist,
    q: &CategoricalDist,
    x: usize,
    u_accept: f64,
    u_resample: f64,
) -> Result<StepDecision> {
    check_pair(p, q)?;
    if x >= q.len() {
        return Err(invalid(format!("draft token {x} outside vocabulary of {}", q.len())));
    }
    if u_accept < acceptance_ratio(p, q, x) {
        return Ok(StepDecision::Accept);
    }
    let r = residual(p, q)?;
    Ok(StepDecision::Reject(r.sample_with(u_resample)))
}

/// Result of one round of speculation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundOutcome {
    /// Draft tokens accepted before the first rejection.
    pub accepted: usize,
    /// Tokens emitted: the accepted drafts plus one residual or bonus token.
    pub tokens: Vec<usize>,
}

impl RoundOutcome {
    pub fn emitted(&self) -> usize {
        self.tokens.len()
    }
}

/// Verifies a block of `k` draft tokens drawing uniforms from `rng`.
pub fn verify_round_with<R: Rng + ?Sized>(
    p_seq: &[CategoricalDist],
    q_seq: &[CategoricalDist],
    draft_tokens: &[usize],
    rng: &mut R,
) -> Result<RoundOutcome> {
    let k = draft_tokens.len();
    if q_seq.len() != k || p_seq.len() != k + 1 {
        return Err(invalid(format!(
            "expected {} target and {k} draft distributions, got {} and {}",
            k + 1,
            p_seq.len(),
            q_seq.len()
        )));
    }
    let mut tokens = Vec::with_capacity(k + 1);
    for i in 0..k {
        let x = draft_tokens[i];
        check_pair(&p_seq[i], &q_seq[i])?;
        if x >= q_seq[i].len() {
            return Err(invalid(format!("draft token {x} outside vocabulary")));
        }
        let u = rng.random::<f64>();
        if u < acceptance_ratio(&p_seq[i], &q_seq[i], x) {
            tokens.push(x);
            continue;
        }
        let r = residual(&p_seq[i], &q_seq[i])?;
        tokens.push(r.sample(rng));
        return Ok(RoundOutcome { accepted: i, tokens });
    }
    tokens.push(p_seq[k].sample(rng));
    Ok(RoundOutcome { accepted: k, tokens })
}

/// [`verify_round_with`] using a ChaCha8 stream seeded by `seed`.
pub fn verify_round(
    p_seq: &[CategoricalDist],
    q_seq: &[CategoricalDist],
    draft_tokens: &[usize],
    seed: u64,
) -> Result<RoundOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    verify_round_with(p_seq, q_seq, draft_tokens, &mut rng)
}

/// Expected tokens per round when every position is accepted independently
/// with probability `alpha`: `(1 - alpha^(k+1)) / (1 - alpha)`.
pub fn tau_analytic(alpha: f64, k: u32) -> f64 {
    if alpha >= 1.0 {
        return (k + 1) as f64;
    }
    (1.0 - alpha.powi(k as i32 + 1)) / (1.0 - alpha)
}

/// Mean tokens per round with a normal-approximation 95% half-width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauEstimate {
    pub mean: f64,
    pub half_width_95: f64,
    pub n_rounds: usize,
}

impl TauEstimate {
    /// Summarizes per-round emitted counts.
    pub fn from_counts<I: IntoIterator<Item = usize>>(counts: I) -> Result<Self> {
        let mut n = 0usize;
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for c in counts {
            n += 1;
            let x = c as f64;
            let delta = x - mean;
            mean += delta / n as f64;
            m2 += delta * (x - mean);
        }
        if n < 2 {
            return Err(invalid(format!("need at least 2 rounds, got {n}")));
        }
        let sd = (m2 / (n - 1) as f64).sqrt();
        Ok(TauEstimate {
            mean,
            half_width_95: Z_95 * sd / (n as f64).sqrt(),
            n_rounds: n,
        })
    }

    pub fn contains(&self, value: f64) -> bool {
        (value - self.mean).abs() <= self.half_width_95
    }

    /// True when the two 95% intervals are disjoint.
    pub fn separated_from(&self, other: &TauEstimate) -> bool {
        (self.mean - other.mean).abs() > self.half_width_95 + other.half_width_95
    }
}

/// Draws `n_rounds` outcomes from `round_source` and summarizes them.
pub fn tau_monte_carlo<I>(round_source: I, n_rounds: usize) -> Result<TauEstimate>
where
    I: IntoIterator<Item = Result<RoundOutcome>>,
{
    if n_rounds < 2 {
        return Err(invalid(format!("n_rounds must be at least 2, got {n_rounds}")));
    }
    let mut counts = Vec::with_capacity(n_rounds);
    for outcome in round_source.into_iter().take(n_rounds) {
        counts.push(outcome?.emitted());
    }
    if counts.len() < n_rounds {
        return Err(invalid(format!(
            "round source ended after {} of {n_rounds} rounds",
            counts.len()
        )));
    }
    TauEstimate::from_counts(counts)
}

/// Endless rounds in which every position shares `(p, q)` and drafts are
/// sampled from `q`. Used for i.i.d. acceptance experiments.
pub struct IidRounds {
    p: CategoricalDist,
    q: CategoricalDist,
    k: usize,
    rng: ChaCha8Rng,
}

impl IidRounds {
    pub fn new(p: CategoricalDist, q: CategoricalDist, k: usize, seed: u64) -> Result<Self> {
        check_pair(&p, &q)?;
        Ok(IidRounds {
            p,
            q,
            k,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// A pair with acceptance probability exactly `alpha`:
    /// `p = [alpha, 1 - alpha]`, `q = [1, 0]`.
    pub fn with_alpha(alpha: f64, k: usize, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(invalid(format!("alpha = {alpha} outside [0, 1]")));
        }
        let p = CategoricalDist::new(vec![alpha, 1.0 - alpha])?;
        let q = CategoricalDist::one_hot(2, 0)?;
        Self::new(p, q, k, seed)
    }
}

impl Iterator for IidRounds {
    type Item = Result<RoundOutcome>;

    fn next(&mut self) -> Option<Self::Item> {
        let drafts: Vec<usize> = (0..self.k).map(|_| self.q.sample(&mut self.rng)).collect();
        let p_seq = vec![self.p.clone(); self.k + 1];
        let q_seq = vec![self.q.clone(); self.k];
        Some(verify_round_with(&p_seq, &q_seq, &drafts, &mut self.rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(v: &[f64]) -> CategoricalDist {
        CategoricalDist::new(v.to_vec()).unwrap()
    }

    #[test]
    fn dist_validation() {
        assert!(CategoricalDist::new(vec![]).is_err());
        assert!(CategoricalDist::new(vec![0.5, 0.6]).is_err());
        assert!(CategoricalDist::new(vec![-0.1, 1.1]).is_err());
        assert!(CategoricalDist::new(vec![0.5, 0.5 + 5e-10]).is_ok());
    }

    #[test]
    fn acceptance_examples() {
        let p = dist(&[0.5, 0.5]);
        assert_eq!(acceptance_prob(&p, &p).unwrap(), 1.0);
        assert_eq!(acceptance_prob(&p, &dist(&[1.0, 0.0])).unwrap(), 0.5);
        assert_eq!(acceptance_prob(&dist(&[1.0, 0.0]), &dist(&[0.0, 1.0])).unwrap(), 0.0);
        assert!(acceptance_prob(&p, &dist(&[1.0])).is_err());
    }

    #[test]
    fn residual_examples() {
        let r = residual(&dist(&[0.5, 0.5]), &dist(&[1.0, 0.0])).unwrap();
        assert_eq!(r.probs(), &[0.0, 1.0]);
        let r = residual(&dist(&[0.7, 0.3]), &dist(&[0.3, 0.7])).unwrap();
        assert_eq!(r.probs(), &[1.0, 0.0]);
        let r = residual(&dist(&[0.0, 0.0, 1.0]), &dist(&[0.2, 0.3, 0.5])).unwrap();
        assert_eq!(r.probs(), &[0.0, 0.0, 1.0]);
        let p = dist(&[0.25, 0.75]);
        assert!(matches!(residual(&p, &p), Err(Error::UndefinedResidual)));
    }

    #[test]
    fn inverse_cdf_partitions_unit_interval() {
        let d = dist(&[0.25, 0.0, 0.5, 0.25]);
        assert_eq!(d.sample_with(0.0), 0);
        assert_eq!(d.sample_with(0.2499), 0);
        assert_eq!(d.sample_with(0.25), 2);
        assert_eq!(d.sample_with(0.7499), 2);
        assert_eq!(d.sample_with(0.75), 3);
        assert_eq!(d.sample_with(0.999999), 3);
        assert_eq!(dist(&[0.0, 1.0, 0.0]).sample_with(0.9999999999), 1);
    }

    #[test]
    fn identical_distributions_accept_everything() {
        let p = dist(&[0.1, 0.2, 0.3, 0.4]);
        for seed in 0..50 {
            let out = verify_round(&vec![p.clone(); 5], &vec![p.clone(); 4], &[3, 0, 2, 1], seed).unwrap();
            assert_eq!(out.accepted, 4);
            assert_eq!(out.emitted(), 5);
        }
    }

    #[test]
    fn certain_rejection() {
        let p = dist(&[0.0, 0.6, 0.4]);
        let q = dist(&[1.0, 0.0, 0.0]);
        for seed in 0..20 {
            let out = verify_round(&vec![p.clone(); 3], &vec![q.clone(); 2], &[0, 0], seed).unwrap();
            assert_eq!(out.accepted, 0);
            assert_eq!(out.emitted(), 1);
            assert_ne!(out.tokens[0], 0);
        }
    }

    #[test]
    fn zero_draft_mass_is_rejection() {
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[1.0, 0.0]);
        assert_eq!(acceptance_ratio(&p, &q, 1), 0.0);
        assert_eq!(verify_step(&p, &q, 1, 0.0, 0.9).unwrap(), StepDecision::Reject(1));
    }

    #[test]
    fn verify_round_is_deterministic_and_validates() {
        let p = dist(&[0.3, 0.7]);
        let q = dist(&[0.6, 0.4]);
        let ps = vec![p.clone(); 5];
        let qs = vec![q.clone(); 4];
        let a = verify_round(&ps, &qs, &[0, 1, 0, 0], 7).unwrap();
        let b = verify_round(&ps, &qs, &[0, 1, 0, 0], 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.emitted(), a.accepted + 1);
        assert!(verify_round(&ps[..4], &qs, &[0, 1, 0, 0], 7).is_err());
        assert!(verify_round(&ps, &qs, &[0, 1, 5, 0], 7).is_err());
    }

    #[test]
    fn tau_analytic_examples() {
        assert_eq!(tau_analytic(0.5, 4), 1.9375);
        assert_eq!(tau_analytic(0.0, 4), 1.0);
        assert_eq!(tau_analytic(1.0, 4), 5.0);
    }

    #[test]
    fn tau_estimates() {
        let all_fives = std::iter::repeat_with(|| {
            Ok(RoundOutcome {
                accepted: 4,
                tokens: vec![0; 5],
            })
        });
        let est = tau_monte_carlo(all_fives, 100).unwrap();
        assert_eq!((est.mean, est.half_width_95, est.n_rounds), (5.0, 0.0, 100));

        let rounds = IidRounds::with_alpha(0.5, 4, 11).unwrap();
        let est = tau_monte_carlo(rounds, 100_000).unwrap();
        assert!((est.mean - 1.9375).abs() < 3.0 * est.half_width_95 / Z_95);

        assert!(tau_monte_carlo(IidRounds::with_alpha(0.5, 4, 1).unwrap(), 1).is_err());
    }

    #[test]
    fn acceptance_equals_one_minus_tv() {
        let p = dist(&[0.1, 0.6, 0.3]);
        let q = dist(&[0.5, 0.25, 0.25]);
        let a = acceptance_prob(&p, &q).unwrap();
        let tv = total_variation(&p, &q).unwrap();
        assert!((a - (1.0 - tv)).abs() < 1e-15);
    }
}
