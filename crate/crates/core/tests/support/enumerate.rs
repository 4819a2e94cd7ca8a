//! Exact output distribution of one verification step, obtained by
//! splitting both uniforms into the intervals on which the decision is
//! constant and evaluating the real verifier at each interval midpoint.

#![allow(dead_code)]

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use specdec_lab::specdec::{verify_step, CategoricalDist, StepDecision};

/// Probability of each emitted token when the draft token is drawn from `q`.
pub fn step_output(p: &CategoricalDist, q: &CategoricalDist) -> Vec<f64> {
    let (pp, qq) = (p.probs(), q.probs());
    let n = pp.len();
    let mut out = vec![0.0; n];
    let excess: Vec<f64> = pp.iter().zip(qq).map(|(a, b)| (a - b).max(0.0)).collect();
    let z: f64 = excess.iter().sum();
    for x in 0..n {
        if qq[x] == 0.0 {
            continue;
        }
        let ratio = (pp[x] / qq[x]).min(1.0);
        if ratio > 0.0 {
            match verify_step(p, q, x, ratio / 2.0, 0.5).unwrap() {
                StepDecision::Accept => out[x] += qq[x] * ratio,
                StepDecision::Reject(_) => panic!("rejected inside the acceptance interval"),
            }
        }
        if ratio < 1.0 {
            let u_reject = (ratio + 1.0) / 2.0;
            let mut lo = 0.0;
            for e in &excess {
                let width = e / z;
                if width > 0.0 {
                    match verify_step(p, q, x, u_reject, lo + width / 2.0).unwrap() {
                        StepDecision::Reject(y) => out[y] += qq[x] * (1.0 - ratio) * width,
                        StepDecision::Accept => panic!("accepted inside the rejection interval"),
                    }
                }
                lo += width;
            }
        }
    }
    out
}

/// Probability that a draft token drawn from `q` is accepted, by the same
/// interval enumeration.
pub fn step_accept(p: &CategoricalDist, q: &CategoricalDist) -> f64 {
    let (pp, qq) = (p.probs(), q.probs());
    (0..pp.len())
        .filter(|&x| qq[x] > 0.0)
        .map(|x| {
            let ratio = (pp[x] / qq[x]).min(1.0);
            if ratio > 0.0 && verify_step(p, q, x, ratio / 2.0, 0.5).unwrap() == StepDecision::Accept {
                qq[x] * ratio
            } else {
                0.0
            }
        })
        .sum()
}

/// Expected emitted tokens of a `k`-position round with independent
/// per-position acceptance `a`, summed over the branches.
pub fn round_expectation(a: f64, k: usize) -> f64 {
    let mut total = 0.0;
    let mut reach = 1.0;
    for j in 0..k {
        total += reach * (1.0 - a) * (j + 1) as f64;
        reach *= a;
    }
    total + reach * (k + 1) as f64
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Distribution pairs over vocabularies 2..=8 built from small integer
/// weights (zeros included), plus equal pairs and disjoint supports.
pub fn pair_grid() -> Vec<(CategoricalDist, CategoricalDist)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut grid_dist = |n: usize| loop {
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0..5u32) as f64).collect();
        if w.iter().sum::<f64>() > 0.0 {
            return CategoricalDist::from_weights(&w).unwrap();
        }
    };
    let mut pairs = Vec::new();
    for n in 2..=8 {
        for _ in 0..32 {
            pairs.push((grid_dist(n), grid_dist(n)));
        }
        let p = grid_dist(n);
        pairs.push((p.clone(), p));
        pairs.push((CategoricalDist::one_hot(n, 0).unwrap(), CategoricalDist::one_hot(n, n - 1).unwrap()));
        pairs.push((CategoricalDist::uniform(n).unwrap(), CategoricalDist::one_hot(n, 1).unwrap()));
    }
    pairs
}
