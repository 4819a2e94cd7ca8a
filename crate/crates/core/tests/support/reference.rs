//! Plain position-by-position reference forwards in f64, written directly
//! from the layer equations without the graph engine.

#![allow(dead_code)]

use specdec_lab::arch::AttentionPolicy;
use specdec_lab::tinymodel::{ActivationTrace, ModelParams, Variant};

type Mat<'a> = (&'a [f64], usize, usize);

fn mat(p: &ModelParams<f64>, i: usize) -> Mat<'_> {
    let t = &p.tensors()[i];
    (&t.data, t.shape[0], t.shape[1])
}

fn vecmat(x: &[f64], (w, r, c): Mat) -> Vec<f64> {
    assert_eq!(x.len(), r);
    (0..c).map(|j| (0..r).map(|i| x[i] * w[i * c + j]).sum()).collect()
}

fn rms_norm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn rope(v: &mut [f64], pos: usize, d_head: usize) {
    let half = d_head / 2;
    for head in v.chunks_mut(d_head) {
        for i in 0..half {
            let angle = pos as f64 * 10000f64.powf(-(2.0 * i as f64) / d_head as f64);
            let (a, b) = (head[i], head[i + half]);
            head[i] = a * angle.cos() - b * angle.sin();
            head[i + half] = a * angle.sin() + b * angle.cos();
        }
    }
}

fn allowed(policy: &AttentionPolicy, t: usize, s: usize) -> bool {
    s <= t
        && match *policy {
            AttentionPolicy::Dense => true,
            AttentionPolicy::Streaming { window, sink } => s + window as usize > t || s < sink as usize,
        }
}

struct Layer {
    base: usize,
}

const LN1: usize = 0;
const WQ: usize = 1;
const WK: usize = 2;
const WV: usize = 3;
const WO: usize = 4;
const LN2: usize = 5;
const W1: usize = 6;
const W2: usize = 7;

impl Layer {
    fn new(l: usize) -> Self {
        Layer { base: 1 + 8 * l }
    }

    fn t<'a>(&self, p: &'a ModelParams<f64>, which: usize) -> Mat<'a> {
        mat(p, self.base + which)
    }

    /// Rotated key and value of an input at position `pos`.
    fn key_value(&self, p: &ModelParams<f64>, x: &[f64], pos: usize) -> (Vec<f64>, Vec<f64>) {
        let h = rms_norm(x, self.t(p, LN1).0);
        let mut k = vecmat(&h, self.t(p, WK));
        rope(&mut k, pos, p.spec.d_head as usize);
        (k, vecmat(&h, self.t(p, WV)))
    }

    /// Applies the block to `x` at position `t` given keys/values at
    /// positions `keys` (all attendable by `t`).
    fn apply(&self, p: &ModelParams<f64>, x: &[f64], t: usize, keys: &[(Vec<f64>, Vec<f64>)]) -> Vec<f64> {
        let dh = p.spec.d_head as usize;
        let n_heads = p.spec.n_heads as usize;
        let group = n_heads / p.spec.n_kv_heads as usize;
        let h = rms_norm(x, self.t(p, LN1).0);
        let mut q = vecmat(&h, self.t(p, WQ));
        rope(&mut q, t, dh);
        let mut attn = vec![0.0; n_heads * dh];
        for hd in 0..n_heads {
            let kvh = hd / group;
            let qh = &q[hd * dh..(hd + 1) * dh];
            let scores: Vec<f64> = keys
                .iter()
                .map(|(k, _)| qh.iter().zip(&k[kvh * dh..(kvh + 1) * dh]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for ((_, v), w) in keys.iter().zip(&e) {
                for i in 0..dh {
                    attn[hd * dh + i] += w / z * v[kvh * dh + i];
                }
            }
        }
        let o = vecmat(&attn, self.t(p, WO));
        let x1: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
        let h2 = rms_norm(&x1, self.t(p, LN2).0);
        let f: Vec<f64> = vecmat(&h2, self.t(p, W1)).into_iter().map(gelu).collect();
        let f = vecmat(&f, self.t(p, W2));
        x1.iter().zip(&f).map(|(a, b)| a + b).collect()
    }
}

fn n_layer(p: &ModelParams<f64>) -> usize {
    p.spec.n_layer as usize
}

fn embed(p: &ModelParams<f64>, tok: usize) -> Vec<f64> {
    let (e, _, d) = mat(p, 0);
    e[tok * d..(tok + 1) * d].to_vec()
}

fn logits(p: &ModelParams<f64>, x: &[f64]) -> Vec<f64> {
    let n = n_layer(p);
    let h = rms_norm(x, mat(p, 1 + 8 * n).0);
    vecmat(&h, mat(p, 2 + 8 * n))
}

fn softmax(w: &[f64]) -> Vec<f64> {
    let mx = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = w.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Ordinary causal forward: logits per position and the activations
/// `[layer][t]` with layer 0 the embedding.
pub fn target_forward(p: &ModelParams<f64>, tokens: &[usize]) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let n = n_layer(p);
    let mut acts: Vec<Vec<Vec<f64>>> = vec![Vec::new(); n + 1];
    let mut kv: Vec<Vec<(Vec<f64>, Vec<f64>)>> = vec![Vec::new(); n];
    let mut out = Vec::new();
    for (t, &tok) in tokens.iter().enumerate() {
        let mut x = embed(p, tok);
        acts[0].push(x.clone());
        for l in 0..n {
            let layer = Layer::new(l);
            kv[l].push(layer.key_value(p, &x, t));
            let keys: Vec<_> = (0..=t).filter(|&s| allowed(&p.spec.attention, t, s)).map(|s| kv[l][s].clone()).collect();
            x = layer.apply(p, &x, t, &keys);
            acts[l + 1].push(x.clone());
        }
        out.push(logits(p, &x));
    }
    (out, acts)
}

/// Feedback draft evaluated one position at a time. Memories before the
/// current block of `k` come from the target trace, memories inside it
/// from the draft's own mixed activations, and the self key from the
/// layer input.
pub fn feedback_forward(p: &ModelParams<f64>, tokens: &[usize], trace: &ActivationTrace<f64>, k: usize) -> Vec<Vec<f64>> {
    let Variant::Spire { offset } = p.variant else {
        panic!("not a feedback draft");
    };
    let n = n_layer(p);
    let (mix, _, cols) = mat(p, 3 + 8 * n);
    let weights: Vec<Vec<f64>> = (0..n).map(|i| softmax(&mix[i * cols..(i + 1) * cols])).collect();
    // Draft activations x^0..x^n per position computed so far.
    let mut draft_acts: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut out = Vec::new();
    for (t, &tok) in tokens.iter().enumerate() {
        let block_start = t / k * k;
        let mut x = embed(p, tok);
        let mut xs = vec![x.clone()];
        for l in 0..n {
            let layer = Layer::new(l);
            let keys: Vec<_> = (0..=t)
                .filter(|&s| allowed(&p.spec.attention, t, s))
                .map(|s| {
                    let memory = if s == t {
                        x.clone()
                    } else if s < block_start {
                        trace.at(l + offset, s).to_vec()
                    } else {
                        let d = x.len();
                        (0..d).map(|c| (0..=n).map(|lv| weights[l][lv] * draft_acts[s][lv][c]).sum()).collect()
                    };
                    layer.key_value(p, &memory, s)
                })
                .collect();
            x = layer.apply(p, &x, t, &keys);
            xs.push(x.clone());
        }
        draft_acts.push(xs);
        out.push(logits(p, &x));
    }
    out
}
