//! Parameters and training-time forward passes of the target and draft
//! models.

use std::rc::Rc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::autograd::{softmax_into, Graph, HeadLayout, KeyLists, MaskedShape, RopeTable, Scalar, Tensor, Var};
use crate::arch::{AttentionPolicy, TransformerSpec};
use crate::error::{invalid, Result};

/// Which network a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Variant {
    Target,
    /// Small independent draft with its own dense cache.
    Vanilla,
    /// Feedback-memory draft. Draft layer `i` (1-based) reads memories
    /// from target activation `y^(i + offset - 1)`.
    Spire { offset: usize },
}

/// Tensors per transformer block, in declaration order.
pub const LAYER_TENSORS: [&str; 8] = ["ln1", "wq", "wk", "wv", "wo", "ln2", "w1", "w2"];

pub(crate) const LN1: usize = 0;
pub(crate) const WQ: usize = 1;
pub(crate) const WK: usize = 2;
pub(crate) const WV: usize = 3;
pub(crate) const WO: usize = 4;
pub(crate) const LN2: usize = 5;
pub(crate) const W1: usize = 6;
pub(crate) const W2: usize = 7;

/// `usize` view of a validated spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Dims {
    pub n_layer: usize,
    pub d: usize,
    pub n_heads: usize,
    pub n_kv: usize,
    pub dh: usize,
    pub d_ff: usize,
    pub vocab: usize,
}

impl Dims {
    pub fn of(spec: &TransformerSpec) -> Self {
        Dims {
            n_layer: spec.n_layer as usize,
            d: spec.d_model as usize,
            n_heads: spec.n_heads as usize,
            n_kv: spec.n_kv_heads as usize,
            dh: spec.d_head as usize,
            d_ff: spec.d_ff as usize,
            vocab: spec.vocab as usize,
        }
    }

    pub fn kv(&self) -> usize {
        self.n_kv * self.dh
    }

    pub fn heads(&self) -> HeadLayout {
        HeadLayout {
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv,
            d_head: self.dh,
        }
    }

    fn layer_shapes(&self) -> [[usize; 2]; 8] {
        let (d, kv, f) = (self.d, self.kv(), self.d_ff);
        [[1, d], [d, d], [d, kv], [d, kv], [d, d], [1, d], [d, f], [f, d]]
    }
}

/// Whether a query at `t` may attend to position `s` (0-based).
pub fn attends(policy: &AttentionPolicy, t: usize, s: usize) -> bool {
    if s > t {
        return false;
    }
    match *policy {
        AttentionPolicy::Dense => true,
        AttentionPolicy::Streaming { window, sink } => s as u64 + window > t as u64 || (s as u64) < sink,
    }
}

/// `mask[t][s]` is true when position `t` attends to position `s`.
pub fn streaming_mask(len: usize, window: u64, sink: u64) -> Result<Vec<Vec<bool>>> {
    let policy = AttentionPolicy::streaming(window, sink);
    policy.validate()?;
    Ok((0..len)
        .map(|t| (0..len).map(|s| attends(&policy, t, s)).collect())
        .collect())
}

/// Learnable per-layer mixing logits, `n_layer × (n_layer + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackMixWeights<F> {
    pub w: Tensor<F>,
}

impl<F: Scalar> FeedbackMixWeights<F> {
    pub fn uniform(n_layer: usize) -> Self {
        FeedbackMixWeights {
            w: Tensor::zeros(n_layer, n_layer + 1),
        }
    }

    /// Convex weights for draft layer `i` (1-based).
    pub fn weights(&self, i: usize) -> Vec<F> {
        let mut out = vec![F::zero(); self.w.cols()];
        softmax_into(self.w.row(i - 1), &mut out);
        out
    }
}

/// Activations `x^0..x^n_layer` of one sequence; each tensor is `[L, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace<F> {
    pub layers: Vec<Tensor<F>>,
}

impl<F: Scalar> ActivationTrace<F> {
    pub fn n_layer(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn len(&self) -> usize {
        self.layers[0].rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn at(&self, layer: usize, t: usize) -> &[F] {
        self.layers[layer].row(t)
    }
}

/// Memory vectors `m_t^i` for all positions of `trace`: the
/// `softmax(w_i)`-weighted combination of the layer activations.
pub fn memory_vectors<F: Scalar>(trace: &ActivationTrace<F>, w: &FeedbackMixWeights<F>, i: usize) -> Result<Tensor<F>> {
    if w.w.cols() != trace.layers.len() {
        return Err(invalid(format!(
            "mix weights cover {} layers, trace has {}",
            w.w.cols(),
            trace.layers.len()
        )));
    }
    if i == 0 || i > w.w.rows() {
        return Err(invalid(format!("layer {i} outside 1..={}", w.w.rows())));
    }
    let a = w.weights(i);
    let (rows, cols) = (trace.layers[0].rows(), trace.layers[0].cols());
    let mut out = Tensor::zeros(rows, cols);
    for (x, &ai) in trace.layers.iter().zip(&a) {
        for (o, &v) in out.data.iter_mut().zip(&x.data) {
            *o = *o + ai * v;
        }
    }
    Ok(out)
}

/// Parameters of one network, stored in declaration order:
/// `tok_emb`, the blocks, `ln_f`, `w_out`, then `mix` for feedback drafts.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub spec: TransformerSpec,
    pub variant: Variant,
    pub max_len: usize,
    pub(crate) tensors: Vec<Tensor<F>>,
}

impl<F: Scalar> ModelParams<F> {
    /// Names and shapes in declaration order.
    pub fn layout(spec: &TransformerSpec, variant: Variant) -> Vec<(String, [usize; 2])> {
        let dims = Dims::of(spec);
        let mut out = vec![("tok_emb".to_string(), [dims.vocab, dims.d])];
        for l in 0..dims.n_layer {
            for (name, shape) in LAYER_TENSORS.iter().zip(dims.layer_shapes()) {
                out.push((format!("layers.{l}.{name}"), shape));
            }
        }
        out.push(("ln_f".to_string(), [1, dims.d]));
        out.push(("w_out".to_string(), [dims.d, dims.vocab]));
        if matches!(variant, Variant::Spire { .. }) {
            out.push(("mix".to_string(), [dims.n_layer, dims.n_layer + 1]));
        }
        out
    }

    fn check(spec: &TransformerSpec, max_len: usize) -> Result<()> {
        spec.validate()?;
        if spec.d_head % 2 != 0 {
            return Err(invalid("rotary embedding needs an even d_head"));
        }
        if max_len == 0 {
            return Err(invalid("max_len must be at least 1"));
        }
        Ok(())
    }

    /// Seeded random initialization. Matrices are uniform with standard
    /// deviation `1/sqrt(fan_in)`; residual output projections are further
    /// scaled by `1/sqrt(2 n_layer)`. Norm gains start at one and mixing
    /// logits at zero.
    pub fn init(spec: TransformerSpec, variant: Variant, max_len: usize, seed: u64) -> Result<Self> {
        Self::check(&spec, max_len)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let residual_scale = 1.0 / (2.0 * spec.n_layer as f64).sqrt();
        let tensors = Self::layout(&spec, variant)
            .into_iter()
            .map(|(name, [r, c])| {
                let std = if name.ends_with("ln1") || name.ends_with("ln2") || name == "ln_f" {
                    return Tensor::from_vec(r, c, vec![F::one(); r * c]);
                } else if name == "mix" {
                    return Tensor::zeros(r, c);
                } else if name == "tok_emb" {
                    1.0
                } else if name.ends_with("wo") || name.ends_with("w2") {
                    residual_scale / (r as f64).sqrt()
                } else {
                    1.0 / (r as f64).sqrt()
                };
                let a = std * 3f64.sqrt();
                let data = (0..r * c)
                    .map(|_| F::from_f64_lossy((rng.random::<f64>() * 2.0 - 1.0) * a))
                    .collect();
                Tensor::from_vec(r, c, data)
            })
            .collect();
        Ok(ModelParams {
            spec,
            variant,
            max_len,
            tensors,
        })
    }

    /// Builds from tensors in declaration order, checking shapes.
    pub fn from_tensors(spec: TransformerSpec, variant: Variant, max_len: usize, tensors: Vec<Tensor<F>>) -> Result<Self> {
        Self::check(&spec, max_len)?;
        let layout = Self::layout(&spec, variant);
        if layout.len() != tensors.len() {
            return Err(invalid(format!("expected {} tensors, got {}", layout.len(), tensors.len())));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if *shape != t.shape {
                return Err(invalid(format!("{name}: expected shape {shape:?}, got {:?}", t.shape)));
            }
        }
        Ok(ModelParams {
            spec,
            variant,
            max_len,
            tensors,
        })
    }

    pub(crate) fn dims(&self) -> Dims {
        Dims::of(&self.spec)
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn names(&self) -> Vec<String> {
        Self::layout(&self.spec, self.variant).into_iter().map(|(n, _)| n).collect()
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub(crate) fn emb_index() -> usize {
        0
    }

    pub(crate) fn layer_index(layer: usize, which: usize) -> usize {
        1 + LAYER_TENSORS.len() * layer + which
    }

    pub(crate) fn ln_f_index(&self) -> usize {
        1 + LAYER_TENSORS.len() * self.dims().n_layer
    }

    pub(crate) fn w_out_index(&self) -> usize {
        self.ln_f_index() + 1
    }

    pub(crate) fn mix_index(&self) -> Option<usize> {
        matches!(self.variant, Variant::Spire { .. }).then(|| self.ln_f_index() + 2)
    }

    pub fn layer_tensor(&self, layer: usize, which: usize) -> &Tensor<F> {
        &self.tensors[Self::layer_index(layer, which)]
    }

    pub fn mix_weights(&self) -> Option<FeedbackMixWeights<F>> {
        self.mix_index().map(|i| FeedbackMixWeights {
            w: self.tensors[i].clone(),
        })
    }

    /// Element-wise conversion to another precision.
    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            spec: self.spec,
            variant: self.variant,
            max_len: self.max_len,
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::from_vec(t.rows(), t.cols(), t.data.iter().map(|&x| G::from_f64_lossy(x.to_f64().unwrap())).collect()))
                .collect(),
        }
    }

    pub fn rope(&self) -> RopeTable<F> {
        RopeTable::new(self.dims().dh, self.max_len)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(invalid("token sequence is empty"));
        }
        if tokens.len() > self.max_len {
            return Err(invalid(format!(
                "sequence length {} exceeds the maximum {}",
                tokens.len(),
                self.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.dims().vocab) {
            return Err(invalid(format!("token id {bad} outside vocabulary {}", self.dims().vocab)));
        }
        Ok(())
    }
}

/// Draft initialized from the top `layers_kept` blocks of `target`, with the
/// embedding, final norm and unembedding copied. Feedback drafts read
/// target activations at `offset`, which defaults to `n_layer - layers_kept`.
pub fn prune_init<F: Scalar>(
    target: &ModelParams<F>,
    layers_kept: usize,
    attention: AttentionPolicy,
    feedback: bool,
    offset: Option<usize>,
) -> Result<ModelParams<F>> {
    let n = target.dims().n_layer;
    let spec = crate::arch::prune_spec(&target.spec, layers_kept as u64)?.with_attention(attention);
    let first = n - layers_kept;
    let variant = if feedback {
        let offset = offset.unwrap_or(first);
        check_offset(n, layers_kept, offset)?;
        Variant::Spire { offset }
    } else {
        Variant::Vanilla
    };
    let mut tensors = vec![target.tensors[ModelParams::<F>::emb_index()].clone()];
    for l in first..n {
        for which in 0..LAYER_TENSORS.len() {
            tensors.push(target.layer_tensor(l, which).clone());
        }
    }
    tensors.push(target.tensors[target.ln_f_index()].clone());
    tensors.push(target.tensors[target.w_out_index()].clone());
    if feedback {
        tensors.push(Tensor::zeros(layers_kept, layers_kept + 1));
    }
    ModelParams::from_tensors(spec, variant, target.max_len, tensors)
}

/// Draft layer `i` (1-based) reads `y^(i + offset - 1)`, which must exist.
pub fn check_offset(target_layers: usize, draft_layers: usize, offset: usize) -> Result<()> {
    if draft_layers + offset > target_layers + 1 {
        return Err(invalid(format!(
            "substitution offset {offset} maps draft layer {draft_layers} past target layer {target_layers}"
        )));
    }
    Ok(())
}

/// Graph leaves for every parameter, trainable or constant.
pub(crate) fn bind<F: Scalar>(g: &mut Graph<F>, params: &ModelParams<F>, trainable: bool) -> Vec<Var> {
    params
        .tensors
        .iter()
        .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
        .collect()
}

struct Block<'a> {
    p: &'a [Var],
    heads: HeadLayout,
}

impl Block<'_> {
    fn qkv<F: Scalar>(&self, g: &mut Graph<F>, x: Var, positions: &[usize], rope: &Rc<RopeTable<F>>) -> (Var, Var, Var) {
        let h = g.rms_norm(x, self.p[LN1]);
        let q = g.matmul(h, self.p[WQ]);
        let q = g.rope(q, positions, rope);
        let (k, v) = self.kv(g, h, positions, rope);
        (q, k, v)
    }

    /// Key/value projections of an already normalized input.
    fn kv<F: Scalar>(&self, g: &mut Graph<F>, h: Var, positions: &[usize], rope: &Rc<RopeTable<F>>) -> (Var, Var) {
        let k = g.matmul(h, self.p[WK]);
        let k = g.rope(k, positions, rope);
        let v = g.matmul(h, self.p[WV]);
        (k, v)
    }

    fn finish<F: Scalar>(&self, g: &mut Graph<F>, x: Var, attn: Var) -> Var {
        let o = g.matmul(attn, self.p[WO]);
        let x = g.add(x, o);
        let h = g.rms_norm(x, self.p[LN2]);
        let f = g.matmul(h, self.p[W1]);
        let f = g.gelu(f);
        let f = g.matmul(f, self.p[W2]);
        g.add(x, f)
    }
}

fn block<'a, F: Scalar>(params: &ModelParams<F>, vars: &'a [Var], layer: usize) -> Block<'a> {
    let start = ModelParams::<F>::layer_index(layer, 0);
    Block {
        p: &vars[start..start + LAYER_TENSORS.len()],
        heads: params.dims().heads(),
    }
}

fn unembed<F: Scalar>(g: &mut Graph<F>, params: &ModelParams<F>, vars: &[Var], x: Var) -> Var {
    let h = g.rms_norm(x, vars[params.ln_f_index()]);
    g.matmul(h, vars[params.w_out_index()])
}

/// Standard causal forward over a batch of equal-length sequences. Rows are
/// ordered `b * L + t`. Returns logits and the per-layer activations.
pub(crate) fn target_graph<F: Scalar>(
    g: &mut Graph<F>,
    params: &ModelParams<F>,
    vars: &[Var],
    batch: &[&[usize]],
    rope: &Rc<RopeTable<F>>,
) -> (Var, Vec<Var>) {
    let len = batch[0].len();
    let ids: Vec<usize> = batch.iter().flat_map(|s| s.iter().copied()).collect();
    let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..len).collect();
    let (window, sink) = match params.spec.attention {
        AttentionPolicy::Dense => (None, 0),
        AttentionPolicy::Streaming { window, sink } => (Some(window as usize), sink as usize),
    };
    let shape = MaskedShape {
        n_seq: batch.len(),
        len,
        window,
        sink,
        heads: params.dims().heads(),
    };
    let mut x = g.embed(vars[ModelParams::<F>::emb_index()], &ids);
    let mut trace = vec![x];
    for l in 0..params.dims().n_layer {
        let blk = block(params, vars, l);
        let (q, k, v) = blk.qkv(g, x, &positions, rope);
        let a = g.masked_attention(q, k, v, shape);
        x = blk.finish(g, x, a);
        trace.push(x);
    }
    (unembed(g, params, vars, x), trace)
}

/// Causal logits `[L, V]` and the activation trace of one sequence.
pub fn forward_target<F: Scalar>(params: &ModelParams<F>, tokens: &[usize]) -> Result<(Tensor<F>, ActivationTrace<F>)> {
    params.check_tokens(tokens)?;
    let rope = Rc::new(params.rope());
    let mut g = Graph::new();
    let vars = bind(&mut g, params, false);
    let (logits, trace) = target_graph(&mut g, params, &vars, &[tokens], &rope);
    Ok((
        g.value(logits).clone(),
        ActivationTrace {
            layers: trace.iter().map(|&v| g.value(v).clone()).collect(),
        },
    ))
}

/// Pass-parallel feedback forward over a batch.
///
/// Pass `j` handles positions `t ≡ j (mod k)` of every block at once. For
/// draft layer `i` a query at `t` attends, under the draft's mask, to
/// keys and values derived from memory vectors: target activations
/// `y^(i+offset-1)` for positions before its block, mixed draft activations
/// from earlier passes for positions inside its block, and its own input
/// `x^(i-1)` at `t`. `target` holds one `[B*L, d]` tensor per target layer.
pub(crate) fn spire_graph<F: Scalar>(
    g: &mut Graph<F>,
    params: &ModelParams<F>,
    vars: &[Var],
    batch: &[&[usize]],
    target: &[Var],
    k: usize,
    rope: &Rc<RopeTable<F>>,
) -> Result<Var> {
    let Variant::Spire { offset } = params.variant else {
        return Err(invalid("feedback forward needs a feedback draft"));
    };
    let dims = params.dims();
    let n_b = batch.len();
    let len = batch[0].len();
    if k == 0 || len % k != 0 {
        return Err(invalid(format!("sequence length {len} is not divisible by k = {k}")));
    }
    check_offset(target.len() - 1, dims.n_layer, offset)?;
    let mix = vars[params.mix_index().expect("feedback drafts carry mixing weights")];
    let policy = params.spec.attention;
    let blocks = len / k;
    let per_pass = n_b * blocks;
    let all_positions: Vec<usize> = (0..n_b).flat_map(|_| 0..len).collect();
    let pass_positions = |j: usize| -> Vec<usize> { (0..n_b).flat_map(|_| (0..blocks).map(move |m| m * k + j)).collect() };

    // Keys and values of substituted memories, one pair per draft layer.
    let substituted: Vec<(Var, Var)> = (0..dims.n_layer)
        .map(|l| {
            let blk = block(params, vars, l);
            let h = g.rms_norm(target[l + offset], blk.p[LN1]);
            blk.kv(g, h, &all_positions, rope)
        })
        .collect();

    // mem_kv[j][l]: keys and values of pass j's memories at draft layer l.
    let mut mem_kv: Vec<Vec<(Var, Var)>> = Vec::with_capacity(k);
    let mut pass_logits = Vec::with_capacity(k);
    for j in 0..k {
        let positions = pass_positions(j);
        let ids: Vec<usize> = (0..n_b)
            .flat_map(|b| (0..blocks).map(move |m| batch[b][m * k + j]))
            .collect();
        let mut lists = KeyLists::new();
        for b in 0..n_b {
            for m in 0..blocks {
                let t = m * k + j;
                let qi = b * blocks + m;
                lists.push_query((0..=t).filter(|&s| attends(&policy, t, s)).map(|s| {
                    if s < m * k {
                        b * len + s
                    } else {
                        n_b * len + (s - m * k) * per_pass + qi
                    }
                }));
            }
        }
        let lists = Rc::new(lists);
        let mut x = g.embed(vars[ModelParams::<F>::emb_index()], &ids);
        let mut xs = vec![x];
        for l in 0..dims.n_layer {
            let blk = block(params, vars, l);
            let (q, k_self, v_self) = blk.qkv(g, x, &positions, rope);
            let mut keys = vec![substituted[l].0];
            let mut values = vec![substituted[l].1];
            for earlier in &mem_kv {
                keys.push(earlier[l].0);
                values.push(earlier[l].1);
            }
            keys.push(k_self);
            values.push(v_self);
            let keys = g.concat_rows(&keys);
            let values = g.concat_rows(&values);
            let a = g.attention(q, keys, values, &lists, blk.heads);
            x = blk.finish(g, x, a);
            xs.push(x);
        }
        pass_logits.push(unembed(g, params, vars, x));
        if j + 1 < k {
            let kv = (0..dims.n_layer)
                .map(|l| {
                    let blk = block(params, vars, l);
                    let m = g.mix(mix, l, &xs);
                    let h = g.rms_norm(m, blk.p[LN1]);
                    blk.kv(g, h, &positions, rope)
                })
                .collect();
            mem_kv.push(kv);
        }
    }
    let stacked = g.concat_rows(&pass_logits);
    let order: Vec<usize> = (0..n_b)
        .flat_map(|b| (0..len).map(move |t| (t % k) * per_pass + b * blocks + t / k))
        .collect();
    Ok(g.gather_rows(stacked, &order))
}

/// Logits `[L, V]` of a feedback draft trained with `k` passes, given the
/// target's activation trace on the same tokens.
pub fn spire_train_forward<F: Scalar>(
    tokens: &[usize],
    target_trace: &ActivationTrace<F>,
    params: &ModelParams<F>,
    k: usize,
) -> Result<Tensor<F>> {
    params.check_tokens(tokens)?;
    if target_trace.len() != tokens.len() || target_trace.layers[0].cols() != params.dims().d {
        return Err(invalid("target trace does not match the token sequence"));
    }
    let rope = Rc::new(params.rope());
    let mut g = Graph::new();
    let vars = bind(&mut g, params, false);
    let target: Vec<Var> = target_trace.layers.iter().map(|t| g.constant(t.clone())).collect();
    let logits = spire_graph(&mut g, params, &vars, &[tokens], &target, k, &rope)?;
    Ok(g.value(logits).clone())
}

/// Mean next-token cross-entropy of `logits` against `labels`.
pub fn hard_target_loss<F: Scalar>(logits: &Tensor<F>, labels: &[usize]) -> Result<F> {
    if labels.len() != logits.rows() || labels.iter().any(|&l| l >= logits.cols()) {
        return Err(invalid("labels do not match the logits"));
    }
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy(l, labels);
    Ok(g.value(loss).data[0])
}

/// `omega * E[-Σ p log q] - (1 - omega) * E[Σ min(p, q)]` with `q` the
/// softmax of `logits` and `p` the rows of `target_probs`.
pub fn mixed_loss<F: Scalar>(logits: &Tensor<F>, target_probs: &Tensor<F>, omega: f64) -> Result<F> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(invalid(format!("omega = {omega} outside [0, 1]")));
    }
    if logits.shape != target_probs.shape {
        return Err(invalid("target distribution shape does not match the logits"));
    }
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.mixed_loss(l, &Rc::new(target_probs.clone()), F::from_f64_lossy(omega));
    Ok(g.value(loss).data[0])
}

/// Row-wise softmax of a logits tensor.
pub fn softmax_rows<F: Scalar>(logits: &Tensor<F>) -> Tensor<F> {
    let mut out = Tensor::zeros(logits.rows(), logits.cols());
    let c = logits.cols();
    for r in 0..logits.rows() {
        softmax_into(logits.row(r), &mut out.data[r * c..(r + 1) * c]);
    }
    out
}
