//! Incremental single-token inference with key/value caches.
//!
//! Every row is computed with the same sequence of floating-point
//! operations whether it is part of a prefill, a verification block or a
//! draft step. A self-speculation draft that attends to everything is
//! therefore bit-identical to the target.

use super::autograd::{axpy, dot, gelu_with_tanh, softmax_into, RopeTable, RMS_EPS};
use super::model::{attends, Dims, ModelParams, Variant, LN1, LN2, W1, W2, WK, WO, WQ, WV};
use crate::arch::{AttentionPolicy, PositionScheme};
use crate::error::{invalid, Result};

/// Result of running one token through a network.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOut {
    pub logits: Vec<f32>,
    /// Activations `x^0..x^n_layer` at this position.
    pub hidden: Vec<Vec<f32>>,
}

/// Cached keys (already rotated to their text position) and values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvStore {
    pos: Vec<usize>,
    k: Vec<f32>,
    v: Vec<f32>,
    width: usize,
}

impl KvStore {
    fn new(width: usize) -> Self {
        KvStore {
            width,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos.is_empty()
    }

    pub fn positions(&self) -> &[usize] {
        &self.pos
    }

    fn push(&mut self, pos: usize, k: &[f32], v: &[f32]) {
        self.pos.push(pos);
        self.k.extend_from_slice(k);
        self.v.extend_from_slice(v);
    }

    fn key(&self, i: usize) -> &[f32] {
        &self.k[i * self.width..(i + 1) * self.width]
    }

    fn value(&self, i: usize) -> &[f32] {
        &self.v[i * self.width..(i + 1) * self.width]
    }

    fn clear(&mut self) {
        self.pos.clear();
        self.k.clear();
        self.v.clear();
    }

    /// Drops entries at positions `>= len`.
    fn truncate_positions(&mut self, len: usize) {
        let keep = self.pos.iter().take_while(|&&p| p < len).count();
        self.pos.truncate(keep);
        self.k.truncate(keep * self.width);
        self.v.truncate(keep * self.width);
    }

    /// Keeps only entries for which `keep` holds.
    fn retain(&mut self, keep: impl Fn(usize) -> bool) {
        let w = self.width;
        let mut j = 0;
        for i in 0..self.pos.len() {
            if keep(self.pos[i]) {
                if i != j {
                    self.pos[j] = self.pos[i];
                    self.k.copy_within(i * w..(i + 1) * w, j * w);
                    self.v.copy_within(i * w..(i + 1) * w, j * w);
                }
                j += 1;
            }
        }
        self.pos.truncate(j);
        self.k.truncate(j * w);
        self.v.truncate(j * w);
    }
}

/// `x @ w` for a row vector `x` and a row-major `[x.len(), out]` matrix.
fn matvec(x: &[f32], w: &[f32], out_dim: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; out_dim];
    for (i, &xi) in x.iter().enumerate() {
        axpy(xi, &w[i * out_dim..(i + 1) * out_dim], &mut out);
    }
    out
}

fn rms_norm(x: &[f32], gain: &[f32]) -> Vec<f32> {
    let ms = x.iter().fold(0.0f32, |s, &v| s + v * v) / x.len() as f32;
    let inv = 1.0 / (ms + RMS_EPS as f32).sqrt();
    x.iter().zip(gain).map(|(&v, &g)| v * inv * g).collect()
}

fn gelu(x: f32) -> f32 {
    gelu_with_tanh(x).0
}

/// A key visible to a query. `relative` keys are scored against the query
/// rotated to its cache slot instead of its text position.
struct KeyRef<'a> {
    k: &'a [f32],
    v: &'a [f32],
    relative: bool,
}

/// Borrowed weights of one network with its rotary table.
pub(crate) struct Net<'a> {
    pub params: &'a ModelParams<f32>,
    pub dims: Dims,
    pub rope: &'a RopeTable<f32>,
}

impl<'a> Net<'a> {
    pub fn new(params: &'a ModelParams<f32>, rope: &'a RopeTable<f32>) -> Self {
        Net {
            params,
            dims: params.dims(),
            rope,
        }
    }

    fn w(&self, layer: usize, which: usize) -> &'a [f32] {
        &self.params.layer_tensor(layer, which).data
    }

    fn embed(&self, token: usize) -> Vec<f32> {
        self.params.tensors[ModelParams::<f32>::emb_index()].row(token).to_vec()
    }

    fn check_pos(&self, pos: usize) -> Result<()> {
        if pos >= self.rope.max_len() || pos >= self.params.max_len {
            return Err(invalid(format!(
                "position {pos} exceeds the maximum length {}",
                self.rope.max_len()
            )));
        }
        Ok(())
    }

    /// Query (unrotated), key (rotated to `pos`) and value of `x` at a layer.
    fn qkv(&self, layer: usize, x: &[f32], pos: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let h = rms_norm(x, self.w(layer, LN1));
        let q = matvec(&h, self.w(layer, WQ), self.dims.d);
        let (k, v) = self.kv_of_normed(layer, &h, pos);
        (q, k, v)
    }

    fn kv_of_normed(&self, layer: usize, h: &[f32], pos: usize) -> (Vec<f32>, Vec<f32>) {
        let mut k = matvec(h, self.w(layer, WK), self.dims.kv());
        self.rope.rotate(&mut k, pos, false);
        let v = matvec(h, self.w(layer, WV), self.dims.kv());
        (k, v)
    }

    /// Key and value derived from a memory vector.
    fn kv_of_memory(&self, layer: usize, m: &[f32], pos: usize) -> (Vec<f32>, Vec<f32>) {
        let h = rms_norm(m, self.w(layer, LN1));
        self.kv_of_normed(layer, &h, pos)
    }

    fn attend(&self, q: &[f32], pos: usize, slot: usize, keys: &[KeyRef]) -> Vec<f32> {
        let dh = self.dims.dh;
        let group = self.dims.n_heads / self.dims.n_kv;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut q_text = q.to_vec();
        self.rope.rotate(&mut q_text, pos, false);
        let q_slot = if keys.iter().any(|k| k.relative) {
            let mut q_slot = q.to_vec();
            self.rope.rotate(&mut q_slot, slot, false);
            q_slot
        } else {
            Vec::new()
        };
        let mut out = vec![0.0f32; self.dims.d];
        let mut scores = vec![0.0f32; keys.len()];
        let mut probs = vec![0.0f32; keys.len()];
        for h in 0..self.dims.n_heads {
            let kh = h / group;
            let qr = &q_text[h * dh..(h + 1) * dh];
            for (s, key) in scores.iter_mut().zip(keys) {
                let qh = if key.relative { &q_slot[h * dh..(h + 1) * dh] } else { qr };
                *s = dot(qh, &key.k[kh * dh..(kh + 1) * dh]) * scale;
            }
            softmax_into(&scores, &mut probs);
            let o = &mut out[h * dh..(h + 1) * dh];
            for (&p, key) in probs.iter().zip(keys) {
                axpy(p, &key.v[kh * dh..(kh + 1) * dh], o);
            }
        }
        out
    }

    /// Output projection, residual and MLP.
    fn finish(&self, layer: usize, x: &mut [f32], attn: &[f32]) {
        let d = self.dims.d;
        let o = matvec(attn, self.w(layer, WO), d);
        axpy(1.0, &o, x);
        let h = rms_norm(x, self.w(layer, LN2));
        let mut f = matvec(&h, self.w(layer, W1), self.dims.d_ff);
        f.iter_mut().for_each(|v| *v = gelu(*v));
        let f = matvec(&f, self.w(layer, W2), d);
        axpy(1.0, &f, x);
    }

    fn logits(&self, x: &[f32]) -> Vec<f32> {
        let p = self.params;
        let h = rms_norm(x, &p.tensors[p.ln_f_index()].data);
        matvec(&h, &p.tensors[p.w_out_index()].data, self.dims.vocab)
    }
}

/// Target model with a growing cache. Its own attention policy selects
/// which cached positions each query sees.
pub struct TargetSession<'a> {
    net: Net<'a>,
    kv: Vec<KvStore>,
    len: usize,
}

impl<'a> TargetSession<'a> {
    pub fn new(params: &'a ModelParams<f32>, rope: &'a RopeTable<f32>) -> Result<Self> {
        let net = Net::new(params, rope);
        let kv = (0..net.dims.n_layer).map(|_| KvStore::new(net.dims.kv())).collect();
        Ok(TargetSession { net, kv, len: 0 })
    }

    /// Number of processed positions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn params(&self) -> &'a ModelParams<f32> {
        self.net.params
    }

    /// Processes `token` at the next position.
    pub fn step(&mut self, token: usize) -> Result<StepOut> {
        let net = &self.net;
        let t = self.len;
        net.check_pos(t)?;
        if token >= net.dims.vocab {
            return Err(invalid(format!("token id {token} outside vocabulary")));
        }
        let policy = net.params.spec.attention;
        let mut x = net.embed(token);
        let mut hidden = vec![x.clone()];
        for l in 0..net.dims.n_layer {
            let (q, k, v) = net.qkv(l, &x, t);
            let store = &mut self.kv[l];
            store.push(t, &k, &v);
            let keys: Vec<KeyRef> = (0..store.len())
                .filter(|&i| attends(&policy, t, store.pos[i]))
                .map(|i| KeyRef {
                    k: store.key(i),
                    v: store.value(i),
                    relative: false,
                })
                .collect();
            let a = net.attend(&q, t, t, &keys);
            net.finish(l, &mut x, &a);
            hidden.push(x.clone());
        }
        self.len += 1;
        Ok(StepOut {
            logits: net.logits(&x),
            hidden,
        })
    }

    /// Forgets positions `>= len`.
    pub fn truncate(&mut self, len: usize) {
        self.len = self.len.min(len);
        for store in &mut self.kv {
            store.truncate_positions(len);
        }
    }
}

/// A draft model driven round by round alongside a [`TargetSession`].
pub trait Drafter {
    /// Target activations for committed positions `first..first+outs.len()`.
    fn observe(&mut self, first: usize, outs: &[StepOut]) -> Result<()>;
    /// Starts a round. `tokens` are all committed tokens; the last one, at
    /// position `tokens.len() - 1`, has not been processed by the target.
    fn begin_round(&mut self, target: &TargetSession, tokens: &[usize]) -> Result<()>;
    /// One draft forward for `token` at `pos`; returns next-token logits.
    fn propose(&mut self, target: &TargetSession, token: usize, pos: usize) -> Result<Vec<f32>>;
    /// Ends a round; positions `< committed` hold verified tokens.
    fn end_round(&mut self, committed: usize);
    /// Largest number of positions held in the draft's own decode state.
    fn state_positions(&self) -> usize;
    /// Draft forwards performed so far.
    fn forwards(&self) -> usize;
}

/// Independent small draft with its own dense cache.
pub struct VanillaDrafter<'a> {
    session: TargetSession<'a>,
    forwards: usize,
}

impl<'a> VanillaDrafter<'a> {
    pub fn new(params: &'a ModelParams<f32>, rope: &'a RopeTable<f32>) -> Result<Self> {
        Ok(VanillaDrafter {
            session: TargetSession::new(params, rope)?,
            forwards: 0,
        })
    }
}

impl Drafter for VanillaDrafter<'_> {
    fn observe(&mut self, _first: usize, _outs: &[StepOut]) -> Result<()> {
        Ok(())
    }

    fn begin_round(&mut self, _target: &TargetSession, tokens: &[usize]) -> Result<()> {
        let last = tokens.len() - 1;
        for &tok in &tokens[self.session.len()..last] {
            self.session.step(tok)?;
        }
        Ok(())
    }

    fn propose(&mut self, _target: &TargetSession, token: usize, pos: usize) -> Result<Vec<f32>> {
        if pos != self.session.len() {
            return Err(invalid(format!("draft cache holds {} positions, asked for {pos}", self.session.len())));
        }
        self.forwards += 1;
        Ok(self.session.step(token)?.logits)
    }

    fn end_round(&mut self, committed: usize) {
        self.session.truncate(committed);
    }

    fn state_positions(&self) -> usize {
        self.session.len()
    }

    fn forwards(&self) -> usize {
        self.forwards
    }
}

/// Self-speculation: the target's own weights and cache behind a streaming
/// mask, with keys scored at cache-relative or text positions.
pub struct SelfSpecDrafter {
    window: u64,
    sink: u64,
    positions: PositionScheme,
    scratch: Vec<KvStore>,
    forwards: usize,
    max_state: usize,
}

impl SelfSpecDrafter {
    pub fn new(target: &ModelParams<f32>, window: u64, sink: u64, positions: PositionScheme) -> Result<Self> {
        AttentionPolicy::streaming(window, sink).validate()?;
        let dims = target.dims();
        Ok(SelfSpecDrafter {
            window,
            sink,
            positions,
            scratch: (0..dims.n_layer).map(|_| KvStore::new(dims.kv())).collect(),
            forwards: 0,
            max_state: 0,
        })
    }
}

impl Drafter for SelfSpecDrafter {
    fn observe(&mut self, _first: usize, _outs: &[StepOut]) -> Result<()> {
        Ok(())
    }

    fn begin_round(&mut self, target: &TargetSession, tokens: &[usize]) -> Result<()> {
        if target.len() + 1 != tokens.len() {
            return Err(invalid("target cache is not aligned with the committed tokens"));
        }
        self.scratch.iter_mut().for_each(KvStore::clear);
        Ok(())
    }

    fn propose(&mut self, target: &TargetSession, token: usize, pos: usize) -> Result<Vec<f32>> {
        let net = &target.net;
        net.check_pos(pos)?;
        let policy = AttentionPolicy::streaming(self.window, self.sink);
        let slot = (pos as u64).min(self.sink + self.window - 1) as usize;
        let cache_relative = self.positions == PositionScheme::CacheRelative;
        let mut x = net.embed(token);
        let mut attended = 0;
        for l in 0..net.dims.n_layer {
            let (q, k, v) = net.qkv(l, &x, pos);
            let mut keys = Vec::new();
            for store in [&target.kv[l], &self.scratch[l]] {
                for i in 0..store.len() {
                    let s = store.pos[i];
                    if attends(&policy, pos, s) {
                        keys.push(KeyRef {
                            k: store.key(i),
                            v: store.value(i),
                            relative: cache_relative && (s as u64) < self.sink,
                        });
                    }
                }
            }
            keys.push(KeyRef {
                k: &k,
                v: &v,
                relative: false,
            });
            attended = attended.max(keys.len());
            let a = net.attend(&q, pos, slot, &keys);
            self.scratch[l].push(pos, &k, &v);
            net.finish(l, &mut x, &a);
        }
        self.max_state = self.max_state.max(attended);
        self.forwards += 1;
        Ok(net.logits(&x))
    }

    fn end_round(&mut self, _committed: usize) {
        self.scratch.iter_mut().for_each(KvStore::clear);
    }

    /// Positions attended by the widest query so far.
    fn state_positions(&self) -> usize {
        self.max_state
    }

    fn forwards(&self) -> usize {
        self.forwards
    }
}

/// Decode state of a feedback-memory draft: per draft layer, keys and
/// values of memory vectors for the positions a query can still attend to.
#[derive(Debug, Clone, PartialEq)]
pub struct SpireState {
    pub(crate) layers: Vec<KvStore>,
    window: u64,
    sink: u64,
    /// Position of the next query.
    pub next_pos: usize,
}

impl SpireState {
    pub fn new(draft: &ModelParams<f32>) -> Result<Self> {
        let AttentionPolicy::Streaming { window, sink } = draft.spec.attention else {
            return Err(invalid("feedback draft decoding needs a streaming attention policy"));
        };
        let dims = draft.dims();
        Ok(SpireState {
            layers: (0..dims.n_layer).map(|_| KvStore::new(dims.kv())).collect(),
            window,
            sink,
            next_pos: 0,
        })
    }

    /// Cached positions, the maximum over layers.
    pub fn cached_positions(&self) -> usize {
        self.layers.iter().map(KvStore::len).max().unwrap_or(0)
    }

    /// Appends memory entries for `pos` and evicts what the query at
    /// `pos + 1` can no longer see.
    fn push(&mut self, pos: usize, kv: Vec<(Vec<f32>, Vec<f32>)>) {
        let (window, sink) = (self.window, self.sink);
        for (store, (k, v)) in self.layers.iter_mut().zip(kv) {
            store.truncate_positions(pos);
            store.push(pos, &k, &v);
            store.retain(|s| (s as u64) < sink || s as u64 + window > (pos + 1) as u64);
        }
        self.next_pos = pos + 1;
    }
}

fn spire_net_check(draft: &ModelParams<f32>, state: &SpireState) -> Result<usize> {
    let Variant::Spire { offset } = draft.variant else {
        return Err(invalid("parameters are not a feedback draft"));
    };
    let dims = draft.dims();
    if state.layers.len() != dims.n_layer || state.layers.iter().any(|s| s.width != dims.kv()) {
        return Err(invalid("decode state does not match the draft architecture"));
    }
    if draft.spec.attention != AttentionPolicy::streaming(state.window, state.sink) {
        return Err(invalid("decode state window does not match the draft"));
    }
    Ok(offset)
}

/// Adds target-derived memories for committed positions `first..` to
/// `state`. Draft layer `i` uses target activation `y^(i + offset - 1)`.
pub fn spire_observe(
    state: &mut SpireState,
    draft: &ModelParams<f32>,
    rope: &RopeTable<f32>,
    first: usize,
    outs: &[StepOut],
) -> Result<()> {
    let offset = spire_net_check(draft, state)?;
    let net = Net::new(draft, rope);
    for (j, out) in outs.iter().enumerate() {
        let pos = first + j;
        let kv = (0..net.dims.n_layer)
            .map(|l| {
                let y = out
                    .hidden
                    .get(l + offset)
                    .ok_or_else(|| invalid("target activations do not cover the substitution offset"))?;
                Ok(net.kv_of_memory(l, y, pos))
            })
            .collect::<Result<Vec<_>>>()?;
        state.push(pos, kv);
    }
    Ok(())
}

/// One feedback-draft forward for `last_token` at `state.next_pos`. The
/// new position's memory keys and values are appended to `state`.
pub fn spire_decode_step(
    state: &mut SpireState,
    last_token: usize,
    draft: &ModelParams<f32>,
    rope: &RopeTable<f32>,
) -> Result<Vec<f32>> {
    spire_net_check(draft, state)?;
    let net = Net::new(draft, rope);
    let pos = state.next_pos;
    net.check_pos(pos)?;
    if last_token >= net.dims.vocab {
        return Err(invalid(format!("token id {last_token} outside vocabulary")));
    }
    let policy = draft.spec.attention;
    let mut x = net.embed(last_token);
    let mut xs = vec![x.clone()];
    for l in 0..net.dims.n_layer {
        let (q, k, v) = net.qkv(l, &x, pos);
        let store = &state.layers[l];
        let mut keys: Vec<KeyRef> = (0..store.len())
            .filter(|&i| attends(&policy, pos, store.pos[i]) && store.pos[i] < pos)
            .map(|i| KeyRef {
                k: store.key(i),
                v: store.value(i),
                relative: false,
            })
            .collect();
        keys.push(KeyRef {
            k: &k,
            v: &v,
            relative: false,
        });
        let a = net.attend(&q, pos, pos, &keys);
        net.finish(l, &mut x, &a);
        xs.push(x.clone());
    }
    let logits = net.logits(&x);
    let mix = draft.mix_weights().expect("feedback drafts carry mixing weights");
    let kv = (0..net.dims.n_layer)
        .map(|l| {
            let a = mix.weights(l + 1);
            let mut m = vec![0.0f32; net.dims.d];
            for (xl, &al) in xs.iter().zip(&a) {
                axpy(al, xl, &mut m);
            }
            net.kv_of_memory(l, &m, pos)
        })
        .collect();
    state.push(pos, kv);
    Ok(logits)
}

/// Feedback-memory draft. Between rounds it keeps the committed state
/// built from target activations; each round decodes from a copy so that
/// rejected proposals leave no trace.
pub struct SpireDrafter<'a> {
    params: &'a ModelParams<f32>,
    rope: &'a RopeTable<f32>,
    committed: SpireState,
    working: SpireState,
    forwards: usize,
    max_state: usize,
}

impl<'a> SpireDrafter<'a> {
    pub fn new(params: &'a ModelParams<f32>, rope: &'a RopeTable<f32>) -> Result<Self> {
        let committed = SpireState::new(params)?;
        spire_net_check(params, &committed)?;
        Ok(SpireDrafter {
            params,
            rope,
            working: committed.clone(),
            committed,
            forwards: 0,
            max_state: 0,
        })
    }

    /// Largest number of positions held by the committed state so far.
    pub fn committed_positions(&self) -> usize {
        self.committed.cached_positions()
    }
}

impl Drafter for SpireDrafter<'_> {
    fn observe(&mut self, first: usize, outs: &[StepOut]) -> Result<()> {
        spire_observe(&mut self.committed, self.params, self.rope, first, outs)?;
        self.max_state = self.max_state.max(self.committed.cached_positions());
        Ok(())
    }

    fn begin_round(&mut self, _target: &TargetSession, tokens: &[usize]) -> Result<()> {
        self.working = self.committed.clone();
        self.working.next_pos = tokens.len() - 1;
        Ok(())
    }

    fn propose(&mut self, _target: &TargetSession, token: usize, pos: usize) -> Result<Vec<f32>> {
        if pos != self.working.next_pos {
            return Err(invalid(format!("decode state expects position {}, got {pos}", self.working.next_pos)));
        }
        let logits = spire_decode_step(&mut self.working, token, self.params, self.rope)?;
        self.max_state = self.max_state.max(self.working.cached_positions());
        self.forwards += 1;
        Ok(logits)
    }

    fn end_round(&mut self, committed: usize) {
        self.committed.next_pos = committed;
    }

    fn state_positions(&self) -> usize {
        self.max_state
    }

    fn forwards(&self) -> usize {
        self.forwards
    }
}
