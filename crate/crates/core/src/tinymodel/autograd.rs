//! Define-by-run reverse-mode differentiation over row-major 2-D tensors.
//!
//! A [`Graph`] records every operation as a node. [`Graph::backward`] walks
//! the nodes in reverse and accumulates adjoints into the nodes that
//! require gradients. The graph is rebuilt for every forward pass.

use std::fmt::Debug;
use std::rc::Rc;

use num_traits::{Float, FromPrimitive};

/// Floating-point element type of a graph.
pub trait Scalar: Float + FromPrimitive + Default + Debug + Send + Sync + 'static {
    /// `c = alpha * a @ b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-aliasing matrices of
    /// the stated sizes.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).unwrap_or_else(Self::nan)
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// `out (+)= op(a) @ op(b)` where `op` optionally transposes.
/// `a` is stored `[ar, ac]`, `b` is stored `[br, bc]`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_into<F: Scalar>(
    a: &[F],
    ar: usize,
    ac: usize,
    trans_a: bool,
    b: &[F],
    br: usize,
    bc: usize,
    trans_b: bool,
    out: &mut [F],
    accumulate: bool,
) {
    let (m, k, rsa, csa) = if trans_a {
        (ac, ar, 1, ac as isize)
    } else {
        (ar, ac, ac as isize, 1)
    };
    let (k2, n, rsb, csb) = if trans_b {
        (bc, br, 1, bc as isize)
    } else {
        (br, bc, bc as isize, 1)
    };
    assert_eq!(k, k2, "inner dimensions differ");
    assert_eq!(a.len(), ar * ac);
    assert_eq!(b.len(), br * bc);
    assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { F::one() } else { F::zero() };
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|x| *x = F::zero());
        }
        return;
    }
    // SAFETY: slice lengths were checked against the dimensions above and
    // `out` cannot alias the shared inputs.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Strided view of a matrix inside a slice.
#[derive(Debug, Clone, Copy)]
pub struct View {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    fn end(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            self.offset
        } else {
            self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }

    /// The same storage read as the transposed matrix.
    pub fn t(self) -> View {
        View {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }
}

/// `c = alpha * a @ b + beta * c` on strided views, bounds-checked.
#[allow(clippy::too_many_arguments)]
pub fn gemm_view<F: Scalar>(alpha: F, a: &[F], av: View, b: &[F], bv: View, beta: F, c: &mut [F], cv: View) {
    assert_eq!(av.cols, bv.rows, "inner dimensions differ");
    assert_eq!((av.rows, bv.cols), (cv.rows, cv.cols), "output shape mismatch");
    assert!(av.end() <= a.len() && bv.end() <= b.len() && cv.end() <= c.len(), "view out of bounds");
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    // SAFETY: every view was checked to lie inside its slice; `c` is a
    // unique borrow so it cannot alias `a` or `b`.
    unsafe {
        F::gemm_raw(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Dense row-major tensor. Every tensor in this crate is 2-D.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: [usize; 2],
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            shape: [rows, cols],
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length does not match shape");
        Tensor {
            shape: [rows, cols],
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-query key row lists in compressed form.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyLists {
    offsets: Vec<usize>,
    keys: Vec<u32>,
}

impl KeyLists {
    pub fn new() -> Self {
        KeyLists {
            offsets: vec![0],
            keys: Vec::new(),
        }
    }

    pub fn push_query<I: IntoIterator<Item = usize>>(&mut self, keys: I) {
        self.keys.extend(keys.into_iter().map(|k| k as u32));
        self.offsets.push(self.keys.len());
    }

    pub fn n_queries(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn keys(&self, query: usize) -> &[u32] {
        &self.keys[self.offsets[query]..self.offsets[query + 1]]
    }

    pub fn total(&self) -> usize {
        self.keys.len()
    }
}

/// Rotary embedding tables for positions `0..max_len`.
#[derive(Debug, Clone)]
pub struct RopeTable<F> {
    half: usize,
    cos: Vec<F>,
    sin: Vec<F>,
}

pub const ROPE_BASE: f64 = 10_000.0;

impl<F: Scalar> RopeTable<F> {
    pub fn new(d_head: usize, max_len: usize) -> Self {
        assert!(d_head % 2 == 0, "rotary embedding needs an even head width");
        let half = d_head / 2;
        let mut cos = Vec::with_capacity(max_len * half);
        let mut sin = Vec::with_capacity(max_len * half);
        for pos in 0..max_len {
            for i in 0..half {
                let freq = ROPE_BASE.powf(-(2.0 * i as f64) / d_head as f64);
                let angle = pos as f64 * freq;
                cos.push(F::from_f64_lossy(angle.cos()));
                sin.push(F::from_f64_lossy(angle.sin()));
            }
        }
        RopeTable { half, cos, sin }
    }

    pub fn max_len(&self) -> usize {
        if self.half == 0 {
            0
        } else {
            self.cos.len() / self.half
        }
    }

    /// Rotates every `2 * half`-wide head chunk of `row` to `pos`.
    /// `inverse` applies the transpose rotation.
    pub fn rotate(&self, row: &mut [F], pos: usize, inverse: bool) {
        let half = self.half;
        let cos = &self.cos[pos * half..(pos + 1) * half];
        let sin = &self.sin[pos * half..(pos + 1) * half];
        for head in row.chunks_exact_mut(2 * half) {
            let (lo, hi) = head.split_at_mut(half);
            for i in 0..half {
                let (a, b) = (lo[i], hi[i]);
                let s = if inverse { -sin[i] } else { sin[i] };
                lo[i] = a * cos[i] - b * s;
                hi[i] = a * s + b * cos[i];
            }
        }
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<F>,
    },
    Gelu {
        x: Var,
        tanh: Vec<F>,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    Rope {
        x: Var,
        positions: Vec<usize>,
        table: Rc<RopeTable<F>>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        lists: Rc<KeyLists>,
        heads: HeadLayout,
        probs: Vec<F>,
    },
    MaskedAttention {
        q: Var,
        k: Var,
        v: Var,
        shape: MaskedShape,
        probs: Vec<F>,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Mix {
        w: Var,
        row: usize,
        xs: Vec<Var>,
        weights: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
    MixedLoss {
        logits: Var,
        target: Rc<Tensor<F>>,
        omega: F,
        probs: Vec<F>,
    },
}

/// Head geometry of an attention op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
}

impl HeadLayout {
    fn kv_head(&self, h: usize) -> usize {
        h / (self.n_heads / self.n_kv_heads)
    }
}

/// Geometry of [`Graph::masked_attention`]: `n_seq` sequences of `len`
/// rows each, every query attending to earlier rows of its own sequence
/// allowed by `window` and `sink` (`window = None` means dense).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskedShape {
    pub n_seq: usize,
    pub len: usize,
    pub window: Option<usize>,
    pub sink: usize,
    pub heads: HeadLayout,
}

impl MaskedShape {
    /// Allowed keys of query `t` are `0..a` and `b..=t`, with `a <= b`.
    fn ranges(&self, t: usize) -> (usize, usize) {
        match self.window {
            None => (0, 0),
            Some(w) => {
                let b = (t + 1).saturating_sub(w);
                (self.sink.min(b), b)
            }
        }
    }

    #[cfg(test)]
    fn allowed(&self, t: usize, s: usize) -> bool {
        s <= t && self.window.is_none_or(|w| s + w > t || s < self.sink)
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Tape of operations.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2 / pi)
const GELU_A: f64 = 0.044715;

/// `tanh` through a single exponential; saturates cleanly for large `|u|`.
pub fn fast_tanh<F: Scalar>(u: F) -> F {
    let two = F::from_f64_lossy(2.0);
    let e = (-two * u.abs()).exp();
    let t = (F::one() - e) / (F::one() + e);
    if u < F::zero() {
        -t
    } else {
        t
    }
}

/// Tanh-approximated GELU and the inner `tanh` value.
pub fn gelu_with_tanh<F: Scalar>(x: F) -> (F, F) {
    let c = F::from_f64_lossy(GELU_C);
    let a = F::from_f64_lossy(GELU_A);
    let half = F::from_f64_lossy(0.5);
    let t = fast_tanh(c * (x + a * x * x * x));
    (half * x * (F::one() + t), t)
}

fn gelu_grad<F: Scalar>(x: F, t: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let a = F::from_f64_lossy(GELU_A);
    let half = F::from_f64_lossy(0.5);
    let three = F::from_f64_lossy(3.0);
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}

pub const RMS_EPS: f64 = 1e-6;

/// Softmax of `row` into `out`.
pub fn softmax_into<F: Scalar>(row: &[F], out: &mut [F]) {
    let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k, m) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(k, bv.rows(), "matmul shape mismatch");
        let mut out = Tensor::zeros(n, m);
        matmul_into(&av.data, n, k, false, &bv.data, k, m, false, &mut out.data, false);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape, bv.shape, "add shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| *x + *y).collect();
        let out = Tensor::from_vec(av.rows(), av.cols(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Row-wise `x / rms(x) * gain`; `gain` is `[1, cols]`.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Var {
        let (xv, gv) = (self.value(x), self.value(gain));
        let (n, d) = (xv.rows(), xv.cols());
        assert_eq!(gv.data.len(), d, "norm gain width mismatch");
        let eps = F::from_f64_lossy(RMS_EPS);
        let dn = F::from_usize(d).unwrap();
        let mut out = Tensor::zeros(n, d);
        let mut inv_rms = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let ms = row.iter().fold(F::zero(), |s, &v| s + v * v) / dn;
            let inv = F::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for (o, (&v, &g)) in out.data[r * d..(r + 1) * d].iter_mut().zip(row.iter().zip(&gv.data)) {
                *o = v * inv * g;
            }
        }
        let rg = self.rg(x) || self.rg(gain);
        self.push(out, Op::RmsNorm { x, gain, inv_rms }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (vals, tanh): (Vec<F>, Vec<F>) = xv.data.iter().map(|&v| gelu_with_tanh(v)).unzip();
        let out = Tensor::from_vec(xv.rows(), xv.cols(), vals);
        let rg = self.rg(x);
        self.push(out, Op::Gelu { x, tanh }, rg)
    }

    /// Rows of `table` selected by `ids`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let d = tv.cols();
        let mut out = Tensor::zeros(ids.len(), d);
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < tv.rows(), "token id {id} outside embedding table");
            out.data[r * d..(r + 1) * d].copy_from_slice(tv.row(id));
        }
        let rg = self.rg(table);
        self.push(
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Rotary embedding of each row at its position.
    pub fn rope(&mut self, x: Var, positions: &[usize], table: &Rc<RopeTable<F>>) -> Var {
        let xv = self.value(x);
        assert_eq!(positions.len(), xv.rows(), "one position per row");
        let mut out = xv.clone();
        let c = out.cols();
        for (r, &pos) in positions.iter().enumerate() {
            table.rotate(&mut out.data[r * c..(r + 1) * c], pos, false);
        }
        let rg = self.rg(x);
        self.push(
            out,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                table: Rc::clone(table),
            },
            rg,
        )
    }

    /// Softmax attention of each query row over its listed key rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, lists: &Rc<KeyLists>, heads: HeadLayout) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let dh = heads.d_head;
        assert_eq!(qv.cols(), heads.n_heads * dh);
        assert_eq!(kv.cols(), heads.n_kv_heads * dh);
        assert_eq!(vv.cols(), heads.n_kv_heads * dh);
        assert_eq!(lists.n_queries(), qv.rows());
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let nq = qv.rows();
        let qc = qv.cols();
        let kc = kv.cols();
        let mut out = Tensor::zeros(nq, qc);
        let mut probs = vec![F::zero(); lists.total() * heads.n_heads];
        let mut scores = Vec::new();
        for r in 0..nq {
            let keys = lists.keys(r);
            let base = lists.offsets[r] * heads.n_heads;
            for h in 0..heads.n_heads {
                let kh = heads.kv_head(h);
                let qrow = &qv.data[r * qc + h * dh..r * qc + (h + 1) * dh];
                scores.clear();
                for &key in keys {
                    let krow = &kv.data[key as usize * kc + kh * dh..key as usize * kc + (kh + 1) * dh];
                    scores.push(dot(qrow, krow) * scale);
                }
                let p = &mut probs[base + h * keys.len()..base + (h + 1) * keys.len()];
                softmax_into(&scores, p);
                let orow = &mut out.data[r * qc + h * dh..r * qc + (h + 1) * dh];
                for (j, &key) in keys.iter().enumerate() {
                    let vrow = &vv.data[key as usize * kc + kh * dh..key as usize * kc + (kh + 1) * dh];
                    axpy(p[j], vrow, orow);
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                lists: Rc::clone(lists),
                heads,
                probs,
            },
            rg,
        )
    }

    /// Attention over contiguous sequences computed with dense matrix
    /// products and a causal (optionally streaming) mask.
    pub fn masked_attention(&mut self, q: Var, k: Var, v: Var, shape: MaskedShape) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let heads = shape.heads;
        let (dh, len) = (heads.d_head, shape.len);
        let qc = heads.n_heads * dh;
        let kc = heads.n_kv_heads * dh;
        assert_eq!(qv.shape, [shape.n_seq * len, qc]);
        assert_eq!(kv.shape, [shape.n_seq * len, kc]);
        assert_eq!(vv.shape, kv.shape);
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let mut out = Tensor::zeros(shape.n_seq * len, qc);
        let mut probs = vec![F::zero(); shape.n_seq * heads.n_heads * len * len];
        for b in 0..shape.n_seq {
            for h in 0..heads.n_heads {
                let kh = heads.kv_head(h);
                let p_off = (b * heads.n_heads + h) * len * len;
                let pv = View { offset: p_off, rows: len, cols: len, rs: len, cs: 1 };
                let qview = View { offset: b * len * qc + h * dh, rows: len, cols: dh, rs: qc, cs: 1 };
                let kview = View { offset: b * len * kc + kh * dh, rows: len, cols: dh, rs: kc, cs: 1 };
                gemm_view(scale, &qv.data, qview, &kv.data, kview.t(), F::zero(), &mut probs, pv);
                for t in 0..len {
                    let row = &mut probs[p_off + t * len..p_off + (t + 1) * len];
                    let (sink_end, win_start) = shape.ranges(t);
                    let allowed = (0..sink_end).chain(win_start..=t);
                    let max = allowed.clone().fold(F::neg_infinity(), |m, s| m.max(row[s]));
                    let mut sum = F::zero();
                    for s in allowed.clone() {
                        row[s] = (row[s] - max).exp();
                        sum = sum + row[s];
                    }
                    let inv = F::one() / sum;
                    row[sink_end..win_start].iter_mut().for_each(|x| *x = F::zero());
                    row[t + 1..].iter_mut().for_each(|x| *x = F::zero());
                    for s in allowed {
                        row[s] = row[s] * inv;
                    }
                }
                let oview = View { offset: b * len * qc + h * dh, rows: len, cols: dh, rs: qc, cs: 1 };
                gemm_view(F::one(), &probs, pv, &vv.data, kview, F::zero(), &mut out.data, oview);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(out, Op::MaskedAttention { q, k, v, shape, probs }, rg)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let c = self.value(xs[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let xv = self.value(x);
            assert_eq!(xv.cols(), c, "concat width mismatch");
            data.extend_from_slice(&xv.data);
            rows += xv.rows();
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        self.push(Tensor::from_vec(rows, c, data), Op::ConcatRows(xs.to_vec()), rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(idx.len(), c, data),
            Op::GatherRows { x, idx: idx.to_vec() },
            rg,
        )
    }

    /// `Σ_l softmax(w[row])_l * xs[l]`.
    pub fn mix(&mut self, w: Var, row: usize, xs: &[Var]) -> Var {
        let wv = self.value(w);
        assert_eq!(wv.cols(), xs.len(), "one mixing weight per input");
        let mut weights = vec![F::zero(); xs.len()];
        softmax_into(wv.row(row), &mut weights);
        let shape = self.value(xs[0]).shape;
        let mut out = Tensor::zeros(shape[0], shape[1]);
        for (&x, &a) in xs.iter().zip(&weights) {
            let xv = self.value(x);
            assert_eq!(xv.shape, shape, "mixed tensors must share a shape");
            axpy(a, &xv.data, &mut out.data);
        }
        let rg = self.rg(w) || xs.iter().any(|&x| self.rg(x));
        self.push(
            out,
            Op::Mix {
                w,
                row,
                xs: xs.to_vec(),
                weights,
            },
            rg,
        )
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        let (n, v) = (lv.rows(), lv.cols());
        assert_eq!(labels.len(), n, "one label per row");
        let mut probs = vec![F::zero(); n * v];
        let mut loss = F::zero();
        for r in 0..n {
            let p = &mut probs[r * v..(r + 1) * v];
            softmax_into(lv.row(r), p);
            loss = loss - p[labels[r]].max(F::min_positive_value()).ln();
        }
        loss = loss / F::from_usize(n).unwrap();
        let rg = self.rg(logits);
        self.push(
            Tensor::from_vec(1, 1, vec![loss]),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// `omega * mean(-Σ p log q) - (1 - omega) * mean(Σ min(p, q))` with
    /// `q = softmax(logits)` and `p` the rows of `target`.
    pub fn mixed_loss(&mut self, logits: Var, target: &Rc<Tensor<F>>, omega: F) -> Var {
        let lv = self.value(logits);
        let (n, v) = (lv.rows(), lv.cols());
        assert_eq!(target.shape, lv.shape, "target distribution shape mismatch");
        let mut probs = vec![F::zero(); n * v];
        let mut ce = F::zero();
        let mut alpha = F::zero();
        for r in 0..n {
            let row = lv.row(r);
            let q = &mut probs[r * v..(r + 1) * v];
            softmax_into(row, q);
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().fold(F::zero(), |s, &x| s + (x - max).exp()).ln();
            for ((&p, &qi), &z) in target.row(r).iter().zip(q.iter()).zip(row) {
                if p > F::zero() {
                    ce = ce - p * (z - lse);
                }
                alpha = alpha + p.min(qi);
            }
        }
        let nf = F::from_usize(n).unwrap();
        let loss = omega * ce / nf - (F::one() - omega) * alpha / nf;
        let rg = self.rg(logits);
        self.push(
            Tensor::from_vec(1, 1, vec![loss]),
            Op::MixedLoss {
                logits,
                target: Rc::clone(target),
                omega,
                probs,
            },
            rg,
        )
    }

    /// Gradient of `v` after [`Graph::backward`], if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn grad_mut(&mut self, v: Var) -> &mut Vec<F> {
        let [r, c] = self.nodes[v.0].value.shape;
        let len = r * c;
        self.grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).data.len(), 1, "backward starts from a scalar");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            // Temporarily move the op out so parents can be borrowed mutably.
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(i, &op, &g);
            self.nodes[i].op = op;
            self.grads[i] = Some(g);
        }
    }

    fn backward_op(&mut self, i: usize, op: &Op<F>, g: &[F]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (self.value(*a).rows(), self.value(*a).cols());
                let m = self.value(*b).cols();
                if self.rg(*a) {
                    let bv = std::mem::take(&mut self.nodes[b.0].value.data);
                    let ga = self.grad_mut(*a);
                    matmul_into(g, n, m, false, &bv, k, m, true, ga, true);
                    self.nodes[b.0].value.data = bv;
                }
                if self.rg(*b) {
                    let av = std::mem::take(&mut self.nodes[a.0].value.data);
                    let gb = self.grad_mut(*b);
                    matmul_into(&av, n, k, true, g, n, m, false, gb, true);
                    self.nodes[a.0].value.data = av;
                }
            }
            Op::Add(a, b) => {
                for x in [*a, *b] {
                    if self.rg(x) {
                        let gx = self.grad_mut(x);
                        gx.iter_mut().zip(g).for_each(|(s, &d)| *s = *s + d);
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.nodes[x.0].value.data.clone();
                let gv = self.nodes[gain.0].value.data.clone();
                let d = gv.len();
                let dn = F::from_usize(d).unwrap();
                if self.rg(*gain) {
                    let gg = self.grad_mut(*gain);
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for c in 0..d {
                            gg[c] = gg[c] + g[r * d + c] * xv[r * d + c] * inv;
                        }
                    }
                }
                if self.rg(*x) {
                    let gx = self.grad_mut(*x);
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = &xv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        // dy_c = g_c * gain_c; dx = inv * (dy - x * inv^2 * <dy, x> / d)
                        let mut s = F::zero();
                        for c in 0..d {
                            s = s + gr[c] * gv[c] * xr[c];
                        }
                        let coef = inv * inv * inv * s / dn;
                        for c in 0..d {
                            gx[r * d + c] = gx[r * d + c] + inv * gr[c] * gv[c] - coef * xr[c];
                        }
                    }
                }
            }
            Op::Gelu { x, tanh } => {
                let xv = std::mem::take(&mut self.nodes[x.0].value.data);
                let gx = self.grad_mut(*x);
                for (((s, &d), &v), &t) in gx.iter_mut().zip(g).zip(&xv).zip(tanh) {
                    *s = *s + d * gelu_grad(v, t);
                }
                self.nodes[x.0].value.data = xv;
            }
            Op::Embed { table, ids } => {
                let d = self.value(*table).cols();
                let gt = self.grad_mut(*table);
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        gt[id * d + c] = gt[id * d + c] + g[r * d + c];
                    }
                }
            }
            Op::Rope { x, positions, table } => {
                let c = self.value(*x).cols();
                let mut gr = g.to_vec();
                for (r, &pos) in positions.iter().enumerate() {
                    table.rotate(&mut gr[r * c..(r + 1) * c], pos, true);
                }
                let gx = self.grad_mut(*x);
                gx.iter_mut().zip(&gr).for_each(|(s, &d)| *s = *s + d);
            }
            Op::Attention {
                q,
                k,
                v,
                lists,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, lists, *heads, probs, g),
            Op::MaskedAttention { q, k, v, shape, probs } => {
                self.masked_attention_backward(*q, *k, *v, shape, probs, g)
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let len = self.value(x).data.len();
                    if self.rg(x) {
                        let gx = self.grad_mut(x);
                        gx.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(s, &d)| *s = *s + d);
                    }
                    offset += len;
                }
            }
            Op::GatherRows { x, idx } => {
                let c = self.value(*x).cols();
                let gx = self.grad_mut(*x);
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        gx[src * c + j] = gx[src * c + j] + g[r * c + j];
                    }
                }
            }
            Op::Mix { w, row, xs, weights } => {
                // d/dx_l = a_l * g ; d/dw_l = a_l * (<g, x_l> - Σ_m a_m <g, x_m>)
                let dots: Vec<F> = xs.iter().map(|&x| dot(g, &self.value(x).data)).collect();
                if self.rg(*w) {
                    let mean = weights.iter().zip(&dots).fold(F::zero(), |s, (&a, &d)| s + a * d);
                    let cols = self.value(*w).cols();
                    let gw = self.grad_mut(*w);
                    for l in 0..weights.len() {
                        gw[row * cols + l] = gw[row * cols + l] + weights[l] * (dots[l] - mean);
                    }
                }
                for (&x, &a) in xs.iter().zip(weights) {
                    if self.rg(x) {
                        let gx = self.grad_mut(x);
                        axpy(a, g, gx);
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let v = self.value(*logits).cols();
                let scale = g[0] / F::from_usize(labels.len()).unwrap();
                let gl = self.grad_mut(*logits);
                for (r, &label) in labels.iter().enumerate() {
                    for c in 0..v {
                        let mut d = probs[r * v + c];
                        if c == label {
                            d = d - F::one();
                        }
                        gl[r * v + c] = gl[r * v + c] + scale * d;
                    }
                }
            }
            Op::MixedLoss {
                logits,
                target,
                omega,
                probs,
            } => {
                let (n, v) = (target.rows(), target.cols());
                let scale = g[0] / F::from_usize(n).unwrap();
                let one_minus = F::one() - *omega;
                let gl = self.grad_mut(*logits);
                for r in 0..n {
                    let q = &probs[r * v..(r + 1) * v];
                    let p = target.row(r);
                    // alpha term: dα/dq_i = [q_i < p_i], pushed through softmax.
                    let mut inner = F::zero();
                    for c in 0..v {
                        if q[c] < p[c] {
                            inner = inner + q[c];
                        }
                    }
                    for c in 0..v {
                        let ind = if q[c] < p[c] { F::one() } else { F::zero() };
                        let d_alpha = q[c] * (ind - inner);
                        let d_ce = q[c] - p[c];
                        gl[r * v + c] = gl[r * v + c] + scale * (*omega * d_ce - one_minus * d_alpha);
                    }
                }
            }
        }
        let _ = i;
    }

    fn masked_attention_backward(&mut self, q: Var, k: Var, v: Var, shape: &MaskedShape, probs: &[F], g: &[F]) {
        let heads = shape.heads;
        let (dh, len) = (heads.d_head, shape.len);
        let qc = heads.n_heads * dh;
        let kc = heads.n_kv_heads * dh;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let qd = std::mem::take(&mut self.nodes[q.0].value.data);
        let kd = std::mem::take(&mut self.nodes[k.0].value.data);
        let vd = std::mem::take(&mut self.nodes[v.0].value.data);
        let mut gq = vec![F::zero(); qd.len()];
        let mut gk = vec![F::zero(); kd.len()];
        let mut gv = vec![F::zero(); vd.len()];
        let mut ds = vec![F::zero(); len * len];
        let sq = View { offset: 0, rows: len, cols: len, rs: len, cs: 1 };
        for b in 0..shape.n_seq {
            for h in 0..heads.n_heads {
                let kh = heads.kv_head(h);
                let p_off = (b * heads.n_heads + h) * len * len;
                let pv = View { offset: p_off, ..sq };
                let qview = View { offset: b * len * qc + h * dh, rows: len, cols: dh, rs: qc, cs: 1 };
                let kview = View { offset: b * len * kc + kh * dh, rows: len, cols: dh, rs: kc, cs: 1 };
                // dV += P^T dO ; dP = dO V^T
                gemm_view(F::one(), probs, pv.t(), g, qview, F::one(), &mut gv, kview);
                gemm_view(F::one(), g, qview, &vd, kview.t(), F::zero(), &mut ds, sq);
                for t in 0..len {
                    let p = &probs[p_off + t * len..p_off + (t + 1) * len];
                    let d = &mut ds[t * len..(t + 1) * len];
                    let mean = dot(p, d);
                    for (x, &pi) in d.iter_mut().zip(p) {
                        *x = pi * (*x - mean) * scale;
                    }
                }
                // dQ += dS K ; dK += dS^T Q
                gemm_view(F::one(), &ds, sq, &kd, kview, F::one(), &mut gq, qview);
                gemm_view(F::one(), &ds, sq.t(), &qd, qview, F::one(), &mut gk, kview);
            }
        }
        self.nodes[q.0].value.data = qd;
        self.nodes[k.0].value.data = kd;
        self.nodes[v.0].value.data = vd;
        for (x, gx) in [(q, gq), (k, gk), (v, gv)] {
            if self.rg(x) {
                let acc = self.grad_mut(x);
                acc.iter_mut().zip(&gx).for_each(|(s, &d)| *s = *s + d);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        lists: &KeyLists,
        heads: HeadLayout,
        probs: &[F],
        g: &[F],
    ) {
        let dh = heads.d_head;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let qd = self.value(q).data.clone();
        let kd = self.value(k).data.clone();
        let vd = self.value(v).data.clone();
        let qc = heads.n_heads * dh;
        let kc = heads.n_kv_heads * dh;
        let nq = lists.n_queries();
        let mut gq = vec![F::zero(); qd.len()];
        let mut gk = vec![F::zero(); kd.len()];
        let mut gv = vec![F::zero(); vd.len()];
        let mut dp = Vec::new();
        for r in 0..nq {
            let keys = lists.keys(r);
            let base = lists.offsets[r] * heads.n_heads;
            for h in 0..heads.n_heads {
                let kh = heads.kv_head(h);
                let p = &probs[base + h * keys.len()..base + (h + 1) * keys.len()];
                let go = &g[r * qc + h * dh..r * qc + (h + 1) * dh];
                let qrow = &qd[r * qc + h * dh..r * qc + (h + 1) * dh];
                dp.clear();
                let mut weighted = F::zero();
                for (j, &key) in keys.iter().enumerate() {
                    let off = key as usize * kc + kh * dh;
                    let d = dot(go, &vd[off..off + dh]);
                    weighted = weighted + p[j] * d;
                    dp.push(d);
                    axpy(p[j], go, &mut gv[off..off + dh]);
                }
                for (j, &key) in keys.iter().enumerate() {
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    let off = key as usize * kc + kh * dh;
                    axpy(ds, &kd[off..off + dh], &mut gq[r * qc + h * dh..r * qc + (h + 1) * dh]);
                    axpy(ds, qrow, &mut gk[off..off + dh]);
                }
            }
        }
        for (x, gx) in [(q, gq), (k, gk), (v, gv)] {
            if self.rg(x) {
                let acc = self.grad_mut(x);
                acc.iter_mut().zip(&gx).for_each(|(s, &d)| *s = *s + d);
            }
        }
    }
}

#[inline]
pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] = acc[l] + a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s = s + a[i] * b[i];
    }
    s
}

#[inline]
pub(crate) fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}
