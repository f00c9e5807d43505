//! Llama-style decoder: pre-norm blocks with RMSNorm, causal multi-head
//! attention with rotary embeddings, SwiGLU MLP, untied head.
//!
//! The compute path is generic over [`Scalar`] so the same code is trained
//! in `f32` and checked against finite differences in `f64`.

use rayon::prelude::*;

use crate::checkpoint::{LayerWeights, ModelConfig, TransformerCheckpoint};
use crate::error::{Error, Result};
use crate::numkernel::gemm::{gemm, linear, linear_backward, Op};
use crate::numkernel::{Scalar, Tensor};

pub const RMS_EPS: f64 = 1e-5;

/// Index of each tensor inside a layer's parameter array (canonical order).
pub const Q: usize = 0;
pub const K: usize = 1;
pub const V: usize = 2;
pub const O: usize = 3;
pub const GATE: usize = 4;
pub const UP: usize = 5;
pub const DOWN: usize = 6;
pub const NORM_IN: usize = 7;
pub const NORM_POST: usize = 8;

pub type LayerParams<T> = [Vec<T>; 9];

/// Flat parameter vectors of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct LmParams<T> {
    pub config: ModelConfig,
    pub embed: Vec<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Vec<T>,
    pub lm_head: Vec<T>,
}

fn cast<T: Scalar>(t: &Tensor) -> Vec<T> {
    t.data().iter().map(|&v| T::of(v as f64)).collect()
}

impl<T: Scalar> LmParams<T> {
    pub fn from_checkpoint(m: &TransformerCheckpoint) -> Self {
        let layers = m
            .layers
            .iter()
            .map(|l| {
                let n = l.named();
                std::array::from_fn(|i| cast(n[i].1))
            })
            .collect();
        LmParams {
            config: m.config.clone(),
            embed: cast(&m.embed),
            layers,
            final_norm: cast(&m.final_norm),
            lm_head: cast(&m.lm_head),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |v: &Vec<T>| vec![T::zero(); v.len()];
        LmParams {
            config: self.config.clone(),
            embed: z(&self.embed),
            layers: self
                .layers
                .iter()
                .map(|l| std::array::from_fn(|i| z(&l[i])))
                .collect(),
            final_norm: z(&self.final_norm),
            lm_head: z(&self.lm_head),
        }
    }

    /// Tensors in checkpoint order: embed, layers, final_norm, lm_head.
    pub fn tensors(&self) -> Vec<&Vec<T>> {
        let mut out = vec![&self.embed];
        for l in &self.layers {
            out.extend(l.iter());
        }
        out.push(&self.final_norm);
        out.push(&self.lm_head);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut out = vec![&mut self.embed];
        for l in &mut self.layers {
            out.extend(l.iter_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    /// Adds `alpha · other` elementwise.
    pub fn axpy(&mut self, alpha: T, other: &LmParams<T>) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
    }
}

impl LmParams<f32> {
    pub fn to_checkpoint(&self) -> Result<TransformerCheckpoint> {
        let cfg = &self.config;
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let t = |shape: &[usize], v: &Vec<f32>| Tensor::new(shape.to_vec(), v.clone());
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(LayerWeights {
                    q_proj: t(&[d, d], &l[Q])?,
                    k_proj: t(&[d, d], &l[K])?,
                    v_proj: t(&[d, d], &l[V])?,
                    o_proj: t(&[d, d], &l[O])?,
                    gate_proj: t(&[f, d], &l[GATE])?,
                    up_proj: t(&[f, d], &l[UP])?,
                    down_proj: t(&[d, f], &l[DOWN])?,
                    input_norm: t(&[d], &l[NORM_IN])?,
                    post_attn_norm: t(&[d], &l[NORM_POST])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let m = TransformerCheckpoint {
            config: cfg.clone(),
            embed: t(&[cfg.vocab_size, d], &self.embed)?,
            layers,
            final_norm: t(&[d], &self.final_norm)?,
            lm_head: t(&[cfg.vocab_size, d], &self.lm_head)?,
        };
        m.validate()?;
        Ok(m)
    }
}

/// Right-padded token rows. Positions at or beyond a row's length are
/// padding: causal attention keeps them from influencing real positions and
/// the loss ignores them.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub tokens: Vec<u32>,
    pub batch: usize,
    pub seq_len: usize,
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn new(rows: &[Vec<u32>]) -> Result<Self> {
        if rows.is_empty() || rows.iter().any(|r| r.is_empty()) {
            return Err(Error::arg("token batch needs at least one non-empty row"));
        }
        let seq_len = rows.iter().map(|r| r.len()).max().unwrap();
        let mut tokens = vec![0u32; rows.len() * seq_len];
        for (b, r) in rows.iter().enumerate() {
            tokens[b * seq_len..b * seq_len + r.len()].copy_from_slice(r);
        }
        Ok(TokenBatch {
            tokens,
            batch: rows.len(),
            seq_len,
            lengths: rows.iter().map(|r| r.len()).collect(),
        })
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.seq_len > cfg.max_seq_len {
            return Err(Error::validation(format!(
                "sequence length {} exceeds max_seq_len {}",
                self.seq_len, cfg.max_seq_len
            )));
        }
        if self.tokens.len() != self.batch * self.seq_len || self.lengths.len() != self.batch {
            return Err(Error::validation("token batch layout inconsistent"));
        }
        if let Some(t) = self.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::validation(format!(
                "token {t} outside vocabulary of size {}",
                cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// Number of next-token predictions scored by the loss.
    pub fn target_count(&self) -> usize {
        self.lengths.iter().map(|&l| l.saturating_sub(1)).sum()
    }
}

struct Rope<T> {
    cos: Vec<T>,
    sin: Vec<T>,
    half: usize,
}

impl<T: Scalar> Rope<T> {
    fn new(seq: usize, head_dim: usize, theta: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(seq * half);
        let mut sin = Vec::with_capacity(seq * half);
        for p in 0..seq {
            for i in 0..half {
                let freq = theta.powf(-((2 * i) as f64) / head_dim as f64);
                let a = p as f64 * freq;
                cos.push(T::of(a.cos()));
                sin.push(T::of(a.sin()));
            }
        }
        Rope { cos, sin, half }
    }

    /// Rotates interleaved pairs of one head vector at position `p`;
    /// `inverse` rotates by the negated angle.
    fn apply(&self, v: &mut [T], p: usize, inverse: bool) {
        for i in 0..self.half {
            let c = self.cos[p * self.half + i];
            let s = if inverse {
                -self.sin[p * self.half + i]
            } else {
                self.sin[p * self.half + i]
            };
            let (x0, x1) = (v[2 * i], v[2 * i + 1]);
            v[2 * i] = x0 * c - x1 * s;
            v[2 * i + 1] = x0 * s + x1 * c;
        }
    }
}

fn rmsnorm_fwd<T: Scalar>(x: &[T], d: usize, g: &[T]) -> (Vec<T>, Vec<T>) {
    let n = x.len() / d;
    let mut y = vec![T::zero(); x.len()];
    let mut inv = vec![T::zero(); n];
    for r in 0..n {
        let row = &x[r * d..(r + 1) * d];
        let ms = row.iter().map(|&v| v * v).sum::<T>() / T::of(d as f64);
        let iv = T::one() / (ms + T::of(RMS_EPS)).sqrt();
        inv[r] = iv;
        for ((o, &v), &gg) in y[r * d..(r + 1) * d].iter_mut().zip(row).zip(g) {
            *o = v * iv * gg;
        }
    }
    (y, inv)
}

fn rmsnorm_bwd<T: Scalar>(
    dy: &[T],
    x: &[T],
    inv: &[T],
    d: usize,
    g: &[T],
    dg: Option<&mut [T]>,
) -> Vec<T> {
    let n = x.len() / d;
    let mut dx = vec![T::zero(); x.len()];
    if let Some(dg) = dg {
        for r in 0..n {
            for j in 0..d {
                dg[j] += dy[r * d + j] * x[r * d + j] * inv[r];
            }
        }
    }
    for r in 0..n {
        let (xr, dyr) = (&x[r * d..(r + 1) * d], &dy[r * d..(r + 1) * d]);
        let iv = inv[r];
        let dot: T = (0..d).map(|j| dyr[j] * g[j] * xr[j]).sum();
        let c = iv * iv * iv * dot / T::of(d as f64);
        for j in 0..d {
            dx[r * d + j] = iv * dyr[j] * g[j] - xr[j] * c;
        }
    }
    dx
}

fn sigmoid<T: Scalar>(a: T) -> T {
    T::one() / (T::one() + (-a).exp())
}

/// Activations of one block kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerCache<T> {
    x_in: Vec<T>,
    inv1: Vec<T>,
    h1: Vec<T>,
    /// Head-major `[B, H, T, hd]`, rotated.
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `[B, H, T, T]` causal softmax.
    probs: Vec<T>,
    attn: Vec<T>,
    x_mid: Vec<T>,
    inv2: Vec<T>,
    h2: Vec<T>,
    gate: Vec<T>,
    up: Vec<T>,
    act: Vec<T>,
}

/// Stored activations of a full forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    pub batch: usize,
    pub seq_len: usize,
    layers: Vec<LayerCache<T>>,
    x_final: Vec<T>,
    inv_f: Vec<T>,
    hf: Vec<T>,
}

impl<T> ForwardCache<T> {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }
}

struct Dims {
    b: usize,
    t: usize,
    h: usize,
    hd: usize,
    d: usize,
    f: usize,
}

impl Dims {
    fn new(cfg: &ModelConfig, batch: &TokenBatch) -> Self {
        Dims {
            b: batch.batch,
            t: batch.seq_len,
            h: cfg.n_heads,
            hd: cfg.head_dim(),
            d: cfg.d_model,
            f: cfg.d_ff,
        }
    }
    fn n(&self) -> usize {
        self.b * self.t
    }
    /// Offset of (b, h) in a head-major `[B, H, T, hd]` buffer.
    fn head(&self, bh: usize) -> usize {
        bh * self.t * self.hd
    }
}

/// `[N, d]` row layout → head-major `[B, H, T, hd]`, optionally rotating.
fn to_heads<T: Scalar>(x: &[T], dm: &Dims, rope: Option<&Rope<T>>) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..dm.b {
        for t in 0..dm.t {
            let row = &x[(b * dm.t + t) * dm.d..(b * dm.t + t + 1) * dm.d];
            for h in 0..dm.h {
                let dst = dm.head(b * dm.h + h) + t * dm.hd;
                let seg = &mut out[dst..dst + dm.hd];
                seg.copy_from_slice(&row[h * dm.hd..(h + 1) * dm.hd]);
                if let Some(r) = rope {
                    r.apply(seg, t, false);
                }
            }
        }
    }
    out
}

/// Inverse of [`to_heads`]; `rope` applies the inverse rotation.
fn from_heads<T: Scalar>(x: &[T], dm: &Dims, rope: Option<&Rope<T>>) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..dm.b {
        for t in 0..dm.t {
            for h in 0..dm.h {
                let src = dm.head(b * dm.h + h) + t * dm.hd;
                let o = (b * dm.t + t) * dm.d + h * dm.hd;
                let seg = &mut out[o..o + dm.hd];
                seg.copy_from_slice(&x[src..src + dm.hd]);
                if let Some(r) = rope {
                    r.apply(seg, t, true);
                }
            }
        }
    }
    out
}

/// Causal attention for all heads; returns `(probs, out)` with `out` head-major.
fn attention_fwd<T: Scalar>(q: &[T], k: &[T], v: &[T], dm: &Dims) -> (Vec<T>, Vec<T>) {
    let (t, hd) = (dm.t, dm.hd);
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let blocks: Vec<(Vec<T>, Vec<T>)> = (0..dm.b * dm.h)
        .into_par_iter()
        .map(|bh| {
            let off = dm.head(bh);
            let (qb, kb, vb) = (&q[off..off + t * hd], &k[off..off + t * hd], &v[off..off + t * hd]);
            let mut s = vec![T::zero(); t * t];
            gemm(Op::N, qb, t, hd, Op::T, kb, t, hd, scale, T::zero(), &mut s);
            for i in 0..t {
                let row = &mut s[i * t..(i + 1) * t];
                let mx = row[..=i].iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let mut z = T::zero();
                for x in row[..=i].iter_mut() {
                    *x = (*x - mx).exp();
                    z += *x;
                }
                for x in row[..=i].iter_mut() {
                    *x = *x / z;
                }
                for x in row[i + 1..].iter_mut() {
                    *x = T::zero();
                }
            }
            let mut o = vec![T::zero(); t * hd];
            gemm(Op::N, &s, t, t, Op::N, vb, t, hd, T::one(), T::zero(), &mut o);
            (s, o)
        })
        .collect();
    let mut probs = Vec::with_capacity(dm.b * dm.h * t * t);
    let mut out = Vec::with_capacity(q.len());
    for (s, o) in blocks {
        probs.extend(s);
        out.extend(o);
    }
    (probs, out)
}

/// Gradients w.r.t. rotated q, k and v (all head-major).
fn attention_bwd<T: Scalar>(
    dout: &[T],
    cache: &LayerCache<T>,
    dm: &Dims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (t, hd) = (dm.t, dm.hd);
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let blocks: Vec<[Vec<T>; 3]> = (0..dm.b * dm.h)
        .into_par_iter()
        .map(|bh| {
            let off = dm.head(bh);
            let r = off..off + t * hd;
            let (qb, kb, vb, dob) = (&cache.q[r.clone()], &cache.k[r.clone()], &cache.v[r.clone()], &dout[r]);
            let p = &cache.probs[bh * t * t..(bh + 1) * t * t];
            let mut dp = vec![T::zero(); t * t];
            gemm(Op::N, dob, t, hd, Op::T, vb, t, hd, T::one(), T::zero(), &mut dp);
            let mut dv = vec![T::zero(); t * hd];
            gemm(Op::T, p, t, t, Op::N, dob, t, hd, T::one(), T::zero(), &mut dv);
            // dS = P ⊙ (dP − Σ_j dP·P), scaled.
            for i in 0..t {
                let pr = &p[i * t..(i + 1) * t];
                let row = &mut dp[i * t..(i + 1) * t];
                let dot: T = (0..=i).map(|j| row[j] * pr[j]).sum();
                for j in 0..=i {
                    row[j] = pr[j] * (row[j] - dot) * scale;
                }
                for x in row[i + 1..].iter_mut() {
                    *x = T::zero();
                }
            }
            let mut dq = vec![T::zero(); t * hd];
            gemm(Op::N, &dp, t, t, Op::N, kb, t, hd, T::one(), T::zero(), &mut dq);
            let mut dk = vec![T::zero(); t * hd];
            gemm(Op::T, &dp, t, t, Op::N, qb, t, hd, T::one(), T::zero(), &mut dk);
            [dq, dk, dv]
        })
        .collect();
    let mut dq = Vec::with_capacity(cache.q.len());
    let mut dk = Vec::with_capacity(cache.q.len());
    let mut dv = Vec::with_capacity(cache.q.len());
    for [a, b, c] in blocks {
        dq.extend(a);
        dk.extend(b);
        dv.extend(c);
    }
    (dq, dk, dv)
}

fn layer_fwd<T: Scalar>(p: &LayerParams<T>, x: Vec<T>, dm: &Dims, rope: &Rope<T>) -> (Vec<T>, LayerCache<T>) {
    let (n, d, f) = (dm.n(), dm.d, dm.f);
    let (h1, inv1) = rmsnorm_fwd(&x, d, &p[NORM_IN]);
    let q = to_heads(&linear(&h1, n, d, &p[Q], d), dm, Some(rope));
    let k = to_heads(&linear(&h1, n, d, &p[K], d), dm, Some(rope));
    let v = to_heads(&linear(&h1, n, d, &p[V], d), dm, None);
    let (probs, out) = attention_fwd(&q, &k, &v, dm);
    let attn = from_heads(&out, dm, None);
    let mut x_mid = linear(&attn, n, d, &p[O], d);
    for (o, &xi) in x_mid.iter_mut().zip(&x) {
        *o += xi;
    }
    let (h2, inv2) = rmsnorm_fwd(&x_mid, d, &p[NORM_POST]);
    let gate = linear(&h2, n, d, &p[GATE], f);
    let up = linear(&h2, n, d, &p[UP], f);
    let act: Vec<T> = gate
        .iter()
        .zip(&up)
        .map(|(&a, &u)| a * sigmoid(a) * u)
        .collect();
    let mut x_out = linear(&act, n, f, &p[DOWN], d);
    for (o, &xi) in x_out.iter_mut().zip(&x_mid) {
        *o += xi;
    }
    let cache = LayerCache {
        x_in: x,
        inv1,
        h1,
        q,
        k,
        v,
        probs,
        attn,
        x_mid,
        inv2,
        h2,
        gate,
        up,
        act,
    };
    (x_out, cache)
}

/// Backward through one block. `grads` is `None` for frozen blocks that
/// only propagate the signal. Returns the gradient w.r.t. the block input.
fn layer_bwd<T: Scalar>(
    p: &LayerParams<T>,
    c: &LayerCache<T>,
    dx_out: Vec<T>,
    dm: &Dims,
    rope: &Rope<T>,
    mut grads: Option<&mut LayerParams<T>>,
) -> Vec<T> {
    let (n, d, f) = (dm.n(), dm.d, dm.f);
    macro_rules! g {
        ($i:expr) => {
            grads.as_mut().map(|g| g[$i].as_mut_slice())
        };
    }
    let dact = linear_backward(&dx_out, &c.act, n, f, &p[DOWN], d, g!(DOWN), true).unwrap();
    let mut dgate = vec![T::zero(); n * f];
    let mut dup = vec![T::zero(); n * f];
    for i in 0..n * f {
        let a = c.gate[i];
        let s = sigmoid(a);
        dup[i] = dact[i] * a * s;
        dgate[i] = dact[i] * c.up[i] * s * (T::one() + a * (T::one() - s));
    }
    let mut dh2 = linear_backward(&dgate, &c.h2, n, d, &p[GATE], f, g!(GATE), true).unwrap();
    let dh2b = linear_backward(&dup, &c.h2, n, d, &p[UP], f, g!(UP), true).unwrap();
    for (a, b) in dh2.iter_mut().zip(dh2b) {
        *a += b;
    }
    let mut dx_mid = rmsnorm_bwd(&dh2, &c.x_mid, &c.inv2, d, &p[NORM_POST], g!(NORM_POST));
    for (a, &b) in dx_mid.iter_mut().zip(&dx_out) {
        *a += b;
    }

    let dattn = linear_backward(&dx_mid, &c.attn, n, d, &p[O], d, g!(O), true).unwrap();
    let dout = to_heads(&dattn, dm, None);
    let (dq, dk, dv) = attention_bwd(&dout, c, dm);
    let dq = from_heads(&dq, dm, Some(rope));
    let dk = from_heads(&dk, dm, Some(rope));
    let dv = from_heads(&dv, dm, None);
    let mut dh1 = linear_backward(&dq, &c.h1, n, d, &p[Q], d, g!(Q), true).unwrap();
    for (src, idx) in [(&dk, K), (&dv, V)] {
        let part = linear_backward(src, &c.h1, n, d, &p[idx], d, g!(idx), true).unwrap();
        for (a, b) in dh1.iter_mut().zip(part) {
            *a += b;
        }
    }
    let mut dx_in = rmsnorm_bwd(&dh1, &c.x_in, &c.inv1, d, &p[NORM_IN], g!(NORM_IN));
    for (a, &b) in dx_in.iter_mut().zip(&dx_mid) {
        *a += b;
    }
    dx_in
}

/// Forward pass on flat parameters. Returns logits `[B·T, vocab]`.
pub fn forward<T: Scalar>(
    params: &LmParams<T>,
    batch: &TokenBatch,
    keep_cache: bool,
) -> Result<(Vec<T>, Option<ForwardCache<T>>)> {
    let cfg = &params.config;
    batch.validate(cfg)?;
    let dm = Dims::new(cfg, batch);
    let (n, d) = (dm.n(), dm.d);
    let rope = Rope::<T>::new(dm.t, dm.hd, cfg.rope_theta);
    let mut x = vec![T::zero(); n * d];
    for (i, &tok) in batch.tokens.iter().enumerate() {
        let tok = tok as usize;
        x[i * d..(i + 1) * d].copy_from_slice(&params.embed[tok * d..(tok + 1) * d]);
    }
    let mut caches = Vec::with_capacity(if keep_cache { params.layers.len() } else { 0 });
    for p in &params.layers {
        let (y, c) = layer_fwd(p, x, &dm, &rope);
        x = y;
        if keep_cache {
            caches.push(c);
        }
    }
    let (hf, inv_f) = rmsnorm_fwd(&x, d, &params.final_norm);
    let logits = linear(&hf, n, d, &params.lm_head, cfg.vocab_size);
    let cache = keep_cache.then(|| ForwardCache {
        batch: dm.b,
        seq_len: dm.t,
        layers: caches,
        x_final: x,
        inv_f,
        hf,
    });
    Ok((logits, cache))
}

/// Which parameter groups receive gradients.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub layers: Vec<bool>,
    pub embed: bool,
    pub final_norm: bool,
    pub lm_head: bool,
}

impl Trainable {
    pub fn all(n_layers: usize) -> Self {
        Trainable {
            layers: vec![true; n_layers],
            embed: true,
            final_norm: true,
            lm_head: true,
        }
    }

    pub fn none(n_layers: usize) -> Self {
        Trainable {
            layers: vec![false; n_layers],
            embed: false,
            final_norm: false,
            lm_head: false,
        }
    }

    pub fn any(&self) -> bool {
        self.embed || self.final_norm || self.lm_head || self.layers.iter().any(|&b| b)
    }
}

/// Mean next-token cross-entropy over `[B·T, V]` logits and its gradient.
pub fn cross_entropy<T: Scalar>(
    logits: &[T],
    batch: &TokenBatch,
    vocab: usize,
    want_grad: bool,
) -> Result<(f64, Option<Vec<T>>)> {
    let count = batch.target_count();
    if count == 0 {
        return Err(Error::arg("batch has no next-token targets"));
    }
    let mut total = 0.0f64;
    let mut grad = want_grad.then(|| vec![T::zero(); logits.len()]);
    for b in 0..batch.batch {
        for t in 0..batch.lengths[b].saturating_sub(1) {
            let row = b * batch.seq_len + t;
            let target = batch.tokens[row + 1] as usize;
            let l = &logits[row * vocab..(row + 1) * vocab];
            let mx = l.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v.as_f64()));
            let z: f64 = l.iter().map(|&v| (v.as_f64() - mx).exp()).sum();
            let lse = mx + z.ln();
            total += lse - l[target].as_f64();
            if let Some(g) = grad.as_mut() {
                let gr = &mut g[row * vocab..(row + 1) * vocab];
                for (o, &v) in gr.iter_mut().zip(l) {
                    *o = T::of((v.as_f64() - lse).exp() / count as f64);
                }
                gr[target] -= T::of(1.0 / count as f64);
            }
        }
    }
    Ok((total / count as f64, grad))
}

/// Loss and exact gradients for the trainable groups (others stay zero).
pub fn loss_and_grad<T: Scalar>(
    params: &LmParams<T>,
    batch: &TokenBatch,
    trainable: &Trainable,
) -> Result<(f64, LmParams<T>)> {
    let cfg = &params.config;
    let (logits, cache) = forward(params, batch, true)?;
    let cache = cache.expect("cache requested");
    let (loss, dlogits) = cross_entropy(&logits, batch, cfg.vocab_size, true)?;
    let dlogits = dlogits.expect("gradient requested");
    let mut grads = params.zeros_like();
    let dm = Dims::new(cfg, batch);
    let (n, d) = (dm.n(), dm.d);
    let n_layers = params.layers.len();
    // Lowest block whose input gradient is still needed.
    let lowest = if trainable.embed {
        Some(0)
    } else {
        trainable.layers.iter().position(|&b| b)
    };
    let need_dx = lowest.is_some() || trainable.final_norm;
    let dhf = linear_backward(
        &dlogits,
        &cache.hf,
        n,
        d,
        &params.lm_head,
        cfg.vocab_size,
        trainable.lm_head.then_some(grads.lm_head.as_mut_slice()),
        need_dx,
    );
    let Some(dhf) = dhf else {
        return Ok((loss, grads));
    };
    let mut dx = rmsnorm_bwd(
        &dhf,
        &cache.x_final,
        &cache.inv_f,
        d,
        &params.final_norm,
        trainable.final_norm.then_some(grads.final_norm.as_mut_slice()),
    );
    let Some(lowest) = lowest else {
        return Ok((loss, grads));
    };
    let rope = Rope::<T>::new(dm.t, dm.hd, cfg.rope_theta);
    for l in (lowest..n_layers).rev() {
        let g = trainable.layers[l].then_some(&mut grads.layers[l]);
        dx = layer_bwd(&params.layers[l], &cache.layers[l], dx, &dm, &rope, g);
    }
    if trainable.embed {
        for (i, &tok) in batch.tokens.iter().enumerate() {
            let tok = tok as usize;
            for j in 0..d {
                grads.embed[tok * d + j] += dx[i * d + j];
            }
        }
    }
    Ok((loss, grads))
}

/// Logits `[batch, seq, vocab]` of a checkpoint together with the stored
/// activations.
pub fn forward_logits(
    model: &TransformerCheckpoint,
    batch: &TokenBatch,
) -> Result<(Tensor, ForwardCache<f32>)> {
    let params = LmParams::<f32>::from_checkpoint(model);
    let (logits, cache) = forward(&params, batch, true)?;
    let t = Tensor::new([batch.batch, batch.seq_len, model.config.vocab_size], logits)?;
    t.ensure_finite("logits")?;
    Ok((t, cache.expect("cache requested")))
}

/// Mean next-token cross-entropy (natural log) of `[batch, seq, vocab]`
/// logits against the batch's own tokens shifted by one.
pub fn lm_loss(logits: &Tensor, batch: &TokenBatch) -> Result<f64> {
    let shape = logits.shape();
    if shape.len() != 3 || shape[0] != batch.batch || shape[1] != batch.seq_len {
        return Err(Error::dim(format!(
            "logits {:?} do not match batch {}×{}",
            shape, batch.batch, batch.seq_len
        )));
    }
    Ok(cross_entropy(logits.data(), batch, shape[2], false)?.0)
}

/// Sequences scored per forward pass during evaluation.
pub const EVAL_BATCH: usize = 16;

/// `exp(total NLL / total predicted tokens)` over an evaluation set.
///
/// Sequences are scored in a canonical (sorted) order so the result does not
/// depend on the order in which they are supplied.
pub fn perplexity(model: &TransformerCheckpoint, eval_set: &[Vec<u32>]) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(Error::arg("perplexity needs a non-empty evaluation set"));
    }
    let params = LmParams::<f32>::from_checkpoint(model);
    perplexity_params(&params, eval_set)
}

pub fn perplexity_params(params: &LmParams<f32>, eval_set: &[Vec<u32>]) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(Error::arg("perplexity needs a non-empty evaluation set"));
    }
    let mut order: Vec<&Vec<u32>> = eval_set.iter().filter(|s| s.len() >= 2).collect();
    if order.is_empty() {
        return Err(Error::arg("evaluation sequences need at least 2 tokens"));
    }
    order.sort();
    let mut nll = 0.0f64;
    let mut count = 0usize;
    for chunk in order.chunks(EVAL_BATCH) {
        let rows: Vec<Vec<u32>> = chunk.iter().map(|s| (*s).clone()).collect();
        let batch = TokenBatch::new(&rows)?;
        let (logits, _) = forward(params, &batch, false)?;
        let (mean, _) = cross_entropy(&logits, &batch, params.config.vocab_size, false)?;
        let c = batch.target_count();
        nll += mean * c as f64;
        count += c;
    }
    let ppl = (nll / count as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::numeric(format!("perplexity overflow (mean NLL {})", nll / count as f64)));
    }
    Ok(ppl)
}
