//! Neural building blocks on top of the tape: linear, layer norm, batch norm,
//! multi-head attention with an optional 2-D relative bias, feed-forward and
//! token embeddings.
//!
//! Layers read their parameters from a [`ParamStore`] under a name prefix;
//! the `init_*` functions create those entries.

use std::sync::Arc;

use crate::params::{uniform_init, Graph, Mode, ParamStore};
use crate::real::Real;
use crate::rng::SplitMix64;
use crate::tensor::Var;
use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-6;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<T> {
    pub d_in: usize,
    pub d_out: usize,
    /// `[d_in, d_out]`, row-major.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> LinearParams<T> {
    pub fn store(&self, store: &mut ParamStore<T>, prefix: &str) {
        store.insert(format!("{prefix}.weight"), &[self.d_in, self.d_out], self.weight.clone(), true);
        store.insert(format!("{prefix}.bias"), &[self.d_out], self.bias.clone(), true);
    }
}

pub fn init_linear<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut SplitMix64,
) {
    LinearParams {
        d_in,
        d_out,
        weight: uniform_init(rng, d_in * d_out, d_in),
        bias: vec![T::zero(); d_out],
    }
    .store(store, prefix);
}

/// `x W + b` over the last axis.
pub fn linear<T: Real>(g: &Graph<T>, x: Var, prefix: &str) -> Result<Var> {
    let w = g.p(&format!("{prefix}.weight"))?;
    let b = g.p(&format!("{prefix}.bias"))?;
    let xs = g.shape(x);
    let ws = g.shape(w);
    if xs.last() != Some(&ws[0]) {
        return Err(Error::ShapeMismatch {
            op: "linear",
            lhs: xs,
            rhs: ws,
        });
    }
    // flatten leading axes so the product is one GEMM
    let rows: usize = xs[..xs.len() - 1].iter().product();
    let flat = g.reshape(x, &[rows, ws[0]])?;
    let y = g.add(g.matmul(flat, w)?, b)?;
    let mut out = xs[..xs.len() - 1].to_vec();
    out.push(ws[1]);
    g.reshape(y, &out)
}

pub fn init_layer_norm<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.gamma"), &[d], vec![T::one(); d], true);
    store.insert(format!("{prefix}.beta"), &[d], vec![T::zero(); d], true);
}

pub fn layer_norm<T: Real>(g: &Graph<T>, x: Var, prefix: &str) -> Result<Var> {
    let d = *g.shape(x).last().unwrap_or(&0);
    if d < 2 {
        return Err(Error::invalid("layer norm needs at least two features"));
    }
    let n = g.layer_norm_core(x, LN_EPS)?;
    let scaled = g.mul(n, g.p(&format!("{prefix}.gamma"))?)?;
    g.add(scaled, g.p(&format!("{prefix}.beta"))?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> BatchNormParams<T> {
    pub fn identity(c: usize) -> Self {
        BatchNormParams {
            gamma: vec![T::one(); c],
            beta: vec![T::zero(); c],
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn store(&self, store: &mut ParamStore<T>, prefix: &str) {
        let c = [self.channels()];
        store.insert(format!("{prefix}.gamma"), &c, self.gamma.clone(), true);
        store.insert(format!("{prefix}.beta"), &c, self.beta.clone(), true);
        store.insert(format!("{prefix}.running_mean"), &c, self.running_mean.clone(), false);
        store.insert(format!("{prefix}.running_var"), &c, self.running_var.clone(), false);
    }

    pub fn load(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(BatchNormParams {
            gamma: store.data(&format!("{prefix}.gamma"))?.to_vec(),
            beta: store.data(&format!("{prefix}.beta"))?.to_vec(),
            running_mean: store.data(&format!("{prefix}.running_mean"))?.to_vec(),
            running_var: store.data(&format!("{prefix}.running_var"))?.to_vec(),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        })
    }

    /// Per-channel `(scale, shift)` of the inference-mode affine map.
    pub fn infer_affine(&self) -> Result<(Vec<T>, Vec<T>)> {
        let mut scale = Vec::with_capacity(self.channels());
        let mut shift = Vec::with_capacity(self.channels());
        for c in 0..self.channels() {
            if self.running_var[c] < T::zero() {
                return Err(Error::BatchNorm(format!(
                    "negative running variance {} in channel {c}",
                    self.running_var[c]
                )));
            }
            let s = self.gamma[c] / (self.running_var[c] + T::c(self.eps)).sqrt();
            scale.push(s);
            shift.push(self.beta[c] - self.running_mean[c] * s);
        }
        Ok((scale, shift))
    }
}

pub fn init_batch_norm<T: Real>(store: &mut ParamStore<T>, prefix: &str, c: usize) {
    BatchNormParams::<T>::identity(c).store(store, prefix);
}

/// Batch norm over `[b, C, h, w]`. Train mode normalizes with batch
/// statistics and queues a running-stat update on the graph; infer mode is a
/// fixed per-channel affine map.
pub fn batch_norm<T: Real>(g: &Graph<T>, x: Var, prefix: &str) -> Result<Var> {
    let s = g.shape(x);
    if s.len() != 4 {
        return Err(Error::invalid(format!("batch norm expects [b,C,h,w], got {s:?}")));
    }
    let c = s[1];
    let gamma = g.reshape(g.p(&format!("{prefix}.gamma"))?, &[c, 1, 1])?;
    let beta = g.reshape(g.p(&format!("{prefix}.beta"))?, &[c, 1, 1])?;
    match g.mode {
        Mode::Train => {
            let (n, mean, var) = g.channel_norm(x, BN_EPS)?;
            g.record_bn_update(prefix, mean, var);
            g.add(g.mul(n, gamma)?, beta)
        }
        Mode::Infer => {
            let mean = g.params().data(&format!("{prefix}.running_mean"))?;
            let var = g.params().data(&format!("{prefix}.running_var"))?;
            if let Some(bad) = var.iter().find(|v| **v < T::zero()) {
                return Err(Error::BatchNorm(format!("negative running variance {bad}")));
            }
            let inv: Vec<T> = var
                .iter()
                .map(|v| T::one() / (*v + T::c(BN_EPS)).sqrt())
                .collect();
            let mean = g.constant(&[c, 1, 1], mean.to_vec())?;
            let inv = g.constant(&[c, 1, 1], inv)?;
            let centered = g.sub(x, mean)?;
            let scale = g.mul(inv, gamma)?;
            g.add(g.mul(centered, scale)?, beta)
        }
    }
}

/// Folds queued train-mode batch statistics into the running estimates.
pub fn apply_bn_updates<T: Real>(
    store: &mut ParamStore<T>,
    updates: &[(String, Vec<T>, Vec<T>)],
) -> Result<()> {
    let m = T::c(BN_MOMENTUM);
    for (prefix, mean, var) in updates {
        let rm = store.data_mut(&format!("{prefix}.running_mean"))?;
        for (r, v) in rm.iter_mut().zip(mean) {
            *r = (T::one() - m) * *r + m * *v;
        }
        let rv = store.data_mut(&format!("{prefix}.running_var"))?;
        for (r, v) in rv.iter_mut().zip(var) {
            *r = (T::one() - m) * *r + m * *v;
        }
    }
    Ok(())
}

/// Index table mapping `(head, query, key)` onto a flat
/// `[heads, (2H-1)(2W-1)]` relative-bias table.
pub fn relative_bias_index(heads: usize, grid_h: usize, grid_w: usize) -> Vec<usize> {
    let n = grid_h * grid_w;
    let span_w = 2 * grid_w - 1;
    let per_head = (2 * grid_h - 1) * span_w;
    let mut idx = Vec::with_capacity(heads * n * n);
    for h in 0..heads {
        for q in 0..n {
            let (qr, qc) = (q / grid_w, q % grid_w);
            for k in 0..n {
                let (kr, kc) = (k / grid_w, k % grid_w);
                let dr = qr + grid_h - 1 - kr;
                let dc = qc + grid_w - 1 - kc;
                idx.push(h * per_head + dr * span_w + dc);
            }
        }
    }
    idx
}

pub fn init_msa<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d_model: usize,
    heads: usize,
    relative_grid: Option<(usize, usize)>,
    rng: &mut SplitMix64,
) {
    for proj in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.{proj}"), d_model, d_model, rng);
    }
    if let Some((h, w)) = relative_grid {
        let len = heads * (2 * h - 1) * (2 * w - 1);
        store.insert(format!("{prefix}.rel_bias"), &[heads, len / heads], vec![T::zero(); len], true);
    }
}

/// Key/value projections split into heads: `k: [B, h, dh, Nk]`, `v: [B, h, Nk, dh]`.
pub fn project_kv<T: Real>(g: &Graph<T>, kv_in: Var, prefix: &str, heads: usize) -> Result<(Var, Var)> {
    let s = g.shape(kv_in);
    let (b, n, d) = (s[0], s[1], s[2]);
    let dh = head_dim(d, heads)?;
    let k = linear(g, kv_in, &format!("{prefix}.k"))?;
    let k = g.permute(g.reshape(k, &[b, n, heads, dh])?, &[0, 2, 3, 1])?;
    let v = linear(g, kv_in, &format!("{prefix}.v"))?;
    let v = g.permute(g.reshape(v, &[b, n, heads, dh])?, &[0, 2, 1, 3])?;
    Ok((k, v))
}

fn head_dim(d: usize, heads: usize) -> Result<usize> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "d_model {d} is not divisible by {heads} heads"
        )));
    }
    Ok(d / heads)
}

/// Attention of `q_in [B, Nq, d]` over pre-projected keys/values.
/// Returns the output `[B, Nq, d]` and the post-softmax weights `[B, h, Nq, Nk]`.
pub fn attend<T: Real>(
    g: &Graph<T>,
    q_in: Var,
    k: Var,
    v: Var,
    prefix: &str,
    heads: usize,
    mask: Option<&[bool]>,
    relative_grid: Option<(usize, usize)>,
) -> Result<(Var, Var)> {
    let s = g.shape(q_in);
    let (b, nq, d) = (s[0], s[1], s[2]);
    let dh = head_dim(d, heads)?;
    let q = linear(g, q_in, &format!("{prefix}.q"))?;
    let q = g.permute(g.reshape(q, &[b, nq, heads, dh])?, &[0, 2, 1, 3])?;
    let mut logits = g.scale(g.matmul(q, k)?, T::c(1.0 / (dh as f64).sqrt()))?;
    if let Some((gh, gw)) = relative_grid {
        let nk = *g.shape(k).last().unwrap_or(&0);
        if nq != gh * gw || nk != gh * gw {
            return Err(Error::invalid(format!(
                "relative bias needs {}x{} grid tokens, got {nq} queries / {nk} keys",
                gh, gw
            )));
        }
        let table = g.p(&format!("{prefix}.rel_bias"))?;
        let bias = g.gather(
            table,
            Arc::new(relative_bias_index(heads, gh, gw)),
            &[heads, nq, nk],
        )?;
        logits = g.add(logits, bias)?;
    }
    let att = g.softmax_masked(logits, 3, mask)?;
    let ctx = g.matmul(g.dropout(att)?, v)?;
    let ctx = g.reshape(g.permute(ctx, &[0, 2, 1, 3])?, &[b, nq, d])?;
    Ok((linear(g, ctx, &format!("{prefix}.o"))?, att))
}

/// Multi-head attention `MSA(q, kv, kv)` with scale `1/sqrt(d/h)`.
pub fn msa_forward<T: Real>(
    g: &Graph<T>,
    q_in: Var,
    kv_in: Var,
    prefix: &str,
    heads: usize,
    mask: Option<&[bool]>,
    relative_grid: Option<(usize, usize)>,
) -> Result<(Var, Var)> {
    let qs = g.shape(q_in);
    let ks = g.shape(kv_in);
    if qs.len() != 3 || ks.len() != 3 || qs[2] != ks[2] {
        return Err(Error::ShapeMismatch {
            op: "msa",
            lhs: qs,
            rhs: ks,
        });
    }
    let (k, v) = project_kv(g, kv_in, prefix, heads)?;
    attend(g, q_in, k, v, prefix, heads, mask, relative_grid)
}

/// Lower-triangular mask: query `t` sees keys `0..=t`.
pub fn causal_mask(t: usize) -> Vec<bool> {
    (0..t).flat_map(|q| (0..t).map(move |k| k <= q)).collect()
}

pub fn init_ffn<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d_model: usize,
    expansion: usize,
    rng: &mut SplitMix64,
) {
    init_linear(store, &format!("{prefix}.fc1"), d_model, d_model * expansion, rng);
    init_linear(store, &format!("{prefix}.fc2"), d_model * expansion, d_model, rng);
}

/// `max(0, x W1 + b1) W2 + b2`.
pub fn ffn_forward<T: Real>(g: &Graph<T>, x: Var, prefix: &str) -> Result<Var> {
    let h = g.relu(linear(g, x, &format!("{prefix}.fc1"))?)?;
    linear(g, g.dropout(h)?, &format!("{prefix}.fc2"))
}

/// Fixed sinusoidal encodings for positions `offset..offset + t`, `[t, d]`.
pub fn sinusoidal_position<T: Real>(offset: usize, t: usize, d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(t * d);
    for pos in offset..offset + t {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            out.push(T::c(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    out
}

/// Token embedding plus sinusoidal positions: ids `[s, t]` -> `[s, t, d]`.
pub fn embed<T: Real>(
    g: &Graph<T>,
    table: &str,
    ids: &[usize],
    seqs: usize,
    offset: usize,
) -> Result<Var> {
    let tab = g.p(table)?;
    let d = g.shape(tab)[1];
    if seqs == 0 || ids.len() % seqs != 0 || ids.is_empty() {
        return Err(Error::invalid("token batch is empty or ragged"));
    }
    let t = ids.len() / seqs;
    let rows = g.embedding(tab, ids)?;
    let rows = g.reshape(rows, &[seqs, t, d])?;
    let pos = g.constant(&[t, d], sinusoidal_position(offset, t, d))?;
    g.add(rows, pos)
}
