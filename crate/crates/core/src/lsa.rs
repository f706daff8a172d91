//! Locality-sensitive attention.
//!
//! Two multi-scale conv blocks (MSC) in series with a ReLU between them
//! produce a per-cell, per-channel gate `A`; the block output is
//! `V' * sigmoid(A)`. Each MSC sums up to three batch-normalized branches:
//! identity, a 1x1 conv, and a 1x1 conv followed by a 3x3 conv. In inference
//! mode every enabled branch is linear, so an MSC collapses into a single
//! 3x3 convolution ([`reparameterize`]).
//!
//! The 1x1 stage of the sequential branch carries a bias, and its output is
//! padded with that bias (not zeros) before the 3x3 conv. With this halo rule
//! the folded kernel reproduces the multi-branch output on border cells too.

use std::fmt;
use std::str::FromStr;

use crate::layers::{batch_norm, BatchNormParams};
use crate::params::{uniform_init, Graph, ParamStore};
use crate::real::Real;
use crate::rng::SplitMix64;
use crate::tensor::{Padding, Var};
use crate::{Error, Result};

/// Which MSC branches are present.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchMask {
    pub identity: bool,
    pub conv1x1: bool,
    pub seq: bool,
}

impl BranchMask {
    pub const ALL: BranchMask = BranchMask {
        identity: true,
        conv1x1: true,
        seq: true,
    };

    pub fn any(&self) -> bool {
        self.identity || self.conv1x1 || self.seq
    }

    /// The eight branch subsets, ordered as in the branch ablation table
    /// (none; each single branch; each pair; all three).
    pub fn ablation_rows() -> Vec<BranchMask> {
        let m = |identity, conv1x1, seq| BranchMask {
            identity,
            conv1x1,
            seq,
        };
        vec![
            m(false, false, false),
            m(true, false, false),
            m(false, true, false),
            m(false, false, true),
            m(true, true, false),
            m(true, false, true),
            m(false, true, true),
            m(true, true, true),
        ]
    }
}

impl fmt::Display for BranchMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.identity {
            parts.push("identity");
        }
        if self.conv1x1 {
            parts.push("1x1");
        }
        if self.seq {
            parts.push("1x1-3x3");
        }
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

impl FromStr for BranchMask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut m = BranchMask {
            identity: false,
            conv1x1: false,
            seq: false,
        };
        if s.trim() == "none" {
            return Ok(m);
        }
        for part in s.split('+').map(str::trim) {
            match part {
                "identity" => m.identity = true,
                "1x1" => m.conv1x1 = true,
                "1x1-3x3" => m.seq = true,
                other => return Err(Error::Config(format!("unknown branch '{other}'"))),
            }
        }
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqBranch<T> {
    /// `[C, C, 1, 1]`
    pub k1: Vec<T>,
    /// `[C]`, also the halo value of the intermediate map.
    pub b1: Vec<T>,
    /// `[C, C, 3, 3]`
    pub k3: Vec<T>,
    pub bn: BatchNormParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MscBlock<T> {
    pub channels: usize,
    pub identity: Option<BatchNormParams<T>>,
    /// `[C, C, 1, 1]` kernel and its batch norm.
    pub conv1x1: Option<(Vec<T>, BatchNormParams<T>)>,
    pub seq: Option<SeqBranch<T>>,
}

/// Single 3x3 conv equivalent to an inference-mode [`MscBlock`].
#[derive(Clone, Debug, PartialEq)]
pub struct FusedKernel<T> {
    pub channels: usize,
    /// `[C, C, 3, 3]`
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

impl<T> FusedKernel<T> {
    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LsaMode {
    MultiBranch,
    Fused,
}

impl fmt::Display for LsaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LsaMode::MultiBranch => "multi-branch",
            LsaMode::Fused => "fused",
        })
    }
}

impl FromStr for LsaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi-branch" => Ok(LsaMode::MultiBranch),
            "fused" => Ok(LsaMode::Fused),
            other => Err(Error::Config(format!("unknown lsa mode '{other}'"))),
        }
    }
}

impl<T: Real> MscBlock<T> {
    /// Freshly initialized block: uniform kernels, zero bias, unit batch norm.
    pub fn init(channels: usize, mask: BranchMask, rng: &mut SplitMix64) -> Self {
        let c = channels;
        MscBlock {
            channels: c,
            identity: mask.identity.then(|| BatchNormParams::identity(c)),
            conv1x1: mask
                .conv1x1
                .then(|| (uniform_init(rng, c * c, c), BatchNormParams::identity(c))),
            seq: mask.seq.then(|| SeqBranch {
                k1: uniform_init(rng, c * c, c),
                b1: vec![T::zero(); c],
                k3: uniform_init(rng, c * c * 9, c * 9),
                bn: BatchNormParams::identity(c),
            }),
        }
    }

    /// Block with every parameter and running statistic drawn at random,
    /// useful for exercising fusion away from the identity initialization.
    pub fn random(channels: usize, mask: BranchMask, rng: &mut SplitMix64) -> Self {
        let c = channels;
        let bn = |rng: &mut SplitMix64| BatchNormParams {
            gamma: (0..c).map(|_| T::c(rng.uniform(0.5, 1.5))).collect(),
            beta: (0..c).map(|_| T::c(rng.uniform(-0.5, 0.5))).collect(),
            running_mean: (0..c).map(|_| T::c(rng.uniform(-0.5, 0.5))).collect(),
            running_var: (0..c).map(|_| T::c(rng.uniform(0.2, 2.0))).collect(),
            momentum: crate::layers::BN_MOMENTUM,
            eps: crate::layers::BN_EPS,
        };
        let u = |rng: &mut SplitMix64, n: usize| -> Vec<T> {
            (0..n).map(|_| T::c(rng.uniform(-1.0, 1.0))).collect()
        };
        MscBlock {
            channels: c,
            identity: mask.identity.then(|| bn(rng)),
            conv1x1: mask.conv1x1.then(|| (u(rng, c * c), bn(rng))),
            seq: mask.seq.then(|| SeqBranch {
                k1: u(rng, c * c),
                b1: u(rng, c),
                k3: u(rng, c * c * 9),
                bn: bn(rng),
            }),
        }
    }

    pub fn mask(&self) -> BranchMask {
        BranchMask {
            identity: self.identity.is_some(),
            conv1x1: self.conv1x1.is_some(),
            seq: self.seq.is_some(),
        }
    }

    pub fn store(&self, store: &mut ParamStore<T>, prefix: &str) {
        let c = self.channels;
        if let Some(bn) = &self.identity {
            bn.store(store, &format!("{prefix}.id.bn"));
        }
        if let Some((k, bn)) = &self.conv1x1 {
            store.insert(format!("{prefix}.c1.kernel"), &[c, c, 1, 1], k.clone(), true);
            bn.store(store, &format!("{prefix}.c1.bn"));
        }
        if let Some(s) = &self.seq {
            store.insert(format!("{prefix}.seq.k1"), &[c, c, 1, 1], s.k1.clone(), true);
            store.insert(format!("{prefix}.seq.b1"), &[c], s.b1.clone(), true);
            store.insert(format!("{prefix}.seq.k3"), &[c, c, 3, 3], s.k3.clone(), true);
            s.bn.store(store, &format!("{prefix}.seq.bn"));
        }
    }

    pub fn load(store: &ParamStore<T>, prefix: &str, channels: usize, mask: BranchMask) -> Result<Self> {
        let data = |name: &str| -> Result<Vec<T>> { Ok(store.data(&format!("{prefix}.{name}"))?.to_vec()) };
        Ok(MscBlock {
            channels,
            identity: if mask.identity {
                Some(BatchNormParams::load(store, &format!("{prefix}.id.bn"))?)
            } else {
                None
            },
            conv1x1: if mask.conv1x1 {
                Some((
                    data("c1.kernel")?,
                    BatchNormParams::load(store, &format!("{prefix}.c1.bn"))?,
                ))
            } else {
                None
            },
            seq: if mask.seq {
                Some(SeqBranch {
                    k1: data("seq.k1")?,
                    b1: data("seq.b1")?,
                    k3: data("seq.k3")?,
                    bn: BatchNormParams::load(store, &format!("{prefix}.seq.bn"))?,
                })
            } else {
                None
            },
        })
    }

    /// Multiply-accumulates per output cell of the multi-branch form.
    pub fn macs_per_cell(&self) -> usize {
        let c = self.channels;
        let mut m = 0;
        if self.conv1x1.is_some() {
            m += c * c;
        }
        if self.seq.is_some() {
            m += c * c + c * c * 9;
        }
        if self.identity.is_some() {
            m += c;
        }
        m
    }
}

/// Folds an inference-mode batch norm into the preceding conv:
/// `k'[o] = k[o] * g_o / sqrt(var_o + eps)`, `b'_o = beta_o + (b_o - mean_o) * g_o / sqrt(var_o + eps)`.
/// `kernel` is `[c_out, ...]` with `c_out = bn.channels()`.
pub fn fold_bn<T: Real>(
    kernel: &[T],
    bias: Option<&[T]>,
    bn: &BatchNormParams<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    let c_out = bn.channels();
    if c_out == 0 || kernel.len() % c_out != 0 {
        return Err(Error::ShapeMismatch {
            op: "fold_bn",
            lhs: vec![kernel.len()],
            rhs: vec![c_out],
        });
    }
    let per = kernel.len() / c_out;
    let (scale, _) = bn.infer_affine()?;
    let mut k = kernel.to_vec();
    let mut b = Vec::with_capacity(c_out);
    for o in 0..c_out {
        k[o * per..(o + 1) * per].iter_mut().for_each(|v| *v *= scale[o]);
        let b0 = bias.map(|b| b[o]).unwrap_or_else(T::zero);
        b.push(bn.beta[o] + (b0 - bn.running_mean[o]) * scale[o]);
    }
    Ok((k, b))
}

/// Places a `[c_out, c_in, 1, 1]` kernel at the center tap of a 3x3 kernel.
pub fn pad_1x1_to_3x3<T: Real>(kernel: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); kernel.len() * 9];
    for (i, v) in kernel.iter().enumerate() {
        out[i * 9 + 4] = *v;
    }
    out
}

/// `[c, c, 1, 1]` identity kernel.
pub fn identity_1x1<T: Real>(c: usize) -> Vec<T> {
    let mut k = vec![T::zero(); c * c];
    for i in 0..c {
        k[i * c + i] = T::one();
    }
    k
}

/// Composes a 1x1 conv `(k1, b1)` followed by a 3x3 conv `(k3, b3)` into one
/// 3x3 conv. Exact everywhere when the intermediate map is padded with `b1`.
pub fn merge_seq_1x1_3x3<T: Real>(
    k1: &[T],
    b1: &[T],
    k3: &[T],
    b3: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    let c_mid = b1.len();
    if c_mid == 0 || k1.len() % c_mid != 0 {
        return Err(Error::ShapeMismatch {
            op: "merge_seq (1x1 stage)",
            lhs: vec![k1.len()],
            rhs: vec![c_mid],
        });
    }
    let c_in = k1.len() / c_mid;
    let c_out = b3.len();
    if k3.len() != c_out * c_mid * 9 {
        return Err(Error::ShapeMismatch {
            op: "merge_seq (3x3 stage)",
            lhs: vec![k3.len()],
            rhs: vec![c_out, c_mid, 3, 3],
        });
    }
    let mut k = vec![T::zero(); c_out * c_in * 9];
    let mut b = b3.to_vec();
    for o in 0..c_out {
        for m in 0..c_mid {
            for t in 0..9 {
                let w = k3[(o * c_mid + m) * 9 + t];
                b[o] += w * b1[m];
                for i in 0..c_in {
                    k[(o * c_in + i) * 9 + t] += w * k1[m * c_in + i];
                }
            }
        }
    }
    Ok((k, b))
}

/// Collapses an inference-mode block into one 3x3 convolution.
pub fn reparameterize<T: Real>(block: &MscBlock<T>) -> Result<FusedKernel<T>> {
    let c = block.channels;
    if !block.mask().any() {
        return Err(Error::invalid("MSC block has no enabled branch"));
    }
    let mut kernel = vec![T::zero(); c * c * 9];
    let mut bias = vec![T::zero(); c];
    let mut accumulate = |k: &[T], b: &[T]| {
        kernel.iter_mut().zip(k).for_each(|(a, v)| *a += *v);
        bias.iter_mut().zip(b).for_each(|(a, v)| *a += *v);
    };
    if let Some(bn) = &block.identity {
        let (k, b) = fold_bn(&identity_1x1::<T>(c), None, bn)?;
        accumulate(&pad_1x1_to_3x3(&k), &b);
    }
    if let Some((k1, bn)) = &block.conv1x1 {
        let (k, b) = fold_bn(k1, None, bn)?;
        accumulate(&pad_1x1_to_3x3(&k), &b);
    }
    if let Some(s) = &block.seq {
        let (k3, b3) = fold_bn(&s.k3, None, &s.bn)?;
        let (k, b) = merge_seq_1x1_3x3(&s.k1, &s.b1, &k3, &b3)?;
        accumulate(&k, &b);
    }
    Ok(FusedKernel {
        channels: c,
        kernel,
        bias,
    })
}

/// Multi-branch forward of the block stored under `prefix`, `x: [b, C, h, w]`.
pub fn msc_forward<T: Real>(g: &Graph<T>, x: Var, prefix: &str, mask: BranchMask) -> Result<Var> {
    if !mask.any() {
        return Err(Error::invalid("MSC block has no enabled branch"));
    }
    let mut outs = Vec::with_capacity(3);
    if mask.identity {
        outs.push(batch_norm(g, x, &format!("{prefix}.id.bn"))?);
    }
    if mask.conv1x1 {
        let y = g.conv2d(x, g.p(&format!("{prefix}.c1.kernel"))?, None, Padding::Zero)?;
        outs.push(batch_norm(g, y, &format!("{prefix}.c1.bn"))?);
    }
    if mask.seq {
        let b1 = g.p(&format!("{prefix}.seq.b1"))?;
        let y1 = g.conv2d(x, g.p(&format!("{prefix}.seq.k1"))?, Some(b1), Padding::Zero)?;
        let y = g.conv2d(
            y1,
            g.p(&format!("{prefix}.seq.k3"))?,
            None,
            Padding::PerChannel(b1),
        )?;
        outs.push(batch_norm(g, y, &format!("{prefix}.seq.bn"))?);
    }
    let mut acc = outs[0];
    for o in &outs[1..] {
        acc = g.add(acc, *o)?;
    }
    Ok(acc)
}

pub fn store_fused<T: Real>(store: &mut ParamStore<T>, prefix: &str, fused: &FusedKernel<T>) {
    let c = fused.channels;
    store.insert(format!("{prefix}.fused.kernel"), &[c, c, 3, 3], fused.kernel.clone(), false);
    store.insert(format!("{prefix}.fused.bias"), &[c], fused.bias.clone(), false);
}

/// Single-conv forward through a stored [`FusedKernel`].
pub fn msc_fused_forward<T: Real>(g: &Graph<T>, x: Var, prefix: &str) -> Result<Var> {
    let k = g.p(&format!("{prefix}.fused.kernel"))?;
    let b = g.p(&format!("{prefix}.fused.bias"))?;
    g.conv2d(x, k, Some(b), Padding::Zero)
}

/// Parameters of one LSA module: two MSC blocks sharing a branch mask.
pub fn init_lsa<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    channels: usize,
    mask: BranchMask,
    rng: &mut SplitMix64,
) {
    for i in 1..=2 {
        MscBlock::<T>::init(channels, mask, rng).store(store, &format!("{prefix}.msc{i}"));
    }
}

/// Replaces both MSC blocks of an LSA module by their fused kernels; the
/// multi-branch parameters are removed so the fused ones cannot go stale.
pub fn fuse_lsa<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    channels: usize,
    mask: BranchMask,
) -> Result<()> {
    for i in 1..=2 {
        let p = format!("{prefix}.msc{i}");
        let block = MscBlock::load(store, &p, channels, mask)?;
        let fused = reparameterize(&block)?;
        for name in store.names() {
            if name.starts_with(&format!("{p}.")) {
                store.remove(&name);
            }
        }
        store_fused(store, &p, &fused);
    }
    Ok(())
}

/// Gate map `A = MSC2(relu(MSC1(x)))` for `x: [b, C, h, w]`.
pub fn lsa_gate_logits<T: Real>(
    g: &Graph<T>,
    x: Var,
    prefix: &str,
    mode: LsaMode,
    mask: BranchMask,
) -> Result<Var> {
    let msc = |x: Var, i: usize| -> Result<Var> {
        let p = format!("{prefix}.msc{i}");
        match mode {
            LsaMode::MultiBranch => msc_forward(g, x, &p, mask),
            LsaMode::Fused => msc_fused_forward(g, x, &p),
        }
    };
    let a = g.relu(msc(x, 1)?)?;
    msc(a, 2)
}

/// `V' * sigmoid(MSC2(relu(MSC1(V'))))` for `V': [b, N, C]` laid out on an
/// `h x w` grid. The caller adds the residual.
pub fn lsa_forward<T: Real>(
    g: &Graph<T>,
    v_prime: Var,
    prefix: &str,
    grid: (usize, usize),
    mode: LsaMode,
    mask: BranchMask,
) -> Result<Var> {
    let s = g.shape(v_prime);
    let (h, w) = grid;
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::invalid(format!(
            "LSA input {s:?} does not tile a {h}x{w} grid"
        )));
    }
    let (b, c) = (s[0], s[2]);
    let x = g.permute(g.reshape(v_prime, &[b, h, w, c])?, &[0, 3, 1, 2])?;
    let a = lsa_gate_logits(g, x, prefix, mode, mask)?;
    let a = g.reshape(g.permute(a, &[0, 2, 3, 1])?, &[b, h * w, c])?;
    g.mul(v_prime, g.sigmoid(a)?)
}
