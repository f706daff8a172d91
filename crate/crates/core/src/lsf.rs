//! Locality-sensitive fusion of the encoder layer outputs.
//!
//! The outputs of layers 1 and 2 are spatially shifted channel quarter by
//! channel quarter, concatenated with the (unshifted) top layer, mixed by a
//! bias-free two-layer MLP and added back onto the top layer with weight
//! `lambda`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::params::{uniform_init, Graph, ParamStore};
use crate::real::Real;
use crate::rng::SplitMix64;
use crate::tensor::{Padding, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftPattern {
    /// Quarters moved down, up, right, left.
    First,
    /// Quarters moved right, left, down, up.
    Second,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShiftSpec {
    pub distance: usize,
    pub pattern: ShiftPattern,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Dir {
    Down,
    Up,
    Right,
    Left,
}

impl ShiftPattern {
    fn dirs(self) -> [Dir; 4] {
        match self {
            ShiftPattern::First => [Dir::Down, Dir::Up, Dir::Right, Dir::Left],
            ShiftPattern::Second => [Dir::Right, Dir::Left, Dir::Down, Dir::Up],
        }
    }
}

fn check_spec(h: usize, w: usize, c: usize, spec: ShiftSpec) -> Result<()> {
    if c % 4 != 0 {
        return Err(Error::invalid(format!(
            "spatial shift needs channels divisible by 4, got {c}"
        )));
    }
    if spec.distance > 0 && spec.distance >= h.min(w) {
        return Err(Error::invalid(format!(
            "shift distance {} must be below min(h, w) = {}",
            spec.distance,
            h.min(w)
        )));
    }
    Ok(())
}

/// For each element of an `[h, w, c]` map, the flat index it is read from.
/// Cells vacated by a shift read themselves.
pub fn shift_source_index(h: usize, w: usize, c: usize, spec: ShiftSpec) -> Result<Vec<usize>> {
    check_spec(h, w, c, spec)?;
    let d = spec.distance;
    let q = c / 4;
    let dirs = spec.pattern.dirs();
    let mut idx = Vec::with_capacity(h * w * c);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..c {
                let (si, sj) = match dirs[(ch / q.max(1)).min(3)] {
                    Dir::Down if i >= d => (i - d, j),
                    Dir::Up if i + d < h => (i + d, j),
                    Dir::Right if j >= d => (i, j - d),
                    Dir::Left if j + d < w => (i, j + d),
                    _ => (i, j),
                };
                idx.push((si * w + sj) * c + ch);
            }
        }
    }
    Ok(idx)
}

/// Shifts an `[h, w, c]` map; every read comes from the unmodified input.
pub fn spatial_shift<T: Copy>(v: &[T], h: usize, w: usize, c: usize, spec: ShiftSpec) -> Result<Vec<T>> {
    if v.len() != h * w * c {
        return Err(Error::ShapeMismatch {
            op: "spatial_shift",
            lhs: vec![v.len()],
            rhs: vec![h, w, c],
        });
    }
    Ok(shift_source_index(h, w, c, spec)?
        .into_iter()
        .map(|s| v[s])
        .collect())
}

/// Differentiable shift of `[b, h*w, c]` grid tokens.
pub fn shift_var<T: Real>(g: &Graph<T>, v: Var, grid: (usize, usize), spec: ShiftSpec) -> Result<Var> {
    let s = g.shape(v);
    let (h, w) = grid;
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::invalid(format!("cannot shift {s:?} on a {h}x{w} grid")));
    }
    if spec.distance == 0 {
        check_spec(h, w, s[2], spec)?;
        return Ok(v);
    }
    let per = shift_source_index(h, w, s[2], spec)?;
    let n = per.len();
    let idx: Vec<usize> = (0..s[0]).flat_map(|b| per.iter().map(move |i| b * n + i)).collect();
    g.gather(v, Arc::new(idx), &s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMethod {
    /// Shift, concatenate, MLP, weighted residual.
    Lsf,
    /// Top layer only.
    None,
    /// The LSF path with shift distance 0.
    MlpNoShift,
    /// Elementwise mean of the three layers.
    SumPool,
    /// One 3x3 conv over the channel concatenation.
    Conv3x3,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 5] = [
        FusionMethod::None,
        FusionMethod::MlpNoShift,
        FusionMethod::SumPool,
        FusionMethod::Conv3x3,
        FusionMethod::Lsf,
    ];
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMethod::Lsf => "lsf",
            FusionMethod::None => "none",
            FusionMethod::MlpNoShift => "mlp-no-shift",
            FusionMethod::SumPool => "sumpool",
            FusionMethod::Conv3x3 => "conv3x3",
        })
    }
}

impl FromStr for FusionMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        FusionMethod::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion method '{s}'")))
    }
}

/// Creates the parameters `method` needs under `prefix`.
pub fn init_fusion<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    method: FusionMethod,
    c: usize,
    rng: &mut SplitMix64,
) {
    match method {
        FusionMethod::Lsf | FusionMethod::MlpNoShift => {
            store.insert(format!("{prefix}.w1"), &[3 * c, 3 * c], uniform_init(rng, 9 * c * c, 3 * c), true);
            store.insert(format!("{prefix}.w2"), &[3 * c, c], uniform_init(rng, 3 * c * c, 3 * c), true);
        }
        FusionMethod::Conv3x3 => {
            let fan_in = 3 * c * 9;
            store.insert(
                format!("{prefix}.kernel"),
                &[c, 3 * c, 3, 3],
                uniform_init(rng, c * fan_in, fan_in),
                true,
            );
            store.insert(format!("{prefix}.bias"), &[c], vec![T::zero(); c], true);
        }
        FusionMethod::None | FusionMethod::SumPool => {}
    }
}

/// `lambda * relu(concat(SS1(v1), SS2(v2), v3) W1) W2 + v3` over `[b, h*w, c]`.
#[allow(clippy::too_many_arguments)]
pub fn lsf_fuse<T: Real>(
    g: &Graph<T>,
    v1: Var,
    v2: Var,
    v3: Var,
    prefix: &str,
    grid: (usize, usize),
    distance: usize,
    lambda: f64,
) -> Result<Var> {
    let s = g.shape(v3);
    for v in [v1, v2] {
        if g.shape(v) != s {
            return Err(Error::ShapeMismatch {
                op: "lsf_fuse",
                lhs: g.shape(v),
                rhs: s,
            });
        }
    }
    let a = shift_var(
        g,
        v1,
        grid,
        ShiftSpec {
            distance,
            pattern: ShiftPattern::First,
        },
    )?;
    let b = shift_var(
        g,
        v2,
        grid,
        ShiftSpec {
            distance,
            pattern: ShiftPattern::Second,
        },
    )?;
    let (n, c) = (s[0] * s[1], s[2]);
    let cat = g.reshape(g.concat(&[a, b, v3], 2)?, &[n, 3 * c])?;
    let hidden = g.relu(g.matmul(cat, g.p(&format!("{prefix}.w1"))?)?)?;
    let mixed = g.reshape(g.matmul(hidden, g.p(&format!("{prefix}.w2"))?)?, &s)?;
    g.add(g.scale(mixed, T::c(lambda))?, v3)
}

/// Aggregates the three layer outputs with the given method.
#[allow(clippy::too_many_arguments)]
pub fn fuse_ablation<T: Real>(
    g: &Graph<T>,
    v1: Var,
    v2: Var,
    v3: Var,
    prefix: &str,
    method: FusionMethod,
    grid: (usize, usize),
    distance: usize,
    lambda: f64,
) -> Result<Var> {
    match method {
        FusionMethod::None => Ok(v3),
        FusionMethod::Lsf => lsf_fuse(g, v1, v2, v3, prefix, grid, distance, lambda),
        FusionMethod::MlpNoShift => lsf_fuse(g, v1, v2, v3, prefix, grid, 0, lambda),
        FusionMethod::SumPool => {
            let sum = g.add(g.add(v1, v2)?, v3)?;
            g.scale(sum, T::c(1.0 / 3.0))
        }
        FusionMethod::Conv3x3 => {
            let s = g.shape(v3);
            let (b, c) = (s[0], s[2]);
            let (h, w) = grid;
            let cat = g.concat(&[v1, v2, v3], 2)?;
            let x = g.permute(g.reshape(cat, &[b, h, w, 3 * c])?, &[0, 3, 1, 2])?;
            let k = g.p(&format!("{prefix}.kernel"))?;
            let bias = g.p(&format!("{prefix}.bias"))?;
            let y = g.conv2d(x, k, Some(bias), Padding::Zero)?;
            g.reshape(g.permute(y, &[0, 2, 3, 1])?, &[b, h * w, c])
        }
    }
}
