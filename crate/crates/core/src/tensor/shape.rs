//! Shape arithmetic shared by forward and adjoint kernels.

use crate::{Error, Result};

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Trailing-aligned broadcast of two shapes.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast shape `out` (0 on broadcast axes).
pub fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// For every element of `out`, the flat index into a tensor of `shape`
/// broadcast against it.
pub fn broadcast_index_map(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let n = numel(out);
    let bs = broadcast_strides(shape, out);
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; out.len()];
    let mut idx = 0usize;
    for _ in 0..n {
        map.push(idx);
        for d in (0..out.len()).rev() {
            counter[d] += 1;
            idx += bs[d];
            if counter[d] < out[d] {
                break;
            }
            idx -= bs[d] * counter[d];
            counter[d] = 0;
        }
    }
    map
}

/// How the smaller operand of a binary op lines up with the output.
#[derive(Clone, Debug)]
pub enum BroadcastKind {
    Same,
    /// Operand repeats with period `len` (it is a trailing suffix of the output).
    Cyclic(usize),
    /// Operand index is `(i / inner) % len`: its non-unit extents form one
    /// contiguous run of the output's dims.
    Block { len: usize, inner: usize },
    General(Vec<usize>),
}

pub fn classify(shape: &[usize], out: &[usize]) -> BroadcastKind {
    if shape == out {
        return BroadcastKind::Same;
    }
    let trimmed: &[usize] = {
        let first = shape.iter().position(|&d| d != 1).unwrap_or(shape.len());
        &shape[first..]
    };
    if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == *trimmed {
        return BroadcastKind::Cyclic(numel(trimmed).max(1));
    }
    let lead = out.len() - shape.len().min(out.len());
    if shape.len() <= out.len() {
        let dims: Vec<usize> = (0..out.len()).map(|d| if d < lead { 1 } else { shape[d - lead] }).collect();
        if let (Some(f), Some(l)) = (dims.iter().position(|&d| d != 1), dims.iter().rposition(|&d| d != 1)) {
            if dims[f..=l] == out[f..=l] {
                return BroadcastKind::Block {
                    len: numel(&out[f..=l]),
                    inner: numel(&out[l + 1..]),
                };
            }
        }
    }
    BroadcastKind::General(broadcast_index_map(shape, out))
}

impl BroadcastKind {
    #[inline]
    pub fn index(&self, i: usize) -> usize {
        match self {
            BroadcastKind::Same => i,
            BroadcastKind::Cyclic(len) => i % len,
            BroadcastKind::Block { len, inner } => (i / inner) % len,
            BroadcastKind::General(map) => map[i],
        }
    }

    /// Calls `f(i, self.index(i))` for every output index `i < n`, in order.
    #[inline]
    pub fn for_each(&self, n: usize, mut f: impl FnMut(usize, usize)) {
        match self {
            BroadcastKind::Same => (0..n).for_each(|i| f(i, i)),
            BroadcastKind::Cyclic(len) => {
                let mut base = 0;
                while base < n {
                    for j in 0..*len {
                        f(base + j, j);
                    }
                    base += len;
                }
            }
            BroadcastKind::Block { len, inner } => {
                let mut i = 0;
                while i < n {
                    for j in 0..*len {
                        for _ in 0..*inner {
                            f(i, j);
                            i += 1;
                        }
                    }
                }
            }
            BroadcastKind::General(map) => map.iter().take(n).enumerate().for_each(|(i, &j)| f(i, j)),
        }
    }
}

pub fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(Error::InvalidAxis { axis, rank })
    } else {
        Ok(())
    }
}
