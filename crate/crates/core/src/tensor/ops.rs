//! Forward kernels. Every method validates shapes, computes the value and
//! records what the adjoint needs.

use std::sync::Arc;

use super::shape::{self, broadcast_shape, check_axis, classify, numel, strides};
use super::{conv, Op, Tape, Var};
use crate::real::{gemm, MatRef, Real};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// Halo handling for [`Tape::conv2d`]. Padding width is always `(k - 1) / 2`.
#[derive(Clone, Copy, Debug)]
pub enum Padding {
    Zero,
    /// Halo of input channel `i` is filled with `values[i]`; `values` is a
    /// `[c_in]` node and receives gradient from every halo tap.
    PerChannel(Var),
}

/// Batched GEMM layout: `a[.., m, k] x b[.., k, n]` with broadcast batch axes.
#[derive(Clone, Debug)]
pub(crate) struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    /// (offset into a, offset into b, offset into out) for every batch entry.
    batches: Vec<(usize, usize, usize)>,
    /// Whole batch collapses to one GEMM because `b` has no batch axes.
    flat_rows: Option<usize>,
}

impl MatMulPlan {
    pub(crate) fn grad_lhs<T: Real>(&self, g: &[T], b: &[T], acc: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if let Some(rows) = self.flat_rows {
            gemm(
                rows,
                n,
                k,
                g,
                MatRef::row_major(0, n),
                b,
                MatRef::row_major(0, n).transposed(),
                T::one(),
                acc,
                MatRef::row_major(0, k),
            );
            return;
        }
        for &(oa, ob, oc) in &self.batches {
            gemm(
                m,
                n,
                k,
                g,
                MatRef::row_major(oc, n),
                b,
                MatRef::row_major(ob, n).transposed(),
                T::one(),
                acc,
                MatRef::row_major(oa, k),
            );
        }
    }

    pub(crate) fn grad_rhs<T: Real>(&self, g: &[T], a: &[T], acc: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if let Some(rows) = self.flat_rows {
            gemm(
                k,
                rows,
                n,
                a,
                MatRef::row_major(0, k).transposed(),
                g,
                MatRef::row_major(0, n),
                T::one(),
                acc,
                MatRef::row_major(0, n),
            );
            return;
        }
        for &(oa, ob, oc) in &self.batches {
            gemm(
                k,
                m,
                n,
                a,
                MatRef::row_major(oa, k).transposed(),
                g,
                MatRef::row_major(oc, n),
                T::one(),
                acc,
                MatRef::row_major(ob, n),
            );
        }
    }
}

impl<T: Real> Tape<T> {
    fn binary(
        &self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        make: impl FnOnce(Var, Var, shape::BroadcastKind, shape::BroadcastKind) -> Op<T>,
    ) -> Result<Var> {
        self.ensure_live()?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = broadcast_shape(op, &sa, &sb)?;
        let (ka, kb) = (classify(&sa, &out), classify(&sb, &out));
        let (va, vb) = (self.value(a), self.value(b));
        let n = numel(&out);
        let value: Vec<T> = match (&ka, &kb) {
            (shape::BroadcastKind::Same, shape::BroadcastKind::Same) => {
                va.iter().zip(vb.iter()).map(|(x, y)| f(*x, *y)).collect()
            }
            (shape::BroadcastKind::Same, shape::BroadcastKind::Cyclic(len)) => {
                let mut out = Vec::with_capacity(n);
                for chunk in va.chunks(*len) {
                    out.extend(chunk.iter().zip(vb.iter()).map(|(x, y)| f(*x, *y)));
                }
                out
            }
            (shape::BroadcastKind::Cyclic(len), shape::BroadcastKind::Same) => {
                let mut out = Vec::with_capacity(n);
                for chunk in vb.chunks(*len) {
                    out.extend(va.iter().zip(chunk.iter()).map(|(x, y)| f(*x, *y)));
                }
                out
            }
            (shape::BroadcastKind::Same, k) => {
                let mut out = Vec::with_capacity(n);
                k.for_each(n, |i, j| out.push(f(va[i], vb[j])));
                out
            }
            (k, shape::BroadcastKind::Same) => {
                let mut out = Vec::with_capacity(n);
                k.for_each(n, |i, j| out.push(f(va[j], vb[i])));
                out
            }
            _ => (0..n).map(|i| f(va[ka.index(i)], vb[kb.index(i)])).collect(),
        };
        Ok(self.push(out, value, make(a, b, ka, kb)))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    /// `x * c` for a compile-time-constant scalar.
    pub fn scale(&self, x: Var, c: T) -> Result<Var> {
        self.ensure_live()?;
        let value = self.value(x).iter().map(|v| *v * c).collect();
        Ok(self.push(self.shape(x), value, Op::Scale(x, c)))
    }

    fn unary(&self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        self.ensure_live()?;
        let value = self.value(x).iter().map(|v| f(*v)).collect();
        Ok(self.push(self.shape(x), value, op))
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.exp(), Op::Exp(x))
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).iter().find(|v| **v <= T::zero()) {
            return Err(Error::LogNonPositive(bad.f64()));
        }
        self.unary(x, |v| v.ln(), Op::Log(x))
    }

    /// `a[.., m, k] x b[.., k, n]`; batch axes broadcast, `b` may be a plain matrix.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.ensure_live()?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let batch = broadcast_shape("matmul", ba, bb).map_err(|_| mismatch())?;
        let nb = numel(&batch);
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);
        let (va, vb) = (self.value(a), self.value(b));
        let mut value = vec![T::zero(); nb * m * n];

        let flat_rows = if bb.iter().all(|d| *d == 1) {
            Some(nb * m)
        } else {
            None
        };
        let batches: Vec<(usize, usize, usize)> = if flat_rows.is_some() && numel(ba) == nb {
            Vec::new()
        } else {
            let ia = shape::broadcast_index_map(ba, &batch);
            let ib = shape::broadcast_index_map(bb, &batch);
            (0..nb)
                .map(|i| (ia[i] * m * k, ib[i] * k * n, i * m * n))
                .collect()
        };
        let flat_rows = if batches.is_empty() { flat_rows } else { None };
        let plan = MatMulPlan {
            m,
            k,
            n,
            batches,
            flat_rows,
        };
        if let Some(rows) = plan.flat_rows {
            gemm(
                rows,
                k,
                n,
                &va,
                MatRef::row_major(0, k),
                &vb,
                MatRef::row_major(0, n),
                T::zero(),
                &mut value,
                MatRef::row_major(0, n),
            );
        } else {
            for &(oa, ob, oc) in &plan.batches {
                gemm(
                    m,
                    k,
                    n,
                    &va,
                    MatRef::row_major(oa, k),
                    &vb,
                    MatRef::row_major(ob, n),
                    T::zero(),
                    &mut value,
                    MatRef::row_major(oc, n),
                );
            }
        }
        Ok(self.push(out_shape, value, Op::MatMul { a, b, plan }))
    }

    /// Numerically stable softmax along `axis` (row maximum subtracted first).
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_masked(x, axis, None)
    }

    /// Softmax along `axis`. With a mask (last axis only), `mask[q * len + j]`
    /// false forces weight exactly 0; the mask covers the trailing two axes
    /// and broadcasts over the leading ones.
    pub fn softmax_masked(&self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        self.ensure_live()?;
        let s = self.shape(x);
        check_axis(axis, s.len())?;
        let len = s[axis];
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let rows_per_mask = if let Some(m) = mask {
            if axis + 1 != s.len() || s.len() < 2 || m.len() != s[s.len() - 2] * len {
                return Err(Error::invalid(format!(
                    "softmax mask of length {} does not fit shape {:?}",
                    m.len(),
                    s
                )));
            }
            s[s.len() - 2]
        } else {
            1
        };
        let v = self.value(x);
        let mut out = vec![T::zero(); v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let keep = |j: usize| match mask {
                    Some(m) => m[(o % rows_per_mask) * len + j],
                    None => true,
                };
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    if keep(j) {
                        mx = mx.max(v[base + j * inner]);
                    }
                }
                if mx == T::neg_infinity() {
                    continue; // fully masked row stays zero
                }
                let mut total = T::zero();
                for j in 0..len {
                    if keep(j) {
                        let e = (v[base + j * inner] - mx).exp();
                        out[base + j * inner] = e;
                        total += e;
                    }
                }
                for j in 0..len {
                    out[base + j * inner] /= total;
                }
            }
        }
        Ok(self.push(
            s,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Reduces over `axes` (removed from the result shape).
    pub fn reduce(&self, kind: ReduceKind, x: Var, axes: &[usize]) -> Result<Var> {
        self.ensure_live()?;
        let s = self.shape(x);
        for a in axes {
            check_axis(*a, s.len())?;
        }
        let count: usize = axes.iter().map(|a| s[*a]).product();
        if count == 0 || numel(&s) == 0 {
            return Err(Error::EmptyReduction);
        }
        let keep: Vec<usize> = (0..s.len()).filter(|d| !axes.contains(d)).collect();
        let out_shape: Vec<usize> = keep.iter().map(|d| s[*d]).collect();
        let out_strides = strides(&out_shape);
        // output index for every input element
        let n = numel(&s);
        let mut out_index = Vec::with_capacity(n);
        let mut counter = vec![0usize; s.len()];
        for _ in 0..n {
            let mut o = 0;
            for (j, d) in keep.iter().enumerate() {
                o += counter[*d] * out_strides[j];
            }
            out_index.push(o);
            for d in (0..s.len()).rev() {
                counter[d] += 1;
                if counter[d] < s[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        let v = self.value(x);
        let m = numel(&out_shape);
        let mut out = vec![T::zero(); m];
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for (i, o) in out_index.iter().enumerate() {
                    out[*o] += v[i];
                }
                if kind == ReduceKind::Mean {
                    let c = T::c(count as f64);
                    out.iter_mut().for_each(|x| *x /= c);
                }
            }
            ReduceKind::Max => {
                let mut seen = vec![false; m];
                argmax = vec![0; m];
                for (i, o) in out_index.iter().enumerate() {
                    if !seen[*o] || v[i] > out[*o] {
                        seen[*o] = true;
                        out[*o] = v[i];
                        argmax[*o] = i;
                    }
                }
            }
        }
        Ok(self.push(
            out_shape,
            out,
            Op::Reduce {
                x,
                kind,
                out_index,
                count,
                argmax,
            },
        ))
    }

    pub fn sum_all(&self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(ReduceKind::Sum, x, &axes)
    }

    pub fn mean_all(&self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce(ReduceKind::Mean, x, &axes)
    }

    pub fn reshape(&self, x: Var, new_shape: &[usize]) -> Result<Var> {
        self.ensure_live()?;
        let s = self.shape(x);
        if numel(&s) != numel(new_shape) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: s,
                rhs: new_shape.to_vec(),
            });
        }
        Ok(self.push_arc(new_shape.to_vec(), self.value(x), Op::Reshape(x)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        self.ensure_live()?;
        let s = self.shape(x);
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..s.len()).collect::<Vec<_>>() {
            return Err(Error::invalid(format!("bad permutation {perm:?} for rank {}", s.len())));
        }
        let out_shape: Vec<usize> = perm.iter().map(|p| s[*p]).collect();
        let in_strides = strides(&s);
        let n = numel(&s);
        let mut src_index = Vec::with_capacity(n);
        let mut counter = vec![0usize; s.len()];
        let mut idx = 0usize;
        for _ in 0..n {
            src_index.push(idx);
            for d in (0..s.len()).rev() {
                counter[d] += 1;
                idx += in_strides[perm[d]];
                if counter[d] < out_shape[d] {
                    break;
                }
                idx -= in_strides[perm[d]] * counter[d];
                counter[d] = 0;
            }
        }
        let v = self.value(x);
        let value = src_index.iter().map(|i| v[*i]).collect();
        Ok(self.push(out_shape, value, Op::Permute { x, src_index }))
    }

    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        self.ensure_live()?;
        let first = inputs
            .first()
            .map(|v| self.shape(*v))
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        check_axis(axis, first.len())?;
        let mut widths = Vec::with_capacity(inputs.len());
        let mut total_axis = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s,
                });
            }
            total_axis += s[axis];
            widths.push(s[axis..].iter().product::<usize>());
        }
        let outer: usize = first[..axis].iter().product();
        let total: usize = widths.iter().sum();
        let mut value = vec![T::zero(); outer * total];
        let mut offset = 0;
        for (v, w) in inputs.iter().zip(&widths) {
            let src = self.value(*v);
            for o in 0..outer {
                value[o * total + offset..o * total + offset + w]
                    .copy_from_slice(&src[o * w..(o + 1) * w]);
            }
            offset += w;
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total_axis;
        Ok(self.push(
            out_shape,
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                widths,
            },
        ))
    }

    /// Half-open slice `start..end` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.ensure_live()?;
        let s = self.shape(x);
        check_axis(axis, s.len())?;
        if start > end || end > s[axis] {
            return Err(Error::OutOfRange {
                start,
                end,
                extent: s[axis],
            });
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let in_width = s[axis] * inner;
        let width = (end - start) * inner;
        let src = self.value(x);
        let mut value = Vec::with_capacity(outer * width);
        for o in 0..outer {
            let base = o * in_width + start * inner;
            value.extend_from_slice(&src[base..base + width]);
        }
        let mut out_shape = s.clone();
        out_shape[axis] = end - start;
        Ok(self.push(
            out_shape,
            value,
            Op::Slice {
                x,
                outer,
                in_width,
                start: start * inner,
                width,
            },
        ))
    }

    /// `out[i] = src[index[i]]` over flat storage; adjoint scatter-adds.
    pub fn gather(&self, src: Var, index: Arc<Vec<usize>>, out_shape: &[usize]) -> Result<Var> {
        self.ensure_live()?;
        if numel(out_shape) != index.len() {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: out_shape.to_vec(),
                rhs: vec![index.len()],
            });
        }
        let v = self.value(src);
        if let Some(bad) = index.iter().find(|i| **i >= v.len()) {
            return Err(Error::OutOfRange {
                start: *bad,
                end: *bad + 1,
                extent: v.len(),
            });
        }
        let value = index.iter().map(|i| v[*i]).collect();
        Ok(self.push(out_shape.to_vec(), value, Op::Gather { src, index }))
    }

    /// Row lookup: `table[V, d]`, ids -> `[ids.len(), d]`.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::invalid("embedding table must be rank 2"));
        }
        let (rows, d) = (s[0], s[1]);
        if let Some(bad) = ids.iter().find(|i| **i >= rows) {
            return Err(Error::invalid(format!(
                "token id {bad} outside vocabulary of {rows}"
            )));
        }
        let index: Vec<usize> = ids.iter().flat_map(|i| (i * d)..(i + 1) * d).collect();
        self.gather(table, Arc::new(index), &[ids.len(), d])
    }

    pub fn conv2d(
        &self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: Padding,
    ) -> Result<Var> {
        self.ensure_live()?;
        conv::forward(self, x, kernel, bias, padding)
    }

    /// Normalizes the last axis to zero mean and unit (biased) variance.
    pub fn layer_norm_core(&self, x: Var, eps: f64) -> Result<Var> {
        self.ensure_live()?;
        let s = self.shape(x);
        let width = *s.last().ok_or_else(|| Error::invalid("layer norm of a scalar"))?;
        let v = self.value(x);
        let rows = v.len() / width.max(1);
        let mut xhat = vec![T::zero(); v.len()];
        let mut inv_std = Vec::with_capacity(rows);
        let n = T::c(width as f64);
        for r in 0..rows {
            let row = &v[r * width..(r + 1) * width];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|a| (*a - mean) * (*a - mean)).sum::<T>() / n;
            let is = T::one() / (var + T::c(eps)).sqrt();
            for (o, a) in xhat[r * width..(r + 1) * width].iter_mut().zip(row) {
                *o = (*a - mean) * is;
            }
            inv_std.push(is);
        }
        let value = xhat.clone();
        Ok(self.push(
            s,
            value,
            Op::LayerNorm {
                x,
                xhat,
                inv_std,
                width,
            },
        ))
    }

    /// Per-channel normalization of `[b, c, h, w]` over the batch and spatial
    /// axes with biased variance. Returns the normalized node plus the batch
    /// mean and variance per channel.
    pub fn channel_norm(&self, x: Var, eps: f64) -> Result<(Var, Vec<T>, Vec<T>)> {
        self.ensure_live()?;
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::invalid(format!("channel_norm expects [b,c,h,w], got {s:?}")));
        }
        let (batch, channels, spatial) = (s[0], s[1], s[2] * s[3]);
        if batch * spatial < 2 {
            return Err(Error::BatchNorm(
                "train mode needs at least two values per channel".into(),
            ));
        }
        let v = self.value(x);
        let n = T::c((batch * spatial) as f64);
        let mut means = vec![T::zero(); channels];
        let mut vars = vec![T::zero(); channels];
        let mut inv_std = vec![T::zero(); channels];
        let mut xhat = vec![T::zero(); v.len()];
        for c in 0..channels {
            let mut mean = T::zero();
            for b in 0..batch {
                let base = (b * channels + c) * spatial;
                mean += v[base..base + spatial].iter().copied().sum::<T>();
            }
            mean /= n;
            let mut var = T::zero();
            for b in 0..batch {
                let base = (b * channels + c) * spatial;
                var += v[base..base + spatial]
                    .iter()
                    .map(|a| (*a - mean) * (*a - mean))
                    .sum::<T>();
            }
            var /= n;
            let is = T::one() / (var + T::c(eps)).sqrt();
            for b in 0..batch {
                let base = (b * channels + c) * spatial;
                for k in base..base + spatial {
                    xhat[k] = (v[k] - mean) * is;
                }
            }
            means[c] = mean;
            vars[c] = var;
            inv_std[c] = is;
        }
        let value = xhat.clone();
        let out = self.push(
            s,
            value,
            Op::ChannelNorm {
                x,
                xhat,
                inv_std,
                batch,
                channels,
                spatial,
            },
        );
        Ok((out, means, vars))
    }

    /// `-sum_r weights[r] * log softmax(logits[r])[targets[r]]` over the rows
    /// of `logits[.., classes]`; a scalar.
    pub fn weighted_nll(&self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        self.ensure_live()?;
        let s = self.shape(logits);
        let classes = *s.last().ok_or_else(|| Error::invalid("nll of a scalar"))?;
        let v = self.value(logits);
        let rows = v.len() / classes.max(1);
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "nll",
                lhs: s,
                rhs: vec![targets.len(), weights.len()],
            });
        }
        if let Some(bad) = targets.iter().find(|t| **t >= classes) {
            return Err(Error::invalid(format!("target {bad} outside {classes} classes")));
        }
        let mut probs = vec![T::zero(); v.len()];
        let mut total = T::zero();
        for r in 0..rows {
            let row = &v[r * classes..(r + 1) * classes];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, a) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (*a - mx).exp();
                z += *p;
            }
            for p in probs[r * classes..(r + 1) * classes].iter_mut() {
                *p /= z;
            }
            if weights[r] != T::zero() {
                let logp = row[targets[r]] - mx - z.ln();
                total -= weights[r] * logp;
            }
        }
        Ok(self.push(
            vec![],
            vec![total],
            Op::Nll {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                classes,
            },
        ))
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
