//! Dense tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! return lightweight [`Var`] handles; [`Tape::backward`] replays adjoints in
//! reverse execution order and leaves gradients on every reachable node that
//! requires them. A tape is single use: after `backward` or `clear` it is dead.

mod conv;
mod ops;
pub mod shape;

use std::cell::{Cell, RefCell};
use std::sync::Arc;

pub use ops::{Padding, ReduceKind};

use crate::real::Real;
use crate::{Error, Result};
use shape::{numel, BroadcastKind};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Test hook that perturbs one adjoint rule, used as a negative control for
/// gradient checking.
#[doc(hidden)]
#[derive(Clone, Copy, Debug)]
pub enum AdjointFault {
    ScaleRelu(f64),
}

pub(crate) struct Node<T: Real> {
    shape: Vec<usize>,
    value: Arc<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

pub(crate) enum Op<T: Real> {
    Leaf,
    Add(Var, Var, BroadcastKind, BroadcastKind),
    Sub(Var, Var, BroadcastKind, BroadcastKind),
    Mul(Var, Var, BroadcastKind, BroadcastKind),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    MatMul {
        a: Var,
        b: Var,
        plan: ops::MatMulPlan,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reduce {
        x: Var,
        kind: ReduceKind,
        out_index: Vec<usize>,
        count: usize,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        src_index: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        in_width: usize,
        start: usize,
        width: usize,
    },
    Gather {
        src: Var,
        index: Arc<Vec<usize>>,
    },
    Conv2d(Box<conv::ConvSaved<T>>),
    LayerNorm {
        x: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        width: usize,
    },
    ChannelNorm {
        x: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch: usize,
        channels: usize,
        spatial: usize,
    },
    Nll {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
        classes: usize,
    },
}

pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Vec<T>>>>,
    live: Cell<bool>,
    fault: Cell<Option<AdjointFault>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            live: Cell::new(true),
            fault: Cell::new(None),
        }
    }

    #[doc(hidden)]
    pub fn inject_adjoint_fault(&self, fault: Option<AdjointFault>) {
        self.fault.set(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_live(&self) -> bool {
        self.live.get()
    }

    fn ensure_live(&self) -> Result<()> {
        if self.live.get() {
            Ok(())
        } else {
            Err(Error::DeadTape)
        }
    }

    pub(crate) fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Var {
        self.push_arc(shape, Arc::new(value), op)
    }

    pub(crate) fn push_arc(&self, shape: Vec<usize>, value: Arc<Vec<T>>, op: Op<T>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|v| nodes[v.0].requires_grad)
        };
        let op = if requires_grad { op } else { op.detached() };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(nodes.len() - 1)
    }

    /// Creates a leaf. `data.len()` must equal the product of `shape`.
    pub fn leaf(&self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Var> {
        self.leaf_shared(shape, Arc::new(data), requires_grad)
    }

    /// Leaf that shares storage with the caller (used to bind parameters
    /// without copying them onto every tape).
    pub fn leaf_shared(&self, shape: &[usize], data: Arc<Vec<T>>, requires_grad: bool) -> Result<Var> {
        self.ensure_live()?;
        if numel(shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape: shape.to_vec(),
            value: data,
            requires_grad,
            op: Op::Leaf,
        });
        Ok(Var(nodes.len() - 1))
    }

    pub fn constant(&self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        self.leaf(shape, data, false)
    }

    pub fn scalar_constant(&self, x: T) -> Result<Var> {
        self.leaf(&[], vec![x], false)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Arc<Vec<T>> {
        Arc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn to_vec(&self, v: Var) -> Vec<T> {
        self.nodes.borrow()[v.0].value.as_ref().clone()
    }

    /// Value of a single-element node.
    pub fn item(&self, v: Var) -> T {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.0];
        assert_eq!(node.value.len(), 1, "item() on non-scalar {:?}", node.shape);
        node.value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Gradient accumulated by the last backward pass, if the node received one.
    pub fn grad(&self, v: Var) -> Option<Vec<T>> {
        self.grads.borrow().get(v.0).and_then(|g| g.clone())
    }

    /// Releases all values and saved activations; the tape becomes dead.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
        self.grads.borrow_mut().clear();
        self.live.set(false);
    }

    /// Errors if any value in `v` is NaN or infinite.
    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Runs reverse-mode differentiation from a scalar root.
    pub fn backward(&self, root: Var) -> Result<()> {
        self.ensure_live()?;
        let nodes = self.nodes.borrow();
        let root_node = nodes.get(root.0).ok_or(Error::DeadTape)?;
        if root_node.value.len() != 1 {
            return Err(Error::NonScalarRoot(root_node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for id in (0..=root.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.adjoint(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        drop(nodes);
        *self.grads.borrow_mut() = grads;
        self.live.set(false);
        Ok(())
    }

    fn adjoint(&self, nodes: &[Node<T>], node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let needs = |v: &Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, ka, kb) => {
                if needs(a) {
                    reduce_grad(grads, nodes, *a, g, ka, T::one());
                }
                if needs(b) {
                    reduce_grad(grads, nodes, *b, g, kb, T::one());
                }
            }
            Op::Sub(a, b, ka, kb) => {
                if needs(a) {
                    reduce_grad(grads, nodes, *a, g, ka, T::one());
                }
                if needs(b) {
                    reduce_grad(grads, nodes, *b, g, kb, -T::one());
                }
            }
            Op::Mul(a, b, BroadcastKind::Same, BroadcastKind::Same) => {
                let (va, vb) = (nodes[a.0].value.clone(), nodes[b.0].value.clone());
                if needs(a) {
                    add_grad(grads, *a, g.iter().zip(vb.iter()).map(|(gi, y)| *gi * *y));
                }
                if needs(b) {
                    add_grad(grads, *b, g.iter().zip(va.iter()).map(|(gi, x)| *gi * *x));
                }
            }
            Op::Mul(a, b, ka, kb) => {
                let (va, vb) = (nodes[a.0].value.clone(), nodes[b.0].value.clone());
                if needs(a) {
                    let acc = acc_buf(grads, nodes, *a);
                    ka.for_each(g.len(), |i, j| acc[j] += g[i] * vb[kb.index(i)]);
                }
                if needs(b) {
                    let acc = acc_buf(grads, nodes, *b);
                    kb.for_each(g.len(), |i, j| acc[j] += g[i] * va[ka.index(i)]);
                }
            }
            Op::Scale(x, c) => add_grad(grads, *x, g.iter().map(|gi| *gi * *c)),
            Op::Relu(x) => {
                let scale = match self.fault.get() {
                    Some(AdjointFault::ScaleRelu(s)) => T::c(s),
                    None => T::one(),
                };
                let xv = nodes[x.0].value.clone();
                add_grad(
                    grads,
                    *x,
                    g.iter().zip(xv.iter()).map(|(gi, xi)| if *xi > T::zero() { *gi * scale } else { T::zero() }),
                );
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                add_grad(grads, *x, g.iter().zip(y.iter()).map(|(gi, yi)| *gi * *yi * (T::one() - *yi)));
            }
            Op::Exp(x) => {
                let y = &node.value;
                add_grad(grads, *x, g.iter().zip(y.iter()).map(|(gi, yi)| *gi * *yi));
            }
            Op::Log(x) => {
                let xv = nodes[x.0].value.clone();
                let acc = acc_buf(grads, nodes, *x);
                for ((a, gi), xi) in acc.iter_mut().zip(g).zip(xv.iter()) {
                    *a += *gi / *xi;
                }
            }
            Op::MatMul { a, b, plan } => {
                let (va, vb) = (nodes[a.0].value.clone(), nodes[b.0].value.clone());
                if needs(a) {
                    let acc = acc_buf(grads, nodes, *a);
                    plan.grad_lhs(g, &vb, acc);
                }
                if needs(b) {
                    let acc = acc_buf(grads, nodes, *b);
                    plan.grad_rhs(g, &va, acc);
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = &node.value;
                let acc = acc_buf(grads, nodes, *x);
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for j in 0..*len {
                            let k = base + j * inner;
                            dot += g[k] * y[k];
                        }
                        for j in 0..*len {
                            let k = base + j * inner;
                            acc[k] += y[k] * (g[k] - dot);
                        }
                    }
                }
            }
            Op::Reduce {
                x,
                kind,
                out_index,
                count,
                argmax,
            } => {
                let acc = acc_buf(grads, nodes, *x);
                match kind {
                    ReduceKind::Sum => {
                        for (i, o) in out_index.iter().enumerate() {
                            acc[i] += g[*o];
                        }
                    }
                    ReduceKind::Mean => {
                        let inv = T::one() / T::c(*count as f64);
                        for (i, o) in out_index.iter().enumerate() {
                            acc[i] += g[*o] * inv;
                        }
                    }
                    ReduceKind::Max => {
                        for (o, i) in argmax.iter().enumerate() {
                            acc[*i] += g[o];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                let acc = acc_buf(grads, nodes, *x);
                for (a, gi) in acc.iter_mut().zip(g) {
                    *a += *gi;
                }
            }
            Op::Permute { x, src_index } => {
                let acc = acc_buf(grads, nodes, *x);
                for (o, s) in src_index.iter().enumerate() {
                    acc[*s] += g[o];
                }
            }
            Op::Concat {
                inputs,
                outer,
                widths,
            } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (v, w) in inputs.iter().zip(widths) {
                    if needs(v) {
                        let acc = acc_buf(grads, nodes, *v);
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + w];
                            for (a, s) in acc[o * w..(o + 1) * w].iter_mut().zip(src) {
                                *a += *s;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice {
                x,
                outer,
                in_width,
                start,
                width,
            } => {
                let acc = acc_buf(grads, nodes, *x);
                for o in 0..*outer {
                    let dst = &mut acc[o * in_width + start..o * in_width + start + width];
                    for (a, s) in dst.iter_mut().zip(&g[o * width..(o + 1) * width]) {
                        *a += *s;
                    }
                }
            }
            Op::Gather { src, index } => {
                let acc = acc_buf(grads, nodes, *src);
                for (o, s) in index.iter().enumerate() {
                    acc[*s] += g[o];
                }
            }
            Op::Conv2d(saved) => conv::adjoint(saved, nodes, g, grads),
            Op::LayerNorm {
                x,
                xhat,
                inv_std,
                width,
            } => {
                let acc = acc_buf(grads, nodes, *x);
                let n = T::c(*width as f64);
                for (r, is) in inv_std.iter().enumerate() {
                    let range = r * width..(r + 1) * width;
                    let (gr, xr) = (&g[range.clone()], &xhat[range.clone()]);
                    let mean_g = gr.iter().copied().sum::<T>() / n;
                    let mean_gx = gr.iter().zip(xr).map(|(a, b)| *a * *b).sum::<T>() / n;
                    for ((a, gi), xi) in acc[range].iter_mut().zip(gr).zip(xr) {
                        *a += *is * (*gi - mean_g - *xi * mean_gx);
                    }
                }
            }
            Op::ChannelNorm {
                x,
                xhat,
                inv_std,
                batch,
                channels,
                spatial,
            } => {
                let acc = acc_buf(grads, nodes, *x);
                let n = T::c((batch * spatial) as f64);
                for c in 0..*channels {
                    let mut mean_g = T::zero();
                    let mut mean_gx = T::zero();
                    for b in 0..*batch {
                        let base = (b * channels + c) * spatial;
                        for k in base..base + spatial {
                            mean_g += g[k];
                            mean_gx += g[k] * xhat[k];
                        }
                    }
                    mean_g /= n;
                    mean_gx /= n;
                    for b in 0..*batch {
                        let base = (b * channels + c) * spatial;
                        for k in base..base + spatial {
                            acc[k] += inv_std[c] * (g[k] - mean_g - xhat[k] * mean_gx);
                        }
                    }
                }
            }
            Op::Nll {
                logits,
                targets,
                weights,
                probs,
                classes,
            } => {
                let acc = acc_buf(grads, nodes, *logits);
                let g0 = g[0];
                for (r, (t, w)) in targets.iter().zip(weights).enumerate() {
                    if *w == T::zero() {
                        continue;
                    }
                    let row = r * classes;
                    for c in 0..*classes {
                        let onehot = if c == *t { T::one() } else { T::zero() };
                        acc[row + c] += g0 * *w * (probs[row + c] - onehot);
                    }
                }
            }
        }
    }
}

/// Gradient buffer for `v`, allocated on first use.
/// Adds an elementwise gradient, taking it as the buffer when `v` has none yet.
fn add_grad<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, terms: impl Iterator<Item = T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, t) in acc.iter_mut().zip(terms) {
                *a += t;
            }
        }
        slot => *slot = Some(terms.collect()),
    }
}

fn reduce_grad<T: Real>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var, g: &[T], kind: &BroadcastKind, sign: T) {
    if matches!(kind, BroadcastKind::Same) {
        add_grad(grads, v, g.iter().map(|gi| sign * *gi));
    } else {
        reduce_into(acc_buf(grads, nodes, v), g, kind, sign);
    }
}

/// `acc[k(i)] += sign * g[i]` for every output index `i`.
fn reduce_into<T: Real>(acc: &mut [T], g: &[T], kind: &BroadcastKind, sign: T) {
    match kind {
        BroadcastKind::Same => {
            for (a, gi) in acc.iter_mut().zip(g) {
                *a += sign * *gi;
            }
        }
        BroadcastKind::Cyclic(len) => {
            for chunk in g.chunks(*len) {
                for (a, gi) in acc.iter_mut().zip(chunk) {
                    *a += sign * *gi;
                }
            }
        }
        BroadcastKind::Block { len, inner } => {
            for outer in g.chunks(len * inner) {
                for (a, run) in acc.iter_mut().zip(outer.chunks(*inner)) {
                    let mut sum = T::zero();
                    for gi in run {
                        sum += *gi;
                    }
                    *a += sign * sum;
                }
            }
        }
        BroadcastKind::General(map) => {
            for (gi, j) in g.iter().zip(map) {
                acc[*j] += sign * *gi;
            }
        }
    }
}

fn acc_buf<'g, T: Real>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'g mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()])
}

impl<T: Real> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b, ..) | Op::Sub(a, b, ..) | Op::Mul(a, b, ..) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Reshape(x) => vec![*x],
            Op::Softmax { x, .. }
            | Op::Reduce { x, .. }
            | Op::Permute { x, .. }
            | Op::Slice { x, .. }
            | Op::LayerNorm { x, .. }
            | Op::ChannelNorm { x, .. } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Gather { src, .. } => vec![*src],
            Op::Conv2d(s) => s.inputs(),
            Op::Nll { logits, .. } => vec![*logits],
        }
    }

    /// Drops saved activations of nodes that will never see a gradient.
    fn detached(self) -> Self {
        match self {
            Op::Leaf => Op::Leaf,
            // keep the variant (for input bookkeeping) but free buffers
            Op::Conv2d(mut s) => {
                s.release();
                Op::Conv2d(s)
            }
            Op::LayerNorm { x, width, .. } => Op::LayerNorm {
                x,
                xhat: Vec::new(),
                inv_std: Vec::new(),
                width,
            },
            Op::ChannelNorm {
                x,
                batch,
                channels,
                spatial,
                ..
            } => Op::ChannelNorm {
                x,
                xhat: Vec::new(),
                inv_std: Vec::new(),
                batch,
                channels,
                spatial,
            },
            Op::Nll {
                logits, classes, ..
            } => Op::Nll {
                logits,
                targets: Vec::new(),
                weights: Vec::new(),
                probs: Vec::new(),
                classes,
            },
            other => other,
        }
    }
}
