//! Stride-1 "same" 2-D cross-correlation via im2col + GEMM.

use super::ops::Padding;
use super::{Node, Op, Tape, Var};
use crate::real::{gemm, MatRef, Real};
use crate::{Error, Result};

pub(crate) struct ConvSaved<T: Real> {
    x: Var,
    kernel: Var,
    bias: Option<Var>,
    pad: Option<Var>,
    cols: Vec<T>,
    dims: ConvDims,
}

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl ConvDims {
    fn taps(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn hw(&self) -> usize {
        self.h * self.w
    }
    fn pad(&self) -> isize {
        (self.k as isize - 1) / 2
    }
}

impl<T: Real> ConvSaved<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.x, self.kernel];
        v.extend(self.bias);
        v.extend(self.pad);
        v
    }

    pub(crate) fn release(&mut self) {
        self.cols = Vec::new();
    }
}

/// Source of every im2col entry of one image, row-major over (tap, position):
/// a non-negative offset into the image, or `-(channel + 1)` in the halo.
fn tap_map(d: &ConvDims) -> Vec<isize> {
    let (kk, hw, pad) = (d.k * d.k, d.hw(), d.pad());
    let mut map = Vec::with_capacity(d.taps() * hw);
    for r in 0..d.taps() {
        let (i, t) = (r / kk, r % kk);
        let (u, v) = ((t / d.k) as isize, (t % d.k) as isize);
        for y in 0..d.h as isize {
            for x in 0..d.w as isize {
                let (sy, sx) = (y + u - pad, x + v - pad);
                if sy < 0 || sx < 0 || sy >= d.h as isize || sx >= d.w as isize {
                    map.push(-(i as isize) - 1);
                } else {
                    map.push(((i * d.h) as isize + sy) * d.w as isize + sx);
                }
            }
        }
    }
    map
}

pub(crate) fn forward<T: Real>(
    tape: &Tape<T>,
    x: Var,
    kernel: Var,
    bias: Option<Var>,
    padding: Padding,
) -> Result<Var> {
    let xs = tape.shape(x);
    let ks = tape.shape(kernel);
    if xs.len() != 4 || ks.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: xs,
            rhs: ks,
        });
    }
    let (kh, kw) = (ks[2], ks[3]);
    if kh != kw || !(kh == 1 || kh == 3) {
        return Err(Error::UnsupportedKernel(kh, kw));
    }
    if ks[1] != xs[1] {
        return Err(Error::ShapeMismatch {
            op: "conv2d channels",
            lhs: xs,
            rhs: ks,
        });
    }
    let d = ConvDims {
        batch: xs[0],
        cin: xs[1],
        cout: ks[0],
        h: xs[2],
        w: xs[3],
        k: kh,
    };
    if let Some(b) = bias {
        if tape.shape(b) != [d.cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![d.cout],
                rhs: tape.shape(b),
            });
        }
    }
    let pad_var = match padding {
        Padding::Zero => None,
        Padding::PerChannel(v) => {
            if tape.shape(v) != [d.cin] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d padding",
                    lhs: vec![d.cin],
                    rhs: tape.shape(v),
                });
            }
            Some(v)
        }
    };
    let xv = tape.value(x);
    let pad_values: Vec<T> = match pad_var {
        Some(v) => tape.to_vec(v),
        None => vec![T::zero(); d.cin],
    };
    let (taps, hw) = (d.taps(), d.hw());
    let map = tap_map(&d);
    let (img, wide) = (d.cin * hw, d.batch * hw);
    // cols is [taps, batch * hw] so one product covers the whole batch
    let mut cols = vec![T::zero(); taps * wide];
    for b in 0..d.batch {
        let xb = &xv[b * img..(b + 1) * img];
        for r in 0..taps {
            let row = &mut cols[r * wide + b * hw..r * wide + (b + 1) * hw];
            for (c, &m) in row.iter_mut().zip(&map[r * hw..(r + 1) * hw]) {
                *c = if m >= 0 { xb[m as usize] } else { pad_values[(-m - 1) as usize] };
            }
        }
    }
    let kv = tape.value(kernel);
    let mut flat = vec![T::zero(); d.cout * wide];
    gemm(
        d.cout,
        taps,
        wide,
        &kv,
        MatRef::row_major(0, taps),
        &cols,
        MatRef::row_major(0, wide),
        T::zero(),
        &mut flat,
        MatRef::row_major(0, wide),
    );
    let mut out = vec![T::zero(); d.batch * d.cout * hw];
    for b in 0..d.batch {
        for o in 0..d.cout {
            out[(b * d.cout + o) * hw..(b * d.cout + o + 1) * hw].copy_from_slice(&flat[o * wide + b * hw..o * wide + (b + 1) * hw]);
        }
    }
    if let Some(bv) = bias {
        let bv = tape.value(bv);
        for b in 0..d.batch {
            for o in 0..d.cout {
                let base = (b * d.cout + o) * hw;
                out[base..base + hw].iter_mut().for_each(|v| *v += bv[o]);
            }
        }
    }
    let saved = ConvSaved {
        x,
        kernel,
        bias,
        pad: pad_var,
        cols,
        dims: d,
    };
    Ok(tape.push(
        vec![d.batch, d.cout, d.h, d.w],
        out,
        Op::Conv2d(Box::new(saved)),
    ))
}

pub(crate) fn adjoint<T: Real>(
    s: &ConvSaved<T>,
    nodes: &[Node<T>],
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let d = s.dims;
    let (taps, hw) = (d.taps(), d.hw());
    let wide = d.batch * hw;
    let needs = |v: Var| nodes[v.0].requires_grad;
    // g regrouped as [cout, batch * hw] to match the column layout
    let mut gw = vec![T::zero(); d.cout * wide];
    for b in 0..d.batch {
        for o in 0..d.cout {
            gw[o * wide + b * hw..o * wide + (b + 1) * hw].copy_from_slice(&g[(b * d.cout + o) * hw..(b * d.cout + o + 1) * hw]);
        }
    }
    if needs(s.kernel) {
        let acc = super::acc_buf(grads, nodes, s.kernel);
        gemm(
            d.cout,
            wide,
            taps,
            &gw,
            MatRef::row_major(0, wide),
            &s.cols,
            MatRef::row_major(0, wide).transposed(),
            T::one(),
            acc,
            MatRef::row_major(0, taps),
        );
    }
    if let Some(bias) = s.bias.filter(|v| needs(*v)) {
        let acc = super::acc_buf(grads, nodes, bias);
        for (o, a) in acc.iter_mut().enumerate() {
            *a += gw[o * wide..(o + 1) * wide].iter().copied().sum::<T>();
        }
    }
    let need_x = needs(s.x);
    let need_pad = s.pad.map(needs).unwrap_or(false);
    if !(need_x || need_pad) {
        return;
    }
    let kv = nodes[s.kernel.0].value.clone();
    let mut dcol = vec![T::zero(); taps * wide];
    gemm(
        taps,
        d.cout,
        wide,
        &kv,
        MatRef::row_major(0, taps).transposed(),
        &gw,
        MatRef::row_major(0, wide),
        T::zero(),
        &mut dcol,
        MatRef::row_major(0, wide),
    );
    let mut dx = if need_x {
        Some(vec![T::zero(); d.batch * d.cin * hw])
    } else {
        None
    };
    let mut dpad = vec![T::zero(); d.cin];
    let map = tap_map(&d);
    let img = d.cin * hw;
    for b in 0..d.batch {
        for r in 0..taps {
            let row = &dcol[r * wide + b * hw..r * wide + (b + 1) * hw];
            for (&m, &v) in map[r * hw..(r + 1) * hw].iter().zip(row) {
                if m >= 0 {
                    if let Some(dx) = dx.as_mut() {
                        dx[b * img + m as usize] += v;
                    }
                } else {
                    dpad[(-m - 1) as usize] += v;
                }
            }
        }
    }
    if let Some(dx) = dx {
        let acc = super::acc_buf(grads, nodes, s.x);
        for (a, v) in acc.iter_mut().zip(dx) {
            *a += v;
        }
    }
    if let Some(pad) = s.pad.filter(|_| need_pad) {
        let acc = super::acc_buf(grads, nodes, pad);
        for (a, v) in acc.iter_mut().zip(dpad) {
            *a += v;
        }
    }
}
