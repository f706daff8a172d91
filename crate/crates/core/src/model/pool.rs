use crate::real::Real;
use crate::{Error, Result};

/// Overlap weights of `s` equal output bins over `n` input cells: entry
/// `[o][i]` is the fraction of output bin `o` covered by cell `i`.
fn bin_weights(n: usize, s: usize) -> Vec<Vec<f64>> {
    let width = n as f64 / s as f64;
    (0..s)
        .map(|o| {
            let (lo, hi) = (o as f64 * width, (o + 1) as f64 * width);
            (0..n)
                .map(|i| {
                    let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                    overlap / width
                })
                .collect()
        })
        .collect()
}

/// Area-weighted average pooling of `[b, h, w, c]` features to `[b, s, s, c]`.
/// Bins that straddle a cell boundary take the covered fraction of that cell.
pub fn avg_pool_grid<T: Real>(features: &[T], b: usize, h: usize, w: usize, c: usize, s: usize) -> Result<Vec<T>> {
    if s == 0 {
        return Err(Error::invalid("target grid size must be positive"));
    }
    if s > h || s > w {
        return Err(Error::invalid(format!("cannot pool a {h}x{w} grid up to {s}x{s}")));
    }
    if features.len() != b * h * w * c {
        return Err(Error::ShapeMismatch {
            op: "avg_pool_grid",
            lhs: vec![features.len()],
            rhs: vec![b, h, w, c],
        });
    }
    if s == h && s == w {
        return Ok(features.to_vec());
    }
    let wr = bin_weights(h, s);
    let wc = bin_weights(w, s);
    let mut out = vec![T::zero(); b * s * s * c];
    let mut acc = vec![0.0f64; c];
    for n in 0..b {
        for oi in 0..s {
            for oj in 0..s {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for (i, wi) in wr[oi].iter().enumerate().filter(|(_, w)| **w > 0.0) {
                    for (j, wj) in wc[oj].iter().enumerate().filter(|(_, w)| **w > 0.0) {
                        let base = ((n * h + i) * w + j) * c;
                        for (a, v) in acc.iter_mut().zip(&features[base..base + c]) {
                            *a += wi * wj * v.f64();
                        }
                    }
                }
                let base = ((n * s + oi) * s + oj) * c;
                for (o, a) in out[base..base + c].iter_mut().zip(&acc) {
                    *o = T::c(*a);
                }
            }
        }
    }
    Ok(out)
}
