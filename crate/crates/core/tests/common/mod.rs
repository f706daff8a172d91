#![allow(dead_code)]

use lstnet::params::{Graph, Mode, ParamStore};
use lstnet::rng::SplitMix64;
use lstnet::{Result, Tape, Var};

pub fn rand_vec(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

/// Central finite differences of a scalar graph built from `inputs`,
/// compared element-wise with the tape's analytic gradient.
/// Returns the worst relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn fd_max_rel_err(
    shapes: &[Vec<usize>],
    inputs: &[Vec<f64>],
    h: f64,
    floor: f64,
    build: impl Fn(&Tape<f64>, &[Var]) -> Result<Var>,
) -> f64 {
    let eval = |vals: &[Vec<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = shapes
            .iter()
            .zip(vals)
            .map(|(s, v)| tape.leaf(s, v.clone(), false).unwrap())
            .collect();
        let out = build(&tape, &vars).unwrap();
        tape.item(out)
    };
    let tape = Tape::new();
    let vars: Vec<Var> = shapes
        .iter()
        .zip(inputs)
        .map(|(s, v)| tape.leaf(s, v.clone(), true).unwrap())
        .collect();
    let out = build(&tape, &vars).unwrap();
    tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k][i] += h;
            let mut minus = inputs.to_vec();
            minus[k][i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
    }
    worst
}

/// Quadruple-loop "same" cross-correlation, independent of the im2col path.
pub fn conv2d_loops(
    x: &[f64],
    xs: [usize; 4],
    k: &[f64],
    ks: [usize; 4],
    bias: Option<&[f64]>,
    pad_values: Option<&[f64]>,
) -> Vec<f64> {
    let [b, cin, h, w] = xs;
    let [cout, _, kh, kw] = ks;
    let p = (kh as isize - 1) / 2;
    let mut out = vec![0.0; b * cout * h * w];
    for n in 0..b {
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias.map(|bb| bb[o]).unwrap_or(0.0);
                    for i in 0..cin {
                        for u in 0..kh {
                            for v in 0..kw {
                                let sy = y as isize + u as isize - p;
                                let sx = xx as isize + v as isize - p;
                                let val = if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize
                                {
                                    pad_values.map(|pv| pv[i]).unwrap_or(0.0)
                                } else {
                                    x[((n * cin + i) * h + sy as usize) * w + sx as usize]
                                };
                                acc += k[((o * cin + i) * kh + u) * kw + v] * val;
                            }
                        }
                    }
                    out[((n * cout + o) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    out
}

/// Finite-difference check over named parameters of a store. Up to
/// `per_param` coordinates of every trainable entry are probed (train-mode
/// graph, no dropout). Returns the worst relative error.
pub fn param_fd_max_rel_err(
    store: &ParamStore<f64>,
    h: f64,
    floor: f64,
    per_param: usize,
    build: impl Fn(&Graph<f64>) -> Result<Var>,
) -> f64 {
    let eval = |s: &ParamStore<f64>| -> f64 {
        let tape = Tape::new();
        let g = Graph::new(&tape, s, Mode::Train, false);
        let out = build(&g).unwrap();
        tape.item(out)
    };
    let tape = Tape::new();
    let g = Graph::new(&tape, store, Mode::Train, true);
    let out = build(&g).unwrap();
    tape.backward(out).unwrap();
    let grads = g.param_grads();
    let mut worst: f64 = 0.0;
    let mut probe = store.clone();
    for (name, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        let n = p.data.len();
        let analytic = grads.get(name).cloned().unwrap_or_else(|| vec![0.0; n]);
        let step = (n / per_param).max(1);
        for i in (0..n).step_by(step).take(per_param) {
            let orig = p.data[i];
            probe.data_mut(name).unwrap()[i] = orig + h;
            let up = eval(&probe);
            probe.data_mut(name).unwrap()[i] = orig - h;
            let down = eval(&probe);
            probe.data_mut(name).unwrap()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if err > worst {
                worst = err;
                if err > 1e-3 {
                    eprintln!("{name}[{i}]: analytic {a} numeric {numeric}");
                }
            }
        }
    }
    worst
}
