mod common;

use std::sync::Arc;

use approx::assert_abs_diff_eq;
use common::{conv2d_loops, fd_max_rel_err, rand_vec};
use lstnet::rng::SplitMix64;
use lstnet::tensor::{Padding, ReduceKind};
use lstnet::{Error, Tape};
use proptest::prelude::*;

#[test]
fn elementwise_examples() {
    let t = Tape::<f64>::new();
    let x = t.leaf(&[3], vec![-1.0, 0.0, 2.0], false).unwrap();
    assert_eq!(t.to_vec(t.relu(x).unwrap()), vec![0.0, 0.0, 2.0]);
    let z = t.leaf(&[1], vec![0.0], false).unwrap();
    assert_eq!(t.to_vec(t.sigmoid(z).unwrap()), vec![0.5]);

    let t = Tape::<f64>::new();
    let a = t.leaf(&[3], vec![1.0, 2.0, 3.0], true).unwrap();
    let b = t.leaf(&[3], vec![4.0, 5.0, 6.0], false).unwrap();
    let m = t.mul(a, b).unwrap();
    assert_eq!(t.to_vec(m), vec![4.0, 10.0, 18.0]);
    let s = t.sum_all(m).unwrap();
    t.backward(s).unwrap();
    assert_eq!(t.grad(a).unwrap(), vec![4.0, 5.0, 6.0]);
}

#[test]
fn log_rejects_non_positive() {
    let t = Tape::<f64>::new();
    let x = t.leaf(&[2], vec![1.0, 0.0], false).unwrap();
    assert!(matches!(t.log(x), Err(Error::LogNonPositive(_))));
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let mut rng = SplitMix64::new(11);
    let a = rand_vec(&mut rng, 6);
    let b = rand_vec(&mut rng, 3);
    let pos: Vec<f64> = rand_vec(&mut rng, 6).iter().map(|v| v.abs() + 0.5).collect();
    let shapes = vec![vec![2, 3], vec![3], vec![2, 3]];
    let err = fd_max_rel_err(&shapes, &[a, b, pos], 1e-6, 1e-8, |t, v| {
        let s = t.add(v[0], v[1])?;
        let d = t.sub(s, v[1])?;
        let m = t.mul(d, v[1])?;
        let e = t.exp(m)?;
        let l = t.log(v[2])?;
        let sg = t.sigmoid(l)?;
        let r = t.relu(v[0])?;
        let sum = t.add(t.add(e, sg)?, t.scale(r, 0.3)?)?;
        t.sum_all(sum)
    });
    assert!(err <= 1e-4, "rel err {err}");
}

#[test]
fn broadcast_with_unit_axes() {
    let mut rng = SplitMix64::new(2);
    let a = rand_vec(&mut rng, 2 * 3 * 4);
    let g = rand_vec(&mut rng, 3);
    let err = fd_max_rel_err(&[vec![2, 3, 4], vec![3, 1]], &[a, g], 1e-6, 1e-8, |t, v| {
        let m = t.mul(v[0], v[1])?;
        let sq = t.mul(m, m)?;
        t.sum_all(sq)
    });
    assert!(err <= 1e-4, "rel err {err}");
}

#[test]
fn matmul_examples() {
    let t = Tape::<f64>::new();
    let i2 = t.leaf(&[2, 2], vec![1.0, 0.0, 0.0, 1.0], false).unwrap();
    let m = t.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
    assert_eq!(t.to_vec(t.matmul(i2, m).unwrap()), vec![1.0, 2.0, 3.0, 4.0]);
    let r = t.leaf(&[1, 2], vec![1.0, 2.0], false).unwrap();
    let c = t.leaf(&[2, 1], vec![3.0, 4.0], false).unwrap();
    assert_eq!(t.to_vec(t.matmul(r, c).unwrap()), vec![11.0]);
    let bad = t.leaf(&[3, 1], vec![0.0; 3], false).unwrap();
    assert!(t.matmul(r, bad).is_err());
}

#[test]
fn matmul_gradients_random_and_batched() {
    let mut rng = SplitMix64::new(5);
    let a = rand_vec(&mut rng, 12);
    let b = rand_vec(&mut rng, 8);
    let err = fd_max_rel_err(&[vec![3, 4], vec![4, 2]], &[a, b], 1e-6, 1e-8, |t, v| {
        let p = t.matmul(v[0], v[1])?;
        t.sum_all(t.mul(p, p)?)
    });
    assert!(err <= 1e-4, "rel err {err}");

    // batched lhs and rhs with a broadcast batch axis on the rhs
    let a = rand_vec(&mut rng, 2 * 3 * 2 * 4);
    let b = rand_vec(&mut rng, 3 * 4 * 2);
    let err = fd_max_rel_err(
        &[vec![2, 3, 2, 4], vec![1, 3, 4, 2]],
        &[a, b],
        1e-6,
        1e-8,
        |t, v| {
            let p = t.matmul(v[0], v[1])?;
            t.sum_all(t.mul(p, p)?)
        },
    );
    assert!(err <= 1e-4, "rel err {err}");
}

#[test]
fn softmax_examples() {
    let t = Tape::<f64>::new();
    let x = t.leaf(&[2], vec![0.0, 0.0], false).unwrap();
    assert_eq!(t.to_vec(t.softmax(x, 0).unwrap()), vec![0.5, 0.5]);
    let x = t.leaf(&[3], vec![1000.0; 3], false).unwrap();
    for v in t.to_vec(t.softmax(x, 0).unwrap()) {
        assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-12);
    }
    let x = t
        .leaf(&[3], vec![1f64.ln(), 2f64.ln(), 3f64.ln()], false)
        .unwrap();
    // oracle: direct exp / normalize
    let e: Vec<f64> = [1.0f64, 2.0, 3.0].to_vec();
    let z: f64 = e.iter().sum();
    for (got, want) in t.to_vec(t.softmax(x, 0).unwrap()).iter().zip(e.iter()) {
        assert_abs_diff_eq!(*got, want / z, epsilon = 1e-12);
    }
}

#[test]
fn softmax_gradient_along_inner_axis_and_mask() {
    let mut rng = SplitMix64::new(8);
    let x = rand_vec(&mut rng, 2 * 3 * 4);
    let w = rand_vec(&mut rng, 2 * 3 * 4);
    let err = fd_max_rel_err(&[vec![2, 3, 4], vec![2, 3, 4]], &[x.clone(), w.clone()], 1e-6, 1e-8, |t, v| {
        let s = t.softmax(v[0], 1)?;
        t.sum_all(t.mul(s, v[1])?)
    });
    assert!(err <= 1e-4, "rel err {err}");

    let mask: Vec<bool> = (0..3)
        .flat_map(|q| (0..4).map(move |k| k <= q))
        .collect();
    let err = fd_max_rel_err(&[vec![2, 3, 4], vec![2, 3, 4]], &[x, w], 1e-6, 1e-8, |t, v| {
        let s = t.softmax_masked(v[0], 2, Some(&mask))?;
        t.sum_all(t.mul(s, v[1])?)
    });
    assert!(err <= 1e-4, "rel err {err}");
}

#[test]
fn conv2d_examples_and_loop_oracle() {
    let mut rng = SplitMix64::new(21);
    let t = Tape::<f64>::new();
    let xv = rand_vec(&mut rng, 2 * 3 * 3);
    let x = t.leaf(&[1, 2, 3, 3], xv.clone(), false).unwrap();
    let eye = t.leaf(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0], false).unwrap();
    assert_eq!(t.to_vec(t.conv2d(x, eye, None, Padding::Zero).unwrap()), xv);
    let mut dirac = vec![0.0; 2 * 2 * 9];
    dirac[4] = 1.0;
    dirac[(2 + 1) * 9 + 4] = 1.0;
    let dk = t.leaf(&[2, 2, 3, 3], dirac, false).unwrap();
    assert_eq!(t.to_vec(t.conv2d(x, dk, None, Padding::Zero).unwrap()), xv);

    let kv = rand_vec(&mut rng, 2 * 2 * 9);
    let k = t.leaf(&[2, 2, 3, 3], kv.clone(), false).unwrap();
    let got = t.to_vec(t.conv2d(x, k, None, Padding::Zero).unwrap());
    let want = conv2d_loops(&xv, [1, 2, 3, 3], &kv, [2, 2, 3, 3], None, None);
    for (g, w) in got.iter().zip(&want) {
        assert_abs_diff_eq!(*g, *w, epsilon = 1e-12);
    }
}

#[test]
fn conv2d_rejects_bad_kernels() {
    let t = Tape::<f64>::new();
    let x = t.leaf(&[1, 2, 3, 3], vec![0.0; 18], false).unwrap();
    let k5 = t.leaf(&[2, 2, 5, 5], vec![0.0; 100], false).unwrap();
    assert!(matches!(
        t.conv2d(x, k5, None, Padding::Zero),
        Err(Error::UnsupportedKernel(5, 5))
    ));
    let kc = t.leaf(&[2, 3, 3, 3], vec![0.0; 54], false).unwrap();
    assert!(t.conv2d(x, kc, None, Padding::Zero).is_err());
}

#[test]
fn conv2d_per_channel_padding_matches_loops_and_fd() {
    let mut rng = SplitMix64::new(4);
    let (xv, kv, bv, pv) = (
        rand_vec(&mut rng, 2 * 3 * 4 * 5),
        rand_vec(&mut rng, 2 * 3 * 9),
        rand_vec(&mut rng, 2),
        rand_vec(&mut rng, 3),
    );
    let t = Tape::<f64>::new();
    let x = t.leaf(&[2, 3, 4, 5], xv.clone(), false).unwrap();
    let k = t.leaf(&[2, 3, 3, 3], kv.clone(), false).unwrap();
    let b = t.leaf(&[2], bv.clone(), false).unwrap();
    let p = t.leaf(&[3], pv.clone(), false).unwrap();
    let got = t.to_vec(t.conv2d(x, k, Some(b), Padding::PerChannel(p)).unwrap());
    let want = conv2d_loops(&xv, [2, 3, 4, 5], &kv, [2, 3, 3, 3], Some(&bv), Some(&pv));
    for (g, w) in got.iter().zip(&want) {
        assert_abs_diff_eq!(*g, *w, epsilon = 1e-12);
    }
    let err = fd_max_rel_err(
        &[vec![2, 3, 4, 5], vec![2, 3, 3, 3], vec![2], vec![3]],
        &[xv, kv, bv, pv],
        1e-6,
        1e-8,
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), Padding::PerChannel(v[3]))?;
            t.sum_all(t.mul(y, y)?)
        },
    );
    assert!(err <= 1e-4, "rel err {err}");
}

#[test]
fn conv2d_f32_close_to_loops() {
    let mut rng = SplitMix64::new(9);
    let xv = rand_vec(&mut rng, 3 * 4 * 7 * 7);
    let kv = rand_vec(&mut rng, 5 * 4 * 9);
    let t = Tape::<f32>::new();
    let x = t
        .leaf(&[3, 4, 7, 7], xv.iter().map(|v| *v as f32).collect(), false)
        .unwrap();
    let k = t
        .leaf(&[5, 4, 3, 3], kv.iter().map(|v| *v as f32).collect(), false)
        .unwrap();
    let got = t.to_vec(t.conv2d(x, k, None, Padding::Zero).unwrap());
    let want = conv2d_loops(&xv, [3, 4, 7, 7], &kv, [5, 4, 3, 3], None, None);
    for (g, w) in got.iter().zip(&want) {
        assert!((*g as f64 - w).abs() <= 1e-5, "{g} vs {w}");
    }
}

#[test]
fn reduce_examples_and_gradients() {
    let t = Tape::<f64>::new();
    let x = t.leaf(&[3], vec![1.0, 2.0, 3.0], false).unwrap();
    assert_eq!(t.item(t.sum_all(x).unwrap()), 6.0);
    let c = t.leaf(&[2, 2], vec![1.5; 4], false).unwrap();
    assert_eq!(t.item(t.mean_all(c).unwrap()), 1.5);
    let e = t.leaf(&[0], vec![], false).unwrap();
    assert!(matches!(t.sum_all(e), Err(Error::EmptyReduction)));

    let t = Tape::<f64>::new();
    let x = t.leaf(&[4], vec![1.0, 2.0, 3.0, 4.0], true).unwrap();
    let m = t.mean_all(x).unwrap();
    t.backward(m).unwrap();
    assert_eq!(t.grad(x).unwrap(), vec![0.25; 4]);

    let mut rng = SplitMix64::new(3);
    let xv = rand_vec(&mut rng, 24);
    for kind in [ReduceKind::Sum, ReduceKind::Mean, ReduceKind::Max] {
        let err = fd_max_rel_err(&[vec![2, 3, 4]], &[xv.clone()], 1e-6, 1e-8, |t, v| {
            let r = t.reduce(kind, v[0], &[0, 2])?;
            t.sum_all(t.mul(r, r)?)
        });
        assert!(err <= 1e-4, "{kind:?}: rel err {err}");
    }
}

#[test]
fn max_routes_to_first_argmax() {
    let t = Tape::<f64>::new();
    let x = t.leaf(&[4], vec![2.0, 5.0, 5.0, 1.0], true).unwrap();
    let m = t.reduce(ReduceKind::Max, x, &[0]).unwrap();
    t.backward(m).unwrap();
    assert_eq!(t.grad(x).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn reshape_concat_slice() {
    let t = Tape::<f64>::new();
    let a = t.leaf(&[2, 3], (0..6).map(f64::from).collect(), false).unwrap();
    let b = t.leaf(&[2, 3], (6..12).map(f64::from).collect(), false).unwrap();
    let c = t.concat(&[a, b], 1).unwrap();
    assert_eq!(t.shape(c), vec![2, 6]);
    let cv = t.to_vec(c);
    assert_eq!(&cv[0..3], &[0.0, 1.0, 2.0]);
    assert_eq!(&cv[6..9], &[3.0, 4.0, 5.0]);
    let r = t.reshape(t.reshape(c, &[3, 4]).unwrap(), &[2, 6]).unwrap();
    assert_eq!(t.to_vec(r), cv);
    // slice then concat restores the input bit-for-bit
    let l = t.slice(c, 1, 0, 2).unwrap();
    let rr = t.slice(c, 1, 2, 6).unwrap();
    assert_eq!(t.to_vec(t.concat(&[l, rr], 1).unwrap()), cv);
    assert!(matches!(t.slice(c, 1, 4, 7), Err(Error::OutOfRange { .. })));
    let bad = t.leaf(&[3, 3], vec![0.0; 9], false).unwrap();
    assert!(t.concat(&[a, bad], 1).is_err());

    let t = Tape::<f64>::new();
    let x = t.leaf(&[2, 4], vec![1.0; 8], true).unwrap();
    let s = t.slice(x, 1, 1, 3).unwrap();
    let g = t.leaf(&[2, 2], vec![1.0, 2.0, 3.0, 4.0], false).unwrap();
    let root = t.sum_all(t.mul(s, g).unwrap()).unwrap();
    t.backward(root).unwrap();
    assert_eq!(
        t.grad(x).unwrap(),
        vec![0.0, 1.0, 2.0, 0.0, 0.0, 3.0, 4.0, 0.0]
    );

    let mut rng = SplitMix64::new(1);
    let (av, bv) = (rand_vec(&mut rng, 12), rand_vec(&mut rng, 6));
    let err = fd_max_rel_err(&[vec![2, 3, 2], vec![2, 3, 1]], &[av, bv], 1e-6, 1e-8, |t, v| {
        let c = t.concat(&[v[0], v[1]], 2)?;
        let p = t.permute(c, &[2, 0, 1])?;
        let s = t.slice(p, 0, 1, 3)?;
        let r = t.reshape(s, &[4, 3])?;
        t.sum_all(t.mul(r, r)?)
    });
    assert!(err <= 1e-4, "rel err {err}");
}

#[test]
fn permute_moves_elements() {
    let t = Tape::<f64>::new();
    let x = t.leaf(&[2, 3], (0..6).map(f64::from).collect(), false).unwrap();
    let p = t.permute(x, &[1, 0]).unwrap();
    assert_eq!(t.shape(p), vec![3, 2]);
    assert_eq!(t.to_vec(p), vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
}

#[test]
fn backward_contract() {
    let t = Tape::<f64>::new();
    let x = t.leaf(&[2, 2], vec![1.0, -2.0, 3.0, 0.5], true).unwrap();
    let nonscalar = t.mul(x, x).unwrap();
    assert!(matches!(t.backward(nonscalar), Err(Error::NonScalarRoot(_))));
    let root = t.sum_all(nonscalar).unwrap();
    t.backward(root).unwrap();
    assert_eq!(t.grad(x).unwrap(), vec![2.0, -4.0, 6.0, 1.0]);
    assert!(matches!(t.backward(root), Err(Error::DeadTape)));

    let t = Tape::<f64>::new();
    let x = t.leaf(&[3], vec![1.0; 3], true).unwrap();
    let root = t.sum_all(x).unwrap();
    t.clear();
    assert!(matches!(t.backward(root), Err(Error::DeadTape)));
}

#[test]
fn sum_root_gives_ones() {
    let t = Tape::<f64>::new();
    let x = t.leaf(&[2, 3, 2], vec![0.3; 12], true).unwrap();
    let root = t.sum_all(x).unwrap();
    t.backward(root).unwrap();
    assert_eq!(t.grad(x).unwrap(), vec![1.0; 12]);
}

#[test]
fn gather_and_embedding_gradients() {
    let t = Tape::<f64>::new();
    let table = t
        .leaf(&[4, 2], (0..8).map(f64::from).collect(), true)
        .unwrap();
    let e = t.embedding(table, &[2, 0, 2]).unwrap();
    assert_eq!(t.to_vec(e), vec![4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
    let root = t.sum_all(e).unwrap();
    t.backward(root).unwrap();
    // per-row gradient equals the token occurrence count
    assert_eq!(
        t.grad(table).unwrap(),
        vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0]
    );
    let t = Tape::<f64>::new();
    let table = t.leaf(&[4, 2], vec![0.0; 8], false).unwrap();
    assert!(t.embedding(table, &[4]).is_err());
    assert!(t.gather(table, Arc::new(vec![9]), &[1]).is_err());
}

#[test]
fn normalization_and_nll_gradients() {
    let mut rng = SplitMix64::new(17);
    let x = rand_vec(&mut rng, 3 * 5);
    let w = rand_vec(&mut rng, 3 * 5);
    let err = fd_max_rel_err(&[vec![3, 5], vec![3, 5]], &[x, w], 1e-6, 1e-8, |t, v| {
        let n = t.layer_norm_core(v[0], 1e-6)?;
        t.sum_all(t.mul(n, v[1])?)
    });
    assert!(err <= 1e-4, "layer norm rel err {err}");

    let x = rand_vec(&mut rng, 2 * 3 * 2 * 2);
    let w = rand_vec(&mut rng, 2 * 3 * 2 * 2);
    let err = fd_max_rel_err(&[vec![2, 3, 2, 2], vec![2, 3, 2, 2]], &[x, w], 1e-6, 1e-8, |t, v| {
        let (n, _, _) = t.channel_norm(v[0], 1e-5)?;
        t.sum_all(t.mul(n, v[1])?)
    });
    assert!(err <= 1e-4, "channel norm rel err {err}");

    let logits = rand_vec(&mut rng, 4 * 6);
    let err = fd_max_rel_err(&[vec![4, 6]], &[logits], 1e-6, 1e-8, |t, v| {
        t.weighted_nll(v[0], &[1, 5, 0, 3], &[0.5, -1.0, 0.0, 2.0])
    });
    assert!(err <= 1e-4, "nll rel err {err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_normalized_and_shift_invariant(
        rows in proptest::collection::vec(proptest::collection::vec(-20.0f64..20.0, 5), 1..6),
        shift in -50.0f64..50.0,
    ) {
        let n = rows.len();
        let flat: Vec<f64> = rows.concat();
        let shifted: Vec<f64> = flat.iter().map(|v| v + shift).collect();
        let t = Tape::<f64>::new();
        let a = t.softmax(t.leaf(&[n, 5], flat, false).unwrap(), 1).unwrap();
        let b = t.softmax(t.leaf(&[n, 5], shifted, false).unwrap(), 1).unwrap();
        let (av, bv) = (t.to_vec(a), t.to_vec(b));
        for r in 0..n {
            let s: f64 = av[r * 5..(r + 1) * 5].iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
        for (x, y) in av.iter().zip(&bv) {
            prop_assert!(x >= &0.0);
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn random_composition_gradients(seed in 0u64..1000) {
        let mut rng = SplitMix64::new(seed);
        let a = rand_vec(&mut rng, 6);
        let b = rand_vec(&mut rng, 6);
        let err = fd_max_rel_err(&[vec![2, 3], vec![3, 2]], &[a, b], 1e-5, 1e-6, |t, v| {
            let m = t.matmul(v[0], v[1])?;
            let s = t.softmax(m, 1)?;
            let g = t.sigmoid(t.matmul(v[1], s)?)?;
            t.sum_all(g)
        });
        prop_assert!(err <= 1e-4, "rel err {}", err);
    }
}
