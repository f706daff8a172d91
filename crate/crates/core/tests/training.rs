use std::collections::BTreeMap;
use std::fs;

use lstnet::data::{generate_dataset, DatasetConfig, Split, Vocab};
use lstnet::model::{decode_teacher, encode, init_params, ModelConfig};
use lstnet::params::{Graph, Mode, ParamStore};
use lstnet::rng::SplitMix64;
use lstnet::tensor::AdjointFault;
use lstnet::training::{
    adam_step, candidate_rows, ce_loss, clip_grad_norm, gradcheck, gradcheck_config, scst_advantages, scst_step,
    teacher_rows, train_loop, AdamState, Checkpoint, GradcheckTarget, LrSchedule, Stage, TrainConfig,
};
use lstnet::{Error, Tape};

fn small_model() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_heads: 4,
        n_enc_layers: 3,
        n_dec_layers: 2,
        ffn_expansion: 2,
        beam_size: 3,
        ..ModelConfig::desk()
    }
}

#[test]
fn paper_schedule_warms_up_to_exactly_the_base_rate() {
    let s = LrSchedule::paper_ce();
    let spe = 37;
    assert_eq!(s.lr(4, spe - 1, spe), 1e-4);
    let mut prev = 0.0;
    for epoch in 1..=4 {
        for step in 0..spe {
            let lr = s.lr(epoch, step, spe);
            assert!(lr > prev);
            prev = lr;
        }
    }
    for epoch in 5..=20 {
        for step in 0..spe {
            let lr = s.lr(epoch, step, spe);
            assert!(lr > 0.0 && lr <= prev, "epoch {epoch}");
            prev = lr;
        }
    }
    assert_eq!(s.lr(10, 0, spe), 2e-5);
    assert_eq!(s.lr(12, 5, spe), 4e-6);
    assert!(LrSchedule { base: 1e-4, warmup_epochs: 0, drops: vec![(3, 2e-4)] }.validate().is_err());
}

#[test]
fn ce_loss_examples() {
    let tape = Tape::<f64>::new();
    let v = 7;
    let uniform = tape.constant(&[2, v], vec![0.3; 2 * v]).unwrap();
    let l = ce_loss(&tape, uniform, &[4, 5]).unwrap();
    assert!((tape.item(l) - (v as f64).ln()).abs() < 1e-12);

    let mut sharp = vec![-30.0; v];
    sharp[4] = 30.0;
    let sharp = tape.constant(&[1, v], sharp).unwrap();
    assert!(tape.item(ce_loss(&tape, sharp, &[4]).unwrap()) < 1e-20);

    // random logits against a direct log-softmax sum; pad rows are skipped
    let mut rng = SplitMix64::new(4);
    let vals: Vec<f64> = (0..3 * v).map(|_| rng.gaussian() * 3.0).collect();
    let targets = [5, 0, 1];
    let x = tape.constant(&[3, v], vals.clone()).unwrap();
    let got = tape.item(ce_loss(&tape, x, &targets).unwrap());
    let mut want = 0.0;
    for (r, &t) in targets.iter().enumerate().filter(|(_, t)| **t != 0) {
        let row = &vals[r * v..(r + 1) * v];
        let lse = row.iter().map(|z| z.exp()).sum::<f64>().ln();
        want -= row[t] - lse;
    }
    assert!((got - want / 2.0).abs() < 1e-6);
    assert!(ce_loss(&tape, x, &[1, 2]).is_err());
    assert!(ce_loss(&tape, x, &[0, 0, 0]).is_err());
}

fn single(name: &str, data: Vec<f64>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    let n = data.len();
    s.insert(name, &[n], data, true);
    s
}

#[test]
fn adam_examples() {
    let mut p = single("x", vec![0.5, -2.0, 3.0]);
    let mut st = AdamState::new(0.9, 0.999, 1e-8);
    let zero = BTreeMap::from([("x".to_string(), vec![0.0; 3])]);
    adam_step(&mut p, &zero, &mut st, 0.1).unwrap();
    assert_eq!(p.data("x").unwrap(), &[0.5, -2.0, 3.0]);

    // the first bias-corrected step moves every coordinate by lr against sign(g)
    let mut p = single("x", vec![0.5, -2.0, 3.0]);
    let mut st = AdamState::new(0.9, 0.999, 1e-8);
    let g = BTreeMap::from([("x".to_string(), vec![0.2, -5.0, 1e-3])]);
    adam_step(&mut p, &g, &mut st, 0.01).unwrap();
    let moved: Vec<f64> = p.data("x").unwrap().iter().zip([0.5, -2.0, 3.0]).map(|(a, b)| a - b).collect();
    for (m, s) in moved.iter().zip([-1.0, 1.0, -1.0]) {
        assert!((m - 0.01 * s).abs() < 1e-7, "{m}");
    }

    let nan = BTreeMap::from([("x".to_string(), vec![0.0, f64::NAN, 0.0])]);
    assert!(matches!(adam_step(&mut p, &nan, &mut st, 0.01), Err(Error::NonFinite(_))));
}

#[test]
fn adam_minimizes_a_quadratic() {
    let mut p = single("x", vec![1.0; 4]);
    let mut st = AdamState::new(0.9, 0.999, 1e-8);
    let mut reached = None;
    for step in 1..=200 {
        let g: Vec<f64> = p.data("x").unwrap().iter().map(|x| 2.0 * x).collect();
        adam_step(&mut p, &BTreeMap::from([("x".to_string(), g)]), &mut st, 0.1).unwrap();
        if p.data("x").unwrap().iter().all(|x| x.abs() < 1e-3) {
            reached = Some(step);
            break;
        }
    }
    assert!(reached.is_some());
}

#[test]
fn clipping_rescales_only_large_gradients() {
    let mut g = BTreeMap::from([("a".to_string(), vec![3.0f64]), ("b".to_string(), vec![4.0])]);
    assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
    assert!((g["a"][0] - 0.6).abs() < 1e-15 && (g["b"][0] - 0.8).abs() < 1e-15);
    let before = g.clone();
    clip_grad_norm(&mut g, 5.0);
    assert_eq!(g, before);
}

#[test]
fn advantage_examples() {
    assert_eq!(scst_advantages(&[1.0, 0.0]).unwrap(), vec![0.5, -0.5]);
    assert_eq!(scst_advantages(&[2.0, 2.0, 2.0]).unwrap(), vec![0.0; 3]);
    assert!(scst_advantages(&[1.0]).is_err());
    let (i, t, w, len) = candidate_rows::<f64>(&[vec![5, 2], vec![2]], &[0.25, -0.25]);
    assert_eq!(len, 2);
    assert_eq!(i, vec![1, 5, 1, 0]);
    assert_eq!(t, vec![5, 2, 2, 0]);
    assert_eq!(w, vec![0.25, 0.25, -0.25, 0.0]);
}

/// Softmax policy over two actions with rewards (1, 0). Both actions are the
/// candidate set, as a beam of two over two actions would return.
fn bandit_update(theta: &mut ParamStore<f64>, adam: &mut AdamState<f64>, lr: f64) -> Vec<f64> {
    let rewards = [1.0, 0.0];
    let adv = scst_advantages(&rewards).unwrap();
    let k = adv.len() as f64;
    let weights: Vec<f64> = adv.iter().map(|a| a / k).collect();
    let (_, targets, w, _) = candidate_rows::<f64>(&[vec![0], vec![1]], &weights);
    let tape = Tape::new();
    let g = Graph::new(&tape, theta, Mode::Train, true);
    let th = g.p("theta").unwrap();
    let th = g.reshape(th, &[1, 2]).unwrap();
    let zeros = g.constant(&[2, 2], vec![0.0; 4]).unwrap();
    let logits = g.add(zeros, th).unwrap();
    let loss = tape.weighted_nll(logits, &targets, &w).unwrap();
    tape.backward(loss).unwrap();
    let grads = g.param_grads();
    drop(g);
    let grad = grads["theta"].clone();
    adam_step(theta, &grads, adam, lr).unwrap();
    grad
}

fn p_first(theta: &ParamStore<f64>) -> f64 {
    let t = theta.data("theta").unwrap();
    1.0 / (1.0 + (t[1] - t[0]).exp())
}

#[test]
fn bandit_reward_rises_along_the_policy_gradient() {
    let mut theta = single("theta", vec![-0.4, 0.9]);
    let mut adam = AdamState::new(0.9, 0.999, 1e-8);
    let mut prev = p_first(&theta);
    let start = prev;
    for _ in 0..100 {
        let p = p_first(&theta);
        let grad = bandit_update(&mut theta, &mut adam, 0.01);
        // closed form: dE/dtheta = p (1 - p) * (1, -1); the loss gradient is its negative direction
        let closed = [p * (1.0 - p), -p * (1.0 - p)];
        for (g, c) in grad.iter().zip(closed) {
            assert_eq!(g.signum(), -c.signum());
        }
        // surrogate gradient is -(1/4)(e_a - e_b) whatever the policy
        assert!((grad[0] + 0.25).abs() < 1e-12 && (grad[1] - 0.25).abs() < 1e-12);
        let now = p_first(&theta);
        assert!(now > prev);
        prev = now;
    }
    assert!(prev > start + 0.2);
}

fn toy() -> (Split, Split, Vocab) {
    let ds = generate_dataset(3, 30, 8, 1, &DatasetConfig::default()).unwrap();
    (ds.train, ds.val, ds.vocab)
}

#[test]
fn scst_update_ignores_reward_offsets_and_vanishes_for_equal_rewards() {
    let (train, _, _) = toy();
    let cfg = ModelConfig { dropout: 0.0, ..small_model() };
    let params = init_params::<f64>(&cfg, 2).unwrap();
    let feats: Vec<f64> = train.features.gather(&[0, 1]).into_iter().map(f64::from).collect();
    let reward = |_: usize, w: &[usize]| (w.len() % 4) as f64 * 0.25;
    let shifted = |i: usize, w: &[usize]| reward(i, w) + 8.0;
    let a = scst_step(&params, &cfg, &feats, 2, 2, &reward, 7).unwrap();
    let b = scst_step(&params, &cfg, &feats, 2, 2, &shifted, 7).unwrap();
    assert_eq!(a.step.grads, b.step.grads);
    assert!((b.mean_reward - a.mean_reward - 8.0).abs() < 1e-12);

    let flat = scst_step(&params, &cfg, &feats, 2, 3, &|_, _| 1.5, 7).unwrap();
    assert!(flat.step.grads.values().flatten().all(|g| *g == 0.0));
    assert!(scst_step(&params, &cfg, &feats, 2, 1, &reward, 7).is_err());
}

fn forward_logits(params: &ParamStore<f32>, cfg: &ModelConfig, feats: &[f32], caps: &[Vec<usize>]) -> Vec<f32> {
    let (inputs, _, len) = teacher_rows(caps);
    let tape = Tape::new();
    let g = Graph::new(&tape, params, Mode::Infer, false);
    let x = g.constant(&[1, cfg.n_grid(), cfg.feature_dim], feats.to_vec()).unwrap();
    let enc = encode(&g, cfg, x).unwrap();
    let dec = decode_teacher(&g, cfg, enc.memory, &inputs, caps.len(), len).unwrap();
    g.to_vec(dec.logits)
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let (train, val, vocab) = toy();
    let cfg = small_model();
    let tcfg = TrainConfig { ce_epochs: 1, batch_size: 10, ..TrainConfig::desk() };
    let out = train_loop::<f32>(Stage::Ce, &train, &val, &vocab, &cfg, &tcfg, None, None, &mut |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.lstn");
    out.last.save(&path).unwrap();
    let back = Checkpoint::<f32>::load(&path).unwrap();
    assert_eq!(back, out.last);
    let feats = train.features.gather(&[0]);
    let caps: Vec<Vec<usize>> = train.captions[0].iter().map(|c| vocab.encode(c)).collect();
    let a = forward_logits(&out.last.params, &cfg, &feats, &caps);
    let b = forward_logits(&back.params, &cfg, &feats, &caps);
    assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());

    // a checkpoint does not load under a configuration it was not built for
    let mut c = back.to_container();
    c.config = c.config.replace("d_model=32", "d_model=16");
    assert!(Checkpoint::<f32>::from_container(&c).is_err());
    let mut c = back.to_container();
    c.push("stray", &[1], vec![0.0]);
    assert!(Checkpoint::<f32>::from_container(&c).is_err());
}

#[test]
fn same_seed_runs_write_identical_files() {
    let (train, val, vocab) = toy();
    let cfg = small_model();
    let tcfg = TrainConfig { ce_epochs: 1, ..TrainConfig::desk() };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        train_loop::<f32>(Stage::Ce, &train, &val, &vocab, &cfg, &tcfg, None, Some(d.path()), &mut |_| {}).unwrap();
    }
    for name in ["epoch1.lstn", "best.lstn", "train_log.tsv"] {
        let a = fs::read(dirs[0].path().join(name)).unwrap();
        assert_eq!(a, fs::read(dirs[1].path().join(name)).unwrap(), "{name}");
    }
    let log = fs::read_to_string(dirs[0].path().join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.starts_with("epoch\tlr\tloss_or_reward\tval_bleu4\tval_cider\n1\t"));
}

/// Mean dropout-free CE over the whole training split.
fn train_ce(params: &ParamStore<f32>, cfg: &ModelConfig, split: &Split, vocab: &Vocab) -> f64 {
    let mut total = 0.0;
    for i in 0..split.len() {
        let caps: Vec<Vec<usize>> = split.captions[i].iter().map(|c| vocab.encode(c)).collect();
        let (inputs, targets, len) = teacher_rows(&caps);
        let tape = Tape::new();
        let g = Graph::new(&tape, params, Mode::Infer, false);
        let x = g.constant(&[1, cfg.n_grid(), cfg.feature_dim], split.features.gather(&[i])).unwrap();
        let enc = encode(&g, cfg, x).unwrap();
        let dec = decode_teacher(&g, cfg, enc.memory, &inputs, caps.len(), len).unwrap();
        total += f64::from(tape.item(ce_loss(&tape, dec.logits, &targets).unwrap()));
    }
    total / split.len() as f64
}

#[test]
fn ce_loss_falls_every_epoch() {
    let (train, val, vocab) = toy();
    let cfg = small_model();
    let mut losses = vec![train_ce(&init_params(&cfg, 1).unwrap(), &cfg, &train, &vocab)];
    let mut ck = None;
    for _ in 0..5 {
        let tcfg = TrainConfig { ce_epochs: 1, ..TrainConfig::desk() };
        let out = train_loop::<f32>(Stage::Ce, &train, &val, &vocab, &cfg, &tcfg, ck.take(), None, &mut |_| {}).unwrap();
        losses.push(train_ce(&out.last.params, &cfg, &train, &vocab));
        ck = Some(out.last);
    }
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn gradcheck_reports() {
    let cfg = gradcheck_config();
    let full = gradcheck(&cfg, 1, GradcheckTarget::Full, None).unwrap();
    assert!(full.coords >= 200);
    assert!(full.max_rel_err <= 1e-4, "{full:?}");
    let linear = gradcheck(&cfg, 1, GradcheckTarget::LinearOnly, None).unwrap();
    assert!(linear.max_rel_err <= 1e-8, "{linear:?}");
    let broken = gradcheck(&cfg, 1, GradcheckTarget::Full, Some(AdjointFault::ScaleRelu(0.5))).unwrap();
    assert!(broken.max_rel_err > 1e-2, "{broken:?}");
}

#[test]
fn scst_without_a_checkpoint_is_refused() {
    let (train, val, vocab) = toy();
    let r = train_loop::<f32>(Stage::Scst, &train, &val, &vocab, &small_model(), &TrainConfig::desk(), None, None, &mut |_| {});
    assert!(matches!(r, Err(Error::Config(_))));
}
