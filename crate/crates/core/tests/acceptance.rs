//! End-to-end acceptance suite. Every test prints one `criterion N: PASS|FAIL`
//! line before asserting; run with `--nocapture` to see them.

use std::collections::BTreeMap;
use std::fs;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use lstnet::container::Container;
use lstnet::data::{generate_dataset, load_features, write_dataset, Dataset, DatasetConfig};
use lstnet::lsa::{msc_forward, msc_fused_forward, reparameterize, store_fused, BranchMask, MscBlock};
use lstnet::lsf::{spatial_shift, ShiftPattern, ShiftSpec};
use lstnet::metrics::{cider_d, corpus_bleu, format_caption_tsv, paired_ttest, tokenize};
use lstnet::model::{
    beam_search, decode_teacher, encode_memory, fuse_model, init_params, log_softmax_rows, BeamConfig, ModelConfig,
    ModelScorer, BOS, EOS,
};
use lstnet::params::{Graph, Mode, ParamStore};
use lstnet::rng::SplitMix64;
use lstnet::training::{
    adam_step, candidate_rows, generate_captions, gradcheck, gradcheck_config, scst_advantages, train_loop, validate,
    AdamState, Checkpoint, GradcheckTarget, Stage, TrainConfig,
};
use lstnet::{Real, Tape};

fn report(n: usize, ok: bool, detail: String) {
    println!("criterion {n}: {} {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} failed: {detail}");
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ---------------------------------------------------------------- 1

fn run_block<T: Real>(store: &ParamStore<T>, x: &[T], shape: [usize; 4], mask: BranchMask, fused: bool) -> Vec<T> {
    let tape = Tape::new();
    let g = Graph::new(&tape, store, Mode::Infer, false);
    let xv = g.constant(&shape, x.to_vec()).unwrap();
    let y = if fused {
        msc_fused_forward(&g, xv, "b").unwrap()
    } else {
        msc_forward(&g, xv, "b", mask).unwrap()
    };
    g.to_vec(y)
}

fn block_gap<T: Real>(store: &ParamStore<f64>, x: &[f64], shape: [usize; 4], mask: BranchMask) -> f64 {
    let s = store.cast::<T>();
    let x: Vec<T> = x.iter().map(|v| T::c(*v)).collect();
    let a = run_block(&s, &x, shape, mask, false);
    let b = run_block(&s, &x, shape, mask, true);
    a.iter().zip(&b).map(|(p, q)| (p.f64() - q.f64()).abs()).fold(0.0, f64::max)
}

#[test]
fn criterion_1_reparameterization_exactness() {
    let t0 = Instant::now();
    let masks: Vec<BranchMask> = BranchMask::ablation_rows().into_iter().filter(|m| m.any()).collect();
    let (c, inputs) = (8, 100);
    let shape = [inputs, c, 7, 7];
    let mut rng = SplitMix64::new(2024);
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let mask = masks[i % masks.len()];
        let block = MscBlock::<f64>::random(c, mask, &mut rng);
        let mut store = ParamStore::new();
        block.store(&mut store, "b");
        store_fused(&mut store, "b", &reparameterize(&block).unwrap());
        let x: Vec<f64> = (0..inputs * c * 49).map(|_| rng.uniform(-2.0, 2.0)).collect();
        worst64 = worst64.max(block_gap::<f64>(&store, &x, shape, mask));
        worst32 = worst32.max(block_gap::<f32>(&store, &x, shape, mask));
    }
    let t = t0.elapsed();
    report(
        1,
        worst32 <= 1e-4 && worst64 <= 1e-9 && t < Duration::from_secs(30),
        format!("max gap f32 {worst32:.2e} (<= 1e-4), f64 {worst64:.2e} (<= 1e-9), {} subsets, {:.1}s", masks.len(), secs(t)),
    );
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_2_end_to_end_fusion() {
    let t0 = Instant::now();
    let ds = generate_dataset(7, 100, 10, 50, &DatasetConfig::default()).unwrap();
    let cfg = ModelConfig { vocab_size: ds.vocab.len().max(64), ..ModelConfig::desk() };
    let tcfg = TrainConfig { ce_epochs: 2, ..TrainConfig::desk() };
    let out = train_loop::<f32>(Stage::Ce, &ds.train, &ds.val, &ds.vocab, &cfg, &tcfg, None, None, &mut |_| {}).unwrap();
    let params = out.last.params;
    let mut fused = params.clone();
    let mut fcfg = cfg.clone();
    fuse_model(&mut fused, &mut fcfg).unwrap();

    let test = &ds.test;
    let before = generate_captions(&params, &cfg, test, cfg.beam_size, 50).unwrap();
    let after = generate_captions(&fused, &fcfg, test, cfg.beam_size, 50).unwrap();
    let same = before.iter().zip(&after).filter(|(a, b)| a == b).count();

    // per-step logits along each generated caption
    let feats = test.features.gather(&(0..test.len()).collect::<Vec<_>>());
    let m1 = encode_memory(&params, &cfg, &feats, test.len()).unwrap();
    let m2 = encode_memory(&fused, &fcfg, &feats, test.len()).unwrap();
    let per = cfg.n_grid() * cfg.d_model;
    let mut worst = 0.0f64;
    for (i, words) in before.iter().enumerate() {
        let mut input = vec![BOS];
        input.extend_from_slice(words);
        let logits = |p: &ParamStore<f32>, c: &ModelConfig, m: &[f32]| {
            let tape = Tape::new();
            let g = Graph::new(&tape, p, Mode::Infer, false);
            let mem = g.constant(&[1, c.n_grid(), c.d_model], m[i * per..(i + 1) * per].to_vec()).unwrap();
            g.to_vec(decode_teacher(&g, c, mem, &input, 1, input.len()).unwrap().logits)
        };
        let a = logits(&params, &cfg, &m1);
        let b = logits(&fused, &fcfg, &m2);
        worst = a.iter().zip(&b).map(|(p, q)| f64::from((p - q).abs())).fold(worst, f64::max);
    }
    let t = t0.elapsed();
    report(
        2,
        same == test.len() && worst <= 1e-3 && t < Duration::from_secs(60),
        format!("{same}/{} captions identical, max logit gap {worst:.2e} (<= 1e-3), {:.1}s", test.len(), secs(t)),
    );
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_3_gradient_correctness() {
    let t0 = Instant::now();
    let cfg = gradcheck_config();
    let r = gradcheck(&cfg, 1, GradcheckTarget::Full, None).unwrap();
    let t = t0.elapsed();
    report(
        3,
        cfg.d_model == 16 && cfg.grid() == (3, 3) && r.coords >= 200 && r.max_rel_err <= 1e-4 && t < Duration::from_secs(120),
        format!("max rel err {:.2e} (<= 1e-4) over {} coords, worst {}[{}], {:.1}s", r.max_rel_err, r.coords, r.worst.0, r.worst.1, secs(t)),
    );
}

// ---------------------------------------------------------------- 4

/// Per-cell index arithmetic: each output cell reads the cell `d` steps
/// against its quarter's direction, or keeps its own value near the border.
fn shift_oracle(v: &[f64], h: usize, w: usize, c: usize, d: usize, pattern: ShiftPattern) -> Vec<f64> {
    // (drow, dcol) each quarter moves its content by
    let moves: [(isize, isize); 4] = match pattern {
        ShiftPattern::First => [(1, 0), (-1, 0), (0, 1), (0, -1)],
        ShiftPattern::Second => [(0, 1), (0, -1), (1, 0), (-1, 0)],
    };
    let mut out = vec![0.0; v.len()];
    for r in 0..h as isize {
        for col in 0..w as isize {
            for ch in 0..c {
                let (dr, dc) = moves[ch * 4 / c];
                let (sr, sc) = (r - dr * d as isize, col - dc * d as isize);
                let inside = (0..h as isize).contains(&sr) && (0..w as isize).contains(&sc);
                let (sr, sc) = if inside { (sr, sc) } else { (r, col) };
                out[((r as usize) * w + col as usize) * c + ch] = v[((sr as usize) * w + sc as usize) * c + ch];
            }
        }
    }
    out
}

#[test]
fn criterion_4_spatial_shift_oracle() {
    let mut rng = SplitMix64::new(4);
    let (mut cases, mut exact, mut identity) = (0, 0, true);
    for d in 0..=2 {
        for hw in [3, 7] {
            for c in [4, 8] {
                for pattern in [ShiftPattern::First, ShiftPattern::Second] {
                    let v: Vec<f64> = (0..hw * hw * c).map(|_| rng.gaussian()).collect();
                    let got = spatial_shift(&v, hw, hw, c, ShiftSpec { distance: d, pattern }).unwrap();
                    cases += 1;
                    exact += usize::from(got == shift_oracle(&v, hw, hw, c, d, pattern));
                    if d == 0 {
                        identity &= got == v;
                    }
                }
            }
        }
    }
    report(4, exact == cases && identity, format!("{exact}/{cases} cases exact, d_s = 0 identity: {identity}"));
}

// ---------------------------------------------------------------- 5

fn toks(s: &str) -> Vec<String> {
    tokenize(s)
}

#[test]
fn criterion_5_metric_oracles() {
    let b1 = corpus_bleu(&[toks("the cat sat")], &[vec![toks("the cat sat on the mat")]], 1).unwrap();
    let b1_ok = (b1 - (-1.0f64).exp()).abs() <= 1e-6;
    let same = toks("a small red circle left of a blue square");
    let b4 = corpus_bleu(&[same.clone()], &[vec![same.clone()]], 4).unwrap();
    let single = cider_d(&[same.clone()], &[vec![same.clone(), toks("a red circle")]]).unwrap();

    let words = ["a", "red", "blue", "circle", "square", "left", "of", "above", "and", "the"];
    let mut rng = SplitMix64::new(55);
    let sentence = |rng: &mut SplitMix64| -> Vec<String> {
        let n = 1 + rng.below(10) as usize;
        (0..n).map(|_| words[rng.below(words.len() as u64) as usize].to_string()).collect()
    };
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let images = 1 + rng.below(6) as usize;
        let refs: Vec<Vec<Vec<String>>> = (0..images)
            .map(|_| (0..1 + rng.below(5)).map(|_| sentence(&mut rng)).collect())
            .collect();
        let cands: Vec<Vec<String>> = (0..images)
            .map(|i| if rng.below(4) == 0 { refs[i][0].clone() } else { sentence(&mut rng) })
            .collect();
        let c = cider_d(&cands, &refs).unwrap();
        lo = lo.min(c);
        hi = hi.max(c);
    }
    let fuzz_ok = lo >= 0.0 && hi <= 10.0;
    let tt = paired_ttest(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).unwrap();
    let tt_ok = (tt.t - 12f64.sqrt()).abs() <= 1e-3 && (tt.p - 0.0742).abs() <= 1e-3;
    report(
        5,
        b1_ok && b4 == 1.0 && single == 0.0 && fuzz_ok && tt_ok,
        format!(
            "BLEU-1 {b1:.6}, self BLEU-4 {b4}, one-image CIDEr-D {single}, fuzz range [{lo:.3}, {hi:.3}], t {:.4} p {:.4}",
            tt.t, tt.p
        ),
    );
}

// ---------------------------------------------------------------- 6

fn enumerate(vocab: usize, max_len: usize, eos: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
    for len in 1..=max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for t in 0..vocab {
                let mut s = p.clone();
                s.push(t);
                if t == eos || len == max_len {
                    out.push(s);
                } else {
                    next.push(s);
                }
            }
        }
        frontier = next;
    }
    out
}

#[test]
fn criterion_6_beam_search_optimality() {
    let t0 = Instant::now();
    let cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_enc_layers: 3,
        n_dec_layers: 2,
        ffn_expansion: 2,
        grid_h: 3,
        grid_w: 3,
        feature_dim: 6,
        vocab_size: 4,
        max_decode_len: 3,
        dropout: 0.0,
        ..ModelConfig::desk()
    };
    let all = enumerate(4, 3, EOS);
    let mut agree = 0;
    for seed in 0..20u64 {
        let mut s = init_params::<f64>(&cfg, 1000 + seed).unwrap();
        let mut rng = SplitMix64::new(2000 + seed);
        for name in s.names() {
            if s.get(&name).unwrap().trainable {
                let n = s.data(&name).unwrap().len();
                s.set(&name, (0..n).map(|_| rng.uniform(-0.8, 0.8)).collect()).unwrap();
            }
        }
        let feats: Vec<f64> = (0..cfg.n_grid() * cfg.feature_dim).map(|_| rng.gaussian()).collect();
        let mem = encode_memory(&s, &cfg, &feats, 1).unwrap();
        let bc = BeamConfig { beam_size: 64, max_len: 3, bos: BOS, eos: EOS, suppress: vec![] };
        let beams = beam_search(&mut ModelScorer::new(&s, &cfg, &mem, 1).unwrap(), 1, &bc).unwrap();
        let mut best: Option<(f64, &Vec<usize>)> = None;
        for seq in &all {
            let mut input = vec![BOS];
            input.extend_from_slice(&seq[..seq.len() - 1]);
            let tape = Tape::new();
            let g = Graph::new(&tape, &s, Mode::Infer, false);
            let m = g.constant(&[1, cfg.n_grid(), cfg.d_model], mem.clone()).unwrap();
            let logits = g.to_vec(decode_teacher(&g, &cfg, m, &input, 1, input.len()).unwrap().logits);
            let lp = log_softmax_rows(&logits, 4);
            let score = seq.iter().enumerate().map(|(t, tok)| lp[t * 4 + tok]).sum::<f64>() / seq.len() as f64;
            if best.map_or(true, |(b, _)| score > b) {
                best = Some((score, seq));
            }
        }
        let (score, seq) = best.unwrap();
        agree += usize::from(&beams[0][0].tokens == seq && (beams[0][0].score() - score).abs() < 1e-9);
    }
    let t = t0.elapsed();
    report(6, agree == 20 && t < Duration::from_secs(30), format!("{agree}/20 models match exhaustive argmax, {:.1}s", secs(t)));
}

// ---------------------------------------------------------------- 7 and 8

struct Trend {
    /// Validation CIDEr-D of (full, only LSA, neither) per seed.
    cider: Vec<[f64; 3]>,
    single_exact: f64,
    full_seed1: Checkpoint<f32>,
    elapsed: Duration,
}

fn toy() -> &'static Dataset {
    static DS: OnceLock<Dataset> = OnceLock::new();
    DS.get_or_init(|| generate_dataset(1, 500, 100, 100, &DatasetConfig::default()).unwrap())
}

fn trend() -> &'static Trend {
    static TREND: OnceLock<Trend> = OnceLock::new();
    TREND.get_or_init(|| {
        let t0 = Instant::now();
        let ds = toy();
        let base = ModelConfig { vocab_size: ds.vocab.len().max(64), ..ModelConfig::desk() };
        let mut cider = Vec::new();
        let mut single_exact = 0.0;
        let mut full_seed1 = None;
        for seed in 1..=3u64 {
            let mut row = [0.0; 3];
            for (k, (lsa, lsf)) in [(true, true), (true, false), (false, false)].into_iter().enumerate() {
                let cfg = ModelConfig { lsa_enabled: lsa, lsf_enabled: lsf, ..base.clone() };
                let tcfg = TrainConfig { seed, ..TrainConfig::desk() };
                let out = train_loop::<f32>(Stage::Ce, &ds.train, &ds.val, &ds.vocab, &cfg, &tcfg, None, None, &mut |_| {}).unwrap();
                let v = validate(&out.last.params, &cfg, &ds.val, &ds.vocab, tcfg.eval_beam).unwrap();
                row[k] = v.cider;
                println!("  seed {seed} {:<13} CIDEr-D {:.4} exact {:.2} ({:.0}s)", ["LSA+LSF", "only LSA", "w/o LSA+LSF"][k], v.cider, v.single_exact, secs(t0.elapsed()));
                if seed == 1 && k == 0 {
                    single_exact = v.single_exact;
                    full_seed1 = Some(out.last);
                }
            }
            cider.push(row);
        }
        Trend { cider, single_exact, full_seed1: full_seed1.unwrap(), elapsed: t0.elapsed() }
    })
}

#[test]
fn criterion_7_learning_and_trend() {
    let tr = trend();
    let full1 = tr.cider[0][0];
    let learned = full1 >= 1.0 && tr.single_exact >= 0.4;
    let votes = tr.cider.iter().filter(|c| c[0] > c[1] && c[1] >= c[2]).count();
    let table: Vec<String> = tr.cider.iter().map(|c| format!("{:.3}/{:.3}/{:.3}", c[0], c[1], c[2])).collect();
    report(
        7,
        learned && votes * 2 > tr.cider.len() && tr.elapsed < Duration::from_secs(30 * 60),
        format!(
            "seed-1 full CIDEr-D {full1:.3} (>= 1.0), single-object exact {:.0}% (>= 40%), ordered seeds {votes}/3 [{}], {:.0}s",
            100.0 * tr.single_exact,
            table.join(" "),
            secs(tr.elapsed)
        ),
    );
}

/// Expected reward of the two-action softmax policy with rewards (1, 0).
fn bandit_reward(theta: &ParamStore<f64>) -> f64 {
    let t = theta.data("theta").unwrap();
    1.0 / (1.0 + (t[1] - t[0]).exp())
}

fn bandit_increases() -> bool {
    let mut theta = ParamStore::new();
    theta.insert("theta", &[2], vec![0.3, 1.1], true);
    let mut adam = AdamState::new(0.9, 0.999, 1e-8);
    let mut prev = bandit_reward(&theta);
    for _ in 0..100 {
        let adv = scst_advantages(&[1.0, 0.0]).unwrap();
        let w: Vec<f64> = adv.iter().map(|a| a / 2.0).collect();
        let (_, targets, weights, _) = candidate_rows::<f64>(&[vec![0], vec![1]], &w);
        let tape = Tape::new();
        let g = Graph::new(&tape, &theta, Mode::Train, true);
        let th = g.reshape(g.p("theta").unwrap(), &[1, 2]).unwrap();
        let logits = g.add(g.constant(&[2, 2], vec![0.0; 4]).unwrap(), th).unwrap();
        let loss = tape.weighted_nll(logits, &targets, &weights).unwrap();
        tape.backward(loss).unwrap();
        let grads = g.param_grads();
        drop(g);
        adam_step(&mut theta, &grads, &mut adam, 0.02).unwrap();
        let now = bandit_reward(&theta);
        if !(now > prev) {
            return false;
        }
        prev = now;
    }
    true
}

#[test]
fn criterion_8_scst_improves_reward() {
    let bandit = bandit_increases();
    let tr = trend();
    let ds = toy();
    let t0 = Instant::now();
    let start = &tr.full_seed1;
    let tcfg = TrainConfig { scst_epochs: 10, ..start.train.clone() };
    let mut rows = Vec::new();
    let out = train_loop::<f32>(Stage::Scst, &ds.train, &ds.val, &ds.vocab, &start.model, &tcfg, Some(start.clone()), None, &mut |r| {
        rows.push(r.clone())
    })
    .unwrap();
    let before = validate(&start.params, &start.model, &ds.val, &ds.vocab, tcfg.eval_beam).unwrap().cider;
    let after = validate(&out.last.params, &start.model, &ds.val, &ds.vocab, tcfg.eval_beam).unwrap().cider;
    let finite = rows.iter().all(|r| r.objective.is_finite() && r.val_cider.is_finite()) && out.last.params.all_finite();
    let gain = 100.0 * (after - before);
    report(
        8,
        bandit && finite && rows.len() == 10 && gain >= 2.0,
        format!(
            "val CIDEr-D {before:.4} -> {after:.4} ({gain:+.2} points, need +2), finite {finite}, bandit strictly rising {bandit}, {:.0}s",
            secs(t0.elapsed())
        ),
    );
}

// ---------------------------------------------------------------- 9

/// Byte-level container writer that does not use the library.
fn minimal_writer(name: &str, shape: &[u32], values: &[f32], config: &str) -> Vec<u8> {
    let mut b = b"LSTN".to_vec();
    b.extend(1u16.to_le_bytes());
    b.extend(1u32.to_le_bytes());
    b.extend((name.len() as u16).to_le_bytes());
    b.extend(name.as_bytes());
    b.push(shape.len() as u8);
    for d in shape {
        b.extend(d.to_le_bytes());
    }
    for v in values {
        b.extend(v.to_le_bytes());
    }
    b.extend((config.len() as u32).to_le_bytes());
    b.extend(config.as_bytes());
    b
}

fn dir_bytes(dir: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn criterion_9_determinism_and_formats() {
    let root = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for k in 0..2 {
        let ds = generate_dataset(9, 60, 10, 10, &DatasetConfig::default()).unwrap();
        let data = root.path().join(format!("data{k}"));
        write_dataset(&data, &ds).unwrap();
        let cfg = ModelConfig { vocab_size: ds.vocab.len().max(64), d_model: 32, ..ModelConfig::desk() };
        let tcfg = TrainConfig { ce_epochs: 1, ..TrainConfig::desk() };
        let run = root.path().join(format!("run{k}"));
        train_loop::<f32>(Stage::Ce, &ds.train, &ds.val, &ds.vocab, &cfg, &tcfg, None, Some(&run), &mut |_| {}).unwrap();
        let ck = Checkpoint::<f32>::load(&run.join("epoch1.lstn")).unwrap();
        let ids = generate_captions(&ck.params, &ck.model, &ds.test, 3, 50).unwrap();
        let rows: Vec<(String, String)> = ds.test.ids().into_iter().zip(ids.iter().map(|w| ds.vocab.decode(w))).collect();
        runs.push((dir_bytes(&data), dir_bytes(&run), format_caption_tsv(&rows)));
    }
    let datasets = runs[0].0 == runs[1].0 && runs[0].0.len() >= 10;
    let checkpoints = runs[0].1 == runs[1].1 && runs[0].1.contains_key("epoch1.lstn");
    let dumps = runs[0].2 == runs[1].2 && runs[0].2.lines().count() == 10;

    let mut rng = SplitMix64::new(99);
    let mut c = Container { config: "k = v\nx = 1".into(), ..Container::default() };
    let mut vals: Vec<f32> = (0..300).map(|_| rng.gaussian() as f32).collect();
    vals.extend([0.0, -0.0, f32::MIN_POSITIVE, f32::MAX, 1e-42]);
    c.push("a", &[vals.len()], vals.clone());
    c.push("b.c", &[2, 3], (0..6).map(|i| i as f32).collect());
    let bytes = c.to_bytes().unwrap();
    let back = Container::from_bytes(&bytes).unwrap();
    let round_trip = back.to_bytes().unwrap() == bytes
        && back.get("a").unwrap().values.iter().map(|v| v.to_bits()).eq(vals.iter().map(|v| v.to_bits()))
        && back.config == c.config;

    let ext: Vec<f32> = (0..2 * 3 * 3 * 4).map(|i| i as f32 * 0.25 - 4.0).collect();
    let path = root.path().join("ext.lstn");
    fs::write(&path, minimal_writer("features", &[2, 3, 3, 4], &ext, "source=external")).unwrap();
    let external = load_features(&path).map(|f| (f.n, f.h, f.w, f.c) == (2, 3, 3, 4) && f.data == ext).unwrap_or(false);

    report(
        9,
        datasets && checkpoints && dumps && round_trip && external,
        format!("datasets {datasets}, checkpoints {checkpoints}, caption dumps {dumps}, container round trip {round_trip}, external writer {external}"),
    );
}
