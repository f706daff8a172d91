//! Browser demo: synthetic scenes, caption scoring and branch fusion.

use wasm_bindgen::prelude::*;

use lstnet::data::{generate_scene, DatasetConfig};
use lstnet::lsa::{msc_forward, msc_fused_forward, reparameterize, store_fused, BranchMask, MscBlock};
use lstnet::metrics::{exact_match, sentence_bleu, tokenize};
use lstnet::params::{Graph, Mode, ParamStore};
use lstnet::rng::SplitMix64;
use lstnet::{Real, Tape};

/// Draws the scene for `seed` and returns its record, a cell map and its
/// reference captions.
#[wasm_bindgen]
pub fn scene(seed: u64) -> String {
    let s = generate_scene(&mut SplitMix64::new(seed), &DatasetConfig::default());
    let mut out = format!("{s}\n\n");
    let occ = s.occupancy();
    for row in occ.chunks(s.grid_w) {
        let line: String = row
            .iter()
            .map(|o| match o {
                Some(i) => char::from(b'A' + *i as u8),
                None => '.',
            })
            .collect();
        out.push_str(&line);
        out.push('\n');
    }
    out.push('\n');
    for c in s.captions() {
        out.push_str(&c);
        out.push('\n');
    }
    out
}

/// Sentence BLEU-1..4 of `candidate` against newline-separated references.
#[wasm_bindgen]
pub fn score(candidate: &str, references: &str) -> String {
    let cand = tokenize(candidate);
    let refs: Vec<Vec<String>> = references.lines().map(tokenize).filter(|r| !r.is_empty()).collect();
    if refs.is_empty() {
        return "no references given\n".into();
    }
    let mut out = String::new();
    for n in 1..=4 {
        out.push_str(&format!("BLEU-{n}\t{:.4}\n", sentence_bleu(&cand, &refs, n)));
    }
    out.push_str(&format!("exact\t{}\n", exact_match(&cand, &refs)));
    out
}

fn run_block<T: Real>(store: &ParamStore<T>, x: &[T], shape: [usize; 4], mask: BranchMask, fused: bool) -> lstnet::Result<Vec<T>> {
    let tape = Tape::new();
    let g = Graph::new(&tape, store, Mode::Infer, false);
    let xv = g.constant(&shape, x.to_vec())?;
    let y = if fused {
        msc_fused_forward(&g, xv, "b")?
    } else {
        msc_forward(&g, xv, "b", mask)?
    };
    Ok(g.to_vec(y))
}

fn max_gap<T: Real>(store: &ParamStore<f64>, x: &[f64], shape: [usize; 4], mask: BranchMask) -> lstnet::Result<f64> {
    let s = store.cast::<T>();
    let x: Vec<T> = x.iter().map(|v| T::c(*v)).collect();
    let a = run_block(&s, &x, shape, mask, false)?;
    let b = run_block(&s, &x, shape, mask, true)?;
    Ok(a.iter().zip(&b).map(|(p, q)| (p.f64() - q.f64()).abs()).fold(0.0, f64::max))
}

/// Builds a random multi-branch block with the given branches (for example
/// `identity+1x1+1x1-3x3`), merges it into one 3x3 convolution and reports
/// the largest output difference on a random 7x7 input.
#[wasm_bindgen]
pub fn fusion(seed: u64, branches: &str, channels: usize) -> String {
    match fusion_report(seed, branches, channels) {
        Ok(s) => s,
        Err(e) => format!("error: {e}\n"),
    }
}

fn fusion_report(seed: u64, branches: &str, channels: usize) -> lstnet::Result<String> {
    let mask: BranchMask = branches.parse()?;
    if !(1..=16).contains(&channels) {
        return Err(lstnet::Error::InvalidArgument("channels must be between 1 and 16".into()));
    }
    let mut rng = SplitMix64::new(seed);
    let block = MscBlock::<f64>::random(channels, mask, &mut rng);
    let fused = reparameterize(&block)?;
    let mut store = ParamStore::new();
    block.store(&mut store, "b");
    store_fused(&mut store, "b", &fused);
    let shape = [1, channels, 7, 7];
    let x: Vec<f64> = (0..channels * 49).map(|_| rng.gaussian()).collect();
    Ok(format!(
        "branches\t{mask}\nmacs per cell\t{} -> {}\nmax gap f64\t{:.3e}\nmax gap f32\t{:.3e}\n",
        block.macs_per_cell(),
        channels * channels * 9,
        max_gap::<f64>(&store, &x, shape, mask)?,
        max_gap::<f32>(&store, &x, shape, mask)?,
    ))
}
