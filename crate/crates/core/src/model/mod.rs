//! The full captioning model: input projection, encoder stack with LSA,
//! cross-layer fusion, and a Transformer decoder with cached incremental
//! decoding.
//!
//! Parameter names:
//! `input`, `enc{l}.{msa,lsa,ffn,ln1,ln2,ln3}`, `fuse`, `dec.emb`,
//! `dec{l}.{self,cross,ffn,ln1,ln2,ln3}`, `dec.out`.

mod attn;
mod beam;
mod config;
mod pool;

pub use attn::{attn_dump, encoder_top_map, rescale_u8, write_pgm};
pub use beam::{beam_search, greedy_decode, BeamConfig, Hypothesis, StepScorer};
pub use config::{Arrangement, ModelConfig};
pub use pool::avg_pool_grid;

use crate::layers::{
    attend, causal_mask, embed, ffn_forward, init_ffn, init_layer_norm, init_linear, init_msa,
    layer_norm, linear, msa_forward, project_kv,
};
use crate::lsa::{init_lsa, lsa_forward};
use crate::lsf::{fuse_ablation, init_fusion};
use crate::params::{Graph, Mode, ParamStore};
use crate::real::Real;
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Var};
use crate::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

/// Fresh parameters for `cfg`. Every component draws from its own stream, so
/// toggling one module leaves the initialization of the others unchanged.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let stream = |tag: u64| SplitMix64::new(seed).fork(tag);
    let d = cfg.d_model;
    let heads = cfg.n_heads;
    let mut s = ParamStore::new();
    init_linear(&mut s, "input", cfg.feature_dim, d, &mut stream(1));
    for l in 0..cfg.n_enc_layers {
        let p = format!("enc{l}");
        let tag = 100 * (l as u64 + 1);
        let rel = cfg.relative_bias.then(|| cfg.grid());
        init_msa(&mut s, &format!("{p}.msa"), d, heads, rel, &mut stream(tag + 1));
        if cfg.lsa_enabled {
            init_lsa(&mut s, &format!("{p}.lsa"), d, cfg.branches, &mut stream(tag + 2));
        }
        init_ffn(&mut s, &format!("{p}.ffn"), d, cfg.ffn_expansion, &mut stream(tag + 3));
        for ln in ["ln1", "ln2", "ln3"] {
            init_layer_norm(&mut s, &format!("{p}.{ln}"), d);
        }
    }
    init_fusion(&mut s, "fuse", cfg.effective_fusion(), d, &mut stream(2));
    let emb = crate::params::uniform_init(&mut stream(3), cfg.vocab_size * d, d);
    s.insert("dec.emb", &[cfg.vocab_size, d], emb, true);
    for l in 0..cfg.n_dec_layers {
        let p = format!("dec{l}");
        let tag = 10_000 + 100 * l as u64;
        init_msa(&mut s, &format!("{p}.self"), d, heads, None, &mut stream(tag + 1));
        init_msa(&mut s, &format!("{p}.cross"), d, heads, None, &mut stream(tag + 2));
        init_ffn(&mut s, &format!("{p}.ffn"), d, cfg.ffn_expansion, &mut stream(tag + 3));
        for ln in ["ln1", "ln2", "ln3"] {
            init_layer_norm(&mut s, &format!("{p}.{ln}"), d);
        }
    }
    init_linear(&mut s, "dec.out", d, cfg.vocab_size, &mut stream(4));
    Ok(s)
}

/// Folds every LSA block into single 3x3 convolutions and switches the
/// configuration to fused inference.
pub fn fuse_model<T: Real>(params: &mut ParamStore<T>, cfg: &mut ModelConfig) -> Result<()> {
    if !cfg.lsa_enabled {
        return Err(Error::Config("model has no LSA blocks to fuse".into()));
    }
    if cfg.lsa_mode == crate::lsa::LsaMode::Fused {
        return Err(Error::Config("model is already fused".into()));
    }
    for l in 0..cfg.n_enc_layers {
        crate::lsa::fuse_lsa(params, &format!("enc{l}.lsa"), cfg.d_model, cfg.branches)?;
    }
    cfg.lsa_mode = crate::lsa::LsaMode::Fused;
    Ok(())
}

/// Encoder result for a batch of images.
pub struct Encoded {
    /// Output of every encoder layer, `[b, N, d]`.
    pub layers: Vec<Var>,
    /// Self-attention weights of every layer, `[b, heads, N, N]`.
    pub attn: Vec<Var>,
    /// Fused memory handed to the decoder, `[b, N, d]`.
    pub memory: Var,
}

/// Encodes raw grid features `[b, N, feature_dim]`.
pub fn encode<T: Real>(g: &Graph<T>, cfg: &ModelConfig, feats: Var) -> Result<Encoded> {
    let s = g.shape(feats);
    if s.len() != 3 || s[1] != cfg.n_grid() || s[2] != cfg.feature_dim {
        return Err(Error::ShapeMismatch {
            op: "encode",
            lhs: s,
            rhs: vec![0, cfg.n_grid(), cfg.feature_dim],
        });
    }
    let grid = cfg.grid();
    let rel = cfg.relative_bias.then_some(grid);
    let mut x = linear(g, feats, "input")?;
    let mut layers = Vec::with_capacity(cfg.n_enc_layers);
    let mut maps = Vec::with_capacity(cfg.n_enc_layers);
    for l in 0..cfg.n_enc_layers {
        let p = format!("enc{l}");
        let msa = |v: Var| msa_forward(g, v, v, &format!("{p}.msa"), cfg.n_heads, None, rel);
        let lsa = |v: Var| {
            lsa_forward(g, v, &format!("{p}.lsa"), grid, cfg.lsa_mode, cfg.branches)
        };
        let ln = |v: Var, which: &str| layer_norm(g, v, &format!("{p}.{which}"));
        let mid = if !cfg.lsa_enabled {
            let (a, att) = msa(x)?;
            maps.push(att);
            ln(g.add(x, a)?, "ln1")?
        } else {
            match cfg.arrangement {
                Arrangement::SaThenLsa => {
                    let (a, att) = msa(x)?;
                    maps.push(att);
                    let v1 = ln(g.add(x, a)?, "ln1")?;
                    ln(g.add(v1, lsa(v1)?)?, "ln2")?
                }
                Arrangement::LsaThenSa => {
                    let v1 = ln(g.add(x, lsa(x)?)?, "ln1")?;
                    let (a, att) = msa(v1)?;
                    maps.push(att);
                    ln(g.add(v1, a)?, "ln2")?
                }
                Arrangement::Parallel => {
                    let (a, att) = msa(x)?;
                    maps.push(att);
                    ln(g.add(g.add(x, a)?, lsa(x)?)?, "ln1")?
                }
            }
        };
        let f = ffn_forward(g, mid, &format!("{p}.ffn"))?;
        x = ln(g.add(mid, f)?, "ln3")?;
        layers.push(x);
    }
    let n = layers.len();
    let memory = match cfg.effective_fusion() {
        crate::lsf::FusionMethod::None => layers[n - 1],
        method => fuse_ablation(
            g,
            layers[0],
            layers[1],
            layers[n - 1],
            "fuse",
            method,
            grid,
            cfg.shift_distance,
            cfg.lambda,
        )?,
    };
    Ok(Encoded {
        layers,
        attn: maps,
        memory,
    })
}

/// Teacher-forced decoder output.
pub struct Decoded {
    /// `[images * seqs_per_image, len, vocab]`
    pub logits: Var,
    /// Last-layer cross-attention, `[images, heads, seqs_per_image * len, N]`.
    pub cross_attn: Var,
}

/// Runs the decoder over `tokens` (row-major `[images * seqs_per_image, len]`,
/// sequences of one image contiguous) against `memory: [images, N, d]`.
pub fn decode_teacher<T: Real>(
    g: &Graph<T>,
    cfg: &ModelConfig,
    memory: Var,
    tokens: &[usize],
    seqs_per_image: usize,
    len: usize,
) -> Result<Decoded> {
    let ms = g.shape(memory);
    if ms.len() != 3 || ms[2] != cfg.d_model {
        return Err(Error::ShapeMismatch {
            op: "decode (memory)",
            lhs: ms,
            rhs: vec![0, 0, cfg.d_model],
        });
    }
    let images = ms[0];
    let rows = images * seqs_per_image;
    if len == 0 || tokens.len() != rows * len {
        return Err(Error::invalid(format!(
            "expected {rows} token rows of length {len}, got {} tokens",
            tokens.len()
        )));
    }
    let d = cfg.d_model;
    let mask = causal_mask(len);
    let mut x = embed(g, "dec.emb", tokens, rows, 0)?;
    let mut cross_attn = None;
    for l in 0..cfg.n_dec_layers {
        let p = format!("dec{l}");
        let (a, _) = msa_forward(g, x, x, &format!("{p}.self"), cfg.n_heads, Some(&mask), None)?;
        let x1 = layer_norm(g, g.add(x, a)?, &format!("{p}.ln1"))?;
        let q = g.reshape(x1, &[images, seqs_per_image * len, d])?;
        let (c, att) = msa_forward(g, q, memory, &format!("{p}.cross"), cfg.n_heads, None, None)?;
        let c = g.reshape(c, &[rows, len, d])?;
        cross_attn = Some(att);
        let x2 = layer_norm(g, g.add(x1, c)?, &format!("{p}.ln2"))?;
        let f = ffn_forward(g, x2, &format!("{p}.ffn"))?;
        x = layer_norm(g, g.add(x2, f)?, &format!("{p}.ln3"))?;
    }
    Ok(Decoded {
        logits: linear(g, x, "dec.out")?,
        cross_attn: cross_attn.expect("at least one decoder layer"),
    })
}

/// Key/value state of an incremental decode over a batch of images.
pub struct DecodeCache<T> {
    heads: usize,
    n_mem: usize,
    /// Per layer, `[images, h, dh, N]` and `[images, h, N, dh]`.
    mem_k: Vec<Vec<T>>,
    mem_v: Vec<Vec<T>>,
    /// Per layer, `[rows, h, dh, t]` and `[rows, h, t, dh]`.
    self_k: Vec<Vec<T>>,
    self_v: Vec<Vec<T>>,
    row_image: Vec<usize>,
    len: usize,
}

impl<T: Real> DecodeCache<T> {
    /// Image index of every live row.
    pub fn row_image(&self) -> &[usize] {
        &self.row_image
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Projects the memory once per decoder layer; starts one row per image.
pub fn start_decode<T: Real>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    memory: &[T],
    images: usize,
) -> Result<DecodeCache<T>> {
    let n = cfg.n_grid();
    let d = cfg.d_model;
    if memory.len() != images * n * d {
        return Err(Error::ShapeMismatch {
            op: "start_decode",
            lhs: vec![memory.len()],
            rhs: vec![images, n, d],
        });
    }
    let tape = Tape::new();
    let g = Graph::new(&tape, params, Mode::Infer, false);
    let mem = g.constant(&[images, n, d], memory.to_vec())?;
    let mut mem_k = Vec::new();
    let mut mem_v = Vec::new();
    for l in 0..cfg.n_dec_layers {
        let (k, v) = project_kv(&g, mem, &format!("dec{l}.cross"), cfg.n_heads)?;
        mem_k.push(g.to_vec(k));
        mem_v.push(g.to_vec(v));
    }
    Ok(DecodeCache {
        heads: cfg.n_heads,
        n_mem: n,
        mem_k,
        mem_v,
        self_k: vec![Vec::new(); cfg.n_dec_layers],
        self_v: vec![Vec::new(); cfg.n_dec_layers],
        row_image: (0..images).collect(),
        len: 0,
    })
}

fn gather_rows<T: Copy>(data: &[T], row_len: usize, rows: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(rows.len() * row_len);
    for &r in rows {
        out.extend_from_slice(&data[r * row_len..(r + 1) * row_len]);
    }
    out
}

/// Output of one incremental decoder step.
pub struct StepOutput<T> {
    /// `[rows, vocab]`
    pub logits: Vec<T>,
    /// Last-layer cross-attention averaged over heads, `[rows, N]`.
    pub cross_attn: Vec<T>,
}

/// Feeds one token per row at position `cache.len()`. Row `i` continues the
/// history of previous row `parents[i]` (on the first step, the image index).
pub fn decode_step<T: Real>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    cache: &mut DecodeCache<T>,
    parents: &[usize],
    tokens: &[usize],
) -> Result<StepOutput<T>> {
    if parents.len() != tokens.len() || tokens.is_empty() {
        return Err(Error::invalid("parents and tokens must be non-empty and aligned"));
    }
    let prev_rows = cache.row_image.len();
    if let Some(bad) = parents.iter().find(|p| **p >= prev_rows) {
        return Err(Error::invalid(format!("parent row {bad} out of {prev_rows}")));
    }
    let rows = tokens.len();
    let d = cfg.d_model;
    let h = cache.heads;
    let dh = d / h;
    let t = cache.len;
    let n = cache.n_mem;
    cache.row_image = parents.iter().map(|p| cache.row_image[*p]).collect();

    let tape = Tape::new();
    let g = Graph::new(&tape, params, Mode::Infer, false);
    let mut x = embed(&g, "dec.emb", tokens, rows, t)?;
    let mut cross = None;
    for l in 0..cfg.n_dec_layers {
        let p = format!("dec{l}");
        let (k_new, v_new) = project_kv(&g, x, &format!("{p}.self"), h)?;
        let (k_all, v_all) = if t == 0 {
            (k_new, v_new)
        } else {
            let k_old = gather_rows(&cache.self_k[l], h * dh * t, parents);
            let v_old = gather_rows(&cache.self_v[l], h * t * dh, parents);
            let k_old = g.constant(&[rows, h, dh, t], k_old)?;
            let v_old = g.constant(&[rows, h, t, dh], v_old)?;
            (g.concat(&[k_old, k_new], 3)?, g.concat(&[v_old, v_new], 2)?)
        };
        cache.self_k[l] = g.to_vec(k_all);
        cache.self_v[l] = g.to_vec(v_all);
        let (a, _) = attend(&g, x, k_all, v_all, &format!("{p}.self"), h, None, None)?;
        let x1 = layer_norm(&g, g.add(x, a)?, &format!("{p}.ln1"))?;
        let mk = g.constant(&[rows, h, dh, n], gather_rows(&cache.mem_k[l], h * dh * n, &cache.row_image))?;
        let mv = g.constant(&[rows, h, n, dh], gather_rows(&cache.mem_v[l], h * n * dh, &cache.row_image))?;
        let (c, att) = attend(&g, x1, mk, mv, &format!("{p}.cross"), h, None, None)?;
        cross = Some(att);
        let x2 = layer_norm(&g, g.add(x1, c)?, &format!("{p}.ln2"))?;
        let f = ffn_forward(&g, x2, &format!("{p}.ffn"))?;
        x = layer_norm(&g, g.add(x2, f)?, &format!("{p}.ln3"))?;
    }
    cache.len += 1;
    let logits = g.to_vec(linear(&g, x, "dec.out")?);
    let att = g.to_vec(cross.expect("at least one decoder layer"));
    let mut avg = vec![T::zero(); rows * n];
    let inv = T::c(1.0 / h as f64);
    for r in 0..rows {
        for head in 0..h {
            let src = &att[(r * h + head) * n..(r * h + head + 1) * n];
            for (a, s) in avg[r * n..(r + 1) * n].iter_mut().zip(src) {
                *a += *s * inv;
            }
        }
    }
    Ok(StepOutput {
        logits,
        cross_attn: avg,
    })
}

/// Encodes a batch of raw features `[images, N, feature_dim]` in inference
/// mode and returns the fused memory values.
pub fn encode_memory<T: Real>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    feats: &[T],
    images: usize,
) -> Result<Vec<T>> {
    let tape = Tape::new();
    let g = Graph::new(&tape, params, Mode::Infer, false);
    let x = g.constant(&[images, cfg.n_grid(), cfg.feature_dim], feats.to_vec())?;
    let enc = encode(&g, cfg, x)?;
    g.check_finite(enc.memory, "encoder memory")?;
    Ok(g.to_vec(enc.memory))
}

/// Log-softmax of each `width`-wide row, in f64.
pub fn log_softmax_rows<T: Real>(logits: &[T], width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(width) {
        let m = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v.f64() - m).exp()).sum::<f64>().ln() + m;
        out.extend(row.iter().map(|v| v.f64() - z));
    }
    out
}

/// Step scorer backed by the model's incremental decoder.
pub struct ModelScorer<'a, T: Real> {
    params: &'a ParamStore<T>,
    cfg: &'a ModelConfig,
    cache: DecodeCache<T>,
    /// Head-averaged cross-attention of every step, per row of that step.
    pub attention: Vec<Vec<T>>,
    pub keep_attention: bool,
}

impl<'a, T: Real> ModelScorer<'a, T> {
    pub fn new(params: &'a ParamStore<T>, cfg: &'a ModelConfig, memory: &[T], images: usize) -> Result<Self> {
        Ok(ModelScorer {
            params,
            cfg,
            cache: start_decode(params, cfg, memory, images)?,
            attention: Vec::new(),
            keep_attention: false,
        })
    }
}

impl<T: Real> StepScorer for ModelScorer<'_, T> {
    fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn step(&mut self, parents: &[usize], tokens: &[usize]) -> Result<Vec<f64>> {
        let out = decode_step(self.params, self.cfg, &mut self.cache, parents, tokens)?;
        if out.logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decoder logits".into()));
        }
        if self.keep_attention {
            self.attention.push(out.cross_attn);
        }
        Ok(log_softmax_rows(&out.logits, self.cfg.vocab_size))
    }
}

/// Beam-search captions for `images` feature maps; best hypotheses first.
pub fn caption_batch<T: Real>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    feats: &[T],
    images: usize,
    beam: &BeamConfig,
) -> Result<Vec<Vec<Hypothesis>>> {
    let memory = encode_memory(params, cfg, feats, images)?;
    let mut scorer = ModelScorer::new(params, cfg, &memory, images)?;
    beam_search(&mut scorer, images, beam)
}

/// Beam settings implied by a model configuration.
pub fn beam_config(cfg: &ModelConfig, beam_size: usize) -> BeamConfig {
    BeamConfig {
        beam_size,
        max_len: cfg.max_decode_len,
        bos: BOS,
        eos: EOS,
        suppress: vec![PAD, BOS],
    }
}

/// Attention maps of one image while its caption `words` is generated:
/// head-averaged last-layer cross-attention for each emitted token (the
/// words, then eos) and the top encoder layer's self-attention map.
pub fn attention_maps<T: Real>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    feats: &[T],
    words: &[usize],
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let n = cfg.n_grid();
    let tape = Tape::new();
    let g = Graph::new(&tape, params, Mode::Infer, false);
    let x = g.constant(&[1, n, cfg.feature_dim], feats.to_vec())?;
    let enc = encode(&g, cfg, x)?;
    let mut tokens = vec![BOS];
    tokens.extend_from_slice(words);
    let len = tokens.len();
    let dec = decode_teacher(&g, cfg, enc.memory, &tokens, 1, len)?;
    let cross = g.to_vec(dec.cross_attn);
    let heads = cfg.n_heads;
    let token_maps = (0..len)
        .map(|t| {
            let mut m = vec![0.0; n];
            for h in 0..heads {
                let row = &cross[(h * len + t) * n..(h * len + t + 1) * n];
                for (o, a) in m.iter_mut().zip(row) {
                    *o += a.f64() / heads as f64;
                }
            }
            m
        })
        .collect();
    let top = enc.attn.last().ok_or_else(|| Error::invalid("encoder has no layers"))?;
    Ok((token_maps, encoder_top_map(&g.to_vec(*top), heads, n)))
}
