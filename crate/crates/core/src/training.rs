//! Cross-entropy and self-critical training, Adam, checkpoints and gradient checks.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::container::Container;
use crate::data::{Split, Vocab};
use crate::layers::apply_bn_updates;
use crate::lsa::LsaMode;
use crate::metrics::{corpus_bleu, exact_match, sentence_bleu, tokenize, CiderD};
use crate::model::{
    beam_config, beam_search, decode_teacher, encode, fuse_model, init_params, Hypothesis,
    ModelConfig, ModelScorer, BOS, EOS, PAD,
};
use crate::params::{Graph, Mode, ParamStore};
use crate::real::Real;
use crate::rng::SplitMix64;
use crate::tensor::AdjointFault;
use crate::{Error, Result, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Ce,
    Scst,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Ce => "ce",
            Stage::Scst => "scst",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(Stage::Ce),
            "scst" => Ok(Stage::Scst),
            other => Err(Error::Config(format!("unknown stage '{other}'"))),
        }
    }
}

/// Piecewise learning rate over 1-based epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    /// Linear warmup over this many epochs, per optimization step.
    pub warmup_epochs: usize,
    /// `(epoch, lr)`: from `epoch` on the rate is `lr`.
    pub drops: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn paper_ce() -> Self {
        LrSchedule {
            base: 1e-4,
            warmup_epochs: 4,
            drops: vec![(10, 2e-5), (12, 4e-6)],
        }
    }

    pub fn paper_scst() -> Self {
        LrSchedule {
            base: 5e-6,
            warmup_epochs: 0,
            drops: vec![(35, 2.5e-6), (40, 5e-7), (45, 2.5e-7), (50, 5e-8)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base > 0.0 && self.base.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.base)));
        }
        let mut prev = (self.warmup_epochs, self.base);
        for &(e, lr) in &self.drops {
            if e <= prev.0 || !(lr > 0.0 && lr <= prev.1) {
                return Err(Error::Config(format!(
                    "learning-rate drop {e}:{lr} must come after epoch {} and not exceed {}",
                    prev.0, prev.1
                )));
            }
            prev = (e, lr);
        }
        Ok(())
    }

    /// Rate for step `step` (0-based) of 1-based `epoch`.
    pub fn lr(&self, epoch: usize, step: usize, steps_per_epoch: usize) -> f64 {
        if epoch <= self.warmup_epochs {
            let done = (epoch - 1) * steps_per_epoch + step + 1;
            return self.base * done as f64 / (self.warmup_epochs * steps_per_epoch) as f64;
        }
        self.drops
            .iter()
            .rev()
            .find(|(e, _)| epoch >= *e)
            .map_or(self.base, |(_, lr)| *lr)
    }

    /// `epoch:lr` pairs separated by commas.
    pub fn drops_text(&self) -> String {
        self.drops.iter().map(|(e, lr)| format!("{e}:{lr}")).collect::<Vec<_>>().join(",")
    }

    pub fn parse_drops(text: &str) -> Result<Vec<(usize, f64)>> {
        text.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|item| {
                let bad = || Error::Config(format!("bad learning-rate drop '{item}', expected epoch:lr"));
                let (e, lr) = item.split_once(':').ok_or_else(bad)?;
                Ok((e.trim().parse().map_err(|_| bad())?, lr.trim().parse().map_err(|_| bad())?))
            })
            .collect()
    }
}

/// Optimization settings of both stages.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub ce_epochs: usize,
    pub scst_epochs: usize,
    /// Images per CE step; every reference caption of an image is used.
    pub batch_size: usize,
    pub scst_batch_size: usize,
    pub ce_lr: LrSchedule,
    pub scst_lr: LrSchedule,
    pub clip_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Beam width for validation captions.
    pub eval_beam: usize,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            seed: 1,
            ce_epochs: 20,
            scst_epochs: 10,
            batch_size: 10,
            scst_batch_size: 10,
            ce_lr: LrSchedule {
                base: 1e-3,
                warmup_epochs: 2,
                drops: vec![(12, 3e-4), (17, 1e-4)],
            },
            scst_lr: LrSchedule {
                base: 2e-5,
                warmup_epochs: 0,
                drops: vec![],
            },
            clip_norm: 5.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            eval_beam: 3,
        }
    }

    pub fn paper() -> Self {
        TrainConfig {
            ce_epochs: 18,
            scst_epochs: 42,
            batch_size: 10,
            scst_batch_size: 100,
            ce_lr: LrSchedule::paper_ce(),
            scst_lr: LrSchedule::paper_scst(),
            eval_beam: 5,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ce_lr.validate()?;
        self.scst_lr.validate()?;
        if self.batch_size == 0 || self.scst_batch_size == 0 || self.eval_beam == 0 {
            return Err(Error::Config("batch sizes and eval_beam must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 16] = [
        "seed",
        "ce_epochs",
        "scst_epochs",
        "batch_size",
        "scst_batch_size",
        "ce_lr",
        "ce_warmup_epochs",
        "ce_lr_drops",
        "scst_lr",
        "scst_warmup_epochs",
        "scst_lr_drops",
        "clip_norm",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "eval_beam",
    ];

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let values = [
            self.seed.to_string(),
            self.ce_epochs.to_string(),
            self.scst_epochs.to_string(),
            self.batch_size.to_string(),
            self.scst_batch_size.to_string(),
            self.ce_lr.base.to_string(),
            self.ce_lr.warmup_epochs.to_string(),
            self.ce_lr.drops_text(),
            self.scst_lr.base.to_string(),
            self.scst_lr.warmup_epochs.to_string(),
            self.scst_lr.drops_text(),
            self.clip_norm.to_string(),
            self.adam_beta1.to_string(),
            self.adam_beta2.to_string(),
            self.adam_eps.to_string(),
            self.eval_beam.to_string(),
        ];
        Self::KEYS.iter().zip(values).map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<X: FromStr>(key: &str, v: &str) -> Result<X> {
            v.parse().map_err(|_| Error::Config(format!("invalid value '{v}' for {key}")))
        }
        let v = value.trim();
        match key {
            "seed" => self.seed = num(key, v)?,
            "ce_epochs" => self.ce_epochs = num(key, v)?,
            "scst_epochs" => self.scst_epochs = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "scst_batch_size" => self.scst_batch_size = num(key, v)?,
            "ce_lr" => self.ce_lr.base = num(key, v)?,
            "ce_warmup_epochs" => self.ce_lr.warmup_epochs = num(key, v)?,
            "ce_lr_drops" => self.ce_lr.drops = LrSchedule::parse_drops(v)?,
            "scst_lr" => self.scst_lr.base = num(key, v)?,
            "scst_warmup_epochs" => self.scst_lr.warmup_epochs = num(key, v)?,
            "scst_lr_drops" => self.scst_lr.drops = LrSchedule::parse_drops(v)?,
            "clip_norm" => self.clip_norm = num(key, v)?,
            "adam_beta1" => self.adam_beta1 = num(key, v)?,
            "adam_beta2" => self.adam_beta2 = num(key, v)?,
            "adam_eps" => self.adam_eps = num(key, v)?,
            "eval_beam" => self.eval_beam = num(key, v)?,
            other => return Err(Error::Config(format!("unknown training key '{other}'"))),
        }
        Ok(())
    }
}

/// Adam moments for every parameter that has received a gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: BTreeMap<String, Vec<T>>,
    pub v: BTreeMap<String, Vec<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

impl<T: Real> Default for AdamState<T> {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

/// One bias-corrected Adam update of every parameter in `grads`.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Vec<T>>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}[{i}]")));
        }
        let n = params.get(name)?.data.len();
        if g.len() != n {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: vec![n],
                rhs: vec![g.len()],
            });
        }
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (name, g) in grads {
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.len()]);
        let p = params.data_mut(name)?;
        for i in 0..g.len() {
            let gi = g[i].f64();
            let mi = b1 * m[i].f64() + (1.0 - b1) * gi;
            let vi = b2 * v[i].f64() + (1.0 - b2) * gi * gi;
            m[i] = T::c(mi);
            v[i] = T::c(vi);
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + state.eps);
            p[i] = T::c(p[i].f64() - update);
        }
    }
    Ok(())
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut BTreeMap<String, Vec<T>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|x| x.f64() * x.f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::c(max_norm / norm);
        for g in grads.values_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Mean negative log-likelihood of the non-pad `targets` under `logits`
/// `[.., V]`, one target per logit row.
pub fn ce_loss<T: Real>(tape: &Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let count = targets.iter().filter(|t| **t != PAD).count();
    if count == 0 {
        return Err(Error::invalid("every target is padding"));
    }
    let w = T::c(1.0 / count as f64);
    let weights: Vec<T> = targets.iter().map(|t| if *t == PAD { T::zero() } else { w }).collect();
    tape.weighted_nll(logits, targets, &weights)
}

/// Teacher-forcing rows for captions given as word ids (no bos or eos):
/// inputs start with bos, targets end with eos, both right-padded.
pub fn teacher_rows(captions: &[Vec<usize>]) -> (Vec<usize>, Vec<usize>, usize) {
    let len = captions.iter().map(|c| c.len() + 1).max().unwrap_or(1);
    let mut inputs = Vec::with_capacity(captions.len() * len);
    let mut targets = Vec::with_capacity(captions.len() * len);
    for c in captions {
        inputs.push(BOS);
        inputs.extend_from_slice(c);
        targets.extend_from_slice(c);
        targets.push(EOS);
        inputs.resize(inputs.len() + len - c.len() - 1, PAD);
        targets.resize(targets.len() + len - c.len() - 1, PAD);
    }
    (inputs, targets, len)
}

/// Gradients and statistics of one optimization step.
pub struct StepResult<T> {
    pub loss: f64,
    pub grads: BTreeMap<String, Vec<T>>,
    pub bn_updates: Vec<(String, Vec<T>, Vec<T>)>,
}

/// Forward and backward pass of the CE objective over `images` feature maps
/// with `per_image` captions each.
pub fn ce_step<T: Real>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    feats: &[T],
    images: usize,
    captions: &[Vec<usize>],
    dropout_seed: u64,
) -> Result<StepResult<T>> {
    if images == 0 || captions.len() % images != 0 {
        return Err(Error::invalid("captions must split evenly over images"));
    }
    let per_image = captions.len() / images;
    let (inputs, targets, len) = teacher_rows(captions);
    let tape = Tape::new();
    let g = Graph::new(&tape, params, Mode::Train, true).with_dropout(cfg.dropout, dropout_seed);
    let x = g.constant(&[images, cfg.n_grid(), cfg.feature_dim], feats.to_vec())?;
    let enc = encode(&g, cfg, x)?;
    let dec = decode_teacher(&g, cfg, enc.memory, &inputs, per_image, len)?;
    let loss = ce_loss(&tape, dec.logits, &targets)?;
    let value = tape.item(loss).f64();
    if !value.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    tape.backward(loss)?;
    Ok(StepResult {
        loss: value,
        grads: g.param_grads(),
        bn_updates: g.take_bn_updates(),
    })
}

/// Advantages `r_i - b` of `k` candidates, `b` being their mean reward.
pub fn scst_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    let k = rewards.len();
    if k < 2 {
        return Err(Error::invalid("self-critical training needs at least two candidates"));
    }
    let b = rewards.iter().sum::<f64>() / k as f64;
    Ok(rewards.iter().map(|r| r - b).collect())
}

/// Sum of CIDEr-D and sentence BLEU-4 of a caption against its references.
pub fn caption_reward(cider: &CiderD, words: &[String], image: usize) -> f64 {
    cider.score(words, image) + sentence_bleu(words, cider.references(image), 4)
}

/// Teacher-forcing rows for rewarded candidates: `(inputs, targets,
/// weights, len)`. Every generated token of a row, eos included, carries that
/// row's weight; padding carries none. Rows must be non-empty.
pub fn candidate_rows<T: Real>(rows: &[Vec<usize>], row_weight: &[f64]) -> (Vec<usize>, Vec<usize>, Vec<T>, usize) {
    let len = rows.iter().map(Vec::len).max().unwrap_or(1);
    let mut inputs = Vec::with_capacity(rows.len() * len);
    let mut targets = Vec::with_capacity(rows.len() * len);
    let mut weights = Vec::with_capacity(rows.len() * len);
    for (tokens, w) in rows.iter().zip(row_weight) {
        inputs.push(BOS);
        inputs.extend_from_slice(&tokens[..tokens.len() - 1]);
        inputs.resize(inputs.len() + len - tokens.len(), PAD);
        targets.extend_from_slice(tokens);
        targets.resize(targets.len() + len - tokens.len(), PAD);
        for t in 0..len {
            weights.push(if t < tokens.len() { T::c(*w) } else { T::zero() });
        }
    }
    (inputs, targets, weights, len)
}

pub struct ScstResult<T> {
    pub step: StepResult<T>,
    pub mean_reward: f64,
}

/// Self-critical step: `k` beam candidates per image are rewarded by
/// `reward(image, tokens)` and reinforced against their mean reward.
pub fn scst_step<T: Real>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    feats: &[T],
    images: usize,
    k: usize,
    reward: &dyn Fn(usize, &[usize]) -> f64,
    dropout_seed: u64,
) -> Result<ScstResult<T>> {
    if k < 2 {
        return Err(Error::invalid("self-critical training needs a beam of at least two"));
    }
    let memory = crate::model::encode_memory(params, cfg, feats, images)?;
    let mut scorer = ModelScorer::new(params, cfg, &memory, images)?;
    let beams = beam_search(&mut scorer, images, &beam_config(cfg, k))?;
    let mut rows: Vec<Vec<usize>> = Vec::with_capacity(images * k);
    let mut row_weight = Vec::with_capacity(images * k);
    let mut total_reward = 0.0;
    let mut rewarded = 0usize;
    for (i, hyps) in beams.iter().enumerate() {
        let r: Vec<f64> = hyps.iter().map(|h| reward(i, h.words(EOS))).collect();
        total_reward += r.iter().sum::<f64>();
        rewarded += r.len();
        let adv = if hyps.len() >= 2 { scst_advantages(&r)? } else { vec![0.0; hyps.len()] };
        for j in 0..k {
            match hyps.get(j) {
                Some(h) => {
                    rows.push(h.tokens.clone());
                    row_weight.push(adv[j] / (k * images) as f64);
                }
                None => {
                    rows.push(vec![EOS]);
                    row_weight.push(0.0);
                }
            }
        }
    }
    let (inputs, targets, weights, len) = candidate_rows::<T>(&rows, &row_weight);
    let tape = Tape::new();
    let g = Graph::new(&tape, params, Mode::Train, true).with_dropout(cfg.dropout, dropout_seed);
    let x = g.constant(&[images, cfg.n_grid(), cfg.feature_dim], feats.to_vec())?;
    let enc = encode(&g, cfg, x)?;
    let dec = decode_teacher(&g, cfg, enc.memory, &inputs, k, len)?;
    let loss = tape.weighted_nll(dec.logits, &targets, &weights)?;
    let value = tape.item(loss).f64();
    if !value.is_finite() {
        return Err(Error::NonFinite("self-critical loss".into()));
    }
    tape.backward(loss)?;
    Ok(ScstResult {
        step: StepResult {
            loss: value,
            grads: g.param_grads(),
            bn_updates: g.take_bn_updates(),
        },
        mean_reward: total_reward / rewarded.max(1) as f64,
    })
}

/// Parameters, configuration and progress saved between runs.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ParamStore<T>,
    pub epoch: usize,
    pub stage: Stage,
    pub adam: Option<AdamState<T>>,
}

/// Parameter names and trainability implied by a configuration.
pub fn param_template<T: Real>(cfg: &ModelConfig) -> Result<ParamStore<T>> {
    let mut base = cfg.clone();
    base.lsa_mode = LsaMode::MultiBranch;
    let mut s = init_params::<T>(&base, 0)?;
    if cfg.lsa_mode == LsaMode::Fused {
        fuse_model(&mut s, &mut base)?;
    }
    Ok(s)
}

fn parse_block(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Container(format!("bad config line '{line}'")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

impl<T: Real> Checkpoint<T> {
    fn config_block(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.model.to_pairs().into_iter().chain(self.train.to_pairs()) {
            s.push_str(&format!("{k}={v}\n"));
        }
        s.push_str(&format!("epoch={}\nstage={}\n", self.epoch, self.stage));
        if let Some(a) = &self.adam {
            s.push_str(&format!("adam_step={}\n", a.step));
        }
        s
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        let f32s = |v: &[T]| v.iter().map(|x| x.f64() as f32).collect::<Vec<_>>();
        for (name, p) in self.params.iter() {
            c.push(name.clone(), &p.shape, f32s(&p.data));
        }
        if let Some(a) = &self.adam {
            for (name, m) in &a.m {
                c.push(format!("adam.m.{name}"), &[m.len()], f32s(m));
            }
            for (name, v) in &a.v {
                c.push(format!("adam.v.{name}"), &[v.len()], f32s(v));
            }
        }
        c.config = self.config_block();
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let pairs = parse_block(&c.config)?;
        let model = ModelConfig::from_pairs(&pairs)?;
        let mut train = TrainConfig::desk();
        for key in TrainConfig::KEYS {
            if let Some(v) = pairs.get(key) {
                train.set(key, v)?;
            }
        }
        let field = |k: &str| pairs.get(k).ok_or_else(|| Error::Container(format!("checkpoint lacks '{k}'")));
        let epoch = field("epoch")?.parse().map_err(|_| Error::Container("bad epoch".into()))?;
        let stage = field("stage")?.parse()?;
        let mut params = param_template::<T>(&model)?;
        let mut seen = 0;
        let mut adam = pairs.get("adam_step").map(|s| -> Result<AdamState<T>> {
            let mut a = AdamState::new(train.adam_beta1, train.adam_beta2, train.adam_eps);
            a.step = s.parse().map_err(|_| Error::Container("bad adam_step".into()))?;
            Ok(a)
        }).transpose()?;
        for e in &c.entries {
            let values: Vec<T> = e.values.iter().map(|x| T::c(*x as f64)).collect();
            if let Some(rest) = e.name.strip_prefix("adam.") {
                let a = adam.as_mut().ok_or_else(|| Error::Container("optimizer entries without adam_step".into()))?;
                match rest.split_once('.') {
                    Some(("m", name)) => a.m.insert(name.to_string(), values),
                    Some(("v", name)) => a.v.insert(name.to_string(), values),
                    _ => return Err(Error::Container(format!("unknown optimizer entry {}", e.name))),
                };
                continue;
            }
            let p = params
                .get(&e.name)
                .map_err(|_| Error::Config(format!("checkpoint parameter '{}' does not fit the configuration", e.name)))?;
            if p.shape != e.shape {
                return Err(Error::Config(format!("parameter '{}' has shape {:?}, configuration expects {:?}", e.name, e.shape, p.shape)));
            }
            params.set(&e.name, values)?;
            seen += 1;
        }
        if seen != params.len() {
            return Err(Error::Config(format!("checkpoint holds {seen} of {} parameters", params.len())));
        }
        Ok(Checkpoint {
            model,
            train,
            params,
            epoch,
            stage,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Best-hypothesis word ids for every scene of a split.
pub fn generate_captions<T: Real>(
    params: &ParamStore<T>,
    cfg: &ModelConfig,
    split: &Split,
    beam: usize,
    batch: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(split.len());
    let bc = beam_config(cfg, beam);
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let feats: Vec<T> = split.features.gather(chunk).into_iter().map(|x| T::c(x as f64)).collect();
        let beams = crate::model::caption_batch(params, cfg, &feats, chunk.len(), &bc)?;
        out.extend(beams.into_iter().map(|h: Vec<Hypothesis>| h[0].words(EOS).to_vec()));
    }
    Ok(out)
}

/// Validation scores of generated captions.
#[derive(Clone, Debug, PartialEq)]
pub struct Validation {
    pub bleu4: f64,
    pub cider: f64,
    /// Exact-match rate over single-object scenes.
    pub single_exact: f64,
    pub captions: Vec<String>,
}

pub fn validate<T: Real>(params: &ParamStore<T>, cfg: &ModelConfig, split: &Split, vocab: &Vocab, beam: usize) -> Result<Validation> {
    let ids = generate_captions(params, cfg, split, beam, 50)?;
    let captions: Vec<String> = ids.iter().map(|c| vocab.decode(c)).collect();
    let cands: Vec<Vec<String>> = captions.iter().map(|c| tokenize(c)).collect();
    let refs: Vec<Vec<Vec<String>>> = split.captions.iter().map(|cs| cs.iter().map(|c| tokenize(c)).collect()).collect();
    let cider = CiderD::new(refs.clone())?.corpus_score(&cands)?.0;
    let bleu4 = corpus_bleu(&cands, &refs, 4)?;
    let single: Vec<usize> = (0..split.len()).filter(|&i| split.scenes[i].objects.len() == 1).collect();
    let hits = single.iter().filter(|&&i| exact_match(&cands[i], &refs[i])).count();
    Ok(Validation {
        bleu4,
        cider,
        single_exact: if single.is_empty() { 0.0 } else { hits as f64 / single.len() as f64 },
        captions,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub lr: f64,
    /// Mean CE loss, or mean reward for SCST.
    pub objective: f64,
    pub val_bleu4: f64,
    pub val_cider: f64,
}

pub const LOG_HEADER: &str = "epoch\tlr\tloss_or_reward\tval_bleu4\tval_cider";

impl fmt::Display for LogRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:e}\t{:.6}\t{:.6}\t{:.6}", self.epoch, self.lr, self.objective, self.val_bleu4, self.val_cider)
    }
}

pub struct TrainOutcome<T> {
    pub last: Checkpoint<T>,
    pub best: Checkpoint<T>,
    pub best_cider: f64,
    pub log: Vec<LogRow>,
}

/// Runs one stage. Epoch numbering continues from `init` when given.
/// With `out`, writes `epoch{N}.lstn`, `best.lstn` and `train_log.tsv` there.
#[allow(clippy::too_many_arguments)]
pub fn train_loop<T: Real>(
    stage: Stage,
    train: &Split,
    val: &Split,
    vocab: &Vocab,
    model: &ModelConfig,
    tcfg: &TrainConfig,
    init: Option<Checkpoint<T>>,
    out: Option<&Path>,
    progress: &mut dyn FnMut(&LogRow),
) -> Result<TrainOutcome<T>> {
    model.validate()?;
    tcfg.validate()?;
    if model.lsa_mode == LsaMode::Fused {
        return Err(Error::Config("a fused model cannot be trained".into()));
    }
    if vocab.len() > model.vocab_size {
        return Err(Error::Config(format!("vocabulary has {} tokens but vocab_size is {}", vocab.len(), model.vocab_size)));
    }
    if train.features.c != model.feature_dim || train.features.cells() != model.n_grid() {
        return Err(Error::Config("dataset features do not match the model grid or feature_dim".into()));
    }
    let (mut params, start_epoch) = match (&init, stage) {
        (Some(ck), _) => {
            let diff = ck.model.diff(model);
            if !diff.is_empty() {
                return Err(Error::Config(format!("checkpoint and configuration differ: {}", diff.join(", "))));
            }
            (ck.params.clone(), ck.epoch)
        }
        (None, Stage::Scst) => return Err(Error::Config("the scst stage needs an initial checkpoint".into())),
        (None, Stage::Ce) => (init_params::<T>(model, tcfg.seed)?, 0),
    };
    let mut adam = AdamState::new(tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps);
    let (epochs, batch, schedule) = match stage {
        Stage::Ce => (tcfg.ce_epochs, tcfg.batch_size, &tcfg.ce_lr),
        Stage::Scst => (tcfg.scst_epochs, tcfg.scst_batch_size, &tcfg.scst_lr),
    };
    let encoded: Vec<Vec<Vec<usize>>> = train.captions.iter().map(|cs| cs.iter().map(|c| vocab.encode(c)).collect()).collect();
    let cider = CiderD::new(train.captions.iter().map(|cs| cs.iter().map(|c| tokenize(c)).collect()).collect())?;
    let steps_per_epoch = train.len().div_ceil(batch);
    let mut root = SplitMix64::new(tcfg.seed);
    let mut order_rng = root.fork(1000 + stage as u64);
    let mut log = Vec::new();
    let mut best: Option<(f64, Checkpoint<T>)> = None;
    let mut last_good: Option<PathBuf> = None;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut last = None;
    for epoch in start_epoch + 1..=start_epoch + epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order_rng.shuffle(&mut order);
        let (mut obj_sum, mut obj_n) = (0.0, 0usize);
        let mut lr = 0.0;
        for (step, chunk) in order.chunks(batch).enumerate() {
            lr = schedule.lr(epoch - start_epoch, step, steps_per_epoch);
            let feats: Vec<T> = train.features.gather(chunk).into_iter().map(|x| T::c(x as f64)).collect();
            let seed = tcfg.seed ^ ((epoch as u64) << 32) ^ step as u64;
            let result = match stage {
                Stage::Ce => {
                    let caps: Vec<Vec<usize>> = chunk.iter().flat_map(|&i| encoded[i].iter().cloned()).collect();
                    ce_step(&params, model, &feats, chunk.len(), &caps, seed).map(|s| (s.loss, s))
                }
                Stage::Scst => {
                    let reward = |img: usize, words: &[usize]| {
                        let w: Vec<String> = words.iter().map(|&t| vocab.word(t).to_string()).collect();
                        caption_reward(&cider, &w, chunk[img])
                    };
                    scst_step(&params, model, &feats, chunk.len(), model.beam_size.max(2), &reward, seed).map(|s| (s.mean_reward, s.step))
                }
            };
            let (objective, mut step_out) = match result {
                Ok(r) => r,
                Err(Error::NonFinite(what)) => {
                    return Err(Error::Diverged {
                        epoch,
                        reason: what,
                        last_good,
                    })
                }
                Err(e) => return Err(e),
            };
            clip_grad_norm(&mut step_out.grads, tcfg.clip_norm);
            adam_step(&mut params, &step_out.grads, &mut adam, lr).map_err(|e| match e {
                Error::NonFinite(what) => Error::Diverged {
                    epoch,
                    reason: what,
                    last_good: last_good.clone(),
                },
                e => e,
            })?;
            apply_bn_updates(&mut params, &step_out.bn_updates)?;
            obj_sum += objective * chunk.len() as f64;
            obj_n += chunk.len();
        }
        if !params.all_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: "non-finite parameters".into(),
                last_good,
            });
        }
        let v = validate(&params, model, val, vocab, tcfg.eval_beam)?;
        let row = LogRow {
            epoch,
            lr,
            objective: obj_sum / obj_n.max(1) as f64,
            val_bleu4: v.bleu4,
            val_cider: v.cider,
        };
        progress(&row);
        log.push(row);
        let ck = Checkpoint {
            model: model.clone(),
            train: tcfg.clone(),
            params: params.clone(),
            epoch,
            stage,
            adam: Some(adam.clone()),
        };
        let improved = best.as_ref().map_or(true, |(c, _)| v.cider > *c);
        if let Some(dir) = out {
            let path = dir.join(format!("epoch{epoch}.lstn"));
            ck.save(&path)?;
            last_good = Some(path);
            if improved {
                ck.save(&dir.join("best.lstn"))?;
            }
            let mut text = format!("{LOG_HEADER}\n");
            for r in &log {
                text.push_str(&format!("{r}\n"));
            }
            let p = dir.join("train_log.tsv");
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        if improved {
            best = Some((v.cider, ck.clone()));
        }
        last = Some(ck);
    }
    let last = match last {
        Some(l) => l,
        None => Checkpoint {
            model: model.clone(),
            train: tcfg.clone(),
            params,
            epoch: start_epoch,
            stage,
            adam: None,
        },
    };
    let (best_cider, best) = best.unwrap_or((f64::NAN, last.clone()));
    Ok(TrainOutcome { last, best, best_cider, log })
}

/// What a gradient check differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradcheckTarget {
    /// The full captioning loss through encoder, fusion and decoder.
    Full,
    /// A fixed weighted sum of one linear map of the features.
    LinearOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub coords: usize,
    /// Parameter name and index of the worst coordinate.
    pub worst: (String, usize),
}

/// Small model used by gradient checks: width 16 on a 3x3 grid.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_enc_layers: 3,
        n_dec_layers: 2,
        ffn_expansion: 2,
        grid_h: 3,
        grid_w: 3,
        feature_dim: 8,
        vocab_size: 10,
        max_decode_len: 6,
        dropout: 0.0,
        ..ModelConfig::desk()
    }
}

pub const GRADCHECK_COORDS: usize = 256;
const FD_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-6;

/// Compares analytic gradients with central differences on randomly chosen
/// parameter coordinates (at least one per tensor). Coordinates whose
/// difference quotient changes with the step size sit on a ReLU kink and are
/// redrawn.
pub fn gradcheck(cfg: &ModelConfig, seed: u64, target: GradcheckTarget, fault: Option<AdjointFault>) -> Result<GradcheckReport> {
    let mut rng = SplitMix64::new(seed);
    let images = 2;
    let per_image = 2;
    let n = cfg.n_grid();
    let feats: Vec<f64> = (0..images * n * cfg.feature_dim).map(|_| rng.gaussian()).collect();
    let captions: Vec<Vec<usize>> = (0..images * per_image)
        .map(|_| (0..3).map(|_| 4 + rng.below((cfg.vocab_size - 4) as u64) as usize).collect())
        .collect();
    let (inputs, targets, len) = teacher_rows(&captions);
    let weights: Vec<f64> = (0..images * n * cfg.vocab_size).map(|_| rng.gaussian()).collect();

    let mut params = match target {
        GradcheckTarget::Full => init_params::<f64>(cfg, seed)?,
        GradcheckTarget::LinearOnly => {
            let mut s = ParamStore::new();
            crate::layers::init_linear(&mut s, "probe", cfg.feature_dim, cfg.vocab_size, &mut rng.fork(1));
            s
        }
    };
    // move off the symmetric initial values (unit gains, zero biases)
    let mut jitter = rng.fork(2);
    for name in params.names() {
        if params.get(&name)?.trainable {
            for x in params.data_mut(&name)?.iter_mut() {
                *x += jitter.uniform(-0.2, 0.2);
            }
        }
    }

    let loss = |g: &Graph<f64>| -> Result<Var> {
        let x = g.constant(&[images, n, cfg.feature_dim], feats.clone())?;
        match target {
            GradcheckTarget::Full => {
                let enc = encode(g, cfg, x)?;
                let dec = decode_teacher(g, cfg, enc.memory, &inputs, per_image, len)?;
                ce_loss(g, dec.logits, &targets)
            }
            GradcheckTarget::LinearOnly => {
                let y = crate::layers::linear(g, x, "probe")?;
                let w = g.constant(&[images, n, cfg.vocab_size], weights.clone())?;
                let prod = g.mul(y, w)?;
                g.sum_all(prod)
            }
        }
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let tape = Tape::new();
        let g = Graph::new(&tape, s, Mode::Train, false);
        let out = loss(&g)?;
        Ok(tape.item(out))
    };
    let tape = Tape::new();
    tape.inject_adjoint_fault(fault);
    let g = Graph::new(&tape, &params, Mode::Train, true);
    let out = loss(&g)?;
    tape.backward(out)?;
    let grads = g.param_grads();
    drop(g);

    let trainable: Vec<(String, usize)> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(k, p)| (k.clone(), p.data.len()))
        .collect();
    let total: usize = trainable.iter().map(|(_, n)| n).sum();
    let mut pick = rng.fork(3);
    let mut draw = |tensor: Option<usize>| -> (String, usize) {
        match tensor {
            Some(t) => (trainable[t].0.clone(), pick.below(trainable[t].1 as u64) as usize),
            None => {
                let mut at = pick.below(total as u64) as usize;
                for (name, n) in &trainable {
                    if at < *n {
                        return (name.clone(), at);
                    }
                    at -= n;
                }
                unreachable!("index drawn below the total")
            }
        }
    };
    let wanted = GRADCHECK_COORDS.max(trainable.len());
    let mut probe = params.clone();
    let mut fd = |name: &str, i: usize, h: f64| -> Result<f64> {
        let orig = probe.data(name)?[i];
        probe.data_mut(name)?[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut(name)?[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut(name)?[i] = orig;
        Ok((up - down) / (2.0 * h))
    };
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        coords: 0,
        worst: (String::new(), 0),
    };
    let mut attempts = 0;
    while report.coords < wanted {
        attempts += 1;
        if attempts > 20 * wanted {
            return Err(Error::invalid("too many coordinates sit on activation kinks"));
        }
        let (name, i) = draw((report.coords < trainable.len()).then_some(report.coords));
        let numeric = fd(&name, i, FD_STEP)?;
        let half = fd(&name, i, FD_STEP / 2.0)?;
        if (numeric - half).abs() > 1e-6 * numeric.abs().max(1e-3) {
            continue;
        }
        let analytic = grads.get(&name).map_or(0.0, |g| g[i]);
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = (name, i);
        }
        report.coords += 1;
    }
    Ok(report)
}
