use std::cmp::Ordering;

use crate::{Error, Result};

/// Next-token distribution source for decoding.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;

    /// Feeds one token per live row and returns next-token log-probabilities,
    /// row-major `[rows, vocab]`. Row `i` extends the history of previous row
    /// `parents[i]`; on the first call previous rows are the groups.
    fn step(&mut self, parents: &[usize], tokens: &[usize]) -> Result<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Maximum generated tokens per hypothesis, eos included.
    pub max_len: usize,
    pub bos: usize,
    pub eos: usize,
    /// Tokens that are never generated.
    pub suppress: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens, without bos; ends with eos unless truncated.
    pub tokens: Vec<usize>,
    /// Sum of per-token log-probabilities.
    pub log_prob: f64,
}

impl Hypothesis {
    /// Length-normalized log-probability.
    pub fn score(&self) -> f64 {
        self.log_prob / self.tokens.len().max(1) as f64
    }

    /// Generated words, eos removed.
    pub fn words(&self, eos: usize) -> &[usize] {
        match self.tokens.last() {
            Some(t) if *t == eos => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Best first: higher normalized score, then lower token ids, then shorter.
pub fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score()
        .partial_cmp(&a.score())
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then_with(|| a.tokens.len().cmp(&b.tokens.len()))
}

struct Candidate {
    parent: usize,
    token: usize,
    log_prob: f64,
}

/// Beam search over `groups` independent inputs.
///
/// Each step ranks every extension of the live beams of a group and keeps
/// the best `beam_size - finished` of them; extensions ending in eos move to
/// the finished set. Live beams reaching `max_len` are finished as they are.
/// Returns, per group, the finished hypotheses best first.
pub fn beam_search<S: StepScorer>(
    scorer: &mut S,
    groups: usize,
    cfg: &BeamConfig,
) -> Result<Vec<Vec<Hypothesis>>> {
    if cfg.beam_size < 1 {
        return Err(Error::invalid("beam size must be at least 1"));
    }
    if cfg.max_len < 1 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let v = scorer.vocab_size();
    let mut suppressed = vec![false; v];
    for &t in &cfg.suppress {
        if t < v {
            suppressed[t] = true;
        }
    }
    // live beams: (group, tokens, log_prob), rows in group order
    let mut live: Vec<(usize, Vec<usize>, f64)> = (0..groups).map(|g| (g, Vec::new(), 0.0)).collect();
    let mut finished: Vec<Vec<Hypothesis>> = vec![Vec::new(); groups];
    let mut parents: Vec<usize> = (0..groups).collect();
    let mut feed: Vec<usize> = vec![cfg.bos; groups];
    for step in 0..cfg.max_len {
        if live.is_empty() {
            break;
        }
        let logp = scorer.step(&parents, &feed)?;
        if logp.len() != live.len() * v {
            return Err(Error::invalid("scorer returned a wrongly sized distribution"));
        }
        let mut next_live = Vec::new();
        let mut next_parents = Vec::new();
        let mut next_feed = Vec::new();
        let mut row = 0;
        while row < live.len() {
            let group = live[row].0;
            let end = live[row..].iter().position(|b| b.0 != group).map_or(live.len(), |p| row + p);
            let mut cands = Vec::with_capacity((end - row) * v);
            for r in row..end {
                for tok in 0..v {
                    if suppressed[tok] {
                        continue;
                    }
                    let lp = logp[r * v + tok];
                    if lp.is_finite() {
                        cands.push(Candidate {
                            parent: r,
                            token: tok,
                            log_prob: live[r].2 + lp,
                        });
                    }
                }
            }
            // all live beams share a length, so total log-prob orders them
            cands.sort_by(|a, b| {
                b.log_prob
                    .partial_cmp(&a.log_prob)
                    .unwrap_or(Ordering::Equal)
                    .then_with(|| live[a.parent].1.cmp(&live[b.parent].1))
                    .then_with(|| a.token.cmp(&b.token))
            });
            let slots = cfg.beam_size.saturating_sub(finished[group].len());
            for c in cands.into_iter().take(slots) {
                let mut tokens = live[c.parent].1.clone();
                tokens.push(c.token);
                if c.token == cfg.eos || step + 1 == cfg.max_len {
                    finished[group].push(Hypothesis {
                        tokens,
                        log_prob: c.log_prob,
                    });
                } else {
                    next_parents.push(c.parent);
                    next_feed.push(c.token);
                    next_live.push((group, tokens, c.log_prob));
                }
            }
            row = end;
        }
        live = next_live;
        parents = next_parents;
        feed = next_feed;
    }
    for f in &mut finished {
        f.sort_by(rank);
    }
    Ok(finished)
}

/// Argmax decoding (lowest id on ties) until eos or `max_len` tokens.
pub fn greedy_decode<S: StepScorer>(scorer: &mut S, groups: usize, cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    let v = scorer.vocab_size();
    let mut out: Vec<Option<Hypothesis>> = vec![None; groups];
    let mut live: Vec<(usize, Vec<usize>, f64)> = (0..groups).map(|g| (g, Vec::new(), 0.0)).collect();
    let mut parents: Vec<usize> = (0..groups).collect();
    let mut feed = vec![cfg.bos; groups];
    for step in 0..cfg.max_len {
        if live.is_empty() {
            break;
        }
        let logp = scorer.step(&parents, &feed)?;
        let mut next = Vec::new();
        parents.clear();
        feed.clear();
        for (r, (group, mut tokens, lp)) in live.into_iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for tok in 0..v {
                if cfg.suppress.contains(&tok) {
                    continue;
                }
                let l = logp[r * v + tok];
                if best.map_or(true, |(_, b)| l > b) {
                    best = Some((tok, l));
                }
            }
            let (tok, l) = best.ok_or_else(|| Error::invalid("every token is suppressed"))?;
            tokens.push(tok);
            if tok == cfg.eos || step + 1 == cfg.max_len {
                out[group] = Some(Hypothesis {
                    tokens,
                    log_prob: lp + l,
                });
            } else {
                parents.push(r);
                feed.push(tok);
                next.push((group, tokens, lp + l));
            }
        }
        live = next;
    }
    Ok(out.into_iter().map(|h| h.expect("every group finishes")).collect())
}
