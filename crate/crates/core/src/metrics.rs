//! Caption metrics: BLEU-N, CIDEr-D, exact match and the paired t-test.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::{Error, Result};

pub const MAX_N: usize = 4;
pub const CIDER_SIGMA: f64 = 6.0;

/// Lowercases and splits on whitespace after mapping ASCII punctuation to spaces.
pub fn tokenize(text: &str) -> Vec<String> {
    text.chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect::<String>()
        .to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

type Counts = HashMap<String, usize>;

/// n-gram counts of one sentence, for n = 1..=max_n.
fn ngram_counts(tokens: &[String], max_n: usize) -> Vec<Counts> {
    (1..=max_n)
        .map(|n| {
            let mut c = Counts::new();
            for w in tokens.windows(n) {
                *c.entry(w.join(" ")).or_insert(0) += 1;
            }
            c
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BleuLevel {
    Corpus,
    Sentence,
}

/// Clipped matches and candidate n-gram totals for each order.
fn bleu_matches(cand: &[String], refs: &[Vec<String>], n: usize) -> (Vec<usize>, Vec<usize>) {
    let cc = ngram_counts(cand, n);
    let mut max_ref: Vec<Counts> = vec![Counts::new(); n];
    for r in refs {
        for (m, rc) in max_ref.iter_mut().zip(ngram_counts(r, n)) {
            for (g, k) in rc {
                let e = m.entry(g).or_insert(0);
                *e = (*e).max(k);
            }
        }
    }
    let matched = cc
        .iter()
        .zip(&max_ref)
        .map(|(c, m)| c.iter().map(|(g, k)| (*k).min(*m.get(g).unwrap_or(&0))).sum())
        .collect();
    let totals = (1..=n).map(|k| cand.len().saturating_sub(k - 1)).collect();
    (matched, totals)
}

/// Reference length closest to `c`; the shorter one on ties.
fn closest_ref_len(c: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(c), l))
        .unwrap_or(0)
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        return 0.0;
    }
    (1.0 - r as f64 / c as f64).min(0.0).exp()
}

/// Sentence BLEU-n with add-one smoothing on orders 2 and above.
pub fn sentence_bleu(cand: &[String], refs: &[Vec<String>], n: usize) -> f64 {
    if cand.is_empty() || refs.is_empty() || n == 0 {
        return 0.0;
    }
    let (m, t) = bleu_matches(cand, refs, n);
    if m[0] == 0 {
        return 0.0;
    }
    let mut log_p = 0.0;
    for k in 0..n {
        let p = if k == 0 {
            m[0] as f64 / t[0] as f64
        } else {
            (m[k] as f64 + 1.0) / (t[k] as f64 + 1.0)
        };
        log_p += p.ln() / n as f64;
    }
    brevity_penalty(cand.len(), closest_ref_len(cand.len(), refs)) * log_p.exp()
}

/// Unsmoothed corpus BLEU-n.
pub fn corpus_bleu(cands: &[Vec<String>], refs: &[Vec<Vec<String>>], n: usize) -> Result<f64> {
    if cands.len() != refs.len() {
        return Err(Error::invalid(format!(
            "{} candidates but {} reference sets",
            cands.len(),
            refs.len()
        )));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let mut matched = vec![0usize; n];
    let mut totals = vec![0usize; n];
    let (mut c, mut r) = (0usize, 0usize);
    for (cand, rs) in cands.iter().zip(refs) {
        let (m, t) = bleu_matches(cand, rs, n);
        for k in 0..n {
            matched[k] += m[k];
            totals[k] += t[k];
        }
        c += cand.len();
        r += closest_ref_len(cand.len(), rs);
    }
    if matched.iter().any(|m| *m == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&totals)
        .map(|(m, t)| (*m as f64 / *t as f64).ln())
        .sum::<f64>()
        / n as f64;
    Ok(brevity_penalty(c, r) * log_p.exp())
}

/// BLEU-n at either level; sentence level averages per-candidate scores.
pub fn bleu(cands: &[Vec<String>], refs: &[Vec<Vec<String>>], n: usize, level: BleuLevel) -> Result<f64> {
    match level {
        BleuLevel::Corpus => corpus_bleu(cands, refs, n),
        BleuLevel::Sentence => {
            if cands.len() != refs.len() {
                return Err(Error::invalid("candidate and reference counts differ"));
            }
            if cands.is_empty() {
                return Ok(0.0);
            }
            let s: f64 = cands.iter().zip(refs).map(|(c, r)| sentence_bleu(c, r, n)).sum();
            Ok(s / cands.len() as f64)
        }
    }
}

/// tf-idf weighted n-gram vector of one sentence.
struct TfIdf {
    vecs: Vec<HashMap<String, f64>>,
    norms: Vec<f64>,
    len: usize,
}

/// Document frequencies over a reference corpus, one document per image.
#[derive(Clone, Debug)]
pub struct CiderD {
    df: HashMap<String, usize>,
    log_images: f64,
    refs: Vec<Vec<Vec<String>>>,
}

impl CiderD {
    pub fn new(refs: Vec<Vec<Vec<String>>>) -> Result<Self> {
        if refs.is_empty() {
            return Err(Error::invalid("CIDEr-D needs a non-empty reference corpus"));
        }
        let mut df = HashMap::new();
        for image in &refs {
            let mut seen = std::collections::HashSet::new();
            for r in image {
                for c in ngram_counts(r, MAX_N) {
                    seen.extend(c.into_keys());
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        Ok(CiderD {
            df,
            log_images: (refs.len() as f64).ln(),
            refs,
        })
    }

    pub fn images(&self) -> usize {
        self.refs.len()
    }

    pub fn references(&self, image: usize) -> &[Vec<String>] {
        &self.refs[image]
    }

    pub fn doc_freq(&self, gram: &str) -> usize {
        *self.df.get(gram).unwrap_or(&0)
    }

    fn tfidf(&self, tokens: &[String]) -> TfIdf {
        let mut vecs = Vec::with_capacity(MAX_N);
        let mut norms = Vec::with_capacity(MAX_N);
        for counts in ngram_counts(tokens, MAX_N) {
            let mut v = HashMap::with_capacity(counts.len());
            let mut sq = 0.0;
            for (g, tf) in counts {
                let idf = self.log_images - (self.doc_freq(&g).max(1) as f64).ln();
                let w = tf as f64 * idf;
                sq += w * w;
                v.insert(g, w);
            }
            vecs.push(v);
            norms.push(sq.sqrt());
        }
        TfIdf {
            vecs,
            norms,
            len: tokens.len(),
        }
    }

    fn similarity(cand: &TfIdf, r: &TfIdf) -> [f64; MAX_N] {
        let delta = cand.len as f64 - r.len as f64;
        let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        let mut out = [0.0; MAX_N];
        for n in 0..MAX_N {
            if cand.norms[n] == 0.0 || r.norms[n] == 0.0 {
                continue;
            }
            let mut dot = 0.0;
            for (g, h) in &cand.vecs[n] {
                if let Some(w) = r.vecs[n].get(g) {
                    dot += h.min(*w) * w;
                }
            }
            out[n] = penalty * dot / (cand.norms[n] * r.norms[n]);
        }
        out
    }

    /// Score of a tokenized candidate against an explicit reference set.
    pub fn score_against(&self, cand: &[String], refs: &[Vec<String>]) -> f64 {
        if cand.is_empty() || refs.is_empty() {
            return 0.0;
        }
        let c = self.tfidf(cand);
        let mut total = 0.0;
        for r in refs {
            let sim = Self::similarity(&c, &self.tfidf(r));
            total += sim.iter().sum::<f64>() / MAX_N as f64;
        }
        (10.0 * total / refs.len() as f64).clamp(0.0, 10.0)
    }

    /// Score of a candidate for corpus image `image`.
    pub fn score(&self, cand: &[String], image: usize) -> f64 {
        self.score_against(cand, &self.refs[image])
    }

    /// Mean score over one candidate per corpus image, plus per-image scores.
    pub fn corpus_score(&self, cands: &[Vec<String>]) -> Result<(f64, Vec<f64>)> {
        if cands.len() != self.refs.len() {
            return Err(Error::invalid("one candidate per corpus image is required"));
        }
        let per: Vec<f64> = cands.iter().enumerate().map(|(i, c)| self.score(c, i)).collect();
        let mean = per.iter().sum::<f64>() / per.len() as f64;
        Ok((mean, per))
    }
}

/// CIDEr-D of candidates against their references, with document frequencies
/// taken from those same references.
pub fn cider_d(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<f64> {
    Ok(CiderD::new(refs.to_vec())?.corpus_score(cands)?.0)
}

/// True when the candidate equals one of the references token for token.
pub fn exact_match(cand: &[String], refs: &[Vec<String>]) -> bool {
    refs.iter().any(|r| r.as_slice() == cand)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TTestResult {
    pub t: f64,
    pub df: usize,
    /// Two-tailed p-value.
    pub p: f64,
    /// Set when the differences have zero variance but a nonzero mean.
    pub degenerate: bool,
}

/// Two-tailed paired t-test on `a - b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() {
        return Err(Error::invalid("paired samples must have equal lengths"));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::invalid("paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTestResult { t: 0.0, df, p: 1.0, degenerate: false }
        } else {
            TTestResult {
                t: mean.signum() * f64::INFINITY,
                df,
                p: 0.0,
                degenerate: true,
            }
        });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::invalid(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0);
    Ok(TTestResult { t, df, p, degenerate: false })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    Bleu,
    Cider,
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bleu" => Ok(Metric::Bleu),
            "cider" | "cider-d" => Ok(Metric::Cider),
            other => Err(Error::invalid(format!("unknown metric '{other}'"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Bleu => "bleu",
            Metric::Cider => "cider",
        })
    }
}

/// Parses a comma-separated metric list such as `bleu,cider`.
pub fn parse_metrics(list: &str) -> Result<Vec<Metric>> {
    let mut out: Vec<Metric> = list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(Error::invalid("no metrics requested"));
    }
    Ok(out)
}

/// Corpus scores plus per-image sentence scores for one split.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    /// (column name, corpus score), in column order.
    pub corpus: Vec<(String, f64)>,
    pub image_ids: Vec<String>,
    /// Per-image score columns, aligned with `image_ids`.
    pub per_image: Vec<(String, Vec<f64>)>,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.corpus.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn per_image(&self, name: &str) -> Option<&[f64]> {
        self.per_image.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    /// `metric<TAB>score` rows under a header.
    pub fn corpus_tsv(&self) -> String {
        let mut s = String::from("metric\tscore\n");
        for (name, v) in &self.corpus {
            s.push_str(&format!("{name}\t{v:.6}\n"));
        }
        s
    }

    /// One row per image with its sentence scores.
    pub fn per_image_tsv(&self) -> String {
        let mut s = String::from("image_id");
        for (name, _) in &self.per_image {
            s.push('\t');
            s.push_str(name);
        }
        s.push('\n');
        for (i, id) in self.image_ids.iter().enumerate() {
            s.push_str(id);
            for (_, col) in &self.per_image {
                s.push_str(&format!("\t{:.6}", col[i]));
            }
            s.push('\n');
        }
        s
    }
}

/// Scores `captions` (image id, caption) against `references` (image id to
/// reference captions). CIDEr-D document frequencies come from the references
/// of the evaluated images.
pub fn evaluate_split(
    captions: &[(String, String)],
    references: &BTreeMap<String, Vec<String>>,
    metrics: &[Metric],
) -> Result<MetricReport> {
    let mut cands = Vec::with_capacity(captions.len());
    let mut refs = Vec::with_capacity(captions.len());
    for (id, cap) in captions {
        let r = references
            .get(id)
            .filter(|r| !r.is_empty())
            .ok_or_else(|| Error::invalid(format!("missing references for image '{id}'")))?;
        cands.push(tokenize(cap));
        refs.push(r.iter().map(|s| tokenize(s)).collect::<Vec<_>>());
    }
    if cands.is_empty() {
        return Err(Error::invalid("no captions to evaluate"));
    }
    let mut report = MetricReport {
        corpus: Vec::new(),
        image_ids: captions.iter().map(|(id, _)| id.clone()).collect(),
        per_image: Vec::new(),
    };
    for m in metrics {
        match m {
            Metric::Bleu => {
                for n in 1..=MAX_N {
                    report.corpus.push((format!("BLEU-{n}"), corpus_bleu(&cands, &refs, n)?));
                }
                let per = cands.iter().zip(&refs).map(|(c, r)| sentence_bleu(c, r, MAX_N)).collect();
                report.per_image.push(("BLEU-4".into(), per));
            }
            Metric::Cider => {
                let (mean, per) = CiderD::new(refs.clone())?.corpus_score(&cands)?;
                report.corpus.push(("CIDEr-D".into(), mean));
                report.per_image.push(("CIDEr-D".into(), per));
            }
        }
    }
    Ok(report)
}

/// Parses `id<TAB>caption` lines; blank lines are skipped.
pub fn parse_caption_tsv(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_once('\t')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| Error::invalid(format!("line {}: expected id<TAB>caption", i + 1)))
        })
        .collect()
}

pub fn format_caption_tsv(rows: &[(String, String)]) -> String {
    rows.iter().map(|(id, c)| format!("{id}\t{c}\n")).collect()
}

/// Groups caption rows by id, keeping file order within each id.
pub fn group_references(rows: &[(String, String)]) -> BTreeMap<String, Vec<String>> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for (id, c) in rows {
        out.entry(id.clone()).or_default().push(c.clone());
    }
    out
}
