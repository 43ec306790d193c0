//! Caption evaluation metrics: corpus BLEU-1..4, CIDEr, ROUGE-L and METEOR.
//!
//! All functions work on pre-tokenized sentences. Ordered maps are used for
//! n-gram statistics so every score is bitwise reproducible. Degenerate
//! inputs (empty candidates, zero vectors) score 0 rather than NaN.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

pub type Tokens = Vec<String>;

/// Whitespace tokenization after the standard text preprocessing.
pub fn tokenize(text: &str) -> Tokens {
    crate::text::preprocess(text)
}

pub fn ngrams(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts = BTreeMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn check_corpus(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::Contract("empty candidate set".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::Contract("a candidate has no references".into()));
    }
    Ok(())
}

/// Reference length closest to `c`, shorter on ties.
fn closest_ref_len(c: usize, refs: &[Tokens]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(c), r))
        .unwrap_or(0)
}

/// Corpus-level modified precision `(clipped matches, candidate n-grams)` for order `n`.
fn modified_precision(candidates: &[Tokens], references: &[Vec<Tokens>], n: usize) -> (usize, usize) {
    let mut matched = 0;
    let mut total = 0;
    for (cand, refs) in candidates.iter().zip(references) {
        let counts = ngrams(cand, n);
        let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
        for r in refs {
            for (g, c) in ngrams(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        for (g, c) in counts {
            total += c;
            matched += c.min(max_ref.get(g).copied().unwrap_or(0));
        }
    }
    (matched, total)
}

/// Corpus BLEU with uniform weights over orders `1..=n`.
pub fn bleu(candidates: &[Tokens], references: &[Vec<Tokens>], n: usize) -> Result<f64> {
    check_corpus(candidates, references)?;
    if !(1..=4).contains(&n) {
        return Err(Error::Contract(format!("BLEU order must be 1..=4, got {n}")));
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = candidates
        .iter()
        .zip(references)
        .map(|(cand, refs)| closest_ref_len(cand.len(), refs))
        .sum();
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for m in 1..=n {
        let (num, den) = modified_precision(candidates, references, m);
        if num == 0 || den == 0 {
            return Ok(0.0);
        }
        log_sum += (num as f64 / den as f64).ln() / n as f64;
    }
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * log_sum.exp())
}

/// Document frequency of each n-gram over reference sets, plus corpus size.
pub struct CiderStats<'a> {
    pub doc_freq: [BTreeMap<&'a [String], usize>; 4],
    pub corpus_size: usize,
}

impl<'a> CiderStats<'a> {
    pub fn new(references: &'a [Vec<Tokens>]) -> Self {
        let mut doc_freq: [BTreeMap<&[String], usize>; 4] = Default::default();
        for refs in references {
            for (n, df) in doc_freq.iter_mut().enumerate() {
                let mut seen: BTreeMap<&[String], ()> = BTreeMap::new();
                for r in refs {
                    for g in ngrams(r, n + 1).into_keys() {
                        seen.insert(g, ());
                    }
                }
                for g in seen.into_keys() {
                    *df.entry(g).or_insert(0) += 1;
                }
            }
        }
        CiderStats {
            doc_freq,
            corpus_size: references.len(),
        }
    }

    /// TF-IDF vector `tf × ln(N / (1 + df))` for order `n`.
    pub fn vector<'s>(&self, tokens: &'s [String], n: usize) -> BTreeMap<&'s [String], f64> {
        ngrams(tokens, n)
            .into_iter()
            .map(|(g, tf)| {
                let df = self.doc_freq[n - 1].get(g).copied().unwrap_or(0);
                let idf = (self.corpus_size as f64 / (1.0 + df as f64)).ln();
                (g, tf as f64 * idf)
            })
            .collect()
    }
}

fn cosine(a: &BTreeMap<&[String], f64>, b: &BTreeMap<&[String], f64>) -> f64 {
    let na: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(g, v)| b.get(g).map(|w| v * w)).sum();
    dot / (na * nb)
}

/// CIDEr of one candidate against its references under corpus statistics.
pub fn cider_single(stats: &CiderStats<'_>, candidate: &[String], references: &[Tokens]) -> Result<f64> {
    if references.is_empty() {
        return Err(Error::Contract("CIDEr needs at least one reference".into()));
    }
    let mut score = 0.0;
    for n in 1..=4 {
        let gc = stats.vector(candidate, n);
        let mut sim = 0.0;
        for r in references {
            sim += cosine(&gc, &stats.vector(r, n));
        }
        score += 0.25 * sim / references.len() as f64;
    }
    Ok(score)
}

/// Mean CIDEr over the corpus, document frequencies taken from the references.
pub fn cider(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<f64> {
    check_corpus(candidates, references)?;
    let stats = CiderStats::new(references);
    let mut total = 0.0;
    for (c, refs) in candidates.iter().zip(references) {
        total += cider_single(&stats, c, refs)?;
    }
    Ok(total / candidates.len() as f64)
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure with `R = LCS/|reference|`, `P = LCS/|candidate|`.
pub fn rouge_l(candidate: &[String], reference: &[String], beta: f64) -> f64 {
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let r = l as f64 / reference.len() as f64;
    let p = l as f64 / candidate.len() as f64;
    let b2 = beta * beta;
    let den = r + b2 * p;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + b2) * r * p / den
    }
}

/// Exact-match unigram alignment: each candidate token, left to right, takes
/// the leftmost unused reference token with the same text.
pub fn align(candidate: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut used = vec![false; reference.len()];
    let mut pairs = Vec::new();
    for (i, w) in candidate.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && &reference[j] == w) {
            used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs
}

/// Runs of alignment pairs adjacent in both sentences.
pub fn chunks(pairs: &[(usize, usize)]) -> usize {
    if pairs.is_empty() {
        return 0;
    }
    1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count()
}

pub fn meteor(candidate: &[String], reference: &[String]) -> f64 {
    let pairs = align(candidate, reference);
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    let frag = chunks(&pairs) as f64 / m as f64;
    f * (1.0 - 0.5 * frag.powi(3))
}

fn mean_best(candidates: &[Tokens], references: &[Vec<Tokens>], f: impl Fn(&[String], &[String]) -> f64) -> f64 {
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, refs)| refs.iter().map(|r| f(c, r)).fold(0.0, f64::max))
        .sum();
    total / candidates.len() as f64
}

/// Mean over the corpus of the best ROUGE-L against any reference.
pub fn corpus_rouge_l(candidates: &[Tokens], references: &[Vec<Tokens>], beta: f64) -> Result<f64> {
    check_corpus(candidates, references)?;
    Ok(mean_best(candidates, references, |c, r| rouge_l(c, r, beta)))
}

/// Mean over the corpus of the best METEOR against any reference.
pub fn corpus_meteor(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<f64> {
    check_corpus(candidates, references)?;
    Ok(mean_best(candidates, references, meteor))
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub bleu_avg: f64,
    pub cider: f64,
    pub rouge_l: f64,
    pub meteor: f64,
    pub count: usize,
}

impl MetricReport {
    pub fn compute(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<Self> {
        let b: Vec<f64> = (1..=4)
            .map(|n| bleu(candidates, references, n))
            .collect::<Result<_>>()?;
        Ok(MetricReport {
            bleu_1: b[0],
            bleu_2: b[1],
            bleu_3: b[2],
            bleu_4: b[3],
            bleu_avg: b.iter().sum::<f64>() / 4.0,
            cider: cider(candidates, references)?,
            rouge_l: corpus_rouge_l(candidates, references, 1.0)?,
            meteor: corpus_meteor(candidates, references)?,
            count: candidates.len(),
        })
    }

    pub fn fields(&self) -> [(&'static str, f64); 8] {
        [
            ("bleu_1", self.bleu_1),
            ("bleu_2", self.bleu_2),
            ("bleu_3", self.bleu_3),
            ("bleu_4", self.bleu_4),
            ("bleu_avg", self.bleu_avg),
            ("cider", self.cider),
            ("rouge_l", self.rouge_l),
            ("meteor", self.meteor),
        ]
    }
}

/// Flat `key=value` lines.
impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.fields() {
            writeln!(f, "{k}={v}")?;
        }
        writeln!(f, "count={}", self.count)
    }
}
