//! Corpus-level BLEU-1..4, ROUGE-L and CIDEr over tokenized questions.
//!
//! Conventions: BLEU uses clipped counts, the closest reference length for
//! the brevity penalty, and no smoothing. ROUGE-L is the LCS F-measure with
//! β = 1.2, best reference per pair. CIDEr uses IDF `ln(N / (1 + df))` over
//! the `N` pairs' reference sets, averages cosine similarity over references
//! and n = 1..4, and scales by 10.
//!
//! Per-pair scores are summed in sorted order, so every metric is bitwise
//! invariant under reordering the corpus.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::GenerationRecord;
use crate::text::{load_dataset, tokenize};

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SCALE: f64 = 10.0;
pub const MAX_N: usize = 4;

/// A hypothesis and its references, as tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub hypothesis: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    pub fn new(hypothesis: &str, references: &[&str]) -> Self {
        Self {
            hypothesis: tokenize(hypothesis),
            references: references.iter().map(|r| tokenize(r)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub n_pairs: usize,
}

type Counts<'t> = BTreeMap<&'t [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> Counts<'_> {
    let mut out = Counts::new();
    if tokens.len() >= n {
        for g in tokens.windows(n) {
            *out.entry(g).or_default() += 1;
        }
    }
    out
}

fn check(pairs: &[EvalPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation corpus"));
    }
    if pairs.iter().any(|p| p.references.is_empty()) {
        return Err(Error::Config("every pair needs at least one reference".into()));
    }
    Ok(())
}

/// Sum in ascending order, independent of input order.
fn ordered_mean(mut xs: Vec<f64>) -> f64 {
    let n = xs.len() as f64;
    xs.sort_by(f64::total_cmp);
    xs.into_iter().sum::<f64>() / n
}

/// Reference length closest to `hyp_len`, shorter on ties.
fn closest_ref_len(hyp_len: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(hyp_len), r))
        .expect("references are non-empty")
}

/// BLEU-1 through BLEU-4.
pub fn bleu_corpus(pairs: &[EvalPair]) -> Result<[f64; MAX_N]> {
    check(pairs)?;
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for p in pairs {
        hyp_len += p.hypothesis.len();
        ref_len += closest_ref_len(p.hypothesis.len(), &p.references);
        for n in 1..=MAX_N {
            let mut max_ref = Counts::new();
            for r in &p.references {
                for (g, c) in ngrams(r, n) {
                    let m = max_ref.entry(g).or_default();
                    *m = (*m).max(c);
                }
            }
            for (g, c) in ngrams(&p.hypothesis, n) {
                matched[n - 1] += c.min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if hyp_len == 0 {
        return Ok([0.0; MAX_N]);
    }
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).exp().min(1.0);
    let mut out = [0.0; MAX_N];
    let mut log_sum = 0.0;
    for k in 0..MAX_N {
        if matched[k] == 0 {
            break;
        }
        log_sum += (matched[k] as f64 / total[k] as f64).ln();
        out[k] = bp * (log_sum / (k + 1) as f64).exp();
    }
    Ok(out)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// LCS F-measure of one hypothesis against one reference.
pub fn rouge_l_pair(hyp: &[String], reference: &[String]) -> f64 {
    let l = lcs(hyp, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let r = l / reference.len() as f64;
    let p = l / hyp.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * r * p / (r + b2 * p)
}

pub fn rouge_l(pairs: &[EvalPair]) -> Result<f64> {
    check(pairs)?;
    let scores = pairs
        .iter()
        .map(|p| {
            p.references
                .iter()
                .map(|r| rouge_l_pair(&p.hypothesis, r))
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(ordered_mean(scores))
}

fn tfidf<'t>(counts: Counts<'t>, idf: &dyn Fn(&[String]) -> f64) -> BTreeMap<&'t [String], f64> {
    counts.into_iter().map(|(g, c)| (g, c as f64 * idf(g))).collect()
}

fn cosine(a: &BTreeMap<&[String], f64>, b: &BTreeMap<&[String], f64>) -> f64 {
    let norm2 = |v: &BTreeMap<&[String], f64>| v.values().map(|x| x * x).sum::<f64>();
    let (na, nb) = (norm2(a), norm2(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    dot / (na * nb).sqrt()
}

/// Per-pair CIDEr scores, in input order.
pub fn cider_pairs(pairs: &[EvalPair]) -> Result<Vec<f64>> {
    check(pairs)?;
    let n_docs = pairs.len() as f64;
    let mut sums = vec![0.0; pairs.len()];
    for n in 1..=MAX_N {
        let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
        for p in pairs {
            let seen: BTreeSet<&[String]> = p.references.iter().flat_map(|r| ngrams(r, n).into_keys()).collect();
            for g in seen {
                *df.entry(g).or_default() += 1;
            }
        }
        let idf = |g: &[String]| (n_docs / (1.0 + df.get(g).copied().unwrap_or(0) as f64)).ln();
        for (p, sum) in pairs.iter().zip(&mut sums) {
            let hyp = tfidf(ngrams(&p.hypothesis, n), &idf);
            let sims: Vec<f64> = p
                .references
                .iter()
                .map(|r| cosine(&hyp, &tfidf(ngrams(r, n), &idf)))
                .collect();
            *sum += ordered_mean(sims);
        }
    }
    Ok(sums.into_iter().map(|s| CIDER_SCALE * s / MAX_N as f64).collect())
}

pub fn cider(pairs: &[EvalPair]) -> Result<f64> {
    Ok(ordered_mean(cider_pairs(pairs)?))
}

pub fn evaluate_pairs(pairs: &[EvalPair]) -> Result<EvalReport> {
    let [bleu1, bleu2, bleu3, bleu4] = bleu_corpus(pairs)?;
    Ok(EvalReport {
        bleu1,
        bleu2,
        bleu3,
        bleu4,
        rouge_l: rouge_l(pairs)?,
        cider: cider(pairs)?,
        n_pairs: pairs.len(),
    })
}

fn key(image_id: &str, answer: &str) -> (String, String) {
    (image_id.to_string(), tokenize(answer).join(" "))
}

fn show((image, answer): &(String, String)) -> String {
    format!("{image}/{answer}")
}

pub fn load_generations(path: &Path) -> Result<Vec<GenerationRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(path, i + 1, e.to_string()))?);
    }
    Ok(out)
}

/// Pairs generated questions with gold ones by `(image_id, answer)`. Gold
/// questions sharing a key become references of one pair.
pub fn align(generated: &[GenerationRecord], gold: &[crate::text::RawInstance]) -> Result<Vec<EvalPair>> {
    let mut refs: BTreeMap<(String, String), Vec<Vec<String>>> = BTreeMap::new();
    for g in gold {
        refs.entry(key(&g.image_id, &g.answer))
            .or_default()
            .push(tokenize(&g.question));
    }
    let mut hyps: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
    for g in generated {
        let k = key(&g.image_id, &g.answer);
        if hyps.insert(k.clone(), tokenize(&g.question)).is_some() {
            return Err(Error::Config(format!("duplicate generated question for {}", show(&k))));
        }
    }
    let missing_generated: Vec<String> = refs.keys().filter(|k| !hyps.contains_key(*k)).map(show).collect();
    let missing_gold: Vec<String> = hyps.keys().filter(|k| !refs.contains_key(*k)).map(show).collect();
    if !missing_generated.is_empty() || !missing_gold.is_empty() {
        return Err(Error::KeyMismatch {
            missing_generated,
            missing_gold,
        });
    }
    Ok(hyps
        .into_iter()
        .zip(refs.into_values())
        .map(|((_, hypothesis), references)| EvalPair { hypothesis, references })
        .collect())
}

/// Scores a generation file against a gold dataset file.
pub fn evaluate_corpus(generated: &Path, gold: &Path) -> Result<EvalReport> {
    let pairs = align(&load_generations(generated)?, &load_dataset(gold)?)?;
    evaluate_pairs(&pairs)
}
