use rust_stemmers::{Algorithm, Stemmer};

use super::{check_corpus, EvalPair};
use crate::error::Result;

/// Greedy left-to-right alignment: exact matches first, then stem matches
/// among the tokens still free. Returns `(hyp index, ref index)` pairs.
fn align(hyp: &[String], reference: &[String], stemmer: &Stemmer) -> Vec<(usize, usize)> {
    let mut used_h = vec![false; hyp.len()];
    let mut used_r = vec![false; reference.len()];
    let mut pairs = Vec::new();
    for (i, h) in hyp.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !used_r[j] && reference[j] == *h) {
            used_h[i] = true;
            used_r[j] = true;
            pairs.push((i, j));
        }
    }
    let hs: Vec<_> = hyp.iter().map(|t| stemmer.stem(t).into_owned()).collect();
    let rs: Vec<_> = reference
        .iter()
        .map(|t| stemmer.stem(t).into_owned())
        .collect();
    for i in 0..hyp.len() {
        if used_h[i] {
            continue;
        }
        if let Some(j) = (0..reference.len()).find(|&j| !used_r[j] && rs[j] == hs[i]) {
            used_h[i] = true;
            used_r[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

fn score_one(hyp: &[String], reference: &[String], stemmer: &Stemmer) -> f64 {
    let pairs = align(hyp, reference, stemmer);
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / hyp.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let chunks = 1 + pairs
        .windows(2)
        .filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1))
        .count();
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    fmean * (1.0 - penalty)
}

/// Best score of `hypothesis` against any of `references`.
pub fn meteor_sentence(hypothesis: &[String], references: &[Vec<String>]) -> f64 {
    let stemmer = Stemmer::create(Algorithm::English);
    references
        .iter()
        .map(|r| score_one(hypothesis, r, &stemmer))
        .fold(0.0, f64::max)
}

/// Corpus mean of sentence scores.
pub fn meteor(corpus: &[EvalPair]) -> Result<f64> {
    check_corpus(corpus)?;
    let stemmer = Stemmer::create(Algorithm::English);
    let sum: f64 = corpus
        .iter()
        .map(|p| {
            p.references
                .iter()
                .map(|r| score_one(&p.hypothesis, r, &stemmer))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(sum / corpus.len() as f64)
}
