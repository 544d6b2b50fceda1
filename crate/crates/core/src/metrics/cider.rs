use indexmap::IndexMap;
use std::collections::HashMap;

use super::{check_corpus, ngram_counts, EvalPair};
use crate::error::{Error, Result};

const MAX_N: usize = 4;

type Vector<'a> = IndexMap<&'a [String], f64>;

fn tfidf<'a>(
    tokens: &'a [String],
    n: usize,
    df: &HashMap<&[String], usize>,
    log_docs: f64,
) -> (Vector<'a>, f64) {
    let mut v = Vector::new();
    let mut norm = 0.0;
    for (g, c) in ngram_counts(tokens, n) {
        let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
        let w = c as f64 * (log_docs - d.ln());
        norm += w * w;
        v.insert(g, w);
    }
    (v, norm.sqrt())
}

fn similarity(
    h: &(Vector, f64),
    r: &(Vector, f64),
    len_delta: f64,
    sigma: f64,
    d_variant: bool,
) -> f64 {
    let mut val = 0.0;
    for (g, &wh) in &h.0 {
        if let Some(&wr) = r.0.get(g) {
            val += if d_variant { wh.min(wr) * wr } else { wh * wr };
        }
    }
    if h.1 != 0.0 && r.1 != 0.0 {
        val /= h.1 * r.1;
    }
    if d_variant {
        val *= (-(len_delta * len_delta) / (2.0 * sigma * sigma)).exp();
    }
    val
}

/// Per-sample scores. Document frequencies are counted over each sample's
/// reference set; the corpus must hold at least two samples.
pub fn cider_per_sample(corpus: &[EvalPair], sigma: f64, d_variant: bool) -> Result<Vec<f64>> {
    check_corpus(corpus)?;
    if corpus.len() < 2 {
        return Err(Error::DegenerateIdf(
            "document frequency needs at least two samples".into(),
        ));
    }
    let log_docs = (corpus.len() as f64).ln();
    let mut df: HashMap<&[String], usize> = HashMap::new();
    for p in corpus {
        let mut seen = std::collections::HashSet::new();
        for r in &p.references {
            for n in 1..=MAX_N {
                for g in ngram_counts(r, n).into_keys() {
                    seen.insert(g);
                }
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let mut scores = Vec::with_capacity(corpus.len());
    for p in corpus {
        let mut per_n = [0.0; MAX_N];
        for n in 1..=MAX_N {
            let h = tfidf(&p.hypothesis, n, &df, log_docs);
            let mut acc = 0.0;
            for r in &p.references {
                let rv = tfidf(r, n, &df, log_docs);
                let delta = p.hypothesis.len() as f64 - r.len() as f64;
                acc += similarity(&h, &rv, delta, sigma, d_variant);
            }
            per_n[n - 1] = acc / p.references.len() as f64;
        }
        scores.push(per_n.iter().sum::<f64>() / MAX_N as f64 * 10.0);
    }
    Ok(scores)
}

pub fn cider(corpus: &[EvalPair], sigma: f64, d_variant: bool) -> Result<f64> {
    let s = cider_per_sample(corpus, sigma, d_variant)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}
