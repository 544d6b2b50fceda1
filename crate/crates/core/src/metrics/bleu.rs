use super::{check_corpus, ngram_counts, EvalPair};
use crate::error::Result;

/// Clipped n-gram matches and total hypothesis n-grams for one sentence.
pub fn modified_precision(
    hypothesis: &[String],
    references: &[Vec<String>],
    n: usize,
) -> (usize, usize) {
    let hyp = ngram_counts(hypothesis, n);
    let refs: Vec<_> = references.iter().map(|r| ngram_counts(r, n)).collect();
    let mut clipped = 0;
    let mut total = 0;
    for (g, &c) in &hyp {
        let max_ref = refs
            .iter()
            .map(|r| r.get(g).copied().unwrap_or(0))
            .max()
            .unwrap_or(0);
        clipped += c.min(max_ref);
        total += c;
    }
    (clipped, total)
}

/// `exp(1 - r/c)` when the candidate is shorter than the reference, else 1.
pub fn brevity_penalty(candidate_len: usize, reference_len: usize) -> f64 {
    if candidate_len == 0 {
        0.0
    } else if candidate_len >= reference_len {
        1.0
    } else {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    }
}

/// Corpus BLEU-1..`max_n`: clipped counts summed over the corpus, geometric
/// mean of precisions, brevity penalty against the closest reference length
/// (shorter one on ties). No smoothing.
pub fn bleu(corpus: &[EvalPair], max_n: usize) -> Result<Vec<f64>> {
    check_corpus(corpus)?;
    let mut clipped = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let mut c_len = 0;
    let mut r_len = 0;
    for p in corpus {
        let c = p.hypothesis.len();
        c_len += c;
        r_len += p
            .references
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(c), l))
            .expect("checked nonempty");
        for n in 1..=max_n {
            let (m, t) = modified_precision(&p.hypothesis, &p.references, n);
            clipped[n - 1] += m;
            total[n - 1] += t;
        }
    }
    let bp = brevity_penalty(c_len, r_len);
    let mut out = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut zero = false;
    for n in 1..=max_n {
        if clipped[n - 1] == 0 || total[n - 1] == 0 {
            zero = true;
        } else {
            log_sum += (clipped[n - 1] as f64 / total[n - 1] as f64).ln();
        }
        out.push(if zero {
            0.0
        } else {
            bp * (log_sum / n as f64).exp()
        });
    }
    Ok(out)
}
