use super::{check_corpus, EvalPair};
use crate::error::Result;

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `(P, R, F_beta)` of the longest common subsequence.
pub fn rouge_l_pair(hypothesis: &[String], reference: &[String], beta: f64) -> (f64, f64, f64) {
    let l = lcs_len(hypothesis, reference);
    if l == 0 {
        return (0.0, 0.0, 0.0);
    }
    let p = l as f64 / hypothesis.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = beta * beta;
    (p, r, (1.0 + b2) * p * r / (r + b2 * p))
}

/// Mean over the corpus of the best F against any reference.
pub fn rouge_l(corpus: &[EvalPair], beta: f64) -> Result<f64> {
    check_corpus(corpus)?;
    let sum: f64 = corpus
        .iter()
        .map(|p| {
            p.references
                .iter()
                .map(|r| rouge_l_pair(&p.hypothesis, r, beta).2)
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(sum / corpus.len() as f64)
}
