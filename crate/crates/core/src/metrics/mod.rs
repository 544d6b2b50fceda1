//! Caption-style evaluation: BLEU-1..4, ROUGE-L, METEOR and CIDEr-D.
//!
//! Every scorer takes [`EvalPair`]s whose tokens come from
//! [`crate::text::normalize`]: lowercased, punctuation removed.

mod bleu;
mod cider;
mod meteor;
mod rouge;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use bleu::{bleu, brevity_penalty, modified_precision};
pub use cider::{cider, cider_per_sample};
pub use meteor::{meteor, meteor_sentence};
pub use rouge::{lcs_len, rouge_l, rouge_l_pair};

use crate::error::{Error, Result};
use crate::text::normalize;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub id: String,
    pub hypothesis: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    /// Pair from raw strings, normalized with the shared tokenizer.
    pub fn from_text(id: impl Into<String>, hypothesis: &str, references: &[&str]) -> Self {
        Self {
            id: id.into(),
            hypothesis: normalize(hypothesis),
            references: references.iter().map(|r| normalize(r)).collect(),
        }
    }
}

pub(crate) fn check_corpus(corpus: &[EvalPair]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty evaluation corpus"));
    }
    if let Some(p) = corpus.iter().find(|p| p.references.is_empty()) {
        return Err(Error::invalid(format!(
            "sample `{}` has no reference",
            p.id
        )));
    }
    Ok(())
}

/// All n-grams of order `n` with their counts, in first-seen order.
pub(crate) fn ngram_counts(tokens: &[String], n: usize) -> indexmap::IndexMap<&[String], usize> {
    let mut m = indexmap::IndexMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub bleu_max_n: usize,
    pub rouge_beta: f64,
    pub cider_sigma: f64,
    /// CIDEr-D (clipping plus length penalty) when true, plain CIDEr otherwise.
    pub cider_d: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            bleu_max_n: 4,
            rouge_beta: 1.2,
            cider_sigma: 6.0,
            cider_d: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "BLEU-1")]
    pub bleu1: f64,
    #[serde(rename = "BLEU-2")]
    pub bleu2: f64,
    #[serde(rename = "BLEU-3")]
    pub bleu3: f64,
    #[serde(rename = "BLEU-4")]
    pub bleu4: f64,
    #[serde(rename = "ROUGE-L")]
    pub rouge_l: f64,
    #[serde(rename = "METEOR")]
    pub meteor: f64,
    #[serde(rename = "CIDEr")]
    pub cider: f64,
    pub corpus_size: usize,
    pub config: MetricConfig,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }

    /// Fixed-width table with the same column names as the JSON keys.
    pub fn table(&self) -> String {
        format!(
            "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}\n{:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
            "BLEU-1",
            "BLEU-2",
            "BLEU-3",
            "BLEU-4",
            "ROUGE-L",
            "METEOR",
            "CIDEr",
            self.bleu1,
            self.bleu2,
            self.bleu3,
            self.bleu4,
            self.rouge_l,
            self.meteor,
            self.cider
        )
    }
}

/// Score a corpus with every metric. BLEU orders beyond `bleu_max_n` are 0.
pub fn evaluate(corpus: &[EvalPair], cfg: &MetricConfig) -> Result<MetricReport> {
    check_corpus(corpus)?;
    let b = bleu(corpus, cfg.bleu_max_n)?;
    let at = |i: usize| b.get(i).copied().unwrap_or(0.0);
    Ok(MetricReport {
        bleu1: at(0),
        bleu2: at(1),
        bleu3: at(2),
        bleu4: at(3),
        rouge_l: rouge_l(corpus, cfg.rouge_beta)?,
        meteor: meteor(corpus)?,
        cider: cider(corpus, cfg.cider_sigma, cfg.cider_d)?,
        corpus_size: corpus.len(),
        config: cfg.clone(),
    })
}
