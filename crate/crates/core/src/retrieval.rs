//! Positive/negative context sample retrieval over the training split.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SampleRecord, Split};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Strategy {
    /// Negative iff the "No Finding" flag is set.
    Label,
    /// Positive iff the report has one of `keywords` as a whitespace token.
    Keyword { keywords: Vec<String> },
    /// Seeded fair coin per sample id.
    Random,
}

impl Default for Strategy {
    fn default() -> Self {
        Strategy::Keyword {
            keywords: vec!["Note".to_string()],
        }
    }
}

/// How context sets relate across epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairMode {
    /// The same set for a query in every epoch.
    Fixed,
    /// A fresh draw per epoch.
    Resample { epoch: u64 },
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn stream(parts: &[u64], id: &str) -> ChaCha8Rng {
    let mut bytes = Vec::with_capacity(8 * parts.len() + id.len());
    for p in parts {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    bytes.extend_from_slice(id.as_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a(&bytes))
}

pub fn classify_polarity(record: &SampleRecord, strategy: &Strategy, seed: u64) -> Polarity {
    let positive = match strategy {
        Strategy::Label => !record.labels.is_no_finding(),
        Strategy::Keyword { keywords } => record
            .report
            .split_whitespace()
            .any(|w| keywords.iter().any(|k| k == w)),
        Strategy::Random => stream(&[seed, 0x5eed], &record.id).random_bool(0.5),
    };
    if positive {
        Polarity::Positive
    } else {
        Polarity::Negative
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextIndex {
    strategy: Strategy,
    seed: u64,
    records: IndexMap<String, SampleRecord>,
    positives: Vec<String>,
    negatives: Vec<String>,
}

/// Index the training records of `corpus`; records of other splits are ignored.
pub fn build_index(corpus: &[SampleRecord], strategy: Strategy, seed: u64) -> Result<ContextIndex> {
    let mut records = IndexMap::new();
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for r in corpus.iter().filter(|r| r.split == Split::Train) {
        match classify_polarity(r, &strategy, seed) {
            Polarity::Positive => positives.push(r.id.clone()),
            Polarity::Negative => negatives.push(r.id.clone()),
        }
        records.insert(r.id.clone(), r.clone());
    }
    if records.is_empty() {
        return Err(Error::IndexDegenerate("training split is empty".into()));
    }
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::IndexDegenerate(format!(
            "{} positive and {} negative training samples",
            positives.len(),
            negatives.len()
        )));
    }
    Ok(ContextIndex {
        strategy,
        seed,
        records,
        positives,
        negatives,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextSampleSet {
    pub query: String,
    pub positives: Vec<SampleRecord>,
    pub negatives: Vec<SampleRecord>,
}

impl ContextSampleSet {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.positives
            .iter()
            .chain(&self.negatives)
            .map(|r| r.id.as_str())
    }
}

impl ContextIndex {
    pub fn strategy(&self) -> &Strategy {
        &self.strategy
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn ids(&self, polarity: Polarity) -> &[String] {
        match polarity {
            Polarity::Positive => &self.positives,
            Polarity::Negative => &self.negatives,
        }
    }

    pub fn record(&self, id: &str) -> Option<&SampleRecord> {
        self.records.get(id)
    }

    fn draw(
        &self,
        rng: &mut ChaCha8Rng,
        polarity: Polarity,
        query: &str,
        n: usize,
    ) -> Result<Vec<SampleRecord>> {
        let pool: Vec<&String> = self
            .ids(polarity)
            .iter()
            .filter(|id| *id != query)
            .collect();
        if pool.len() < n {
            return Err(Error::RetrievalUnderflow {
                polarity: polarity.as_str(),
                requested: n,
                available: pool.len(),
            });
        }
        let mut picks = rand::seq::index::sample(rng, pool.len(), n).into_vec();
        picks.sort_unstable();
        Ok(picks
            .into_iter()
            .map(|i| self.records[pool[i]].clone())
            .collect())
    }

    /// `n_pairs` positives and `n_pairs` negatives for `query`, uniformly at
    /// random within each class and never including the query itself.
    pub fn retrieve(
        &self,
        query: &str,
        n_pairs: usize,
        mode: PairMode,
        seed: u64,
    ) -> Result<ContextSampleSet> {
        if n_pairs == 0 {
            return Err(Error::invalid("n_pairs must be at least 1"));
        }
        let mut rng = match mode {
            PairMode::Fixed => stream(&[seed, 0xf1, self.seed], query),
            PairMode::Resample { epoch } => stream(&[seed, 0xe9, self.seed, epoch], query),
        };
        let positives = self.draw(&mut rng, Polarity::Positive, query, n_pairs)?;
        let negatives = self.draw(&mut rng, Polarity::Negative, query, n_pairs)?;
        Ok(ContextSampleSet {
            query: query.to_string(),
            positives,
            negatives,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelSet;
    use std::path::PathBuf;

    fn rec(i: usize, no_finding: bool, split: Split) -> SampleRecord {
        let mut labels = LabelSet::default();
        if no_finding {
            labels = LabelSet::no_finding();
        } else {
            labels.0[3] = true;
        }
        SampleRecord {
            id: format!("r{i}"),
            image: PathBuf::from(format!("r{i}.grid")),
            report: if no_finding {
                "Clear lungs.".into()
            } else {
                "Opacity. Note that x.".into()
            },
            labels,
            split,
        }
    }

    fn corpus() -> Vec<SampleRecord> {
        (0..10).map(|i| rec(i, i < 4, Split::Train)).collect()
    }

    #[test]
    fn counts_and_degenerate() {
        let idx = build_index(&corpus(), Strategy::Label, 0).unwrap();
        assert_eq!(idx.ids(Polarity::Positive).len(), 6);
        assert_eq!(idx.ids(Polarity::Negative).len(), 4);
        let all_normal: Vec<_> = (0..5).map(|i| rec(i, true, Split::Train)).collect();
        assert!(matches!(
            build_index(&all_normal, Strategy::Label, 0),
            Err(Error::IndexDegenerate(_))
        ));
        assert_eq!(idx, build_index(&corpus(), Strategy::Label, 0).unwrap());
    }

    #[test]
    fn keyword_is_case_sensitive_whole_token() {
        let mut r = rec(0, false, Split::Train);
        let s = Strategy::default();
        assert_eq!(classify_polarity(&r, &s, 0), Polarity::Positive);
        r.report = "note that x. Notes.".into();
        assert_eq!(classify_polarity(&r, &s, 0), Polarity::Negative);
    }

    #[test]
    fn retrieval_contract() {
        let idx = build_index(&corpus(), Strategy::Label, 3).unwrap();
        let set = idx.retrieve("r5", 3, PairMode::Fixed, 9).unwrap();
        assert_eq!((set.positives.len(), set.negatives.len()), (3, 3));
        assert!(set.ids().all(|id| id != "r5"));
        assert_eq!(set, idx.retrieve("r5", 3, PairMode::Fixed, 9).unwrap());
        assert!(matches!(
            idx.retrieve("r5", 5, PairMode::Fixed, 9),
            Err(Error::RetrievalUnderflow {
                polarity: "negative",
                ..
            })
        ));
    }
}
