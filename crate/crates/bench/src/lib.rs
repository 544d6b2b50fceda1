//! Seeded fixtures shared by the criterion benches.

use ctxreport_core::data::{generate_synthetic_dataset, SplitRatios};
use ctxreport_core::model::build_vocab;
use ctxreport_core::prompt::TemplateSet;
use ctxreport_core::ssm::ScanDims;
use ctxreport_core::{Dataset, EvalPair, ModelConfig, ReportModel, Split, SyntheticConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Inputs of the f64 selective-scan kernel.
pub struct ScanCase {
    pub dims: ScanDims,
    pub x: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

pub fn scan_case(len: usize, channels: usize, state: usize, seed: u64) -> ScanCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v =
        |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<_>>();
    ScanCase {
        dims: ScanDims {
            len,
            channels,
            state,
        },
        x: v(len * channels, -1.0, 1.0),
        delta: v(len * channels, 1e-3, 0.1),
        a: v(channels * state, -4.0, -0.5),
        b: v(len * state, -1.0, 1.0),
        c: v(len * state, -1.0, 1.0),
    }
}

/// Untrained miniature model over a small all-train synthetic corpus.
pub fn miniature_model(samples: usize, seed: u64) -> (ReportModel, Dataset) {
    let cfg = SyntheticConfig {
        samples,
        split: SplitRatios {
            train: 1.0,
            test: 0.0,
            val: 0.0,
        },
        seed,
        ..SyntheticConfig::default()
    };
    let data = generate_synthetic_dataset(&cfg).expect("synthetic corpus");
    let template = TemplateSet::builtin().default_template().clone();
    let train: Vec<_> = data
        .records()
        .iter()
        .filter(|r| r.split == Split::Train)
        .collect();
    let config = ModelConfig::default();
    let vocab = build_vocab(&train, &template, &config.context.disease_prompt);
    let model = ReportModel::new(config, template, vocab, seed).expect("model");
    (model, data)
}

/// Synthetic reports paired with a shuffled reference, so scores are nontrivial.
pub fn eval_corpus(samples: usize, seed: u64) -> Vec<EvalPair> {
    let cfg = SyntheticConfig {
        samples,
        seed,
        ..SyntheticConfig::default()
    };
    let data = generate_synthetic_dataset(&cfg).expect("synthetic corpus");
    let reports: Vec<&str> = data.records().iter().map(|r| r.report.as_str()).collect();
    let mut refs = reports.clone();
    refs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37));
    reports
        .iter()
        .zip(&refs)
        .enumerate()
        .map(|(i, (h, r))| EvalPair::from_text(format!("p{i}"), h, &[r]))
        .collect()
}
