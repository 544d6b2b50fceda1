//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! straight to stdout (bypassing the harness capture) before asserting.
//! Tests share a lock so the timing-sensitive ones run alone.

mod common;

use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use common::{rel_err, zoh_series};
use ctxreport_core::autograd::{Graph, Reduction};
use ctxreport_core::bench::{
    attention_flops, bench_scan_vs_attention, doubling_ratios, scan_flops, ATTN_PROJECTION,
};
use ctxreport_core::data::{generate_synthetic_dataset, SplitRatios};
use ctxreport_core::decoder::{beam_search, graph as dgraph, init_decoder, TableLm, TrainingBatch};
use ctxreport_core::metrics::{
    cider_per_sample, evaluate, meteor_sentence, modified_precision, rouge_l_pair,
};
use ctxreport_core::model::{build_vocab, ContextConfig};
use ctxreport_core::optim::AdamConfig;
use ctxreport_core::params::ParamStore;
use ctxreport_core::prompt::{
    assemble_prompt, compute_residuals, Origin, ProjectedToken, TemplateSet,
};
use ctxreport_core::ssm::{
    discretize_zoh, gradient_check, scan_parallel, scan_sequential, ContinuousSsm, DiscreteStep,
    Mat, StateMatrix,
};
use ctxreport_core::vision::{graph as vgraph, init_backbone, FeatureStage, TokenSequence};
use ctxreport_core::{
    BeamConfig, BenchConfig, Dataset, DecoderConfig, EvalPair, GeneratedReport, KernelKind,
    LossCurve, MetricConfig, MetricReport, ModelConfig, ReportModel, Result, SampleRecord, Split,
    SyntheticConfig, Tensor, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(n: usize, name: &str, pass: bool, elapsed: Duration, detail: &str) -> bool {
    let line = format!(
        "criterion {n:>2} {name:<26} {}  ({:.2?}) {detail}\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    pass
}

fn diag_system(a: Vec<f64>, b: Vec<f64>, p: usize) -> ContinuousSsm<f64> {
    let n = a.len();
    ContinuousSsm::new(
        StateMatrix::Diagonal(a),
        Mat::new(n, p, b).unwrap(),
        Mat::new(1, n, vec![1.0; n]).unwrap(),
    )
    .unwrap()
}

fn mat_rows(m: &Mat<f64>) -> Vec<Vec<f64>> {
    (0..m.rows)
        .map(|r| (0..m.cols).map(|c| m.get(r, c)).collect())
        .collect()
}

fn max_abs(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    x.iter()
        .flatten()
        .zip(y.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

#[test]
fn c01_zoh_oracle() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=6);
        let p = rng.random_range(1..=3);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..-0.01)).collect();
        let b: Vec<f64> = (0..n * p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let delta = rng.random_range(0.001..0.5);
        let step = discretize_zoh(&diag_system(a.clone(), b.clone(), p), delta).unwrap();
        let dense_a: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { a[i] } else { 0.0 }).collect())
            .collect();
        let dense_b: Vec<Vec<f64>> = b.chunks(p).map(<[f64]>::to_vec).collect();
        let (a_bar, b_bar) = zoh_series(&dense_a, &dense_b, delta, 30);
        worst = worst
            .max(max_abs(&mat_rows(&step.a_bar.to_dense()), &a_bar))
            .max(max_abs(&mat_rows(&step.b_bar), &b_bar));
    }
    let half = discretize_zoh(&diag_system(vec![-1.0], vec![1.0], 1), 2f64.ln()).unwrap();
    let a_err = (half.a_bar.to_dense().get(0, 0) - 0.5).abs();
    let b_err = (half.b_bar.get(0, 0) - 0.5).abs();
    let elapsed = t0.elapsed();
    let pass = worst < 1e-8 && a_err < 1e-12 && b_err < 1e-12 && elapsed < Duration::from_secs(1);
    let detail = format!("series max err {worst:.2e}; ln2 case errs {a_err:.1e}, {b_err:.1e}");
    assert!(verdict(1, "zoh oracle", pass, elapsed, &detail), "{detail}");
}

/// Steps, readout, inputs and initial state.
type ScanCase<T> = (Vec<DiscreteStep<T>>, Mat<T>, Vec<Vec<T>>, Vec<T>);

fn scan_case(rng: &mut ChaCha8Rng, len: usize, n: usize, p: usize) -> ScanCase<f64> {
    let a: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..-0.05)).collect();
    let mut steps = Vec::with_capacity(len);
    let mut xs = Vec::with_capacity(len);
    for _ in 0..len {
        let b: Vec<f64> = (0..n * p).map(|_| rng.random_range(-1.0..1.0)).collect();
        steps.push(
            discretize_zoh(&diag_system(a.clone(), b, p), rng.random_range(0.01..1.0)).unwrap(),
        );
        xs.push((0..p).map(|_| rng.random_range(-1.0..1.0)).collect());
    }
    let c = Mat::new(
        2,
        n,
        (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let h0 = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    (steps, c, xs, h0)
}

fn to_f32(steps: &[DiscreteStep<f64>], c: &Mat<f64>, xs: &[Vec<f64>], h0: &[f64]) -> ScanCase<f32> {
    let m = |m: &Mat<f64>| {
        Mat::new(m.rows, m.cols, m.data.iter().map(|&v| v as f32).collect()).unwrap()
    };
    let steps = steps
        .iter()
        .map(|s| DiscreteStep {
            a_bar: match &s.a_bar {
                StateMatrix::Diagonal(d) => {
                    StateMatrix::Diagonal(d.iter().map(|&v| v as f32).collect())
                }
                StateMatrix::Dense(d) => StateMatrix::Dense(m(d)),
            },
            b_bar: m(&s.b_bar),
            delta: s.delta as f32,
        })
        .collect();
    let xs = xs
        .iter()
        .map(|x| x.iter().map(|&v| v as f32).collect())
        .collect();
    (steps, m(c), xs, h0.iter().map(|&v| v as f32).collect())
}

#[test]
fn c02_scan_equivalence() {
    let _g = serial();
    let t0 = Instant::now();
    let mut worst64 = 0.0f64;
    let mut worst32 = 0.0f64;
    for &len in &[1usize, 2, 3, 17, 128, 4096] {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + len as u64);
            let (steps, c, xs, h0) = scan_case(&mut rng, len, 4, 2);
            let s = scan_sequential(&steps, &c, &xs, &h0).unwrap();
            let p = scan_parallel(&steps, &c, &xs, &h0).unwrap();
            worst64 = worst64.max(rel_err(&p.concat(), &s.concat()));
            let (steps, c, xs, h0) = to_f32(&steps, &c, &xs, &h0);
            let s = scan_sequential(&steps, &c, &xs, &h0).unwrap();
            let p = scan_parallel(&steps, &c, &xs, &h0).unwrap();
            let f = |v: Vec<Vec<f32>>| v.concat().into_iter().map(f64::from).collect::<Vec<_>>();
            worst32 = worst32.max(rel_err(&f(p), &f(s)));
        }
    }
    let elapsed = t0.elapsed();
    let pass = worst64 < 1e-5 && worst32 < 1e-5 && elapsed < Duration::from_secs(30);
    let detail = format!("max rel err f64 {worst64:.2e}, f32 {worst32:.2e}");
    assert!(
        verdict(2, "scan equivalence", pass, elapsed, &detail),
        "{detail}"
    );
}

#[test]
fn c03_gradient_checks() {
    let _g = serial();
    let t0 = Instant::now();

    // Selective scan on raw tensors.
    let (l, d, n) = (12, 3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let parts = [
        Tensor::uniform(&[l, d], -1.0, 1.0, &mut rng),
        Tensor::uniform(&[l, d], 0.05, 0.6, &mut rng),
        Tensor::uniform(&[d, n], -2.0, -0.2, &mut rng),
        Tensor::uniform(&[l, n], -1.0, 1.0, &mut rng),
        Tensor::uniform(&[l, n], -1.0, 1.0, &mut rng),
    ];
    let w = Tensor::randn(&[l, d], 1.0, &mut rng);
    let point: Vec<f64> = parts.iter().flat_map(|t| t.data().to_vec()).collect();
    let f = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let mut off = 0;
        let mut vars = Vec::new();
        for t in &parts {
            vars.push(g.leaf(Tensor::new(
                t.shape().to_vec(),
                p[off..off + t.len()].to_vec(),
            )?));
            off += t.len();
        }
        let y = g.selective_scan(vars[0], vars[1], vars[2], vars[3], vars[4])?;
        let wv = g.constant(w.clone());
        let prod = g.mul(y, wv)?;
        let loss = g.sum(prod);
        let grads = g.backward(loss)?;
        let flat = vars
            .iter()
            .flat_map(|v| grads.get(*v).unwrap().data().to_vec())
            .collect();
        Ok((g.value(loss).data()[0], flat))
    };
    let ssm = gradient_check(f, &point, 1e-5).unwrap().max_relative_error;

    // Backbone whose first stage runs on a 4x4 token grid.
    let cfg = ctxreport_core::vision::BackboneConfig {
        in_channels: 1,
        image_size: 8,
        patch: 2,
        dims: vec![4, 8],
        depths: vec![1, 1],
        d_state: 2,
        expand: 2,
        conv_kernel: 3,
    };
    let mut store = ParamStore::new();
    init_backbone(&mut store, &cfg, "vis", &mut rng);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let t = store.get_mut(&name).unwrap();
        let noise = Tensor::randn(t.shape(), 0.05, &mut rng);
        t.add_assign(&noise);
    }
    let image = Tensor::uniform(&[1, 8, 8], 0.0, 1.0, &mut rng);
    let probe = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let vision = common::check_store(
        &store,
        "vis",
        |ctx| {
            let img = ctx.g.constant(image.clone());
            let out = vgraph::backbone(ctx, &cfg, img, "vis")?;
            let w = ctx.g.constant(probe.clone());
            let prod = ctx.g.mul(out.var, w)?;
            Ok(ctx.g.sum(prod))
        },
        1e-5,
    )
    .max_relative_error;

    // Tiny decoder under the masked report loss.
    let dcfg = DecoderConfig {
        vocab_size: 7,
        width: 4,
        layers: 1,
        window: 16,
        d_state: 2,
        expand: 2,
        conv_kernel: 2,
        ..DecoderConfig::default()
    };
    let mut dstore = ParamStore::new();
    init_decoder(&mut dstore, &dcfg, "dec", &mut rng);
    let prompt = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let report = [4u32, 6, 5];
    let batch = TrainingBatch::new(3, &report);
    let decoder = common::check_store(
        &dstore,
        "dec",
        |ctx| {
            let p = ctx.g.constant(prompt.clone());
            let x = dgraph::teacher_forced_input(ctx, p, &report, "dec")?;
            let logits = dgraph::forward(ctx, &dcfg, x, "dec")?;
            ctx.g
                .cross_entropy(logits, &batch.targets, &batch.mask, Reduction::Mean)
        },
        1e-5,
    )
    .max_relative_error;

    let elapsed = t0.elapsed();
    let pass = ssm < 1e-4 && vision < 1e-4 && decoder < 1e-4 && elapsed < Duration::from_secs(120);
    let detail =
        format!("max rel err scan {ssm:.2e}, backbone {vision:.2e}, decoder {decoder:.2e}");
    assert!(
        verdict(3, "gradient checks", pass, elapsed, &detail),
        "{detail}"
    );
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

#[test]
fn c04_metric_oracles() {
    let _g = serial();
    let t0 = Instant::now();
    let mut fails = Vec::new();

    let (m, t) = modified_precision(
        &toks("the the the the the the the"),
        &[toks("the cat is on the mat")],
        1,
    );
    if (m, t) != (2, 7) {
        fails.push(format!("clipped precision {m}/{t}"));
    }
    let (p, r, _) = rouge_l_pair(&toks("the cat sat"), &toks("the cat on the mat"), 1.2);
    if p != 2.0 / 3.0 || r != 2.0 / 5.0 {
        fails.push(format!("rouge P={p} R={r}"));
    }
    for len in 1..=10usize {
        let s: Vec<String> = (0..len).map(|i| format!("t{i}")).collect();
        let got = meteor_sentence(&s, std::slice::from_ref(&s));
        let want = 1.0 - 0.5 / (len as f64).powi(3);
        if (got - want).abs() > 1e-9 {
            fails.push(format!("meteor m={len}: {got} vs {want}"));
        }
    }
    let corpus: Vec<EvalPair> = [
        "the heart size is normal and the lungs are clear",
        "there is a small left pleural effusion",
        "moderate atelectasis at the right base is seen",
        "no acute cardiopulmonary abnormality",
        "large opacity in the right upper lobe",
    ]
    .iter()
    .enumerate()
    .map(|(i, s)| EvalPair::from_text(i.to_string(), s, &[s]))
    .collect();
    for (i, s) in cider_per_sample(&corpus, 6.0, true)
        .unwrap()
        .into_iter()
        .enumerate()
    {
        if (s - 10.0).abs() > 1e-9 {
            fails.push(format!("cider sample {i}: {s}"));
        }
    }
    let report = evaluate(&corpus, &MetricConfig::default()).unwrap();
    // METEOR's fragmentation penalty keeps a perfect match at 1 - 0.5/m^3.
    let meteor_identity = corpus
        .iter()
        .map(|p| 1.0 - 0.5 / (p.hypothesis.len() as f64).powi(3))
        .sum::<f64>()
        / corpus.len() as f64;
    for (name, got, want) in [
        ("BLEU-1", report.bleu1, 1.0),
        ("BLEU-2", report.bleu2, 1.0),
        ("BLEU-3", report.bleu3, 1.0),
        ("BLEU-4", report.bleu4, 1.0),
        ("ROUGE-L", report.rouge_l, 1.0),
        ("METEOR", report.meteor, meteor_identity),
        ("CIDEr", report.cider, 10.0),
    ] {
        if (got - want).abs() > 1e-9 {
            fails.push(format!("identity {name}: {got}"));
        }
    }
    let elapsed = t0.elapsed();
    let pass = fails.is_empty() && elapsed < Duration::from_secs(5);
    let detail = if fails.is_empty() {
        format!("identity METEOR {:.6}", report.meteor)
    } else {
        fails.join("; ")
    };
    assert!(
        verdict(4, "metric oracles", pass, elapsed, &detail),
        "{detail}"
    );
}

#[test]
fn c05_beam_oracle() {
    let _g = serial();
    let t0 = Instant::now();
    let mut misses = Vec::new();
    for seed in 0..50u64 {
        let lm = TableLm::random(4, 3, 1.0, seed);
        let (best, _) = lm.brute_force_best(3).unwrap();
        for width in 4..=16 {
            let cfg = BeamConfig {
                width,
                max_len: 3,
                alpha: 0.7,
                eos: None,
            };
            if beam_search(&lm, &cfg).unwrap().tokens != best {
                misses.push((seed, width));
            }
        }
    }
    let elapsed = t0.elapsed();
    let pass = misses.is_empty() && elapsed < Duration::from_secs(10);
    let detail = format!(
        "50 toy LMs x widths 4..=16, {} misses {misses:?}",
        misses.len()
    );
    assert!(
        verdict(5, "beam oracle", pass, elapsed, &detail),
        "{detail}"
    );
}

fn model_for(data: &Dataset, n_pairs: usize, seed: u64) -> ReportModel {
    let template = TemplateSet::builtin().default_template().clone();
    let train: Vec<&SampleRecord> = data
        .records()
        .iter()
        .filter(|r| r.split == Split::Train)
        .collect();
    let config = ModelConfig {
        context: ContextConfig {
            n_pairs,
            fixed_pair: true,
            seed,
            ..ContextConfig::default()
        },
        ..ModelConfig::default()
    };
    let vocab = build_vocab(&train, &template, &config.context.disease_prompt);
    ReportModel::new(config, template, vocab, seed).unwrap()
}

fn train_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        optimizer: AdamConfig {
            lr: 3e-3,
            ..AdamConfig::default()
        },
        seed,
    }
}

fn score(reports: &[GeneratedReport]) -> MetricReport {
    let pairs: Vec<EvalPair> = reports
        .iter()
        .map(|g| EvalPair::from_text(g.id.clone(), &g.hypothesis, &[&g.reference]))
        .collect();
    evaluate(&pairs, &MetricConfig::default()).unwrap()
}

#[derive(Clone, Debug, PartialEq)]
struct RunOutcome {
    curve: LossCurve,
    reports: Vec<GeneratedReport>,
    metrics: MetricReport,
}

/// 64 samples, all in the training split, memorized with context.
fn overfit_run() -> RunOutcome {
    let data = generate_synthetic_dataset(&SyntheticConfig {
        samples: 64,
        split: SplitRatios {
            train: 1.0,
            test: 0.0,
            val: 0.0,
        },
        ..SyntheticConfig::default()
    })
    .unwrap();
    let mut model = model_for(&data, 3, 1);
    let curve = model.train(&data, &train_cfg(40, 0)).unwrap();
    let reports = model
        .generate_for(&data, &data.ids_in(Split::Train), &BeamConfig::default())
        .unwrap();
    let metrics = score(&reports);
    RunOutcome {
        curve,
        reports,
        metrics,
    }
}

/// Validation BLEU-4 with (`n_pairs = 3`) and without context, per seed.
fn ablation_run() -> Vec<(RunOutcome, RunOutcome)> {
    let data = generate_synthetic_dataset(&SyntheticConfig {
        samples: 96,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let val = data.ids_in(Split::Val);
    (0..3u64)
        .map(|seed| {
            let run = |n_pairs| {
                let mut model = model_for(&data, n_pairs, seed);
                let curve = model.train(&data, &train_cfg(20, seed)).unwrap();
                let reports = model
                    .generate_for(&data, &val, &BeamConfig::default())
                    .unwrap();
                let metrics = score(&reports);
                RunOutcome {
                    curve,
                    reports,
                    metrics,
                }
            };
            (run(3), run(0))
        })
        .collect()
}

static OVERFIT: OnceLock<(RunOutcome, Duration)> = OnceLock::new();
static ABLATION: OnceLock<(Vec<(RunOutcome, RunOutcome)>, Duration)> = OnceLock::new();

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t0 = Instant::now();
    let out = f();
    (out, t0.elapsed())
}

#[test]
fn c06_overfit() {
    let _g = serial();
    let (run, elapsed) = OVERFIT.get_or_init(|| timed(overfit_run));
    let loss = *run.curve.epochs.last().unwrap();
    let bleu4 = run.metrics.bleu4;
    let pass = loss < 0.1 && bleu4 > 0.9 && *elapsed < Duration::from_secs(300);
    let detail = format!("final per-token loss {loss:.4}, train BLEU-4 {bleu4:.4}");
    assert!(verdict(6, "overfit", pass, *elapsed, &detail), "{detail}");
}

#[test]
fn c07_context_ablation() {
    let _g = serial();
    let (runs, elapsed) = ABLATION.get_or_init(|| timed(ablation_run));
    let with: Vec<f64> = runs.iter().map(|(w, _)| w.metrics.bleu4).collect();
    let without: Vec<f64> = runs.iter().map(|(_, wo)| wo.metrics.bleu4).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let pass = mean(&with) >= mean(&without) && *elapsed < Duration::from_secs(900);
    let detail = format!(
        "val BLEU-4 with context {:.4} {with:.4?}, without {:.4} {without:.4?}",
        mean(&with),
        mean(&without)
    );
    assert!(
        verdict(7, "context ablation", pass, *elapsed, &detail),
        "{detail}"
    );
}

#[test]
fn c08_prompt_length_law() {
    let _g = serial();
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut bad = Vec::new();
    for _ in 0..100 {
        let e = rng.random_range(1..=8);
        let n = rng.random_range(1..=6);
        let p = rng.random_range(1..=4);
        let t_pre = rng.random_range(0..=20);
        let l = rng.random_range(1..=64);
        let t_post = rng.random_range(0..=8);
        let tok = |rng: &mut ChaCha8Rng| {
            ProjectedToken::new(
                (0..e).map(|_| rng.random_range(-1.0..1.0)).collect(),
                Origin::VisionGlobal,
            )
            .unwrap()
        };
        let v_g = tok(&mut rng);
        let pos: Vec<_> = (0..n).map(|_| tok(&mut rng)).collect();
        let neg: Vec<_> = (0..n).map(|_| tok(&mut rng)).collect();
        let dis: Vec<_> = (0..p).map(|_| tok(&mut rng)).collect();
        let residuals = compute_residuals(&v_g, &pos, &neg, &dis).unwrap();
        let v_s = TokenSequence {
            tokens: Tensor::uniform(&[l, e], -1.0, 1.0, &mut rng),
            stage: FeatureStage::Projected,
        };
        let prompt = assemble_prompt(
            &residuals,
            &Tensor::zeros(&[t_pre, e]),
            &v_s,
            &Tensor::zeros(&[t_post, e]),
        )
        .unwrap();
        let want = 3 * p + 2 * n + t_pre + l + t_post;
        if prompt.len() != want {
            bad.push((n, p, t_pre, l, t_post, prompt.len()));
        }
    }
    let elapsed = t0.elapsed();
    let pass = bad.is_empty();
    let detail = format!("100 random configs, {} mismatches {bad:?}", bad.len());
    assert!(
        verdict(8, "prompt length law", pass, elapsed, &detail),
        "{detail}"
    );
}

#[test]
fn c09_efficiency_slopes() {
    let _g = serial();
    let t0 = Instant::now();
    let cfg = BenchConfig {
        lengths: vec![1024, 2048, 4096, 8192],
        ..BenchConfig::default()
    };
    let records = bench_scan_vs_attention(&cfg).unwrap();
    // A ratio belongs to the length it doubles from.
    let from = |kind| -> Vec<(usize, f64)> {
        doubling_ratios(&records, kind)
            .into_iter()
            .map(|(len, r)| (len / 2, r))
            .filter(|(len, _)| *len >= 2048)
            .collect()
    };
    let scan = from(KernelKind::Scan);
    let attn = from(KernelKind::Attention);
    let (d, n) = (cfg.width as u64, cfg.d_state);
    let mut flops_exact = true;
    for &l in &cfg.lengths {
        flops_exact &= scan_flops(2 * l, n, cfg.width) == 2 * scan_flops(l, n, cfg.width);
        let quad = |l: usize| attention_flops(l, cfg.width) - ATTN_PROJECTION * l as u64 * d * d;
        flops_exact &= quad(2 * l) == 4 * quad(l);
    }
    let elapsed = t0.elapsed();
    let pass = !scan.is_empty()
        && scan.iter().all(|(_, r)| (1.6..=2.6).contains(r))
        && attn.iter().all(|(_, r)| (3.2..=5.0).contains(r))
        && flops_exact
        && elapsed < Duration::from_secs(180);
    let detail = format!(
        "scan ratios {scan:.2?}, attention ratios {attn:.2?}, FLOP ratios exact: {flops_exact}"
    );
    assert!(
        verdict(9, "efficiency slopes", pass, elapsed, &detail),
        "{detail}"
    );
}

#[test]
fn c10_determinism() {
    let _g = serial();
    let t0 = Instant::now();
    let (first_overfit, _) = OVERFIT.get_or_init(|| timed(overfit_run));
    let (first_ablation, _) = ABLATION.get_or_init(|| timed(ablation_run));
    let second_overfit = overfit_run();
    let second_ablation = ablation_run();
    let bits = |c: &LossCurve| {
        c.steps
            .iter()
            .chain(&c.epochs)
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    let same = |a: &RunOutcome, b: &RunOutcome| {
        bits(&a.curve) == bits(&b.curve)
            && a.reports == b.reports
            && a.metrics.to_json().unwrap() == b.metrics.to_json().unwrap()
    };
    let overfit_same = same(first_overfit, &second_overfit);
    let ablation_same = first_ablation
        .iter()
        .zip(&second_ablation)
        .all(|((w1, o1), (w2, o2))| same(w1, w2) && same(o1, o2));
    let elapsed = t0.elapsed();
    let pass = overfit_same && ablation_same;
    let detail = format!("overfit identical: {overfit_same}, ablation identical: {ablation_same}");
    assert!(
        verdict(10, "determinism", pass, elapsed, &detail),
        "{detail}"
    );
}
