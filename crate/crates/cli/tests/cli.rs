use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use clap::Parser;
use ctxreport_cli::cli::Cli;
use ctxreport_cli::{LOSS_FILE, METRICS_FILE, REPORTS_FILE, RESULTS_FILE};
use ctxreport_core::{LossCurve, MetricReport, RunConfig};
use tempfile::TempDir;

fn ctxreport(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxreport"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ctxreport(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn echo(dir: &Path, command: &str) -> RunConfig {
    RunConfig::load(&dir.join(format!("{command}.config.toml"))).unwrap()
}

const TOY: &[&str] = &[
    "--samples",
    "24",
    "--epochs",
    "2",
    "--batch-size",
    "8",
    "--max-len",
    "12",
    "--beam-width",
    "2",
];

fn args<'a>(cmd: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd, "--output-dir", out, "--manifest", "data/manifest.tsv"];
    v.extend_from_slice(TOY);
    v.extend_from_slice(extra);
    v
}

#[test]
fn toy_pipeline_runs_end_to_end() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let manifest = ok(dir, &args("synth-data", "data", &[]));
    assert!(manifest.trim().ends_with("manifest.tsv"));
    assert!(dir.join("data/synth-data.config.toml").exists());

    let trained = ok(dir, &args("train", "run", &["--n-pairs", "1"]));
    assert!(trained.contains("final loss"));
    let curve: LossCurve =
        serde_json::from_str(&fs::read_to_string(dir.join("run").join(LOSS_FILE)).unwrap())
            .unwrap();
    assert_eq!(curve.epochs.len(), 2);
    assert!(curve.epochs.iter().all(|l| l.is_finite()));
    assert!(dir.join("run/checkpoint").is_dir());

    let generated = ok(dir, &args("generate", "run", &["--split", "test"]));
    assert!(generated.starts_with("generated "));
    let tsv = fs::read_to_string(dir.join("run").join(REPORTS_FILE)).unwrap();
    assert!(!tsv.is_empty());
    assert!(tsv.lines().all(|l| l.contains('\t')));
    assert!(dir.join("run").join(RESULTS_FILE).exists());

    let table = ok(dir, &args("evaluate", "run", &[]));
    assert!(table.contains("BLEU-4") && table.contains("CIDEr"));
    let report = MetricReport::load(&dir.join("run").join(METRICS_FILE)).unwrap();
    for v in [report.bleu1, report.bleu4, report.rouge_l, report.meteor] {
        assert!((0.0..=1.0).contains(&v), "{v}");
    }
    for cmd in ["train", "generate", "evaluate"] {
        assert!(dir.join(format!("run/{cmd}.config.toml")).exists(), "{cmd}");
    }
}

#[test]
fn evaluating_references_against_themselves_is_perfect() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let text = "a\tthe heart size is normal\n\
                b\tsmall left pleural effusion is present\n\
                c\tno acute cardiopulmonary process\n\
                d\tmild cardiomegaly with clear lungs\n";
    fs::write(dir.join("hyp.tsv"), text).unwrap();
    fs::write(dir.join("ref.tsv"), text).unwrap();
    ok(
        dir,
        &[
            "evaluate",
            "--hypotheses",
            "hyp.tsv",
            "--references",
            "ref.tsv",
            "--output-dir",
            "eval",
        ],
    );
    let r = MetricReport::load(&dir.join("eval").join(METRICS_FILE)).unwrap();
    for v in [r.bleu1, r.bleu2, r.bleu3, r.bleu4, r.rouge_l] {
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }
    assert!((r.cider - 10.0).abs() < 1e-9, "{}", r.cider);
}

#[test]
fn context_switch_shows_in_the_echo() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    ok(dir, &args("synth-data", "data", &[]));
    ok(dir, &args("train", "with", &["--n-pairs", "2"]));
    ok(dir, &args("train", "without", &["--n-pairs", "0"]));
    let with = echo(&dir.join("with"), "train");
    let without = echo(&dir.join("without"), "train");
    assert_eq!(with.context.n_pairs, 2);
    assert_eq!(without.context.n_pairs, 0);
    assert_ne!(with, without);

    // Generation echoes the context the checkpoint was trained with.
    ok(
        dir,
        &args(
            "generate",
            "without",
            &["--n-pairs", "3", "--split", "test"],
        ),
    );
    assert_eq!(echo(&dir.join("without"), "generate").context.n_pairs, 0);
}

#[test]
fn missing_inputs_exit_nonzero() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    for argv in [
        vec![
            "train",
            "--manifest",
            "nope/manifest.tsv",
            "--output-dir",
            "x",
        ],
        vec!["generate", "--checkpoint", "nope", "--output-dir", "x"],
        vec!["evaluate", "--results", "nope.json", "--output-dir", "x"],
        vec!["evaluate", "--hypotheses", "h.tsv", "--references", "r.tsv"],
        vec!["train", "--config", "missing.toml"],
    ] {
        let out = ctxreport(dir, &argv);
        assert!(!out.status.success(), "{argv:?}");
        assert!(
            String::from_utf8_lossy(&out.stderr).contains("error"),
            "{argv:?}"
        );
    }
    // Usage errors come from the parser.
    assert!(!ctxreport(dir, &["evaluate", "--hypotheses", "h.tsv"])
        .status
        .success());
    assert!(!ctxreport(dir, &["frobnicate"]).status.success());
}

#[test]
fn flags_beat_the_config_file_which_beats_defaults() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("run.toml");
    fs::write(
        &path,
        "max_len = 20\n[train]\nepochs = 7\nbatch_size = 4\n[context]\nn_pairs = 1\n",
    )
    .unwrap();
    let p = path.to_str().unwrap();

    let defaults = RunConfig::default();
    let from_file = Cli::try_parse_from(["ctxreport", "train", "--config", p])
        .unwrap()
        .resolve()
        .unwrap();
    assert_eq!(from_file.train.epochs, 7);
    assert_eq!(from_file.train.batch_size, 4);
    assert_eq!(from_file.context.n_pairs, 1);
    assert_eq!(from_file.max_len, 20);
    assert_eq!(from_file.train.optimizer, defaults.train.optimizer);
    assert_eq!(from_file.synth, defaults.synth);

    let flagged = Cli::try_parse_from([
        "ctxreport",
        "train",
        "--config",
        p,
        "--epochs",
        "3",
        "--seed",
        "9",
    ])
    .unwrap()
    .resolve()
    .unwrap();
    assert_eq!(flagged.train.epochs, 3);
    assert_eq!(flagged.train.batch_size, 4);
    assert_eq!(
        (
            flagged.model_seed,
            flagged.train.seed,
            flagged.context.seed,
            flagged.synth.seed
        ),
        (9, 9, 9, 9)
    );

    let bare = Cli::try_parse_from(["ctxreport", "bench"])
        .unwrap()
        .resolve()
        .unwrap();
    assert_eq!(bare, defaults);

    fs::write(&path, "[train]\nepochs = \"many\"\n").unwrap();
    assert!(Cli::try_parse_from(["ctxreport", "train", "--config", p])
        .unwrap()
        .resolve()
        .is_err());
}

#[test]
fn bench_writes_a_table() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    let table = ok(
        dir,
        &[
            "bench",
            "--lengths",
            "64,128",
            "--repeats",
            "3",
            "--output-dir",
            "b",
        ],
    );
    assert!(table.contains("128"));
    assert!(dir.join("b/bench.json").exists());
    assert_eq!(echo(&dir.join("b"), "bench").bench.lengths, vec![64, 128]);
}
