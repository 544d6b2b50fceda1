//! Command implementations behind the `ctxreport` binary. Each command
//! writes its outputs plus a `<command>.config.toml` echo into one directory.

use std::fs;
use std::path::{Path, PathBuf};

use ctxreport_core::bench::{bench_scan_vs_attention, save_records, summary_table};
use ctxreport_core::data::generate_synthetic_dataset;
use ctxreport_core::metrics::evaluate as score;
use ctxreport_core::model::build_vocab;
use ctxreport_core::{
    BenchRecord, Dataset, Error, EvalPair, GeneratedReport, LossCurve, MetricConfig, MetricReport,
    ReportModel, Result, RunConfig, Split,
};

pub mod cli;

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOSS_FILE: &str = "loss.json";
pub const REPORTS_FILE: &str = "reports.tsv";
pub const RESULTS_FILE: &str = "results.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const BENCH_JSON: &str = "bench.json";
pub const BENCH_TABLE: &str = "bench.txt";

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Generate the synthetic corpus into `cfg.output_dir`; returns the manifest path.
pub fn synth_data(cfg: &RunConfig) -> Result<PathBuf> {
    let data = generate_synthetic_dataset(&cfg.synth)?;
    let manifest = data.save(&cfg.output_dir)?;
    cfg.write_echo(&cfg.output_dir, "synth-data")?;
    log::info!(
        "wrote {} samples to {}",
        data.records().len(),
        manifest.display()
    );
    Ok(manifest)
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    Dataset::load(&cfg.manifest, cfg.backbone().image_size)
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub curve: LossCurve,
}

/// Train on the training split of `data` and save the checkpoint and loss curve.
pub fn train_on(cfg: &RunConfig, data: &Dataset) -> Result<(ReportModel, TrainOutcome)> {
    cfg.validate()?;
    let templates = cfg.template_set()?;
    let template = templates.get(&cfg.context.template)?.clone();
    let train: Vec<_> = data
        .records()
        .iter()
        .filter(|r| r.split == Split::Train)
        .collect();
    let vocab = build_vocab(&train, &template, &cfg.context.disease_prompt);
    let mut model = ReportModel::new(cfg.model(), template, vocab, cfg.model_seed)?;
    log::info!(
        "training {} parameters on {} samples for {} epochs",
        model.params.num_scalars(),
        train.len(),
        cfg.train.epochs
    );
    let curve = model.train(data, &cfg.train)?;
    let checkpoint = cfg.output_dir.join(CHECKPOINT_DIR);
    model.save(&checkpoint)?;
    write(
        &cfg.output_dir.join(LOSS_FILE),
        &serde_json::to_string_pretty(&curve)?,
    )?;
    cfg.write_echo(&cfg.output_dir, "train")?;
    Ok((model, TrainOutcome { checkpoint, curve }))
}

pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let data = load_dataset(cfg)?;
    Ok(train_on(cfg, &data)?.1)
}

/// Decode `cfg.split` with a trained model; writes `reports.tsv`
/// (`id<TAB>hypothesis`) and `results.json` (hypotheses with references).
pub fn generate_with(
    cfg: &RunConfig,
    model: &ReportModel,
    data: &Dataset,
) -> Result<Vec<GeneratedReport>> {
    let ids = data.ids_in(cfg.split);
    if ids.is_empty() {
        return Err(Error::Validation(format!(
            "split `{}` has no samples",
            cfg.split
        )));
    }
    let reports = model.generate_for(data, &ids, &cfg.beam())?;
    let mut tsv = String::new();
    for r in &reports {
        tsv.push_str(&format!(
            "{}\t{}\n",
            r.id,
            r.hypothesis.replace(['\t', '\n'], " ")
        ));
    }
    write(&cfg.output_dir.join(REPORTS_FILE), &tsv)?;
    write(
        &cfg.output_dir.join(RESULTS_FILE),
        &serde_json::to_string_pretty(&reports)?,
    )?;
    // The echo records the model as trained, not whatever the flags said.
    let echo = RunConfig {
        context: model.config.context.clone(),
        decoder: model.config.decoder.clone(),
        freeze_vision: model.config.freeze_vision,
        ..cfg.clone()
    };
    echo.write_echo(&cfg.output_dir, "generate")?;
    Ok(reports)
}

pub fn generate(cfg: &RunConfig, checkpoint: &Path) -> Result<Vec<GeneratedReport>> {
    let model = ReportModel::load(checkpoint)?;
    let data = Dataset::load(&cfg.manifest, model.config.backbone.image_size)?;
    generate_with(cfg, &model, &data)
}

pub fn load_results(path: &Path) -> Result<Vec<GeneratedReport>> {
    Ok(serde_json::from_str(&read(path)?)?)
}

/// Lines of `id<TAB>text[<TAB>text...]`, in file order.
pub fn load_tsv(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let text = read(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let id = fields.next().unwrap_or_default().to_string();
        let texts: Vec<String> = fields.map(str::to_string).collect();
        if id.is_empty() || texts.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: "expected `id<TAB>text`".into(),
            });
        }
        rows.push((id, texts));
    }
    Ok(rows)
}

/// Pair hypothesis rows with reference rows by id.
pub fn pair_tsv(
    hyps: &[(String, Vec<String>)],
    refs: &[(String, Vec<String>)],
) -> Result<Vec<EvalPair>> {
    hyps.iter()
        .map(|(id, h)| {
            let (_, r) = refs
                .iter()
                .find(|(rid, _)| rid == id)
                .ok_or_else(|| Error::Validation(format!("no reference for `{id}`")))?;
            let r: Vec<&str> = r.iter().map(String::as_str).collect();
            Ok(EvalPair::from_text(id.clone(), &h.join(" "), &r))
        })
        .collect()
}

pub fn evaluate_pairs(cfg: &RunConfig, pairs: &[EvalPair]) -> Result<MetricReport> {
    let report = score(pairs, &MetricConfig::default())?;
    write(
        &cfg.output_dir.join(METRICS_FILE),
        &(report.to_json()? + "\n"),
    )?;
    cfg.write_echo(&cfg.output_dir, "evaluate")?;
    Ok(report)
}

pub fn evaluate_results(cfg: &RunConfig, results: &Path) -> Result<MetricReport> {
    let pairs: Vec<EvalPair> = load_results(results)?
        .iter()
        .map(|r| EvalPair::from_text(r.id.clone(), &r.hypothesis, &[&r.reference]))
        .collect();
    evaluate_pairs(cfg, &pairs)
}

pub fn evaluate_tsv(cfg: &RunConfig, hypotheses: &Path, references: &Path) -> Result<MetricReport> {
    let pairs = pair_tsv(&load_tsv(hypotheses)?, &load_tsv(references)?)?;
    evaluate_pairs(cfg, &pairs)
}

pub fn bench(cfg: &RunConfig) -> Result<(Vec<BenchRecord>, String)> {
    let records = bench_scan_vs_attention(&cfg.bench)?;
    let table = summary_table(&records);
    fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::Io {
        path: cfg.output_dir.clone(),
        source: e,
    })?;
    save_records(&records, &cfg.output_dir.join(BENCH_JSON))?;
    write(&cfg.output_dir.join(BENCH_TABLE), &table)?;
    cfg.write_echo(&cfg.output_dir, "bench")?;
    Ok((records, table))
}
