//! Argument parsing. Flags override fields of the `--config` file, which
//! overrides the defaults.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ctxreport_core::retrieval::Strategy;
use ctxreport_core::{DatasetStyle, ModelScale, Result, RunConfig, Split};

#[derive(Debug, Parser)]
#[command(
    name = "ctxreport",
    version,
    about = "Context-residual report generation toolkit"
)]
pub struct Cli {
    /// TOML run config; unset fields keep their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic chest-film corpus (images + manifest) to the output dir.
    SynthData,
    /// Train a model and save a checkpoint, loss curve and config echo.
    Train,
    /// Decode a split with a trained checkpoint.
    Generate {
        /// Checkpoint directory; defaults to `<output_dir>/checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score generated reports.
    Evaluate {
        /// `results.json` from `generate`.
        #[arg(long, conflicts_with_all = ["hypotheses", "references"])]
        results: Option<PathBuf>,
        /// `id<TAB>text` hypotheses.
        #[arg(long, requires = "references")]
        hypotheses: Option<PathBuf>,
        /// `id<TAB>ref[<TAB>ref...]` references.
        #[arg(long, requires = "hypotheses")]
        references: Option<PathBuf>,
    },
    /// Time the selective scan against causal attention over sequence lengths.
    Bench,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum StrategyArg {
    Label,
    Keyword,
    Random,
}

#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_style)]
    pub style: Option<DatasetStyle>,
    #[arg(long, global = true, value_parser = parse_scale)]
    pub scale: Option<ModelScale>,
    #[arg(long, global = true)]
    pub image_size: Option<usize>,
    /// Context pairs per prompt; 0 disables context.
    #[arg(long, global = true)]
    pub n_pairs: Option<usize>,
    #[arg(long, global = true)]
    pub fixed_pair: Option<bool>,
    #[arg(long, global = true, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// Keywords for the keyword strategy (repeatable).
    #[arg(long = "keyword", global = true)]
    pub keywords: Vec<String>,
    #[arg(long, global = true)]
    pub template: Option<String>,
    #[arg(long, global = true)]
    pub templates: Option<PathBuf>,
    #[arg(long, global = true)]
    pub freeze_vision: Option<bool>,
    #[arg(long, global = true)]
    pub beam_width: Option<usize>,
    #[arg(long, global = true)]
    pub max_len: Option<usize>,
    #[arg(long, global = true, value_parser = parse_split)]
    pub split: Option<Split>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    /// Sets the model, training, context and synthetic-data seeds together.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub lengths: Vec<usize>,
    #[arg(long, global = true)]
    pub repeats: Option<usize>,
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
        .map_err(|e| e.to_string())
}

fn parse_style(s: &str) -> std::result::Result<DatasetStyle, String> {
    parse_enum(s)
}

fn parse_scale(s: &str) -> std::result::Result<ModelScale, String> {
    parse_enum(s)
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse::<Split>().map_err(|e| e.to_string())
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        macro_rules! set {
            ($field:ident => $($target:tt)+) => {
                if let Some(v) = self.$field.clone() {
                    cfg.$($target)+ = v;
                }
            };
        }
        set!(manifest => manifest);
        set!(output_dir => output_dir);
        set!(style => style);
        set!(scale => scale);
        set!(n_pairs => context.n_pairs);
        set!(fixed_pair => context.fixed_pair);
        set!(template => context.template);
        set!(freeze_vision => freeze_vision);
        set!(max_len => max_len);
        set!(split => split);
        set!(epochs => train.epochs);
        set!(batch_size => train.batch_size);
        set!(lr => train.optimizer.lr);
        set!(samples => synth.samples);
        set!(repeats => bench.repeats);
        if self.image_size.is_some() {
            cfg.image_size = self.image_size;
            cfg.synth.image_size = self.image_size.unwrap_or(cfg.synth.image_size);
        }
        if self.templates.is_some() {
            cfg.templates = self.templates.clone();
        }
        if self.beam_width.is_some() {
            cfg.beam_width = self.beam_width;
        }
        if let Some(s) = self.strategy {
            cfg.context.strategy = match s {
                StrategyArg::Label => Strategy::Label,
                StrategyArg::Random => Strategy::Random,
                StrategyArg::Keyword => Strategy::default(),
            };
        }
        if !self.keywords.is_empty() {
            cfg.context.strategy = Strategy::Keyword {
                keywords: self.keywords.clone(),
            };
        }
        if let Some(seed) = self.seed {
            cfg.model_seed = seed;
            cfg.train.seed = seed;
            cfg.context.seed = seed;
            cfg.synth.seed = seed;
            cfg.bench.seed = seed;
        }
        if !self.lengths.is_empty() {
            cfg.bench.lengths = self.lengths.clone();
        }
    }
}

impl Cli {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        self.overrides.apply(&mut cfg);
        Ok(cfg)
    }
}
