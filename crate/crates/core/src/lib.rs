//! Selective state-space vision/sequence models, context-sample retrieval
//! with residual-token prompts, a small report decoder, caption metrics and
//! a scan-vs-attention benchmark harness.

pub mod autograd;
pub mod bench;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod prompt;
pub mod retrieval;
pub mod ssm;
pub mod tensor;
pub mod text;
pub mod vision;

pub use bench::{BenchConfig, BenchRecord, KernelKind};
pub use config::{DatasetStyle, ModelScale, RunConfig};
pub use data::{Dataset, SampleRecord, Split, SyntheticConfig};
pub use decoder::{BeamConfig, DecoderConfig};
pub use error::{Error, Result};
pub use metrics::{EvalPair, MetricConfig, MetricReport};
pub use model::{GeneratedReport, LossCurve, ModelConfig, ReportModel, TrainConfig};
pub use tensor::Tensor;
