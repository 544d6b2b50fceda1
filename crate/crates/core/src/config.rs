//! Run configuration shared by the command-line entry points.
//!
//! Every field has a default, so an empty TOML file is a valid config. Each
//! command echoes its resolved config as `<command>.config.toml` next to its
//! outputs; passing that file back via `--config` repeats the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::data::{Split, SyntheticConfig};
use crate::decoder::{BeamConfig, DecoderConfig};
use crate::error::{Error, Result};
use crate::model::{ContextConfig, ModelConfig, TrainConfig};
use crate::prompt::TemplateSet;
use crate::vision::BackboneConfig;

/// Which dataset's conventions set the defaults that differ between them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetStyle {
    #[default]
    IuXray,
    MimicCxr,
}

impl DatasetStyle {
    pub fn default_beam_width(self) -> usize {
        match self {
            DatasetStyle::IuXray => 5,
            DatasetStyle::MimicCxr => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelScale {
    #[default]
    Miniature,
    Tiny,
    Small,
    Base,
}

impl ModelScale {
    pub fn backbone(self) -> BackboneConfig {
        match self {
            ModelScale::Miniature => BackboneConfig::miniature(),
            ModelScale::Tiny => BackboneConfig::tiny(),
            ModelScale::Small => BackboneConfig::small(),
            ModelScale::Base => BackboneConfig::base(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub style: DatasetStyle,
    /// Dataset manifest read by `train` and `generate`.
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    pub scale: ModelScale,
    /// Overrides the preset's input side; images are resized to it.
    pub image_size: Option<usize>,
    pub decoder: DecoderConfig,
    pub context: ContextConfig,
    /// TOML template set; the built-in set when absent.
    pub templates: Option<PathBuf>,
    pub freeze_vision: bool,
    /// Defaults to the dataset style's width.
    pub beam_width: Option<usize>,
    pub max_len: usize,
    pub length_alpha: f64,
    /// Split decoded by `generate`.
    pub split: Split,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub synth: SyntheticConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let beam = BeamConfig::default();
        Self {
            style: DatasetStyle::default(),
            manifest: PathBuf::from("data/manifest.tsv"),
            output_dir: PathBuf::from("runs/default"),
            scale: ModelScale::default(),
            image_size: None,
            decoder: DecoderConfig::default(),
            context: ContextConfig::default(),
            templates: None,
            freeze_vision: false,
            beam_width: None,
            max_len: beam.max_len,
            length_alpha: beam.alpha,
            split: Split::Test,
            model_seed: 0,
            train: TrainConfig::default(),
            synth: SyntheticConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Write the resolved config as `<command>.config.toml` in `dir`.
    pub fn write_echo(&self, dir: &Path, command: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(format!("{command}.config.toml"));
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn template_set(&self) -> Result<TemplateSet> {
        match &self.templates {
            Some(path) => TemplateSet::load(path),
            None => Ok(TemplateSet::builtin()),
        }
    }

    pub fn backbone(&self) -> BackboneConfig {
        let mut b = self.scale.backbone();
        // Radiographs are single-channel.
        b.in_channels = 1;
        if let Some(side) = self.image_size {
            b.image_size = side;
        }
        b
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone(),
            decoder: self.decoder.clone(),
            context: self.context.clone(),
            freeze_vision: self.freeze_vision,
        }
    }

    pub fn beam(&self) -> BeamConfig {
        BeamConfig {
            width: self
                .beam_width
                .unwrap_or_else(|| self.style.default_beam_width()),
            max_len: self.max_len,
            alpha: self.length_alpha,
            ..BeamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone().validate()?;
        self.decoder.validate()?;
        if self.beam().width == 0 {
            return Err(Error::Config("beam_width must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.train.optimizer.lr.is_finite() && self.train.optimizer.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}
