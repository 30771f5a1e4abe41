//! Unified run configuration. Every section has defaults, unknown keys are
//! rejected, and the canonical JSON hash tags every output.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conv::ConvResNetConfig;
use crate::dataset::{config_hash, Dataset, WindowSpec};
use crate::evaluation::EvalConfig;
use crate::model::{ModelConfig, ModelKind};
use crate::scene::SceneConfig;
use crate::training::TrainConfig;
use crate::tsvit::TsvitConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Kept time steps per window.
    pub context: usize,
    pub albedo_as_input: bool,
    /// Appends a constant-zero auxiliary channel of this name.
    pub dummy_channel: Option<String>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { context: 1, albedo_as_input: false, dummy_channel: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Outputs go to `<out>/<name>/<timestamp>/`.
    pub name: String,
    pub scene: SceneConfig,
    pub dataset: DatasetSection,
    /// Model trained by `train`; context and channels come from the data.
    pub model: ModelConfig,
    /// Baseline used by `--model convresnet` and the sweep's baseline rows.
    pub baseline: ConvResNetConfig,
    pub train: TrainConfig,
    pub baseline_train: TrainConfig,
    pub eval: EvalConfig,
}

/// Transformer size that trains in minutes on one CPU core.
pub fn desk_tsvit() -> TsvitConfig {
    TsvitConfig { t: 1, h: 12, w: 12, c: 10, d: 32, l_t: 2, l_s: 1, heads: 2, ..TsvitConfig::default() }
}

pub fn desk_baseline() -> ConvResNetConfig {
    ConvResNetConfig { patch_size: 9, channels_in: 10, width: 16, n_blocks: 2 }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "default".into(),
            scene: SceneConfig::default(),
            dataset: DatasetSection::default(),
            model: ModelConfig::Tsvit(desk_tsvit()),
            baseline: desk_baseline(),
            train: TrainConfig { steps_per_epoch: Some(600), val_samples: 256, ..TrainConfig::default() },
            baseline_train: TrainConfig { steps_per_epoch: Some(600), batch_size: 64, val_samples: 1024, ..TrainConfig::default() },
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return Err(Error::Config(format!("run name {:?} is not a plain directory name", self.name)));
        }
        if self.dataset.context == 0 {
            return Err(Error::Config("dataset.context must be positive".into()));
        }
        self.scene.validate()?;
        self.train.validate()?;
        self.baseline_train.validate()?;
        self.eval.validate()?;
        match &self.model {
            ModelConfig::Tsvit(c) => TsvitConfig { t: self.dataset.context, ..c.clone() }.validate()?,
            ModelConfig::Convresnet(c) => c.validate()?,
        }
        self.baseline.validate()
    }

    /// Hex SHA-256 of the canonical JSON.
    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Switches the trained model to `kind`, taking the baseline section
    /// for the convolutional model.
    pub fn with_model_kind(mut self, kind: ModelKind) -> Self {
        match (kind, &self.model) {
            (ModelKind::Tsvit, ModelConfig::Convresnet(_)) => self.model = ModelConfig::Tsvit(desk_tsvit()),
            (ModelKind::Convresnet, ModelConfig::Tsvit(_)) => self.model = ModelConfig::Convresnet(self.baseline.clone()),
            _ => {}
        }
        self
    }

    /// Input windows for the trained model.
    pub fn window_spec(&self, ds: &Dataset) -> WindowSpec {
        WindowSpec::new(ds, self.model_context(), self.dataset.albedo_as_input)
    }

    pub fn model_context(&self) -> usize {
        match self.model {
            ModelConfig::Tsvit(_) => self.dataset.context,
            ModelConfig::Convresnet(_) => 1,
        }
    }

    /// Model config sized for `spec`.
    pub fn model_for(&self, spec: &WindowSpec) -> ModelConfig {
        self.model.with_context(spec.context).with_channels(spec.channels.len())
    }

    /// Training settings for the configured model kind.
    pub fn train_for_model(&self) -> &TrainConfig {
        match self.model {
            ModelConfig::Tsvit(_) => &self.train,
            ModelConfig::Convresnet(_) => &self.baseline_train,
        }
    }
}
