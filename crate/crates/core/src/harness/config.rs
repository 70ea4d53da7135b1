//! Run configuration read from TOML. Every section is optional and unknown
//! keys are rejected, so a typo is reported by name instead of ignored.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::complexity::BottleneckConfig;
use crate::error::{Error, Result};
use crate::film::{ClsTrainConfig, FilmClassifierConfig};
use crate::harness::phantom::{ClsPhantomSpec, PhantomSpec};
use crate::seg::{SegModelConfig, SegTrainConfig};
use crate::tmax::AttentionMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegDataConfig {
    pub train: PhantomSpec,
    /// Held-out set shared by every sweep scenario.
    pub n_eval: usize,
    pub eval_seed: u64,
}

impl Default for SegDataConfig {
    fn default() -> Self {
        Self {
            train: PhantomSpec::default(),
            n_eval: 4,
            eval_seed: 1_000_003,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Load weights from this checkpoint instead of training.
    pub checkpoint: Option<PathBuf>,
    /// Train a separate model for every scenario on that scenario only.
    pub per_scenario_training: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClsDataConfig {
    pub train: ClsPhantomSpec,
    pub n_eval: usize,
    pub eval_seed: u64,
}

impl Default for ClsDataConfig {
    fn default() -> Self {
        Self {
            train: ClsPhantomSpec::default(),
            n_eval: 256,
            eval_seed: 2_000_003,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Probe these classifier weights instead of training first.
    pub checkpoint: Option<PathBuf>,
    pub trials: usize,
    pub bootstrap_resamples: usize,
    pub confidence: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            trials: 20,
            bootstrap_resamples: 10_000,
            confidence: 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplexityConfig {
    pub baseline: BottleneckConfig,
    pub ours: BottleneckConfig,
}

impl Default for ComplexityConfig {
    fn default() -> Self {
        Self {
            baseline: BottleneckConfig::stand_in(AttentionMode::SelfAttention),
            ours: BottleneckConfig::stand_in(AttentionMode::MetadataCross),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub n_seeds: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { n_seeds: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub seg_model: SegModelConfig,
    pub seg_train: SegTrainConfig,
    pub seg_data: SegDataConfig,
    pub sweep: SweepConfig,
    pub cls_model: FilmClassifierConfig,
    pub cls_train: ClsTrainConfig,
    pub cls_data: ClsDataConfig,
    pub probe: ProbeConfig,
    pub complexity: ComplexityConfig,
    pub gradcheck: GradcheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            seg_model: SegModelConfig::default(),
            seg_train: SegTrainConfig::default(),
            seg_data: SegDataConfig::default(),
            sweep: SweepConfig::default(),
            cls_model: FilmClassifierConfig::default(),
            cls_train: ClsTrainConfig::default(),
            cls_data: ClsDataConfig::default(),
            probe: ProbeConfig::default(),
            complexity: ComplexityConfig::default(),
            gradcheck: GradcheckConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            // Report the offending key; toml names it in the message for
            // unknown fields and in the span for type errors.
            let key = msg
                .strip_prefix("unknown field `")
                .and_then(|r| r.split('`').next())
                .map(str::to_string)
                .or_else(|| e.span().map(|s| text[s].trim().to_string()))
                .unwrap_or_else(|| "config".to_string());
            Error::config(key, msg)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.seg_model.validate()?;
        self.seg_data.train.validate()?;
        let r = self.seg_model.reduction();
        if !self.seg_data.train.extent.is_multiple_of(r) {
            return Err(Error::config(
                "seg_data.train.extent",
                format!("{} is not divisible by the model's {r}x reduction", self.seg_data.train.extent),
            ));
        }
        if self.seg_data.train.n_samples == 0 {
            return Err(Error::config("seg_data.train.n_samples", "must be positive"));
        }
        if self.seg_data.n_eval == 0 {
            return Err(Error::config("seg_data.n_eval", "must be positive"));
        }
        self.cls_model.validate()?;
        self.cls_data.train.validate()?;
        if self.cls_data.train.n_samples == 0 || self.cls_data.n_eval == 0 {
            return Err(Error::config("cls_data", "train and eval sets must be nonempty"));
        }
        if self.cls_train.batch_size == 0 {
            return Err(Error::config("cls_train.batch_size", "must be positive"));
        }
        if self.probe.trials == 0 {
            return Err(Error::config("probe.trials", "must be positive"));
        }
        if !(self.probe.confidence > 0.0 && self.probe.confidence < 1.0) {
            return Err(Error::config("probe.confidence", "must lie in (0, 1)"));
        }
        self.complexity.baseline.validate()?;
        self.complexity.ours.validate()?;
        if self.gradcheck.n_seeds == 0 {
            return Err(Error::config("gradcheck.n_seeds", "must be positive"));
        }
        Ok(())
    }
}
