//! Experiment configuration (TOML). Unknown keys are rejected everywhere.

use std::fs;
use std::path::{Path, PathBuf};

use hfw_core::backbones::presets::preset;
use hfw_core::backbones::{BackboneConfig, EmbedMode, ModelConfig};
use hfw_core::fewshot::EpisodeConfig;
use hfw_core::hfw::{GateMode, MemoryScope};
use hfw_core::optim::{AdamWConfig, ScheduleConfig};
use serde::{Deserialize, Serialize};

use crate::data::PreprocessConfig;
use crate::error::{AppError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Defaults to the preset name.
    #[serde(default)]
    pub run_id: Option<String>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub precision: Precision,
    pub model: ModelSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub episodes: EpisodeSection,
    #[serde(default)]
    pub optim: AdamWConfig,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub runtime: RuntimeSection,
}

fn default_seed() -> u64 {
    42
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

/// Element type for training and evaluation; verification always uses f64.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_mode: Option<EmbedMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hfw: Option<HfwOverrides>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HfwOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_scope: Option<MemoryScope>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate: Option<GateMode>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Omniglot,
    Synth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    /// Omniglot root; falls back to `HFW_DATA_ROOT`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Train/val/test class fractions.
    pub split: [f64; 3],
    pub preprocess: PreprocessConfig,
    pub synth: SynthSection,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Omniglot,
            root: None,
            split: [0.8, 0.1, 0.1],
            preprocess: PreprocessConfig::default(),
            synth: SynthSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub classes: usize,
    pub per_class: usize,
    pub extent: usize,
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            classes: 30,
            per_class: 20,
            extent: 28,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeSection {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        EpisodeSection {
            n_way: 5,
            k_shot: 1,
            n_query: 15,
            train: 600,
            val: 200,
            test: 400,
        }
    }
}

impl EpisodeSection {
    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            n_way: self.n_way,
            k_shot: self.k_shot,
            n_query: self.n_query,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            warmup_epochs: 10,
            total_epochs: 60,
            patience: 15,
        }
    }
}

impl ScheduleSection {
    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.total_epochs,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RuntimeSection {
    /// Evaluation worker threads; 0 lets the pool decide.
    pub threads: usize,
    /// Single-threaded evaluation.
    pub deterministic: bool,
}

impl ExperimentConfig {
    /// Parses and validates TOML text. Errors carry the offending field path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().trim().to_string();
            if path == "." || path.is_empty() {
                AppError::Config(msg)
            } else {
                AppError::Config(format!("at `{path}`: {msg}"))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            AppError::Config(m) => AppError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| self.model.preset.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(AppError::Config(format!(
                "at `schema_version`: expected {SCHEMA_VERSION}, got {}",
                self.schema_version
            )));
        }
        let field = |name: &str, e: hfw_core::Error| AppError::Config(format!("at `{name}`: {e}"));
        self.model_config().map_err(|e| match e {
            AppError::Config(m) => AppError::Config(format!("at `model`: {m}")),
            AppError::Core(e) => field("model", e),
            other => other,
        })?;
        self.data.preprocess.validate()?;
        let s = self.data.split;
        if s.iter().any(|&r| !(r >= 0.0)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(AppError::Config(format!("at `data.split`: fractions {s:?} must be >= 0 and sum to 1")));
        }
        self.episodes
            .episode_config()
            .validate()
            .map_err(|e| field("episodes", e))?;
        if self.episodes.train == 0 || self.episodes.val == 0 || self.episodes.test == 0 {
            return Err(AppError::Config("at `episodes`: episode counts must be >= 1".into()));
        }
        self.optim.validate().map_err(|e| field("optim", e))?;
        self.schedule.schedule().validate().map_err(|e| field("schedule", e))?;
        if self.schedule.patience == 0 {
            return Err(AppError::Config("at `schedule.patience`: must be >= 1".into()));
        }
        if self.data.source == DataSource::Synth {
            let sy = &self.data.synth;
            if sy.classes < 2 || sy.per_class == 0 || sy.extent < 4 {
                return Err(AppError::Config(
                    "at `data.synth`: need classes >= 2, per_class >= 1, extent >= 4".into(),
                ));
            }
        }
        Ok(())
    }

    /// The preset with overrides applied, sized for the preprocessing target.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = preset(&self.model.preset, self.data.preprocess.target)?;
        if let Some(o) = &self.model.hfw {
            let Some(h) = m.hfw_mut() else {
                return Err(AppError::Config(format!(
                    "hfw settings given but preset '{}' has no HFW modules",
                    self.model.preset
                )));
            };
            if let Some(v) = o.eta_max {
                h.eta_max = v;
            }
            if let Some(v) = o.delta {
                h.delta = v;
            }
            if let Some(v) = o.eps {
                h.eps = v;
            }
            if let Some(v) = o.memory_scope {
                h.memory_scope = v;
            }
            if let Some(v) = o.gate {
                h.gate = v;
            }
        }
        if let Some(mode) = self.model.embed_mode {
            match &mut m.backbone {
                BackboneConfig::Flat(f) => f.embed_mode = mode,
                BackboneConfig::Hier(_) => {
                    return Err(AppError::Config("embed_mode applies to flat backbones only".into()))
                }
            }
        }
        m.validate()?;
        Ok(m)
    }

    /// Data root from the config, else `HFW_DATA_ROOT`, else `./data`.
    pub fn data_root(&self) -> PathBuf {
        self.data
            .root
            .clone()
            .or_else(|| std::env::var_os("HFW_DATA_ROOT").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"))
    }
}
