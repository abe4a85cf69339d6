//! Config files and the resolved per-run record.
//!
//! Resolution order: built-in defaults, then the config file (`--config` or
//! `HAPFI_CONFIG`), then command-line flags. Every command writes the fully
//! resolved [`RunConfig`] as `run.toml` next to its outputs.

use std::fs;
use std::path::{Path, PathBuf};

use hapfi_core::dataset::{CorpusConfig, ModalityMask};
use hapfi_core::model::PlannerConfig;
use hapfi_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{HapfiError, Result};

pub const CONFIG_ENV: &str = "HAPFI_CONFIG";
pub const RUN_CONFIG_FILE: &str = "run.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub scenes: Option<usize>,
    pub unseen_scenes: Option<usize>,
    pub train_episodes: Option<usize>,
    pub valid_seen_episodes: Option<usize>,
    pub valid_unseen_episodes: Option<usize>,
    pub grid: Option<usize>,
    pub cell_size: Option<usize>,
    pub min_objects: Option<usize>,
    pub max_objects: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub patch: Option<usize>,
    pub width: Option<usize>,
    pub heads: Option<usize>,
    pub visual_depth: Option<usize>,
    pub text_depth: Option<usize>,
    pub max_len: Option<usize>,
    pub ff_hidden: Option<usize>,
    pub head_hidden: Option<usize>,
    pub fusion_stages: Option<usize>,
    pub history_window: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    /// A named modality row such as `full` or `no_history`.
    pub mask: Option<String>,
}

impl ConfigFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HapfiError::io(path, e))?;
        toml::from_str(&text).map_err(|e| HapfiError::Parse {
            path: path.to_path_buf(),
            line: e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1),
            message: e.message().to_string(),
        })
    }

    /// The explicit path, else `HAPFI_CONFIG`, else built-in defaults only.
    pub fn locate(explicit: Option<&Path>) -> Result<Self> {
        match explicit {
            Some(p) => Self::read(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::read(Path::new(&p)),
                _ => Ok(Self::default()),
            },
        }
    }

    pub fn corpus(&self) -> CorpusConfig {
        let d = CorpusConfig::default();
        let c = &self.corpus;
        CorpusConfig {
            scenes: c.scenes.unwrap_or(d.scenes),
            unseen_scenes: c.unseen_scenes.unwrap_or(d.unseen_scenes),
            train_episodes: c.train_episodes.unwrap_or(d.train_episodes),
            valid_seen_episodes: c.valid_seen_episodes.unwrap_or(d.valid_seen_episodes),
            valid_unseen_episodes: c.valid_unseen_episodes.unwrap_or(d.valid_unseen_episodes),
            grid: c.grid.unwrap_or(d.grid),
            cell_size: c.cell_size.unwrap_or(d.cell_size),
            min_objects: c.min_objects.unwrap_or(d.min_objects),
            max_objects: c.max_objects.unwrap_or(d.max_objects),
        }
    }

    /// Model dimensions; the image size always comes from the corpus.
    pub fn planner(&self, image_size: usize) -> PlannerConfig {
        let d = PlannerConfig::default();
        let m = &self.model;
        PlannerConfig {
            image_size,
            patch: m.patch.unwrap_or(d.patch),
            width: m.width.unwrap_or(d.width),
            heads: m.heads.unwrap_or(d.heads),
            visual_depth: m.visual_depth.unwrap_or(d.visual_depth),
            text_depth: m.text_depth.unwrap_or(d.text_depth),
            max_len: m.max_len.unwrap_or(d.max_len),
            ff_hidden: m.ff_hidden.unwrap_or(d.ff_hidden),
            head_hidden: m.head_hidden.unwrap_or(d.head_hidden),
            fusion_stages: m.fusion_stages.unwrap_or(d.fusion_stages),
            history_window: m.history_window.unwrap_or(d.history_window),
        }
    }

    pub fn train(&self, image_size: usize) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let t = &self.train;
        Ok(TrainConfig {
            planner: self.planner(image_size),
            epochs: t.epochs.unwrap_or(d.epochs),
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            learning_rate: t.learning_rate.unwrap_or(d.learning_rate),
            seed: self.seed.unwrap_or(d.seed),
            mask: match &t.mask {
                Some(name) => ModalityMask::named(name)?,
                None => d.mask,
            },
        })
    }
}

/// Everything a command ran with, after defaults, file and flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<CorpusConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    /// Command-specific flags, already resolved.
    #[serde(default, skip_serializing_if = "toml::Table::is_empty")]
    pub extra: toml::Table,
}

impl RunConfig {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.into(),
            seed,
            inputs: Vec::new(),
            corpus: None,
            train: None,
            extra: toml::Table::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<toml::Value>) -> Self {
        self.extra.insert(key.into(), value.into());
        self
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| HapfiError::io(dir, e))?;
        let text = toml::to_string(self).map_err(|e| HapfiError::Data(e.to_string()))?;
        let path = dir.join(RUN_CONFIG_FILE);
        fs::write(&path, text).map_err(|e| HapfiError::io(path, e))
    }
}
