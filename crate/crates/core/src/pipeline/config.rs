use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{NormMode, ScaleSharing};
use crate::corpus::{DualOptions, InputFormat, SplitRatios, TaskDirection, TaskMode};
use crate::decoder::DecodeConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Residual};
use crate::trainer::{AdamConfig, TrainConfig};

/// Environment variable that overrides `paths.workdir`.
pub const WORKDIR_ENV: &str = "DUALSC_WORKDIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub workdir: PathBuf,
    /// Defaults to `<workdir>/model/best.ckpt`.
    pub checkpoint: Option<PathBuf>,
    pub format: Option<InputFormat>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: PathBuf::from("data/shellcode.csv"),
            workdir: PathBuf::from("runs/default"),
            checkpoint: None,
            format: None,
        }
    }
}

/// Architecture knobs; the vocabulary size comes from the prepared corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOptions {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub hidden_size: usize,
    pub dropout: f64,
    pub norm_mode: NormMode,
    pub scale_sharing: ScaleSharing,
    pub max_source_len: usize,
    pub max_target_len: usize,
}

impl Default for ModelOptions {
    fn default() -> Self {
        let c = ModelConfig::new(0, NormMode::AdjustQkNorm);
        ModelOptions {
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_model: c.d_model,
            hidden_size: c.hidden_size,
            dropout: c.dropout,
            norm_mode: c.norm_mode,
            scale_sharing: c.scale_sharing,
            max_source_len: c.max_source_len,
            max_target_len: c.max_target_len,
        }
    }
}

impl ModelOptions {
    pub fn to_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            hidden_size: self.hidden_size,
            dropout: self.dropout,
            norm_mode: self.norm_mode,
            residual: Residual::for_mode(self.norm_mode),
            scale_sharing: self.scale_sharing,
            vocab_size,
            max_source_len: self.max_source_len,
            max_target_len: self.max_target_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: Option<f64>,
    pub adam: AdamConfig,
}

impl Default for TrainOptions {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainOptions {
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            clip_norm: t.clip_norm,
            adam: t.adam,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeOptions {
    pub beam_width: usize,
    pub alpha: f64,
    pub max_len_gen: usize,
    pub max_len_sum: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            beam_width: 3,
            alpha: 0.0,
            max_len_gen: DecodeConfig::for_code().max_len,
            max_len_sum: DecodeConfig::default().max_len,
        }
    }
}

impl DecodeOptions {
    pub fn for_direction(&self, direction: TaskDirection) -> DecodeConfig {
        let max_len = match direction {
            TaskDirection::Gen => self.max_len_gen,
            TaskDirection::Sum => self.max_len_sum,
        };
        DecodeConfig { beam_width: self.beam_width, alpha: self.alpha, max_len, ..DecodeConfig::default() }
    }
}

/// Everything a run depends on. One seed drives the split, the weight
/// initialisation, shuffling and dropout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskMode,
    pub prefix: bool,
    pub repair: bool,
    pub split: SplitRatios,
    pub paths: Paths,
    pub model: ModelOptions,
    pub train: TrainOptions,
    pub decode: DecodeOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            task: TaskMode::Dual,
            prefix: true,
            repair: true,
            split: SplitRatios::default(),
            paths: Paths::default(),
            model: ModelOptions::default(),
            train: TrainOptions::default(),
            decode: DecodeOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a TOML file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.corpus);
        fix(&mut self.paths.workdir);
        if let Some(c) = self.paths.checkpoint.as_mut() {
            fix(c);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.to_config(crate::corpus::RESERVED_TOKENS + 1).validate()?;
        self.train_config().validate()?;
        for d in [TaskDirection::Gen, TaskDirection::Sum] {
            self.decode.for_direction(d).validate()?;
        }
        Ok(())
    }

    pub fn dual_options(&self) -> DualOptions {
        DualOptions { mode: self.task, prefix: self.prefix }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.train.batch_size,
            max_epochs: self.train.max_epochs,
            patience: self.train.patience,
            seed: self.seed,
            clip_norm: self.train.clip_norm,
            adam: self.train.adam,
        }
    }

    pub fn input_format(&self) -> InputFormat {
        self.paths.format.clone().unwrap_or_else(|| InputFormat::for_path(&self.paths.corpus))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.paths.workdir.join("data")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.paths.workdir.join("model")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths.checkpoint.clone().unwrap_or_else(|| self.model_dir().join(crate::trainer::BEST_CHECKPOINT))
    }
}
