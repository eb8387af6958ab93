//! Flat `key = value` run configuration shared by every subcommand.

use std::fs;
use std::path::Path;

use crate::datagen::{AudioMode, DatasetSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tokenize::ModalityMask;

/// Optimiser and schedule settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplier applied on a plateau; in `(0, 1)`.
    pub lr_decay: f64,
    /// Epochs without a validation gain before decaying.
    pub patience: usize,
    /// Minimum validation-accuracy gain, in percentage points.
    pub min_gain: f64,
    /// Modalities seen during training (and validation).
    pub mask: ModalityMask,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 30,
            batch_size: 8,
            lr: 0.05,
            lr_decay: 0.1,
            patience: 3,
            min_gain: 0.1,
            mask: ModalityMask::all(),
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return Err(Error::config(format!(
                "lr_decay must be in (0, 1), got {}",
                self.lr_decay
            )));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be positive"));
        }
        self.mask.validate()
    }
}

/// Everything a CLI invocation can configure.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub data: DatasetSpec,
    pub val_per_class: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainSettings::default(),
            data: DatasetSpec::default(),
            val_per_class: 16,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse \"{v}\"")))
}

impl RunConfig {
    /// Applies one setting. Clip geometry and class count are shared by
    /// the model and the dataset so the two cannot drift apart.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "frames" | "height" | "width" | "classes" => {
                self.model.set(key, v)?;
                let n = num(key, v)?;
                match key {
                    "frames" => self.data.frames = n,
                    "height" => self.data.height = n,
                    "width" => self.data.width = n,
                    _ => self.data.num_classes = n,
                }
            }
            "epochs" => self.train.epochs = num(key, v)?,
            "batch_size" => self.train.batch_size = num(key, v)?,
            "lr" => self.train.lr = num(key, v)?,
            "lr_decay" => self.train.lr_decay = num(key, v)?,
            "patience" => self.train.patience = num(key, v)?,
            "min_gain" => self.train.min_gain = num(key, v)?,
            "train_drop" => self.train.mask = ModalityMask::from_drop_list(v)?,
            "clips_per_class" => self.data.clips_per_class = num(key, v)?,
            "val_per_class" => self.val_per_class = num(key, v)?,
            "noise" => self.data.noise = num(key, v)?,
            "data_seed" => self.data.seed = num(key, v)?,
            "audio" => {
                self.data.audio = match v {
                    "features" => AudioMode::Features,
                    "waveform" => AudioMode::Waveform,
                    _ => {
                        return Err(Error::config(format!(
                            "audio must be features|waveform, got \"{v}\""
                        )))
                    }
                }
            }
            _ => {
                if !self.model.set(key, v)? {
                    return Err(Error::config(format!("unknown config key \"{key}\"")));
                }
            }
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override \"{kv}\" is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// Applies every line of a config text. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        self.data.check_patch(self.model.patch)
    }

    /// Validation split: same generator, a disjoint RNG stream range.
    pub fn val_spec(&self) -> DatasetSpec {
        DatasetSpec {
            clips_per_class: self.val_per_class,
            seed: self.data.seed ^ 0x5EED_0F_7A11_DA7A,
            ..self.data.clone()
        }
    }
}
