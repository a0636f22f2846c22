//! Run configuration assembled from defaults, an optional `key=value`
//! config file, and command-line overrides (applied by the caller, in that
//! order).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::{SplitCriterion, SplitMethod};
use crate::error::{CelError, Result};
use crate::model::Hyperparams;

/// Everything a training run needs besides the dataset itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub hp: Hyperparams,
    /// Embedding dimension R.
    pub dim: usize,
    /// Embedding steps (offline) ignored by the online trainer, which takes
    /// one step per batch.
    pub steps: usize,
    pub log_every: usize,
    /// Consecutive validation checks without improvement before stopping
    /// early; 0 disables the check.
    pub patience: usize,
    /// Worker threads; 0 keeps the runtime default.
    pub threads: usize,
    pub criterion: SplitCriterion,
    pub split_method: SplitMethod,
}

impl RunConfig {
    /// Offline defaults.
    pub fn default_cel() -> Self {
        RunConfig {
            hp: Hyperparams::default(),
            dim: 64,
            steps: 2000,
            log_every: 100,
            patience: 0,
            threads: 0,
            criterion: SplitCriterion::InteractionCount,
            split_method: SplitMethod::Gpca,
        }
    }

    /// Online defaults.
    pub fn default_lite() -> Self {
        RunConfig { hp: Hyperparams::lite(), ..RunConfig::default_cel() }
    }

    /// Applies one `key=value` setting.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| {
                CelError::Config(format!("invalid value '{value}' for key '{key}'"))
            })
        }
        match key {
            "eta" => self.hp.eta = parse(key, value)?,
            "lambda_reg" => self.hp.lambda_reg = parse(key, value)?,
            "lambda_p" => self.hp.lambda_p = parse(key, value)?,
            "t1" => self.hp.t1 = parse(key, value)?,
            "t2" => self.hp.t2 = parse(key, value)?,
            "delta" => self.hp.delta = parse(key, value)?,
            "d" => self.hp.d = parse(key, value)?,
            "n" => self.hp.n = parse(key, value)?,
            "m" => self.hp.m = parse(key, value)?,
            "b" => self.hp.b = parse(key, value)?,
            "target_ratio" => self.hp.target_ratio = parse(key, value)?,
            "m0" => self.hp.m0 = parse(key, value)?,
            "seed" => self.hp.seed = parse(key, value)?,
            "averaging" => self.hp.averaging = parse(key, value)?,
            "nonneg" => self.hp.nonneg = value.parse()?,
            "dim" => self.dim = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "criterion" => self.criterion = value.parse()?,
            "split_method" => self.split_method = value.parse()?,
            other => return Err(CelError::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Reads a config file: one `key=value` per line, `#` lines and blank
    /// lines ignored.
    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CelError::Io { path: path.display().to_string(), source: e })?;
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| CelError::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: "expected key=value".into(),
            })?;
            self.apply_kv(key.trim(), value.trim()).map_err(|e| CelError::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }
}
