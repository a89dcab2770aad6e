//! Flat `key = value` experiment files.
//!
//! Keys mirror the fields of [`TrainConfig`] and [`AprConfig`]. Blank lines
//! and `#` comments are ignored; unknown or repeated keys are errors.

use std::path::Path;

use crate::apr::AprConfig;
use crate::bpr::TrainConfig;
use crate::error::{Error, Result};

pub const KEYS: &[&str] = &[
    "factors",
    "eta",
    "lambda_reg",
    "batch_size",
    "epochs",
    "optimizer",
    "seed",
    "eval_every",
    "epsilon",
    "lambda_adv",
    "patience",
    "pretrain_epochs",
];

/// Everything a training run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// APR settings; `apr.base` also drives plain BPR runs.
    pub apr: AprConfig,
    /// BPR epochs before the APR phase when no initial checkpoint is given.
    /// Defaults to `apr.base.epochs`.
    pub pretrain_epochs: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            apr: AprConfig::default(),
            pretrain_epochs: None,
        }
    }
}

impl RunConfig {
    pub fn train(&self) -> &TrainConfig {
        &self.apr.base
    }

    /// Config for the BPR pretraining phase.
    pub fn pretrain(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.pretrain_epochs.unwrap_or(self.apr.base.epochs),
            ..self.apr.base.clone()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut config = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: n + 1,
                message: format!("expected key = value, got '{line}'"),
            })?;
            let key = key.trim();
            if seen.iter().any(|k| k == key) {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("duplicate key '{key}'"),
                });
            }
            config.set(key, value.trim()).map_err(|e| Error::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
            seen.push(key.to_string());
        }
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override must be key=value, got '{assignment}'")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let base = &mut self.apr.base;
        match key {
            "factors" => base.factors = num(key, value)?,
            "eta" => base.eta = num(key, value)?,
            "lambda_reg" => base.lambda_reg = num(key, value)?,
            "batch_size" => base.batch_size = num(key, value)?,
            "epochs" => base.epochs = num(key, value)?,
            "optimizer" => base.optimizer = value.parse()?,
            "seed" => base.seed = num(key, value)?,
            "eval_every" => base.eval_every = num(key, value)?,
            "epsilon" => self.apr.epsilon = num(key, value)?,
            "lambda_adv" => self.apr.lambda_adv = num(key, value)?,
            "patience" => {
                self.apr.patience = match value {
                    "none" | "off" => None,
                    v => Some(num(key, v)?),
                }
            }
            "pretrain_epochs" => self.pretrain_epochs = Some(num(key, value)?),
            other => {
                return Err(Error::Config(format!(
                    "unknown config key '{other}' (expected one of: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.apr.validate()
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::Optimizer;

    #[test]
    fn parses_every_key() {
        let text = "# experiment\nfactors = 8\neta=0.1\nlambda_reg = 0.01\nbatch_size = 32\n\
                    epochs = 3\noptimizer = sgd\nseed = 9\neval_every = 2 # trailing\n\
                    epsilon = 0.25\nlambda_adv = 2\npatience = none\npretrain_epochs = 5\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.apr.base.factors, 8);
        assert_eq!(c.apr.base.eta, 0.1);
        assert_eq!(c.apr.base.lambda_reg, 0.01);
        assert_eq!(c.apr.base.batch_size, 32);
        assert_eq!(c.apr.base.epochs, 3);
        assert_eq!(c.apr.base.optimizer, Optimizer::Sgd);
        assert_eq!(c.apr.base.seed, 9);
        assert_eq!(c.apr.base.eval_every, 2);
        assert_eq!(c.apr.epsilon, 0.25);
        assert_eq!(c.apr.lambda_adv, 2.0);
        assert_eq!(c.apr.patience, None);
        assert_eq!(c.pretrain().epochs, 5);
    }

    #[test]
    fn unknown_and_malformed_keys_fail() {
        let err = RunConfig::parse("factors = 8\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert!(RunConfig::parse("factors 8").is_err());
        assert!(RunConfig::parse("factors = eight").is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
    }

    #[test]
    fn overrides_win() {
        let mut c = RunConfig::parse("epochs = 10").unwrap();
        c.apply_override("epochs=20").unwrap();
        assert_eq!(c.apr.base.epochs, 20);
        assert_eq!(c.pretrain().epochs, 20);
        assert!(c.apply_override("epochs").is_err());
        assert!(c.apply_override("bogus=1").is_err());
    }
}
