//! Run configuration: a flat `key = value` text format with CLI-style
//! overrides. Unknown keys are hard errors so a misspelled hyperparameter
//! can never silently fall back to a default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ConfounderMode, SyntheticSpec};
use crate::error::{DicsError, Result};
use crate::model::Activation;
use crate::seeding::content_hash;

/// How domain prototypes are initialized before the first step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrototypeInit {
    /// Mean of the first batch's momentum features, per domain.
    BatchMean,
    Zero,
}

/// Dataset source for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataConfig {
    Synthetic(SyntheticSpec),
    Csv { path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Coefficient of the cross-domain invariance term.
    pub alpha: f64,
    /// Coefficient of the class-specificity term.
    pub beta: f64,
    pub temperature: f64,
    /// EMA fusion coefficient for the momentum encoder.
    pub lambda: f64,
    /// Queue capacity as a multiple of the batch size.
    pub queue_multiple: usize,
    /// Samples drawn from each source domain per batch.
    pub batch_per_domain: usize,
    pub epochs: usize,
    /// SGD learning rate for encoder and classifier.
    pub learning_rate: f64,
    /// Joint encoder+classifier gradients are rescaled to this Euclidean
    /// norm when they exceed it. The clamped-log losses have unbounded
    /// gradients next to their clamp floor; one near-zero similarity pair
    /// would otherwise blow up the parameters.
    pub grad_clip_norm: f64,
    pub prototype_lr: f64,
    /// Inner gradient steps on the prototypes per training step.
    pub prototype_steps: usize,
    pub prototype_init: PrototypeInit,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
    pub seed: u64,
    /// Held-out domain: excluded from training and the queue.
    pub target_domain: usize,
    /// Dataset seed override; defaults to `seed` when absent.
    pub data_seed: Option<u64>,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            temperature: 0.07,
            lambda: 0.999,
            queue_multiple: 4,
            batch_per_domain: 16,
            epochs: 40,
            learning_rate: 0.05,
            grad_clip_norm: 10.0,
            prototype_lr: 0.1,
            prototype_steps: 1,
            prototype_init: PrototypeInit::BatchMean,
            hidden_dims: vec![32],
            feature_dim: 16,
            activation: Activation::Tanh,
            seed: 0,
            target_domain: 3,
            data_seed: None,
            data: DataConfig::Synthetic(SyntheticSpec::default()),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| {
        DicsError::InvalidConfig(format!("cannot parse `{value}` for key `{key}`"))
    })
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Parse `key = value` lines over the defaults. Blank lines and lines
    /// starting with `#` are skipped; anything else must contain `=`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                DicsError::InvalidConfig(format!("line {}: expected `key = value`", idx + 1))
            })?;
            config.apply_override(key.trim(), value.trim())?;
        }
        Ok(config)
    }

    /// Apply `key=value` pairs (the CLI's `--set` flags).
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for pair in pairs {
            let (key, value) = pair.split_once('=').ok_or_else(|| {
                DicsError::InvalidConfig(format!("override `{pair}` is not `key=value`"))
            })?;
            self.apply_override(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Dig out the synthetic spec, creating one from defaults if the source
    /// was previously a CSV. Keeps `data.*` overrides order-insensitive.
    fn synthetic_mut(&mut self) -> &mut SyntheticSpec {
        if !matches!(self.data, DataConfig::Synthetic(_)) {
            self.data = DataConfig::Synthetic(SyntheticSpec::default());
        }
        match &mut self.data {
            DataConfig::Synthetic(spec) => spec,
            DataConfig::Csv { .. } => unreachable!(),
        }
    }

    pub fn apply_override(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "alpha" => self.alpha = parse_num(key, value)?,
            "beta" => self.beta = parse_num(key, value)?,
            "temperature" => self.temperature = parse_num(key, value)?,
            "lambda" => self.lambda = parse_num(key, value)?,
            "queue_multiple" => self.queue_multiple = parse_num(key, value)?,
            "batch_per_domain" => self.batch_per_domain = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "grad_clip_norm" => self.grad_clip_norm = parse_num(key, value)?,
            "prototype_lr" => self.prototype_lr = parse_num(key, value)?,
            "prototype_steps" => self.prototype_steps = parse_num(key, value)?,
            "prototype_init" => {
                self.prototype_init = match value {
                    "batch-mean" => PrototypeInit::BatchMean,
                    "zero" => PrototypeInit::Zero,
                    other => {
                        return Err(DicsError::InvalidConfig(format!(
                            "prototype_init must be `batch-mean` or `zero`, got `{other}`"
                        )))
                    }
                }
            }
            "hidden_dims" => {
                self.hidden_dims = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|v| parse_num("hidden_dims", v))
                        .collect::<Result<_>>()?
                };
            }
            "feature_dim" => self.feature_dim = parse_num(key, value)?,
            "activation" => {
                self.activation = match value {
                    "tanh" => Activation::Tanh,
                    "relu" => Activation::Relu,
                    "identity" => Activation::Identity,
                    other => {
                        return Err(DicsError::InvalidConfig(format!(
                            "activation must be `tanh`, `relu`, or `identity`, got `{other}`"
                        )))
                    }
                }
            }
            "seed" => self.seed = parse_num(key, value)?,
            "target_domain" => self.target_domain = parse_num(key, value)?,
            "data.seed" => self.data_seed = Some(parse_num(key, value)?),
            "data.source" => match value {
                "synthetic" => {
                    self.synthetic_mut();
                }
                "csv" => {
                    if !matches!(self.data, DataConfig::Csv { .. }) {
                        self.data = DataConfig::Csv {
                            path: String::new(),
                        };
                    }
                }
                other => {
                    return Err(DicsError::InvalidConfig(format!(
                        "data.source must be `synthetic` or `csv`, got `{other}`"
                    )))
                }
            },
            "data.csv_path" => {
                self.data = DataConfig::Csv {
                    path: value.to_string(),
                };
            }
            "data.num_domains" => self.synthetic_mut().num_domains = parse_num(key, value)?,
            "data.num_classes" => self.synthetic_mut().num_classes = parse_num(key, value)?,
            "data.samples_per_domain_class" => {
                self.synthetic_mut().samples_per_domain_class = parse_num(key, value)?
            }
            "data.causal_dims" => self.synthetic_mut().causal_dims = parse_num(key, value)?,
            "data.style_dims" => self.synthetic_mut().style_dims = parse_num(key, value)?,
            "data.confounder_dims" => {
                self.synthetic_mut().confounder_dims = parse_num(key, value)?
            }
            "data.class_separation" => {
                self.synthetic_mut().class_separation = parse_num(key, value)?
            }
            "data.style_offset_scale" => {
                self.synthetic_mut().style_offset_scale = parse_num(key, value)?
            }
            "data.confounder_correlation" => {
                self.synthetic_mut().confounder_correlation = parse_num(key, value)?
            }
            "data.confounder_mode" => {
                self.synthetic_mut().confounder_mode = match value {
                    "flip" => ConfounderMode::Flip,
                    "resample" => ConfounderMode::Resample,
                    other => {
                        return Err(DicsError::InvalidConfig(format!(
                            "data.confounder_mode must be `flip` or `resample`, got `{other}`"
                        )))
                    }
                }
            }
            "data.noise_std" => self.synthetic_mut().noise_std = parse_num(key, value)?,
            other => {
                return Err(DicsError::InvalidConfig(format!(
                    "unknown config key `{other}`"
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || !self.alpha.is_finite() || !self.beta.is_finite()
        {
            return Err(DicsError::InvalidConfig(
                "alpha and beta must be finite and non-negative".into(),
            ));
        }
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(DicsError::InvalidConfig(
                "temperature must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(DicsError::InvalidConfig("lambda must lie in [0, 1]".into()));
        }
        if self.queue_multiple == 0 {
            return Err(DicsError::InvalidConfig(
                "queue_multiple must be at least 1".into(),
            ));
        }
        if self.batch_per_domain == 0 {
            return Err(DicsError::InvalidConfig(
                "batch_per_domain must be at least 1".into(),
            ));
        }
        if self.feature_dim == 0 {
            return Err(DicsError::InvalidConfig(
                "feature_dim must be at least 1".into(),
            ));
        }
        if self.learning_rate < 0.0 || self.prototype_lr < 0.0 {
            return Err(DicsError::InvalidConfig(
                "learning rates must be non-negative".into(),
            ));
        }
        if !self.grad_clip_norm.is_finite() || self.grad_clip_norm <= 0.0 {
            return Err(DicsError::InvalidConfig(
                "grad_clip_norm must be positive".into(),
            ));
        }
        match &self.data {
            DataConfig::Synthetic(spec) => {
                let mut resolved = spec.clone();
                resolved.target_domain = self.target_domain;
                resolved.validate()?;
            }
            DataConfig::Csv { path } => {
                if path.is_empty() {
                    return Err(DicsError::InvalidConfig(
                        "data.csv_path must be set when data.source = csv".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Stable hex hash of the full config, for result file names.
    pub fn config_hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        content_hash(text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn parse_applies_values_and_comments() {
        let cfg = TrainConfig::parse(
            "# a comment\n\
             alpha = 0.5\n\
             beta = 0\n\
             hidden_dims = 16,8\n\
             activation = relu\n\
             data.num_classes = 4\n\
             data.confounder_mode = resample\n",
        )
        .unwrap();
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.beta, 0.0);
        assert_eq!(cfg.hidden_dims, vec![16, 8]);
        assert_eq!(cfg.activation, Activation::Relu);
        match &cfg.data {
            DataConfig::Synthetic(spec) => {
                assert_eq!(spec.num_classes, 4);
                assert_eq!(spec.confounder_mode, ConfounderMode::Resample);
            }
            _ => panic!("expected synthetic data"),
        }
    }

    #[test]
    fn unknown_key_is_a_hard_error() {
        let err = TrainConfig::parse("alhpa = 0.5\n").unwrap_err().to_string();
        assert!(err.contains("unknown config key"), "{err}");
        let mut cfg = TrainConfig::default();
        assert!(cfg.apply_override("queue_mult", "4").is_err());
    }

    #[test]
    fn overrides_apply_in_order() {
        let mut cfg = TrainConfig::default();
        cfg.apply_overrides(&["alpha=0.25".into(), "alpha=0.75".into()])
            .unwrap();
        assert_eq!(cfg.alpha, 0.75);
        assert!(cfg.apply_overrides(&["nonsense".into()]).is_err());
    }

    #[test]
    fn csv_source_round_trip() {
        let cfg = TrainConfig::parse("data.source = csv\ndata.csv_path = /tmp/x.csv\n").unwrap();
        assert_eq!(
            cfg.data,
            DataConfig::Csv {
                path: "/tmp/x.csv".into()
            }
        );
        // csv without a path fails validation
        assert!(TrainConfig::parse("data.source = csv\n")
            .unwrap()
            .validate()
            .is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let mut b = TrainConfig::default();
        assert_eq!(a.config_hash(), b.config_hash());
        b.alpha = 0.123;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn invalid_values_are_rejected() {
        for bad in [
            "temperature = 0",
            "lambda = 1.5",
            "queue_multiple = 0",
            "batch_per_domain = 0",
            "feature_dim = 0",
            "alpha = -1",
        ] {
            let cfg = TrainConfig::parse(&format!("{bad}\n")).unwrap();
            assert!(cfg.validate().is_err(), "`{bad}` should fail validation");
        }
    }
}
