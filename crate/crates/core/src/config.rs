//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment. Keys are grouped by prefix
//! (`data.`, `model.`, `train.`, `finetune.`, `loss.`, `shortcut.`) plus the
//! global `seed`, which feeds every random stream of a run.

use std::fmt::Display;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::LossConfig;
use crate::model::{ModelConfig, Variant};
use crate::shortcut::ShortcutConfig;
use crate::synth::GeneratorConfig;
use crate::trainer::{LossKind, TrainConfig};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key {key:?}")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: {key} = {value:?}: {detail}")]
    Value {
        line: usize,
        key: String,
        value: String,
        detail: String,
    },
}

/// Architecture settings; channel count and grid come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub variant: Variant,
    pub token_dim: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let d = ModelConfig::desk(1, 1, 1);
        Self {
            variant: d.variant,
            token_dim: d.token_dim,
            n_encoder_layers: d.n_encoder_layers,
            n_decoder_layers: d.n_decoder_layers,
            n_heads: d.n_heads,
            ffn_hidden: d.ffn_hidden,
        }
    }
}

impl ModelSettings {
    pub fn for_grid(&self, in_channels: usize, height: usize, width: usize) -> ModelConfig {
        ModelConfig {
            in_channels,
            token_dim: self.token_dim,
            n_encoder_layers: self.n_encoder_layers,
            n_decoder_layers: self.n_decoder_layers,
            n_heads: self.n_heads,
            ffn_hidden: self.ffn_hidden,
            height,
            width,
            variant: self.variant,
        }
    }
}

/// Fine-tuning run on top of a loaded checkpoint; the remaining optimizer
/// settings come from `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSettings {
    pub epochs: usize,
    pub lr: f64,
    pub loss_kind: LossKind,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 2e-4,
            loss_kind: LossKind::Px,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub data: GeneratorConfig,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub finetune: FinetuneSettings,
    pub loss: LossConfig,
    pub shortcut: ShortcutConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: GeneratorConfig::default(),
            model: ModelSettings::default(),
            train: TrainConfig::desk(),
            finetune: FinetuneSettings::default(),
            loss: LossConfig::default(),
            shortcut: ShortcutConfig::default(),
        }
    }
}

fn parse_value<T: FromStr>(value: &str) -> Result<T, String>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| e.to_string())
}

impl RunConfig {
    /// Every key, in the order [`RunConfig::to_text`] writes them.
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "data.channels",
        "data.height",
        "data.width",
        "data.n_train",
        "data.n_test_normal",
        "data.n_test_anomalous",
        "data.n_aux_anomalous",
        "data.basis_rank",
        "data.noise_std",
        "data.patch_min",
        "data.patch_max",
        "data.anomaly_shift",
        "model.variant",
        "model.token_dim",
        "model.n_encoder_layers",
        "model.n_decoder_layers",
        "model.n_heads",
        "model.ffn_hidden",
        "train.epochs",
        "train.lr",
        "train.lr_drop_epoch",
        "train.lr_drop_factor",
        "train.weight_decay",
        "train.batch_size",
        "train.beta1",
        "train.beta2",
        "train.adam_epsilon",
        "finetune.epochs",
        "finetune.lr",
        "finetune.loss",
        "loss.alpha",
        "loss.k",
        "loss.pool_window",
        "loss.epsilon",
        "shortcut.tokens",
        "shortcut.channels",
        "shortcut.n_normal_train",
        "shortcut.n_normal_test",
        "shortcut.n_anomalous_test",
        "shortcut.steps",
        "shortcut.lr",
        "shortcut.prototype_scale",
        "shortcut.shared_scale",
        "shortcut.noise_std",
        "shortcut.anomaly_shift",
        "shortcut.anomalous_tokens",
    ];

    /// Sets one key. Errors carry no line number; [`RunConfig::parse`] adds it.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value;
        match key {
            "seed" => self.seed = parse_value(v)?,
            "data.channels" => self.data.channels = parse_value(v)?,
            "data.height" => self.data.height = parse_value(v)?,
            "data.width" => self.data.width = parse_value(v)?,
            "data.n_train" => self.data.n_train = parse_value(v)?,
            "data.n_test_normal" => self.data.n_test_normal = parse_value(v)?,
            "data.n_test_anomalous" => self.data.n_test_anomalous = parse_value(v)?,
            "data.n_aux_anomalous" => self.data.n_aux_anomalous = parse_value(v)?,
            "data.basis_rank" => self.data.basis_rank = parse_value(v)?,
            "data.noise_std" => self.data.noise_std = parse_value(v)?,
            "data.patch_min" => self.data.anomaly_patch.0 = parse_value(v)?,
            "data.patch_max" => self.data.anomaly_patch.1 = parse_value(v)?,
            "data.anomaly_shift" => self.data.anomaly_shift = parse_value(v)?,
            "model.variant" => self.model.variant = parse_value(v)?,
            "model.token_dim" => self.model.token_dim = parse_value(v)?,
            "model.n_encoder_layers" => self.model.n_encoder_layers = parse_value(v)?,
            "model.n_decoder_layers" => self.model.n_decoder_layers = parse_value(v)?,
            "model.n_heads" => self.model.n_heads = parse_value(v)?,
            "model.ffn_hidden" => self.model.ffn_hidden = parse_value(v)?,
            "train.epochs" => self.train.epochs = parse_value(v)?,
            "train.lr" => self.train.lr_initial = parse_value(v)?,
            "train.lr_drop_epoch" => self.train.lr_drop_epoch = parse_value(v)?,
            "train.lr_drop_factor" => self.train.lr_drop_factor = parse_value(v)?,
            "train.weight_decay" => self.train.weight_decay = parse_value(v)?,
            "train.batch_size" => self.train.batch_size = parse_value(v)?,
            "train.beta1" => self.train.beta1 = parse_value(v)?,
            "train.beta2" => self.train.beta2 = parse_value(v)?,
            "train.adam_epsilon" => self.train.adam_epsilon = parse_value(v)?,
            "finetune.epochs" => self.finetune.epochs = parse_value(v)?,
            "finetune.lr" => self.finetune.lr = parse_value(v)?,
            "finetune.loss" => self.finetune.loss_kind = parse_value(v)?,
            "loss.alpha" => self.loss.alpha = parse_value(v)?,
            "loss.k" => self.loss.k = parse_value(v)?,
            "loss.pool_window" => self.loss.pool_window = parse_value(v)?,
            "loss.epsilon" => self.loss.epsilon = parse_value(v)?,
            "shortcut.tokens" => self.shortcut.tokens = parse_value(v)?,
            "shortcut.channels" => self.shortcut.channels = parse_value(v)?,
            "shortcut.n_normal_train" => self.shortcut.n_normal_train = parse_value(v)?,
            "shortcut.n_normal_test" => self.shortcut.n_normal_test = parse_value(v)?,
            "shortcut.n_anomalous_test" => self.shortcut.n_anomalous_test = parse_value(v)?,
            "shortcut.steps" => self.shortcut.steps = parse_value(v)?,
            "shortcut.lr" => self.shortcut.lr = parse_value(v)?,
            "shortcut.prototype_scale" => self.shortcut.prototype_scale = parse_value(v)?,
            "shortcut.shared_scale" => self.shortcut.shared_scale = parse_value(v)?,
            "shortcut.noise_std" => self.shortcut.noise_std = parse_value(v)?,
            "shortcut.anomaly_shift" => self.shortcut.anomaly_shift = parse_value(v)?,
            "shortcut.anomalous_tokens" => self.shortcut.anomalous_tokens = parse_value(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "data.channels" => self.data.channels.to_string(),
            "data.height" => self.data.height.to_string(),
            "data.width" => self.data.width.to_string(),
            "data.n_train" => self.data.n_train.to_string(),
            "data.n_test_normal" => self.data.n_test_normal.to_string(),
            "data.n_test_anomalous" => self.data.n_test_anomalous.to_string(),
            "data.n_aux_anomalous" => self.data.n_aux_anomalous.to_string(),
            "data.basis_rank" => self.data.basis_rank.to_string(),
            "data.noise_std" => self.data.noise_std.to_string(),
            "data.patch_min" => self.data.anomaly_patch.0.to_string(),
            "data.patch_max" => self.data.anomaly_patch.1.to_string(),
            "data.anomaly_shift" => self.data.anomaly_shift.to_string(),
            "model.variant" => self.model.variant.to_string(),
            "model.token_dim" => self.model.token_dim.to_string(),
            "model.n_encoder_layers" => self.model.n_encoder_layers.to_string(),
            "model.n_decoder_layers" => self.model.n_decoder_layers.to_string(),
            "model.n_heads" => self.model.n_heads.to_string(),
            "model.ffn_hidden" => self.model.ffn_hidden.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.lr" => self.train.lr_initial.to_string(),
            "train.lr_drop_epoch" => self.train.lr_drop_epoch.to_string(),
            "train.lr_drop_factor" => self.train.lr_drop_factor.to_string(),
            "train.weight_decay" => self.train.weight_decay.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.beta1" => self.train.beta1.to_string(),
            "train.beta2" => self.train.beta2.to_string(),
            "train.adam_epsilon" => self.train.adam_epsilon.to_string(),
            "finetune.epochs" => self.finetune.epochs.to_string(),
            "finetune.lr" => self.finetune.lr.to_string(),
            "finetune.loss" => self.finetune.loss_kind.to_string(),
            "loss.alpha" => self.loss.alpha.to_string(),
            "loss.k" => self.loss.k.to_string(),
            "loss.pool_window" => self.loss.pool_window.to_string(),
            "loss.epsilon" => self.loss.epsilon.to_string(),
            "shortcut.tokens" => self.shortcut.tokens.to_string(),
            "shortcut.channels" => self.shortcut.channels.to_string(),
            "shortcut.n_normal_train" => self.shortcut.n_normal_train.to_string(),
            "shortcut.n_normal_test" => self.shortcut.n_normal_test.to_string(),
            "shortcut.n_anomalous_test" => self.shortcut.n_anomalous_test.to_string(),
            "shortcut.steps" => self.shortcut.steps.to_string(),
            "shortcut.lr" => self.shortcut.lr.to_string(),
            "shortcut.prototype_scale" => self.shortcut.prototype_scale.to_string(),
            "shortcut.shared_scale" => self.shortcut.shared_scale.to_string(),
            "shortcut.noise_std" => self.shortcut.noise_std.to_string(),
            "shortcut.anomaly_shift" => self.shortcut.anomaly_shift.to_string(),
            "shortcut.anomalous_tokens" => self.shortcut.anomalous_tokens.to_string(),
            _ => unreachable!("KEYS lists only known keys"),
        }
    }

    /// Defaults overridden by the settings in `text`.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax { line });
            }
            if !Self::KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey { line, key: key.into() });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate { line, key: key.into() });
            }
            config.set(key, value).map_err(|detail| ConfigError::Value {
                line,
                key: key.into(),
                value: value.into(),
                detail,
            })?;
        }
        Ok(config)
    }

    /// Every setting, one per line in [`RunConfig::KEYS`] order; parses back
    /// to an equal config.
    pub fn to_text(&self) -> String {
        Self::KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k))).collect()
    }

    /// Copies the global seed into every component.
    pub fn seeded(mut self) -> Self {
        self.data.seed = self.seed;
        self.train.seed = self.seed;
        self.shortcut.seed = self.seed;
        self
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            loss_kind: LossKind::Norm,
            loss: self.loss.clone(),
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Constant learning rate; moments restart from zero.
    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.finetune.epochs,
            lr_initial: self.finetune.lr,
            lr_drop_epoch: self.finetune.epochs,
            loss_kind: self.finetune.loss_kind,
            loss: self.loss.clone(),
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(RunConfig::parse("").unwrap(), c);
    }

    #[test]
    fn overrides_and_comments() {
        let c = RunConfig::parse("# header\nseed = 7\n\nmodel.variant = no_query  # ablation\ntrain.lr=0.5\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.model.variant, Variant::NoQuery);
        assert_eq!(c.train.lr_initial, 0.5);
    }

    #[test]
    fn rejects() {
        assert_eq!(RunConfig::parse("seed").unwrap_err(), ConfigError::Syntax { line: 1 });
        assert!(matches!(RunConfig::parse("\nbogus = 1"), Err(ConfigError::UnknownKey { line: 2, .. })));
        assert!(matches!(RunConfig::parse("seed = 1\nseed = 2"), Err(ConfigError::Duplicate { line: 2, .. })));
        assert!(matches!(RunConfig::parse("train.epochs = -3"), Err(ConfigError::Value { .. })));
        assert!(matches!(RunConfig::parse("model.variant = big"), Err(ConfigError::Value { .. })));
        assert!(matches!(RunConfig::parse(" = 3"), Err(ConfigError::Syntax { .. })));
    }

    #[test]
    fn every_key_settable() {
        for key in RunConfig::KEYS {
            let mut c = RunConfig::default();
            let v = c.get(key);
            c.set(key, &v).unwrap();
            assert_eq!(c, RunConfig::default(), "{key}");
        }
    }
}
