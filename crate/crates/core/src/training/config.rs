//! Training configuration.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{AdamConfig, LrDecay, SgdConfig};
use crate::data::FeatureShape;
use crate::error::{DibsError, Result};
use crate::nets::{EncoderSpec, ModelConfig};
use crate::objectives::{KlMode, LossWeights, PairOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Shared encoder, stochastic heads and the adversarial diversity game.
    #[default]
    Dibs,
    /// Independent single-head models differing only in initialization.
    RandomEnsemble,
    /// Shared encoder with an output-diversity penalty instead of the game.
    Abe,
    /// One single-head model with dropout sampled at inference.
    McDropout,
}

/// Network sizes. Unset fields take the defaults for the input kind.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub encoder: Option<EncoderSpec>,
    pub latent_dim: Option<usize>,
    pub head_dim: Option<usize>,
    pub decoder_hidden: Option<usize>,
    pub disc_hidden: Option<usize>,
    /// Dropout rate used by `mc_dropout`.
    pub dropout: Option<f64>,
}

pub const DEFAULT_DISC_HIDDEN: usize = 64;
pub const DEFAULT_DROPOUT: f64 = 0.5;

/// Adversarial optimizer steps per main step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvSteps {
    pub generator: usize,
    pub discriminator: usize,
}

impl Default for AdvSteps {
    fn default() -> Self {
        Self { generator: 1, discriminator: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Ensemble size K.
    #[serde(alias = "K")]
    pub heads: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub main_optimizer: SgdConfig,
    pub adv_optimizer: AdamConfig,
    pub lr_decay: LrDecay,
    pub beta: f64,
    pub kl_mode: KlMode,
    pub adv_weight: f64,
    pub adv_steps: AdvSteps,
    pub pairs: PairOptions,
    pub seed: u64,
    pub mode: Mode,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            epochs: 10,
            batch_size: 64,
            main_optimizer: SgdConfig::default(),
            adv_optimizer: AdamConfig::default(),
            lr_decay: LrDecay::default(),
            beta: 1e-3,
            kl_mode: KlMode::default(),
            adv_weight: 1.0,
            adv_steps: AdvSteps::default(),
            pairs: PairOptions::default(),
            seed: 0,
            mode: Mode::default(),
            arch: ArchConfig::default(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(DibsError::invalid(format!("{name} must be positive and finite, got {v}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(DibsError::invalid("heads must be at least 1"));
        }
        if matches!(self.mode, Mode::Dibs | Mode::Abe) && self.heads < 2 {
            return Err(DibsError::invalid(format!("{:?} needs at least two heads, got {}", self.mode, self.heads)));
        }
        if self.mode == Mode::McDropout && self.heads != 1 {
            return Err(DibsError::invalid("mc_dropout trains a single-head model; set heads = 1"));
        }
        if self.epochs == 0 {
            return Err(DibsError::invalid("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(DibsError::invalid("batch_size must be at least 1"));
        }
        positive("main_optimizer.lr", self.main_optimizer.lr)?;
        positive("adv_optimizer.lr", self.adv_optimizer.lr)?;
        positive("adv_optimizer.eps", self.adv_optimizer.eps)?;
        positive("lr_decay.factor", self.lr_decay.factor)?;
        if !(0.0..1.0).contains(&self.main_optimizer.momentum) {
            return Err(DibsError::invalid("main_optimizer.momentum must lie in [0, 1)"));
        }
        for (n, b) in [("beta1", self.adv_optimizer.beta1), ("beta2", self.adv_optimizer.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(DibsError::invalid(format!("adv_optimizer.{n} must lie in [0, 1)")));
            }
        }
        if !(self.beta >= 0.0 && self.beta < 1.0) {
            return Err(DibsError::invalid(format!("beta must lie in [0, 1), got {}", self.beta)));
        }
        if !(self.adv_weight >= 0.0 && self.adv_weight.is_finite()) {
            return Err(DibsError::invalid("adv_weight must be non-negative and finite"));
        }
        if let Some(p) = self.arch.dropout {
            if !(p > 0.0 && p < 1.0) {
                return Err(DibsError::invalid(format!("dropout rate {p} not in (0, 1)")));
            }
        }
        Ok(())
    }

    pub fn has_adversary(&self) -> bool {
        self.mode == Mode::Dibs
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights::uniform(self.heads, self.beta, self.adv_weight)
    }

    /// Configuration of one model (or, for `random_ensemble`, one member).
    pub fn model_config(&self, input: FeatureShape, num_classes: usize) -> ModelConfig {
        let heads = if self.mode == Mode::RandomEnsemble { 1 } else { self.heads };
        let mut cfg = ModelConfig::for_input(input, num_classes, heads);
        let a = &self.arch;
        if let Some(e) = &a.encoder {
            cfg.encoder = e.clone();
        }
        cfg.latent_dim = a.latent_dim.unwrap_or(cfg.latent_dim);
        cfg.head_dim = a.head_dim.unwrap_or(cfg.head_dim);
        cfg.decoder_hidden = a.decoder_hidden.unwrap_or(cfg.decoder_hidden);
        if self.mode == Mode::McDropout {
            cfg.dropout = Some(a.dropout.unwrap_or(DEFAULT_DROPOUT));
        }
        cfg
    }

    pub fn disc_hidden(&self) -> usize {
        self.arch.disc_hidden.unwrap_or(DEFAULT_DISC_HIDDEN)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
