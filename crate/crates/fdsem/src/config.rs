//! Run configuration: a flat JSON file covering data paths, model shape, and
//! every training knob. Unknown fields are rejected so typos fail fast.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::{ModelDims, TrainConfig};
use crate::world::DEFAULT_ENUM_BUDGET;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Path to the JSON Lines corpus.
    pub sembank: String,
    /// Where the checkpoint is written after each epoch.
    pub checkpoint: String,
    pub dim: usize,
    pub card: usize,
    /// Embedding width; 0 means "same as dim".
    pub embed_dim: usize,
    /// Hidden width; 0 means "same as dim".
    pub hidden_dim: usize,
    pub init_scale: f64,
    pub init_density: f64,
    pub encoder_init_scale: f64,
    pub lr_world: f64,
    pub lr_lexical: f64,
    pub lr_encoder: f64,
    pub l2_world: f64,
    pub l2_lexical: f64,
    pub l2_encoder: f64,
    pub beta: f64,
    pub alpha: f64,
    pub n_neg: usize,
    pub uniform_negative: bool,
    pub dropout_rate: f64,
    pub bp_iterations: usize,
    pub bp_damping: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub enum_budget: u64,
    pub train_bias: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            sembank: String::new(),
            checkpoint: "checkpoint.json".to_owned(),
            dim: 200,
            card: 20,
            embed_dim: 0,
            hidden_dim: 0,
            init_scale: 0.1,
            init_density: 0.2,
            encoder_init_scale: 0.1,
            lr_world: t.lr_world,
            lr_lexical: t.lr_lexical,
            lr_encoder: t.lr_encoder,
            l2_world: t.l2_world,
            l2_lexical: t.l2_lexical,
            l2_encoder: t.l2_encoder,
            beta: t.beta,
            alpha: t.alpha,
            n_neg: t.n_neg,
            uniform_negative: t.uniform_negative,
            dropout_rate: t.dropout_rate,
            bp_iterations: t.bp_iterations,
            bp_damping: t.bp_damping,
            batch_size: t.batch_size,
            epochs: t.epochs,
            seed: t.seed,
            enum_budget: DEFAULT_ENUM_BUDGET,
            train_bias: t.train_bias,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sembank.is_empty() {
            return Err(Error::Config("sembank path is required".into()));
        }
        if self.checkpoint.is_empty() {
            return Err(Error::Config("checkpoint path is required".into()));
        }
        if self.card == 0 || self.card > self.dim {
            return Err(Error::Config(format!(
                "card {} outside 1..={}",
                self.card, self.dim
            )));
        }
        self.train_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr_world: self.lr_world,
            lr_lexical: self.lr_lexical,
            lr_encoder: self.lr_encoder,
            l2_world: self.l2_world,
            l2_lexical: self.l2_lexical,
            l2_encoder: self.l2_encoder,
            beta: self.beta,
            alpha: self.alpha,
            n_neg: self.n_neg,
            uniform_negative: self.uniform_negative,
            dropout_rate: self.dropout_rate,
            bp_iterations: self.bp_iterations,
            bp_damping: self.bp_damping,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            enum_budget: self.enum_budget,
            train_bias: self.train_bias,
        }
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            dim: self.dim,
            card: self.card,
            embed_dim: if self.embed_dim == 0 { self.dim } else { self.embed_dim },
            hidden_dim: if self.hidden_dim == 0 { self.dim } else { self.hidden_dim },
            init_scale: self.init_scale,
            init_density: self.init_density,
            encoder_init_scale: self.encoder_init_scale,
        }
    }
}
