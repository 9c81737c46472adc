//! Model, training and run configuration.
//!
//! Run configuration files are TOML-style `key = value` lines grouped under
//! `[model]`, `[compression]`, `[pretrain]`, `[ae]`, `[keft]`, `[data]` and
//! `[flops]` sections. Every key has a default; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::flops::FlopsConfig;
use crate::tokenizer::VOCAB_SIZE;

/// Geometry of one transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub hidden_size: usize,
    pub head_dim: usize,
    pub num_query_heads: usize,
    pub num_kv_heads: usize,
    pub intermediate_size: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.head_dim == 0 || self.num_query_heads == 0 || self.num_kv_heads == 0 {
            return Err(Error::Config("block dimensions must be positive".into()));
        }
        if self.hidden_size != self.num_query_heads * self.head_dim {
            return Err(Error::Config(format!(
                "hidden size {} != {} query heads x head dim {}",
                self.hidden_size, self.num_query_heads, self.head_dim
            )));
        }
        if !self.num_query_heads.is_multiple_of(self.num_kv_heads) {
            return Err(Error::Config(format!(
                "{} query heads not divisible by {} kv heads",
                self.num_query_heads, self.num_kv_heads
            )));
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("head dim {} must be even for rotary embedding", self.head_dim)));
        }
        if self.intermediate_size == 0 || self.norm_eps <= 0.0 || self.rope_base <= 0.0 {
            return Err(Error::Config("intermediate size, norm eps and rope base must be positive".into()));
        }
        Ok(())
    }

    pub fn kv_width(&self) -> usize {
        self.num_kv_heads * self.head_dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderInit {
    /// Encoder blocks start as copies of the decoder's lowest blocks.
    #[default]
    CopyDecoder,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Gmsa,
    Tcp,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmsa" => Ok(Variant::Gmsa),
            "tcp" => Ok(Variant::Tcp),
            other => Err(Error::Config(format!("unknown variant `{other}` (gmsa|tcp)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub num_kv_heads: usize,
    pub intermediate_size: usize,
    pub decoder_layers: usize,
    pub encoder_layers: usize,
    pub lsa_layers: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    /// Std of the normal initializer for projections and embeddings.
    pub init_std: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub encoder_init: EncoderInit,
    /// Capacity of learnable appended tokens for the TCP baseline.
    pub tcp_max_tokens: usize,
    /// Replace the TCP projection MLP by the identity.
    pub tcp_mlp_identity: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            hidden_size: 64,
            num_heads: 4,
            num_kv_heads: 4,
            intermediate_size: 176,
            decoder_layers: 4,
            encoder_layers: 2,
            lsa_layers: 1,
            rope_base: 10000.0,
            norm_eps: 1e-5,
            init_std: 0.02,
            lora_rank: 8,
            lora_alpha: 16.0,
            encoder_init: EncoderInit::CopyDecoder,
            tcp_max_tokens: 128,
            tcp_mlp_identity: false,
            seed: 17,
        }
    }
}

impl ModelConfig {
    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            hidden_size: self.hidden_size,
            head_dim: self.hidden_size / self.num_heads.max(1),
            num_query_heads: self.num_heads,
            num_kv_heads: self.num_kv_heads,
            intermediate_size: self.intermediate_size,
            rope_base: self.rope_base,
            norm_eps: self.norm_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden_size, self.num_heads
            )));
        }
        self.block().validate()?;
        if self.vocab_size < VOCAB_SIZE {
            return Err(Error::Config(format!(
                "vocab size {} smaller than the byte tokenizer's {VOCAB_SIZE}",
                self.vocab_size
            )));
        }
        if self.decoder_layers == 0 || self.encoder_layers == 0 || self.lsa_layers == 0 {
            return Err(Error::Config("layer counts must be positive".into()));
        }
        if self.lsa_layers > self.decoder_layers {
            return Err(Error::Config(format!(
                "{} LSA layers exceed {} decoder layers they are copied from",
                self.lsa_layers, self.decoder_layers
            )));
        }
        if self.encoder_init == EncoderInit::CopyDecoder && self.encoder_layers > self.decoder_layers {
            return Err(Error::Config(format!(
                "cannot copy {} encoder layers from {} decoder layers",
                self.encoder_layers, self.decoder_layers
            )));
        }
        if self.lora_rank == 0 || self.tcp_max_tokens == 0 {
            return Err(Error::Config("lora rank and tcp token capacity must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Pretrain,
    Ae,
    Keft,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Ae => "ae",
            Stage::Keft => "keft",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// AE stage only: also train the decoder.
    pub unfreeze_decoder: bool,
}

impl TrainConfig {
    pub fn for_stage(stage: Stage) -> Self {
        let (learning_rate, batch_size, total_steps) = match stage {
            Stage::Pretrain => (1e-3, 8, 2000),
            Stage::Ae => (1e-4, 4, 3000),
            Stage::Keft => (1e-5, 16, 1500),
        };
        TrainConfig {
            learning_rate,
            batch_size,
            total_steps,
            clip_norm: 2.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 17,
            unfreeze_decoder: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clip_norm <= 0.0 {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("total_steps and batch_size must be at least 1".into()));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be nonnegative".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::for_stage(Stage::Ae)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressionConfig {
    pub allowed_rates: Vec<usize>,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        CompressionConfig { allowed_rates: vec![4, 8] }
    }
}

impl CompressionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.allowed_rates.is_empty() {
            return Err(Error::Config("allowed_rates is empty".into()));
        }
        if self.allowed_rates.contains(&0) {
            return Err(Error::Config("every compression rate must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training corpus (JSONL of sample records).
    pub train: Option<PathBuf>,
    /// Inserted between documents when a context is assembled from several.
    pub doc_separator: String,
    /// Pretraining mixes plain LM, copy and (when answers exist) QA formats.
    pub pretrain_copy: bool,
    pub pretrain_qa: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            doc_separator: "; ".into(),
            pretrain_copy: true,
            pretrain_qa: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub compression: CompressionConfig,
    #[serde(default = "pretrain_default", deserialize_with = "pretrain_section")]
    pub pretrain: TrainConfig,
    #[serde(default = "ae_default", deserialize_with = "ae_section")]
    pub ae: TrainConfig,
    #[serde(default = "keft_default", deserialize_with = "keft_section")]
    pub keft: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub flops: FlopsConfig,
}

fn pretrain_default() -> TrainConfig {
    TrainConfig::for_stage(Stage::Pretrain)
}
fn ae_default() -> TrainConfig {
    TrainConfig::for_stage(Stage::Ae)
}
fn keft_default() -> TrainConfig {
    TrainConfig::for_stage(Stage::Keft)
}

/// Keys missing from a stage section fall back to that stage's defaults.
fn stage_section<'de, D: Deserializer<'de>>(d: D, stage: Stage) -> std::result::Result<TrainConfig, D::Error> {
    let given = toml::Table::deserialize(d)?;
    let mut merged = toml::Table::try_from(TrainConfig::for_stage(stage)).map_err(D::Error::custom)?;
    merged.extend(given);
    merged.try_into().map_err(D::Error::custom)
}

fn pretrain_section<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<TrainConfig, D::Error> {
    stage_section(d, Stage::Pretrain)
}
fn ae_section<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<TrainConfig, D::Error> {
    stage_section(d, Stage::Ae)
}
fn keft_section<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<TrainConfig, D::Error> {
    stage_section(d, Stage::Keft)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.compression.validate()?;
        self.pretrain.validate()?;
        self.ae.validate()?;
        self.keft.validate()?;
        self.flops.validate()?;
        Ok(())
    }

    pub fn stage(&self, stage: Stage) -> &TrainConfig {
        match stage {
            Stage::Pretrain => &self.pretrain,
            Stage::Ae => &self.ae,
            Stage::Keft => &self.keft,
        }
    }
}
