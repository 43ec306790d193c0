//! Hyperparameters and model-structure selection.
//!
//! [`HyperConfig`] is read from TOML; any key it does not know is rejected with
//! an error naming that key.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How image and keyword features are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    /// Image vector queries keyword keys/values.
    Transfuser,
    /// Every image patch queries keyword keys/values.
    Coattention,
    Sum,
    Mul,
    Average,
    Concat,
    /// Contextualized keyword encoder output concatenated with the image vector.
    Contextual,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Lstm,
    Transformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "image+keywords")]
    ImageKeywords,
    #[serde(rename = "image")]
    ImageOnly,
    #[serde(rename = "keywords")]
    KeywordsOnly,
}

macro_rules! str_enum {
    ($ty:ty { $($variant:path => $name:literal),* $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name),* })
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)*
                    other => Err(Error::Config(format!(
                        "unknown {} `{other}`", stringify!($ty)
                    ))),
                }
            }
        }
    };
}

str_enum!(FusionKind {
    FusionKind::Transfuser => "transfuser",
    FusionKind::Coattention => "coattention",
    FusionKind::Sum => "sum",
    FusionKind::Mul => "mul",
    FusionKind::Average => "average",
    FusionKind::Concat => "concat",
    FusionKind::Contextual => "contextual",
});

str_enum!(DecoderKind {
    DecoderKind::Lstm => "lstm",
    DecoderKind::Transformer => "transformer",
});

str_enum!(Modality {
    Modality::ImageKeywords => "image+keywords",
    Modality::ImageOnly => "image",
    Modality::KeywordsOnly => "keywords",
});

/// Split fractions; presets for 60/20/20 and 80/10/10.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitSpec {
    pub const SIXTY_TWENTY_TWENTY: SplitSpec = SplitSpec {
        train: 0.6,
        val: 0.2,
        test: 0.2,
    };
    pub const EIGHTY_TEN_TEN: SplitSpec = SplitSpec {
        train: 0.8,
        val: 0.1,
        test: 0.1,
    };

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must be in [0,1] and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self::SIXTY_TWENTY_TWENTY
    }
}

/// All model and training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperConfig {
    pub fusion: FusionKind,
    pub decoder: DecoderKind,
    pub modality: Modality,

    /// Word embedding size `E` (shared between keywords and descriptions).
    pub embed_dim: usize,
    /// Image feature size `F` / `H_I` produced by the patch embedder.
    pub image_dim: usize,
    /// Fusion hidden size `T_H`.
    pub fusion_hidden: usize,
    pub fusion_ffn: usize,
    pub lstm_hidden: usize,
    /// Run a backward LSTM during teacher forcing and average its logits in.
    pub lstm_bidirectional: bool,
    pub decoder_blocks: usize,
    pub decoder_heads: usize,
    pub decoder_ffn: usize,
    pub decoder_hidden: usize,
    /// Blocks in the contextualized keyword encoder.
    pub encoder_blocks: usize,
    pub patch_size: usize,
    pub image_size: usize,

    pub max_len: usize,
    pub keyword_max_len: usize,

    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Stop after this many optimizer steps (0 = no limit).
    pub max_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    /// Dropout on decoder input embeddings during training.
    pub dropout: f64,
    pub layer_norm_eps: f64,

    /// Keyword-predictor confidence threshold.
    pub threshold: f64,
    pub predictor_hidden: usize,
    pub head_epochs: usize,
    pub head_learning_rate: f64,

    pub beam: usize,
    pub seed: u64,
    pub split: SplitSpec,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl HyperConfig {
    /// Small sizes for CPU-scale experiments on synthetic data.
    pub fn desk() -> Self {
        HyperConfig {
            fusion: FusionKind::Transfuser,
            decoder: DecoderKind::Lstm,
            modality: Modality::ImageKeywords,
            embed_dim: 32,
            image_dim: 32,
            fusion_hidden: 32,
            fusion_ffn: 64,
            lstm_hidden: 64,
            lstm_bidirectional: false,
            decoder_blocks: 2,
            decoder_heads: 8,
            decoder_ffn: 128,
            decoder_hidden: 32,
            encoder_blocks: 2,
            patch_size: 8,
            image_size: 64,
            max_len: crate::text::DESCRIPTION_MAX_LEN,
            keyword_max_len: crate::text::KEYWORD_MAX_LEN,
            batch_size: 16,
            learning_rate: 1e-3,
            epochs: 10,
            max_steps: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 5.0,
            dropout: 0.0,
            layer_norm_eps: 1e-5,
            threshold: 0.5,
            predictor_hidden: 64,
            head_epochs: 10,
            head_learning_rate: 1e-3,
            beam: 1,
            seed: 0,
            split: SplitSpec::SIXTY_TWENTY_TWENTY,
        }
    }

    /// TransFuser + LSTM sizes: E=300, T_H=64, H_LSTM=256, lr 1e-3, 2 epochs, batch 64.
    pub fn transfuser_lstm() -> Self {
        HyperConfig {
            embed_dim: 300,
            image_dim: 512,
            fusion_hidden: 64,
            fusion_ffn: 256,
            lstm_hidden: 256,
            batch_size: 64,
            epochs: 2,
            learning_rate: 1e-3,
            ..Self::desk()
        }
    }

    /// Co-attention + transformer sizes: 2 blocks, 8 heads, FFN 2048, hidden 64,
    /// lr 1e-4, 10 epochs, batch 64, 80/10/10 split.
    pub fn coattention_transformer() -> Self {
        HyperConfig {
            fusion: FusionKind::Coattention,
            decoder: DecoderKind::Transformer,
            embed_dim: 300,
            image_dim: 512,
            fusion_hidden: 64,
            fusion_ffn: 256,
            decoder_blocks: 2,
            decoder_heads: 8,
            decoder_ffn: 2048,
            decoder_hidden: 64,
            batch_size: 64,
            epochs: 10,
            learning_rate: 1e-4,
            split: SplitSpec::EIGHTY_TEN_TEN,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("image_dim", self.image_dim),
            ("fusion_hidden", self.fusion_hidden),
            ("fusion_ffn", self.fusion_ffn),
            ("lstm_hidden", self.lstm_hidden),
            ("decoder_blocks", self.decoder_blocks),
            ("decoder_heads", self.decoder_heads),
            ("decoder_ffn", self.decoder_ffn),
            ("decoder_hidden", self.decoder_hidden),
            ("encoder_blocks", self.encoder_blocks),
            ("patch_size", self.patch_size),
            ("image_size", self.image_size),
            ("max_len", self.max_len),
            ("keyword_max_len", self.keyword_max_len),
            ("batch_size", self.batch_size),
            ("predictor_hidden", self.predictor_hidden),
            ("beam", self.beam),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must leave room for START and END".into()));
        }
        if self.decoder_hidden % self.decoder_heads != 0 {
            return Err(Error::Config(format!(
                "decoder_heads ({}) must divide decoder_hidden ({})",
                self.decoder_heads, self.decoder_hidden
            )));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if !(self.learning_rate >= 0.0 && self.head_learning_rate >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("adam betas must lie in [0,1) and eps be positive".into()));
        }
        self.split.validate()
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: HyperConfig = toml::from_str(s).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Apply `key=value` overrides (CLI flags) on top of this config.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(&self.to_toml_string()).expect("round trip");
        for (key, raw) in overrides {
            let existing = table
                .get(key)
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
            let value = match existing {
                toml::Value::String(_) => toml::Value::String(raw.clone()),
                toml::Value::Integer(_) => toml::Value::Integer(
                    raw.parse()
                        .map_err(|_| Error::Config(format!("{key}: expected an integer, got `{raw}`")))?,
                ),
                toml::Value::Float(_) => toml::Value::Float(
                    raw.parse()
                        .map_err(|_| Error::Config(format!("{key}: expected a number, got `{raw}`")))?,
                ),
                toml::Value::Boolean(_) => toml::Value::Boolean(
                    raw.parse()
                        .map_err(|_| Error::Config(format!("{key}: expected true/false, got `{raw}`")))?,
                ),
                _ => return Err(Error::Config(format!("{key} cannot be overridden from the command line"))),
            };
            table.insert(key.clone(), value);
        }
        Self::from_toml_str(&toml::to_string(&table).expect("table serializes"))
    }

    /// Patches per image (`(image_size / patch_size)²`).
    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }
}
