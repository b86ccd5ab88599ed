//! Run configuration file (TOML). Unknown keys are rejected, relative paths
//! resolve against the file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use natctc::distill::EdConfig;
use natctc::model::{EncoderConfig, TrainConfig};
use natctc::upsample::{RatioMode, Scheme, UpsampleConfig, UpsampleRatio};

use crate::Usage;

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub data: DataPaths,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub pretrain: PretrainSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub upsample: UpsampleSection,
    #[serde(default)]
    pub ed: EdSection,
}

fn default_seed() -> u64 {
    1
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub vocab: PathBuf,
    pub train_src: PathBuf,
    pub train_tgt: PathBuf,
    pub valid_src: PathBuf,
    pub valid_tgt: PathBuf,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub dropout: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_positions: 64,
            dropout: 0.1,
        }
    }
}

impl EncoderSection {
    pub fn to_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_positions: self.max_positions,
            vocab_size,
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub lr: f64,
    pub steps: u64,
    /// Sentences per masked-LM batch.
    pub batch_sentences: usize,
    pub log_every: u64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            lr: 1e-3,
            steps: 3000,
            batch_sentences: 32,
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_tokens: usize,
    pub steps: u64,
    pub valid_every: u64,
    /// Number of best checkpoints kept and averaged at the end.
    pub keep_best: usize,
    pub freeze_embedding: bool,
    pub freeze_projection: bool,
    /// Pretrained checkpoint to start from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_from: Option<PathBuf>,
    /// Distillation teacher; defaults to `init_from`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher: Option<PathBuf>,
    /// Start from random parameters instead of `init_from`.
    pub random_init: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: TrainConfig::DEFAULT_LR,
            batch_tokens: 400,
            steps: 3000,
            valid_every: 250,
            keep_best: 5,
            freeze_embedding: true,
            freeze_projection: false,
            init_from: None,
            teacher: None,
            random_init: false,
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct UpsampleSection {
    /// `it` or `im`.
    pub scheme: String,
    /// Integer, fraction (`3/2`) or decimal.
    pub ratio: String,
    /// `fr` or `dr`.
    pub mode: String,
}

impl Default for UpsampleSection {
    fn default() -> Self {
        UpsampleSection {
            scheme: "im".into(),
            ratio: "4".into(),
            mode: "dr".into(),
        }
    }
}

impl UpsampleSection {
    pub fn to_config(&self, max_positions: usize) -> Result<UpsampleConfig> {
        let scheme: Scheme = self
            .scheme
            .parse()
            .map_err(|e| Usage(format!("upsample.scheme: {e}")))?;
        let ratio: UpsampleRatio = self
            .ratio
            .parse()
            .map_err(|e| Usage(format!("upsample.ratio: {e}")))?;
        let mode: RatioMode = self
            .mode
            .parse()
            .map_err(|e| Usage(format!("upsample.mode: {e}")))?;
        Ok(UpsampleConfig::new(scheme, ratio, mode, max_positions)
            .map_err(|e| Usage(format!("upsample: {e}")))?)
    }
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EdSection {
    pub enabled: bool,
    pub teacher_layer: i32,
    pub start_step: u64,
}

impl Default for EdSection {
    fn default() -> Self {
        EdSection {
            enabled: true,
            teacher_layer: -1,
            start_step: 500,
        }
    }
}

impl EdSection {
    pub fn to_config(&self) -> EdConfig {
        EdConfig {
            teacher_layer: self.teacher_layer,
            start_step: self.start_step,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::parse(&text).map_err(|e| Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.resolve(base);
        for p in [&mut cfg.train.init_from, &mut cfg.train.teacher]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Parses TOML; errors name the offending key path.
    pub fn parse(text: &str) -> std::result::Result<RunConfig, String> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.message().to_string();
            if path.is_empty() || path == "." {
                msg
            } else {
                format!("key `{path}`: {msg}")
            }
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is serializable")
    }
}

impl DataPaths {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.vocab,
            &mut self.train_src,
            &mut self.train_tgt,
            &mut self.valid_src,
            &mut self.valid_tgt,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn check_exist(&self) -> Result<()> {
        for p in [
            &self.vocab,
            &self.train_src,
            &self.train_tgt,
            &self.valid_src,
            &self.valid_tgt,
        ] {
            if !p.exists() {
                return Err(
                    Usage(format!("configured path {} does not exist", p.display())).into(),
                );
            }
        }
        Ok(())
    }
}
