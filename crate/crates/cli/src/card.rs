//! A model on disk: `<name>.natc` plus a `<name>.toml` card naming its
//! vocabulary and upsampling settings.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use natctc::corpus::Vocab;
use natctc::model::{load_checkpoint, save_checkpoint, ParamStore};
use natctc::upsample::UpsampleConfig;

use crate::config::UpsampleSection;

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelCard {
    /// Relative to the card's directory.
    pub vocab: PathBuf,
    pub upsample: UpsampleSection,
}

pub struct LoadedModel {
    pub params: ParamStore<f32>,
    pub vocab: Vocab,
    pub upsample: UpsampleConfig,
    pub card: ModelCard,
}

pub fn card_path(model: &Path) -> PathBuf {
    model.with_extension("toml")
}

/// Writes checkpoint, card and vocabulary into `dir` as `model.natc`,
/// `model.toml` and `vocab.txt`.
pub fn save_model(
    dir: &Path,
    params: &ParamStore<f32>,
    vocab: &Vocab,
    upsample: &UpsampleSection,
) -> Result<PathBuf> {
    save_model_as(dir, "model", params, vocab, upsample)
}

/// Like [`save_model`] with `<stem>.natc` and `<stem>.toml`.
pub fn save_model_as(
    dir: &Path,
    stem: &str,
    params: &ParamStore<f32>,
    vocab: &Vocab,
    upsample: &UpsampleSection,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let model = dir.join(format!("{stem}.natc"));
    save_checkpoint(params, &model)?;
    vocab.write(dir.join("vocab.txt"))?;
    let card = ModelCard {
        vocab: "vocab.txt".into(),
        upsample: upsample.clone(),
    };
    let path = card_path(&model);
    fs::write(&path, toml::to_string_pretty(&card)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(model)
}

pub fn load_model(model: &Path) -> Result<LoadedModel> {
    let path = card_path(model);
    let text = fs::read_to_string(&path)
        .with_context(|| format!("reading model card {}", path.display()))?;
    let card: ModelCard =
        toml::from_str(&text).with_context(|| format!("parsing model card {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let vocab = Vocab::read(base.join(&card.vocab))?;
    let params = load_checkpoint(model)?;
    if params.config.vocab_size != vocab.len() {
        return Err(natctc::Error::Shape(format!(
            "model has {} output rows but its vocabulary has {} tokens",
            params.config.vocab_size,
            vocab.len()
        ))
        .into());
    }
    let upsample = card.upsample.to_config(params.config.max_positions)?;
    Ok(LoadedModel {
        params,
        vocab,
        upsample,
        card,
    })
}
