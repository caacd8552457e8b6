//! Run configuration: presets, TOML overlay and seed propagation.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use gem_core::corpus::{GeneratorSpec, QualityPolicy};
use gem_core::knowledge::{load_lexicon, Category, Lexicon, ViewLexicons};
use gem_core::model::ModelConfig;
use gem_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Published hyperparameters (slow on a laptop).
    Paper,
    /// Small model and short schedules that finish in minutes.
    Desk,
}

/// Lexicon files; the bundled lexicons are used for any path left unset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LexiconPaths {
    pub cvd: Option<PathBuf>,
    pub symptom: Option<PathBuf>,
    pub gender: Option<PathBuf>,
}

impl LexiconPaths {
    pub fn cvd(&self) -> Result<Lexicon> {
        load_or_bundled(self.cvd.as_deref(), Category::Cvd)
    }

    pub fn views(&self) -> Result<ViewLexicons> {
        Ok(ViewLexicons {
            symptom: load_or_bundled(self.symptom.as_deref(), Category::Symptom)?,
            gender: load_or_bundled(self.gender.as_deref(), Category::Gender)?,
        })
    }
}

fn load_or_bundled(path: Option<&Path>, category: Category) -> Result<Lexicon> {
    match path {
        Some(p) => Ok(load_lexicon(p, category)?),
        None => Ok(Lexicon::bundled(category)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Minimum word frequency for the vocabulary.
    pub min_freq: usize,
    pub quality: QualityPolicy,
    pub anonymize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            min_freq: 2,
            quality: QualityPolicy::default(),
            anonymize: true,
        }
    }
}

/// Everything a command may need. The top-level `seed` overrides the seeds of
/// the generator and both training sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub generator: GeneratorSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: TrainConfig,
    pub lexicons: LexiconPaths,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => RunConfig {
                seed: 0,
                generator: GeneratorSpec::default(),
                model: ModelConfig::desk(),
                train: TrainConfig::desk(),
                pretrain: TrainConfig::pretrain_default(),
                lexicons: LexiconPaths::default(),
                data: DataConfig::default(),
            },
            Preset::Paper => RunConfig {
                seed: 0,
                generator: GeneratorSpec::default(),
                model: ModelConfig {
                    dropout_p: 0.2,
                    ..ModelConfig::default()
                },
                train: TrainConfig::paper(),
                pretrain: TrainConfig::pretrain_paper(),
                lexicons: LexiconPaths::default(),
                data: DataConfig::default(),
            },
        }
    }

    /// Preset values overlaid with the keys present in a TOML file.
    pub fn load(preset: Preset, path: Option<&Path>) -> Result<Self> {
        let base = Self::preset(preset);
        let Some(path) = path else { return Ok(base) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::overlay(base, &text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn overlay(base: Self, text: &str) -> Result<Self> {
        let file: toml::Table = text.parse()?;
        let mut merged = toml::Table::try_from(&base)?;
        merge(&mut merged, file, "")?;
        Ok(toml::Value::Table(merged).try_into()?)
    }

    /// Copies the top-level seed into every section.
    pub fn propagate_seed(&mut self) {
        self.generator.seed = self.seed;
        self.train.seed = self.seed;
        self.pretrain.seed = self.seed;
    }
}

fn merge(into: &mut toml::Table, from: toml::Table, path: &str) -> Result<()> {
    for (k, v) in from {
        let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(dst)), toml::Value::Table(src)) => merge(dst, src, &key)?,
            (Some(toml::Value::Table(_)), _) => bail!("`{key}` must be a table"),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
    Ok(())
}
