//! Defaults merged with an optional JSON config file.

use std::fs;
use std::path::Path;

use serde::Deserialize;
use serde_json::Value;

use hyperprompt::datagen::CorpusOptions;
use hyperprompt::pipeline::{BundleConfig, Preset};
use hyperprompt::train::{LossMode, TrainConfig};

pub const SEED_ENV: &str = "HYPERPROMPT_SEED";

/// Config file layout. Every section is optional and partial: keys it names
/// replace the defaults, the rest stay.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    preset: Option<Preset>,
    model: Option<Value>,
    train: Option<Value>,
    corpus: Option<Value>,
    pretrain_loss: Option<LossMode>,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub model: BundleConfig,
    pub train: TrainConfig,
    pub corpus: CorpusOptions,
    pub pretrain_loss: LossMode,
}

impl RunConfig {
    /// Defaults for `preset` (falling back to the file's preset, then desk),
    /// overlaid with the file at `path`. `env_seed` is the raw value of
    /// [`SEED_ENV`]; the file's seed wins over it.
    pub fn resolve(path: Option<&Path>, env_seed: Option<&str>, preset: Option<Preset>) -> Result<Self, String> {
        let file: FileConfig = match path {
            Some(p) => {
                let raw = fs::read(p).map_err(|e| format!("{}: {e}", p.display()))?;
                serde_json::from_slice(&raw).map_err(|e| format!("{}: {e}", p.display()))?
            }
            None => FileConfig::default(),
        };
        let env_seed = match env_seed {
            Some(s) => Some(
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| format!("{SEED_ENV}={s:?} is not an integer"))?,
            ),
            None => None,
        };
        let preset = preset.or(file.preset).unwrap_or_default();
        Ok(Self {
            seed: file.seed.or(env_seed).unwrap_or(0),
            model: overlay(BundleConfig::preset(preset), file.model, "model")?,
            train: overlay(TrainConfig::default(), file.train, "train")?,
            corpus: overlay(CorpusOptions::default(), file.corpus, "corpus")?,
            pretrain_loss: file.pretrain_loss.unwrap_or(LossMode::Joint),
        })
    }
}

fn overlay<T>(base: T, patch: Option<Value>, section: &str) -> Result<T, String>
where
    T: serde::Serialize + serde::de::DeserializeOwned,
{
    let Some(patch) = patch else { return Ok(base) };
    let mut v = serde_json::to_value(base).map_err(|e| e.to_string())?;
    merge(&mut v, patch);
    serde_json::from_value(v).map_err(|e| format!("config section {section}: {e}"))
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
