//! One JSON document configuring the whole pipeline.
//!
//! A config file holds any subset of the keys of [`PipelineConfig`]; missing
//! keys are filled from the selected profile and unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::bandit::{A2cConfig, CriticPretrainConfig};
use crate::error::{Error, Result};
use crate::net::DEFAULT_WINDOW;
use crate::select::SelectionConfig;
use crate::seq2seq::DecodeConfig;
use crate::supervised::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// The published training setup.
    #[default]
    PaperDefaults,
    /// Small models that train in seconds on a laptop.
    DeskScale,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-defaults" => Ok(Self::PaperDefaults),
            "desk-scale" => Ok(Self::DeskScale),
            other => Err(Error::Config {
                key: "profile".into(),
                message: format!("expected paper-defaults or desk-scale, got {other:?}"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSettings {
    pub addr: String,
    pub window: usize,
}

impl Default for ServerSettings {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:7878".into(),
            window: DEFAULT_WINDOW,
        }
    }
}

/// Default file locations; command-line flags take precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub dev_src: Option<PathBuf>,
    pub dev_tgt: Option<PathBuf>,
    pub bpe: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub critic: Option<PathBuf>,
    pub log_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub profile: Profile,
    pub train: TrainConfig,
    pub a2c: A2cConfig,
    pub selection: SelectionConfig,
    pub decode: DecodeConfig,
    pub server: ServerSettings,
    pub paths: Paths,
}

impl PipelineConfig {
    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::PaperDefaults => Self {
                profile,
                train: TrainConfig::default(),
                a2c: A2cConfig::default(),
                selection: SelectionConfig::default(),
                decode: DecodeConfig::greedy(),
                server: ServerSettings::default(),
                paths: Paths::default(),
            },
            Profile::DeskScale => Self {
                profile,
                train: TrainConfig::desk_scale(),
                a2c: A2cConfig {
                    actor_lr: 1e-3,
                    critic_lr: 1e-3,
                    batch_size: 16,
                    pretrain_triples: 1000,
                    pretrain: CriticPretrainConfig {
                        learning_rate: 1e-3,
                        ..CriticPretrainConfig::default()
                    },
                    ..A2cConfig::default()
                },
                selection: SelectionConfig::default(),
                decode: DecodeConfig::greedy(),
                server: ServerSettings::default(),
                paths: Paths::default(),
            },
        }
    }

    /// Parses a config document. An empty or whitespace-only document means
    /// "all defaults". `profile` overrides the document's own `profile` key.
    pub fn from_json_str(text: &str, profile: Option<Profile>) -> Result<Self> {
        let doc: Value = if text.trim().is_empty() {
            Value::Object(Map::new())
        } else {
            serde_json::from_str(text).map_err(|e| Error::Format {
                what: "config",
                message: e.to_string(),
            })?
        };
        let Value::Object(mut doc) = doc else {
            return Err(Error::Format {
                what: "config",
                message: "top level must be a JSON object".into(),
            });
        };
        let file_profile = match doc.get("profile") {
            Some(Value::String(s)) => Some(s.parse::<Profile>()?),
            Some(other) => {
                return Err(Error::Config {
                    key: "profile".into(),
                    message: format!("expected a string, got {other}"),
                })
            }
            None => None,
        };
        let profile = profile.or(file_profile).unwrap_or_default();
        doc.insert("profile".into(), serde_json::to_value(profile)?);
        let mut merged = serde_json::to_value(Self::for_profile(profile))?;
        merge(&mut merged, Value::Object(doc), "")?;
        let config: Self = serde_path_to_error::deserialize(merged).map_err(|e| Error::Config {
            key: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>, profile: Option<Profile>) -> Result<Self> {
        Self::from_json_str(&fs::read_to_string(path)?, profile)
    }

    /// The canonical form: every key, pretty-printed.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let positive = [
            ("train.batch_size", t.batch_size),
            ("train.epochs", t.epochs),
            ("train.embed", t.embed),
            ("train.hidden", t.hidden),
            ("train.layers", t.layers),
            ("server.window", self.server.window),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(bad(key, "must be at least 1"));
            }
        }
        let ranges = [
            ("train.dropout", t.dropout, 0.0, 1.0, "[0, 1)"),
            ("train.heldout_fraction", t.heldout_fraction, 0.0, 1.0, "[0, 1)"),
            (
                "a2c.pretrain.heldout_fraction",
                self.a2c.pretrain.heldout_fraction,
                0.0,
                1.0,
                "[0, 1)",
            ),
        ];
        for (key, v, lo, hi, shown) in ranges {
            if !(lo..hi).contains(&v) {
                return Err(bad(key, format!("must lie in {shown}, got {v}")));
            }
        }
        if !(t.sgd.decay_factor > 0.0 && t.sgd.decay_factor <= 1.0) {
            return Err(bad(
                "train.sgd.decay_factor",
                format!("must lie in (0, 1], got {}", t.sgd.decay_factor),
            ));
        }
        let rates = [
            ("train.sgd.learning_rate", t.sgd.learning_rate),
            ("train.sgd.clip_norm", t.sgd.clip_norm),
            ("train.init_scale", t.init_scale),
            ("a2c.pretrain.learning_rate", self.a2c.pretrain.learning_rate),
        ];
        for (key, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(key, format!("must be positive, got {v}")));
            }
        }
        self.a2c.validate()?;
        self.selection.validate()?;
        self.decode.validate().map_err(|e| bad("decode", e.to_string()))
    }
}

fn bad(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

/// Overlays `over` onto `base`, refusing keys `base` does not have.
fn merge(base: &mut Value, over: Value, prefix: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None => return Err(bad(&key, "unknown key")),
                }
            }
            Ok(())
        }
        (b, o) => {
            *b = o;
            Ok(())
        }
    }
}
