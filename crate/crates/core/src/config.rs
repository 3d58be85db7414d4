//! The harness configuration file and `key=value` overrides.
//!
//! The file is TOML. Every section is optional and falls back to the toy
//! defaults, so an empty file is a valid configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{PixelNorm, SyntheticConfig, VideoDataset};
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::memory::RetentionPolicy;
use crate::model::ModelConfig;
use crate::network::NetworkConfig;
use crate::tracker::TrackerConfig;
use crate::training::TrainConfig;

/// Environment variable that replaces every seed in a configuration.
pub const SEED_ENV: &str = "VISOLO_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    /// Generated moving shapes, see [`SyntheticConfig`].
    Synthetic,
    /// A directory holding `annotations.json` and the frame images.
    YtvisJson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub format: DataFormat,
    /// Dataset directory for `ytvis_json`.
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    /// Videos at the end of the dataset held out from training.
    pub holdout: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            format: DataFormat::Synthetic,
            path: None,
            synthetic: SyntheticConfig {
                n_videos: 25,
                n_shapes: 3,
                min_shapes: Some(1),
                ..SyntheticConfig::default()
            },
            holdout: 5,
        }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<VideoDataset> {
        match self.format {
            DataFormat::Synthetic => crate::data::generate_moving_shapes(&self.synthetic),
            DataFormat::YtvisJson => {
                let path = self
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::Config("data.path is required for the ytvis_json format".into()))?;
                crate::data::ytvis::load_ytvis(path)
            }
        }
    }

    /// `(train, held out)`.
    pub fn load_split(&self) -> Result<(VideoDataset, VideoDataset)> {
        Ok(self.load()?.split_tail(self.holdout))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    /// `last2`, `last10`, `last20`, `every5` or `only_every5`.
    #[serde(with = "crate::inference::policy_string")]
    pub policy: RetentionPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Steps between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/toy"),
            checkpoint_every: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Seeds parameter initialisation and training.
    pub seed: u64,
    pub model: ModelConfig,
    pub norm: PixelNorm,
    pub data: DataConfig,
    pub memory: MemoryConfig,
    pub decoder: DecoderConfig,
    pub tracker: TrackerConfig,
    pub train: TrainConfig,
    pub output: OutputConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::new(NetworkConfig::toy()),
            norm: PixelNorm::default(),
            data: DataConfig::default(),
            memory: MemoryConfig::default(),
            decoder: DecoderConfig::default(),
            tracker: TrackerConfig::default(),
            train: TrainConfig::toy(),
            output: OutputConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.network.validate()?;
        self.memory.policy.validate()?;
        self.decoder.validate()?;
        self.train.validate()?;
        self.data.synthetic.validate()?;
        if !(self.tracker.threshold >= 0.0 && self.tracker.threshold <= 1.0) {
            return Err(Error::Config(format!(
                "tracker.threshold must lie in [0, 1], got {}",
                self.tracker.threshold
            )));
        }
        let shape_classes = crate::data::shapes::CLASS_NAMES.len();
        if self.data.format == DataFormat::Synthetic && self.model.network.num_classes != shape_classes {
            return Err(Error::Config(format!(
                "model.network.num_classes is {} but the synthetic data has {shape_classes} classes",
                self.model.network.num_classes
            )));
        }
        Ok(())
    }

    /// Applies `key=value` overrides, e.g. `train.steps=100` or
    /// `memory.policy="last2"`. Values are parsed as TOML and fall back to a
    /// plain string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not of the form key=value")))?;
            set_path(&mut root, key.trim(), parse_value(raw.trim()))?;
        }
        let cfg: Config = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces all seeds with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.synthetic.seed = seed;
        self
    }

    /// Applies [`SEED_ENV`] if it is set.
    pub fn with_env_seed(self) -> Result<Self> {
        match std::env::var(SEED_ENV) {
            Ok(s) => {
                let seed = s
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
                Ok(self.with_seed(seed))
            }
            Err(_) => Ok(self),
        }
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            memory_policy: self.memory.policy,
            decoder: self.decoder.clone(),
            tracker: self.tracker.clone(),
            record_weights: false,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key was just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key {key:?}")));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut table = root;
    for (depth, p) in parents.iter().enumerate() {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            Error::Config(format!("override key {key:?}: {} is not a section", parts[..=depth].join(".")))
        })?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Dotted paths at which two JSON documents differ.
pub fn differing_keys(a: &serde_json::Value, b: &serde_json::Value) -> Vec<String> {
    let mut out = Vec::new();
    diff_into(a, b, String::new(), &mut out);
    out
}

fn diff_into(a: &serde_json::Value, b: &serde_json::Value, prefix: String, out: &mut Vec<String>) {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => diff_into(u, v, path, out),
                    _ => out.push(path),
                }
            }
        }
        _ if a != b => out.push(if prefix.is_empty() { "<root>".into() } else { prefix }),
        _ => {}
    }
}
