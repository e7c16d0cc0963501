//! Declarative run configuration with per-dataset profiles.
//!
//! Precedence, lowest first: profile defaults, the config file, `--set`
//! overrides, then dedicated command-line flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{SyntheticSpec, World};
use crate::encoders::ToyBackendSpec;
use crate::model::ModelConfig;
use crate::train::TrainOptions;
use crate::inference_eval::DEFAULT_GRID;
use crate::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

fn default_grid() -> usize {
    DEFAULT_GRID
}
/// Temperature used when the backend has none of its own.
pub const FALLBACK_TAU: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    UtZappos,
    /// MIT-States, C-GQA and anything else loaded from disk.
    Default,
    Synthetic,
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ut-zappos" => Ok(Profile::UtZappos),
            "default" => Ok(Profile::Default),
            "synthetic" => Ok(Profile::Synthetic),
            _ => Err(Error::Config(format!("unknown profile {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic(SyntheticSpec),
    Directory {
        root: PathBuf,
        /// Plain-text word vectors ("token f1 ... fd" per line).
        word_vectors: PathBuf,
        /// Seed for stand-in vectors of unknown tokens; absent makes them an error.
        #[serde(default)]
        fallback_seed: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Toy(ToyBackendSpec),
    Pretrained {
        /// CLIP `.safetensors` checkpoint with `config.json` and
        /// `tokenizer.json` beside it.
        checkpoint: PathBuf,
        /// Image directory for the vision tower.
        #[serde(default)]
        image_root: Option<PathBuf>,
        /// Precomputed image features; used instead of the vision tower.
        #[serde(default)]
        features: Option<PathBuf>,
    },
}

/// Either `"backend"` (the backend's own temperature, else
/// [`FALLBACK_TAU`]) or a fixed positive value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TauPolicy {
    Fixed(f64),
    Named(TauSource),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauSource {
    Backend,
}

impl TauPolicy {
    pub fn resolve(self, backend: Option<f64>) -> f64 {
        match self {
            TauPolicy::Fixed(t) => t,
            TauPolicy::Named(TauSource::Backend) => backend.unwrap_or(FALLBACK_TAU),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub config_version: u32,
    pub profile: Profile,
    pub dataset: DatasetConfig,
    pub backend: BackendConfig,
    pub model: ModelConfig,
    pub train: TrainOptions,
    pub tau: TauPolicy,
    pub seed: u64,
    /// Recorded for reproducibility; every code path is single-threaded and
    /// seeded, so runs are deterministic either way.
    pub deterministic: bool,
    pub world: World,
    pub output_dir: PathBuf,
    /// Bias grid of the evaluate command; validation uses `train.eval_grid`.
    #[serde(default = "default_grid")]
    pub eval_grid: usize,
    /// Encoders cannot be fine-tuned here; `false` is rejected.
    pub freeze_encoders: bool,
    /// Where compatibility graphs are cached; defaults to `<output_dir>/cache`.
    #[serde(default)]
    pub graph_cache: Option<PathBuf>,
}

impl RunConfig {
    /// Defaults for a profile. Dataset and backend are placeholders that a
    /// config file is expected to replace, except for the synthetic profile.
    pub fn for_profile(profile: Profile) -> Self {
        let mut c = Self {
            config_version: CONFIG_VERSION,
            profile,
            dataset: DatasetConfig::Synthetic(SyntheticSpec::default()),
            backend: BackendConfig::Toy(ToyBackendSpec::default()),
            model: ModelConfig::default(),
            train: TrainOptions::default(),
            tau: TauPolicy::Named(TauSource::Backend),
            seed: 0,
            deterministic: true,
            world: World::Closed,
            output_dir: PathBuf::from("runs/hgrl"),
            eval_grid: DEFAULT_GRID,
            freeze_encoders: true,
            graph_cache: None,
        };
        match profile {
            Profile::UtZappos => {
                c.model.k_s = 3;
                c.model.k_o = 3;
                c.train.lambda = 1.0;
                c.train.lr = 5e-4;
                c.train.batch_size = 180;
            }
            Profile::Default => {
                c.model.k_s = 5;
                c.model.k_o = 5;
                c.train.lambda = 0.1;
                c.train.lr = 5e-5;
                c.train.batch_size = 32;
            }
            Profile::Synthetic => {
                c.model.k_s = 3;
                c.model.k_o = 3;
                c.model.detach_soft_labels = true;
                c.train.lambda = 1.0;
                c.train.lr = 5e-3;
                c.train.batch_size = 64;
                c.train.epochs = 150;
                c.train.patience = 0;
                c.train.eval_grid = 200;
                c.tau = TauPolicy::Fixed(0.1);
            }
        }
        c
    }

    pub fn graph_cache_dir(&self) -> PathBuf {
        self.graph_cache.clone().unwrap_or_else(|| self.output_dir.join("cache"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.config_version
            )));
        }
        if !self.freeze_encoders {
            return Err(Error::Config(
                "freeze_encoders = false is not supported: encoder backends are frozen".into(),
            ));
        }
        if let TauPolicy::Fixed(t) = self.tau {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::Config(format!("tau must be positive, got {t}")));
            }
        }
        let m = &self.model;
        if m.k_s == 0 || m.k_o == 0 || m.top_k == 0 {
            return Err(Error::Config("k_s, k_o and top_k must be at least 1".into()));
        }
        if let BackendConfig::Pretrained { image_root, features, .. } = &self.backend {
            if image_root.is_none() && features.is_none() {
                return Err(Error::Config("pretrained backend needs image_root or features".into()));
            }
        }
        if self.eval_grid < 2 {
            return Err(Error::Config("eval_grid must be at least 2".into()));
        }
        self.train.validate()
    }

    /// This config with `overrides` applied on top.
    pub fn with_overrides(&self, overrides: &[Override]) -> Result<Self> {
        let mut doc = toml::Table::try_from(self).map_err(|e| Error::Config(format!("cannot render config: {e}")))?;
        for o in overrides {
            set_path(&mut doc, &o.path, o.value.clone())?;
        }
        let config: RunConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Resolved form, suitable for echoing and for exact reproduction.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("cannot render config: {e}")))
    }
}

/// One `key.path=value` override. The value is read as a TOML literal and
/// falls back to a plain string.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: toml::Value,
}

impl FromStr for Override {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (key, raw) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
        let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
        if path.iter().any(String::is_empty) {
            return Err(Error::Config(format!("bad override key {key:?}")));
        }
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        Ok(Self { path, value })
    }
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("nonempty");
    let mut t = table;
    for p in parents {
        t = t
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{p:?} is not a table")))?;
    }
    t.insert(last.clone(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                // A new backend or dataset kind replaces the section wholesale.
                if o.get("kind").is_some_and(|kind| b.get("kind") != Some(kind)) {
                    *b = o;
                } else {
                    merge(b, o);
                }
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn infer_profile(doc: &toml::Table) -> Profile {
    let dataset = doc.get("dataset").and_then(|d| d.as_table());
    match dataset.and_then(|d| d.get("kind")).and_then(|k| k.as_str()) {
        Some("directory") => {
            let root = dataset.and_then(|d| d.get("root")).and_then(|r| r.as_str()).unwrap_or("");
            let lower = root.to_ascii_lowercase();
            if lower.contains("zappos") || lower.contains("ut-zap") {
                Profile::UtZappos
            } else {
                Profile::Default
            }
        }
        _ => Profile::Synthetic,
    }
}

/// Builds a config from an optional file body plus overrides.
pub fn resolve(file: Option<&str>, overrides: &[Override]) -> Result<RunConfig> {
    let mut doc: toml::Table = match file {
        Some(body) => toml::from_str(body).map_err(|e| Error::Config(format!("config file: {e}")))?,
        None => toml::Table::new(),
    };
    for o in overrides {
        set_path(&mut doc, &o.path, o.value.clone())?;
    }
    let profile = match doc.get("profile") {
        Some(p) => p
            .as_str()
            .ok_or_else(|| Error::Config("profile must be a string".into()))?
            .parse()?,
        None => infer_profile(&doc),
    };
    let mut base = toml::Table::try_from(RunConfig::for_profile(profile))
        .map_err(|e| Error::Config(format!("profile defaults: {e}")))?;
    merge(&mut base, doc);
    let config: RunConfig = base
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load(path: Option<&Path>, overrides: &[Override]) -> Result<RunConfig> {
    let body = match path {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    resolve(body.as_deref(), overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(s: &str) -> Override {
        s.parse().unwrap()
    }

    #[test]
    fn ut_zappos_defaults() {
        let c = resolve(Some("[dataset]\nkind = \"directory\"\nroot = \"data/ut-zap50k\"\nword_vectors = \"glove.txt\"\n"), &[]).unwrap();
        assert_eq!(c.profile, Profile::UtZappos);
        assert_eq!((c.model.k_s, c.model.k_o), (3, 3));
        assert_eq!(c.train.lambda, 1.0);
        assert_eq!(c.train.lr, 5e-4);
        assert_eq!(c.train.batch_size, 180);
        assert_eq!(c.model.zeta, 0.5);
    }

    #[test]
    fn other_datasets_default() {
        let c = resolve(Some("[dataset]\nkind = \"directory\"\nroot = \"data/mit-states\"\nword_vectors = \"glove.txt\"\n"), &[]).unwrap();
        assert_eq!(c.profile, Profile::Default);
        assert_eq!((c.model.k_s, c.model.k_o), (5, 5));
        assert_eq!(c.train.lambda, 0.1);
        assert_eq!(c.train.lr, 5e-5);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.train.epochs, 20);
    }

    #[test]
    fn overrides_take_precedence_over_file() {
        let file = "seed = 3\n[model]\nk_s = 4\n";
        let c = resolve(Some(file), &[ov("model.k_s=7"), ov("train.lambda=0.25")]).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.model.k_s, 7);
        assert_eq!(c.train.lambda, 0.25);
        // Profile defaults survive elsewhere.
        assert_eq!(c.model.k_o, 3);
    }

    #[test]
    fn string_overrides_and_kinds() {
        let c = resolve(None, &[ov("world=open"), ov("profile=default"), ov("tau=0.05")]).unwrap();
        assert_eq!(c.world, World::Open);
        assert_eq!(c.tau, TauPolicy::Fixed(0.05));
        let c = resolve(None, &[ov("backend.kind=toy"), ov("backend.d=8"), ov("dataset.dim=8")]).unwrap();
        assert_eq!(c.backend, BackendConfig::Toy(ToyBackendSpec { d: 8, seed: 0 }));
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(resolve(None, &[ov("freeze_encoders=false")]).is_err());
        assert!(resolve(None, &[ov("config_version=2")]).is_err());
        assert!(resolve(None, &[ov("unknown_key=1")]).is_err());
        assert!(resolve(None, &[ov("train.lr=-1")]).is_err());
        assert!(resolve(None, &[ov("profile=nope")]).is_err());
        assert!("novalue".parse::<Override>().is_err());
    }

    #[test]
    fn resolved_echo_round_trips() {
        for p in [Profile::UtZappos, Profile::Default, Profile::Synthetic] {
            let c = RunConfig::for_profile(p);
            let echo = c.to_toml().unwrap();
            assert_eq!(resolve(Some(&echo), &[]).unwrap(), c);
        }
    }

    #[test]
    fn tau_policy() {
        assert_eq!(TauPolicy::Named(TauSource::Backend).resolve(None), FALLBACK_TAU);
        assert_eq!(TauPolicy::Named(TauSource::Backend).resolve(Some(0.02)), 0.02);
        assert_eq!(TauPolicy::Fixed(0.3).resolve(Some(0.02)), 0.3);
    }
}
