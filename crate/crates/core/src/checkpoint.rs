//! Versioned training snapshots: parameters, optimizer moments and the
//! resolved run configuration.

use std::path::Path;

use serde_json::json;

use crate::archive::Archive;
use crate::config::{RunConfig, CONFIG_VERSION};
use crate::params::{Adam, ParamStore};
use crate::{Error, Result};

pub const CHECKPOINT_KIND: &str = "hgrl-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub store: ParamStore,
    pub optimizer: Option<Adam>,
    pub epoch: usize,
    pub step: u64,
    pub best_hm: Option<f64>,
}

impl Checkpoint {
    pub fn to_archive(&self) -> Result<Archive> {
        let names: Vec<&str> = self.store.iter().map(|(n, _)| n).collect();
        let frozen: Vec<bool> = self.store.ids().map(|id| self.store.is_frozen(id)).collect();
        let config = serde_json::to_value(&self.config).map_err(|e| Error::Archive(e.to_string()))?;
        let mut a = Archive::new(
            CHECKPOINT_KIND,
            CHECKPOINT_VERSION,
            json!({
                "config_version": self.config.config_version,
                "config": config,
                "params": names,
                "frozen": frozen,
                "epoch": self.epoch,
                "step": self.step,
                "best_hm": self.best_hm,
                "optimizer": self.optimizer.as_ref().map(|o| json!({
                    "config": o.config,
                    "step": o.step,
                })),
            }),
        );
        for (name, value) in self.store.iter() {
            a.push(format!("param/{name}"), value.clone());
        }
        if let Some(o) = &self.optimizer {
            for (i, (name, _)) in self.store.iter().enumerate() {
                a.push(format!("adam.m/{name}"), o.first[i].clone());
                a.push(format!("adam.v/{name}"), o.second[i].clone());
            }
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        a.expect_kind(CHECKPOINT_KIND, CHECKPOINT_VERSION)?;
        let bad = |m: &str| Error::Archive(format!("checkpoint {m}"));
        let version = a.meta["config_version"].as_u64().ok_or_else(|| bad("lacks config_version"))?;
        if version != CONFIG_VERSION as u64 {
            return Err(Error::Config(format!(
                "checkpoint was written with config version {version}, this build reads version {CONFIG_VERSION}"
            )));
        }
        let config: RunConfig =
            serde_json::from_value(a.meta["config"].clone()).map_err(|e| bad(&format!("config: {e}")))?;
        let names: Vec<String> =
            serde_json::from_value(a.meta["params"].clone()).map_err(|_| bad("lacks parameter names"))?;
        let frozen: Vec<bool> =
            serde_json::from_value(a.meta["frozen"].clone()).map_err(|_| bad("lacks frozen flags"))?;
        if frozen.len() != names.len() {
            return Err(bad("has mismatched frozen flags"));
        }
        let mut store = ParamStore::new();
        for (name, f) in names.iter().zip(frozen) {
            let id = store.add(name.clone(), a.tensor(&format!("param/{name}"))?.clone());
            store.set_frozen(id, f);
        }
        let optimizer = match a.meta.get("optimizer") {
            Some(o) if !o.is_null() => {
                let mut opt = Adam::new(
                    serde_json::from_value(o["config"].clone()).map_err(|_| bad("optimizer config"))?,
                    &store,
                );
                opt.step = o["step"].as_u64().ok_or_else(|| bad("optimizer step"))?;
                for (i, name) in names.iter().enumerate() {
                    opt.first[i] = a.tensor(&format!("adam.m/{name}"))?.clone();
                    opt.second[i] = a.tensor(&format!("adam.v/{name}"))?.clone();
                }
                Some(opt)
            }
            _ => None,
        };
        Ok(Self {
            config,
            store,
            optimizer,
            epoch: a.meta["epoch"].as_u64().ok_or_else(|| bad("lacks epoch"))? as usize,
            step: a.meta["step"].as_u64().ok_or_else(|| bad("lacks step"))?,
            best_hm: a.meta["best_hm"].as_f64(),
        })
    }

    /// Writes the checkpoint and returns its content hash.
    pub fn write(&self, path: &Path) -> Result<String> {
        self.to_archive()?.write(path)
    }

    /// Reads a checkpoint, verifying its content hash. Returns the hash too.
    pub fn read(path: &Path) -> Result<(Self, String)> {
        let a = Archive::read(path)?;
        let hash = a.content_hash();
        Ok((Self::from_archive(&a)?, hash))
    }
}

/// Copies every parameter of `from` into `into`, which must have exactly
/// the same names and shapes.
pub fn restore_params(into: &mut ParamStore, from: &ParamStore) -> Result<()> {
    if into.len() != from.len() {
        return Err(Error::Archive(format!(
            "checkpoint has {} parameters, model expects {}",
            from.len(),
            into.len()
        )));
    }
    for id in into.ids().collect::<Vec<_>>() {
        let name = into.name(id).to_string();
        let src = from
            .find(&name)
            .ok_or_else(|| Error::Archive(format!("checkpoint lacks parameter {name}")))?;
        let value = from.get(src);
        if value.dim() != into.get(id).dim() {
            return Err(Error::Archive(format!(
                "parameter {name} has shape {:?} in the checkpoint, {:?} in the model",
                value.dim(),
                into.get(id).dim()
            )));
        }
        *into.get_mut(id) = value.clone();
        into.set_frozen(id, from.is_frozen(src));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;
    use crate::params::AdamConfig;
    use crate::tape::Matrix;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new();
        store.add("a", Matrix::from_shape_vec((2, 2), vec![0.1, -2.5, 1e-300, 7.0]).unwrap());
        let b = store.add("b", Matrix::from_elem((1, 3), std::f64::consts::PI));
        store.set_frozen(b, true);
        let mut opt = Adam::new(AdamConfig::default(), &store);
        opt.step = 9;
        opt.first[0].fill(0.5);
        opt.second[1].fill(0.25);
        Checkpoint {
            config: RunConfig::for_profile(Profile::Synthetic),
            store,
            optimizer: Some(opt),
            epoch: 4,
            step: 9,
            best_hm: Some(0.5),
        }
    }

    #[test]
    fn round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.hgrl");
        let c = sample();
        let hash = c.write(&path).unwrap();
        let (back, h2) = Checkpoint::read(&path).unwrap();
        assert_eq!(hash, h2);
        assert_eq!(back.config, c.config);
        assert_eq!(back.store.checksum(), c.store.checksum());
        assert!(back.store.is_frozen(back.store.find("b").unwrap()));
        let (o1, o2) = (back.optimizer.as_ref().unwrap(), c.optimizer.as_ref().unwrap());
        assert_eq!((o1.step, &o1.first, &o1.second), (o2.step, &o2.first, &o2.second));
        assert_eq!(back.to_archive().unwrap().to_bytes(), c.to_archive().unwrap().to_bytes());
    }

    #[test]
    fn corrupted_file_fails_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.hgrl");
        sample().write(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 40] ^= 1;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(Checkpoint::read(&path), Err(Error::HashMismatch { .. })));
    }

    #[test]
    fn mismatched_config_version_fails() {
        let mut a = sample().to_archive().unwrap();
        a.meta["config_version"] = json!(CONFIG_VERSION + 1);
        assert!(matches!(Checkpoint::from_archive(&a), Err(Error::Config(_))));
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let c = sample();
        let mut other = ParamStore::new();
        other.add("a", Matrix::zeros((2, 2)));
        other.add("b", Matrix::zeros((1, 3)));
        restore_params(&mut other, &c.store).unwrap();
        assert_eq!(other.checksum(), c.store.checksum());
        let mut wrong = ParamStore::new();
        wrong.add("a", Matrix::zeros((2, 2)));
        wrong.add("b", Matrix::zeros((3, 1)));
        assert!(restore_params(&mut wrong, &c.store).is_err());
    }
}
