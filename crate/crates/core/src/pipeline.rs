//! End-to-end commands over a [`RunConfig`]: graph preparation, training,
//! evaluation and grid sweeps. Every command writes its outputs atomically,
//! so a failed command leaves no partial metric files behind.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::checkpoint::{restore_params, Checkpoint};
use crate::config::{BackendConfig, DatasetConfig, Override, RunConfig};
use crate::cooccur::{load_or_build_graph, CachedGraph, ResolveOptions};
use crate::data::{generate_synthetic, load_dataset, Dataset, GroundTruthGroups, Partition, World};
use crate::encoders::{
    encode_batch, CachedImageEncoder, ClipImageEncoder, ClipTextEncoder, ImageEncoderBackend,
    PrecomputedImageEncoder, TextEncoderBackend, ToyImageEncoder, ToyTextEncoder,
};
use crate::inference_eval::{evaluate, write_report, Backends, EvalCurve, MetricsReport};
use crate::model::Model;
use crate::params::Adam;
use crate::train::{train, EpochRecord, StepRecord, TrainData, TrainObserver, TrainOutcome, TrainState};
use crate::{Error, Result};

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const TRAIN_LOG: &str = "train_log.ndjson";
pub const MODEL_FILE: &str = "model.hgrl";
pub const LAST_CHECKPOINT: &str = "checkpoints/last.hgrl";
pub const SWEEP_CSV: &str = "sweep.csv";

/// Dataset, frozen backends and compatibility graph of a run.
pub struct Prepared {
    pub dataset: Dataset,
    pub image: Box<dyn ImageEncoderBackend>,
    pub text: Box<dyn TextEncoderBackend>,
    pub graph: CachedGraph,
    pub tau: f64,
    /// Planted groups, for synthetic datasets.
    pub groups: Option<GroundTruthGroups>,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `body` beside `path` and renames it into place.
pub fn write_atomic(path: &Path, body: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    let cache = config.graph_cache_dir();
    create_dir(&cache)?;
    let (dataset, vectors, options, features, groups) = match &config.dataset {
        DatasetConfig::Synthetic(spec) => {
            let ds = generate_synthetic(spec)?;
            // The graph is cached under the hash of the vector file, so the
            // generated vectors go through the same file path as real ones.
            let key = hex::encode(Sha256::digest(serde_json::to_vec(spec).expect("spec serializes")));
            let vectors = cache.join(format!("synthetic-{}.vec", &key[..16]));
            if !vectors.is_file() {
                ds.write_word_vectors(&vectors)?;
            }
            let groups = ds.groups.clone();
            (ds.dataset, vectors, ResolveOptions::default(), Some(ds.features), Some(groups))
        }
        DatasetConfig::Directory {
            root,
            word_vectors,
            fallback_seed,
        } => {
            let options = ResolveOptions {
                fallback_seed: *fallback_seed,
            };
            (load_dataset(root, config.world)?, word_vectors.clone(), options, None, None)
        }
    };
    let dataset = dataset.with_world(config.world);
    let graph = load_or_build_graph(&cache, &vectors, &dataset.vocab, config.model.zeta, options)?;
    let (image, text): (Box<dyn ImageEncoderBackend>, Box<dyn TextEncoderBackend>) = match &config.backend {
        BackendConfig::Toy(spec) => {
            let image = match features {
                Some(f) => ToyImageEncoder::with_features(*spec, f)?,
                None => ToyImageEncoder::new(*spec)?,
            };
            (Box::new(image), Box::new(ToyTextEncoder::new(*spec)?))
        }
        BackendConfig::Pretrained {
            checkpoint,
            image_root,
            features: precomputed,
        } => {
            let text = ClipTextEncoder::load(checkpoint)?;
            let image: Box<dyn ImageEncoderBackend> = match (precomputed, image_root) {
                (Some(path), _) => Box::new(PrecomputedImageEncoder::load(path)?),
                (None, Some(root)) => Box::new(CachedImageEncoder::new(ClipImageEncoder::load(checkpoint, root)?)),
                (None, None) => return Err(Error::Config("pretrained backend needs image_root or features".into())),
            };
            (image, Box::new(text))
        }
    };
    let tau = config.tau.resolve(text.temperature());
    Ok(Prepared {
        dataset,
        image,
        text,
        graph,
        tau,
        groups,
    })
}

/// Builds (or reuses) the compatibility graph cache.
pub fn cmd_prepare_graph(config: &RunConfig) -> Result<CachedGraph> {
    let p = prepare(config)?;
    log::info!(
        "graph {} ({} states, {} objects, cache {})",
        p.graph.path.display(),
        p.graph.graph.states.nrows(),
        p.graph.graph.objects.nrows(),
        if p.graph.cache_hit { "hit" } else { "miss" }
    );
    Ok(p.graph)
}

/// Fresh model for a prepared run.
pub fn build_model(config: &RunConfig, p: &Prepared) -> Result<Model> {
    Model::new(
        config.model.clone(),
        &p.dataset.vocab,
        p.text.as_ref(),
        p.image.embed_dim(),
        p.tau,
        config.seed,
    )
}

/// The config as stored in checkpoints: locations are dropped so that the
/// same run written to two directories hashes identically.
fn portable(config: &RunConfig) -> RunConfig {
    RunConfig {
        output_dir: PathBuf::from("."),
        graph_cache: None,
        ..config.clone()
    }
}

struct RunLog<'a> {
    config: RunConfig,
    log: fs::File,
    last: PathBuf,
    path: &'a Path,
    best_hm: Option<f64>,
}

impl RunLog<'_> {
    fn line(&mut self, event: &str, body: impl Serialize) -> Result<()> {
        let mut v = serde_json::to_value(body).map_err(|e| Error::Eval(e.to_string()))?;
        v.as_object_mut().expect("records are objects").insert("event".into(), json!(event));
        writeln!(self.log, "{v}").map_err(|e| Error::io(self.path, e))
    }
}

impl TrainObserver for RunLog<'_> {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        self.line("step", record)
    }

    fn on_epoch(&mut self, record: &EpochRecord, model: &Model, optimizer: &Adam) -> Result<()> {
        self.line("epoch", record)?;
        if record.best {
            self.best_hm = record.val.as_ref().map(|v| v.hm);
        }
        Checkpoint {
            config: self.config.clone(),
            store: model.store.clone(),
            optimizer: Some(optimizer.clone()),
            epoch: record.epoch + 1,
            step: record.step,
            best_hm: self.best_hm,
        }
        .write(&self.last)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub checkpoint_hash: String,
    pub outcome: TrainOutcome,
    pub model: Model,
}

/// Trains a model and writes, under `output_dir`: the resolved config, the
/// step/epoch log, a checkpoint after every epoch and the final model.
pub fn cmd_train(config: &RunConfig) -> Result<TrainSummary> {
    config.validate()?;
    let out = &config.output_dir;
    create_dir(out)?;
    write_atomic(&out.join(RESOLVED_CONFIG), config.to_toml()?.as_bytes())?;
    let p = prepare(config)?;
    let d = &p.dataset;
    let image_sum = p.image.checksum();
    let text_sum = p.text.checksum();
    let train_features = encode_batch(p.image.as_ref(), &d.train)?;
    let val_features = encode_batch(p.image.as_ref(), &d.val)?;
    let val_split = d.split_for(Partition::Val, World::Closed);
    let mut model = build_model(config, &p)?;
    let pairs: Vec<_> = d.train.iter().map(|s| s.pair).collect();
    model.init_routers(&train_features, &pairs, &p.graph.graph)?;
    let data = TrainData {
        train_features: &train_features,
        train: &d.train,
        val_features: &val_features,
        val: &d.val,
        val_split: &val_split,
        graph: &p.graph.graph,
    };
    let log_path = out.join(TRAIN_LOG);
    let mut log = RunLog {
        config: portable(config),
        log: fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?,
        last: out.join(LAST_CHECKPOINT),
        path: &log_path,
        best_hm: None,
    };
    create_dir(&out.join("checkpoints"))?;
    let mut state = TrainState::new(&model, &config.train);
    let outcome = match train(&mut model, p.text.as_ref(), &data, &config.train, config.seed, &mut state, &mut log) {
        Ok(o) => o,
        Err(e) => {
            if log.last.is_file() {
                log::error!("training aborted; last good checkpoint kept at {}", log.last.display());
            }
            return Err(e);
        }
    };
    if p.image.checksum() != image_sum || p.text.checksum() != text_sum {
        return Err(Error::Contract("encoder weights changed during training".into()));
    }
    let path = out.join(MODEL_FILE);
    let hash = Checkpoint {
        config: portable(config),
        store: model.store.clone(),
        optimizer: Some(state.optimizer.clone()),
        epoch: state.epoch,
        step: state.optimizer.step,
        best_hm: state.best_hm.is_finite().then_some(state.best_hm),
    }
    .write(&path)?;
    log::info!("wrote {} ({hash})", path.display());
    Ok(TrainSummary {
        checkpoint: path,
        checkpoint_hash: hash,
        outcome,
        model,
    })
}

/// Loads a checkpoint into a model built from its own (optionally
/// overridden) config.
pub fn load_model(checkpoint: &Path, overrides: &[Override]) -> Result<(RunConfig, Prepared, Model, String)> {
    let (ckpt, hash) = Checkpoint::read(checkpoint)?;
    let mut config = ckpt.config.with_overrides(overrides)?;
    if config.output_dir == Path::new(".") && config.graph_cache.is_none() {
        // Share the graph cache of the run that wrote the checkpoint.
        if let Some(dir) = checkpoint.parent() {
            config.graph_cache = Some(dir.join("cache"));
        }
    }
    let p = prepare(&config)?;
    let mut model = build_model(&config, &p)?;
    restore_params(&mut model.store, &ckpt.store)?;
    Ok((config, p, model, hash))
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub curve: EvalCurve,
    pub json: PathBuf,
    pub csv: PathBuf,
}

/// Evaluates `checkpoint` on `partition` in `world`; writes
/// `metrics_<world>.json` and `metrics_<world>_curve.csv` into `out`.
pub fn cmd_evaluate(
    checkpoint: &Path,
    overrides: &[Override],
    world: World,
    partition: Partition,
    out: &Path,
) -> Result<Evaluation> {
    let (config, p, model, hash) = load_model(checkpoint, overrides)?;
    let backends = Backends {
        image: p.image.as_ref(),
        text: p.text.as_ref(),
    };
    let (report, curve) = evaluate(&model, &backends, &p.dataset, partition, world, config.eval_grid, &hash)?;
    let stem = format!("metrics_{world}");
    write_report(out, &stem, &report, &curve)?;
    log::info!(
        "{world} world: S {:.4} U {:.4} HM {:.4} AUC {:.4}",
        report.seen,
        report.unseen,
        report.hm,
        report.auc
    );
    Ok(Evaluation {
        report,
        curve,
        json: out.join(format!("{stem}.json")),
        csv: out.join(format!("{stem}_curve.csv")),
    })
}

/// Axes of a hyperparameter sweep; an empty axis keeps the config value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub k_s: Vec<usize>,
    pub k_o: Vec<usize>,
    pub lambda: Vec<f64>,
    pub top_k: Vec<usize>,
    /// Seeds per cell; empty means the config seed only.
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k_s: usize,
    pub k_o: usize,
    pub lambda: f64,
    pub top_k: usize,
    pub seed: u64,
    #[serde(rename = "S")]
    pub seen: f64,
    #[serde(rename = "U")]
    pub unseen: f64,
    #[serde(rename = "HM")]
    pub hm: f64,
    #[serde(rename = "AUC")]
    pub auc: f64,
    pub checkpoint_hash: String,
}

fn axis<T: Copy>(values: &[T], default: T) -> Vec<T> {
    if values.is_empty() {
        vec![default]
    } else {
        values.to_vec()
    }
}

/// Cells of the sweep in row order.
pub fn sweep_cells(base: &RunConfig, grid: &SweepGrid) -> Vec<RunConfig> {
    let mut cells = Vec::new();
    for &k_s in &axis(&grid.k_s, base.model.k_s) {
        for &k_o in &axis(&grid.k_o, base.model.k_o) {
            for &lambda in &axis(&grid.lambda, base.train.lambda) {
                for &top_k in &axis(&grid.top_k, base.model.top_k) {
                    for &seed in &axis(&grid.seeds, base.seed) {
                        let mut c = base.clone();
                        c.model.k_s = k_s;
                        c.model.k_o = k_o;
                        c.train.lambda = lambda;
                        c.model.top_k = top_k;
                        c.seed = seed;
                        if let DatasetConfig::Synthetic(spec) = &mut c.dataset {
                            spec.seed = seed;
                        }
                        c.output_dir = base
                            .output_dir
                            .join("sweep")
                            .join(format!("ks{k_s}_ko{k_o}_l{lambda}_k{top_k}_s{seed}"));
                        c.graph_cache = Some(base.graph_cache_dir());
                        cells.push(c);
                    }
                }
            }
        }
    }
    cells
}

/// Trains and evaluates every grid cell, then writes `sweep.csv` into the
/// base output directory.
pub fn cmd_sweep(base: &RunConfig, grid: &SweepGrid) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for cell in sweep_cells(base, grid) {
        log::info!("sweep cell {}", cell.output_dir.display());
        let trained = cmd_train(&cell)?;
        let eval = cmd_evaluate(&trained.checkpoint, &[], cell.world, Partition::Test, &cell.output_dir)?;
        rows.push(SweepRow {
            k_s: cell.model.k_s,
            k_o: cell.model.k_o,
            lambda: cell.train.lambda,
            top_k: cell.model.top_k,
            seed: cell.seed,
            seen: eval.report.seen,
            unseen: eval.report.unseen,
            hm: eval.report.hm,
            auc: eval.report.auc,
            checkpoint_hash: eval.report.checkpoint_hash,
        });
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| Error::Eval(e.to_string()))?;
    }
    let body = w.into_inner().map_err(|e| Error::Eval(e.to_string()))?;
    write_atomic(&base.output_dir.join(SWEEP_CSV), &body)?;
    Ok(rows)
}

/// Reads `sweep.csv` back.
pub fn read_sweep(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Eval(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Eval(format!("{}: {e}", path.display())))
}
