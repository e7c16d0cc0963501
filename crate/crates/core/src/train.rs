//! Mini-batch training with validation-based early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cooccur::CompatibilityGraph;
use crate::data::{CompositionSplit, Pair, Sample};
use crate::encoders::TextEncoderBackend;
use crate::inference_eval::{metrics_from_scores, MetricsReport, Scorer};
use crate::model::{Model, TrainBatch};
use crate::objectives::LossBreakdown;
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::tape::{Matrix, Tape};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub lambda: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without a validation HM improvement before stopping; 0 disables.
    pub patience: usize,
    /// Bias grid used for validation sweeps.
    pub eval_grid: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            lr: 5e-5,
            weight_decay: 0.0,
            batch_size: 32,
            epochs: 20,
            patience: 5,
            eval_grid: crate::inference_eval::DEFAULT_GRID,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        if self.eval_grid < 2 {
            return bad("eval_grid must be at least 2".into());
        }
        Ok(())
    }
}

/// Precomputed features for the training and validation partitions.
pub struct TrainData<'a> {
    pub train_features: &'a Matrix,
    pub train: &'a [Sample],
    pub val_features: &'a Matrix,
    pub val: &'a [Sample],
    pub val_split: &'a CompositionSplit,
    pub graph: &'a CompatibilityGraph,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub mean_loss: f64,
    pub val: Option<MetricsReport>,
    pub best: bool,
}

/// Observer for progress; every hook may abort training with an error.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }
    fn on_epoch(&mut self, _record: &EpochRecord, _model: &Model, _optimizer: &Adam) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Training state that can be resumed or checkpointed.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub optimizer: Adam,
    pub epoch: usize,
    pub best_hm: f64,
    pub best_store: Option<ParamStore>,
    pub stale: usize,
}

impl TrainState {
    pub fn new(model: &Model, opts: &TrainOptions) -> Self {
        let config = AdamConfig {
            lr: opts.lr,
            weight_decay: opts.weight_decay,
            ..AdamConfig::default()
        };
        Self {
            optimizer: Adam::new(config, &model.store),
            epoch: 0,
            best_hm: f64::NEG_INFINITY,
            best_store: None,
            stale: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

/// Batch order of one epoch, reproducible from `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// One optimizer step on the given batch; returns the loss breakdown.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut Adam,
    text: &dyn TextEncoderBackend,
    batch: &TrainBatch,
    lambda: f64,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let (total, breakdown, _) = model.loss(&mut tape, &bound, text, batch, lambda)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite { what: "training loss", sample: 0 });
    }
    let grads = bound.gradients(&model.store, &tape.backward(total));
    if let Some(i) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
        log::error!("non-finite gradient for {}", model.store.name(model.store.ids().nth(i).unwrap()));
        return Err(Error::NonFinite { what: "gradient", sample: 0 });
    }
    optimizer.update(&mut model.store, &grads);
    Ok(breakdown)
}

/// Validation metrics for the current parameters.
pub fn validate(model: &Model, text: &dyn TextEncoderBackend, data: &TrainData, grid: usize) -> Result<MetricsReport> {
    let scorer = Scorer::new(model, text, data.val_split.target_pairs())?;
    let scores = scorer.score_all(data.val_features)?;
    Ok(metrics_from_scores(&scores, data.val, data.val_split, grid, "")?.0)
}

/// Trains `model` in place. On return the parameters are those of the best
/// validation epoch, or the last epoch when validation is unavailable.
pub fn train(
    model: &mut Model,
    text: &dyn TextEncoderBackend,
    data: &TrainData,
    opts: &TrainOptions,
    seed: u64,
    state: &mut TrainState,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    opts.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("training partition is empty".into()));
    }
    if data.train_features.nrows() != data.train.len() {
        return Err(Error::Shape("one feature row per training sample required".into()));
    }
    let seen = data.val_split.seen_pairs();
    let has_val = data.val.iter().any(|s| !data.val_split.is_seen(s.pair));
    if !has_val {
        log::warn!("validation has no unseen compositions; early stopping disabled");
    }
    let mut outcome = TrainOutcome {
        epochs: Vec::new(),
        best_epoch: None,
        stopped_early: false,
    };
    while state.epoch < opts.epochs {
        let epoch = state.epoch;
        let order = epoch_order(data.train.len(), seed, epoch);
        let mut sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(opts.batch_size) {
            let features = Matrix::from_shape_fn((chunk.len(), data.train_features.ncols()), |(i, j)| {
                data.train_features[[chunk[i], j]]
            });
            let pairs: Vec<Pair> = chunk.iter().map(|&i| data.train[i].pair).collect();
            let batch = TrainBatch {
                features: &features,
                pairs: &pairs,
                seen: &seen,
                graph: data.graph,
            };
            let loss = train_step(model, &mut state.optimizer, text, &batch, opts.lambda)?;
            sum += loss.total;
            steps += 1;
            observer.on_step(&StepRecord {
                epoch,
                step: state.optimizer.step,
                loss,
            })?;
        }
        state.epoch += 1;
        let val = if has_val {
            Some(validate(model, text, data, opts.eval_grid)?)
        } else {
            None
        };
        let hm = val.as_ref().map_or(f64::NEG_INFINITY, |v| v.hm);
        let best = has_val && hm > state.best_hm;
        if best {
            state.best_hm = hm;
            state.best_store = Some(model.store.clone());
            state.stale = 0;
            outcome.best_epoch = Some(epoch);
        } else {
            state.stale += 1;
        }
        let record = EpochRecord {
            epoch,
            step: state.optimizer.step,
            mean_loss: sum / steps as f64,
            val,
            best,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} val HM {}",
            record.mean_loss,
            record.val.as_ref().map_or("-".into(), |v| format!("{:.4}", v.hm))
        );
        observer.on_epoch(&record, model, &state.optimizer)?;
        outcome.epochs.push(record);
        if has_val && opts.patience > 0 && state.stale >= opts.patience {
            outcome.stopped_early = true;
            break;
        }
    }
    if let Some(best) = &state.best_store {
        model.store = best.clone();
    }
    Ok(outcome)
}
