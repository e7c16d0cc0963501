//! One-call train-and-evaluate runs on synthetic benchmarks.

use serde::{Deserialize, Serialize};

use crate::config::{DatasetConfig, RunConfig};
use crate::cooccur::{build_compatibility_graph, ResolveOptions, WordVectorTable};
use crate::data::{generate_synthetic, Partition, SyntheticDataset, SyntheticSpec, World};
use crate::encoders::{encode_batch, ToyBackendSpec, ToyImageEncoder, ToyTextEncoder};
use crate::inference_eval::{evaluate, router_purity, Backends, MetricsReport, RouterPurity};
use crate::model::{Model, ModelConfig};
use crate::train::{train, TrainData, TrainObserver, TrainOptions, TrainOutcome, TrainState};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRun {
    pub data: SyntheticSpec,
    pub model: ModelConfig,
    pub train: TrainOptions,
    pub tau: f64,
    /// Seeds parameter init and batch order; the text backend uses it too.
    pub seed: u64,
    /// Bias grid of the final test evaluation.
    pub eval_grid: usize,
}

impl SyntheticRun {
    /// The run a synthetic [`RunConfig`] describes. The dataset seed follows
    /// the run seed so that paired comparisons vary both together.
    pub fn from_config(config: &RunConfig) -> Result<Self> {
        let DatasetConfig::Synthetic(spec) = &config.dataset else {
            return Err(Error::Config("synthetic runs need a synthetic dataset".into()));
        };
        Ok(Self {
            data: SyntheticSpec {
                seed: config.seed,
                ..spec.clone()
            },
            model: config.model.clone(),
            train: config.train,
            tau: config.tau.resolve(None),
            seed: config.seed,
            eval_grid: config.eval_grid,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticResult {
    pub test: MetricsReport,
    pub purity: RouterPurity,
    pub outcome: TrainOutcome,
    pub model: Model,
}

/// Toy backends matching a synthetic dataset.
pub fn synthetic_backends(ds: &SyntheticDataset, seed: u64) -> Result<(ToyImageEncoder, ToyTextEncoder)> {
    let spec = ToyBackendSpec { d: ds.spec.dim, seed };
    Ok((
        ToyImageEncoder::with_features(spec, ds.features.clone())?,
        ToyTextEncoder::new(spec)?,
    ))
}

pub fn run_synthetic(run: &SyntheticRun, observer: &mut dyn TrainObserver) -> Result<SyntheticResult> {
    let ds = generate_synthetic(&run.data)?;
    let (image, text) = synthetic_backends(&ds, run.seed)?;
    let table = WordVectorTable::from_entries(&ds.word_vectors, &ds.dataset.vocab, ResolveOptions::default())?;
    let graph = build_compatibility_graph(&table, &ds.dataset.vocab, run.model.zeta)?;
    let d = &ds.dataset;
    let train_features = encode_batch(&image, &d.train)?;
    let val_features = encode_batch(&image, &d.val)?;
    let val_split = d.split_for(Partition::Val, World::Closed);
    let mut model = Model::new(run.model.clone(), &d.vocab, &text, run.data.dim, run.tau, run.seed)?;
    let data = TrainData {
        train_features: &train_features,
        train: &d.train,
        val_features: &val_features,
        val: &d.val,
        val_split: &val_split,
        graph: &graph,
    };
    model.init_routers(&train_features, &d.train.iter().map(|s| s.pair).collect::<Vec<_>>(), &graph)?;
    let mut state = TrainState::new(&model, &run.train);
    let outcome = train(&mut model, &text, &data, &run.train, run.seed, &mut state, observer)?;
    let backends = Backends { image: &image, text: &text };
    let (test, _) = evaluate(&model, &backends, d, Partition::Test, World::Closed, run.eval_grid, "")?;
    let test_features = encode_batch(&image, &d.test)?;
    let pairs: Vec<_> = d.test.iter().map(|s| s.pair).collect();
    let purity = router_purity(&model, &test_features, &pairs, &ds.groups.object_groups, &ds.groups.state_groups)?;
    Ok(SyntheticResult {
        test,
        purity,
        outcome,
        model,
    })
}
