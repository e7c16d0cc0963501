//! Fused prediction, calibration-bias sweep and seen/unseen metrics.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Branch, CompositionSplit, Dataset, Pair, Partition, Sample, World};
use crate::encoders::{encode_batch, ImageEncoderBackend, TextEncoderBackend};
use crate::model::Model;
use crate::tape::{softmax_rows, Matrix, Tape};
use crate::{Error, Result};

pub const DEFAULT_GRID: usize = 1000;
/// Added to the largest absolute fused score to get the sweep half-width.
pub const GRID_MARGIN: f64 = 1.0;
const SCORE_CHUNK: usize = 256;

/// Per-branch probabilities and their fusion over a target space.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTensor {
    pub p_base: Matrix,
    pub p_pair: Matrix,
    pub p_state: Matrix,
    pub p_object: Matrix,
    pub fused: Matrix,
    pub pairs: Vec<Pair>,
}

/// Softmax over all `n x groups` columns (class-major), then the mass of
/// each class summed over its groups.
pub fn group_marginals(logits: &Matrix, n: usize, groups: usize) -> Result<Matrix> {
    if logits.ncols() != n * groups {
        return Err(Error::Shape(format!(
            "{} logits for {n} classes x {groups} groups",
            logits.ncols()
        )));
    }
    let p = softmax_rows(logits);
    Ok(Matrix::from_shape_fn((p.nrows(), n), |(b, i)| {
        (0..groups).map(|j| p[[b, i * groups + j]]).sum()
    }))
}

impl ScoreTensor {
    /// `fused[b][(s, o)] = p_base + p_pair + p_state[b][s] · p_object[b][o]`.
    pub fn fuse(
        p_base: Matrix,
        p_pair: Matrix,
        p_state: Matrix,
        p_object: Matrix,
        pairs: Vec<Pair>,
    ) -> Result<Self> {
        let b = p_base.nrows();
        let c = pairs.len();
        if p_base.dim() != (b, c) || p_pair.dim() != (b, c) || p_state.nrows() != b || p_object.nrows() != b {
            return Err(Error::Shape("score tensors disagree on batch or target size".into()));
        }
        if let Some(p) = pairs
            .iter()
            .find(|p| p.state >= p_state.ncols() || p.object >= p_object.ncols())
        {
            return Err(Error::Contract(format!(
                "target composition ({}, {}) has no branch representation",
                p.state, p.object
            )));
        }
        let fused = Matrix::from_shape_fn((b, c), |(i, k)| {
            let p = pairs[k];
            p_base[[i, k]] + p_pair[[i, k]] + p_state[[i, p.state]] * p_object[[i, p.object]]
        });
        Ok(Self {
            p_base,
            p_pair,
            p_state,
            p_object,
            fused,
            pairs,
        })
    }

    /// Row-wise argmax of the fused scores; ties go to the lowest column.
    pub fn predictions(&self) -> Vec<Pair> {
        self.fused
            .rows()
            .into_iter()
            .map(|r| self.pairs[argmax(r.iter().copied())])
            .collect()
    }
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 || i == 0 {
            best = (i, v);
        }
    }
    best.0
}

/// Text representations for a fixed target space, reused across batches.
pub struct Scorer<'a> {
    model: &'a Model,
    pairs: Vec<Pair>,
    state_reps: Matrix,
    object_reps: Matrix,
    pair_reps: Matrix,
    state_groups: usize,
    object_groups: usize,
}

impl<'a> Scorer<'a> {
    pub fn new(model: &'a Model, text: &'a dyn TextEncoderBackend, pairs: Vec<Pair>) -> Result<Self> {
        let n_s = model.prompts.n_s;
        let n_o = model.prompts.n_o;
        if let Some(p) = pairs.iter().find(|p| p.state >= n_s || p.object >= n_o) {
            return Err(Error::Contract(format!(
                "target composition ({}, {}) lies outside the {n_s} x {n_o} prompt bank",
                p.state, p.object
            )));
        }
        let mut tape = Tape::new();
        let bound = model.store.bind(&mut tape);
        let bank = crate::dgp::build_text_bank(&mut tape, &bound, &model.prompts, text, &pairs)?;
        Ok(Self {
            model,
            state_reps: tape.value(bank.state).clone(),
            object_reps: tape.value(bank.object).clone(),
            pair_reps: tape.value(bank.pair).clone(),
            state_groups: bank.state_groups,
            object_groups: bank.object_groups,
            pairs,
        })
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    /// Scores a feature batch in inference mode.
    pub fn score(&self, features: &Matrix) -> Result<ScoreTensor> {
        let m = self.model;
        let mut tape = Tape::new();
        let bound = m.store.bind(&mut tape);
        let f = m.forward_visual(&mut tape, &bound, features)?;
        let logits = |tape: &mut Tape, x, reps: &Matrix| -> Result<Matrix> {
            let r = tape.constant(reps.clone());
            let l = crate::objectives::similarity_logits(tape, x, r, m.similarity)?;
            Ok(tape.value(l).clone())
        };
        let base = logits(&mut tape, f.features, &self.pair_reps)?;
        let pair = logits(&mut tape, f.pair, &self.pair_reps)?;
        let state = logits(&mut tape, f.state.fused, &self.state_reps)?;
        let object = logits(&mut tape, f.object.fused, &self.object_reps)?;
        ScoreTensor::fuse(
            softmax_rows(&base),
            softmax_rows(&pair),
            group_marginals(&state, m.prompts.n_s, self.state_groups)?,
            group_marginals(&object, m.prompts.n_o, self.object_groups)?,
            self.pairs.clone(),
        )
    }

    /// Scores features in fixed-size chunks and stacks the results.
    pub fn score_all(&self, features: &Matrix) -> Result<ScoreTensor> {
        let mut parts = Vec::new();
        let mut start = 0;
        while start < features.nrows() {
            let end = (start + SCORE_CHUNK).min(features.nrows());
            parts.push(self.score(&features.slice(ndarray::s![start..end, ..]).to_owned())?);
            start = end;
        }
        if parts.is_empty() {
            return self.score(&Matrix::zeros((0, features.ncols())));
        }
        let stack = |f: fn(&ScoreTensor) -> &Matrix| {
            let views: Vec<_> = parts.iter().map(|p| f(p).view()).collect();
            ndarray::concatenate(ndarray::Axis(0), &views).expect("chunks share widths")
        };
        Ok(ScoreTensor {
            p_base: stack(|p| &p.p_base),
            p_pair: stack(|p| &p.p_pair),
            p_state: stack(|p| &p.p_state),
            p_object: stack(|p| &p.p_object),
            fused: stack(|p| &p.fused),
            pairs: self.pairs.clone(),
        })
    }
}

/// Scores `features` against the target space of `split`.
pub fn score_batch(
    model: &Model,
    text: &dyn TextEncoderBackend,
    features: &Matrix,
    split: &CompositionSplit,
) -> Result<ScoreTensor> {
    Scorer::new(model, text, split.target_pairs())?.score_all(features)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub bias: f64,
    pub seen_acc: f64,
    pub unseen_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalCurve {
    pub points: Vec<CurvePoint>,
    pub grid: usize,
}

impl EvalCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bias,seen_acc,unseen_acc\n");
        for p in &self.points {
            writeln!(out, "{},{},{}", p.bias, p.seen_acc, p.unseen_acc).unwrap();
        }
        out
    }
}

/// Column of each sample's true pair within `pairs`.
pub fn label_columns(samples: &[Sample], pairs: &[Pair]) -> Result<Vec<usize>> {
    let index: HashMap<Pair, usize> = pairs.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    samples
        .iter()
        .map(|s| {
            index.get(&s.pair).copied().ok_or_else(|| {
                Error::Contract(format!(
                    "sample {} has pair ({}, {}) outside the target space",
                    s.image_ref, s.pair.state, s.pair.object
                ))
            })
        })
        .collect()
}

/// `-∞`, `grid` evenly spaced biases on `[-M, M]`, `+∞`.
pub fn bias_grid(max_abs: f64, grid: usize) -> Vec<f64> {
    let m = max_abs + GRID_MARGIN;
    let mut out = vec![f64::NEG_INFINITY];
    out.extend((0..grid).map(|i| -m + 2.0 * m * i as f64 / (grid - 1) as f64));
    out.push(f64::INFINITY);
    out
}

/// Prediction column at bias `gamma` given the best seen and best unseen
/// candidates. Infinite biases saturate to one side.
fn biased_choice(seen: Option<(usize, f64)>, unseen: Option<(usize, f64)>, gamma: f64) -> usize {
    match (seen, unseen) {
        (Some((s, _)), None) => s,
        (None, Some((u, _))) => u,
        (Some((s, sv)), Some((u, uv))) => {
            if gamma == f64::INFINITY {
                u
            } else if gamma == f64::NEG_INFINITY {
                s
            } else {
                let ub = uv + gamma;
                if ub > sv || (ub == sv && u < s) {
                    u
                } else {
                    s
                }
            }
        }
        (None, None) => unreachable!("target space is nonempty"),
    }
}

/// Seen/unseen accuracy as a bias on unseen columns sweeps the grid.
///
/// `unseen_cols[c]` marks target columns that are unseen compositions;
/// samples are classed as seen or unseen by their label's column.
pub fn sweep_curve(fused: &Matrix, labels: &[usize], unseen_cols: &[bool], grid: usize) -> Result<EvalCurve> {
    if grid < 2 {
        return Err(Error::Eval(format!("bias grid needs at least 2 points, got {grid}")));
    }
    if fused.nrows() != labels.len() || fused.ncols() != unseen_cols.len() || fused.ncols() == 0 {
        return Err(Error::Shape(format!(
            "{:?} scores for {} labels and {} columns",
            fused.dim(),
            labels.len(),
            unseen_cols.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= fused.ncols()) {
        return Err(Error::Contract(format!("label column {l} out of range")));
    }
    let n_unseen = labels.iter().filter(|&&l| unseen_cols[l]).count();
    let n_seen = labels.len() - n_unseen;
    if n_unseen == 0 {
        return Err(Error::Eval("no unseen-labelled samples; the seen/unseen curve is undefined".into()));
    }
    if n_seen == 0 {
        log::warn!("no seen-labelled samples; seen accuracy is reported as 0");
    }
    let mut max_abs = 0.0f64;
    let best: Vec<_> = fused
        .rows()
        .into_iter()
        .map(|row| {
            let mut s: Option<(usize, f64)> = None;
            let mut u: Option<(usize, f64)> = None;
            for (c, &v) in row.iter().enumerate() {
                if v.is_finite() {
                    max_abs = max_abs.max(v.abs());
                }
                let slot = if unseen_cols[c] { &mut u } else { &mut s };
                if slot.is_none_or(|(_, b)| v > b) {
                    *slot = Some((c, v));
                }
            }
            (s, u)
        })
        .collect();
    let points = bias_grid(max_abs, grid)
        .into_iter()
        .map(|gamma| {
            let (mut hit_s, mut hit_u) = (0usize, 0usize);
            for (&(s, u), &l) in best.iter().zip(labels) {
                if biased_choice(s, u, gamma) == l {
                    if unseen_cols[l] {
                        hit_u += 1;
                    } else {
                        hit_s += 1;
                    }
                }
            }
            CurvePoint {
                bias: gamma,
                seen_acc: if n_seen == 0 { 0.0 } else { hit_s as f64 / n_seen as f64 },
                unseen_acc: hit_u as f64 / n_unseen as f64,
            }
        })
        .collect();
    Ok(EvalCurve { points, grid })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "S")]
    pub seen: f64,
    #[serde(rename = "U")]
    pub unseen: f64,
    #[serde(rename = "HM")]
    pub hm: f64,
    #[serde(rename = "AUC")]
    pub auc: f64,
    pub world: World,
    pub checkpoint_hash: String,
}

pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u == 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

/// Trapezoidal area of unseen accuracy over seen accuracy, keeping the best
/// unseen accuracy for repeated seen values.
pub fn curve_auc(points: &[CurvePoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.seen_acc, p.unseen_acc)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts.dedup_by(|next, kept| next.0 == kept.0);
    if pts.len() < 2 {
        log::warn!("curve has fewer than 2 distinct seen accuracies; AUC set to 0");
        return 0.0;
    }
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

pub fn compute_metrics(curve: &EvalCurve, world: World, checkpoint_hash: &str) -> MetricsReport {
    let max = |f: fn(&CurvePoint) -> f64| curve.points.iter().map(f).fold(0.0, f64::max);
    MetricsReport {
        seen: max(|p| p.seen_acc),
        unseen: max(|p| p.unseen_acc),
        hm: max(|p| harmonic_mean(p.seen_acc, p.unseen_acc)),
        auc: curve_auc(&curve.points),
        world,
        checkpoint_hash: checkpoint_hash.to_string(),
    }
}

/// Sweep and metrics for ready-made fused scores.
pub fn metrics_from_scores(
    scores: &ScoreTensor,
    samples: &[Sample],
    split: &CompositionSplit,
    grid: usize,
    checkpoint_hash: &str,
) -> Result<(MetricsReport, EvalCurve)> {
    let labels = label_columns(samples, &scores.pairs)?;
    let unseen: Vec<bool> = scores.pairs.iter().map(|&p| !split.is_seen(p)).collect();
    let curve = sweep_curve(&scores.fused, &labels, &unseen, grid)?;
    Ok((compute_metrics(&curve, split.world, checkpoint_hash), curve))
}

/// Backends an evaluation runs against.
pub struct Backends<'a> {
    pub image: &'a dyn ImageEncoderBackend,
    pub text: &'a dyn TextEncoderBackend,
}

/// Encodes, scores and sweeps one partition of `dataset`.
pub fn evaluate(
    model: &Model,
    backends: &Backends,
    dataset: &Dataset,
    partition: Partition,
    world: World,
    grid: usize,
    checkpoint_hash: &str,
) -> Result<(MetricsReport, EvalCurve)> {
    let samples = dataset.partition(partition);
    let split = dataset.split_for(partition, world);
    let features = encode_batch(backends.image, samples)?;
    let scores = score_batch(model, backends.text, &features, &split)?;
    metrics_from_scores(&scores, samples, &split, grid, checkpoint_hash)
}

/// Writes `<stem>.json` and `<stem>_curve.csv` into `dir`. Both are rendered
/// before either is written so a failure leaves no partial output.
pub fn write_report(dir: &Path, stem: &str, report: &MetricsReport, curve: &EvalCurve) -> Result<()> {
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Eval(format!("serializing report: {e}")))?;
    let csv = curve.to_csv();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, body) in [(format!("{stem}.json"), json), (format!("{stem}_curve.csv"), csv)] {
        let path = dir.join(name);
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, body).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Fraction of samples whose argmax-gate cluster agrees with the cluster's
/// majority ground-truth group.
pub fn cluster_purity(assignments: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(assignments.len(), truth.len());
    if truth.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<usize, HashMap<usize, usize>> = HashMap::new();
    for (&a, &t) in assignments.iter().zip(truth) {
        *counts.entry(a).or_default().entry(t).or_default() += 1;
    }
    let majority: usize = counts.values().map(|c| c.values().copied().max().unwrap_or(0)).sum();
    majority as f64 / truth.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RouterPurity {
    pub state: f64,
    pub object: f64,
}

impl RouterPurity {
    pub fn mean(&self) -> f64 {
        (self.state + self.object) / 2.0
    }
}

/// Router purity per branch at inference. The state branch is scored against
/// the group of each sample's object and the object branch against the group
/// of its state.
pub fn router_purity(
    model: &Model,
    features: &Matrix,
    pairs: &[Pair],
    object_groups: &[usize],
    state_groups: &[usize],
) -> Result<RouterPurity> {
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let f = model.forward_visual(&mut tape, &bound, features)?;
    let argmaxes = |v: &Matrix| -> Vec<usize> { v.rows().into_iter().map(|r| argmax(r.iter().copied())).collect() };
    let truth = |b: Branch, table: &[usize]| -> Vec<usize> { pairs.iter().map(|&p| table[b.context(p)]).collect() };
    Ok(RouterPurity {
        state: cluster_purity(&argmaxes(&f.state.gate.values), &truth(Branch::State, object_groups)),
        object: cluster_purity(&argmaxes(&f.object.gate.values), &truth(Branch::Object, state_groups)),
    })
}
