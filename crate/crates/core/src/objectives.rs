//! Contrastive training objectives and their weighted total.

use serde::{Deserialize, Serialize};

use crate::data::Pair;
use crate::dgp::TextBank;
use crate::tape::{Tape, Var};
use crate::{Error, Result};

/// How visual features are scored against text representations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub tau: f64,
    /// Compare unit-normalized vectors (cosine) instead of raw dot products.
    pub normalize: bool,
}

impl Similarity {
    pub fn cosine(tau: f64) -> Self {
        Self { tau, normalize: true }
    }
}

/// `B x N` logits `x · tᵀ / τ`.
pub fn similarity_logits(tape: &mut Tape, x: Var, reps: Var, sim: Similarity) -> Result<Var> {
    if tape.shape(x).1 != tape.shape(reps).1 {
        return Err(Error::Shape(format!(
            "features have width {} but text reps have width {}",
            tape.shape(x).1,
            tape.shape(reps).1
        )));
    }
    let (x, reps) = if sim.normalize {
        (tape.l2_normalize_rows(x), tape.l2_normalize_rows(reps))
    } else {
        (x, reps)
    };
    let dots = tape.matmul_t(x, reps);
    Ok(tape.scale(dots, 1.0 / sim.tau))
}

fn check_finite(tape: &Tape, logits: Var, what: &'static str) -> Result<()> {
    for (i, row) in tape.value(logits).rows().into_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what, sample: i });
        }
    }
    Ok(())
}

fn check_labels(labels: &[usize], batch: usize, classes: usize, what: &str) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::Shape(format!("{what}: {} labels for {batch} samples", labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Contract(format!("{what}: label {l} outside {classes} classes")));
    }
    Ok(())
}

/// Group-soft-labelled InfoNCE. `reps` holds `groups` rows per class
/// (class-major) and `soft` is the `B x groups` weighting of each group's
/// representation of the true class. With one group the weighting is
/// dropped and the loss is plain InfoNCE.
#[allow(clippy::too_many_arguments)]
pub fn grouped_infonce(
    tape: &mut Tape,
    x: Var,
    reps: Var,
    groups: usize,
    soft: Option<Var>,
    labels: &[usize],
    sim: Similarity,
    what: &'static str,
) -> Result<Var> {
    let b = tape.shape(x).0;
    let rows = tape.shape(reps).0;
    if groups == 0 || !rows.is_multiple_of(groups) {
        return Err(Error::Shape(format!("{what}: {rows} reps do not split into {groups} groups")));
    }
    check_labels(labels, b, rows / groups, what)?;
    let logits = similarity_logits(tape, x, reps, sim)?;
    check_finite(tape, logits, what)?;
    let denom = tape.log_sum_exp_rows(logits);
    let idx: Vec<Vec<usize>> = labels
        .iter()
        .map(|&y| (0..groups).map(|j| y * groups + j).collect())
        .collect();
    let own = tape.take_per_row(logits, idx);
    let numer = if groups == 1 {
        own
    } else {
        let soft = soft.ok_or_else(|| Error::Contract(format!("{what}: soft group labels required")))?;
        if tape.shape(soft) != (b, groups) {
            return Err(Error::Shape(format!(
                "{what}: soft labels are {:?}, expected {:?}",
                tape.shape(soft),
                (b, groups)
            )));
        }
        tape.log_weighted_sum_exp(soft, own)
    };
    let per_sample = tape.sub(denom, numer);
    Ok(tape.mean_all(per_sample))
}

pub fn state_loss(
    tape: &mut Tape,
    x_s: Var,
    gate: Option<Var>,
    text: &TextBank,
    labels: &[usize],
    sim: Similarity,
) -> Result<Var> {
    grouped_infonce(tape, x_s, text.state, text.state_groups, gate, labels, sim, "state loss")
}

pub fn object_loss(
    tape: &mut Tape,
    x_o: Var,
    gate: Option<Var>,
    text: &TextBank,
    labels: &[usize],
    sim: Similarity,
) -> Result<Var> {
    grouped_infonce(tape, x_o, text.object, text.object_groups, gate, labels, sim, "object loss")
}

/// Index of each pair within `space`; a pair outside it violates the contract.
pub fn pair_label_indices(pairs: &[Pair], space: &[Pair]) -> Result<Vec<usize>> {
    let index: std::collections::HashMap<Pair, usize> =
        space.iter().enumerate().map(|(i, p)| (*p, i)).collect();
    pairs
        .iter()
        .map(|p| {
            index.get(p).copied().ok_or_else(|| {
                Error::Contract(format!("pair ({}, {}) is outside the label space", p.state, p.object))
            })
        })
        .collect()
}

/// InfoNCE of composed features against the training pair representations.
pub fn pair_loss(tape: &mut Tape, x_p: Var, pair_reps: Var, labels: &[usize], sim: Similarity) -> Result<Var> {
    grouped_infonce(tape, x_p, pair_reps, 1, None, labels, sim, "pair loss")
}

/// The same objective applied to the raw image features.
pub fn base_loss(tape: &mut Tape, features: Var, pair_reps: Var, labels: &[usize], sim: Similarity) -> Result<Var> {
    grouped_infonce(tape, features, pair_reps, 1, None, labels, sim, "base loss")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub base: f64,
    pub state: f64,
    pub object: f64,
    pub pair: f64,
    pub total: f64,
    pub lambda: f64,
    pub tau: f64,
}

/// Scalar loss nodes feeding the weighted total.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub base: Var,
    pub state: Var,
    pub object: Var,
    pub pair: Var,
}

/// `base + λ (state + object + pair)`.
pub fn total_loss(tape: &mut Tape, terms: LossTerms, lambda: f64, tau: f64) -> (Var, LossBreakdown) {
    let branches = tape.add(terms.state, terms.object);
    let branches = tape.add(branches, terms.pair);
    let weighted = tape.scale(branches, lambda);
    let total = tape.add(terms.base, weighted);
    let breakdown = LossBreakdown {
        base: tape.scalar(terms.base),
        state: tape.scalar(terms.state),
        object: tape.scalar(terms.object),
        pair: tape.scalar(terms.pair),
        total: tape.scalar(total),
        lambda,
        tau,
    };
    (total, breakdown)
}
