//! Group-aware visual branches: decomposer, router, expert ensemble and
//! the learnable fusion weight. State and object branches are symmetric.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cooccur::RelationMap;
use crate::data::Branch;
use crate::nn::{Activation, Linear, Mlp2};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{AttentionShape, Matrix, Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Inference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub branch: Branch,
    /// Number of experts.
    pub k: usize,
    /// Experts active per sample.
    pub top_k: usize,
    pub d: usize,
    pub beta_init: f64,
    pub heads: usize,
    pub expert_hidden: usize,
    pub expert_activation: Activation,
    /// Divide the selected confidences by their sum before mixing.
    pub renormalize: bool,
}

impl BranchConfig {
    pub fn new(branch: Branch, k: usize, top_k: usize, d: usize) -> Self {
        Self {
            branch,
            k,
            top_k,
            d,
            beta_init: 0.0,
            heads: 1,
            expert_hidden: d,
            expert_activation: Activation::Gelu,
            renormalize: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.top_k == 0 || self.top_k > self.k {
            return Err(Error::Config(format!(
                "{} branch: need 1 <= K <= k, got K = {}, k = {}",
                self.branch.name(),
                self.top_k,
                self.k
            )));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} branch: width {} not divisible by {} heads",
                self.branch.name(),
                self.d,
                self.heads
            )));
        }
        Ok(())
    }
}

/// One-layer multi-head self-attention with a residual connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Decomposer {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    pub config: BranchConfig,
    pub decomposer: Decomposer,
    pub router: Linear,
    pub experts: Vec<Mlp2>,
    pub beta: ParamId,
}

impl BranchParams {
    /// Registers the branch under the `state.` or `object.` scope. The
    /// decomposer's output projection starts at zero so that it begins as
    /// the identity.
    pub fn init(store: &mut ParamStore, config: BranchConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let scope = config.branch.name();
        let d = config.d;
        let decomposer = Decomposer {
            q: Linear::init(store, &format!("{scope}.decomposer.q"), d, d, rng),
            k: Linear::init(store, &format!("{scope}.decomposer.k"), d, d, rng),
            v: Linear::init(store, &format!("{scope}.decomposer.v"), d, d, rng),
            out: Linear::zeros(store, &format!("{scope}.decomposer.out"), d, d),
            heads: config.heads,
        };
        let router = Linear::init(store, &format!("{scope}.router"), d, config.k, rng);
        let experts = (0..config.k)
            .map(|j| {
                Mlp2::init(
                    store,
                    &format!("{scope}.experts.{j}"),
                    (d, config.expert_hidden, d),
                    config.expert_activation,
                    rng,
                )
            })
            .collect();
        let beta = store.add(format!("{scope}.beta"), Matrix::from_elem((1, 1), config.beta_init));
        Ok(Self {
            config,
            decomposer,
            router,
            experts,
            beta,
        })
    }
}

/// Router confidences and the experts selected from them.
#[derive(Debug, Clone)]
pub struct GateDistribution {
    pub confidences: Var,
    pub values: Matrix,
    pub topk_indices: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct BranchOutput {
    pub base: Var,
    pub group: Var,
    pub fused: Var,
    pub gate: GateDistribution,
}

/// Indices of the `k` largest entries, larger first; ties prefer the lower index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn check_width(tape: &Tape, x: Var, d: usize, what: &str) -> Result<()> {
    let w = tape.shape(x).1;
    if w != d {
        return Err(Error::Shape(format!("{what}: expected width {d}, got {w}")));
    }
    Ok(())
}

/// Points router column `j` at the mean of the samples assigned to group
/// `j`, centered on the overall mean and scaled so the strongest group
/// direction scores `margin` logits above the average. Groups without
/// samples get a zero column.
pub fn seed_router(store: &mut ParamStore, p: &BranchParams, features: &Matrix, assignment: &[usize], margin: f64) -> Result<()> {
    let (n, d) = features.dim();
    let k = p.config.k;
    if d != p.config.d || assignment.len() != n || n == 0 {
        return Err(Error::Shape("router seeding needs one group per feature row".into()));
    }
    if let Some(&g) = assignment.iter().find(|&&g| g >= k) {
        return Err(Error::Contract(format!("group {g} out of range for {k} experts")));
    }
    let mean = features.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let mut w = Matrix::zeros((d, k));
    for g in 0..k {
        let rows: Vec<usize> = (0..n).filter(|&i| assignment[i] == g).collect();
        if rows.is_empty() {
            continue;
        }
        let centroid = features.select(ndarray::Axis(0), &rows).mean_axis(ndarray::Axis(0)).unwrap();
        w.column_mut(g).assign(&(centroid - &mean));
    }
    let scale = w.columns().into_iter().map(|c| c.dot(&c)).fold(0.0, f64::max);
    if scale > 0.0 {
        w *= margin / scale;
    }
    *store.get_mut(p.router.weight) = w;
    store.get_mut(p.router.bias).fill(0.0);
    Ok(())
}

pub fn decompose(tape: &mut Tape, bound: &Bound, p: &BranchParams, features: Var) -> Result<Var> {
    check_width(tape, features, p.config.d, "decompose")?;
    let dec = &p.decomposer;
    let q = dec.q.forward(tape, bound, features);
    let k = dec.k.forward(tape, bound, features);
    let v = dec.v.forward(tape, bound, features);
    let shape = AttentionShape {
        batch: tape.shape(features).0,
        seq_len: 1,
        heads: dec.heads,
        causal: false,
    };
    let a = tape.attention(q, k, v, shape);
    let a = dec.out.forward(tape, bound, a);
    Ok(tape.add(features, a))
}

pub fn route(tape: &mut Tape, bound: &Bound, p: &BranchParams, features: Var) -> Result<GateDistribution> {
    check_width(tape, features, p.config.d, "route")?;
    let logits = p.router.forward(tape, bound, features);
    let confidences = tape.softmax_rows(logits);
    let values = tape.value(confidences).clone();
    let topk_indices = values
        .rows()
        .into_iter()
        .map(|r| top_k_indices(r.as_slice().expect("contiguous rows"), p.config.top_k))
        .collect();
    Ok(GateDistribution {
        confidences,
        values,
        topk_indices,
    })
}

/// Indicator of the selected experts, `B x k`.
pub fn selection_mask(gate: &GateDistribution, k: usize) -> Array2<bool> {
    let mut m = Array2::from_elem((gate.topk_indices.len(), k), false);
    for (i, sel) in gate.topk_indices.iter().enumerate() {
        for &j in sel {
            m[[i, j]] = true;
        }
    }
    m
}

/// Mixture weights actually applied to each expert, `B x k` on the tape.
pub fn mixture_weights(tape: &mut Tape, gate: &GateDistribution, k: usize, renormalize: bool) -> Var {
    let mask = selection_mask(gate, k).mapv(|b| if b { 1.0 } else { 0.0 });
    let mask = tape.constant(mask);
    let w = tape.mul_elem(gate.confidences, mask);
    if !renormalize {
        return w;
    }
    let ones = tape.constant(Matrix::ones((k, 1)));
    let sums = tape.matmul(w, ones);
    let inv = tape.reciprocal(sums);
    tape.mul_col(w, inv)
}

pub fn expert_mixture(
    tape: &mut Tape,
    bound: &Bound,
    p: &BranchParams,
    features: Var,
    gate: &GateDistribution,
) -> Result<Var> {
    check_width(tape, features, p.config.d, "expert_mixture")?;
    if gate.topk_indices.len() != tape.shape(features).0 {
        return Err(Error::Shape("gate and features disagree on batch size".into()));
    }
    let weights = mixture_weights(tape, gate, p.config.k, p.config.renormalize);
    let mut acc: Option<Var> = None;
    for (j, e) in p.experts.iter().enumerate() {
        if !gate.topk_indices.iter().any(|s| s.contains(&j)) {
            continue;
        }
        let y = e.forward(tape, bound, features);
        let w = tape.column(weights, j);
        let y = tape.mul_col(y, w);
        acc = Some(match acc {
            Some(a) => tape.add(a, y),
            None => y,
        });
    }
    Ok(acc.expect("top-K selects at least one expert"))
}

pub fn branch_forward(
    tape: &mut Tape,
    bound: &Bound,
    p: &BranchParams,
    features: Var,
    map: Option<&RelationMap>,
    mode: Mode,
) -> Result<BranchOutput> {
    if mode == Mode::Inference && map.is_some() {
        return Err(Error::Contract(
            "relation maps need ground-truth labels and are not available at inference".into(),
        ));
    }
    let base = decompose(tape, bound, p, features)?;
    let routed = match map {
        Some(m) => {
            if m.batch_size() != tape.shape(base).0 {
                return Err(Error::Shape("relation map and batch disagree".into()));
            }
            let w = tape.constant(m.weights.clone());
            tape.matmul(w, base)
        }
        None => base,
    };
    let gate = route(tape, bound, p, routed)?;
    let group = expert_mixture(tape, bound, p, routed, &gate)?;
    let scaled = tape.mul_scalar(group, bound.var(p.beta));
    let fused = tape.add(base, scaled);
    Ok(BranchOutput {
        base,
        group,
        fused,
        gate,
    })
}
