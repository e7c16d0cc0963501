//! The full network: two group-aware branches, the prompt bank and the
//! pair branch, with switches for the component ablations.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cooccur::{relation_map_for_batch, word_groups, CompatibilityGraph, DEFAULT_ZETA};
use crate::data::{Branch, Pair, Vocabulary};
use crate::dgp::{build_text_bank, PromptBank, PromptBankConfig, TextBank};
use crate::encoders::TextEncoderBackend;
use crate::gape::{compatibility_weights, pair_forward, PairBranch};
use crate::gavr::{branch_forward, decompose, seed_router, BranchConfig, BranchOutput, BranchParams, GateDistribution, Mode};
use crate::nn::Activation;
use crate::objectives::{
    base_loss, object_loss, pair_label_indices, pair_loss, state_loss, total_loss, LossBreakdown,
    LossTerms, Similarity,
};
use crate::params::{Bound, ParamStore};
use crate::tape::{Matrix, Tape, Var};
use crate::{Error, Result};

/// Which components are active. Disabling one gives the matching ablation:
/// `gavr` off drops routers and experts (uniform soft labels), `tcpg` off
/// feeds routers un-aggregated features, `dgp` off removes group tokens and
/// `gape` off skips pair enhancement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Components {
    pub gavr: bool,
    pub tcpg: bool,
    pub dgp: bool,
    pub gape: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            gavr: true,
            tcpg: true,
            dgp: true,
            gape: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Gavr,
    Tcpg,
    Dgp,
    Gape,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::Gavr, Component::Tcpg, Component::Dgp, Component::Gape];

    pub fn name(self) -> &'static str {
        match self {
            Component::Gavr => "gavr",
            Component::Tcpg => "tcpg",
            Component::Dgp => "dgp",
            Component::Gape => "gape",
        }
    }
}

impl FromStr for Component {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown component {s:?}")))
    }
}

impl Components {
    pub fn without(c: Component) -> Self {
        let mut s = Self::default();
        match c {
            Component::Gavr => s.gavr = false,
            Component::Tcpg => s.tcpg = false,
            Component::Dgp => s.dgp = false,
            Component::Gape => s.gape = false,
        }
        s
    }
}

/// How router weights start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterInit {
    /// Gaussian weights.
    Random,
    /// Each router column points at the training-feature centroid of one
    /// cluster of context words from the word graph.
    #[default]
    WordGroups,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub k_s: usize,
    pub k_o: usize,
    /// Experts active per sample.
    pub top_k: usize,
    /// Context tokens per prompt.
    pub m: usize,
    pub zeta: f64,
    /// Threshold for pair enhancement; defaults to `zeta`.
    pub gape_zeta: Option<f64>,
    pub beta_init: f64,
    pub heads: usize,
    /// Expert hidden width; defaults to the embedding width.
    pub expert_hidden: Option<usize>,
    /// Pair network hidden width; defaults to twice the embedding width.
    pub pair_hidden: Option<usize>,
    pub activation: Activation,
    pub renormalize_topk: bool,
    pub freeze_class_tokens: bool,
    /// Treat router confidences as constants where they serve as soft labels.
    pub detach_soft_labels: bool,
    /// Cosine similarity (true) or raw dot products.
    pub normalize_similarity: bool,
    pub components: Components,
    pub router_init: RouterInit,
    /// Logit margin of the strongest seeded router direction.
    pub router_seed_margin: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k_s: 5,
            k_o: 5,
            top_k: 2,
            m: 3,
            zeta: DEFAULT_ZETA,
            gape_zeta: None,
            beta_init: 0.0,
            heads: 1,
            expert_hidden: None,
            pair_hidden: None,
            activation: Activation::Gelu,
            renormalize_topk: false,
            freeze_class_tokens: false,
            detach_soft_labels: false,
            normalize_similarity: true,
            components: Components::default(),
            router_init: RouterInit::default(),
            router_seed_margin: 4.0,
        }
    }
}

/// A labelled training batch with precomputed image features.
pub struct TrainBatch<'a> {
    pub features: &'a Matrix,
    pub pairs: &'a [Pair],
    /// Seen compositions, the label space of the pair and base losses.
    pub seen: &'a [Pair],
    pub graph: &'a CompatibilityGraph,
}

/// Visual intermediates of one forward pass.
pub struct Visual {
    pub features: Var,
    pub state: BranchOutput,
    pub object: BranchOutput,
    pub state_soft: Var,
    pub object_soft: Var,
    pub pair: Var,
}

pub struct Forward {
    pub visual: Visual,
    pub text: TextBank,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub d: usize,
    pub similarity: Similarity,
    pub store: ParamStore,
    pub state: BranchParams,
    pub object: BranchParams,
    pub prompts: PromptBank,
    pub pair: PairBranch,
}

impl Model {
    pub fn new(
        config: ModelConfig,
        vocab: &Vocabulary,
        text: &dyn TextEncoderBackend,
        image_dim: usize,
        tau: f64,
        seed: u64,
    ) -> Result<Self> {
        let d = text.embed_dim();
        if image_dim != d {
            return Err(Error::Config(format!(
                "image width {image_dim} differs from text width {d}; the backends must share an embedding space"
            )));
        }
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let branch = |b, k| BranchConfig {
            beta_init: config.beta_init,
            heads: config.heads,
            expert_hidden: config.expert_hidden.unwrap_or(d),
            expert_activation: config.activation,
            renormalize: config.renormalize_topk,
            ..BranchConfig::new(b, k, config.top_k.min(k), d)
        };
        let state = BranchParams::init(&mut store, branch(Branch::State, config.k_s), &mut rng)?;
        let object = BranchParams::init(&mut store, branch(Branch::Object, config.k_o), &mut rng)?;
        let prompts = PromptBank::init(
            &mut store,
            PromptBankConfig {
                m: config.m,
                k_s: config.k_s,
                k_o: config.k_o,
                group_tokens: config.components.dgp,
                freeze_class_tokens: config.freeze_class_tokens,
            },
            text,
            vocab,
            &mut rng,
        )?;
        let pair = PairBranch::init(&mut store, d, config.pair_hidden.unwrap_or(2 * d), config.activation, &mut rng);
        Ok(Self {
            similarity: Similarity {
                tau,
                normalize: config.normalize_similarity,
            },
            config,
            d,
            store,
            state,
            object,
            prompts,
            pair,
        })
    }

    /// Applies the configured router initialization from training data.
    /// Word-group seeding needs both routing and the word graph, so it is a
    /// no-op when either component is disabled.
    pub fn init_routers(&mut self, features: &Matrix, pairs: &[Pair], graph: &CompatibilityGraph) -> Result<()> {
        let c = self.config.components;
        if self.config.router_init != RouterInit::WordGroups || !c.gavr || !c.tcpg {
            return Ok(());
        }
        for p in [&self.state, &self.object] {
            let branch = p.config.branch;
            let words = word_groups(graph.context_similarity(branch), p.config.k)?;
            let assignment: Vec<usize> = pairs.iter().map(|&q| words[branch.context(q)]).collect();
            seed_router(&mut self.store, p, features, &assignment, self.config.router_seed_margin)?;
        }
        Ok(())
    }

    fn branch(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        p: &BranchParams,
        features: Var,
        map: Option<&crate::cooccur::RelationMap>,
        mode: Mode,
    ) -> Result<(BranchOutput, Var)> {
        if self.config.components.gavr {
            let out = branch_forward(tape, bound, p, features, map, mode)?;
            let soft = if self.config.detach_soft_labels {
                tape.constant(out.gate.values.clone())
            } else {
                out.gate.confidences
            };
            return Ok((out, soft));
        }
        // Without routing every sample weighs all groups equally.
        let base = decompose(tape, bound, p, features)?;
        let b = tape.shape(base).0;
        let k = p.config.k;
        let values = Matrix::from_elem((b, k), 1.0 / k as f64);
        let soft = tape.constant(values.clone());
        let gate = GateDistribution {
            confidences: soft,
            values,
            topk_indices: vec![(0..p.config.top_k).collect(); b],
        };
        let zero = tape.constant(Matrix::zeros(tape.shape(base)));
        Ok((
            BranchOutput {
                base,
                group: zero,
                fused: base,
                gate,
            },
            soft,
        ))
    }

    /// Inference-mode visual pass.
    pub fn forward_visual(&self, tape: &mut Tape, bound: &Bound, features: &Matrix) -> Result<Visual> {
        self.visual(tape, bound, features, None)
    }

    /// Visual pass. `labels` (with the word graph) switches on the
    /// training-only aggregation and enhancement steps.
    pub fn visual(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        features: &Matrix,
        labels: Option<(&[Pair], &CompatibilityGraph)>,
    ) -> Result<Visual> {
        if features.ncols() != self.d {
            return Err(Error::Shape(format!(
                "features have width {}, model expects {}",
                features.ncols(),
                self.d
            )));
        }
        let mode = if labels.is_some() { Mode::Train } else { Mode::Inference };
        let c = self.config.components;
        let x = tape.constant(features.clone());
        let maps = match labels {
            Some((pairs, graph)) if c.tcpg => Some((
                relation_map_for_batch(pairs, graph, Branch::State),
                relation_map_for_batch(pairs, graph, Branch::Object),
            )),
            _ => None,
        };
        let (state, state_soft) = self.branch(tape, bound, &self.state, x, maps.as_ref().map(|m| &m.0), mode)?;
        let (object, object_soft) = self.branch(tape, bound, &self.object, x, maps.as_ref().map(|m| &m.1), mode)?;
        let enhancement = match labels {
            Some((pairs, _)) if c.gape => {
                let zeta = self.config.gape_zeta.unwrap_or(self.config.zeta);
                let s: Vec<usize> = pairs.iter().map(|p| p.state).collect();
                let o: Vec<usize> = pairs.iter().map(|p| p.object).collect();
                Some((
                    compatibility_weights(tape, state_soft, &s, zeta)?,
                    compatibility_weights(tape, object_soft, &o, zeta)?,
                ))
            }
            _ => None,
        };
        let pair = pair_forward(tape, bound, &self.pair, state.fused, object.fused, enhancement, mode)?;
        Ok(Visual {
            features: x,
            state,
            object,
            state_soft,
            object_soft,
            pair,
        })
    }

    /// Visual pass plus the text bank for `text_pairs`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        text: &dyn TextEncoderBackend,
        features: &Matrix,
        text_pairs: &[Pair],
        labels: Option<(&[Pair], &CompatibilityGraph)>,
    ) -> Result<Forward> {
        let visual = self.visual(tape, bound, features, labels)?;
        let text = build_text_bank(tape, bound, &self.prompts, text, text_pairs)?;
        Ok(Forward { visual, text })
    }

    /// Total training loss for one batch.
    pub fn loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        text: &dyn TextEncoderBackend,
        batch: &TrainBatch,
        lambda: f64,
    ) -> Result<(Var, LossBreakdown, Forward)> {
        let pair_idx = pair_label_indices(batch.pairs, batch.seen)?;
        let f = self.forward(tape, bound, text, batch.features, batch.seen, Some((batch.pairs, batch.graph)))?;
        let (v, t) = (&f.visual, &f.text);
        let sim = self.similarity;
        let s_labels: Vec<usize> = batch.pairs.iter().map(|p| p.state).collect();
        let o_labels: Vec<usize> = batch.pairs.iter().map(|p| p.object).collect();
        let terms = LossTerms {
            base: base_loss(tape, v.features, t.pair, &pair_idx, sim)?,
            state: state_loss(tape, v.state.fused, Some(v.state_soft), t, &s_labels, sim)?,
            object: object_loss(tape, v.object.fused, Some(v.object_soft), t, &o_labels, sim)?,
            pair: pair_loss(tape, v.pair, t.pair, &pair_idx, sim)?,
        };
        let (total, breakdown) = total_loss(tape, terms, lambda, sim.tau);
        Ok((total, breakdown, f))
    }
}
