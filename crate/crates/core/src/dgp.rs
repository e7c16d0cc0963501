//! Learnable prompts: per-branch context tokens, one token per latent
//! group, and trainable class-word tokens, encoded into class
//! representations by a text backend.

use rand::Rng;

use crate::data::{Pair, Vocabulary};
use crate::encoders::{TextEncoderBackend, TokenRef, TokenSequence};
use crate::nn::gaussian;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Matrix, Tape, Var};
use crate::{Error, Result};

pub const PROMPT_INIT_STD: f64 = 0.02;

/// Position of each prompt tensor in the source list handed to the encoder.
const CTX_STATE: usize = 0;
const CTX_OBJECT: usize = 1;
const CTX_PAIR: usize = 2;
const GROUP_STATE: usize = 3;
const GROUP_OBJECT: usize = 4;
const CLASS_STATE: usize = 5;
const CLASS_OBJECT: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    State,
    Object,
    Pair,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBankConfig {
    /// Context tokens per prompt.
    pub m: usize,
    pub k_s: usize,
    pub k_o: usize,
    /// When false, branch prompts carry no group token and every class has
    /// a single representation.
    pub group_tokens: bool,
    pub freeze_class_tokens: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    pub config: PromptBankConfig,
    pub token_dim: usize,
    pub n_s: usize,
    pub n_o: usize,
    pub ctx_state: ParamId,
    pub ctx_object: ParamId,
    pub ctx_pair: ParamId,
    pub group_state: Option<ParamId>,
    pub group_object: Option<ParamId>,
    pub class_state: ParamId,
    pub class_object: ParamId,
}

impl PromptBank {
    pub fn init(
        store: &mut ParamStore,
        config: PromptBankConfig,
        backend: &dyn TextEncoderBackend,
        vocab: &Vocabulary,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.m == 0 {
            return Err(Error::Config("prompt context length m must be at least 1".into()));
        }
        if config.k_s == 0 || config.k_o == 0 {
            return Err(Error::Config("group counts must be at least 1".into()));
        }
        let needed = config.m + 2;
        if backend.context_length() < needed {
            return Err(Error::PromptTooLong {
                len: needed,
                max: backend.context_length(),
            });
        }
        let td = backend.token_dim();
        let ctx = |rng: &mut _| {
            backend
                .context_init(config.m)
                .unwrap_or_else(|| gaussian(rng, config.m, td, PROMPT_INIT_STD))
        };
        let ctx_state = store.add("prompts.ctx_state", ctx(rng));
        let ctx_object = store.add("prompts.ctx_object", ctx(rng));
        let ctx_pair = store.add("prompts.ctx_pair", ctx(rng));
        let (group_state, group_object) = if config.group_tokens {
            (
                Some(store.add("prompts.group_state", gaussian(rng, config.k_s, td, PROMPT_INIT_STD))),
                Some(store.add("prompts.group_object", gaussian(rng, config.k_o, td, PROMPT_INIT_STD))),
            )
        } else {
            (None, None)
        };
        let words = |names: &[String]| -> Result<Matrix> {
            let mut m = Matrix::zeros((names.len(), td));
            for (i, n) in names.iter().enumerate() {
                let v = backend.class_word_embedding(n)?;
                m.row_mut(i).assign(&ndarray::ArrayView1::from(&v[..]));
            }
            Ok(m)
        };
        let class_state = store.add("prompts.class_state", words(vocab.states())?);
        let class_object = store.add("prompts.class_object", words(vocab.objects())?);
        if config.freeze_class_tokens {
            store.set_frozen(class_state, true);
            store.set_frozen(class_object, true);
        }
        Ok(Self {
            token_dim: td,
            n_s: vocab.n_states(),
            n_o: vocab.n_objects(),
            config,
            ctx_state,
            ctx_object,
            ctx_pair,
            group_state,
            group_object,
            class_state,
            class_object,
        })
    }

    /// Representations per class in each branch: the group count, or 1
    /// without group tokens.
    pub fn groups(&self, kind: PromptKind) -> usize {
        match (kind, self.config.group_tokens) {
            (PromptKind::State, true) => self.config.k_s,
            (PromptKind::Object, true) => self.config.k_o,
            _ => 1,
        }
    }

    /// Prompt tensors bound on the tape, in [`TokenRef::source`] order.
    pub fn sources(&self, tape: &mut Tape, bound: &Bound) -> Vec<Var> {
        let placeholder = tape.constant(Matrix::zeros((1, self.token_dim)));
        vec![
            bound.var(self.ctx_state),
            bound.var(self.ctx_object),
            bound.var(self.ctx_pair),
            self.group_state.map_or(placeholder, |g| bound.var(g)),
            self.group_object.map_or(placeholder, |g| bound.var(g)),
            bound.var(self.class_state),
            bound.var(self.class_object),
        ]
    }

    pub fn tensor_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.ctx_state, self.ctx_object, self.ctx_pair];
        v.extend(self.group_state);
        v.extend(self.group_object);
        v.extend([self.class_state, self.class_object]);
        v
    }
}

/// Builds the token sequence `[ctx_1..ctx_m, g_j, w_i]` for a branch prompt
/// or `[ctx_1..ctx_m, w_s, w_o]` for a pair prompt.
pub fn assemble_prompt(
    bank: &PromptBank,
    kind: PromptKind,
    classes: &[usize],
    group: Option<usize>,
) -> Result<TokenSequence> {
    let m = bank.config.m;
    let ctx = |source| (0..m).map(move |row| TokenRef { source, row });
    let check = |i: usize, n: usize, what: &str| -> Result<()> {
        if i >= n {
            return Err(Error::Contract(format!("{what} index {i} out of range ({n})")));
        }
        Ok(())
    };
    match kind {
        PromptKind::Pair => {
            if group.is_some() {
                return Err(Error::Contract("pair prompts carry no group token".into()));
            }
            let [s, o] = classes else {
                return Err(Error::Contract("pair prompts need a state and an object".into()));
            };
            check(*s, bank.n_s, "state")?;
            check(*o, bank.n_o, "object")?;
            let mut seq: TokenSequence = ctx(CTX_PAIR).collect();
            seq.push(TokenRef { source: CLASS_STATE, row: *s });
            seq.push(TokenRef { source: CLASS_OBJECT, row: *o });
            Ok(seq)
        }
        PromptKind::State | PromptKind::Object => {
            let (ctx_src, group_src, class_src, n) = if kind == PromptKind::State {
                (CTX_STATE, GROUP_STATE, CLASS_STATE, bank.n_s)
            } else {
                (CTX_OBJECT, GROUP_OBJECT, CLASS_OBJECT, bank.n_o)
            };
            let [c] = classes else {
                return Err(Error::Contract("branch prompts take exactly one class".into()));
            };
            check(*c, n, "class")?;
            let mut seq: TokenSequence = ctx(ctx_src).collect();
            match (bank.config.group_tokens, group) {
                (true, Some(j)) => {
                    check(j, bank.groups(kind), "group")?;
                    seq.push(TokenRef { source: group_src, row: j });
                }
                (true, None) => return Err(Error::Contract("branch prompts need a group index".into())),
                (false, Some(_)) => return Err(Error::Contract("bank has no group tokens".into())),
                (false, None) => {}
            }
            seq.push(TokenRef { source: class_src, row: *c });
            Ok(seq)
        }
    }
}

/// Encoded class representations. Branch rows are class-major:
/// row `i * groups + j` holds class `i` under group `j`.
#[derive(Debug, Clone)]
pub struct TextBank {
    pub state: Var,
    pub object: Var,
    pub pair: Var,
    pub state_groups: usize,
    pub object_groups: usize,
    pub n_s: usize,
    pub n_o: usize,
    pub pairs: Vec<Pair>,
}

impl TextBank {
    pub fn branch(&self, kind: PromptKind) -> (Var, usize) {
        match kind {
            PromptKind::State => (self.state, self.state_groups),
            PromptKind::Object => (self.object, self.object_groups),
            PromptKind::Pair => (self.pair, 1),
        }
    }
}

/// Encodes every branch prompt and one pair prompt per entry of `pairs`.
pub fn build_text_bank(
    tape: &mut Tape,
    bound: &Bound,
    bank: &PromptBank,
    backend: &dyn TextEncoderBackend,
    pairs: &[Pair],
) -> Result<TextBank> {
    let mut seqs = Vec::new();
    for (kind, n) in [(PromptKind::State, bank.n_s), (PromptKind::Object, bank.n_o)] {
        let g = bank.groups(kind);
        for i in 0..n {
            for j in 0..g {
                let group = bank.config.group_tokens.then_some(j);
                seqs.push(assemble_prompt(bank, kind, &[i], group)?);
            }
        }
    }
    for p in pairs {
        seqs.push(assemble_prompt(bank, PromptKind::Pair, &[p.state, p.object], None)?);
    }
    let sources = bank.sources(tape, bound);
    let mut all = backend.encode_tokens(tape, &sources, &seqs)?;
    if backend.normalized() {
        all = tape.l2_normalize_rows(all);
    }
    let ns = bank.n_s * bank.groups(PromptKind::State);
    let no = bank.n_o * bank.groups(PromptKind::Object);
    let state = tape.gather_rows(all, (0..ns).collect());
    let object = tape.gather_rows(all, (ns..ns + no).collect());
    let pair = tape.gather_rows(all, (ns + no..ns + no + pairs.len()).collect());
    Ok(TextBank {
        state,
        object,
        pair,
        state_groups: bank.groups(PromptKind::State),
        object_groups: bank.groups(PromptKind::Object),
        n_s: bank.n_s,
        n_o: bank.n_o,
        pairs: pairs.to_vec(),
    })
}

/// For each group token, the dictionary words whose embeddings are closest
/// in cosine similarity, best first.
pub fn group_token_neighbours(
    store: &ParamStore,
    bank: &PromptBank,
    dictionary: &[(String, Vec<f64>)],
    top: usize,
) -> Vec<(String, Vec<(String, f64)>)> {
    let mut out = Vec::new();
    for (label, id) in [("state", bank.group_state), ("object", bank.group_object)] {
        let Some(id) = id else { continue };
        for (j, row) in store.get(id).rows().into_iter().enumerate() {
            let mut scored: Vec<(String, f64)> = dictionary
                .iter()
                .map(|(w, v)| (w.clone(), crate::cooccur::cosine(row.as_slice().unwrap(), v)))
                .collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            scored.truncate(top);
            out.push((format!("{label}_group_{j}"), scored));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{ToyBackendSpec, ToyTextEncoder};
    use crate::gradcheck::{assert_grad_close, numeric_grad};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab(ns: usize, no: usize) -> Vocabulary {
        Vocabulary::new(
            (0..ns).map(|i| format!("s{i}")).collect(),
            (0..no).map(|i| format!("o{i}")).collect(),
        )
        .unwrap()
    }

    fn setup(ns: usize, no: usize, k: usize, groups: bool) -> (ParamStore, PromptBank, ToyTextEncoder) {
        let enc = ToyTextEncoder::new(ToyBackendSpec { d: 6, seed: 1 }).unwrap();
        let mut store = ParamStore::new();
        let cfg = PromptBankConfig {
            m: 3,
            k_s: k,
            k_o: k + 1,
            group_tokens: groups,
            freeze_class_tokens: false,
        };
        let bank = PromptBank::init(&mut store, cfg, &enc, &vocab(ns, no), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (store, bank, enc)
    }

    fn pairs(ns: usize, no: usize) -> Vec<Pair> {
        (0..ns).flat_map(|s| (0..no).map(move |o| Pair::new(s, o))).collect()
    }

    #[test]
    fn prompt_lengths_and_structure() {
        let (_, bank, _) = setup(6, 4, 2, true);
        let s = assemble_prompt(&bank, PromptKind::State, &[5], Some(1)).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!(s[3], TokenRef { source: GROUP_STATE, row: 1 });
        assert_eq!(s[4], TokenRef { source: CLASS_STATE, row: 5 });
        let p = assemble_prompt(&bank, PromptKind::Pair, &[2, 3], None).unwrap();
        assert_eq!(p.len(), 5);
        assert!(p.iter().all(|t| t.source != GROUP_STATE && t.source != GROUP_OBJECT));
        assert_eq!(&p[3..], &[TokenRef { source: CLASS_STATE, row: 2 }, TokenRef { source: CLASS_OBJECT, row: 3 }]);
        assert_eq!(assemble_prompt(&bank, PromptKind::State, &[5], Some(1)).unwrap(), s);
    }

    #[test]
    fn prompt_contract_errors() {
        let (_, bank, _) = setup(6, 4, 2, true);
        assert!(assemble_prompt(&bank, PromptKind::State, &[0], Some(2)).is_err());
        assert!(assemble_prompt(&bank, PromptKind::Object, &[0], Some(3)).is_err());
        assert!(assemble_prompt(&bank, PromptKind::State, &[0], None).is_err());
        assert!(matches!(
            assemble_prompt(&bank, PromptKind::Pair, &[0, 0], Some(0)),
            Err(Error::Contract(_))
        ));
        assert!(assemble_prompt(&bank, PromptKind::State, &[6], Some(0)).is_err());
    }

    #[test]
    fn short_backends_are_rejected_up_front() {
        let enc = ToyTextEncoder::new(ToyBackendSpec { d: 6, seed: 1 }).unwrap();
        let cfg = PromptBankConfig { m: 15, k_s: 2, k_o: 2, group_tokens: true, freeze_class_tokens: false };
        let r = PromptBank::init(&mut ParamStore::new(), cfg, &enc, &vocab(2, 2), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::PromptTooLong { len: 17, max: 16 })));
    }

    #[test]
    fn bank_shapes_and_closed_form() {
        let (store, bank, enc) = setup(6, 4, 2, true);
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let tb = build_text_bank(&mut t, &b, &bank, &enc, &pairs(6, 4)).unwrap();
        assert_eq!(t.shape(tb.state), (12, 6));
        assert_eq!(t.shape(tb.object), (12, 6));
        assert_eq!(t.shape(tb.pair), (24, 6));
        let p = enc.projection();
        let encode = |rows: Vec<ndarray::ArrayView1<f64>>| {
            let n = rows.len() as f64;
            let mean = rows.iter().fold(ndarray::Array1::zeros(6), |a, r| a + r) / n;
            mean.dot(p)
        };
        let ctx = store.get(bank.ctx_state);
        let g = store.get(bank.group_state.unwrap());
        let w = store.get(bank.class_state);
        for i in 0..6 {
            for j in 0..2 {
                let mut rows: Vec<_> = ctx.rows().into_iter().collect();
                rows.push(g.row(j));
                rows.push(w.row(i));
                let want = encode(rows);
                let got = t.value(tb.state).row(i * 2 + j).to_owned();
                assert!((got - want).iter().all(|v| v.abs() < 1e-9));
            }
        }
        let pc = store.get(bank.ctx_pair);
        let wo = store.get(bank.class_object);
        for (r, pr) in tb.pairs.iter().enumerate() {
            let mut rows: Vec<_> = pc.rows().into_iter().collect();
            rows.push(w.row(pr.state));
            rows.push(wo.row(pr.object));
            let got = t.value(tb.pair).row(r).to_owned();
            assert!((got - encode(rows)).iter().all(|v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn banks_without_group_tokens_have_one_rep_per_class() {
        let (store, bank, enc) = setup(3, 2, 4, false);
        assert!(assemble_prompt(&bank, PromptKind::State, &[0], None).unwrap().len() == 4);
        let mut t = Tape::new();
        let b = store.bind(&mut t);
        let tb = build_text_bank(&mut t, &b, &bank, &enc, &pairs(3, 2)).unwrap();
        assert_eq!((t.shape(tb.state).0, tb.state_groups), (3, 1));
        assert_eq!((t.shape(tb.object).0, tb.object_groups), (2, 1));
    }

    #[test]
    fn identical_group_rows_give_identical_columns_and_perturbations_stay_local() {
        let (mut store, bank, enc) = setup(4, 3, 3, true);
        let g = bank.group_state.unwrap();
        let r0 = store.get(g).row(0).to_owned();
        store.get_mut(g).row_mut(1).assign(&r0);
        let build = |s: &ParamStore| {
            let mut t = Tape::new();
            let b = s.bind(&mut t);
            let tb = build_text_bank(&mut t, &b, &bank, &enc, &pairs(4, 3)).unwrap();
            (t.value(tb.state).clone(), t.value(tb.object).clone(), t.value(tb.pair).clone())
        };
        let (s0, o0, p0) = build(&store);
        for i in 0..4 {
            assert_eq!(s0.row(i * 3), s0.row(i * 3 + 1));
        }
        store.get_mut(g)[[2, 4]] += 0.3;
        let (s1, o1, p1) = build(&store);
        assert_eq!(o0, o1);
        assert_eq!(p0, p1);
        for r in 0..12 {
            let changed = s0.row(r) != s1.row(r);
            assert_eq!(changed, r % 3 == 2, "row {r}");
        }
    }

    #[test]
    fn every_prompt_tensor_receives_matching_gradient() {
        let (store, bank, enc) = setup(3, 2, 2, true);
        let probe_state = Matrix::from_shape_fn((6, 6), |(i, j)| ((i * 5 + j) % 7) as f64 - 3.0);
        let probe_object = Matrix::from_shape_fn((6, 6), |(i, j)| ((i + 2 * j) % 5) as f64 - 2.0);
        let probe_pair = Matrix::from_shape_fn((6, 6), |(i, j)| ((3 * i + j) % 4) as f64 - 1.5);
        let run = |s: &ParamStore| {
            let mut t = Tape::new();
            let b = s.bind(&mut t);
            let tb = build_text_bank(&mut t, &b, &bank, &enc, &pairs(3, 2)).unwrap();
            let mut terms = Vec::new();
            for (v, p) in [(tb.state, &probe_state), (tb.object, &probe_object), (tb.pair, &probe_pair)] {
                let sq = t.mul_elem(v, v);
                let c = t.constant(p.clone());
                let m = t.mul_elem(sq, c);
                terms.push(t.sum_all(m));
            }
            let l = t.add(terms[0], terms[1]);
            let l = t.add(l, terms[2]);
            (t, b, l)
        };
        let (t, b, l) = run(&store);
        let grads = t.backward(l);
        for id in bank.tensor_ids() {
            let g = grads.get_or_zeros(b.var(id), store.get(id).dim());
            assert!(g.iter().any(|v| v.abs() > 1e-8), "{} has no gradient", store.name(id));
            let n = numeric_grad(
                |m| {
                    let mut s = store.clone();
                    *s.get_mut(id) = m.clone();
                    let (t, _, l) = run(&s);
                    t.scalar(l)
                },
                store.get(id),
                1e-6,
            );
            assert_grad_close(&g, &n, 1e-4, store.name(id));
        }
    }

    #[test]
    fn neighbours_rank_by_cosine() {
        let (mut store, bank, _) = setup(2, 2, 1, true);
        *store.get_mut(bank.group_state.unwrap()) = ndarray::arr2(&[[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]]);
        let dict = vec![
            ("far".to_string(), vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0]),
            ("near".to_string(), vec![2.0, 0.1, 0.0, 0.0, 0.0, 0.0]),
        ];
        let n = group_token_neighbours(&store, &bank, &dict, 1);
        assert_eq!(n[0].0, "state_group_0");
        assert_eq!(n[0].1[0].0, "near");
    }
}
