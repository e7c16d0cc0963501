//! Group-aware pair enhancement: samples whose router confidences agree
//! share features before the pair network composes state and object.

use rand::Rng;

use crate::cooccur::{admission_mask, RelationMap};
use crate::gavr::Mode;
use crate::nn::{Activation, Mlp2};
use crate::params::{Bound, ParamStore};
use crate::tape::{Matrix, Tape, Var};
use crate::{Error, Result};

/// Same masked-softmax semantics as the word-graph relation map.
pub type CompatibilityMap = RelationMap;

/// Cosine similarity between every pair of rows.
pub fn row_cosines(m: &Matrix) -> Matrix {
    let mut n = m.clone();
    for mut r in n.rows_mut() {
        let norm = r.dot(&r).sqrt();
        if norm > 0.0 {
            r /= norm;
        }
    }
    n.dot(&n.t())
}

/// Admits samples with equal labels whose gate rows have cosine at least `zeta`.
pub fn compatibility_map(confidences: &Matrix, labels: &[usize], zeta: f64) -> CompatibilityMap {
    RelationMap::from_similarity(&row_cosines(confidences), labels, zeta)
}

/// [`compatibility_map`] on the tape. The admitted support is fixed by the
/// current confidences; the weights stay differentiable in them.
pub fn compatibility_weights(tape: &mut Tape, confidences: Var, labels: &[usize], zeta: f64) -> Result<Var> {
    let b = tape.shape(confidences).0;
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    let unit = tape.l2_normalize_rows(confidences);
    let cos = tape.matmul_t(unit, unit);
    let mask = admission_mask(tape.value(cos), labels, zeta);
    let eye = tape.constant(Matrix::eye(b));
    let logits = tape.add(cos, eye);
    Ok(tape.masked_softmax_rows(logits, &mask))
}

pub fn enhance(tape: &mut Tape, features: Var, weights: Var) -> Result<Var> {
    let (r, c) = tape.shape(weights);
    if c != tape.shape(features).0 || r != c {
        return Err(Error::Shape(format!(
            "compatibility map is {r}x{c} but features have {} rows",
            tape.shape(features).0
        )));
    }
    Ok(tape.matmul(weights, features))
}

/// The pair network: a two-layer map from the concatenated branch
/// features to the shared embedding width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairBranch {
    pub net: Mlp2,
    pub d: usize,
}

impl PairBranch {
    pub fn init(store: &mut ParamStore, d: usize, hidden: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        Self {
            net: Mlp2::init(store, "pair.net", (2 * d, hidden, d), activation, rng),
            d,
        }
    }
}

/// Composes state and object features; with maps, each branch is first
/// enhanced by its compatibility weights.
pub fn pair_forward(
    tape: &mut Tape,
    bound: &Bound,
    pair: &PairBranch,
    x_s: Var,
    x_o: Var,
    maps: Option<(Var, Var)>,
    mode: Mode,
) -> Result<Var> {
    if mode == Mode::Inference && maps.is_some() {
        return Err(Error::Contract(
            "compatibility maps need ground-truth labels and are not available at inference".into(),
        ));
    }
    for x in [x_s, x_o] {
        if tape.shape(x).1 != pair.d {
            return Err(Error::Shape(format!(
                "pair branch expects width {}, got {}",
                pair.d,
                tape.shape(x).1
            )));
        }
    }
    let (s, o) = match maps {
        Some((ms, mo)) => (enhance(tape, x_s, ms)?, enhance(tape, x_o, mo)?),
        None => (x_s, x_o),
    };
    let joint = tape.concat_cols(s, o);
    Ok(pair.net.forward(tape, bound, joint))
}
