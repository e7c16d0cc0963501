//! Small building blocks shared by the branch and pair networks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::params::{Bound, ParamId, ParamStore};
use crate::tape::{Matrix, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    /// No nonlinearity; turns a two-layer network into a linear map.
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Gelu => tape.gelu(x),
            Activation::Identity => x,
        }
    }
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// `y = x W + b` with `W: in x out` and `b: 1 x out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Registers a layer with `N(0, 1/in)` weights and zero bias.
    pub fn init(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let w = gaussian(rng, input, output, 1.0 / (input as f64).sqrt());
        Self::with_weights(store, name, w)
    }

    pub fn zeros(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Self {
        Self::with_weights(store, name, Matrix::zeros((input, output)))
    }

    fn with_weights(store: &mut ParamStore, name: &str, w: Matrix) -> Self {
        let out = w.ncols();
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Matrix::zeros((1, out))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, bound.var(self.weight));
        tape.add_row(y, bound.var(self.bias))
    }

    pub fn apply(&self, store: &ParamStore, x: &Matrix) -> Matrix {
        x.dot(store.get(self.weight)) + store.get(self.bias)
    }
}

/// Two fully-connected layers with a pointwise activation between them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp2 {
    pub first: Linear,
    pub second: Linear,
    pub activation: Activation,
}

impl Mlp2 {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            first: Linear::init(store, &format!("{name}.fc1"), dims.0, dims.1, rng),
            second: Linear::init(store, &format!("{name}.fc2"), dims.1, dims.2, rng),
            activation,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let h = self.first.forward(tape, bound, x);
        let h = self.activation.apply(tape, h);
        self.second.forward(tape, bound, h)
    }
}
