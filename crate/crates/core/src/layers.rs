//! Parameterized building blocks shared by the attention, scan and head modules.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::Rng;
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::{Matrix, Real};

/// Temporal context visible to a block's two direction branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Context {
    /// Past-only branch plus future-only branch.
    #[default]
    Bidirectional,
    /// Only the past-only branch; the future branch contributes zeros.
    PastOnly,
    /// Control without direction restriction: attention is unmasked and the
    /// scan branches share one projector pair.
    Symmetric,
}

impl Context {
    pub const ALL: [Context; 3] = [Context::Bidirectional, Context::PastOnly, Context::Symmetric];

    pub fn label(self) -> &'static str {
        match self {
            Context::Bidirectional => "bidirectional",
            Context::PastOnly => "past-only",
            Context::Symmetric => "symmetric-unmasked",
        }
    }
}

pub(crate) fn uniform<S: Real>(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Matrix<S> {
    Matrix::from_fn(rows, cols, |_, _| S::of(rng.random_range(-bound..bound)))
}

/// `x W + b` applied to every row.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Real>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(in_dim, out_dim, bound, rng), true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Matrix::zeros(1, out_dim), false));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Real>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Matrix::filled(1, dim, S::one()), false);
        let beta = store.add(format!("{name}.beta"), Matrix::zeros(1, dim), false);
        Self { gamma, beta }
    }

    pub fn forward<S: Real>(&self, tape: &mut Tape<S>, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b)
    }
}
