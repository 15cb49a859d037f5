//! What the training loop needs from a gradient-trained forecaster.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hybridgnn::DynamicGraphSnapshot;
use crate::tensor::{Bound, ParamSet, Tensor, Var};
use crate::TensorError;

/// Random source for parameter init, shuffling and dropout.
pub type ModelRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    EpiGnn,
    ColaGnn,
    Hybrid,
    Gar,
    Var,
    Lstm,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::EpiGnn,
        Family::ColaGnn,
        Family::Hybrid,
        Family::Gar,
        Family::Var,
        Family::Lstm,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Family::EpiGnn => "epignn",
            Family::ColaGnn => "colagnn",
            Family::Hybrid => "hybrid",
            Family::Gar => "gar",
            Family::Var => "var",
            Family::Lstm => "lstm",
        }
    }

    /// Fitted by gradient descent (as opposed to closed-form least squares).
    pub fn is_neural(self) -> bool {
        !matches!(self, Family::Gar | Family::Var)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.to_ascii_lowercase();
        let norm = match norm.as_str() {
            "hybridgnn" | "epicola" | "epicola-gnn" => "hybrid",
            other => other,
        };
        Family::ALL
            .into_iter()
            .find(|f| f.key() == norm)
            .ok_or_else(|| format!("unknown model family {s:?}"))
    }
}

/// A model whose forward pass is recorded on a [`crate::Graph`].
pub trait Forecaster: Send + Sync {
    fn family(&self) -> Family;

    fn params(&self) -> &ParamSet;

    fn params_mut(&mut self) -> &mut ParamSet;

    /// Predicts `[B, N]` scaled targets from `[B, T, N]` scaled inputs.
    /// `external` is an optional `[B, e, N, N]` stack of relation matrices.
    /// Dropout is active only when `rng` is given.
    fn forward<'g>(
        &self,
        p: &Bound<'g>,
        x: Var<'g>,
        external: Option<Var<'g>>,
        rng: Option<&mut ModelRng>,
    ) -> Result<Var<'g>, TensorError>;

    /// Training objective for a batch.
    fn loss<'g>(&self, p: &Bound<'g>, pred: Var<'g>, target: Var<'g>) -> Result<Var<'g>, TensorError>;

    /// Decoupled weight decay the optimizer should apply.
    fn weight_decay(&self) -> f64;

    /// Serialized configuration, stored in checkpoints.
    fn config_json(&self) -> serde_json::Value;

    /// Learned graphs for a batch, for models that build one per input.
    fn graph_snapshot(
        &self,
        _x: &Tensor,
        _external: Option<&Tensor>,
    ) -> Option<Result<DynamicGraphSnapshot, TensorError>> {
        None
    }
}

/// `Σ (pred − target)²` over every entry.
pub fn squared_error_sum<'g>(pred: Var<'g>, target: Var<'g>) -> Result<Var<'g>, TensorError> {
    pred.sub(target)?.square()?.sum()
}

/// `Σ |pred − target| + λ·Σ w²` with the penalty over weights only.
pub fn l1_with_penalty<'g>(
    pred: Var<'g>,
    target: Var<'g>,
    p: &Bound<'g>,
    params: &ParamSet,
    lambda: f64,
) -> Result<Var<'g>, TensorError> {
    let l1 = pred.sub(target)?.abs()?.sum()?;
    if lambda == 0.0 {
        return Ok(l1);
    }
    match p.weight_square_sum(params)? {
        Some(sq) => l1.add(sq.scale(lambda)?),
        None => Ok(l1),
    }
}

/// Fills a parameter with a constant; handy for pinning behaviour in tests.
pub fn fill_param(params: &mut ParamSet, name: &str, value: f64) {
    let id = params.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    params.get_mut(id).data_mut().fill(value);
}

/// Draws a fresh uniform(−scale, scale) value for every bias-like entry
/// currently at zero, so tests exercise non-trivial biases.
pub fn jitter_zeros<R: Rng + ?Sized>(params: &mut ParamSet, rng: &mut R, scale: f64) {
    for id in params.ids().collect::<Vec<_>>() {
        for v in params.get_mut(id).data_mut() {
            if *v == 0.0 {
                *v = rng.gen_range(-scale..scale);
            }
        }
    }
}
