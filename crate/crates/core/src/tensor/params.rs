use rand::Rng;

use super::{Graph, Tensor, Var};
use crate::error::TensorError;

/// Handle to one tensor in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Param {
    name: String,
    value: Tensor,
    is_weight: bool,
}

/// Named trainable tensors of one model.
///
/// Weights are tensors that count towards an explicit L2 penalty; biases and
/// normalization gains do not.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, is_weight: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            value,
            is_weight,
        });
        ParamId(self.params.len() - 1)
    }

    /// Weight drawn uniformly from `±1/√fan_in`.
    pub fn weight<R: Rng + ?Sized>(&mut self, rng: &mut R, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor::from_parts(shape.to_vec(), data), true)
    }

    /// Zero-initialised bias.
    pub fn bias(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::zeros(shape), false)
    }

    /// Non-weight tensor with a fixed initial value (e.g. a normalization gain).
    pub fn fixed(&mut self, name: &str, value: Tensor) -> ParamId {
        self.insert(name, value, false)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn is_weight(&self, id: ParamId) -> bool {
        self.params[id.0].is_weight
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replaces every value with the one of the same name in `other`.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<(), TensorError> {
        if other.len() != self.len() {
            return Err(TensorError::InvalidArgument {
                op: "load_params",
                reason: format!("expected {} tensors, got {}", self.len(), other.len()),
            });
        }
        for p in &mut self.params {
            let src = other
                .params
                .iter()
                .find(|q| q.name == p.name)
                .ok_or_else(|| TensorError::InvalidArgument {
                    op: "load_params",
                    reason: format!("missing parameter {}", p.name),
                })?;
            if src.value.shape() != p.value.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_params",
                    lhs: p.value.shape().to_vec(),
                    rhs: src.value.shape().to_vec(),
                });
            }
            p.value = src.value.clone();
        }
        Ok(())
    }

    /// Places every parameter on `graph` as a tracked leaf.
    pub fn bind<'g>(&self, graph: &'g Graph) -> Result<Bound<'g>, TensorError> {
        let vars = self
            .params
            .iter()
            .map(|p| graph.param(p.value.clone()))
            .collect::<Result<_, _>>()?;
        Ok(Bound { vars })
    }
}

/// Parameters of a [`ParamSet`] as variables on one graph.
pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn get(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'g>] {
        &self.vars
    }

    /// `Σ w²` over every weight (biases excluded).
    pub fn weight_square_sum(&self, params: &ParamSet) -> Result<Option<Var<'g>>, TensorError> {
        let mut total: Option<Var<'g>> = None;
        for id in params.ids().filter(|&id| params.is_weight(id)) {
            let s = self.get(id).square()?.sum()?;
            total = Some(match total {
                Some(t) => t.add(s)?,
                None => s,
            });
        }
        Ok(total)
    }
}
