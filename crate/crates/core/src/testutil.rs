//! Shared fixtures for unit tests.

use rand::{Rng, SeedableRng};

use crate::data::GeoAdjacency;
use crate::model::ModelRng;
use crate::tensor::{Graph, ParamSet, Tensor, Var};

pub fn rng(seed: u64) -> ModelRng {
    ModelRng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ModelRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Symmetric 0/1 adjacency with a forced diagonal.
pub fn random_adjacency(rng: &mut ModelRng, n: usize) -> GeoAdjacency {
    let mut m = Tensor::eye(n);
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(0.5) {
                m.set(&[i, j], 1.0);
                m.set(&[j, i], 1.0);
            }
        }
    }
    GeoAdjacency::from_matrix(m, n).unwrap()
}

pub fn constant<'g>(g: &'g Graph, t: &Tensor) -> Var<'g> {
    g.constant(t.clone()).unwrap()
}

pub fn value(v: Var<'_>) -> Tensor {
    (*v.value()).clone()
}

pub fn param<'a>(ps: &'a ParamSet, name: &str) -> &'a Tensor {
    ps.get(ps.find(name).unwrap_or_else(|| panic!("no parameter {name}")))
}

pub fn param_mut<'a>(ps: &'a mut ParamSet, name: &str) -> &'a mut Tensor {
    let id = ps.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    ps.get_mut(id)
}
