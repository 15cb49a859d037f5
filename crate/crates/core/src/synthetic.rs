//! Seeded toy epidemics on a ring of regions, for tests and benchmarks.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::data::{Dataset, GeoAdjacency, Granularity};
use crate::model::ModelRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub regions: usize,
    pub length: usize,
    /// Weight on a region's own previous value.
    pub persistence: f64,
    /// Weight on the mean of its neighbours' previous values.
    pub spread: f64,
    /// Amplitude of the shared seasonal drive.
    pub seasonal: f64,
    pub period: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            regions: 5,
            length: 240,
            persistence: 0.6,
            spread: 0.3,
            seasonal: 40.0,
            period: 26.0,
            noise: 2.0,
            seed: 0,
        }
    }
}

/// Ring adjacency: each region borders the next and the previous one.
pub fn ring(regions: usize) -> GeoAdjacency {
    let mut m = Tensor::eye(regions);
    if regions > 1 {
        for i in 0..regions {
            m.set(&[i, (i + 1) % regions], 1.0);
            m.set(&[(i + 1) % regions, i], 1.0);
        }
    }
    GeoAdjacency::from_matrix(m, regions).expect("ring is a valid adjacency")
}

/// Linear diffusion along the ring driven by a phase-shifted seasonal
/// forcing, clipped at zero.
pub fn generate(spec: &SyntheticSpec) -> (Dataset, GeoAdjacency) {
    let n = spec.regions;
    let adj = ring(n);
    let mut rng = ModelRng::seed_from_u64(spec.seed);
    let mut data = vec![0.0; spec.length * n];
    for r in 0..n {
        data[r] = 50.0 + 10.0 * r as f64;
    }
    for t in 1..spec.length {
        for r in 0..n {
            let prev = &data[(t - 1) * n..t * n];
            let (mut nb, mut count) = (0.0, 0.0);
            for j in 0..n {
                if j != r && adj.matrix().at(&[r, j]) > 0.0 {
                    nb += prev[j];
                    count += 1.0;
                }
            }
            let nb = if count > 0.0 { nb / count } else { 0.0 };
            let phase = std::f64::consts::TAU * (t as f64 / spec.period + r as f64 / n as f64);
            let drive = spec.seasonal * (1.0 + phase.sin());
            let eps: f64 = rng.sample(StandardNormal);
            let v = spec.persistence * prev[r] + spec.spread * nb + drive + spec.noise * eps;
            data[t * n + r] = v.max(0.0);
        }
    }
    let cases = Tensor::new(&[spec.length, n], data).expect("sizes agree");
    let ds = Dataset::new("synthetic", Granularity::Weekly, cases).expect("non-negative by construction");
    (ds, adj)
}
