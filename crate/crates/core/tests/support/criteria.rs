//! Checks shared by the integration suites and the acceptance report.
//! Each returns a one-line summary on success and the first violation on failure.
#![allow(dead_code)]

use std::time::Instant;

use epihybrid::baselines::LstmConfig;
use epihybrid::colagnn::{ColaGnn, ColaGnnConfig};
use epihybrid::data::{GeoAdjacency, Prepared, SplitSpec};
use epihybrid::epignn::{EpiGnn, EpiGnnConfig};
use epihybrid::harness::heatmap::{count_above, row_l2_normalize};
use epihybrid::harness::metrics::compute;
use epihybrid::harness::train::export_graph;
use epihybrid::harness::{overfit, train, ModelConfig, TrainConfig, TrainJob};
use epihybrid::hybridgnn::{Hybrid, HybridConfig};
use epihybrid::model::{Family, Forecaster, ModelRng};
use epihybrid::rnn::CellKind;
use epihybrid::synthetic::{generate, SyntheticSpec};
use epihybrid::tensor::gradcheck::check;
use epihybrid::{Graph, Tensor};
use rand::{Rng, SeedableRng};

use crate::oracles::*;

pub type Outcome = Result<String, String>;

const ORACLE_TOL: f64 = 1e-6;
const NORM_TOL: f64 = 1e-9;

fn close(label: &str, got: &Tensor, want: &Tensor) -> Result<(), String> {
    if got.shape() != want.shape() {
        return Err(format!("{label}: shape {:?} vs {:?}", got.shape(), want.shape()));
    }
    let d = got.max_abs_diff(want);
    if d > ORACLE_TOL {
        return Err(format!("{label}: max abs diff {d:e}"));
    }
    Ok(())
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

/// Random symmetric binary adjacency with self-loops.
pub fn random_adjacency(n: usize, rng: &mut ModelRng) -> GeoAdjacency {
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

/// Seeded draw of `(rng, regions ≤ 4, batch ≤ 3)`.
fn case(seed: u64) -> (ModelRng, usize, usize) {
    let mut rng = ModelRng::seed_from_u64(seed);
    let n = rng.gen_range(1..=4);
    let b = rng.gen_range(1..=3);
    (rng, n, b)
}

// ---- oracle equivalence -------------------------------------------------

pub fn epignn_temporal_matches(seed: u64) -> Result<(), String> {
    let (mut rng, n, b) = case(seed);
    let config = EpiGnnConfig {
        window: 9,
        local_branches: 2,
        pool: 1 + seed as usize % 3,
        filters: 3,
        attention_dim: 4,
        ..EpiGnnConfig::default()
    };
    let adj = random_adjacency(n, &mut rng);
    let mut m = EpiGnn::new(config, &adj, &mut rng).unwrap();
    scramble(m.params_mut(), &mut rng);
    let x = random_tensor(&[b, 9, n], -1.0, 2.0, &mut rng);
    let g = Graph::new();
    let p = m.params().bind(&g).unwrap();
    let got = m.temporal(&p, g.constant(x.clone()).unwrap()).unwrap().value();
    close(&format!("epignn temporal, seed {seed}"), &got, &epignn_temporal(&m, &x))
}

pub fn epignn_risk_and_gcn_match(seed: u64) -> Result<(), String> {
    let (mut rng, n, b) = case(seed);
    let config = EpiGnnConfig { window: 8, filters: 2, attention_dim: 3, gcn_layers: 2, ..EpiGnnConfig::default() };
    let adj = random_adjacency(n, &mut rng);
    let mut m = EpiGnn::new(config, &adj, &mut rng).unwrap();
    scramble(m.params_mut(), &mut rng);
    let x = random_tensor(&[b, 8, n], 0.0, 1.0, &mut rng);
    let g = Graph::new();
    let p = m.params().bind(&g).unwrap();
    let parts = m.parts(&p, g.constant(x).unwrap(), None, None).unwrap();
    let ps = m.params();

    let (risk, attn) = global_risk(
        &parts.temporal.value(),
        param(ps, "gtr.query"),
        param(ps, "gtr.key"),
        param(ps, "gtr.weight"),
        param(ps, "gtr.bias"),
    );
    close(&format!("epignn attention, seed {seed}"), &parts.attention.value(), &attn)?;
    close(&format!("epignn global risk, seed {seed}"), &parts.global_risk.value(), &risk)?;
    let weights = [param(ps, "gcn0"), param(ps, "gcn1")];
    let want = epignn_gcn(&parts.graph.value(), &parts.gcn_input.value(), &weights);
    close(&format!("epignn gcn, seed {seed}"), &parts.gcn_output.value(), &want)
}

pub fn colagnn_conv_and_message_passing_match(seed: u64) -> Result<(), String> {
    let (mut rng, n, b) = case(seed);
    let config = ColaGnnConfig {
        window: 7,
        hidden: 4,
        filters: 3,
        long_kernel: Some(3),
        long_dilation: 2,
        layers: 2,
        layer_dim: 5,
        ..ColaGnnConfig::default()
    };
    let adj = random_adjacency(n, &mut rng);
    let mut m = ColaGnn::new(config, &adj, &mut rng).unwrap();
    scramble(m.params_mut(), &mut rng);
    let x = random_tensor(&[b, 7, n], -1.0, 1.0, &mut rng);
    let g = Graph::new();
    let p = m.params().bind(&g).unwrap();
    let parts = m.parts(&p, g.constant(x.clone()).unwrap(), None).unwrap();
    let ps = m.params();

    let conv = m.conv();
    let want = dilated_conv(&conv.shape, ps.get(conv.short), ps.get(conv.long), &x);
    close(&format!("colagnn conv, seed {seed}"), &parts.conv.value(), &want)?;
    let layers = [
        (param(ps, "mp0.weight"), param(ps, "mp0.bias")),
        (param(ps, "mp1.weight"), param(ps, "mp1.bias")),
    ];
    let want = message_passing(&parts.graph.value(), &parts.conv.value(), &layers);
    close(&format!("colagnn message passing, seed {seed}"), &parts.propagated.value(), &want)
}

pub fn hybrid_layers_match(seed: u64) -> Result<(), String> {
    let (mut rng, n, b) = case(seed);
    let config = HybridConfig {
        window: 6,
        filters: 2,
        hidden: 4,
        risk_dim: 3,
        attention_dim: 4,
        gcn_layers: 2,
        ..HybridConfig::default()
    };
    let adj = random_adjacency(n, &mut rng);
    let mut m = Hybrid::new(config, &adj, &mut rng).unwrap();
    scramble(m.params_mut(), &mut rng);
    let x = random_tensor(&[b, 6, n], 0.0, 2.0, &mut rng);
    let g = Graph::new();
    let p = m.params().bind(&g).unwrap();
    let parts = m.parts(&p, g.constant(x.clone()).unwrap(), None, None).unwrap();
    let ps = m.params();

    let conv = m.conv().unwrap();
    let want = dilated_conv(&conv.shape, ps.get(conv.short), ps.get(conv.long), &x);
    close(&format!("hybrid conv, seed {seed}"), &parts.conv.value(), &want)?;
    let (risk, attn) = global_risk(
        &parts.conv.value(),
        param(ps, "gtr.query"),
        param(ps, "gtr.key"),
        param(ps, "gtr.weight"),
        param(ps, "gtr.bias"),
    );
    close(&format!("hybrid attention, seed {seed}"), &parts.global_attention.unwrap().value(), &attn)?;
    close(&format!("hybrid global risk, seed {seed}"), &parts.global_risk.unwrap().value(), &risk)?;

    let layers: Vec<_> = (0..2)
        .map(|l| {
            (
                param(ps, &format!("gcn{l}.weight")),
                param(ps, &format!("gcn{l}.gain")),
                param(ps, &format!("gcn{l}.bias")),
            )
        })
        .collect();
    let outs = hybrid_gcn(&parts.laplacian.value(), &parts.node_features.value(), &layers);
    let d = outs[0].shape()[2];
    // residual concatenation of every layer along the feature axis
    let mut joined = Vec::new();
    for row in 0..b * n {
        for o in &outs {
            joined.extend_from_slice(&o.data()[row * d..(row + 1) * d]);
        }
    }
    let want = Tensor::new(&[b, n, d * outs.len()], joined).unwrap();
    close(&format!("hybrid gcn, seed {seed}"), &parts.gcn.value(), &want)
}

pub const ORACLE_SEEDS: std::ops::Range<u64> = 0..8;

pub fn oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let checks: [fn(u64) -> Result<(), String>; 4] = [
        epignn_temporal_matches,
        epignn_risk_and_gcn_match,
        colagnn_conv_and_message_passing_match,
        hybrid_layers_match,
    ];
    for seed in ORACLE_SEEDS {
        for c in checks {
            c(seed)?;
        }
    }
    Ok(format!(
        "conv, global risk, message passing and gcn match loops to {ORACLE_TOL:e} on {} draws ({:.1}s)",
        ORACLE_SEEDS.end,
        started.elapsed().as_secs_f64()
    ))
}

// ---- gradients ----------------------------------------------------------

pub const GRAD_WINDOW: usize = 6;

pub fn gradient_configs() -> Vec<ModelConfig> {
    let t = GRAD_WINDOW;
    vec![
        ModelConfig::EpiGnn(EpiGnnConfig { window: t, filters: 2, attention_dim: 3, ..EpiGnnConfig::default() }),
        ModelConfig::ColaGnn(ColaGnnConfig { window: t, hidden: 3, filters: 2, layer_dim: 3, ..ColaGnnConfig::default() }),
        ModelConfig::Hybrid(HybridConfig {
            window: t,
            filters: 2,
            hidden: 4,
            bidirectional: true,
            risk_dim: 3,
            attention_dim: 3,
            residual_window: 2,
            ..HybridConfig::default()
        }),
        ModelConfig::Hybrid(HybridConfig {
            window: t,
            filters: 2,
            hidden: 3,
            cell: CellKind::Gru,
            risk_dim: 2,
            attention_dim: 2,
            ..HybridConfig::default()
        }),
        ModelConfig::Lstm(LstmConfig { window: t, hidden: 3, ..LstmConfig::default() }),
    ]
}

/// Central differences against the tape on N=3, T=6, B=2 synthetic windows.
pub fn gradients_match(config: &ModelConfig) -> Result<usize, String> {
    let (ds, adj) = generate(&SyntheticSpec { regions: 3, length: 60, ..SyntheticSpec::default() });
    let data = Prepared::new(ds, adj, SplitSpec::default(), GRAD_WINDOW, 1).unwrap();
    let mut rng = ModelRng::seed_from_u64(11);
    let mut model = config.build(&data.adjacency, &mut rng).unwrap();
    // zero biases put ReLU inputs exactly on the kink, where differences are one-sided
    scramble(model.params_mut(), &mut rng);
    let (x, y) = data.train.batch(&[0, 5]);
    let report = check(model.params(), 1e-6, 1e-3, 1e-5, |g, p| {
        let pred = model.forward(p, g.constant(x.clone())?, None, None)?;
        model.loss(p, pred, g.constant(y.clone())?)
    })
    .map_err(|e| format!("{}: {e}", config.family()))?;
    ensure!(
        report.passed() && report.checked > 0,
        "{}: {} of {} entries off, worst relative {:e} at {}",
        config.family(),
        report.failures,
        report.checked,
        report.worst_relative,
        report.worst_entry
    );
    Ok(report.checked)
}

pub fn gradients() -> Outcome {
    let started = Instant::now();
    let mut checked = 0;
    for c in gradient_configs() {
        checked += gradients_match(&c)?;
    }
    let secs = started.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!("{checked} entries within rel 1e-3 / abs 1e-5 for epignn, colagnn, hybrid (tanh, gru) and lstm ({secs:.1}s)"))
}

// ---- invariants ---------------------------------------------------------

fn rows_within_unit_norm(label: &str, m: &Tensor) -> Result<(), String> {
    for (i, row) in m.rows().enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        ensure!(norm <= 1.0 + NORM_TOL, "{label}: row {i} has norm {norm}");
    }
    Ok(())
}

fn masked_by(label: &str, m: &Tensor, geo: &Tensor) -> Result<(), String> {
    let n = geo.shape()[0];
    for (idx, v) in m.data().iter().enumerate() {
        let (i, j) = ((idx / n) % n, idx % n);
        ensure!(geo.at(&[i, j]) != 0.0 || *v == 0.0, "{label}: edge ({i},{j}) off the map carries {v}");
    }
    Ok(())
}

fn convex(label: &str, mixed: &Tensor, a: &Tensor, geo: &Tensor) -> Result<(), String> {
    let n = geo.shape()[0];
    for (idx, &d) in mixed.data().iter().enumerate() {
        let (g, x) = (geo.at(&[(idx / n) % n, idx % n]), a.data()[idx]);
        ensure!(
            d >= g.min(x) - 1e-12 && d <= g.max(x) + 1e-12,
            "{label}: entry {idx} = {d} outside [{}, {}]",
            g.min(x),
            g.max(x)
        );
    }
    Ok(())
}

/// Every structural invariant of the three graph models on one seeded draw.
pub fn model_invariants(seed: u64) -> Result<(), String> {
    let mut rng = ModelRng::seed_from_u64(seed);
    let n = rng.gen_range(2..=6);
    let b = rng.gen_range(1..=3);
    let t = 8;
    let adj = random_adjacency(n, &mut rng);
    let geo = adj.matrix().clone();
    let x = random_tensor(&[b, t, n], 0.0, 3.0, &mut rng);

    let epi = EpiGnn::new(
        EpiGnnConfig { window: t, filters: 3, attention_dim: 4, ..EpiGnnConfig::default() },
        &adj,
        &mut rng,
    )
    .unwrap();
    let g = Graph::new();
    let p = epi.params().bind(&g).unwrap();
    let parts = epi.parts(&p, g.constant(x.clone()).unwrap(), None, None).unwrap();
    rows_within_unit_norm("epignn global attention", &parts.attention.value())?;
    masked_by("epignn gated geography", &parts.spatial.value(), &geo)?;
    let corr = parts.correlation.value();
    for (idx, &v) in corr.data().iter().enumerate() {
        ensure!(v >= 0.0, "epignn correlation entry {idx} negative: {v}");
        if (idx / n) % n == idx % n {
            ensure!(v == 0.0, "epignn correlation diagonal {idx} is {v}");
        }
    }

    let cola = ColaGnn::new(
        ColaGnnConfig { window: t, hidden: 4, filters: 2, layer_dim: 4, ..ColaGnnConfig::default() },
        &adj,
        &mut rng,
    )
    .unwrap();
    let g = Graph::new();
    let p = cola.params().bind(&g).unwrap();
    let parts = cola.parts(&p, g.constant(x.clone()).unwrap(), None).unwrap();
    rows_within_unit_norm("colagnn attention", &parts.attention.value())?;
    convex("colagnn fused graph", &parts.graph.value(), &parts.attention.value(), cola.geo_normalized())?;

    let hybrid = Hybrid::new(
        HybridConfig { window: t, filters: 2, hidden: 4, risk_dim: 3, attention_dim: 4, ..HybridConfig::default() },
        &adj,
        &mut rng,
    )
    .unwrap();
    let g = Graph::new();
    let p = hybrid.params().bind(&g).unwrap();
    let parts = hybrid.parts(&p, g.constant(x.clone()).unwrap(), None, None).unwrap();
    rows_within_unit_norm("hybrid global attention", &parts.global_attention.unwrap().value())?;
    let attention = parts.attention.unwrap().value();
    rows_within_unit_norm("hybrid dynamic attention", &attention)?;
    convex("hybrid dynamic graph", &parts.dynamic.unwrap().value(), &attention, hybrid.geo_normalized())?;
    masked_by("hybrid gated geography", &parts.spatial.value(), &geo)?;
    let hybrid_graph = parts.hybrid.value();
    for (i, (row, raw)) in parts.laplacian.value().rows().zip(hybrid_graph.rows()).enumerate() {
        // self-loop added before normalizing
        let degree = raw.iter().sum::<f64>() + 1.0;
        if degree > 1e-6 {
            let s: f64 = row.iter().sum();
            ensure!((s - 1.0).abs() <= 1e-9, "hybrid laplacian row {i} sums to {s}");
        }
    }
    Ok(())
}

/// RMSE ≥ MAE and PCC invariance under `a·x + c` with `a > 0`.
pub fn metric_invariants(seed: u64) -> Result<(), String> {
    let mut rng = ModelRng::seed_from_u64(seed);
    let (r, c) = (rng.gen_range(1..=8), rng.gen_range(1..=5));
    let pred: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-50.0..50.0)).collect();
    let target: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-50.0..50.0)).collect();
    let m = compute(&pred, &target);
    ensure!(m.rmse >= m.mae - 1e-12, "rmse {} < mae {}", m.rmse, m.mae);
    let (a, shift) = (rng.gen_range(0.1..10.0), rng.gen_range(-100.0..100.0));
    let moved: Vec<f64> = pred.iter().map(|v| a * v + shift).collect();
    let moved = compute(&moved, &target);
    if !m.pcc_degenerate {
        ensure!((moved.pcc - m.pcc).abs() <= 1e-9, "pcc {} became {} under affine map", m.pcc, moved.pcc);
    }
    Ok(())
}

pub const INVARIANT_SEEDS: std::ops::Range<u64> = 0..32;

pub fn invariants() -> Outcome {
    for seed in INVARIANT_SEEDS {
        model_invariants(seed)?;
        metric_invariants(seed)?;
    }
    Ok(format!(
        "normalization, convexity, masking, correlation sign, laplacian and metric invariants hold on {} draws",
        INVARIANT_SEEDS.end
    ))
}

// ---- overfit ------------------------------------------------------------

pub const OVERFIT_SAMPLES: usize = 50;
pub const OVERFIT_EPOCHS: usize = 500;
pub const OVERFIT_TARGET: f64 = 0.01;

pub fn overfit_data() -> Prepared {
    let (ds, adj) = generate(&SyntheticSpec::default());
    Prepared::new(ds, adj, SplitSpec::default(), 20, 1).unwrap()
}

/// Final over initial training loss of a 50-window full-batch fit.
pub fn overfit_ratio(family: Family, data: &Prepared) -> Result<(f64, f64), String> {
    let started = Instant::now();
    let mut config = ModelConfig::default_for(family);
    config.set_window(20);
    let losses = overfit(&config, data, OVERFIT_SAMPLES, OVERFIT_EPOCHS, overfit_learning_rate(family), 7)
        .map_err(|e| format!("{family}: {e}"))?;
    let best = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let ratio = best / losses[0];
    Ok((ratio, started.elapsed().as_secs_f64()))
}

pub fn overfit_learning_rate(_family: Family) -> f64 {
    1e-2
}

pub const OVERFIT_FAMILIES: [Family; 4] = [Family::EpiGnn, Family::ColaGnn, Family::Hybrid, Family::Lstm];

pub fn overfitting() -> Outcome {
    let data = overfit_data();
    let mut parts = Vec::new();
    for f in OVERFIT_FAMILIES {
        let (ratio, secs) = overfit_ratio(f, &data)?;
        ensure!(ratio < OVERFIT_TARGET, "{f}: loss only fell to {:.2}% of its start", ratio * 100.0);
        ensure!(secs < 300.0, "{f}: took {secs:.0}s");
        parts.push(format!("{f} {:.3}%", ratio * 100.0));
    }
    Ok(parts.join(", "))
}

// ---- learned graph export -----------------------------------------------

pub const HEATMAP_THRESHOLD: f64 = 0.01;

/// Trains `config` briefly, then checks the exported test-mean graph: the parts
/// add up to the hybrid graph, rows normalize to unit length and more entries
/// clear the threshold than there are geographic edges.
pub fn learned_graph_export(data: &Prepared, config: ModelConfig, epochs: usize) -> Outcome {
    let mut job = TrainJob::new(config, data.dataset.name.clone(), data.test.horizon, 1);
    job.train = TrainConfig { max_epochs: epochs, patience: epochs, ..TrainConfig::default() };
    let out = train(&job, data).map_err(|e| e.to_string())?;
    let export = export_graph(out.model.as_ref(), &data.test, 128)
        .map_err(|e| e.to_string())?
        .ok_or("no learned graph exported")?;
    let n = export.hybrid.len();
    for i in 0..n {
        for j in 0..n {
            let sum = export.dynamic[i][j] + export.spatial[i][j] + export.external[i][j];
            let d = (sum - export.hybrid[i][j]).abs();
            ensure!(d <= NORM_TOL, "entry ({i},{j}) off its decomposition by {d:e}");
        }
    }
    let normalized = row_l2_normalize(&export.hybrid);
    for (i, row) in normalized.iter().enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        ensure!((norm - 1.0).abs() <= NORM_TOL, "row {i} has norm {norm}");
    }
    let learned = count_above(&normalized, HEATMAP_THRESHOLD);
    let geo = count_above(&data.adjacency.matrix().to_rows(), HEATMAP_THRESHOLD);
    ensure!(learned > geo, "{learned} learned entries above {HEATMAP_THRESHOLD} vs {geo} geographic edges");
    Ok(format!("{learned} learned entries above {HEATMAP_THRESHOLD} vs {geo} geographic edges after {epochs} epochs"))
}
