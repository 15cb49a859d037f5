use super::*;
use crate::model::{fill_param, jitter_zeros};
use crate::tensor::{gradcheck, Graph};
use crate::testutil::{constant, param, param_mut, random_adjacency, rng, uniform, value};
use proptest::prelude::*;

fn small_config() -> ColaGnnConfig {
    ColaGnnConfig {
        window: 6,
        hidden: 4,
        filters: 2,
        layer_dim: 3,
        dropout: 0.0,
        ..ColaGnnConfig::default()
    }
}

fn build(config: ColaGnnConfig, n: usize, seed: u64) -> ColaGnn {
    let mut r = rng(seed);
    let adj = random_adjacency(&mut r, n);
    let mut m = ColaGnn::new(config, &adj, &mut r).unwrap();
    jitter_zeros(m.params_mut(), &mut r, 0.3);
    m
}

fn predict(m: &ColaGnn, x: &Tensor) -> Tensor {
    let g = Graph::new();
    let p = m.params().bind(&g).unwrap();
    value(m.forward(&p, constant(&g, x), None, None).unwrap())
}

#[test]
fn feature_dimension_arithmetic() {
    let s = DilatedConvShape::new(20, 4, 10, 2).unwrap();
    assert_eq!(s.long_len, 2);
    assert_eq!(s.dim(), 12);
    let c = ColaGnnConfig::default();
    assert_eq!(c.conv().unwrap().dim(), 24);
    assert_eq!(c.attention_dim(), 10);
    assert!(DilatedConvShape::new(6, 2, 4, 2).is_err());
    assert!(DilatedConvShape::new(1, 2, 1, 1).is_err());
}

#[test]
fn unit_short_filter_on_ones_gives_window_length() {
    let c = ColaGnnConfig {
        window: 5,
        filters: 1,
        ..small_config()
    };
    let mut m = build(c, 2, 1);
    fill_param(m.params_mut(), "conv.short", 1.0);
    let g = Graph::new();
    let p = m.params().bind(&g).unwrap();
    let h = value(m.conv().forward(&p, constant(&g, &Tensor::ones(&[1, 5, 2]))).unwrap());
    assert_eq!(h.at(&[0, 0, 0]), 5.0);
    assert_eq!(h.at(&[0, 1, 0]), 5.0);
}

/// Per-region loop of the short and long convolution branches.
fn conv_oracle(shape: &DilatedConvShape, short: &Tensor, long: &Tensor, x: &Tensor) -> Vec<f64> {
    let (b, t, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::new();
    for bi in 0..b {
        for r in 0..n {
            let s: Vec<f64> = (0..t).map(|i| x.at(&[bi, i, r])).collect();
            let mut feat = Vec::new();
            for f in 0..shape.filters {
                feat.push((0..t).map(|j| short.at(&[f, j]) * s[j]).sum::<f64>());
            }
            for f in 0..shape.filters {
                for start in 0..shape.long_len {
                    feat.push(
                        (0..shape.long_kernel)
                            .map(|j| long.at(&[f, j]) * s[start + j * shape.long_dilation])
                            .sum::<f64>(),
                    );
                }
            }
            out.extend(feat.into_iter().map(|v| v.max(0.0)));
        }
    }
    out
}

#[test]
fn conv_matches_literal_loop() {
    let c = ColaGnnConfig {
        window: 10,
        ..small_config()
    };
    let m = build(c, 3, 2);
    let x = uniform(&mut rng(3), &[2, 10, 3], -1.0, 1.0);
    let g = Graph::new();
    let p = m.params().bind(&g).unwrap();
    let h = value(m.conv().forward(&p, constant(&g, &x)).unwrap());
    let want = conv_oracle(
        &m.conv().shape,
        param(m.params(), "conv.short"),
        param(m.params(), "conv.long"),
        &x,
    );
    assert_eq!(h.len(), want.len());
    for (a, b) in h.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn encoder_runs_each_region_separately() {
    let m = build(small_config(), 3, 4);
    let x = uniform(&mut rng(5), &[2, 6, 3], 0.0, 1.0);
    let g = Graph::new();
    let p = m.params().bind(&g).unwrap();
    let h = value(m.encode(&p, constant(&g, &x)).unwrap());
    for b in 0..2 {
        for r in 0..3 {
            let series = Tensor::new(&[1, 6], (0..6).map(|t| x.at(&[b, t, r])).collect()).unwrap();
            let one = value(m.rnn().encode(&p, constant(&g, &series)).unwrap());
            for d in 0..4 {
                assert!((h.at(&[b, r, d]) - one.at(&[0, d])).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn zero_input_zero_bias_gives_zero_hidden() {
    let mut r = rng(6);
    let adj = random_adjacency(&mut r, 3);
    let m = ColaGnn::new(small_config(), &adj, &mut r).unwrap();
    let g = Graph::new();
    let p = m.params().bind(&g).unwrap();
    let h = value(m.encode(&p, constant(&g, &Tensor::zeros(&[1, 6, 3]))).unwrap());
    assert!(h.data().iter().all(|&v| v == 0.0));
}

#[test]
fn two_cycle_normalizes_to_halves() {
    let adj = GeoAdjacency::from_matrix(Tensor::ones(&[2, 2]), 2).unwrap();
    let a = symmetric_normalize(&adj);
    assert!(a.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
}

#[test]
fn saturated_gate_selects_either_source() {
    let mut m = build(small_config(), 3, 7);
    let g = Graph::new();
    let h = uniform(&mut rng(8), &[2, 3, 4], -1.0, 1.0);
    for (bias, want_geo) in [(1e3, true), (-1e3, false)] {
        fill_param(m.params_mut(), "gate.bias", bias);
        let p = m.params().bind(&g).unwrap();
        let attn = m.attention.forward(&p, constant(&g, &h)).unwrap();
        let (_, fused) = m.fuse(&p, attn).unwrap();
        let fused = value(fused);
        let attn = value(attn);
        for b in 0..2 {
            for i in 0..3 {
                for j in 0..3 {
                    let want = if want_geo { m.geo_normalized().at(&[i, j]) } else { attn.at(&[b, i, j]) };
                    assert_eq!(fused.at(&[b, i, j]), want);
                }
            }
        }
    }
}

#[test]
fn attention_matches_pairwise_scores() {
    let m = build(small_config(), 3, 9);
    let h = uniform(&mut rng(10), &[1, 3, 4], -1.0, 1.0);
    let g = Graph::new();
    let p = m.params().bind(&g).unwrap();
    let attn = value(m.attention.forward(&p, constant(&g, &h)).unwrap());
    let ps = m.params();
    let (w1, w2, b, v, bv) = (
        param(ps, "attention.source"),
        param(ps, "attention.target"),
        param(ps, "attention.bias"),
        param(ps, "attention.score"),
        param(ps, "attention.score_bias"),
    );
    let da = m.config().attention_dim();
    for i in 0..3 {
        let raw: Vec<f64> = (0..3)
            .map(|j| {
                let mut s = bv.data()[0];
                for c in 0..da {
                    let z: f64 = (0..4).map(|k| h.at(&[0, i, k]) * w1.at(&[k, c]) + h.at(&[0, j, k]) * w2.at(&[k, c])).sum::<f64>()
                        + b.data()[c];
                    let e = if z > 0.0 { z } else { z.exp_m1() };
                    s += e * v.at(&[c, 0]);
                }
                s
            })
            .collect();
        let norm = raw.iter().map(|r| r * r).sum::<f64>().sqrt();
        for j in 0..3 {
            assert!((attn.at(&[0, i, j]) - raw[j] / norm).abs() < 1e-12);
        }
    }
}

#[test]
fn message_passing_examples() {
    let c = ColaGnnConfig {
        layers: 1,
        layer_dim: 24,
        ..ColaGnnConfig::default()
    };
    let mut m = build(c, 3, 11);
    *param_mut(m.params_mut(), "mp0.weight") = Tensor::eye(24);
    fill_param(m.params_mut(), "mp0.bias", 0.0);
    let g = Graph::new();
    let p = m.params().bind(&g).unwrap();
    let h = uniform(&mut rng(12), &[1, 3, 24], -1.0, 1.0);
    let eye = constant(&g, &Tensor::eye(3));
    let out = value(m.propagate(&p, eye, constant(&g, &h)).unwrap());
    assert_eq!(out, h.map(|v| v.max(0.0)));

    fill_param(m.params_mut(), "mp0.bias", -0.25);
    param_mut(m.params_mut(), "mp0.bias").data_mut()[0] = 0.5;
    let p = m.params().bind(&g).unwrap();
    let zero = constant(&g, &Tensor::zeros(&[1, 3, 3]));
    let out = value(m.propagate(&p, zero, constant(&g, &h)).unwrap());
    for row in out.rows() {
        assert_eq!(row[0], 0.5);
        assert!(row[1..].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn message_passing_matches_per_node_loop() {
    let m = build(small_config(), 3, 13);
    let x = uniform(&mut rng(14), &[1, 6, 3], 0.0, 1.0);
    let g = Graph::new();
    let p = m.params().bind(&g).unwrap();
    let parts = m.parts(&p, constant(&g, &x), None).unwrap();
    let (a, mut h) = (value(parts.graph), value(parts.conv).to_rows());
    for l in 0..m.config().layers {
        let (w, b) = (param(m.params(), &format!("mp{l}.weight")), param(m.params(), &format!("mp{l}.bias")));
        let out_dim = w.shape()[1];
        h = (0..3)
            .map(|i| {
                (0..out_dim)
                    .map(|c| {
                        let s: f64 = (0..3)
                            .map(|j| a.at(&[0, i, j]) * (0..h[j].len()).map(|k| w.at(&[k, c]) * h[j][k]).sum::<f64>())
                            .sum();
                        (s + b.data()[c]).max(0.0)
                    })
                    .collect()
            })
            .collect();
    }
    let got = value(parts.propagated);
    for i in 0..3 {
        for c in 0..h[i].len() {
            assert!((got.at(&[0, i, c]) - h[i][c]).abs() < 1e-12);
        }
    }
}

#[test]
fn head_examples() {
    let mut m = build(small_config(), 3, 15);
    let x = uniform(&mut rng(16), &[2, 6, 3], 0.0, 1.0);
    fill_param(m.params_mut(), "head.weight", 0.0);
    fill_param(m.params_mut(), "head.bias", 0.7);
    assert!(predict(&m, &x).data().iter().all(|&v| v == 0.7));

    param_mut(m.params_mut(), "head.weight").data_mut()[1] = 1.0;
    let g = Graph::new();
    let p = m.params().bind(&g).unwrap();
    let parts = m.parts(&p, constant(&g, &x), None).unwrap();
    let (h, y) = (value(parts.hidden), value(parts.prediction));
    for b in 0..2 {
        for r in 0..3 {
            assert!((y.at(&[b, r]) - (h.at(&[b, r, 1]) + 0.7)).abs() < 1e-15);
        }
    }
}

#[test]
fn loss_penalizes_weights_only() {
    let m = build(small_config(), 3, 17);
    let g = Graph::new();
    let p = m.params().bind(&g).unwrap();
    let y = constant(&g, &uniform(&mut rng(18), &[2, 3], 0.0, 1.0));
    let weights: f64 = m
        .params()
        .ids()
        .filter(|&id| m.params().is_weight(id))
        .map(|id| m.params().get(id).data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    let l = m.loss(&p, y, y).unwrap().value().item();
    assert!((l - 5e-4 * weights).abs() < 1e-12);
    assert_eq!(m.weight_decay(), 0.0);
}

#[test]
fn batch_rows_are_independent() {
    let m = build(small_config(), 3, 19);
    let x = uniform(&mut rng(20), &[3, 6, 3], 0.0, 1.0);
    let all = predict(&m, &x);
    let mut bumped = x.clone();
    bumped.data_mut()[0] += 1.0;
    let other = predict(&m, &bumped);
    for b in 1..3 {
        for r in 0..3 {
            assert_eq!(all.at(&[b, r]), other.at(&[b, r]));
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    for cell in [CellKind::Tanh, CellKind::Gru, CellKind::Lstm] {
        let m = build(ColaGnnConfig { cell, ..small_config() }, 3, 21);
        let mut r = rng(22);
        let x = uniform(&mut r, &[2, 6, 3], 0.0, 1.0);
        let y = uniform(&mut r, &[2, 3], 0.0, 1.0);
        let report = gradcheck::check(m.params(), 1e-6, 1e-3, 1e-5, |g, p| {
            let pred = m.forward(p, constant(g, &x), None, None)?;
            m.loss(p, pred, constant(g, &y))
        })
        .unwrap();
        assert!(report.passed(), "{cell}: {report:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gate_and_normalization_invariants(seed in 0u64..1000, n in 2usize..6) {
        let mut r = rng(seed);
        let adj = random_adjacency(&mut r, n);
        let mut m = ColaGnn::new(small_config(), &adj, &mut r).unwrap();
        jitter_zeros(m.params_mut(), &mut r, 0.3);
        let geo = m.geo_normalized();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(geo.at(&[i, j]), geo.at(&[j, i]));
            }
        }
        let x = uniform(&mut r, &[2, 6, n], 0.0, 3.0);
        let g = Graph::new();
        let p = m.params().bind(&g).unwrap();
        let parts = m.parts(&p, constant(&g, &x), None).unwrap();
        prop_assert!(value(parts.gate).data().iter().all(|&v| v > 0.0 && v < 1.0));
        for row in value(parts.attention).rows() {
            prop_assert!(row.iter().map(|v| v * v).sum::<f64>() <= 1.0 + 1e-9);
        }
    }
}
