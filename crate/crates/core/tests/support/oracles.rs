//! Literal loop versions of the batched layers, written against the public API.
#![allow(dead_code)]

use epihybrid::colagnn::DilatedConvShape;
use epihybrid::epignn::EpiGnn;
use epihybrid::model::Forecaster;
use epihybrid::{ParamSet, Tensor};
use rand::Rng;

pub fn param<'a>(ps: &'a ParamSet, name: &str) -> &'a Tensor {
    ps.get(ps.find(name).unwrap_or_else(|| panic!("no parameter {name}")))
}

/// Overwrites every parameter (biases and gains included) with `U(-0.5, 0.5)`.
pub fn scramble<R: Rng>(ps: &mut ParamSet, rng: &mut R) {
    let ids: Vec<_> = ps.ids().collect();
    for id in ids {
        ps.get_mut(id).data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
}

pub fn random_tensor<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

fn dims3(t: &Tensor) -> (usize, usize, usize) {
    (t.shape()[0], t.shape()[1], t.shape()[2])
}

/// `[B, T, N]` windows to `[B, N, D]` EpiGNN temporal features.
pub fn epignn_temporal(m: &EpiGnn, x: &Tensor) -> Tensor {
    let (b, t, n) = dims3(x);
    let k = m.config().filters;
    let branches = m.config().branches().unwrap();
    let mut out = Vec::new();
    for bi in 0..b {
        for r in 0..n {
            let series: Vec<f64> = (0..t).map(|s| x.at(&[bi, s, r])).collect();
            for (i, branch) in branches.iter().enumerate() {
                let w = param(m.params(), &format!("conv{i}"));
                for f in 0..k {
                    let span = branch.dilation * (branch.width - 1);
                    // tap 0 multiplies the newest sample of each receptive field
                    let conv: Vec<f64> = (span..t)
                        .map(|end| (0..branch.width).map(|j| w.at(&[f, j]) * series[end - j * branch.dilation]).sum())
                        .collect();
                    if conv.len() == 1 {
                        out.push(conv[0].tanh());
                        continue;
                    }
                    let len = conv.len();
                    for bin in 0..branch.pooled {
                        let lo = bin * len / branch.pooled;
                        let hi = ((bin + 1) * len / branch.pooled).max(lo + 1);
                        out.push(conv[lo..hi].iter().copied().fold(f64::NEG_INFINITY, f64::max).tanh());
                    }
                }
            }
        }
    }
    tensor(&[b, n, m.feature_dim()], out)
}

/// `[B, T, N]` windows to `[B, N, k(1 + L_long)]` short and long dilated features.
pub fn dilated_conv(shape: &DilatedConvShape, short: &Tensor, long: &Tensor, x: &Tensor) -> Tensor {
    let (b, t, n) = dims3(x);
    let mut out = Vec::new();
    for bi in 0..b {
        for r in 0..n {
            let s: Vec<f64> = (0..t).map(|i| x.at(&[bi, i, r])).collect();
            for f in 0..shape.filters {
                out.push((0..t).map(|j| short.at(&[f, j]) * s[j]).sum::<f64>().max(0.0));
            }
            for f in 0..shape.filters {
                for start in 0..shape.long_len {
                    let v: f64 = (0..shape.long_kernel)
                        .map(|j| long.at(&[f, j]) * s[start + j * shape.long_dilation])
                        .sum();
                    out.push(v.max(0.0));
                }
            }
        }
    }
    tensor(&[b, n, shape.dim()], out)
}

/// Returns `(risk [B, N, D], attention [B, N, N])` of global transmission risk.
pub fn global_risk(h: &Tensor, query: &Tensor, key: &Tensor, weight: &Tensor, bias: &Tensor) -> (Tensor, Tensor) {
    let (b, n, d) = dims3(h);
    let f = query.shape()[1];
    let dr = weight.shape()[1];
    let project = |w: &Tensor, bi: usize, i: usize| -> Vec<f64> {
        (0..f).map(|c| (0..d).map(|j| h.at(&[bi, i, j]) * w.at(&[j, c])).sum()).collect()
    };
    let mut attn = Vec::with_capacity(b * n * n);
    let mut risk = Vec::with_capacity(b * n * dr);
    for bi in 0..b {
        for i in 0..n {
            let q = project(query, bi, i);
            let row: Vec<f64> = (0..n)
                .map(|j| {
                    let k = project(key, bi, j);
                    q.iter().zip(&k).map(|(a, c)| a * c).sum()
                })
                .collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let row: Vec<f64> = row.iter().map(|v| v / norm).collect();
            let s: f64 = row.iter().sum();
            risk.extend((0..dr).map(|c| s * weight.at(&[0, c]) + bias.data()[c]));
            attn.extend(row);
        }
    }
    (tensor(&[b, n, dr], risk), tensor(&[b, n, n], attn))
}

fn graph_at(graph: &Tensor, bi: usize, i: usize, j: usize) -> f64 {
    if graph.ndim() == 2 {
        graph.at(&[i, j])
    } else {
        graph.at(&[bi, i, j])
    }
}

/// `A · H · W` for one batch element, with `A` `[N, N]` or `[B, N, N]`.
fn propagate_once(graph: &Tensor, h: &[Vec<Vec<f64>>], w: &Tensor, bi: usize) -> Vec<Vec<f64>> {
    let n = h[bi].len();
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![vec![0.0; dout]; n];
    for i in 0..n {
        let mixed: Vec<f64> = (0..din)
            .map(|c| (0..n).map(|j| graph_at(graph, bi, i, j) * h[bi][j][c]).sum())
            .collect();
        for (o, slot) in out[i].iter_mut().enumerate() {
            *slot = (0..din).map(|c| mixed[c] * w.at(&[c, o])).sum();
        }
    }
    out
}

fn nested(h: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let (b, n, d) = dims3(h);
    (0..b)
        .map(|bi| (0..n).map(|i| (0..d).map(|c| h.at(&[bi, i, c])).collect()).collect())
        .collect()
}

fn flat(h: Vec<Vec<Vec<f64>>>) -> Tensor {
    let (b, n, d) = (h.len(), h[0].len(), h[0][0].len());
    tensor(&[b, n, d], h.into_iter().flatten().flatten().collect())
}

/// Each row divided by `max(row sum, floor)`.
pub fn row_sum_normalize(graph: &Tensor, floor: f64) -> Tensor {
    let n = *graph.shape().last().unwrap();
    let data = graph
        .data()
        .chunks(n)
        .flat_map(|row| {
            let s = row.iter().sum::<f64>().max(floor);
            row.iter().map(move |v| v / s)
        })
        .collect();
    tensor(graph.shape(), data)
}

/// EpiGNN propagation: `H ← ELU(norm(A) · H · W_l)` per layer.
pub fn epignn_gcn(graph: &Tensor, h0: &Tensor, weights: &[&Tensor]) -> Tensor {
    let norm = row_sum_normalize(graph, 1e-6);
    let mut h = nested(h0);
    for w in weights {
        h = (0..h.len())
            .map(|bi| {
                propagate_once(&norm, &h, w, bi)
                    .into_iter()
                    .map(|row| row.into_iter().map(|v| if v > 0.0 { v } else { v.exp() - 1.0 }).collect())
                    .collect()
            })
            .collect();
    }
    flat(h)
}

/// ColaGNN message passing: `H ← ReLU(A · H · W_l + b_l)` per layer.
pub fn message_passing(graph: &Tensor, h0: &Tensor, layers: &[(&Tensor, &Tensor)]) -> Tensor {
    let mut h = nested(h0);
    for (w, bias) in layers {
        h = (0..h.len())
            .map(|bi| {
                propagate_once(graph, &h, w, bi)
                    .into_iter()
                    .map(|row| row.iter().zip(bias.data()).map(|(v, c)| (v + c).max(0.0)).collect())
                    .collect()
            })
            .collect();
    }
    flat(h)
}

/// Hybrid propagation over a ready Laplacian: `H ← LN(ReLU(L · H · W_l))`,
/// returning every layer's output including the input.
pub fn hybrid_gcn(laplacian: &Tensor, h0: &Tensor, layers: &[(&Tensor, &Tensor, &Tensor)]) -> Vec<Tensor> {
    let mut outs = vec![h0.clone()];
    let mut h = nested(h0);
    for (w, gain, bias) in layers {
        h = (0..h.len())
            .map(|bi| {
                propagate_once(laplacian, &h, w, bi)
                    .into_iter()
                    .map(|row| {
                        let row: Vec<f64> = row.into_iter().map(|v| v.max(0.0)).collect();
                        let width = row.len() as f64;
                        let mean = row.iter().sum::<f64>() / width;
                        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / width;
                        let rs = 1.0 / (var + 1e-5).sqrt();
                        row.iter()
                            .enumerate()
                            .map(|(j, v)| (v - mean) * rs * gain.data()[j] + bias.data()[j])
                            .collect()
                    })
                    .collect()
            })
            .collect();
        outs.push(flat(h.clone()));
    }
    outs
}
