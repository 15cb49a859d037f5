//! Cross-location attention forecaster: a shared RNN per region, dilated
//! convolution features, location-aware attention gated by geography and
//! graph message passing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::GeoAdjacency;
use crate::epignn::{dims3, ROW_EPS};
use crate::error::ModelError;
use crate::model::{l1_with_penalty, Family, Forecaster, ModelRng};
use crate::rnn::{CellKind, Rnn};
use crate::tensor::{concat, Bound, ConvDirection, ParamId, ParamSet, Tensor, Var};
use crate::TensorError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColaGnnConfig {
    pub window: usize,
    pub hidden: usize,
    pub cell: CellKind,
    pub filters: usize,
    /// Long-branch kernel; `None` means half the window.
    pub long_kernel: Option<usize>,
    pub long_dilation: usize,
    /// Additive attention width; `None` means half the hidden size.
    pub attention_dim: Option<usize>,
    pub layers: usize,
    pub layer_dim: usize,
    /// Squared-L2 penalty on weights.
    pub lambda: f64,
    pub dropout: f64,
}

impl Default for ColaGnnConfig {
    fn default() -> Self {
        ColaGnnConfig {
            window: 20,
            hidden: 20,
            cell: CellKind::Tanh,
            filters: 8,
            long_kernel: None,
            long_dilation: 2,
            attention_dim: None,
            layers: 2,
            layer_dim: 32,
            lambda: 5e-4,
            dropout: 0.2,
        }
    }
}

impl ColaGnnConfig {
    pub fn long_kernel(&self) -> usize {
        self.long_kernel.unwrap_or(self.window / 2)
    }

    pub fn attention_dim(&self) -> usize {
        self.attention_dim.unwrap_or(self.hidden / 2).max(1)
    }

    pub fn conv(&self) -> Result<DilatedConvShape, ModelError> {
        DilatedConvShape::new(self.window, self.filters, self.long_kernel(), self.long_dilation)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden == 0 || self.layer_dim == 0 {
            return Err(ModelError::Config("hidden and layer_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.lambda < 0.0 {
            return Err(ModelError::Config("lambda must be non-negative".into()));
        }
        self.conv().map(|_| ())
    }
}

/// Geometry of the two-branch convolution: a short branch spanning the
/// whole window and a dilated long branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DilatedConvShape {
    pub window: usize,
    pub filters: usize,
    pub long_kernel: usize,
    pub long_dilation: usize,
    pub long_len: usize,
}

impl DilatedConvShape {
    pub fn new(window: usize, filters: usize, long_kernel: usize, long_dilation: usize) -> Result<Self, ModelError> {
        if window < 2 || filters == 0 || long_kernel == 0 || long_dilation == 0 {
            return Err(ModelError::Config(format!(
                "convolution needs window >= 2 and positive sizes (window {window}, filters {filters}, \
                 long kernel {long_kernel}, dilation {long_dilation})"
            )));
        }
        let span = long_dilation * (long_kernel - 1);
        if span >= window {
            return Err(ModelError::Config(format!(
                "long kernel {long_kernel} with dilation {long_dilation} does not fit window {window}"
            )));
        }
        Ok(DilatedConvShape {
            window,
            filters,
            long_kernel,
            long_dilation,
            long_len: window - span,
        })
    }

    /// Features per region.
    pub fn dim(&self) -> usize {
        self.filters * (1 + self.long_len)
    }
}

/// Short plus long dilated convolution followed by ReLU.
#[derive(Debug, Clone)]
pub struct DilatedConv {
    pub shape: DilatedConvShape,
    pub short: ParamId,
    pub long: ParamId,
}

impl DilatedConv {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, rng: &mut R, prefix: &str, shape: DilatedConvShape) -> Self {
        let (k, t, s) = (shape.filters, shape.window, shape.long_kernel);
        DilatedConv {
            shape,
            short: ps.weight(rng, &format!("{prefix}.short"), &[k, t], t),
            long: ps.weight(rng, &format!("{prefix}.long"), &[k, s], s),
        }
    }

    /// `[B, T, N]` → `[B, N, k·(1 + L_long)]`.
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>, TensorError> {
        let (b, t, n) = dims3(x);
        let k = self.shape.filters;
        let series = x.transpose()?.reshape(&[b * n, t])?;
        let short = series
            .conv1d(p.get(self.short), 1, ConvDirection::Forward)?
            .reshape(&[b * n, k])?;
        let long = series
            .conv1d(p.get(self.long), self.shape.long_dilation, ConvDirection::Forward)?
            .reshape(&[b * n, k * self.shape.long_len])?;
        concat(&[short, long], 1)?.relu()?.reshape(&[b, n, self.shape.dim()])
    }
}

/// Scores every ordered region pair with `v·ELU(W₁h_i + W₂h_j + b) + b_v`
/// and L2-normalizes each row.
#[derive(Debug, Clone)]
pub struct AdditiveAttention {
    pub dim: usize,
    pub source: ParamId,
    pub target: ParamId,
    pub bias: ParamId,
    pub score: ParamId,
    pub score_bias: ParamId,
}

impl AdditiveAttention {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamSet, rng: &mut R, prefix: &str, input: usize, dim: usize) -> Self {
        AdditiveAttention {
            dim,
            source: ps.weight(rng, &format!("{prefix}.source"), &[input, dim], input),
            target: ps.weight(rng, &format!("{prefix}.target"), &[input, dim], input),
            bias: ps.bias(&format!("{prefix}.bias"), &[dim]),
            score: ps.weight(rng, &format!("{prefix}.score"), &[dim, 1], dim),
            score_bias: ps.bias(&format!("{prefix}.score_bias"), &[1]),
        }
    }

    /// `[B, N, D]` → row-normalized `[B, N, N]`.
    pub fn forward<'g>(&self, p: &Bound<'g>, h: Var<'g>) -> Result<Var<'g>, TensorError> {
        let (b, n, _) = dims3(h);
        let src = h.matmul(p.get(self.source))?.reshape(&[b, n, 1, self.dim])?;
        let dst = h.matmul(p.get(self.target))?.reshape(&[b, 1, n, self.dim])?;
        src.add(dst)?
            .add(p.get(self.bias))?
            .elu(1.0)?
            .matmul(p.get(self.score))?
            .reshape(&[b, n, n])?
            .add(p.get(self.score_bias))?
            .row_l2_normalize(ROW_EPS)
    }
}

/// `D^-1/2 A D^-1/2` of a geographic adjacency (self-loops included).
pub fn symmetric_normalize(adjacency: &GeoAdjacency) -> Tensor {
    let n = adjacency.regions();
    let d = adjacency.degrees();
    let a = adjacency.matrix();
    let data = (0..n * n)
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            let v = a.data()[idx];
            if v == 0.0 {
                0.0
            } else {
                v / (d[i] * d[j]).sqrt()
            }
        })
        .collect();
    Tensor::from_parts(vec![n, n], data)
}

#[derive(Debug, Clone)]
pub struct ColaGnn {
    config: ColaGnnConfig,
    regions: usize,
    params: ParamSet,
    rnn: Rnn,
    conv: DilatedConv,
    attention: AdditiveAttention,
    gate: (ParamId, ParamId),
    layers: Vec<(ParamId, ParamId)>,
    head: (ParamId, ParamId),
    geo: Tensor,
}

/// Intermediate values of one forward pass.
pub struct ColaGnnParts<'g> {
    pub hidden: Var<'g>,
    pub conv: Var<'g>,
    /// Row-normalized attention `A'`.
    pub attention: Var<'g>,
    pub gate: Var<'g>,
    /// Fused location-aware attention.
    pub graph: Var<'g>,
    pub propagated: Var<'g>,
    pub prediction: Var<'g>,
}

impl ColaGnn {
    pub fn new(config: ColaGnnConfig, adjacency: &GeoAdjacency, rng: &mut ModelRng) -> Result<Self, ModelError> {
        config.validate()?;
        let n = adjacency.regions();
        let mut ps = ParamSet::new();
        let rnn = Rnn::new(&mut ps, rng, "rnn", config.cell, config.hidden, false);
        let conv = DilatedConv::new(&mut ps, rng, "conv", config.conv()?);
        let attention = AdditiveAttention::new(&mut ps, rng, "attention", config.hidden, config.attention_dim());
        let gate = (ps.weight(rng, "gate.weight", &[n, n], n), ps.bias("gate.bias", &[1]));
        let mut width = conv.shape.dim();
        let layers = (0..config.layers)
            .map(|l| {
                let ids = (
                    ps.weight(rng, &format!("mp{l}.weight"), &[width, config.layer_dim], width),
                    ps.bias(&format!("mp{l}.bias"), &[config.layer_dim]),
                );
                width = config.layer_dim;
                ids
            })
            .collect();
        let out = config.hidden + width;
        let head = (ps.weight(rng, "head.weight", &[out, 1], out), ps.bias("head.bias", &[1]));
        Ok(ColaGnn {
            regions: n,
            params: ps,
            rnn,
            conv,
            attention,
            gate,
            layers,
            head,
            geo: symmetric_normalize(adjacency),
            config,
        })
    }

    pub fn config(&self) -> &ColaGnnConfig {
        &self.config
    }

    pub fn conv(&self) -> &DilatedConv {
        &self.conv
    }

    pub fn rnn(&self) -> &Rnn {
        &self.rnn
    }

    /// Normalized geography the gate blends with attention.
    pub fn geo_normalized(&self) -> &Tensor {
        &self.geo
    }

    /// Shared RNN over each region's window: `[B, T, N]` → `[B, N, D']`.
    pub fn encode<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>, TensorError> {
        let (b, t, n) = dims3(x);
        let seq = x.transpose()?.reshape(&[b * n, t])?;
        self.rnn.encode(p, seq)?.reshape(&[b, n, self.rnn.output_dim()])
    }

    /// Returns `(gate M, fused graph)` from the row-normalized attention.
    pub fn fuse<'g>(&self, p: &Bound<'g>, attention: Var<'g>) -> Result<(Var<'g>, Var<'g>), TensorError> {
        let g = attention.graph();
        let (w, b) = self.gate;
        let gate = p.get(w).matmul(attention)?.add(p.get(b))?.sigmoid()?;
        let geo = g.constant(self.geo.clone())?;
        let fused = gate.mul(geo)?.add(gate.one_minus()?.mul(attention)?)?;
        Ok((gate, fused))
    }

    /// `layers` rounds of `ReLU(A·H·W + b)`.
    pub fn propagate<'g>(&self, p: &Bound<'g>, graph: Var<'g>, h: Var<'g>) -> Result<Var<'g>, TensorError> {
        let mut h = h;
        for &(w, b) in &self.layers {
            h = graph.matmul(h)?.linear(p.get(w), Some(p.get(b)))?.relu()?;
        }
        Ok(h)
    }

    pub fn parts<'g>(
        &self,
        p: &Bound<'g>,
        x: Var<'g>,
        mut rng: Option<&mut ModelRng>,
    ) -> Result<ColaGnnParts<'g>, TensorError> {
        let drop = self.config.dropout;
        let hidden = self.encode(p, x)?.dropout(drop, rng.as_deref_mut())?;
        let conv = self.conv.forward(p, x)?.dropout(drop, rng.as_deref_mut())?;
        let attention = self.attention.forward(p, hidden)?;
        let (gate, graph) = self.fuse(p, attention)?;
        let propagated = self.propagate(p, graph, conv)?;
        let (w, b) = self.head;
        let (batch, n) = (x.shape()[0], self.regions);
        let prediction = concat(&[hidden, propagated], 2)?
            .linear(p.get(w), Some(p.get(b)))?
            .reshape(&[batch, n])?;
        Ok(ColaGnnParts {
            hidden,
            conv,
            attention,
            gate,
            graph,
            propagated,
            prediction,
        })
    }
}

impl Forecaster for ColaGnn {
    fn family(&self) -> Family {
        Family::ColaGnn
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward<'g>(
        &self,
        p: &Bound<'g>,
        x: Var<'g>,
        _external: Option<Var<'g>>,
        rng: Option<&mut ModelRng>,
    ) -> Result<Var<'g>, TensorError> {
        Ok(self.parts(p, x, rng)?.prediction)
    }

    fn loss<'g>(&self, p: &Bound<'g>, pred: Var<'g>, target: Var<'g>) -> Result<Var<'g>, TensorError> {
        l1_with_penalty(pred, target, p, &self.params, self.config.lambda)
    }

    fn weight_decay(&self) -> f64 {
        0.0
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serializes")
    }
}

#[cfg(test)]
mod tests;
