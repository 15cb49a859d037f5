//! Hybrid forecaster: ColaGNN-style temporal features and dynamic attention
//! combined with EpiGNN-style transmission risk and degree gating, a layer
//! normalized GCN over the fused graph and a residual-window head.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::colagnn::{symmetric_normalize, AdditiveAttention, DilatedConv, DilatedConvShape};
use crate::data::GeoAdjacency;
use crate::epignn::{dims3, DEGREE_FLOOR, ROW_EPS};
use crate::error::ModelError;
use crate::model::{l1_with_penalty, Family, Forecaster, ModelRng};
use crate::rnn::{CellKind, Rnn};
use crate::tensor::{concat, Bound, Graph, ParamId, ParamSet, Tensor, Var};
use crate::TensorError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    pub window: usize,
    pub filters: usize,
    pub hidden: usize,
    pub cell: CellKind,
    pub bidirectional: bool,
    pub risk_dim: usize,
    pub attention_dim: usize,
    pub gcn_layers: usize,
    /// Concatenate every GCN layer's output with its input.
    pub residual: bool,
    /// Input steps fed to the residual linear head; 0 disables it.
    pub residual_window: usize,
    pub ratio: f64,
    pub lambda: f64,
    pub dropout: f64,
    pub use_ctemp: bool,
    pub use_ltr: bool,
    pub use_gtr: bool,
    pub use_dygraph: bool,
    pub external_enabled: bool,
    pub external_window: usize,
}

impl Default for HybridConfig {
    fn default() -> Self {
        HybridConfig {
            window: 20,
            filters: 8,
            hidden: 20,
            cell: CellKind::Tanh,
            bidirectional: false,
            risk_dim: 32,
            attention_dim: 64,
            gcn_layers: 2,
            residual: true,
            residual_window: 0,
            ratio: 1.0,
            lambda: 5e-4,
            dropout: 0.2,
            use_ctemp: true,
            use_ltr: true,
            use_gtr: true,
            use_dygraph: true,
            external_enabled: false,
            external_window: 1,
        }
    }
}

impl HybridConfig {
    pub fn conv(&self) -> Result<DilatedConvShape, ModelError> {
        DilatedConvShape::new(self.window, self.filters, (self.window / 2).max(1), 2)
    }

    /// `D_c = k·(1 + T − 2(⌊T/2⌋ − 1))`.
    pub fn conv_dim(&self) -> Result<usize, ModelError> {
        Ok(self.conv()?.dim())
    }

    pub fn rnn_dim(&self) -> usize {
        self.hidden * if self.bidirectional { 2 } else { 1 }
    }

    pub fn half_hidden(&self) -> usize {
        self.hidden / 2
    }

    /// Width of the fused node features entering the GCN.
    pub fn node_dim(&self) -> Result<usize, ModelError> {
        let risk = self.risk_dim * (self.use_ltr as usize + self.use_gtr as usize);
        Ok(self.conv_dim()? + risk)
    }

    pub fn gcn_dim(&self) -> Result<usize, ModelError> {
        let w = self.node_dim()?;
        Ok(if self.residual { (self.gcn_layers + 1) * w } else { w })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.window < 2 {
            return fail("window must be at least 2".into());
        }
        if self.hidden < 2 {
            return fail("hidden must be at least 2".into());
        }
        if self.risk_dim == 0 || self.attention_dim == 0 {
            return fail("risk_dim and attention_dim must be positive".into());
        }
        if self.residual_window > self.window {
            return fail(format!(
                "residual_window {} exceeds window {}",
                self.residual_window, self.window
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.lambda < 0.0 || !self.ratio.is_finite() {
            return fail("lambda must be non-negative and ratio finite".into());
        }
        if self.external_enabled && self.external_window == 0 {
            return fail("external_window must be positive".into());
        }
        self.conv().map(|_| ())
    }
}

/// The full model and the four single-component removals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    Full,
    NoConvTemporal,
    NoLocalRisk,
    NoGlobalRisk,
    NoDynamicGraph,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoConvTemporal,
        Ablation::NoLocalRisk,
        Ablation::NoGlobalRisk,
        Ablation::NoDynamicGraph,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoConvTemporal => "w/o-ctemp",
            Ablation::NoLocalRisk => "w/o-ltr",
            Ablation::NoGlobalRisk => "w/o-gtr",
            Ablation::NoDynamicGraph => "w/o-dygraph",
        }
    }

    /// `base` with this variant's component switched off.
    pub fn apply(self, base: &HybridConfig) -> HybridConfig {
        let mut c = base.clone();
        match self {
            Ablation::Full => {}
            Ablation::NoConvTemporal => c.use_ctemp = false,
            Ablation::NoLocalRisk => c.use_ltr = false,
            Ablation::NoGlobalRisk => c.use_gtr = false,
            Ablation::NoDynamicGraph => c.use_dygraph = false,
        }
        c
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.key() == s)
            .ok_or_else(|| format!("unknown ablation variant {s:?}"))
    }
}

/// Learned graphs of one batch, copied out of the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicGraphSnapshot {
    /// `[B, N, N]`; zero when the dynamic graph is disabled.
    pub dynamic: Tensor,
    pub spatial: Tensor,
    /// Summed external relations; zero when none were given.
    pub external: Tensor,
    pub hybrid: Tensor,
    pub laplacian: Tensor,
}

impl DynamicGraphSnapshot {
    /// Batch mean of `m` (`[B, N, N]`) with each row rescaled to sum to one.
    pub fn mean_row_normalized(m: &Tensor) -> Tensor {
        let (b, n) = (m.shape()[0], m.shape()[1]);
        let mut mean = vec![0.0; n * n];
        for block in m.data().chunks(n * n) {
            for (acc, v) in mean.iter_mut().zip(block) {
                *acc += v / b as f64;
            }
        }
        for row in mean.chunks_mut(n) {
            let s: f64 = row.iter().sum();
            if s.abs() > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        Tensor::from_parts(vec![n, n], mean)
    }
}

#[derive(Debug, Clone)]
struct Ids {
    embed: Option<(ParamId, ParamId)>,
    ltr: Option<(ParamId, ParamId)>,
    gtr: Option<[ParamId; 4]>,
    gate: Option<(ParamId, ParamId)>,
    degree_gate: ParamId,
    gcn: Vec<[ParamId; 3]>,
    head: (ParamId, ParamId),
    residual: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone)]
pub struct Hybrid {
    config: HybridConfig,
    regions: usize,
    params: ParamSet,
    conv: Option<DilatedConv>,
    rnn: Rnn,
    attention: Option<AdditiveAttention>,
    ids: Ids,
    geo: Tensor,
    degrees: Tensor,
    degree_outer: Tensor,
}

/// Intermediate values of one forward pass.
pub struct HybridParts<'g> {
    pub conv: Var<'g>,
    pub hidden: Var<'g>,
    pub local_risk: Option<Var<'g>>,
    pub global_risk: Option<Var<'g>>,
    pub global_attention: Option<Var<'g>>,
    pub attention: Option<Var<'g>>,
    pub gate: Option<Var<'g>>,
    pub dynamic: Option<Var<'g>>,
    pub spatial: Var<'g>,
    pub external: Option<Var<'g>>,
    pub hybrid: Var<'g>,
    pub laplacian: Var<'g>,
    pub node_features: Var<'g>,
    pub gcn: Var<'g>,
    pub prediction: Var<'g>,
}

impl Hybrid {
    pub fn new(config: HybridConfig, adjacency: &GeoAdjacency, rng: &mut ModelRng) -> Result<Self, ModelError> {
        config.validate()?;
        let n = adjacency.regions();
        let c = &config;
        let shape = c.conv()?;
        let dc = shape.dim();
        let mut ps = ParamSet::new();
        let conv = c.use_ctemp.then(|| DilatedConv::new(&mut ps, rng, "conv", shape));
        let embed = (!c.use_ctemp)
            .then(|| (ps.weight(rng, "embed.weight", &[c.window, dc], c.window), ps.bias("embed.bias", &[dc])));
        let rnn = Rnn::new(&mut ps, rng, "rnn", c.cell, c.hidden, c.bidirectional);
        let dh = rnn.output_dim();
        let hr = c.risk_dim;
        let ltr = c
            .use_ltr
            .then(|| (ps.weight(rng, "ltr.weight", &[1, hr], 1), ps.bias("ltr.bias", &[hr])));
        let gtr = c.use_gtr.then(|| {
            [
                ps.weight(rng, "gtr.query", &[dc, c.attention_dim], dc),
                ps.weight(rng, "gtr.key", &[dc, c.attention_dim], dc),
                ps.weight(rng, "gtr.weight", &[1, hr], 1),
                ps.bias("gtr.bias", &[hr]),
            ]
        });
        let attention = c
            .use_dygraph
            .then(|| AdditiveAttention::new(&mut ps, rng, "attention", dh, c.half_hidden()));
        let gate = c
            .use_dygraph
            .then(|| (ps.weight(rng, "gate.weight", &[n, n], n), ps.bias("gate.bias", &[1])));
        let degree_gate = ps.weight(rng, "degree_gate", &[n, n], n);
        let width = c.node_dim()?;
        let gcn = (0..c.gcn_layers)
            .map(|l| {
                [
                    ps.weight(rng, &format!("gcn{l}.weight"), &[width, width], width),
                    ps.fixed(&format!("gcn{l}.gain"), Tensor::ones(&[width])),
                    ps.bias(&format!("gcn{l}.bias"), &[width]),
                ]
            })
            .collect();
        let out = c.gcn_dim()? + dh;
        let head = (ps.weight(rng, "head.weight", &[out, 1], out), ps.bias("head.bias", &[1]));
        let rw = c.residual_window;
        let residual =
            (rw > 0).then(|| (ps.weight(rng, "residual.weight", &[rw, 1], rw), ps.bias("residual.bias", &[1])));
        let d = adjacency.degrees();
        Ok(Hybrid {
            regions: n,
            params: ps,
            conv,
            rnn,
            attention,
            ids: Ids {
                embed,
                ltr,
                gtr,
                gate,
                degree_gate,
                gcn,
                head,
                residual,
            },
            geo: symmetric_normalize(adjacency),
            degrees: Tensor::from_parts(vec![n, 1], d.to_vec()),
            degree_outer: Tensor::from_parts(vec![n, n], (0..n * n).map(|i| d[i / n] * d[i % n]).collect()),
            config,
        })
    }

    pub fn config(&self) -> &HybridConfig {
        &self.config
    }

    pub fn conv(&self) -> Option<&DilatedConv> {
        self.conv.as_ref()
    }

    pub fn rnn(&self) -> &Rnn {
        &self.rnn
    }

    pub fn geo_normalized(&self) -> &Tensor {
        &self.geo
    }

    /// Convolution features, or the linear window embedding when the
    /// convolution is ablated: `[B, T, N]` → `[B, N, D_c]`.
    pub fn temporal<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>, TensorError> {
        match (&self.conv, self.ids.embed) {
            (Some(conv), _) => conv.forward(p, x),
            (None, Some((w, b))) => x.transpose()?.linear(p.get(w), Some(p.get(b))),
            (None, None) => unreachable!("one temporal extractor is always built"),
        }
    }

    /// `[B, T, N]` → `[B, N, D_h]`.
    pub fn encode<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>, TensorError> {
        let (b, t, n) = dims3(x);
        let seq = x.transpose()?.reshape(&[b * n, t])?;
        self.rnn.encode(p, seq)?.reshape(&[b, n, self.rnn.output_dim()])
    }

    /// Returns `(H_ltr, H_gtr, attention)` for the enabled encodings.
    #[allow(clippy::type_complexity)]
    pub fn risk<'g>(
        &self,
        p: &Bound<'g>,
        conv: Var<'g>,
    ) -> Result<(Option<Var<'g>>, Option<Var<'g>>, Option<Var<'g>>), TensorError> {
        let g = conv.graph();
        let (b, n, _) = dims3(conv);
        let local = match self.ids.ltr {
            Some((w, bias)) => {
                let l = g.constant(self.degrees.clone())?.linear(p.get(w), Some(p.get(bias)))?;
                // broadcast to the batch so every feature block is [B, N, hidR]
                Some(l.add(g.constant(Tensor::zeros(&[b, n, 1]))?)?)
            }
            None => None,
        };
        let (global, attn) = match self.ids.gtr {
            Some([q, k, w, bias]) => {
                let attn = conv
                    .matmul(p.get(q))?
                    .matmul(conv.matmul(p.get(k))?.transpose()?)?
                    .row_l2_normalize(ROW_EPS)?;
                let risk = attn.sum_axis(2)?.linear(p.get(w), Some(p.get(bias)))?;
                (Some(risk), Some(attn))
            }
            None => (None, None),
        };
        Ok((local, global, attn))
    }

    pub fn parts<'g>(
        &self,
        p: &Bound<'g>,
        x: Var<'g>,
        external: Option<Var<'g>>,
        mut rng: Option<&mut ModelRng>,
    ) -> Result<HybridParts<'g>, TensorError> {
        let g = x.graph();
        let (b, t, n) = dims3(x);
        let drop = self.config.dropout;
        let conv = self.temporal(p, x)?;
        let hidden = self.encode(p, x)?;
        let (local_risk, global_risk, global_attention) = self.risk(p, conv)?;

        let geo = g.constant(self.geo.clone())?;
        let (attention, gate, dynamic) = match (&self.attention, self.ids.gate) {
            (Some(att), Some((w, bias))) => {
                let a = att.forward(p, hidden)?;
                let gate = a.matmul(p.get(w))?.add(p.get(bias))?.sigmoid()?;
                let dynamic = gate.mul(geo)?.add(gate.one_minus()?.mul(a)?)?;
                (Some(a), Some(gate), Some(dynamic))
            }
            _ => (None, None, None),
        };
        let spatial = p
            .get(self.ids.degree_gate)
            .mul(g.constant(self.degree_outer.clone())?)?
            .sigmoid()?
            .mul(geo)?;
        let external = match external {
            Some(e) if self.config.external_enabled => {
                let s = e.shape();
                let want = [b, self.config.external_window, n, n];
                if s != want {
                    return Err(TensorError::ShapeMismatch {
                        op: "external",
                        lhs: want.to_vec(),
                        rhs: s,
                    });
                }
                Some(e.sum_axis(1)?.reshape(&[b, n, n])?)
            }
            Some(_) | None if self.config.external_enabled => {
                return Err(TensorError::InvalidArgument {
                    op: "external",
                    reason: "external inputs enabled but none supplied".into(),
                })
            }
            _ => None,
        };
        // a zero [B, N, N] keeps the batch axis when only the static graph is used
        let mut hybrid = match dynamic {
            Some(d) => d.add(spatial)?,
            None => spatial.add(g.constant(Tensor::zeros(&[b, n, n]))?)?,
        };
        if let Some(e) = external {
            hybrid = hybrid.add(e)?;
        }
        let laplacian = hybrid
            .add(g.constant(Tensor::eye(n))?)?
            .row_sum_normalize(DEGREE_FLOOR)?;

        let mut feats = vec![conv];
        feats.extend(local_risk);
        feats.extend(global_risk);
        let h0 = concat(&feats, 2)?.dropout(drop, rng.as_deref_mut())?;
        let mut outs = vec![h0];
        let mut h = h0;
        for &[w, gain, bias] in &self.ids.gcn {
            h = laplacian
                .matmul(h)?
                .matmul(p.get(w))?
                .relu()?
                .layer_norm(p.get(gain), p.get(bias))?
                .dropout(drop, rng.as_deref_mut())?;
            outs.push(h);
        }
        let gcn = if self.config.residual { concat(&outs, 2)? } else { h };

        let (wh, bh) = self.ids.head;
        let mut prediction = concat(&[gcn, hidden], 2)?
            .linear(p.get(wh), Some(p.get(bh)))?
            .reshape(&[b, n])?
            .scale(self.config.ratio)?;
        if let Some((w, bias)) = self.ids.residual {
            let rw = self.config.residual_window;
            let res = x
                .slice(1, t - rw, rw)?
                .transpose()?
                .linear(p.get(w), Some(p.get(bias)))?
                .reshape(&[b, n])?;
            prediction = prediction.add(res)?;
        }
        Ok(HybridParts {
            conv,
            hidden,
            local_risk,
            global_risk,
            global_attention,
            attention,
            gate,
            dynamic,
            spatial,
            external,
            hybrid,
            laplacian,
            node_features: h0,
            gcn,
            prediction,
        })
    }

    /// Learned graphs for a batch, evaluated without dropout.
    pub fn snapshot(&self, x: &Tensor, external: Option<&Tensor>) -> Result<DynamicGraphSnapshot, TensorError> {
        let g = Graph::new();
        let p = self.params.bind(&g)?;
        let ext = external.map(|e| g.constant(e.clone())).transpose()?;
        let parts = self.parts(&p, g.constant(x.clone())?, ext, None)?;
        let (b, n) = (x.shape()[0], self.regions);
        let zeros = || Tensor::zeros(&[b, n, n]);
        let batched = |v: Var<'_>| -> Tensor {
            let t = v.value();
            if t.ndim() == 3 {
                (*t).clone()
            } else {
                Tensor::from_parts(vec![b, n, n], t.data().repeat(b))
            }
        };
        Ok(DynamicGraphSnapshot {
            dynamic: parts.dynamic.map(batched).unwrap_or_else(zeros),
            spatial: batched(parts.spatial),
            external: parts.external.map(batched).unwrap_or_else(zeros),
            hybrid: batched(parts.hybrid),
            laplacian: batched(parts.laplacian),
        })
    }
}

impl Forecaster for Hybrid {
    fn family(&self) -> Family {
        Family::Hybrid
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
        external: Option<Var<'g>>,
        rng: Option<&mut ModelRng>,
    ) -> Result<Var<'g>, TensorError> {
        Ok(self.parts(p, x, external, rng)?.prediction)
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

    fn graph_snapshot(
        &self,
        x: &Tensor,
        external: Option<&Tensor>,
    ) -> Option<Result<DynamicGraphSnapshot, TensorError>> {
        Some(self.snapshot(x, external))
    }
}
