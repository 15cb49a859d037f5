//! Region-aware convolution, transmission-risk encodings and a learned
//! propagation graph feeding a GCN, with an optional autoregressive head.

use serde::{Deserialize, Serialize};

use crate::data::GeoAdjacency;
use crate::error::ModelError;
use crate::model::{squared_error_sum, Family, Forecaster, ModelRng};
use crate::tensor::{concat, Bound, ConvDirection, ParamId, ParamSet, Tensor, Var};
use crate::TensorError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpiGnnConfig {
    /// Look-back window T.
    pub window: usize,
    pub local_branches: usize,
    pub local_kernel: usize,
    pub periodic_branches: usize,
    pub periodic_kernel: usize,
    pub periodic_dilation: usize,
    /// Branches whose kernel spans the whole window.
    pub global_branches: usize,
    /// Filters per branch.
    pub filters: usize,
    /// Pooled length of local and periodic branches.
    pub pool: usize,
    pub attention_dim: usize,
    pub gcn_layers: usize,
    pub ar_enabled: bool,
    /// Autoregressive look-back; `None` uses the whole window.
    pub ar_window: Option<usize>,
    pub external_enabled: bool,
    pub external_window: usize,
    pub dropout: f64,
    pub weight_decay: f64,
}

impl Default for EpiGnnConfig {
    fn default() -> Self {
        EpiGnnConfig {
            window: 20,
            local_branches: 1,
            local_kernel: 3,
            periodic_branches: 1,
            periodic_kernel: 3,
            periodic_dilation: 2,
            global_branches: 1,
            filters: 8,
            pool: 1,
            attention_dim: 32,
            gcn_layers: 2,
            ar_enabled: true,
            ar_window: None,
            external_enabled: false,
            external_window: 1,
            dropout: 0.2,
            weight_decay: 5e-4,
        }
    }
}

/// One temporal convolution branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Branch {
    pub width: usize,
    pub dilation: usize,
    /// Convolution output length before pooling.
    pub len: usize,
    /// Length after pooling (1 for branches that already produce one step).
    pub pooled: usize,
}

impl EpiGnnConfig {
    pub fn branches(&self) -> Result<Vec<Branch>, ModelError> {
        let t = self.window;
        let mut out = Vec::new();
        let mut add = |count: usize, width: usize, dilation: usize, name: &str| -> Result<(), ModelError> {
            if count == 0 {
                return Ok(());
            }
            if width == 0 || dilation == 0 || dilation * (width - 1) >= t {
                return Err(ModelError::Config(format!(
                    "{name} branch (kernel {width}, dilation {dilation}) does not fit window {t}"
                )));
            }
            let len = t - dilation * (width - 1);
            let pooled = if len > 1 { self.pool } else { 1 };
            if pooled > len {
                return Err(ModelError::Config(format!(
                    "pool size {} exceeds {name} branch length {len}",
                    self.pool
                )));
            }
            for _ in 0..count {
                out.push(Branch {
                    width,
                    dilation,
                    len,
                    pooled,
                });
            }
            Ok(())
        };
        add(self.local_branches, self.local_kernel, 1, "local")?;
        add(self.periodic_branches, self.periodic_kernel, self.periodic_dilation, "periodic")?;
        add(self.global_branches, t, 1, "global")?;
        Ok(out)
    }

    /// Width D of the temporal embedding.
    pub fn feature_dim(&self) -> Result<usize, ModelError> {
        Ok(self.branches()?.iter().map(|b| self.filters * b.pooled).sum())
    }

    pub fn ar_lags(&self) -> usize {
        self.ar_window.unwrap_or(self.window)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.window == 0 {
            return fail("window must be positive".into());
        }
        if self.local_branches + self.periodic_branches + self.global_branches == 0 {
            return fail("at least one convolution branch is required".into());
        }
        if self.periodic_branches > 0 && self.periodic_dilation < 2 {
            return fail("periodic dilation must exceed 1".into());
        }
        if self.filters == 0 || self.pool == 0 || self.attention_dim == 0 {
            return fail("filters, pool and attention_dim must be positive".into());
        }
        if self.ar_enabled && (self.ar_lags() == 0 || self.ar_lags() > self.window) {
            return fail(format!("ar_window {} must be in 1..={}", self.ar_lags(), self.window));
        }
        if self.external_enabled && self.external_window == 0 {
            return fail("external_window must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        self.branches().map(|_| ())
    }
}

#[derive(Debug, Clone)]
struct Ids {
    conv: Vec<ParamId>,
    ltr_weight: ParamId,
    ltr_bias: ParamId,
    query: ParamId,
    key: ParamId,
    gtr_weight: ParamId,
    gtr_bias: ParamId,
    source: (ParamId, ParamId),
    target: (ParamId, ParamId),
    degree_gate: ParamId,
    external_gate: Option<ParamId>,
    gcn: Vec<ParamId>,
    head_weight: ParamId,
    head_bias: ParamId,
    ar: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone)]
pub struct EpiGnn {
    config: EpiGnnConfig,
    branches: Vec<Branch>,
    dim: usize,
    regions: usize,
    params: ParamSet,
    ids: Ids,
    geo: Tensor,
    degrees: Tensor,
    degree_outer: Tensor,
}

/// Intermediate values of one forward pass.
pub struct EpiGnnParts<'g> {
    /// `[B, N, D]` temporal embedding (after dropout).
    pub temporal: Var<'g>,
    pub local_risk: Var<'g>,
    pub global_risk: Var<'g>,
    /// Row-normalized attention `[B, N, N]`.
    pub attention: Var<'g>,
    /// Learned temporal correlation graph `[B, N, N]`.
    pub correlation: Var<'g>,
    /// Degree-gated geography `[N, N]`.
    pub spatial: Var<'g>,
    /// `[B, N, N]`, absent without external inputs.
    pub external: Option<Var<'g>>,
    /// Propagation graph `[B, N, N]`.
    pub graph: Var<'g>,
    pub gcn_input: Var<'g>,
    pub gcn_output: Var<'g>,
    pub prediction: Var<'g>,
}

impl EpiGnn {
    pub fn new(config: EpiGnnConfig, adjacency: &GeoAdjacency, rng: &mut ModelRng) -> Result<Self, ModelError> {
        config.validate()?;
        let branches = config.branches()?;
        let dim = config.feature_dim()?;
        let n = adjacency.regions();
        let (k, f) = (config.filters, config.attention_dim);
        let mut ps = ParamSet::new();
        let conv = branches
            .iter()
            .enumerate()
            .map(|(i, b)| ps.weight(rng, &format!("conv{i}"), &[k, b.width], b.width))
            .collect();
        let ids = Ids {
            conv,
            ltr_weight: ps.weight(rng, "ltr.weight", &[1, dim], 1),
            ltr_bias: ps.bias("ltr.bias", &[dim]),
            query: ps.weight(rng, "gtr.query", &[dim, f], dim),
            key: ps.weight(rng, "gtr.key", &[dim, f], dim),
            gtr_weight: ps.weight(rng, "gtr.weight", &[1, dim], 1),
            gtr_bias: ps.bias("gtr.bias", &[dim]),
            source: (ps.weight(rng, "graph.source.weight", &[dim, f], dim), ps.bias("graph.source.bias", &[f])),
            target: (ps.weight(rng, "graph.target.weight", &[dim, f], dim), ps.bias("graph.target.bias", &[f])),
            degree_gate: ps.weight(rng, "graph.degree_gate", &[n, n], n),
            external_gate: config
                .external_enabled
                .then(|| ps.weight(rng, "graph.external_gate", &[n, n], n)),
            gcn: (0..config.gcn_layers)
                .map(|l| ps.weight(rng, &format!("gcn{l}"), &[dim, dim], dim))
                .collect(),
            head_weight: ps.weight(rng, "head.weight", &[2 * dim, 1], 2 * dim),
            head_bias: ps.bias("head.bias", &[n]),
            ar: config.ar_enabled.then(|| {
                let q = config.ar_lags();
                (ps.weight(rng, "ar.weight", &[q, 1], q), ps.bias("ar.bias", &[1]))
            }),
        };
        let d = adjacency.degrees();
        let outer = Tensor::from_parts(vec![n, n], (0..n * n).map(|i| d[i / n] * d[i % n]).collect());
        Ok(EpiGnn {
            branches,
            dim,
            regions: n,
            params: ps,
            ids,
            geo: adjacency.matrix().clone(),
            degrees: Tensor::from_parts(vec![n, 1], d.to_vec()),
            degree_outer: outer,
            config,
        })
    }

    pub fn config(&self) -> &EpiGnnConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.dim
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    /// Region-aware convolution: `[B, T, N]` → `[B, N, D]` after tanh.
    pub fn temporal<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>, TensorError> {
        let (b, t, n) = dims3(x);
        let series = x.transpose()?.reshape(&[b * n, t])?;
        let mut feats = Vec::with_capacity(self.branches.len());
        for (branch, &id) in self.branches.iter().zip(&self.ids.conv) {
            let mut out = series.conv1d(p.get(id), branch.dilation, ConvDirection::Backward)?;
            if branch.len > 1 {
                out = out.adaptive_max_pool(branch.pooled)?;
            }
            feats.push(out.reshape(&[b * n, self.config.filters * branch.pooled])?);
        }
        concat(&feats, 1)?.tanh()?.reshape(&[b, n, self.dim])
    }

    /// `[N, D]` encoding of each region's geographic degree.
    pub fn local_risk<'g>(&self, p: &Bound<'g>) -> Result<Var<'g>, TensorError> {
        let g = p.get(self.ids.ltr_weight).graph();
        g.constant(self.degrees.clone())?
            .linear(p.get(self.ids.ltr_weight), Some(p.get(self.ids.ltr_bias)))
    }

    /// Returns `(H_g [B,N,D], attention [B,N,N])`.
    pub fn global_risk<'g>(&self, p: &Bound<'g>, temporal: Var<'g>) -> Result<(Var<'g>, Var<'g>), TensorError> {
        let q = temporal.matmul(p.get(self.ids.query))?;
        let k = temporal.matmul(p.get(self.ids.key))?;
        let attn = q.matmul(k.transpose()?)?.row_l2_normalize(ROW_EPS)?;
        let risk = attn
            .sum_axis(2)?
            .linear(p.get(self.ids.gtr_weight), Some(p.get(self.ids.gtr_bias)))?;
        Ok((risk, attn))
    }

    /// Returns `(Â [B,N,N], A_spa [N,N], A_e)`.
    #[allow(clippy::type_complexity)]
    pub fn learn_graph<'g>(
        &self,
        p: &Bound<'g>,
        temporal: Var<'g>,
        external: Option<Var<'g>>,
    ) -> Result<(Var<'g>, Var<'g>, Option<Var<'g>>), TensorError> {
        let g = temporal.graph();
        let (ws, bs) = self.ids.source;
        let (wt, bt) = self.ids.target;
        let m1 = temporal.linear(p.get(ws), Some(p.get(bs)))?.tanh()?;
        let m2 = temporal.linear(p.get(wt), Some(p.get(bt)))?.tanh()?;
        let corr = m1
            .matmul(m2.transpose()?)?
            .sub(m2.matmul(m1.transpose()?)?)?
            .tanh()?
            .relu()?;
        let gate = p.get(self.ids.degree_gate).mul(g.constant(self.degree_outer.clone())?)?.sigmoid()?;
        let spatial = gate.mul(g.constant(self.geo.clone())?)?;
        let ext = match (self.ids.external_gate, external) {
            (Some(id), Some(e)) => {
                let s = e.shape();
                let (b, n) = (temporal.shape()[0], self.regions);
                if s.len() != 4 || s[0] != b || s[1] != self.config.external_window || s[2] != n || s[3] != n {
                    return Err(TensorError::ShapeMismatch {
                        op: "external",
                        lhs: vec![b, self.config.external_window, n, n],
                        rhs: s,
                    });
                }
                Some(p.get(id).mul(e.sum_axis(1)?.reshape(&[b, n, n])?)?)
            }
            (Some(_), None) => {
                return Err(TensorError::InvalidArgument {
                    op: "external",
                    reason: "external inputs enabled but none supplied".into(),
                })
            }
            (None, _) => None,
        };
        Ok((corr, spatial, ext))
    }

    /// Every intermediate of the forward pass.
    pub fn parts<'g>(
        &self,
        p: &Bound<'g>,
        x: Var<'g>,
        external: Option<Var<'g>>,
        mut rng: Option<&mut ModelRng>,
    ) -> Result<EpiGnnParts<'g>, TensorError> {
        let (_, t, _) = dims3(x);
        let drop = self.config.dropout;
        let temporal = self.temporal(p, x)?.dropout(drop, rng.as_deref_mut())?;
        let local = self.local_risk(p)?;
        let (global, attention) = self.global_risk(p, temporal)?;
        let (correlation, spatial, ext) = self.learn_graph(p, temporal, external)?;
        let mut graph = correlation.add(spatial)?;
        if let Some(e) = ext {
            graph = graph.add(e)?;
        }
        let h0 = temporal.add(local)?.add(global)?;
        let norm = graph.row_sum_normalize(DEGREE_FLOOR)?;
        let mut h = h0;
        for &w in &self.ids.gcn {
            h = norm.matmul(h)?.matmul(p.get(w))?.elu(1.0)?.dropout(drop, rng.as_deref_mut())?;
        }
        let (b, n) = (x.shape()[0], self.regions);
        let mut pred = concat(&[h0, h], 2)?
            .matmul(p.get(self.ids.head_weight))?
            .reshape(&[b, n])?
            .add(p.get(self.ids.head_bias))?;
        if let Some((w, bias)) = self.ids.ar {
            let q = self.config.ar_lags();
            let ar = x
                .slice(1, t - q, q)?
                .transpose()?
                .matmul(p.get(w))?
                .reshape(&[b, n])?
                .add(p.get(bias))?;
            pred = pred.add(ar)?;
        }
        Ok(EpiGnnParts {
            temporal,
            local_risk: local,
            global_risk: global,
            attention,
            correlation,
            spatial,
            external: ext,
            graph,
            gcn_input: h0,
            gcn_output: h,
            prediction: pred,
        })
    }
}

/// Epsilon of every row L2 normalization.
pub(crate) const ROW_EPS: f64 = 1e-12;
/// Smallest row degree used when normalizing a propagation graph.
pub(crate) const DEGREE_FLOOR: f64 = 1e-6;

pub(crate) fn dims3(x: Var<'_>) -> (usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2])
}

impl Forecaster for EpiGnn {
    fn family(&self) -> Family {
        Family::EpiGnn
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

    fn loss<'g>(&self, _p: &Bound<'g>, pred: Var<'g>, target: Var<'g>) -> Result<Var<'g>, TensorError> {
        squared_error_sum(pred, target)
    }

    fn weight_decay(&self) -> f64 {
        self.config.weight_decay
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serializes")
    }
}
