//! Recurrent encoders shared by every model family.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{concat, Bound, ParamId, ParamSet, Var};
use crate::TensorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    /// `h' = tanh(x·w + h·U + b)`.
    Tanh,
    Gru,
    Lstm,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Tanh => 1,
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "rnn" | "tanh" => Ok(CellKind::Tanh),
            "gru" => Ok(CellKind::Gru),
            "lstm" => Ok(CellKind::Lstm),
            _ => Err(format!("unknown rnn cell {s:?} (expected rnn, gru or lstm)")),
        }
    }
}

impl std::fmt::Display for CellKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CellKind::Tanh => "rnn",
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        })
    }
}

/// Parameters of one direction. Gate blocks are laid out side by side along
/// the last axis: GRU as (reset, update, candidate), LSTM as
/// (input, forget, cell, output).
#[derive(Debug, Clone, Copy)]
pub struct CellParams {
    pub input: ParamId,
    pub recurrent: ParamId,
    pub bias: ParamId,
    /// GRU only: bias added to the recurrent candidate term inside the reset gate.
    pub recurrent_bias: Option<ParamId>,
}

/// A single-layer recurrent encoder over scalar-per-step sequences with
/// parameters shared across every series.
#[derive(Debug, Clone)]
pub struct Rnn {
    pub kind: CellKind,
    pub hidden: usize,
    pub bidirectional: bool,
    pub forward: CellParams,
    pub backward: Option<CellParams>,
}

impl Rnn {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        rng: &mut R,
        prefix: &str,
        kind: CellKind,
        hidden: usize,
        bidirectional: bool,
    ) -> Self {
        let mut make = |dir: &str| {
            let g = kind.gates() * hidden;
            CellParams {
                input: params.weight(rng, &format!("{prefix}.{dir}.input"), &[1, g], hidden),
                recurrent: params.weight(rng, &format!("{prefix}.{dir}.recurrent"), &[hidden, g], hidden),
                bias: params.bias(&format!("{prefix}.{dir}.bias"), &[g]),
                recurrent_bias: (kind == CellKind::Gru)
                    .then(|| params.bias(&format!("{prefix}.{dir}.recurrent_bias"), &[hidden])),
            }
        };
        let forward = make("fwd");
        let backward = bidirectional.then(|| make("bwd"));
        Rnn {
            kind,
            hidden,
            bidirectional,
            forward,
            backward,
        }
    }

    /// Width of [`Rnn::encode`]'s output.
    pub fn output_dim(&self) -> usize {
        self.hidden * if self.bidirectional { 2 } else { 1 }
    }

    /// Encodes `rows × T` sequences into `rows × output_dim`.
    ///
    /// The output is the representation at the last time position: the
    /// forward final state, and for bidirectional encoders the backward
    /// state after its first step (which has only seen the last input).
    pub fn encode<'g>(&self, p: &Bound<'g>, seq: Var<'g>) -> Result<Var<'g>, TensorError> {
        let shape = seq.shape();
        let (rows, steps) = (shape[0], shape[1]);
        let fwd = self.run(p, &self.forward, seq, rows, steps, (0..steps).collect())?;
        match &self.backward {
            None => Ok(fwd),
            Some(cell) => {
                let bwd = self.run(p, cell, seq, rows, steps, vec![steps - 1])?;
                concat(&[fwd, bwd], 1)
            }
        }
    }

    fn run<'g>(
        &self,
        p: &Bound<'g>,
        cell: &CellParams,
        seq: Var<'g>,
        rows: usize,
        steps: usize,
        order: Vec<usize>,
    ) -> Result<Var<'g>, TensorError> {
        let d = self.hidden;
        let g = self.kind.gates() * d;
        let projected = seq.reshape(&[rows, steps, 1])?.matmul(p.get(cell.input))?;
        let w_h = p.get(cell.recurrent);
        let bias = p.get(cell.bias);
        let mut h: Option<Var<'g>> = None;
        let mut c: Option<Var<'g>> = None;
        for t in order {
            let xt = projected.slice(1, t, 1)?.reshape(&[rows, g])?.add(bias)?;
            let rec = h.map(|h| h.matmul(w_h)).transpose()?;
            let gate = |v: Var<'g>, k: usize| v.slice(1, k * d, d);
            let (new_h, new_c) = match self.kind {
                CellKind::Tanh => {
                    let pre = match rec {
                        Some(r) => xt.add(r)?,
                        None => xt,
                    };
                    (pre.tanh()?, None)
                }
                CellKind::Gru => {
                    let bias_hn = p.get(cell.recurrent_bias.expect("gru recurrent bias"));
                    let (xr, xz, xn) = (gate(xt, 0)?, gate(xt, 1)?, gate(xt, 2)?);
                    match (rec, h) {
                        (Some(rec), Some(prev)) => {
                            let r = xr.add(gate(rec, 0)?)?.sigmoid()?;
                            let z = xz.add(gate(rec, 1)?)?.sigmoid()?;
                            let n = xn.add(r.mul(gate(rec, 2)?.add(bias_hn)?)?)?.tanh()?;
                            (z.one_minus()?.mul(n)?.add(z.mul(prev)?)?, None)
                        }
                        _ => {
                            let r = xr.sigmoid()?;
                            let z = xz.sigmoid()?;
                            let n = xn.add(r.mul(bias_hn)?)?.tanh()?;
                            (z.one_minus()?.mul(n)?, None)
                        }
                    }
                }
                CellKind::Lstm => {
                    let pre = match rec {
                        Some(r) => xt.add(r)?,
                        None => xt,
                    };
                    let i = gate(pre, 0)?.sigmoid()?;
                    let f = gate(pre, 1)?.sigmoid()?;
                    let cand = gate(pre, 2)?.tanh()?;
                    let o = gate(pre, 3)?.sigmoid()?;
                    let fresh = i.mul(cand)?;
                    let cell_state = match c {
                        Some(prev) => f.mul(prev)?.add(fresh)?,
                        None => fresh,
                    };
                    (o.mul(cell_state.tanh()?)?, Some(cell_state))
                }
            };
            h = Some(new_h);
            c = new_c;
        }
        Ok(h.expect("at least one step"))
    }
}
