//! Plain-text checkpoints.
//!
//! ```text
//! EPIHYB1
//! config {"family":"hybrid","config":{...}}
//! meta {"dataset":"australia","horizon":2,...}
//! param gcn0.weight 24x32 0.125 -0.5 ...
//! ```
//!
//! Values are written with Rust's shortest round-trip float formatting, so a
//! saved and reloaded model predicts bit-for-bit what the original did.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::zoo::ModelConfig;
use crate::data::{GeoAdjacency, Scaler};
use crate::error::{DataError, ModelError};
use crate::model::{Forecaster, ModelRng};
use crate::tensor::{ParamSet, Tensor};

pub const MAGIC: &str = "EPIHYB1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub dataset: String,
    pub horizon: usize,
    pub seed: u64,
    /// Per-region scaling divisors fitted on the training split.
    pub divisors: Vec<f64>,
    /// Binary geographic adjacency the model was built against.
    pub adjacency: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub params: ParamSet,
}

fn bad(msg: impl Into<String>) -> DataError {
    DataError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn capture(config: &ModelConfig, model: &dyn Forecaster, meta: CheckpointMeta) -> Self {
        Checkpoint {
            config: config.clone(),
            meta,
            params: model.params().clone(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        let config = serde_json::to_string(&self.config).expect("config serializes");
        let meta = serde_json::to_string(&self.meta).expect("meta serializes");
        writeln!(out, "config {config}").unwrap();
        writeln!(out, "meta {meta}").unwrap();
        for id in self.params.ids() {
            let t = self.params.get(id);
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            write!(out, "param {} {}", self.params.name(id), shape.join("x")).unwrap();
            for v in t.data() {
                write!(out, " {v:?}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, MAGIC)) => {}
            Some((_, other)) => return Err(bad(format!("expected magic {MAGIC:?}, found {other:?}"))),
            None => return Err(bad("empty file")),
        }
        let mut config = None;
        let mut meta = None;
        let mut params = ParamSet::new();
        for (i, line) in lines {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let (key, rest) = line.split_once(' ').ok_or_else(|| bad(format!("line {line_no}: no payload")))?;
            match key {
                "config" => {
                    config = Some(serde_json::from_str(rest).map_err(|e| bad(format!("line {line_no}: {e}")))?);
                }
                "meta" => {
                    meta = Some(serde_json::from_str(rest).map_err(|e| bad(format!("line {line_no}: {e}")))?);
                }
                "param" => {
                    let mut fields = rest.split_ascii_whitespace();
                    let name = fields.next().ok_or_else(|| bad(format!("line {line_no}: missing name")))?;
                    let shape = fields
                        .next()
                        .ok_or_else(|| bad(format!("line {line_no}: missing shape")))?
                        .split('x')
                        .map(str::parse)
                        .collect::<Result<Vec<usize>, _>>()
                        .map_err(|e| bad(format!("line {line_no}: shape: {e}")))?;
                    let values = fields
                        .map(str::parse)
                        .collect::<Result<Vec<f64>, _>>()
                        .map_err(|e| bad(format!("line {line_no}: value: {e}")))?;
                    let t = Tensor::new(&shape, values).map_err(|e| bad(format!("line {line_no}: {e}")))?;
                    if params.find(name).is_some() {
                        return Err(bad(format!("line {line_no}: duplicate parameter {name}")));
                    }
                    params.insert(name, t, false);
                }
                other => return Err(bad(format!("line {line_no}: unknown record {other:?}"))),
            }
        }
        Ok(Checkpoint {
            config: config.ok_or_else(|| bad("missing config record"))?,
            meta: meta.ok_or_else(|| bad("missing meta record"))?,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_text()).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn adjacency(&self) -> Result<GeoAdjacency, DataError> {
        let m = Tensor::from_rows(&self.meta.adjacency).map_err(|e| bad(format!("adjacency: {e}")))?;
        GeoAdjacency::from_matrix(m, self.meta.adjacency.len())
    }

    pub fn scaler(&self) -> Scaler {
        Scaler::from_divisors(self.meta.divisors.clone())
    }

    /// Rebuilds the model and overwrites every parameter with the stored one.
    pub fn restore(&self) -> Result<Box<dyn Forecaster>, ModelError> {
        let adjacency = self.adjacency()?;
        let mut model = self.config.build(&adjacency, &mut ModelRng::seed_from_u64(self.meta.seed))?;
        model
            .params_mut()
            .load_from(&self.params)
            .map_err(|e| bad(format!("parameters do not fit the configured model: {e}")))?;
        Ok(model)
    }
}
