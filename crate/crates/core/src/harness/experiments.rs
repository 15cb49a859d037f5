//! Multi-seed grids: model comparison, ablation and sensitivity sweeps.
//!
//! Every (cell, seed) pair is an independent job. Jobs fan out over
//! [`with_jobs`] and the tables are assembled afterwards in a fixed order, so
//! the output does not depend on how many jobs ran at once.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::MetricSet;
use super::train::{train, TrainConfig, TrainJob, TrainReport};
use super::zoo::ModelConfig;
use crate::data::Prepared;
use crate::error::ModelError;
use crate::hybridgnn::{Ablation, HybridConfig};
use crate::model::Family;
use crate::parallel::with_jobs;

pub const RESULTS_HEADER: &str = "family,dataset,horizon,seed,mae,rmse,pcc,epochs,wall_seconds";

/// Builds the prepared splits for a (window, horizon) pair.
pub type Loader<'a> = dyn Fn(usize, usize) -> Result<Prepared, ModelError> + Sync + 'a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub family: Family,
    pub dataset: String,
    pub horizon: usize,
    pub seed: u64,
    pub metrics: MetricSet,
    pub epochs: usize,
    pub wall_seconds: f64,
}

impl ResultRow {
    /// Wall time is zeroed unless `timing` is set, keeping CSVs reproducible.
    pub fn from_report(r: &TrainReport, timing: bool) -> Self {
        ResultRow {
            family: r.family,
            dataset: r.dataset.clone(),
            horizon: r.horizon,
            seed: r.seed,
            metrics: r.test,
            epochs: r.epochs_run(),
            wall_seconds: if timing { r.wall_seconds } else { 0.0 },
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{},{:.3}",
            self.family,
            self.dataset,
            self.horizon,
            self.seed,
            self.metrics.mae,
            self.metrics.rmse,
            self.metrics.pcc,
            self.epochs,
            self.wall_seconds
        )
    }
}

pub fn results_csv<'a>(rows: impl IntoIterator<Item = &'a ResultRow>) -> String {
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

/// Median (mean of the middle pair for even counts).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub jobs: usize,
    pub timing: bool,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            train: TrainConfig::default(),
            seeds: vec![1, 2, 3],
            jobs: 1,
            timing: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridCell {
    pub label: String,
    pub model: ModelConfig,
    pub horizon: usize,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FailureKind {
    Config,
    Data,
    Numerical,
    Other,
}

/// Why one (cell, seed) run produced no metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub kind: FailureKind,
    pub message: String,
}

impl From<&ModelError> for RunFailure {
    fn from(e: &ModelError) -> Self {
        let kind = match e {
            _ if e.is_numerical() => FailureKind::Numerical,
            ModelError::Config(_) => FailureKind::Config,
            ModelError::Data(_) => FailureKind::Data,
            _ => FailureKind::Other,
        };
        RunFailure { kind, message: e.to_string() }
    }
}

/// One cell of a grid after every seed has run.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub label: String,
    pub family: Family,
    pub horizon: usize,
    /// Per-seed outcome; failures keep their message and do not stop the grid.
    pub runs: Vec<(u64, Result<ResultRow, RunFailure>)>,
}

impl CellSummary {
    pub fn rows(&self) -> impl Iterator<Item = &ResultRow> {
        self.runs.iter().filter_map(|(_, r)| r.as_ref().ok())
    }

    pub fn errors(&self) -> impl Iterator<Item = (u64, &RunFailure)> {
        self.runs.iter().filter_map(|(s, r)| r.as_ref().err().map(|e| (*s, e)))
    }

    /// Per-metric median across the seeds that succeeded.
    pub fn median(&self) -> Option<MetricSet> {
        let pick = |f: fn(&MetricSet) -> f64| median(&self.rows().map(|r| f(&r.metrics)).collect::<Vec<_>>());
        Some(MetricSet {
            mae: pick(|m| m.mae)?,
            rmse: pick(|m| m.rmse)?,
            pcc: pick(|m| m.pcc)?,
            pcc_degenerate: self.rows().any(|r| r.metrics.pcc_degenerate),
        })
    }
}

/// Runs every cell under every seed of `protocol`.
pub fn run_grid(cells: &[GridCell], dataset: &str, loader: &Loader<'_>, protocol: &Protocol) -> Vec<CellSummary> {
    // splits are shared by every job with the same (window, horizon)
    let mut prepared: BTreeMap<(usize, usize), Result<Prepared, RunFailure>> = BTreeMap::new();
    for c in cells {
        prepared
            .entry((c.model.window(), c.horizon))
            .or_insert_with(|| loader(c.model.window(), c.horizon).map_err(|e| RunFailure::from(&e)));
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|i| protocol.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let outcomes = with_jobs(protocol.jobs, |exec| {
        exec.map(jobs.clone(), |(i, seed)| {
            let c = &cells[i];
            let data = prepared[&(c.model.window(), c.horizon)].as_ref().map_err(Clone::clone)?;
            let mut job = TrainJob::new(c.model.clone(), dataset, c.horizon, seed);
            job.train = c.train.clone();
            train(&job, data)
                .map(|o| ResultRow::from_report(&o.report, protocol.timing))
                .map_err(|e| RunFailure::from(&e))
        })
    });
    let mut summaries: Vec<CellSummary> = cells
        .iter()
        .map(|c| CellSummary {
            label: c.label.clone(),
            family: c.model.family(),
            horizon: c.horizon,
            runs: Vec::new(),
        })
        .collect();
    for ((i, seed), out) in jobs.into_iter().zip(outcomes) {
        summaries[i].runs.push((seed, out));
    }
    summaries
}

/// Full Hybrid plus each single-component ablation, at every horizon.
pub fn run_ablation(
    base: &HybridConfig,
    dataset: &str,
    horizons: &[usize],
    loader: &Loader<'_>,
    protocol: &Protocol,
) -> Vec<CellSummary> {
    let cells: Vec<GridCell> = Ablation::ALL
        .iter()
        .flat_map(|a| {
            horizons.iter().map(move |&h| GridCell {
                label: a.key().to_string(),
                model: ModelConfig::Hybrid(a.apply(base)),
                horizon: h,
                train: protocol.train.clone(),
            })
        })
        .collect();
    run_grid(&cells, dataset, loader, protocol)
}

/// Families side by side at every horizon.
pub fn compare_models(
    models: &[ModelConfig],
    dataset: &str,
    horizons: &[usize],
    loader: &Loader<'_>,
    protocol: &Protocol,
) -> Vec<CellSummary> {
    let cells: Vec<GridCell> = models
        .iter()
        .flat_map(|m| {
            horizons.iter().map(move |&h| GridCell {
                label: m.family().to_string(),
                model: m.clone(),
                horizon: h,
                train: protocol.train.clone(),
            })
        })
        .collect();
    run_grid(&cells, dataset, loader, protocol)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    Lookback,
    Filters,
    LearningRate,
    RnnDim,
}

impl SweepParam {
    pub const ALL: [SweepParam; 4] = [
        SweepParam::Lookback,
        SweepParam::Filters,
        SweepParam::LearningRate,
        SweepParam::RnnDim,
    ];

    pub fn key(self) -> &'static str {
        match self {
            SweepParam::Lookback => "lookback",
            SweepParam::Filters => "filters",
            SweepParam::LearningRate => "lr",
            SweepParam::RnnDim => "rnn_dim",
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepParam::Lookback | SweepParam::RnnDim => vec![10.0, 20.0, 30.0, 40.0, 50.0],
            SweepParam::Filters => vec![4.0, 8.0, 16.0, 32.0, 64.0],
            SweepParam::LearningRate => vec![0.001, 0.005, 0.01],
        }
    }

    /// Sets the swept quantity on a copy of the model and training settings.
    pub fn apply(self, model: &ModelConfig, train: &TrainConfig, value: f64) -> Result<(ModelConfig, TrainConfig), ModelError> {
        let (mut model, mut train) = (model.clone(), train.clone());
        let count = || -> Result<usize, ModelError> {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(ModelError::Config(format!("{} must be a positive integer, got {value}", self.key())))
            }
        };
        let unsupported = |m: &ModelConfig| ModelError::Config(format!("{} has no {} setting", m.family(), self.key()));
        match self {
            SweepParam::Lookback => model.set_window(count()?),
            SweepParam::LearningRate => train.learning_rate = value,
            SweepParam::Filters => {
                let k = count()?;
                match &mut model {
                    ModelConfig::EpiGnn(c) => c.filters = k,
                    ModelConfig::ColaGnn(c) => c.filters = k,
                    ModelConfig::Hybrid(c) => c.filters = k,
                    m => return Err(unsupported(m)),
                }
            }
            SweepParam::RnnDim => {
                let k = count()?;
                match &mut model {
                    ModelConfig::ColaGnn(c) => c.hidden = k,
                    ModelConfig::Hybrid(c) => c.hidden = k,
                    ModelConfig::Lstm(c) => c.hidden = k,
                    m => return Err(unsupported(m)),
                }
            }
        }
        train.validate()?;
        Ok((model, train))
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for SweepParam {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "window" | "lookback" | "look_back" => "lookback",
            "learning_rate" | "lr" => "lr",
            "hidden" | "rnn_dim" => "rnn_dim",
            "filters" => "filters",
            _ => return Err(format!("unknown sweep parameter {s:?} (expected lookback, filters, lr or rnn_dim)")),
        };
        Ok(SweepParam::ALL.into_iter().find(|p| p.key() == norm).unwrap())
    }
}

/// One cell per value; the label is the value itself.
pub fn run_sweep(
    param: SweepParam,
    values: &[f64],
    base: &ModelConfig,
    dataset: &str,
    horizon: usize,
    loader: &Loader<'_>,
    protocol: &Protocol,
) -> Result<Vec<CellSummary>, ModelError> {
    let cells = values
        .iter()
        .map(|&v| {
            let (model, train) = param.apply(base, &protocol.train, v)?;
            Ok(GridCell {
                label: format!("{v}"),
                model,
                horizon,
                train,
            })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(run_grid(&cells, dataset, loader, protocol))
}

fn fmt_metric(m: Option<f64>) -> String {
    m.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// Median table with one row per cell:
/// `<label_header>,family,horizon,seeds,mae,rmse,pcc,failed`.
pub fn summary_csv(label_header: &str, cells: &[CellSummary]) -> String {
    let mut out = format!("{label_header},family,horizon,seeds,mae,rmse,pcc,failed\n");
    for c in cells {
        let m = c.median();
        let seeds: Vec<String> = c.runs.iter().map(|(s, _)| s.to_string()).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            c.label,
            c.family,
            c.horizon,
            seeds.join(";"),
            fmt_metric(m.map(|m| m.mae)),
            fmt_metric(m.map(|m| m.rmse)),
            fmt_metric(m.map(|m| m.pcc)),
            c.errors().count()
        ));
    }
    out
}

/// Pivot with one row per label and `rmse@h`, `pcc@h` columns per horizon.
pub fn pivot_csv(label_header: &str, cells: &[CellSummary]) -> String {
    let mut horizons: Vec<usize> = cells.iter().map(|c| c.horizon).collect();
    horizons.sort_unstable();
    horizons.dedup();
    let mut labels: Vec<&str> = Vec::new();
    for c in cells {
        if !labels.contains(&c.label.as_str()) {
            labels.push(&c.label);
        }
    }
    let mut out = String::from(label_header);
    for h in &horizons {
        out.push_str(&format!(",rmse@{h},pcc@{h}"));
    }
    out.push('\n');
    for l in labels {
        out.push_str(l);
        for &h in &horizons {
            let m = cells.iter().find(|c| c.label == l && c.horizon == h).and_then(CellSummary::median);
            out.push_str(&format!(",{},{}", fmt_metric(m.map(|m| m.rmse)), fmt_metric(m.map(|m| m.pcc))));
        }
        out.push('\n');
    }
    out
}

pub const COMPARE_HEADER: &str = "family,dataset,horizon,mae,rmse,pcc,best";

/// Consolidated comparison, one row per (family, horizon), with best marks.
pub fn compare_csv(dataset: &str, cells: &[CellSummary]) -> String {
    let mut out = String::from("family,dataset,horizon,mae,rmse,pcc\n");
    for c in cells {
        let m = c.median();
        out.push_str(&format!(
            "{},{dataset},{},{},{},{}\n",
            c.family,
            c.horizon,
            fmt_metric(m.map(|m| m.mae)),
            fmt_metric(m.map(|m| m.rmse)),
            fmt_metric(m.map(|m| m.pcc))
        ));
    }
    mark_best(&out).expect("table is well formed")
}

/// Adds (or recomputes) a `best` column naming the metrics in which each row
/// leads its horizon: lowest MAE and RMSE, highest PCC. Applying it twice
/// gives the same text.
pub fn mark_best(csv: &str) -> Result<String, String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().ok_or("empty table")?.split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).ok_or(format!("missing column {name}"));
    let (hc, mae, rmse, pcc) = (col("horizon")?, col("mae")?, col("rmse")?, col("pcc")?);
    let best_col = header.iter().position(|h| *h == "best");
    let keep: Vec<usize> = (0..header.len()).filter(|&i| Some(i) != best_col).collect();
    let rows: Vec<Vec<&str>> = lines.filter(|l| !l.is_empty()).map(|l| l.split(',').collect()).collect();
    if let Some(bad) = rows.iter().find(|r| r.len() != header.len()) {
        return Err(format!("row has {} fields, header has {}", bad.len(), header.len()));
    }
    let value = |r: &Vec<&str>, c: usize| r[c].parse::<f64>().ok();
    let lead = |r: &Vec<&str>, c: usize, lower: bool| -> bool {
        let Some(v) = value(r, c) else { return false };
        rows.iter()
            .filter(|o| o[hc] == r[hc])
            .filter_map(|o| value(o, c))
            .all(|o| if lower { v <= o } else { v >= o })
    };
    let mut out: Vec<String> = Vec::with_capacity(rows.len() + 1);
    let mut head: Vec<&str> = keep.iter().map(|&i| header[i]).collect();
    head.push("best");
    out.push(head.join(","));
    for r in &rows {
        let marks: Vec<&str> = [("mae", mae, true), ("rmse", rmse, true), ("pcc", pcc, false)]
            .into_iter()
            .filter(|&(_, c, lower)| lead(r, c, lower))
            .map(|(n, _, _)| n)
            .collect();
        let mut fields: Vec<&str> = keep.iter().map(|&i| r[i]).collect();
        let marks = marks.join(";");
        fields.push(&marks);
        out.push(fields.join(","));
    }
    Ok(out.join("\n") + "\n")
}
