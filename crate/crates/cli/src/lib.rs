//! The `epihybrid` command-line front end.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use epihybrid::data::{Dataset, GeoAdjacency, Prepared};
use epihybrid::harness::experiments::{
    compare_csv, compare_models, pivot_csv, results_csv, run_ablation, run_sweep, summary_csv, CellSummary,
    FailureKind, ResultRow,
};
use epihybrid::harness::train::export_graph;
use epihybrid::harness::{evaluate, heatmap, train, Checkpoint, CheckpointMeta, ModelConfig, TrainJob};
use epihybrid::model::Family;
use epihybrid::{DataError, ModelError};
use thiserror::Error;

use config::{keys_help, parse_file, RunConfig, SEED_ENV};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            _ if e.is_numerical() => CliError::Numerical(e.to_string()),
            ModelError::Config(m) => CliError::Config(m),
            ModelError::Data(d) => d.into(),
            other => CliError::Other(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "epihybrid", version, about = "Graph neural network epidemic forecasting", after_help = keys_help())]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write its report, checkpoint and metrics row.
    Train(Common),
    /// Score a checkpoint on the test split.
    Evaluate(Common),
    /// Compare families across horizons (median over seeds).
    Compare(Common),
    /// Hybrid component ablation across horizons.
    Ablate(Common),
    /// Sensitivity sweep over one hyperparameter.
    Sweep(Common),
    /// Export a relation matrix as CSV and SVG.
    Heatmap(Common),
}

#[derive(Debug, Clone, Args)]
#[command(after_help = keys_help())]
pub struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override any config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub families: Option<String>,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub data_dir: Option<String>,
    #[arg(long)]
    pub cases_file: Option<String>,
    #[arg(long)]
    pub adjacency_file: Option<String>,
    #[arg(long)]
    pub window: Option<String>,
    #[arg(long)]
    pub horizon: Option<String>,
    #[arg(long)]
    pub horizons: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub max_epochs: Option<String>,
    #[arg(long)]
    pub patience: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<String>,
    /// Sweep parameter: lookback, filters, lr or rnn_dim.
    #[arg(long)]
    pub param: Option<String>,
    /// Sweep values, comma-separated.
    #[arg(long)]
    pub values: Option<String>,
    /// heatmap: learned or geo.
    #[arg(long)]
    pub source: Option<String>,
    /// heatmap: hybrid, dynamic, spatial or external.
    #[arg(long)]
    pub matrix: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub jobs: Option<String>,
    /// Record wall-clock seconds in result CSVs.
    #[arg(long)]
    pub timing: bool,
}

impl Common {
    fn flag_pairs(&self) -> Result<Vec<(String, String)>, CliError> {
        let mut out = Vec::new();
        let named = [
            ("family", &self.family),
            ("families", &self.families),
            ("dataset", &self.dataset),
            ("data_dir", &self.data_dir),
            ("cases_file", &self.cases_file),
            ("adjacency_file", &self.adjacency_file),
            ("window", &self.window),
            ("horizon", &self.horizon),
            ("horizons", &self.horizons),
            ("seed", &self.seed),
            ("seeds", &self.seeds),
            ("max_epochs", &self.max_epochs),
            ("patience", &self.patience),
            ("lr", &self.lr),
            ("batch_size", &self.batch_size),
            ("checkpoint", &self.checkpoint),
            ("sweep_param", &self.param),
            ("sweep_values", &self.values),
            ("heatmap_source", &self.source),
            ("heatmap_matrix", &self.matrix),
            ("out", &self.out),
            ("jobs", &self.jobs),
        ];
        // --set first so the dedicated flags win over it
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        for (k, v) in named {
            if let Some(v) = v {
                out.push((k.to_string(), v.clone()));
            }
        }
        if self.timing {
            out.push(("timing".into(), "true".into()));
        }
        Ok(out)
    }

    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let file = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                parse_file(&text, p)?
            }
            None => Vec::new(),
        };
        RunConfig::resolve(&file, &self.flag_pairs()?, std::env::var(SEED_ENV).ok())
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("epihybrid: {e}");
            e.exit_code()
        }
    }
}

/// Runs a parsed command and returns the artifacts it wrote.
pub fn execute(command: &Command) -> Result<Vec<PathBuf>, CliError> {
    match command {
        Command::Train(c) => cmd_train(&c.resolve()?),
        Command::Evaluate(c) => cmd_evaluate(&c.resolve()?),
        Command::Compare(c) => cmd_compare(&c.resolve()?),
        Command::Ablate(c) => cmd_ablate(&c.resolve()?),
        Command::Sweep(c) => cmd_sweep(&c.resolve()?),
        Command::Heatmap(c) => cmd_heatmap(&c.resolve()?),
    }
}

fn load_named(cfg: &RunConfig, name: &str) -> Result<(Dataset, GeoAdjacency), CliError> {
    if let Some(cases) = cfg.path("cases_file") {
        let adj = cfg
            .path("adjacency_file")
            .ok_or_else(|| CliError::Config("`cases_file` is set but `adjacency_file` is missing".into()))?;
        let ds = Dataset::load(&cases, name, cfg.granularity()?)?;
        let adj = GeoAdjacency::load(&adj, ds.regions())?;
        return Ok((ds, adj));
    }
    match name.parse::<epihybrid::data::DatasetName>() {
        Ok(b) => Ok(b.load(&cfg.data_dir())?),
        Err(_) => Err(CliError::Config(format!(
            "dataset {name:?} is not bundled; set `cases_file` and `adjacency_file`"
        ))),
    }
}

fn prepare(cfg: &RunConfig, ds: &Dataset, adj: &GeoAdjacency, window: usize, horizon: usize) -> Result<Prepared, CliError> {
    Ok(Prepared::new(ds.clone(), adj.clone(), cfg.split()?, window, horizon)?)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir).map_err(|source| DataError::Io { path: dir.clone(), source })?;
    Ok(dir)
}

fn write(path: PathBuf, body: &str) -> Result<PathBuf, CliError> {
    fs::write(&path, body).map_err(|source| DataError::Io { path: path.clone(), source })?;
    Ok(path)
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join("-")
}

fn stem(dataset: &str, family: &str, horizon: &str, seed: &str) -> String {
    format!("{dataset}_{family}_h{horizon}_s{seed}")
}

fn meta(dataset: &str, horizon: usize, seed: u64, data: &Prepared) -> CheckpointMeta {
    CheckpointMeta {
        dataset: dataset.to_string(),
        horizon,
        seed,
        divisors: data.scaler.divisors().to_vec(),
        adjacency: data.adjacency.matrix().to_rows(),
    }
}

fn cmd_train(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let dataset = cfg.dataset()?;
    let family = cfg.family()?;
    let model = cfg.model(family)?;
    let (h, seed) = (cfg.horizon()?, cfg.seed()?);
    let mut job = TrainJob::new(model.clone(), &dataset, h, seed);
    job.train = cfg.train_config()?;
    let timing = cfg.timing()?;
    let (ds, adj) = load_named(cfg, &dataset)?;
    let data = prepare(cfg, &ds, &adj, model.window(), h)?;
    let out = train(&job, &data)?;
    let mut report = out.report;
    if !timing {
        report.wall_seconds = 0.0;
    }

    let dir = out_dir(cfg)?;
    let base = dir.join(stem(&dataset, family.key(), &h.to_string(), &seed.to_string()));
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Other(e.to_string()))?;
    let ck = Checkpoint::capture(&model, out.model.as_ref(), meta(&dataset, h, seed, &data));
    let row = ResultRow::from_report(&report, timing);
    Ok(vec![
        write(with_suffix(&base, "report.json"), &(json + "\n"))?,
        write(with_suffix(&base, "ckpt"), &ck.to_text())?,
        write(with_suffix(&base, "metrics.csv"), &results_csv([&row]))?,
    ])
}

fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint, CliError> {
    let path = cfg
        .path("checkpoint")
        .ok_or_else(|| CliError::Config("missing required key `checkpoint`".into()))?;
    Ok(Checkpoint::load(&path)?)
}

/// Test split for a checkpoint: the configured dataset, or the one it was trained on.
fn checkpoint_data(cfg: &RunConfig, ck: &Checkpoint) -> Result<Prepared, CliError> {
    let name = cfg.explicit("dataset").unwrap_or(&ck.meta.dataset).to_string();
    let (ds, adj) = load_named(cfg, &name)?;
    prepare(cfg, &ds, &adj, ck.config.window(), ck.meta.horizon)
}

fn checkpoint_stem(dir: &Path, ck: &Checkpoint) -> PathBuf {
    dir.join(stem(
        &ck.meta.dataset,
        ck.config.family().key(),
        &ck.meta.horizon.to_string(),
        &ck.meta.seed.to_string(),
    ))
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let ck = load_checkpoint(cfg)?;
    let model = ck.restore()?;
    let data = checkpoint_data(cfg, &ck)?;
    let batch = cfg.train_config()?.batch_size;
    let metrics = evaluate(model.as_ref(), &data.test, &ck.scaler(), batch, Default::default()).map_err(ModelError::from)?;
    let row = ResultRow {
        family: ck.config.family(),
        dataset: ck.meta.dataset.clone(),
        horizon: ck.meta.horizon,
        seed: ck.meta.seed,
        metrics,
        epochs: 0,
        wall_seconds: 0.0,
    };
    let dir = out_dir(cfg)?;
    Ok(vec![write(with_suffix(&checkpoint_stem(&dir, &ck), "eval.csv"), &results_csv([&row]))?])
}

/// Loader over one in-memory dataset for the grid runners.
fn grid_loader<'a>(
    cfg: &'a RunConfig,
    ds: &'a Dataset,
    adj: &'a GeoAdjacency,
) -> impl Fn(usize, usize) -> Result<Prepared, ModelError> + Sync + 'a {
    move |window, horizon| {
        let split = cfg.split().map_err(|e| ModelError::Config(e.to_string()))?;
        Ok(Prepared::new(ds.clone(), adj.clone(), split, window, horizon)?)
    }
}

/// Error for a grid in which some runs failed, after its tables are written.
fn grid_status(cells: &[CellSummary]) -> Result<(), CliError> {
    let mut worst: Option<(FailureKind, String)> = None;
    for c in cells {
        for (seed, f) in c.errors() {
            eprintln!("epihybrid: {} h={} seed={}: {}", c.label, c.horizon, seed, f.message);
            if worst.as_ref().is_none_or(|(k, _)| f.kind > *k) {
                worst = Some((f.kind, f.message.clone()));
            }
        }
    }
    match worst {
        None => Ok(()),
        Some((FailureKind::Config, m)) => Err(CliError::Config(m)),
        Some((FailureKind::Data, m)) => Err(CliError::Data(m)),
        Some((FailureKind::Numerical, m)) => Err(CliError::Numerical(m)),
        Some((FailureKind::Other, m)) => Err(CliError::Other(m)),
    }
}

fn all_rows(cells: &[CellSummary]) -> String {
    results_csv(cells.iter().flat_map(CellSummary::rows))
}

fn finish(written: Vec<PathBuf>, cells: &[CellSummary]) -> Result<Vec<PathBuf>, CliError> {
    grid_status(cells)?;
    Ok(written)
}

fn cmd_compare(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let dataset = cfg.dataset()?;
    let families = cfg.families()?;
    let models = families.iter().map(|&f| cfg.model(f)).collect::<Result<Vec<ModelConfig>, _>>()?;
    let (horizons, protocol) = (cfg.horizons()?, cfg.protocol()?);
    let (ds, adj) = load_named(cfg, &dataset)?;
    let loader = grid_loader(cfg, &ds, &adj);
    let cells = compare_models(&models, &dataset, &horizons, &loader, &protocol);
    let fam: Vec<&str> = families.iter().map(|f| f.key()).collect();
    let base = out_dir(cfg)?.join(stem(&dataset, &fam.join("-"), &join(&horizons), &join(&protocol.seeds)));
    let written = vec![
        write(with_suffix(&base, "compare.csv"), &compare_csv(&dataset, &cells))?,
        write(with_suffix(&base, "results.csv"), &all_rows(&cells))?,
    ];
    finish(written, &cells)
}

fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let dataset = cfg.dataset()?;
    let base_cfg = match cfg.model(Family::Hybrid)? {
        ModelConfig::Hybrid(h) => h,
        _ => unreachable!("hybrid family yields a hybrid config"),
    };
    let (horizons, protocol) = (cfg.horizons()?, cfg.protocol()?);
    let (ds, adj) = load_named(cfg, &dataset)?;
    let loader = grid_loader(cfg, &ds, &adj);
    let cells = run_ablation(&base_cfg, &dataset, &horizons, &loader, &protocol);
    let base = out_dir(cfg)?.join(stem(&dataset, "hybrid", &join(&horizons), &join(&protocol.seeds)));
    let written = vec![
        write(with_suffix(&base, "ablation.csv"), &pivot_csv("variant", &cells))?,
        write(with_suffix(&base, "summary.csv"), &summary_csv("variant", &cells))?,
        write(with_suffix(&base, "results.csv"), &all_rows(&cells))?,
    ];
    finish(written, &cells)
}

fn cmd_sweep(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let dataset = cfg.dataset()?;
    let family = cfg.family()?;
    let model = cfg.model(family)?;
    let (param, values) = cfg.sweep()?;
    let (h, protocol) = (cfg.horizon()?, cfg.protocol()?);
    let (ds, adj) = load_named(cfg, &dataset)?;
    let loader = grid_loader(cfg, &ds, &adj);
    let cells = run_sweep(param, &values, &model, &dataset, h, &loader, &protocol)?;
    let base = out_dir(cfg)?.join(stem(&dataset, family.key(), &h.to_string(), &join(&protocol.seeds)));
    let written = vec![
        write(with_suffix(&base, &format!("sweep-{param}.csv")), &summary_csv(param.key(), &cells))?,
        write(with_suffix(&base, "results.csv"), &all_rows(&cells))?,
    ];
    finish(written, &cells)
}

fn cmd_heatmap(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let (source, which) = cfg.heatmap();
    let ck = load_checkpoint(cfg)?;
    let dir = out_dir(cfg)?;
    let base = checkpoint_stem(&dir, &ck);
    let (matrix, label) = match source.as_str() {
        "geo" => (ck.adjacency()?.matrix().to_rows(), "geo".to_string()),
        "learned" => {
            let model = ck.restore()?;
            let data = checkpoint_data(cfg, &ck)?;
            let batch = cfg.train_config()?.batch_size;
            let g = export_graph(model.as_ref(), &data.test, batch)
                .map_err(ModelError::from)?
                .ok_or_else(|| {
                    CliError::Config(format!(
                        "{} learns no per-input graph; use heatmap_source = geo",
                        ck.config.family()
                    ))
                })?;
            let m = match which.as_str() {
                "hybrid" => g.hybrid,
                "dynamic" => g.dynamic,
                "spatial" => g.spatial,
                "external" => g.external,
                other => return Err(CliError::Config(format!("heatmap_matrix = {other:?}: expected hybrid, dynamic, spatial or external"))),
            };
            (m, which)
        }
        other => return Err(CliError::Config(format!("heatmap_source = {other:?}: expected learned or geo"))),
    };
    let title = format!("{} {} h={} ({label})", ck.meta.dataset, ck.config.family(), ck.meta.horizon);
    let (csv, svg) = heatmap::export(&matrix, &with_suffix(&base, &format!("heatmap-{label}")), &title)?;
    Ok(vec![csv, svg])
}
