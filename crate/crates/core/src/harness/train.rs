//! Mini-batch training with early stopping on validation RMSE.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::metrics::{self, MetricSet};
use super::zoo::ModelConfig;
use crate::data::{Prepared, Scaler, WindowSet};
use crate::error::ModelError;
use crate::hybridgnn::DynamicGraphSnapshot;
use crate::model::{Family, Forecaster, ModelRng};
use crate::parallel::Exec;
use crate::tensor::{AdamConfig, AdamState, Graph, ParamSet, Tensor};
use crate::TensorError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            max_epochs: 1500,
            patience: 100,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 {
            return Err(ModelError::Config("batch_size must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(ModelError::Config("max_epochs must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(ModelError::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    pub model: ModelConfig,
    pub dataset: String,
    pub horizon: usize,
    pub seed: u64,
    pub train: TrainConfig,
}

impl TrainJob {
    pub fn new(model: ModelConfig, dataset: impl Into<String>, horizon: usize, seed: u64) -> Self {
        TrainJob {
            model,
            dataset: dataset.into(),
            horizon,
            seed,
            train: TrainConfig::default(),
        }
    }

    pub fn family(&self) -> Family {
        self.model.family()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-batch training objective.
    pub train_loss: f64,
    /// Validation RMSE on the original scale.
    pub valid_rmse: f64,
}

/// Learned graphs averaged over every test window, each `N` rows of `N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphExport {
    pub dynamic: Vec<Vec<f64>>,
    pub spatial: Vec<Vec<f64>>,
    pub external: Vec<Vec<f64>>,
    pub hybrid: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub family: Family,
    pub dataset: String,
    pub horizon: usize,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub valid: MetricSet,
    pub test: MetricSet,
    pub wall_seconds: f64,
    pub graph: Option<GraphExport>,
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.history.len()
    }

    pub fn best_valid_rmse(&self) -> f64 {
        self.history
            .iter()
            .map(|r| r.valid_rmse)
            .fold(f64::INFINITY, f64::min)
    }
}

pub struct TrainOutcome {
    pub report: TrainReport,
    pub model: Box<dyn Forecaster>,
}

/// Scaled predictions for every window in `set`, `[len, N]`.
pub fn predict(model: &dyn Forecaster, set: &WindowSet, batch_size: usize, exec: Exec) -> Result<Tensor, TensorError> {
    let n = set.regions();
    let mut out = Vec::with_capacity(set.len() * n);
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = set.batch(chunk);
        let g = Graph::with_exec(exec);
        let p = model.params().bind(&g)?;
        let pred = model.forward(&p, g.constant(x)?, None, None)?;
        out.extend_from_slice(pred.value().data());
    }
    Ok(Tensor::from_parts(vec![set.len(), n], out))
}

/// Metrics of `model` on `set`, measured after undoing the scaling.
pub fn evaluate(
    model: &dyn Forecaster,
    set: &WindowSet,
    scaler: &Scaler,
    batch_size: usize,
    exec: Exec,
) -> Result<MetricSet, TensorError> {
    let pred = scaler.descale(&predict(model, set, batch_size, exec)?);
    let idx: Vec<usize> = (0..set.len()).collect();
    let (_, target) = set.batch(&idx);
    let target = scaler.descale(&target);
    Ok(metrics::compute(pred.data(), target.data()))
}

/// Batch mean of every learned graph over `set`, or `None` for models
/// without one.
pub fn export_graph(model: &dyn Forecaster, set: &WindowSet, batch_size: usize) -> Result<Option<GraphExport>, TensorError> {
    let n = set.regions();
    let mut sums = [vec![0.0; n * n], vec![0.0; n * n], vec![0.0; n * n], vec![0.0; n * n]];
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = set.batch(chunk);
        let snap = match model.graph_snapshot(&x, None) {
            None => return Ok(None),
            Some(s) => s?,
        };
        let DynamicGraphSnapshot { dynamic, spatial, external, hybrid, .. } = snap;
        for (acc, m) in sums.iter_mut().zip([dynamic, spatial, external, hybrid]) {
            for block in m.data().chunks(n * n) {
                for (a, v) in acc.iter_mut().zip(block) {
                    *a += v;
                }
            }
        }
    }
    let count = set.len() as f64;
    let [dynamic, spatial, external, hybrid] = sums.map(|s| {
        s.chunks(n).map(|row| row.iter().map(|v| v / count).collect()).collect()
    });
    Ok(Some(GraphExport { dynamic, spatial, external, hybrid }))
}

fn numerical(epoch: usize) -> impl Fn(TensorError) -> ModelError {
    move |e| match e {
        TensorError::NonFinite { .. } => ModelError::Numerical { epoch, source: e },
        other => ModelError::Tensor(other),
    }
}

fn check_windows(job: &TrainJob, data: &Prepared) -> Result<(), ModelError> {
    let window = job.model.window();
    for (name, set) in [("train", &data.train), ("valid", &data.valid), ("test", &data.test)] {
        if set.window != window || set.horizon != job.horizon {
            return Err(ModelError::Config(format!(
                "{name} windows are (T={}, h={}) but the job asks for (T={window}, h={})",
                set.window, set.horizon, job.horizon
            )));
        }
        if set.is_empty() {
            return Err(ModelError::Config(format!("{name} split has no windows")));
        }
    }
    Ok(())
}

/// One pass over `train` in a seeded random order; returns the mean batch loss.
fn run_epoch(
    model: &mut dyn Forecaster,
    adam: &mut AdamState,
    train: &WindowSet,
    cfg: &TrainConfig,
    rng: &mut ModelRng,
) -> Result<f64, TensorError> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(cfg.batch_size) {
        let (x, y) = train.batch(chunk);
        let g = Graph::with_exec(cfg.exec);
        let p = model.params().bind(&g)?;
        let pred = model.forward(&p, g.constant(x)?, None, Some(rng))?;
        let loss = model.loss(&p, pred, g.constant(y)?)?;
        total += loss.value().item();
        batches += 1;
        let grads = g.backward(loss)?;
        adam.step(model.params_mut(), &p, &grads);
    }
    Ok(total / batches as f64)
}

fn closed_form(job: &TrainJob, data: &Prepared, model: Box<dyn Forecaster>, started: Instant) -> Result<TrainOutcome, ModelError> {
    let exec = job.train.exec;
    let fitted = predict(model.as_ref(), &data.train, job.train.batch_size, exec)?;
    let idx: Vec<usize> = (0..data.train.len()).collect();
    let (_, target) = data.train.batch(&idx);
    let train_loss = fitted.data().iter().zip(target.data()).map(|(p, t)| (p - t).powi(2)).sum::<f64>()
        / fitted.len() as f64;
    let valid = evaluate(model.as_ref(), &data.valid, &data.scaler, job.train.batch_size, exec)?;
    let test = evaluate(model.as_ref(), &data.test, &data.scaler, job.train.batch_size, exec)?;
    let report = TrainReport {
        family: job.family(),
        dataset: job.dataset.clone(),
        horizon: job.horizon,
        seed: job.seed,
        history: vec![EpochRecord { epoch: 1, train_loss, valid_rmse: valid.rmse }],
        best_epoch: 1,
        valid,
        test,
        wall_seconds: started.elapsed().as_secs_f64(),
        graph: None,
    };
    Ok(TrainOutcome { report, model })
}

/// Trains `job.model` on `data` and reports test metrics of the best
/// validation epoch. GAR and VAR are solved in closed form instead.
pub fn train(job: &TrainJob, data: &Prepared) -> Result<TrainOutcome, ModelError> {
    job.train.validate()?;
    check_windows(job, data)?;
    let started = Instant::now();
    if let Some(model) = job.model.fit_closed_form(&data.adjacency, &data.train)? {
        return closed_form(job, data, model, started);
    }

    let cfg = &job.train;
    let mut rng = ModelRng::seed_from_u64(job.seed);
    let mut model = job.model.build(&data.adjacency, &mut rng)?;
    let mut adam = AdamState::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            weight_decay: model.weight_decay(),
        },
        model.params(),
    );

    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamSet)> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        let train_loss = run_epoch(model.as_mut(), &mut adam, &data.train, cfg, &mut rng).map_err(numerical(epoch))?;
        let valid = evaluate(model.as_ref(), &data.valid, &data.scaler, cfg.batch_size, cfg.exec).map_err(numerical(epoch))?;
        history.push(EpochRecord { epoch, train_loss, valid_rmse: valid.rmse });
        match &best {
            Some((_, rmse, _)) if valid.rmse >= *rmse => stale += 1,
            _ => {
                best = Some((epoch, valid.rmse, model.params().clone()));
                stale = 0;
            }
        }
        if stale >= cfg.patience {
            break;
        }
    }

    let (best_epoch, _, params) = best.expect("at least one epoch ran");
    model.params_mut().load_from(&params)?;
    let last = history.len();
    let valid = evaluate(model.as_ref(), &data.valid, &data.scaler, cfg.batch_size, cfg.exec).map_err(numerical(last))?;
    let test = evaluate(model.as_ref(), &data.test, &data.scaler, cfg.batch_size, cfg.exec).map_err(numerical(last))?;
    let graph = export_graph(model.as_ref(), &data.test, cfg.batch_size).map_err(numerical(last))?;
    let report = TrainReport {
        family: job.family(),
        dataset: job.dataset.clone(),
        horizon: job.horizon,
        seed: job.seed,
        history,
        best_epoch,
        valid,
        test,
        wall_seconds: started.elapsed().as_secs_f64(),
        graph,
    };
    Ok(TrainOutcome { report, model })
}

/// Full-batch fit of `config` on the first `samples` training windows with
/// dropout, penalty and weight decay off. Returns the objective before the first step and after each
/// epoch.
pub fn overfit(
    config: &ModelConfig,
    data: &Prepared,
    samples: usize,
    epochs: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<Vec<f64>, ModelError> {
    let config = config.without_dropout().without_penalty();
    let mut train = data.train.clone();
    train.truncate(samples);
    let mut rng = ModelRng::seed_from_u64(seed);
    let mut model = config.build(&data.adjacency, &mut rng)?;
    let mut adam = AdamState::new(
        AdamConfig { learning_rate, weight_decay: 0.0, ..AdamConfig::default() },
        model.params(),
    );
    let idx: Vec<usize> = (0..train.len()).collect();
    let (x, y) = train.batch(&idx);
    let mut losses = Vec::with_capacity(epochs + 1);
    for epoch in 0..=epochs {
        let g = Graph::new();
        let p = model.params().bind(&g)?;
        let pred = model.forward(&p, g.constant(x.clone())?, None, None).map_err(numerical(epoch))?;
        let loss = model.loss(&p, pred, g.constant(y.clone())?).map_err(numerical(epoch))?;
        losses.push(loss.value().item());
        if epoch == epochs {
            break;
        }
        let grads = g.backward(loss).map_err(numerical(epoch))?;
        adam.step(model.params_mut(), &p, &grads);
    }
    Ok(losses)
}
