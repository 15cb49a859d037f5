//! Comparison models: pooled autoregression (GAR), vector autoregression
//! (VAR) and a shared per-region LSTM.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::WindowSet;
use crate::epignn::dims3;
use crate::error::ModelError;
use crate::model::{Family, Forecaster, ModelRng};
use crate::rnn::{CellKind, Rnn};
use crate::tensor::{Bound, ParamId, ParamSet, Tensor, Var};
use crate::TensorError;

/// Diagonal added to the normal equations when they are not positive definite.
pub const RIDGE: f64 = 1e-6;

/// Solution of a least-squares problem with one column per target.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub coefficients: DMatrix<f64>,
    pub ridge_used: bool,
}

/// Solves `min ‖XB − Y‖²` through the normal equations with a Cholesky
/// factorization, retrying with [`RIDGE`] on the diagonal when it fails or
/// when there are fewer rows than unknowns.
pub fn least_squares(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<LeastSquares, ModelError> {
    let gram = x.transpose() * x;
    let rhs = x.transpose() * y;
    let underdetermined = x.nrows() <= x.ncols();
    if !underdetermined {
        if let Some(chol) = gram.clone().cholesky() {
            let b = chol.solve(&rhs);
            if b.iter().all(|v| v.is_finite()) {
                return Ok(LeastSquares {
                    coefficients: b,
                    ridge_used: false,
                });
            }
        }
    }
    let n = gram.nrows();
    let ridged = gram + DMatrix::identity(n, n) * RIDGE;
    let chol = ridged
        .cholesky()
        .ok_or(ModelError::Tensor(TensorError::NonFinite {
            op: "least_squares",
            node: 0,
        }))?;
    Ok(LeastSquares {
        coefficients: chol.solve(&rhs),
        ridge_used: true,
    })
}

fn check_lags(lags: usize, windows: &WindowSet) -> Result<(), ModelError> {
    if lags == 0 || lags > windows.window {
        return Err(ModelError::Config(format!(
            "lag order {lags} must be in 1..={}",
            windows.window
        )));
    }
    if windows.is_empty() {
        return Err(ModelError::Config("no training windows to fit".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarConfig {
    pub window: usize,
    /// `None` uses the whole window.
    pub lags: Option<usize>,
}

impl Default for GarConfig {
    fn default() -> Self {
        GarConfig {
            window: 20,
            lags: None,
        }
    }
}

impl GarConfig {
    pub fn lags(&self) -> usize {
        self.lags.unwrap_or(self.window)
    }
}

/// One coefficient vector and bias shared by every region.
#[derive(Debug, Clone)]
pub struct Gar {
    config: GarConfig,
    params: ParamSet,
    coef: ParamId,
    bias: ParamId,
}

impl Gar {
    pub fn new(config: GarConfig) -> Result<Self, ModelError> {
        let q = config.lags();
        if q == 0 || q > config.window {
            return Err(ModelError::Config(format!("gar lags {q} must be in 1..={}", config.window)));
        }
        let mut params = ParamSet::new();
        let coef = params.fixed("coef", Tensor::zeros(&[q, 1]));
        let bias = params.fixed("bias", Tensor::zeros(&[1]));
        Ok(Gar {
            config,
            params,
            coef,
            bias,
        })
    }

    /// Pooled least squares over every (window, region) pair.
    pub fn fit(&mut self, train: &WindowSet) -> Result<LeastSquares, ModelError> {
        let q = self.config.lags();
        check_lags(q, train)?;
        let (t, n) = (train.window, train.regions());
        let rows = train.len() * n;
        let mut x = DMatrix::zeros(rows, q + 1);
        let mut y = DMatrix::zeros(rows, 1);
        for w in 0..train.len() {
            let s = train.sample(w);
            for r in 0..n {
                let row = w * n + r;
                for j in 0..q {
                    x[(row, j)] = s.input.at(&[t - q + j, r]);
                }
                x[(row, q)] = 1.0;
                y[(row, 0)] = s.target[r];
            }
        }
        let fit = least_squares(&x, &y)?;
        let b = &fit.coefficients;
        self.params.get_mut(self.coef).data_mut().copy_from_slice(&b.as_slice()[..q]);
        self.params.get_mut(self.bias).data_mut()[0] = b[(q, 0)];
        Ok(fit)
    }

    /// Lag weights ordered oldest to newest.
    pub fn coefficients(&self) -> &[f64] {
        self.params.get(self.coef).data()
    }

    pub fn bias(&self) -> f64 {
        self.params.get(self.bias).data()[0]
    }

    pub fn config(&self) -> &GarConfig {
        &self.config
    }
}

impl Forecaster for Gar {
    fn family(&self) -> Family {
        Family::Gar
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
        _rng: Option<&mut ModelRng>,
    ) -> Result<Var<'g>, TensorError> {
        let (b, t, n) = dims3(x);
        let q = self.config.lags();
        x.slice(1, t - q, q)?
            .transpose()?
            .linear(p.get(self.coef), Some(p.get(self.bias)))?
            .reshape(&[b, n])
    }

    fn loss<'g>(&self, _p: &Bound<'g>, pred: Var<'g>, target: Var<'g>) -> Result<Var<'g>, TensorError> {
        mean_squared_error(pred, target)
    }

    fn weight_decay(&self) -> f64 {
        0.0
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarConfig {
    pub window: usize,
    pub lags: usize,
}

impl Default for VarConfig {
    fn default() -> Self {
        VarConfig { window: 20, lags: 5 }
    }
}

/// Per-lag `N × N` transition matrices plus an intercept, fitted jointly.
#[derive(Debug, Clone)]
pub struct VarModel {
    config: VarConfig,
    regions: usize,
    params: ParamSet,
    coef: ParamId,
    intercept: ParamId,
}

impl VarModel {
    pub fn new(config: VarConfig, regions: usize) -> Result<Self, ModelError> {
        if config.lags == 0 || config.lags > config.window {
            return Err(ModelError::Config(format!(
                "var lags {} must be in 1..={}",
                config.lags, config.window
            )));
        }
        let mut params = ParamSet::new();
        let coef = params.fixed("coef", Tensor::zeros(&[config.lags * regions, regions]));
        let intercept = params.fixed("intercept", Tensor::zeros(&[regions]));
        Ok(VarModel {
            config,
            regions,
            params,
            coef,
            intercept,
        })
    }

    pub fn fit(&mut self, train: &WindowSet) -> Result<LeastSquares, ModelError> {
        let p = self.config.lags;
        check_lags(p, train)?;
        let (t, n) = (train.window, self.regions);
        if train.regions() != n {
            return Err(ModelError::Config(format!(
                "model has {n} regions but windows have {}",
                train.regions()
            )));
        }
        let k = p * n;
        let mut x = DMatrix::zeros(train.len(), k + 1);
        let mut y = DMatrix::zeros(train.len(), n);
        for w in 0..train.len() {
            let s = train.sample(w);
            for l in 0..p {
                for r in 0..n {
                    x[(w, l * n + r)] = s.input.at(&[t - p + l, r]);
                }
            }
            x[(w, k)] = 1.0;
            for r in 0..n {
                y[(w, r)] = s.target[r];
            }
        }
        let fit = least_squares(&x, &y)?;
        let b = &fit.coefficients;
        let coef = self.params.get_mut(self.coef);
        for row in 0..k {
            for col in 0..n {
                coef.set(&[row, col], b[(row, col)]);
            }
        }
        let icpt = self.params.get_mut(self.intercept);
        for col in 0..n {
            icpt.data_mut()[col] = b[(k, col)];
        }
        Ok(fit)
    }

    /// Influence of region `from` at `lag` steps back (1 = newest) on `to`.
    pub fn coefficient(&self, lag: usize, to: usize, from: usize) -> f64 {
        let n = self.regions;
        let row = (self.config.lags - lag) * n + from;
        self.params.get(self.coef).at(&[row, to])
    }

    pub fn intercept(&self) -> &[f64] {
        self.params.get(self.intercept).data()
    }
}

impl Forecaster for VarModel {
    fn family(&self) -> Family {
        Family::Var
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
        _rng: Option<&mut ModelRng>,
    ) -> Result<Var<'g>, TensorError> {
        let (b, t, n) = dims3(x);
        let lags = self.config.lags;
        x.slice(1, t - lags, lags)?
            .reshape(&[b, lags * n])?
            .linear(p.get(self.coef), Some(p.get(self.intercept)))
    }

    fn loss<'g>(&self, _p: &Bound<'g>, pred: Var<'g>, target: Var<'g>) -> Result<Var<'g>, TensorError> {
        mean_squared_error(pred, target)
    }

    fn weight_decay(&self) -> f64 {
        0.0
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmConfig {
    pub window: usize,
    pub hidden: usize,
    pub weight_decay: f64,
}

impl Default for LstmConfig {
    fn default() -> Self {
        LstmConfig {
            window: 20,
            hidden: 20,
            weight_decay: 5e-4,
        }
    }
}

/// LSTM shared across regions with a linear read-out of the final state.
#[derive(Debug, Clone)]
pub struct Lstm {
    config: LstmConfig,
    params: ParamSet,
    rnn: Rnn,
    head: (ParamId, ParamId),
}

impl Lstm {
    pub fn new(config: LstmConfig, rng: &mut ModelRng) -> Result<Self, ModelError> {
        if config.hidden == 0 || config.window == 0 {
            return Err(ModelError::Config("lstm hidden size and window must be positive".into()));
        }
        let mut params = ParamSet::new();
        let rnn = Rnn::new(&mut params, rng, "lstm", CellKind::Lstm, config.hidden, false);
        let d = config.hidden;
        let head = (params.weight(rng, "head.weight", &[d, 1], d), params.bias("head.bias", &[1]));
        Ok(Lstm {
            config,
            params,
            rnn,
            head,
        })
    }

    pub fn rnn(&self) -> &Rnn {
        &self.rnn
    }

    pub fn config(&self) -> &LstmConfig {
        &self.config
    }
}

impl Forecaster for Lstm {
    fn family(&self) -> Family {
        Family::Lstm
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
        _rng: Option<&mut ModelRng>,
    ) -> Result<Var<'g>, TensorError> {
        let (b, t, n) = dims3(x);
        let seq = x.transpose()?.reshape(&[b * n, t])?;
        let (w, bias) = self.head;
        self.rnn
            .encode(p, seq)?
            .linear(p.get(w), Some(p.get(bias)))?
            .reshape(&[b, n])
    }

    fn loss<'g>(&self, _p: &Bound<'g>, pred: Var<'g>, target: Var<'g>) -> Result<Var<'g>, TensorError> {
        mean_squared_error(pred, target)
    }

    fn weight_decay(&self) -> f64 {
        self.config.weight_decay
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serializes")
    }
}

/// Mean of squared residuals.
pub fn mean_squared_error<'g>(pred: Var<'g>, target: Var<'g>) -> Result<Var<'g>, TensorError> {
    let n = pred.value().len().max(1) as f64;
    pred.sub(target)?.square()?.sum()?.scale(1.0 / n)
}
