//! One tagged configuration type covering every model family.

use serde::{Deserialize, Serialize};

use crate::baselines::{Gar, GarConfig, Lstm, LstmConfig, VarConfig, VarModel};
use crate::colagnn::{ColaGnn, ColaGnnConfig};
use crate::data::{GeoAdjacency, WindowSet};
use crate::epignn::{EpiGnn, EpiGnnConfig};
use crate::error::ModelError;
use crate::hybridgnn::{Hybrid, HybridConfig};
use crate::model::{Family, Forecaster, ModelRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "config")]
pub enum ModelConfig {
    #[serde(rename = "epignn")]
    EpiGnn(EpiGnnConfig),
    #[serde(rename = "colagnn")]
    ColaGnn(ColaGnnConfig),
    #[serde(rename = "hybrid")]
    Hybrid(HybridConfig),
    #[serde(rename = "gar")]
    Gar(GarConfig),
    #[serde(rename = "var")]
    Var(VarConfig),
    #[serde(rename = "lstm")]
    Lstm(LstmConfig),
}

impl ModelConfig {
    pub fn default_for(family: Family) -> Self {
        match family {
            Family::EpiGnn => ModelConfig::EpiGnn(Default::default()),
            Family::ColaGnn => ModelConfig::ColaGnn(Default::default()),
            Family::Hybrid => ModelConfig::Hybrid(Default::default()),
            Family::Gar => ModelConfig::Gar(Default::default()),
            Family::Var => ModelConfig::Var(Default::default()),
            Family::Lstm => ModelConfig::Lstm(Default::default()),
        }
    }

    pub fn family(&self) -> Family {
        match self {
            ModelConfig::EpiGnn(_) => Family::EpiGnn,
            ModelConfig::ColaGnn(_) => Family::ColaGnn,
            ModelConfig::Hybrid(_) => Family::Hybrid,
            ModelConfig::Gar(_) => Family::Gar,
            ModelConfig::Var(_) => Family::Var,
            ModelConfig::Lstm(_) => Family::Lstm,
        }
    }

    pub fn window(&self) -> usize {
        match self {
            ModelConfig::EpiGnn(c) => c.window,
            ModelConfig::ColaGnn(c) => c.window,
            ModelConfig::Hybrid(c) => c.window,
            ModelConfig::Gar(c) => c.window,
            ModelConfig::Var(c) => c.window,
            ModelConfig::Lstm(c) => c.window,
        }
    }

    pub fn set_window(&mut self, window: usize) {
        match self {
            ModelConfig::EpiGnn(c) => c.window = window,
            ModelConfig::ColaGnn(c) => c.window = window,
            ModelConfig::Hybrid(c) => c.window = window,
            ModelConfig::Gar(c) => c.window = window,
            ModelConfig::Var(c) => c.window = window,
            ModelConfig::Lstm(c) => c.window = window,
        }
    }

    /// Same model with every dropout rate set to zero.
    pub fn without_dropout(&self) -> Self {
        let mut c = self.clone();
        match &mut c {
            ModelConfig::EpiGnn(c) => c.dropout = 0.0,
            ModelConfig::ColaGnn(c) => c.dropout = 0.0,
            ModelConfig::Hybrid(c) => c.dropout = 0.0,
            _ => {}
        }
        c
    }

    /// Same model with the explicit weight penalty in the loss set to zero.
    pub fn without_penalty(&self) -> Self {
        let mut c = self.clone();
        match &mut c {
            ModelConfig::ColaGnn(c) => c.lambda = 0.0,
            ModelConfig::Hybrid(c) => c.lambda = 0.0,
            _ => {}
        }
        c
    }

    /// Fitted in closed form rather than by gradient descent.
    pub fn is_closed_form(&self) -> bool {
        !self.family().is_neural()
    }

    /// A freshly initialized (or, for closed-form families, zeroed) model.
    pub fn build(&self, adjacency: &GeoAdjacency, rng: &mut ModelRng) -> Result<Box<dyn Forecaster>, ModelError> {
        Ok(match self {
            ModelConfig::EpiGnn(c) => Box::new(EpiGnn::new(c.clone(), adjacency, rng)?),
            ModelConfig::ColaGnn(c) => Box::new(ColaGnn::new(c.clone(), adjacency, rng)?),
            ModelConfig::Hybrid(c) => Box::new(Hybrid::new(c.clone(), adjacency, rng)?),
            ModelConfig::Gar(c) => Box::new(Gar::new(c.clone())?),
            ModelConfig::Var(c) => Box::new(VarModel::new(c.clone(), adjacency.regions())?),
            ModelConfig::Lstm(c) => Box::new(Lstm::new(c.clone(), rng)?),
        })
    }

    /// Least-squares fit of a GAR or VAR model; `None` for neural families.
    pub fn fit_closed_form(
        &self,
        adjacency: &GeoAdjacency,
        train: &WindowSet,
    ) -> Result<Option<Box<dyn Forecaster>>, ModelError> {
        Ok(match self {
            ModelConfig::Gar(c) => {
                let mut m = Gar::new(c.clone())?;
                m.fit(train)?;
                Some(Box::new(m))
            }
            ModelConfig::Var(c) => {
                let mut m = VarModel::new(c.clone(), adjacency.regions())?;
                m.fit(train)?;
                Some(Box::new(m))
            }
            _ => None,
        })
    }
}
