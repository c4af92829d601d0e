use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forest::{fit_forest, Criterion, Forest, ForestParams};
use super::population::BasePopulation;
use super::{DgpKind, SimulationSpec};
use crate::baselines::{fit_logistic, ols, LogisticConfig, OlsFit, Regularization};
use crate::data::{Dataset, Schema, UnitRecord};
use crate::engine::Engine;
use crate::error::{Error, Result};

/// Propensities of synthesized units are clipped to this range.
pub const PROPENSITY_CLIP: (f64, f64) = (0.02, 0.98);

/// Synthesis is retried this many times when every unit lands in one group.
pub const MAX_ATTEMPTS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OutcomeDgp {
    Linear(OlsFit),
    Forest(Forest),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SelectionDgp {
    /// Logistic coefficients over the model features, intercept first.
    Logistic(Vec<f64>),
    Forest(Forest),
}

/// Fitted outcome and selection models plus the training residual pools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpModels {
    pub kind: DgpKind,
    /// Covariate interacted with every covariate (interaction models only).
    pub anchor: usize,
    pub outcomes: Vec<OutcomeDgp>,
    pub selection: SelectionDgp,
    pub residuals: Vec<Vec<f64>>,
}

/// Model features of one unit: the covariates, followed for interaction
/// models by the anchor times every covariate.
pub fn model_features(kind: DgpKind, anchor: usize, x: &[f64]) -> Vec<f64> {
    match kind {
        DgpKind::LinearInteractions => {
            let a = x[anchor];
            x.iter().copied().chain(x.iter().map(|v| a * v)).collect()
        }
        _ => x.to_vec(),
    }
}

/// Number of coefficients, intercept included, of the linear models.
pub fn linear_coefficient_count(kind: DgpKind, d: usize) -> usize {
    match kind {
        DgpKind::LinearInteractions => 2 * d + 1,
        _ => d + 1,
    }
}

impl DgpModels {
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        model_features(self.kind, self.anchor, x)
    }

    pub fn outcome_mean(&self, j: usize, x: &[f64]) -> f64 {
        match &self.outcomes[j] {
            OutcomeDgp::Linear(fit) => fit.predict(&self.features(x)),
            OutcomeDgp::Forest(f) => f.predict(x),
        }
    }

    /// Unclipped selection probability.
    pub fn propensity(&self, x: &[f64]) -> f64 {
        match &self.selection {
            SelectionDgp::Logistic(beta) => {
                let z = self.features(x);
                let eta = beta[0] + beta[1..].iter().zip(&z).map(|(b, v)| b * v).sum::<f64>();
                1.0 / (1.0 + (-eta).exp())
            }
            SelectionDgp::Forest(f) => f.predict(x),
        }
    }
}

fn regression_forest(seed: u64, j: usize) -> ForestParams {
    ForestParams::new(10, 10, seed.wrapping_add(1 + j as u64))
}

fn classification_forest(seed: u64) -> ForestParams {
    ForestParams::new(10, 15, seed)
}

/// Trains the outcome and selection models on the training half.
pub fn fit_dgp_models(train: &BasePopulation, spec: &SimulationSpec, engine: &Engine) -> Result<DgpModels> {
    spec.validate()?;
    if train.is_empty() {
        return Err(Error::Simulation("training population is empty".into()));
    }
    let treated = train.labels.iter().filter(|t| **t).count();
    if treated == 0 || treated == train.len() {
        return Err(Error::Simulation(
            "training population has a single treatment group; cannot fit a selection model".into(),
        ));
    }
    let m = train.outcomes[0].len();
    let kind = spec.dgp;
    let anchor = spec.d_continuous + spec.interaction_anchor;
    let feats: Vec<Vec<f64>> = train.rows.iter().map(|x| model_features(kind, anchor, x)).collect();

    let ys: Vec<Vec<f64>> = (0..m).map(|j| train.outcomes.iter().map(|o| o[j]).collect()).collect();
    let outcomes: Vec<OutcomeDgp> = match kind {
        DgpKind::RandomForest => ys
            .iter()
            .enumerate()
            .map(|(j, y)| OutcomeDgp::Forest(fit_forest(&train.rows, y, Criterion::Variance, &regression_forest(spec.seed, j))))
            .collect(),
        _ => ys.iter().map(|y| ols(&feats, y).map(OutcomeDgp::Linear)).collect::<Result<_>>()?,
    };

    let selection = match kind {
        DgpKind::RandomForest => {
            let labels: Vec<f64> = train.labels.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
            SelectionDgp::Forest(fit_forest(&train.rows, &labels, Criterion::Gini, &classification_forest(spec.seed)))
        }
        _ => {
            let width = feats[0].len();
            let units = feats.iter().zip(&train.labels).enumerate().map(|(i, (x, &t))| UnitRecord {
                unit_id: i.to_string(),
                treated: t,
                covariates: x.clone(),
                outcomes: vec![],
            });
            let ds = Dataset::from_units(Schema::anonymous(width, 0), units, spec.shard_rows)?;
            let cfg = LogisticConfig {
                max_iterations: 100_000,
                ..LogisticConfig::default()
            };
            let model = fit_logistic(&ds, Regularization::new(1.0, 0.0)?, 0, &cfg, engine)?;
            SelectionDgp::Logistic(model.coefficients)
        }
    };

    let mut models = DgpModels {
        kind,
        anchor,
        outcomes,
        selection,
        residuals: Vec::new(),
    };
    models.residuals = (0..m)
        .map(|j| train.rows.iter().zip(&ys[j]).map(|(x, y)| y - models.outcome_mean(j, x)).collect())
        .collect();
    Ok(models)
}

/// Synthetic observational data on the test half: outcomes are model means
/// plus resampled training residuals, treatment is drawn from the clipped
/// selection model, and no unit has any treatment effect.
pub fn synthesize(
    test: &BasePopulation,
    models: &DgpModels,
    spec: &SimulationSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    if test.is_empty() {
        return Err(Error::Simulation("test population is empty".into()));
    }
    let probs: Vec<f64> = test
        .rows
        .iter()
        .map(|x| models.propensity(x).clamp(PROPENSITY_CLIP.0, PROPENSITY_CLIP.1))
        .collect();
    for _ in 0..MAX_ATTEMPTS {
        let treated: Vec<bool> = probs.iter().map(|p| rng.random::<f64>() < *p).collect();
        let n1 = treated.iter().filter(|t| **t).count();
        if n1 == 0 || n1 == treated.len() {
            continue;
        }
        let units: Vec<UnitRecord> = test
            .rows
            .iter()
            .zip(treated)
            .enumerate()
            .map(|(i, (x, t))| UnitRecord {
                unit_id: format!("s{i}"),
                treated: t,
                covariates: x.clone(),
                outcomes: (0..models.outcomes.len())
                    .map(|j| {
                        let pool = &models.residuals[j];
                        let e = if pool.is_empty() { 0.0 } else { pool[rng.random_range(0..pool.len())] };
                        models.outcome_mean(j, x) + e
                    })
                    .collect(),
            })
            .collect();
        return Dataset::from_units(spec.schema(), units, spec.shard_rows);
    }
    Err(Error::Simulation(format!(
        "every synthesized unit fell in one treatment group in {MAX_ATTEMPTS} attempts"
    )))
}

/// Generator used for the synthesis of replication `r`.
pub fn synthesis_rng(spec: &SimulationSpec, r: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0f5e_1ec7);
    rng.set_stream(r as u64);
    rng
}
