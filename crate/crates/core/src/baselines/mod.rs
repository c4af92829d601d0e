//! Modeling baselines: inverse propensity weights from an elastic-net
//! logistic model, grid tuning of that model, and the residual (doubly
//! robust) correction from a linear outcome model.

mod logistic;
mod ols;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use logistic::{fit_logistic, LogisticConfig, PropensityModel, Regularization};
pub use ols::{ols, CoMoments, OlsFit};

use crate::data::{Dataset, MomentSpec};
use crate::diagnostics::column_stats;
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::solvers::WeightVector;

/// Scores are clipped to `[CLIP, 1 - CLIP]` before taking odds.
pub const CLIP: f64 = 1e-6;

/// Control weights proportional to the odds `e / (1 - e)`, summing to 1.
pub fn ipw_from_scores(ds: &Dataset, scores: &[f64]) -> Result<WeightVector> {
    if scores.len() != ds.n_control() {
        return Err(Error::Validation(format!(
            "{} scores for {} control units",
            scores.len(),
            ds.n_control()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!("propensity score {bad}")));
    }
    let odds: Vec<f64> = scores
        .iter()
        .map(|e| {
            let e = e.clamp(CLIP, 1.0 - CLIP);
            e / (1.0 - e)
        })
        .collect();
    let total: f64 = odds.iter().sum();
    let ids = ds.control_ids().into_iter().map(str::to_string).collect();
    WeightVector::new(ids, odds.iter().map(|o| o / total).collect())
}

pub fn ipw_weights(ds: &Dataset, model: &PropensityModel) -> Result<WeightVector> {
    let ids = ds.control_ids();
    if ids.len() != model.control_ids.len() || ids.iter().zip(&model.control_ids).any(|(a, b)| *a != b) {
        return Err(Error::Validation("propensity model was fitted on a different dataset".into()));
    }
    ipw_from_scores(ds, &model.control_scores)
}

/// Hyperparameter grid for [`tune_ipw`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    pub folds: Vec<usize>,
    pub c: Vec<f64>,
    pub l1_ratio: Vec<f64>,
}

impl Default for TuningGrid {
    fn default() -> Self {
        TuningGrid {
            folds: vec![0, 3, 5],
            c: vec![0.0001, 0.0003, 0.001, 0.003, 0.01, 0.03],
            l1_ratio: vec![0.0, 0.25, 0.5, 0.75, 1.0],
        }
    }
}

impl TuningGrid {
    pub fn single(folds: usize, c: f64, l1_ratio: f64) -> Self {
        TuningGrid {
            folds: vec![folds],
            c: vec![c],
            l1_ratio: vec![l1_ratio],
        }
    }

    fn points(&self) -> Vec<(usize, f64, f64)> {
        let mut out = Vec::new();
        for &k in &self.folds {
            for &c in &self.c {
                for &l in &self.l1_ratio {
                    out.push((k, c, l));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub folds: usize,
    pub c: f64,
    pub l1_ratio: f64,
    /// Mean SMD over the moment columns; `None` when the fit failed.
    pub mean_smd: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TuneResult {
    pub model: PropensityModel,
    pub weights: WeightVector,
    /// Every grid point in grid order.
    pub points: Vec<GridPoint>,
}

/// Mean SMD of the weighted controls over the columns of `spec`.
pub fn mean_smd(ds: &Dataset, w: &WeightVector, spec: &MomentSpec, engine: &Engine) -> Result<f64> {
    let w = w.aligned_to(ds)?.normalized()?;
    let stats = column_stats(ds, &w, spec.fns(), engine)?;
    if stats.is_empty() {
        return Ok(0.0);
    }
    Ok(stats.iter().map(|s| s.smd()).sum::<f64>() / stats.len() as f64)
}

/// Fits every grid point and keeps the one with the lowest mean SMD. Ties go
/// to the larger C, then the smaller l1 ratio, then fewer folds.
pub fn tune_ipw(
    ds: &Dataset,
    grid: &TuningGrid,
    spec: &MomentSpec,
    cfg: &LogisticConfig,
    engine: &Engine,
) -> Result<TuneResult> {
    spec.validate(ds.schema())?;
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::Validation("tuning grid is empty".into()));
    }
    let fitted: Vec<Result<(PropensityModel, WeightVector, f64)>> = engine.install(|| {
        points
            .par_iter()
            .map(|&(k, c, l)| {
                let model = fit_logistic(ds, Regularization::new(c, l)?, k, cfg, engine)?;
                let w = ipw_weights(ds, &model)?;
                let smd = mean_smd(ds, &w, spec, engine)?;
                Ok((model, w, smd))
            })
            .collect()
    });

    let report: Vec<GridPoint> = points
        .iter()
        .zip(&fitted)
        .map(|(&(folds, c, l1_ratio), r)| GridPoint {
            folds,
            c,
            l1_ratio,
            mean_smd: r.as_ref().ok().map(|x| x.2),
            error: r.as_ref().err().map(|e| e.to_string()),
        })
        .collect();
    let best = report
        .iter()
        .enumerate()
        .filter(|(_, g)| g.mean_smd.is_some_and(|s| !s.is_nan()))
        .min_by(|(_, a), (_, b)| {
            a.mean_smd
                .unwrap()
                .total_cmp(&b.mean_smd.unwrap())
                .then(b.c.total_cmp(&a.c))
                .then(a.l1_ratio.total_cmp(&b.l1_ratio))
                .then(a.folds.cmp(&b.folds))
        })
        .map(|(i, _)| i);
    let Some(best) = best else {
        let first = report.iter().find_map(|g| g.error.clone()).unwrap_or_default();
        return Err(Error::Numerical(format!("every tuning grid point failed; first error: {first}")));
    };
    let (model, weights, _) = fitted.into_iter().nth(best).expect("index from report").expect("checked ok");
    Ok(TuneResult {
        model,
        weights,
        points: report,
    })
}

/// Linear model of one outcome fitted on the control units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub outcome: usize,
    pub fit: OlsFit,
}

pub fn fit_outcome_model(ds: &Dataset, outcome: usize, engine: &Engine) -> Result<OutcomeModel> {
    check_outcome(ds, outcome)?;
    if ds.n_control() == 0 {
        return Err(Error::Validation("outcome model needs control units".into()));
    }
    let d = ds.d();
    let acc = engine.fold(
        ds.shards(),
        || CoMoments::new(d),
        |_, shard| {
            let block = &shard.control;
            let mut acc = CoMoments::new(d);
            for i in 0..block.len() {
                acc.push(&block.unit_covariates(i), block.outcomes[outcome][i]);
            }
            acc
        },
        CoMoments::merge,
    )?;
    Ok(OutcomeModel {
        outcome,
        fit: acc.solve()?,
    })
}

fn check_outcome(ds: &Dataset, outcome: usize) -> Result<()> {
    if outcome >= ds.m() {
        return Err(Error::Validation(format!(
            "outcome index {outcome} out of range for {} outcomes",
            ds.m()
        )));
    }
    Ok(())
}

/// `(1/N1) Σ_treated (Y - ĝ(X)) - Σ_control w (Y - ĝ(X))` with `w` normalized.
pub fn dr_correct_with(ds: &Dataset, w: &WeightVector, model: &OutcomeModel, engine: &Engine) -> Result<f64> {
    check_outcome(ds, model.outcome)?;
    if ds.n_treated() == 0 {
        return Err(Error::Validation("treated group is empty".into()));
    }
    let w = w.aligned_to(ds)?.normalized()?;
    let slices = w.shard_slices(ds);
    let j = model.outcome;
    let (treated, control) = engine.fold(
        ds.shards(),
        || (0.0, 0.0),
        |s, shard| {
            let resid = |b: &crate::data::Block, i: usize| b.outcomes[j][i] - model.fit.predict(&b.unit_covariates(i));
            let t: f64 = (0..shard.treated.len()).map(|i| resid(&shard.treated, i)).sum();
            let c: f64 = (0..shard.control.len()).map(|i| slices[s][i] * resid(&shard.control, i)).sum();
            (t, c)
        },
        |a, b| (a.0 + b.0, a.1 + b.1),
    )?;
    Ok(treated / ds.n_treated() as f64 - control)
}

/// Fits the outcome model on the controls and applies [`dr_correct_with`].
pub fn dr_correct(ds: &Dataset, w: &WeightVector, outcome: usize, engine: &Engine) -> Result<f64> {
    let model = fit_outcome_model(ds, outcome, engine)?;
    dr_correct_with(ds, w, &model, engine)
}
