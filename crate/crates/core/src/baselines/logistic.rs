use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{add_vecs, fit_scaling, Block, Dataset, ScalingRecord};
use crate::engine::Engine;
use crate::error::{Error, Result};

/// Elastic-net penalty: `(1 / (C·n)) [(1 - l)/2 ‖β‖² + l ‖β‖₁]` on the
/// standardized slopes. The intercept is not penalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regularization {
    pub c: f64,
    pub l1_ratio: f64,
}

impl Regularization {
    pub fn new(c: f64, l1_ratio: f64) -> Result<Self> {
        let r = Regularization { c, l1_ratio };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) {
            return Err(Error::Validation(format!("C must be positive, got {}", self.c)));
        }
        if !(0.0..=1.0).contains(&self.l1_ratio) {
            return Err(Error::Validation(format!("l1_ratio must lie in [0, 1], got {}", self.l1_ratio)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    pub max_iterations: usize,
    /// Bound on the ∞-norm of the proximal gradient mapping.
    pub tolerance: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            max_iterations: 20_000,
            tolerance: 1e-6,
        }
    }
}

/// A fitted propensity model with the scores of every control unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    /// Intercept first, in original covariate units. With cross-fitting this
    /// is the average of the fold models.
    pub coefficients: Vec<f64>,
    pub fold_coefficients: Vec<Vec<f64>>,
    pub regularization: Regularization,
    pub folds: usize,
    /// Largest iteration count over the fold fits.
    pub iterations: usize,
    pub control_ids: Vec<String>,
    /// Out-of-fold when `folds > 0`.
    pub control_scores: Vec<f64>,
}

impl PropensityModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        sigmoid(linear(&self.coefficients, x))
    }
}

pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn linear(beta: &[f64], x: &[f64]) -> f64 {
    beta[0] + beta[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
}

/// Standardized features of one unit, constant columns mapped to zero.
struct Features<'a> {
    scaling: &'a ScalingRecord,
}

impl Features<'_> {
    fn unit(&self, block: &Block, i: usize, out: &mut [f64]) {
        for (j, c) in self.scaling.columns.iter().enumerate() {
            out[j] = if c.degenerate { 0.0 } else { c.apply(block.covariates[j][i]) };
        }
    }

    fn to_original(&self, beta: &[f64]) -> Vec<f64> {
        let mut out = vec![beta[0]; beta.len()];
        for (j, c) in self.scaling.columns.iter().enumerate() {
            if c.degenerate {
                out[j + 1] = 0.0;
            } else {
                out[j + 1] = beta[j + 1] / c.sd;
                out[0] -= beta[j + 1] * c.mean / c.sd;
            }
        }
        out
    }
}

/// Which units belong to the training set of one fit.
#[derive(Clone, Copy)]
struct Split {
    folds: usize,
    held_out: Option<usize>,
}

impl Split {
    fn trains_on(&self, row: u64) -> bool {
        match self.held_out {
            None => true,
            Some(f) => (row % self.folds as u64) as usize != f,
        }
    }

    fn scores(&self, row: u64) -> bool {
        match self.held_out {
            None => true,
            Some(f) => (row % self.folds as u64) as usize == f,
        }
    }
}

fn for_each_unit(shard: &crate::data::Shard, mut f: impl FnMut(&Block, usize, f64)) {
    for (block, y) in [(&shard.control, 0.0), (&shard.treated, 1.0)] {
        for i in 0..block.len() {
            f(block, i, y);
        }
    }
}

struct Fit {
    beta: Vec<f64>,
    iterations: usize,
}

fn fit_split(
    ds: &Dataset,
    feats: &Features,
    split: Split,
    reg: Regularization,
    cfg: &LogisticConfig,
    engine: &Engine,
) -> Result<Fit> {
    let d = ds.d();
    let p = d + 1;

    // Gram matrix of [1, z] over the training units, plus class counts
    let gram = engine.fold(
        ds.shards(),
        || vec![0.0; p * p + 2],
        |_, shard| {
            let mut acc = vec![0.0; p * p + 2];
            let mut z = vec![0.0; p];
            z[0] = 1.0;
            for_each_unit(shard, |block, i, y| {
                if !split.trains_on(block.rows[i]) {
                    return;
                }
                feats.unit(block, i, &mut z[1..]);
                for a in 0..p {
                    for b in a..p {
                        acc[a * p + b] += z[a] * z[b];
                    }
                }
                acc[p * p + y as usize] += 1.0;
            });
            acc
        },
        add_vecs,
    )?;
    let (n0, n1) = (gram[p * p], gram[p * p + 1]);
    if n0 == 0.0 || n1 == 0.0 {
        return Err(Error::Validation(
            "logistic fit needs both treated and control units in every training split".into(),
        ));
    }
    let n = n0 + n1;
    let g = DMatrix::from_fn(p, p, |a, b| gram[a.min(b) * p + a.max(b)] / n);
    let lambda_max = SymmetricEigen::new(g).eigenvalues.max();
    let lam = 1.0 / (reg.c * n);
    let l2 = lam * (1.0 - reg.l1_ratio);
    let l1 = lam * reg.l1_ratio;
    let lipschitz = lambda_max / 4.0 + l2;
    let step = 1.0 / lipschitz;

    let gradient = |beta: &[f64]| -> Result<Vec<f64>> {
        let mut grad = engine.fold(
            ds.shards(),
            || vec![0.0; p],
            |_, shard| {
                let mut acc = vec![0.0; p];
                let mut z = vec![0.0; d];
                for_each_unit(shard, |block, i, y| {
                    if !split.trains_on(block.rows[i]) {
                        return;
                    }
                    feats.unit(block, i, &mut z);
                    let r = sigmoid(linear(beta, &z)) - y;
                    acc[0] += r;
                    for j in 0..d {
                        acc[j + 1] += r * z[j];
                    }
                });
                acc
            },
            add_vecs,
        )?;
        for (j, g) in grad.iter_mut().enumerate() {
            *g /= n;
            if j > 0 {
                *g += l2 * beta[j];
            }
        }
        Ok(grad)
    };
    let prox = |v: f64, j: usize| -> f64 {
        if j == 0 || l1 == 0.0 {
            v
        } else {
            let t = step * l1;
            v.signum() * (v.abs() - t).max(0.0)
        }
    };

    // class-prior intercept as the starting point
    let mut beta = vec![0.0; p];
    beta[0] = (n1 / n0).ln();
    let mut y = beta.clone();
    let mut t = 1.0f64;
    let mut mapping = f64::INFINITY;
    for it in 1..=cfg.max_iterations {
        let g = gradient(&y)?;
        let next: Vec<f64> = (0..p).map(|j| prox(y[j] - step * g[j], j)).collect();
        mapping = next.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) * lipschitz;
        if !mapping.is_finite() {
            return Err(Error::Numerical("logistic fit produced non-finite values".into()));
        }
        if mapping <= cfg.tolerance {
            return Ok(Fit { beta: next, iterations: it });
        }
        // restart the momentum when it points uphill
        let uphill: f64 = (0..p).map(|j| (y[j] - next[j]) * (next[j] - beta[j])).sum();
        if uphill > 0.0 {
            t = 1.0;
        }
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let mom = (t - 1.0) / t_next;
        y = (0..p).map(|j| next[j] + mom * (next[j] - beta[j])).collect();
        beta = next;
        t = t_next;
    }
    Err(Error::NoConvergence {
        iterations: cfg.max_iterations,
        gradient_norm: mapping,
    })
}

/// Elastic-net logistic regression of treatment on the covariates.
///
/// With `folds = k > 0` the units are split by source row modulo `k` and every
/// control unit is scored by the model that did not see it.
pub fn fit_logistic(
    ds: &Dataset,
    reg: Regularization,
    folds: usize,
    cfg: &LogisticConfig,
    engine: &Engine,
) -> Result<PropensityModel> {
    reg.validate()?;
    if folds == 1 {
        return Err(Error::Validation("cross-fitting needs 0 or at least 2 folds".into()));
    }
    if ds.n_control() == 0 || ds.n_treated() == 0 {
        return Err(Error::Validation("logistic fit needs both treated and control units".into()));
    }
    let scaling = fit_scaling(ds, engine)?;
    let feats = Features { scaling: &scaling };
    let splits: Vec<Split> = if folds == 0 {
        vec![Split { folds: 0, held_out: None }]
    } else {
        (0..folds).map(|f| Split { folds, held_out: Some(f) }).collect()
    };
    let fits = splits
        .iter()
        .map(|s| fit_split(ds, &feats, *s, reg, cfg, engine))
        .collect::<Result<Vec<_>>>()?;

    let d = ds.d();
    let per_shard = engine.map(ds.shards(), |_, shard| {
        let mut z = vec![0.0; d];
        (0..shard.control.len())
            .map(|i| {
                let row = shard.control.rows[i];
                let k = splits.iter().position(|s| s.scores(row)).expect("splits cover all rows");
                feats.unit(&shard.control, i, &mut z);
                sigmoid(linear(&fits[k].beta, &z))
            })
            .collect::<Vec<f64>>()
    })?;
    let fold_coefficients: Vec<Vec<f64>> = fits.iter().map(|f| feats.to_original(&f.beta)).collect();
    let mut coefficients = vec![0.0; d + 1];
    for c in &fold_coefficients {
        for (a, b) in coefficients.iter_mut().zip(c) {
            *a += b / fold_coefficients.len() as f64;
        }
    }
    Ok(PropensityModel {
        coefficients,
        fold_coefficients,
        regularization: reg,
        folds,
        iterations: fits.iter().map(|f| f.iterations).max().unwrap_or(0),
        control_ids: ds.control_ids().into_iter().map(str::to_string).collect(),
        control_scores: per_shard.concat(),
    })
}
