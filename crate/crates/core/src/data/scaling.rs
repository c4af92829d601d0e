use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::engine::Engine;
use crate::error::Result;

/// Pooled location and scale of one column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub mean: f64,
    /// Pooled population standard deviation.
    pub sd: f64,
    /// Zero variance; the column is left untouched.
    pub degenerate: bool,
}

impl ColumnScale {
    pub const IDENTITY: ColumnScale = ColumnScale {
        mean: 0.0,
        sd: 1.0,
        degenerate: false,
    };

    /// From the count, sum and centered sum of squares of a column.
    pub(crate) fn from_moments(n: f64, mean: f64, centered_ss: f64) -> Self {
        let sd = (centered_ss / n).sqrt();
        let degenerate = !(sd > 1e-12 * mean.abs().max(1.0));
        if degenerate {
            ColumnScale {
                mean,
                sd: 0.0,
                degenerate,
            }
        } else {
            ColumnScale {
                mean,
                sd,
                degenerate,
            }
        }
    }

    pub fn apply(&self, v: f64) -> f64 {
        if self.degenerate {
            v
        } else {
            (v - self.mean) / self.sd
        }
    }

    pub fn invert(&self, z: f64) -> f64 {
        if self.degenerate {
            z
        } else {
            z * self.sd + self.mean
        }
    }
}

/// Per-covariate scaling applied by [`standardize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub columns: Vec<ColumnScale>,
}

impl ScalingRecord {
    pub fn degenerate_columns(&self) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.degenerate)
            .map(|(j, _)| j)
            .collect()
    }

    /// Maps first-moment dual coefficients found on standardized covariates
    /// back to the original scale. Returns the coefficients and the constant
    /// that the shift contributes (`-Σ ξ_j mean_j / sd_j`).
    pub fn unscale_dual(&self, xi: &[f64]) -> (Vec<f64>, f64) {
        let mut offset = 0.0;
        let coef = xi
            .iter()
            .zip(&self.columns)
            .map(|(&x, c)| {
                if c.degenerate {
                    x
                } else {
                    offset -= x * c.mean / c.sd;
                    x / c.sd
                }
            })
            .collect();
        (coef, offset)
    }
}

/// Pooled (treated + control) mean and population sd of every covariate.
pub fn fit_scaling(ds: &Dataset, engine: &Engine) -> Result<ScalingRecord> {
    let d = ds.d();
    let n = ds.len() as f64;
    let sums = engine.fold(
        ds.shards(),
        || vec![0.0; d],
        |_, shard| {
            (0..d)
                .map(|j| {
                    shard.control.covariate(j).iter().sum::<f64>()
                        + shard.treated.covariate(j).iter().sum::<f64>()
                })
                .collect()
        },
        super::moments::add_vecs,
    )?;
    let means: Vec<f64> = sums.iter().map(|s| s / n).collect();
    let ss = engine.fold(
        ds.shards(),
        || vec![0.0; d],
        |_, shard| {
            (0..d)
                .map(|j| {
                    [&shard.control, &shard.treated]
                        .iter()
                        .flat_map(|b| b.covariate(j))
                        .map(|v| (v - means[j]).powi(2))
                        .sum()
                })
                .collect()
        },
        super::moments::add_vecs,
    )?;
    Ok(ScalingRecord {
        columns: means
            .iter()
            .zip(&ss)
            .map(|(&m, &s)| ColumnScale::from_moments(n, m, s))
            .collect(),
    })
}

/// Shifts and scales each covariate to pooled mean 0 and sd 1. Constant
/// columns are left unchanged and flagged in the record.
pub fn standardize(ds: &Dataset, engine: &Engine) -> Result<(Dataset, ScalingRecord)> {
    let record = fit_scaling(ds, engine)?;
    let scaled = ds.map_covariates(|j, col| {
        let c = record.columns[j];
        col.iter().map(|&v| c.apply(v)).collect()
    });
    Ok((scaled, record))
}
