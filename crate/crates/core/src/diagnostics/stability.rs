use serde::{Deserialize, Serialize};

use super::metrics::quantile_sorted;
use crate::error::{Error, Result};
use crate::solvers::WeightVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    /// Sample standard deviation of the weights rescaled to sum 1.
    pub sd_normalized: f64,
    pub max_weight: f64,
    pub p99_weight: f64,
    /// `(Σw)² / Σw²`.
    pub ess: f64,
    pub ess_ratio: f64,
}

/// Dispersion and effective sample size of a weight vector.
pub fn stability(w: &WeightVector) -> Result<StabilityReport> {
    if w.is_empty() {
        return Err(Error::Validation("no weights".into()));
    }
    let w = w.clone().normalized()?;
    let v = w.values();
    let n = v.len() as f64;
    let mean = 1.0 / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = v.to_vec();
    sorted.sort_by(f64::total_cmp);
    let sum: f64 = v.iter().sum();
    let sum_sq: f64 = v.iter().map(|x| x * x).sum();
    let ess = (sum * sum / sum_sq).clamp(1.0, n);
    Ok(StabilityReport {
        sd_normalized: sd,
        max_weight: sorted[sorted.len() - 1],
        p99_weight: quantile_sorted(&sorted, 0.99),
        ess,
        ess_ratio: ess / n,
    })
}
