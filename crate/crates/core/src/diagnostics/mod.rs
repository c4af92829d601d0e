//! Balance and weight-stability diagnostics for a dataset and control weights.

mod metrics;
mod stability;

use serde::{Deserialize, Serialize};

pub use metrics::{
    column_stats, fd_bins, ks_column, ks_distance, mahalanobis_balance, overlap_coefficient,
    overlap_column, quantile_sorted, smd, variance_ratio, ColumnStats, SmdFamily,
};
pub use stability::{stability, StabilityReport};

use crate::data::Dataset;
use crate::engine::Engine;
use crate::error::Result;
use crate::solvers::WeightVector;

/// Interaction SMDs are computed automatically up to this many covariates.
pub const AUTO_INTERACTION_LIMIT: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub smd: f64,
    pub variance_ratio: f64,
    pub overlap: f64,
    pub ks: f64,
    pub mahalanobis: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            smd: 0.1,
            variance_ratio: 0.5,
            overlap: 0.1,
            ks: 0.1,
            mahalanobis: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interactions {
    /// Only when d ≤ [`AUTO_INTERACTION_LIMIT`].
    #[default]
    Auto,
    Always,
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DiagnoseOptions {
    pub thresholds: Thresholds,
    pub interactions: Interactions,
}

/// One metric of one covariate beyond its threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub covariate: String,
    pub metric: String,
    /// `None` for an infinite imbalance (constant columns with different values).
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionSmd {
    pub pair: (String, String),
    pub smd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceSummary {
    pub mean_smd: f64,
    pub max_smd: f64,
    pub mean_smd_square: f64,
    pub mean_smd_interaction: Option<f64>,
    pub mean_variance_ratio: f64,
    pub mean_overlap: f64,
    pub mean_ks: f64,
    pub mahalanobis: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceFlags {
    pub smd: bool,
    pub smd_square: bool,
    pub smd_interaction: bool,
    pub variance_ratio: bool,
    pub overlap: bool,
    pub ks: bool,
    pub mahalanobis: bool,
}

impl BalanceFlags {
    pub fn any(&self) -> bool {
        self.smd
            || self.smd_square
            || self.smd_interaction
            || self.variance_ratio
            || self.overlap
            || self.ks
            || self.mahalanobis
    }
}

/// Per-covariate balance metrics. `None` entries are undefined values: an
/// infinite SMD, or a variance ratio against a constant treated column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub covariates: Vec<String>,
    pub smd: Vec<Option<f64>>,
    pub smd_square: Vec<Option<f64>>,
    pub smd_interaction: Option<Vec<InteractionSmd>>,
    /// `|1 - VR|`.
    pub variance_ratio: Vec<Option<f64>>,
    /// `1 - OVL`.
    pub overlap: Vec<f64>,
    pub ks: Vec<f64>,
    pub mahalanobis: f64,
    pub summary: BalanceSummary,
    pub thresholds: Thresholds,
    /// The overlap threshold is a convention, not a published standard.
    pub overlap_threshold_author_chosen: bool,
    /// Summary metrics beyond their thresholds.
    pub flags: BalanceFlags,
    /// Individual covariates beyond a threshold.
    pub violations: Vec<Violation>,
}

impl BalanceReport {
    pub fn passed(&self) -> bool {
        !self.flags.any()
    }
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn mean_defined(vals: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = vals.iter().flatten().copied().collect();
    if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

fn mean(vals: &[f64]) -> f64 {
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// All balance metrics for the given weights.
pub fn diagnose(
    ds: &Dataset,
    w: &WeightVector,
    opts: &DiagnoseOptions,
    engine: &Engine,
) -> Result<BalanceReport> {
    let d = ds.d();
    let th = opts.thresholds;
    let names = ds.schema().covariates.clone();
    let wn = metrics::prepare(ds, w)?;

    let first = column_stats(ds, &wn, &SmdFamily::First.moments(d), engine)?;
    let square = column_stats(ds, &wn, &SmdFamily::Square.moments(d), engine)?;
    let smd_raw: Vec<f64> = first.iter().map(ColumnStats::smd).collect();
    let sq_raw: Vec<f64> = square.iter().map(ColumnStats::smd).collect();
    let vr: Vec<Option<f64>> = first.iter().map(ColumnStats::variance_gap).collect();
    let overlap = overlap_coefficient(ds, &wn, engine)?;
    let ks = ks_distance(ds, &wn, engine)?;
    let mb = mahalanobis_balance(ds, &wn, engine)?;

    let want_interactions = match opts.interactions {
        Interactions::Auto => d <= AUTO_INTERACTION_LIMIT,
        Interactions::Always => true,
        Interactions::Never => false,
    } && d >= 2;
    let interactions = if want_interactions {
        let fns = SmdFamily::Interaction.moments(d);
        let stats = column_stats(ds, &wn, &fns, engine)?;
        Some(
            fns.iter()
                .zip(&stats)
                .map(|(f, s)| {
                    let crate::data::MomentFn::Cross(i, j) = *f else {
                        unreachable!("interaction family yields cross moments")
                    };
                    (names[i].clone(), names[j].clone(), s.smd())
                })
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };

    let mut violations = Vec::new();
    let mut flag = |covariate: &str, metric: &str, v: f64, limit: f64| {
        if v > limit {
            violations.push(Violation {
                covariate: covariate.to_string(),
                metric: metric.to_string(),
                value: finite(v),
            });
        }
    };
    for j in 0..d {
        flag(&names[j], "smd", smd_raw[j], th.smd);
        flag(&names[j], "smd_square", sq_raw[j], th.smd);
        if let Some(v) = vr[j] {
            flag(&names[j], "variance_ratio", v, th.variance_ratio);
        }
        flag(&names[j], "overlap", overlap[j], th.overlap);
        flag(&names[j], "ks", ks[j], th.ks);
    }
    if let Some(pairs) = &interactions {
        for (a, b, v) in pairs {
            flag(&format!("{a}*{b}"), "smd_interaction", *v, th.smd);
        }
    }

    let smd: Vec<Option<f64>> = smd_raw.iter().map(|v| finite(*v)).collect();
    let smd_square: Vec<Option<f64>> = sq_raw.iter().map(|v| finite(*v)).collect();
    let inter_vals: Option<Vec<Option<f64>>> = interactions
        .as_ref()
        .map(|p| p.iter().map(|(_, _, v)| finite(*v)).collect());
    let infinite = |raw: &[f64]| raw.iter().any(|v| v.is_infinite());
    let summary = BalanceSummary {
        mean_smd: mean_defined(&smd),
        max_smd: smd.iter().flatten().copied().fold(0.0, f64::max),
        mean_smd_square: mean_defined(&smd_square),
        mean_smd_interaction: inter_vals.as_deref().map(mean_defined),
        mean_variance_ratio: mean_defined(&vr),
        mean_overlap: mean(&overlap),
        mean_ks: mean(&ks),
        mahalanobis: mb,
    };
    let flags = BalanceFlags {
        smd: summary.mean_smd > th.smd || infinite(&smd_raw),
        smd_square: summary.mean_smd_square > th.smd || infinite(&sq_raw),
        smd_interaction: interactions
            .as_ref()
            .is_some_and(|p| p.iter().any(|(_, _, v)| v.is_infinite()))
            || summary.mean_smd_interaction.is_some_and(|m| m > th.smd),
        variance_ratio: summary.mean_variance_ratio > th.variance_ratio,
        overlap: summary.mean_overlap > th.overlap,
        ks: summary.mean_ks > th.ks,
        mahalanobis: mb > th.mahalanobis,
    };
    Ok(BalanceReport {
        covariates: names,
        smd,
        smd_square,
        smd_interaction: interactions.map(|p| {
            p.into_iter()
                .map(|(a, b, v)| InteractionSmd {
                    pair: (a, b),
                    smd: finite(v),
                })
                .collect()
        }),
        variance_ratio: vr,
        overlap,
        ks,
        mahalanobis: mb,
        summary,
        thresholds: th,
        overlap_threshold_author_chosen: true,
        flags,
        violations,
    })
}
