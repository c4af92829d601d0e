//! Effect estimates on the treated, bootstrap intervals and replication
//! meta metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{fit_logistic, ipw_weights, LogisticConfig, Regularization};
use crate::data::{Dataset, MomentSpec, UnitRecord};
use crate::diagnostics::quantile_sorted;
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::solvers::{solve, Method, SolverConfig, WeightVector};

/// Smallest accepted number of bootstrap replicates.
pub const MIN_REPLICATES: usize = 100;

/// Fraction of failed replicates above which the bootstrap is abandoned.
pub const MAX_FAILURE_RATE: f64 = 0.10;

/// How the bootstrap resamples and what it refits.
pub const RESAMPLING_NOTE: &str =
    "treated and control units resampled separately with replacement; weights re-solved per replicate; percentile interval";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub outcome: String,
    pub method: String,
    pub treated_mean: f64,
    /// Weighted control mean, the synthetic-control value.
    pub control_mean: f64,
    pub patt: f64,
    /// `patt / (treated_mean - patt)`; `None` when the denominator is zero.
    pub pct_change: Option<f64>,
    pub pct_change_undefined: bool,
    pub interval: Option<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
    /// Percentile interval of the replicate percentage changes, when any was defined.
    pub pct_lower: Option<f64>,
    pub pct_upper: Option<f64>,
    pub replicates: usize,
    pub failed: usize,
    pub resampling: String,
}

impl Interval {
    pub fn covers(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }

    pub fn pct_covers(&self, v: f64) -> Option<bool> {
        Some(self.pct_lower? <= v && v <= self.pct_upper?)
    }
}

fn pct(patt: f64, treated_mean: f64) -> Option<f64> {
    let base = treated_mean - patt;
    (base != 0.0).then(|| patt / base)
}

/// Treated mean minus the weighted control mean of one outcome.
pub fn patt(ds: &Dataset, w: &WeightVector, outcome: usize, engine: &Engine) -> Result<EffectEstimate> {
    if outcome >= ds.m() {
        return Err(Error::Validation(format!(
            "outcome index {outcome} out of range for {} outcomes",
            ds.m()
        )));
    }
    if ds.n_treated() == 0 {
        return Err(Error::Validation("treated group is empty".into()));
    }
    let w = w.aligned_to(ds)?.normalized()?;
    let slices = w.shard_slices(ds);
    let (t, c) = engine.fold(
        ds.shards(),
        || (0.0, 0.0),
        |s, shard| {
            let t: f64 = shard.treated.outcome(outcome).iter().sum();
            let c: f64 = shard.control.outcome(outcome).iter().zip(slices[s]).map(|(y, w)| y * w).sum();
            (t, c)
        },
        |a, b| (a.0 + b.0, a.1 + b.1),
    )?;
    let treated_mean = t / ds.n_treated() as f64;
    let effect = treated_mean - c;
    let pct_change = pct(effect, treated_mean);
    Ok(EffectEstimate {
        outcome: ds.schema().outcomes[outcome].clone(),
        method: "weights".into(),
        treated_mean,
        control_mean: c,
        patt: effect,
        pct_change,
        pct_change_undefined: pct_change.is_none(),
        interval: None,
    })
}

/// How weights are recomputed on a bootstrap sample.
#[derive(Debug, Clone)]
pub enum Reweighting {
    Solver {
        method: Method,
        spec: MomentSpec,
        config: SolverConfig,
    },
    Ipw {
        regularization: Regularization,
        folds: usize,
        config: LogisticConfig,
    },
}

impl Reweighting {
    pub fn name(&self) -> &'static str {
        match self {
            Reweighting::Solver { method, .. } => method.name(),
            Reweighting::Ipw { .. } => "ipw",
        }
    }

    /// Weights for `ds`, or `None` when the solver did not converge.
    pub fn weights(&self, ds: &Dataset, engine: &Engine) -> Result<Option<WeightVector>> {
        match self {
            Reweighting::Solver { method, spec, config } => {
                let r = solve(*method, ds, spec, config, engine)?;
                Ok(r.converged.then_some(r.weights))
            }
            Reweighting::Ipw {
                regularization,
                folds,
                config,
            } => {
                let m = fit_logistic(ds, *regularization, *folds, config, engine)?;
                ipw_weights(ds, &m).map(Some)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            replicates: 500,
            level: 0.95,
            seed: 0,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < MIN_REPLICATES {
            return Err(Error::Validation(format!(
                "bootstrap needs at least {MIN_REPLICATES} replicates, got {}",
                self.replicates
            )));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Validation(format!("confidence level must lie in (0, 1), got {}", self.level)));
        }
        Ok(())
    }
}

/// One stratified resample of `ds`. Ids get a `#k` suffix for the k-th draw.
fn resample(
    units: &[UnitRecord],
    treated: &[usize],
    control: &[usize],
    ds: &Dataset,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let mut draws: Vec<UnitRecord> = Vec::with_capacity(units.len());
    for group in [control, treated] {
        for _ in 0..group.len() {
            let src = &units[group[rng.random_range(0..group.len())]];
            let mut u = src.clone();
            u.unit_id = format!("{}#{}", src.unit_id, draws.len());
            draws.push(u);
        }
    }
    let shard_rows = ds.shards().first().map_or(1, |s| s.record_count()).max(1);
    Dataset::from_units(ds.schema().clone(), draws, shard_rows)
}

/// Point estimates on `ds` with `w`, and percentile intervals from stratified
/// bootstrap replicates on which the weights are recomputed.
///
/// Replicate `r` draws from its own stream of the seeded generator, so the
/// result depends only on the seed and the data.
pub fn bootstrap_ci(
    ds: &Dataset,
    w: &WeightVector,
    reweight: &Reweighting,
    outcomes: &[usize],
    boot: &BootstrapConfig,
    engine: &Engine,
) -> Result<Vec<EffectEstimate>> {
    boot.validate()?;
    let mut points = outcomes
        .iter()
        .map(|&j| {
            let mut e = patt(ds, w, j, engine)?;
            e.method = reweight.name().to_string();
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;

    let units = ds.units();
    let treated: Vec<usize> = (0..units.len()).filter(|&i| units[i].treated).collect();
    let control: Vec<usize> = (0..units.len()).filter(|&i| !units[i].treated).collect();

    let replicate = |r: usize| -> Result<Option<Vec<EffectEstimate>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(boot.seed);
        rng.set_stream(r as u64 + 1);
        let sample = resample(&units, &treated, &control, ds, &mut rng)?;
        let Some(bw) = reweight.weights(&sample, engine)? else {
            return Ok(None);
        };
        outcomes.iter().map(|&j| patt(&sample, &bw, j, engine)).collect::<Result<Vec<_>>>().map(Some)
    };
    let results: Vec<Option<Vec<EffectEstimate>>> = engine.install(|| {
        (0..boot.replicates)
            .into_par_iter()
            .map(|r| match replicate(r) {
                Ok(v) => v,
                Err(e) => {
                    log::debug!("bootstrap replicate {r} failed: {e}");
                    None
                }
            })
            .collect()
    });
    let ok: Vec<&Vec<EffectEstimate>> = results.iter().flatten().collect();
    let failed = boot.replicates - ok.len();
    if failed as f64 > MAX_FAILURE_RATE * boot.replicates as f64 {
        return Err(Error::Bootstrap {
            failed,
            total: boot.replicates,
        });
    }
    let alpha = (1.0 - boot.level) / 2.0;
    for (k, point) in points.iter_mut().enumerate() {
        let mut effects: Vec<f64> = ok.iter().map(|rep| rep[k].patt).collect();
        let mut pcts: Vec<f64> = ok.iter().filter_map(|rep| rep[k].pct_change).collect();
        effects.sort_by(f64::total_cmp);
        pcts.sort_by(f64::total_cmp);
        let pct_bound = |q: f64| (!pcts.is_empty()).then(|| quantile_sorted(&pcts, q));
        point.interval = Some(Interval {
            level: boot.level,
            lower: quantile_sorted(&effects, alpha),
            upper: quantile_sorted(&effects, 1.0 - alpha),
            pct_lower: pct_bound(alpha),
            pct_upper: pct_bound(1.0 - alpha),
            replicates: boot.replicates,
            failed,
            resampling: RESAMPLING_NOTE.into(),
        });
    }
    Ok(points)
}

/// Bias and spread of replicated percentage-change estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaMetrics {
    pub replications: usize,
    /// `|mean(δ̂) - δ|`.
    pub amb: f64,
    /// Sample standard deviation of δ̂.
    pub sd: f64,
    /// `√(amb² + sd²)`.
    pub rmse: f64,
    /// `√(mean((δ̂ - δ)²))`, which equals `√(amb² + sd²·(S-1)/S)`.
    pub rmse_direct: f64,
}

pub fn meta_metrics(estimates: &[f64], truth: f64) -> Result<MetaMetrics> {
    let s = estimates.len();
    if s < 2 {
        return Err(Error::Validation(format!(
            "standard deviation needs at least 2 replications, got {s}"
        )));
    }
    let n = s as f64;
    let mean = estimates.iter().sum::<f64>() / n;
    let amb = (mean - truth).abs();
    let sd = (estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let rmse_direct = (estimates.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / n).sqrt();
    Ok(MetaMetrics {
        replications: s,
        amb,
        sd,
        rmse: amb.hypot(sd),
        rmse_direct,
    })
}
