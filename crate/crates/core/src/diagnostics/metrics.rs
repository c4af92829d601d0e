use nalgebra::{DMatrix, DVector};

use crate::data::{Dataset, MomentFn};
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::solvers::WeightVector;

/// Aligns weights to the dataset's control order and rescales them to sum 1.
pub(crate) fn prepare(ds: &Dataset, w: &WeightVector) -> Result<WeightVector> {
    w.aligned_to(ds)?.normalized()
}

/// Treated and weighted-control location and spread of one moment column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnStats {
    pub treated_mean: f64,
    /// Unbiased sample variance of the treated values.
    pub treated_var: f64,
    pub control_mean: f64,
    /// Reliability-weighted variance `Σw(x - x̄_w)² / (1 - Σw²)`.
    pub control_var: f64,
}

impl ColumnStats {
    /// Differences and spreads below this are rounding noise from summing
    /// weights that only approximately total 1.
    fn noise(&self) -> f64 {
        1e-12 * self.treated_mean.abs().max(self.control_mean.abs())
    }

    pub fn smd(&self) -> f64 {
        let tol = self.noise();
        let delta = self.treated_mean - self.control_mean;
        let delta = if delta.abs() <= tol { 0.0 } else { delta };
        let denom = ((self.treated_var + self.control_var) / 2.0).sqrt();
        if denom > tol {
            delta.abs() / denom
        } else if delta == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }

    /// `|1 - VR|`, or `None` when the treated variance is zero.
    pub fn variance_gap(&self) -> Option<f64> {
        let floor = self.noise().powi(2);
        let control = if self.control_var <= floor { 0.0 } else { self.control_var };
        (self.treated_var > floor).then(|| (1.0 - control / self.treated_var).abs())
    }
}

/// Two engine passes: means, then centered squares. `w` must be aligned and
/// normalized.
pub fn column_stats(
    ds: &Dataset,
    w: &WeightVector,
    fns: &[MomentFn],
    engine: &Engine,
) -> Result<Vec<ColumnStats>> {
    let p = fns.len();
    let slices = w.shard_slices(ds);
    let sums = engine.fold(
        ds.shards(),
        || vec![0.0; 2 * p + 1],
        |s, shard| {
            let ws = slices[s];
            let mut out = Vec::with_capacity(2 * p + 1);
            for f in fns {
                out.push(f.column(&shard.treated).iter().sum());
                out.push(f.column(&shard.control).iter().zip(ws).map(|(x, w)| x * w).sum());
            }
            out.push(ws.iter().map(|w| w * w).sum());
            out
        },
        crate::data::add_vecs,
    )?;
    let n1 = ds.n_treated() as f64;
    let sum_w: f64 = w.sum();
    let means: Vec<(f64, f64)> = (0..p).map(|k| (sums[2 * k] / n1, sums[2 * k + 1] / sum_w)).collect();
    let sum_w2 = sums[2 * p] / (sum_w * sum_w);
    let ss = engine.fold(
        ds.shards(),
        || vec![0.0; 2 * p],
        |s, shard| {
            let ws = slices[s];
            let mut out = Vec::with_capacity(2 * p);
            for (f, (mt, mc)) in fns.iter().zip(&means) {
                out.push(f.column(&shard.treated).iter().map(|x| (x - mt).powi(2)).sum());
                out.push(
                    f.column(&shard.control)
                        .iter()
                        .zip(ws)
                        .map(|(x, w)| w * (x - mc).powi(2))
                        .sum(),
                );
            }
            out
        },
        crate::data::add_vecs,
    )?;
    Ok(means
        .iter()
        .enumerate()
        .map(|(k, &(mt, mc))| ColumnStats {
            treated_mean: mt,
            treated_var: if n1 > 1.0 { ss[2 * k] / (n1 - 1.0) } else { 0.0 },
            control_mean: mc,
            control_var: if sum_w2 < 1.0 {
                ss[2 * k + 1] / sum_w / (1.0 - sum_w2)
            } else {
                0.0
            },
        })
        .collect())
}

/// Which moment the SMD is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmdFamily {
    First,
    Square,
    Interaction,
}

impl SmdFamily {
    pub fn moments(&self, d: usize) -> Vec<MomentFn> {
        match self {
            SmdFamily::First => (0..d).map(MomentFn::First).collect(),
            SmdFamily::Square => (0..d).map(MomentFn::Second).collect(),
            SmdFamily::Interaction => (0..d)
                .flat_map(|i| (i + 1..d).map(move |j| MomentFn::Cross(i, j)))
                .collect(),
        }
    }
}

/// Standardized mean difference per covariate (or covariate pair). Columns
/// with zero variance in both groups and a nonzero gap are `INFINITY`.
pub fn smd(ds: &Dataset, w: &WeightVector, family: SmdFamily, engine: &Engine) -> Result<Vec<f64>> {
    let w = prepare(ds, w)?;
    let stats = column_stats(ds, &w, &family.moments(ds.d()), engine)?;
    Ok(stats.iter().map(ColumnStats::smd).collect())
}

/// `|1 - VR_d|` per covariate; `None` where the treated variance is zero.
pub fn variance_ratio(ds: &Dataset, w: &WeightVector, engine: &Engine) -> Result<Vec<Option<f64>>> {
    let w = prepare(ds, w)?;
    let stats = column_stats(ds, &w, &SmdFamily::First.moments(ds.d()), engine)?;
    Ok(stats.iter().map(ColumnStats::variance_gap).collect())
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

const MAX_BINS: usize = 10_000;

/// Freedman–Diaconis bin count on the pooled sample, at least 10.
pub fn fd_bins(pooled_sorted: &[f64]) -> usize {
    let n = pooled_sorted.len() as f64;
    let range = pooled_sorted[pooled_sorted.len() - 1] - pooled_sorted[0];
    let iqr = quantile_sorted(pooled_sorted, 0.75) - quantile_sorted(pooled_sorted, 0.25);
    if iqr <= 0.0 || range <= 0.0 {
        return 10;
    }
    let width = 2.0 * iqr / n.cbrt();
    ((range / width).ceil() as usize).clamp(10, MAX_BINS)
}

/// `1 - OVL` of the treated sample and the weighted control sample over a
/// common histogram. `bins = None` picks the Freedman–Diaconis count.
pub fn overlap_column(treated: &[f64], control: &[f64], w: &[f64], bins: Option<usize>) -> f64 {
    let mut pooled: Vec<f64> = treated.iter().chain(control).copied().collect();
    pooled.sort_by(f64::total_cmp);
    let (lo, hi) = (pooled[0], pooled[pooled.len() - 1]);
    if hi <= lo {
        // a single common value
        return 0.0;
    }
    let bins = bins.unwrap_or_else(|| fd_bins(&pooled)).max(1);
    let width = (hi - lo) / bins as f64;
    let bin = |x: f64| (((x - lo) / width) as usize).min(bins - 1);
    let mut pt = vec![0.0; bins];
    let mut pc = vec![0.0; bins];
    let n1 = treated.len() as f64;
    for &x in treated {
        pt[bin(x)] += 1.0 / n1;
    }
    let total: f64 = w.iter().sum();
    for (&x, &wi) in control.iter().zip(w) {
        pc[bin(x)] += wi / total;
    }
    let ovl: f64 = pt.iter().zip(&pc).map(|(a, b)| a.min(*b)).sum();
    (1.0 - ovl).clamp(0.0, 1.0)
}

/// Largest gap between the treated empirical CDF and the weighted control CDF.
pub fn ks_column(treated: &[f64], control: &[f64], w: &[f64]) -> f64 {
    let n1 = treated.len() as f64;
    let total: f64 = w.iter().sum();
    let mut pts: Vec<(f64, f64, f64)> = treated
        .iter()
        .map(|&x| (x, 1.0 / n1, 0.0))
        .chain(control.iter().zip(w).map(|(&x, &wi)| (x, 0.0, wi / total)))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut ft, mut fc, mut best) = (0.0, 0.0, 0.0f64);
    for (i, &(x, mt, mc)) in pts.iter().enumerate() {
        ft += mt;
        fc += mc;
        let last_of_tie = i + 1 == pts.len() || pts[i + 1].0 != x;
        if last_of_tie {
            best = best.max((ft - fc).abs());
        }
    }
    best.min(1.0)
}

fn per_covariate(
    ds: &Dataset,
    w: &WeightVector,
    engine: &Engine,
    f: impl Fn(&[f64], &[f64], &[f64]) -> f64 + Sync,
) -> Result<Vec<f64>> {
    let w = prepare(ds, w)?;
    let cols: Vec<usize> = (0..ds.d()).collect();
    engine.map(&cols, |_, &j| {
        let t = ds.gather_covariate(true, j);
        let c = ds.gather_covariate(false, j);
        f(&t, &c, w.values())
    })
}

/// `1 - OVL` per covariate.
pub fn overlap_coefficient(ds: &Dataset, w: &WeightVector, engine: &Engine) -> Result<Vec<f64>> {
    per_covariate(ds, w, engine, |t, c, w| overlap_column(t, c, w, None))
}

/// Kolmogorov–Smirnov distance per covariate.
pub fn ks_distance(ds: &Dataset, w: &WeightVector, engine: &Engine) -> Result<Vec<f64>> {
    per_covariate(ds, w, engine, ks_column)
}

/// Mahalanobis distance between the treated mean vector and the weighted
/// control mean vector, under the pooled unweighted sample covariance.
pub fn mahalanobis_balance(ds: &Dataset, w: &WeightVector, engine: &Engine) -> Result<f64> {
    let d = ds.d();
    if d > ds.len() {
        return Err(Error::Validation(format!(
            "Mahalanobis balance needs at least as many units as covariates ({d} > {}); reduce the dimension first",
            ds.len()
        )));
    }
    let w = prepare(ds, w)?;
    let slices = w.shard_slices(ds);
    // treated sums, weighted control sums, pooled sums
    let sums = engine.fold(
        ds.shards(),
        || vec![0.0; 3 * d],
        |s, shard| {
            let mut out = vec![0.0; 3 * d];
            for j in 0..d {
                let t: f64 = shard.treated.covariate(j).iter().sum();
                let c = shard.control.covariate(j);
                out[j] = t;
                out[d + j] = c.iter().zip(slices[s]).map(|(x, w)| x * w).sum();
                out[2 * d + j] = t + c.iter().sum::<f64>();
            }
            out
        },
        crate::data::add_vecs,
    )?;
    let n = ds.len() as f64;
    let n1 = ds.n_treated() as f64;
    let pooled: Vec<f64> = sums[2 * d..].iter().map(|s| s / n).collect();
    let cross = engine.fold(
        ds.shards(),
        || vec![0.0; d * d],
        |_, shard| {
            let mut out = vec![0.0; d * d];
            for block in [&shard.treated, &shard.control] {
                let centered: Vec<Vec<f64>> = (0..d)
                    .map(|j| block.covariate(j).iter().map(|x| x - pooled[j]).collect())
                    .collect();
                for a in 0..d {
                    for b in a..d {
                        let v: f64 = centered[a].iter().zip(&centered[b]).map(|(x, y)| x * y).sum();
                        out[a * d + b] += v;
                    }
                }
            }
            out
        },
        crate::data::add_vecs,
    )?;
    let denom = (n - 1.0).max(1.0);
    let cov = DMatrix::from_fn(d, d, |a, b| {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        cross[a * d + b] / denom
    });
    let diff = DVector::from_iterator(d, (0..d).map(|j| sums[j] / n1 - sums[d + j]));
    if diff.iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    let solved = symmetric_solve(cov, &diff)?;
    Ok(diff.dot(&solved).max(0.0))
}

/// Cholesky solve, retried with a 1e-10 diagonal ridge when the matrix is
/// singular or nearly so.
fn symmetric_solve(mut m: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    let scale = m.diagonal().amax().max(f64::MIN_POSITIVE);
    let well_posed = |c: &nalgebra::Cholesky<f64, nalgebra::Dyn>| {
        c.l_dirty().diagonal().iter().all(|v| v * v > 1e-12 * scale)
    };
    if let Some(c) = m.clone().cholesky() {
        if well_posed(&c) {
            return Ok(c.solve(rhs));
        }
    }
    for i in 0..m.nrows() {
        m[(i, i)] += 1e-10;
    }
    m.cholesky()
        .map(|c| c.solve(rhs))
        .ok_or_else(|| Error::Numerical("covariance matrix is not positive semi-definite".into()))
}
