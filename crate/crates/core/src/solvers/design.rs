//! Control-unit moment features laid out per shard for the dual solvers.

use serde::{Deserialize, Serialize};

use crate::data::{add_vecs, ColumnScale, Dataset, MomentSpec};
use crate::engine::Engine;
use crate::error::Result;

#[derive(Debug, Clone)]
pub(crate) struct DesignBlock {
    cols: Vec<Vec<f64>>,
    n: usize,
}

impl DesignBlock {
    /// `offset + Σ_k coef_k * col_k[i]` for every unit.
    fn scores(&self, coef: &[f64], offset: f64) -> Vec<f64> {
        let mut s = vec![offset; self.n];
        for (c, col) in coef.iter().zip(&self.cols) {
            if *c == 0.0 {
                continue;
            }
            for (si, v) in s.iter_mut().zip(col) {
                *si += c * v;
            }
        }
        s
    }

    /// Σ_i w_i * col_k[i] for every column, plus Σ_i w_i.
    fn weighted_sums(&self, w: &[f64]) -> (f64, Vec<f64>) {
        let total = w.iter().sum();
        let sums = self
            .cols
            .iter()
            .map(|col| col.iter().zip(w).map(|(v, wi)| v * wi).sum())
            .collect();
        (total, sums)
    }
}

/// A moment whose control-group values are constant. It is removed from the
/// solver's constraint set; it is balanced iff the target equals that value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedMoment {
    pub index: usize,
    pub label: String,
    pub control_value: f64,
    pub target: f64,
}

impl DroppedMoment {
    pub fn gap(&self) -> f64 {
        (self.control_value - self.target).abs()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DesignOptions {
    pub standardize: bool,
    pub drop_degenerate: bool,
}

/// Moment features of the control units, one block per dataset shard,
/// optionally standardized by pooled (treated + control) mean and sd.
#[derive(Debug, Clone)]
pub struct MomentDesign {
    blocks: Vec<DesignBlock>,
    labels: Vec<String>,
    active: Vec<usize>,
    scales: Vec<ColumnScale>,
    target: Vec<f64>,
    dropped: Vec<DroppedMoment>,
    n_control: usize,
}

pub(crate) struct EbEval {
    /// max_i(-ξ·z_i), the log-sum-exp shift.
    pub shift: f64,
    /// Σ_i exp(-ξ·z_i - shift).
    pub z: f64,
    /// Σ_i w_i z_i with normalized weights.
    pub weighted_mean: Vec<f64>,
}

pub(crate) struct MsEval {
    /// Σ w_i with w_i = max(0, 1 - ξ·z'_i) / N0.
    pub sum: f64,
    /// Σ w_i z_i.
    pub moments: Vec<f64>,
    /// Dual objective ½ mean(u_i²) + ξ_0 + ξ·X̃, minimized by the ascent step.
    pub objective: f64,
}

impl MomentDesign {
    pub(crate) fn build(
        ds: &Dataset,
        spec: &MomentSpec,
        opts: DesignOptions,
        engine: &Engine,
    ) -> Result<Self> {
        spec.validate(ds.schema())?;
        let p = spec.len();
        let fns = spec.fns();

        // control sum, treated sum, control min, control max per moment
        let stats = engine.fold(
            ds.shards(),
            || vec![[0.0, 0.0, f64::INFINITY, f64::NEG_INFINITY]; p],
            |_, shard| {
                fns.iter()
                    .map(|f| {
                        let c = f.column(&shard.control);
                        let t = f.column(&shard.treated);
                        let min = c.iter().copied().fold(f64::INFINITY, f64::min);
                        let max = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        [c.iter().sum(), t.iter().sum(), min, max]
                    })
                    .collect()
            },
            |a, b| {
                a.into_iter()
                    .zip(b)
                    .map(|(x, y)| [x[0] + y[0], x[1] + y[1], x[2].min(y[2]), x[3].max(y[3])])
                    .collect()
            },
        )?;
        let n0 = ds.n_control() as f64;
        let n1 = ds.n_treated() as f64;
        let n = n0 + n1;
        let target_orig: Vec<f64> = stats.iter().map(|s| s[1] / n1).collect();
        let pooled_mean: Vec<f64> = stats.iter().map(|s| (s[0] + s[1]) / n).collect();

        let scales: Vec<ColumnScale> = if opts.standardize {
            let ss = engine.fold(
                ds.shards(),
                || vec![0.0; p],
                |_, shard| {
                    fns.iter()
                        .zip(&pooled_mean)
                        .map(|(f, &mu)| {
                            f.column(&shard.control)
                                .iter()
                                .chain(&f.column(&shard.treated))
                                .map(|v| (v - mu).powi(2))
                                .sum()
                        })
                        .collect()
                },
                add_vecs,
            )?;
            pooled_mean
                .iter()
                .zip(&ss)
                .map(|(&mu, &s)| ColumnScale::from_moments(n, mu, s))
                .map(|c| if c.degenerate { ColumnScale::IDENTITY } else { c })
                .collect()
        } else {
            vec![ColumnScale::IDENTITY; p]
        };

        let labels = spec.labels(ds.schema());
        let mut active = Vec::with_capacity(p);
        let mut dropped = Vec::new();
        for k in 0..p {
            let [_, _, min, max] = stats[k];
            if opts.drop_degenerate && min == max {
                log::warn!(
                    "moment {} is constant ({min}) among control units; dropped from the constraint set",
                    labels[k]
                );
                dropped.push(DroppedMoment {
                    index: k,
                    label: labels[k].clone(),
                    control_value: min,
                    target: target_orig[k],
                });
            } else {
                active.push(k);
            }
        }

        let active_scales: Vec<ColumnScale> = active.iter().map(|&k| scales[k]).collect();
        let target = active
            .iter()
            .map(|&k| scales[k].apply(target_orig[k]))
            .collect();
        let blocks = engine.map(ds.shards(), |_, shard| {
            let cols = active
                .iter()
                .map(|&k| {
                    let sc = scales[k];
                    let mut col = fns[k].column(&shard.control);
                    for v in &mut col {
                        *v = sc.apply(*v);
                    }
                    col
                })
                .collect();
            DesignBlock {
                cols,
                n: shard.control.len(),
            }
        })?;

        Ok(MomentDesign {
            blocks,
            labels,
            active,
            scales: active_scales,
            target,
            dropped,
            n_control: ds.n_control(),
        })
    }

    /// Number of active (solved-for) moments.
    pub fn p(&self) -> usize {
        self.active.len()
    }

    pub fn n_control(&self) -> usize {
        self.n_control
    }

    pub fn dropped(&self) -> &[DroppedMoment] {
        &self.dropped
    }

    pub(crate) fn active(&self) -> &[usize] {
        &self.active
    }

    pub(crate) fn label(&self, active_k: usize) -> &str {
        &self.labels[self.active[active_k]]
    }

    pub(crate) fn target(&self) -> &[f64] {
        &self.target
    }

    /// Replaces the (solver-space) target vector.
    pub(crate) fn set_target(&mut self, target: Vec<f64>) {
        assert_eq!(target.len(), self.p());
        self.target = target;
    }

    // ---- entropy balancing ----

    pub(crate) fn eb_eval(&self, xi: &[f64], engine: &Engine) -> Result<EbEval> {
        let neg: Vec<f64> = xi.iter().map(|x| -x).collect();
        let shift = engine.fold(
            &self.blocks,
            || f64::NEG_INFINITY,
            |_, b| b.scores(&neg, 0.0).into_iter().fold(f64::NEG_INFINITY, f64::max),
            f64::max,
        )?;
        let p = self.p();
        let acc = engine.fold(
            &self.blocks,
            || vec![0.0; p + 1],
            |_, b| {
                let e: Vec<f64> = b.scores(&neg, -shift).into_iter().map(f64::exp).collect();
                let (z, sums) = b.weighted_sums(&e);
                std::iter::once(z).chain(sums).collect()
            },
            add_vecs,
        )?;
        let z = acc[0];
        Ok(EbEval {
            shift,
            z,
            weighted_mean: acc[1..].iter().map(|s| s / z).collect(),
        })
    }

    /// Normalized entropy-balancing weights per shard.
    pub(crate) fn eb_weights(&self, xi: &[f64], engine: &Engine) -> Result<Vec<Vec<f64>>> {
        let ev = self.eb_eval(xi, engine)?;
        let neg: Vec<f64> = xi.iter().map(|x| -x).collect();
        engine.map(&self.blocks, |_, b| {
            b.scores(&neg, -ev.shift)
                .into_iter()
                .map(|e| e.exp() / ev.z)
                .collect()
        })
    }

    /// log Σ exp(-ξ·z_i) + ξ·target.
    pub(crate) fn eb_objective(&self, xi: &[f64], engine: &Engine) -> Result<f64> {
        let ev = self.eb_eval(xi, engine)?;
        Ok(ev.shift + ev.z.ln() + dot(xi, &self.target))
    }

    // ---- MicroSynth ----

    /// Raw projected weights `max(0, 1 - ξ·z'_i)` per shard, `ξ[0]` multiplying the constant.
    pub(crate) fn ms_raw_weights(&self, xi: &[f64], engine: &Engine) -> Result<Vec<Vec<f64>>> {
        let neg: Vec<f64> = xi[1..].iter().map(|x| -x).collect();
        engine.map(&self.blocks, |_, b| {
            b.scores(&neg, 1.0 - xi[0])
                .into_iter()
                .map(|u| u.max(0.0))
                .collect()
        })
    }

    pub(crate) fn ms_eval(&self, xi: &[f64], engine: &Engine) -> Result<MsEval> {
        let neg: Vec<f64> = xi[1..].iter().map(|x| -x).collect();
        let p = self.p();
        let acc = engine.fold(
            &self.blocks,
            || vec![0.0; p + 2],
            |_, b| {
                let u: Vec<f64> = b
                    .scores(&neg, 1.0 - xi[0])
                    .into_iter()
                    .map(|u| u.max(0.0))
                    .collect();
                let sq: f64 = u.iter().map(|v| v * v).sum();
                let (s, sums) = b.weighted_sums(&u);
                std::iter::once(s).chain(sums).chain(std::iter::once(sq)).collect()
            },
            add_vecs,
        )?;
        let n0 = self.n_control as f64;
        Ok(MsEval {
            sum: acc[0] / n0,
            moments: acc[1..=p].iter().map(|s| s / n0).collect(),
            objective: 0.5 * acc[p + 1] / n0 + xi[0] + dot(&xi[1..], self.target()),
        })
    }

    // ---- residuals in original units ----

    /// Original-scale residual `Σ w c_k - X̃_k` for each active moment, given
    /// solver-space `Σ w` and `Σ w z_k`.
    pub(crate) fn original_residual(&self, sum: f64, moments: &[f64]) -> Vec<f64> {
        moments
            .iter()
            .zip(&self.target)
            .zip(&self.scales)
            .map(|((m, t), sc)| sc.sd * (m - t) + sc.mean * (sum - 1.0))
            .collect()
    }

    /// Largest gap among dropped moments.
    pub(crate) fn dropped_gap(&self) -> f64 {
        self.dropped.iter().map(DroppedMoment::gap).fold(0.0, f64::max)
    }

    /// Scale of each active moment (for mapping duals back).
    pub(crate) fn scales(&self) -> &[ColumnScale] {
        &self.scales
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
