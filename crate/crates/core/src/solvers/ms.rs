use super::design::{DesignOptions, MomentDesign};
use super::{inf_norm, worst_moments, DualState, Method, RunTracker, SolveResult, SolverConfig, WeightVector};
use crate::data::{Dataset, MomentSpec};
use crate::engine::Engine;
use crate::error::{Error, Result};

/// Projected MicroSynth weights `max(0, 1 - ξ·c'(X_i))` with `c' = (1, c)`.
/// No normalization is applied.
pub fn ms_weights_from_dual(
    ds: &Dataset,
    xi: &[f64],
    spec: &MomentSpec,
    engine: &Engine,
) -> Result<WeightVector> {
    if xi.len() != spec.len() + 1 {
        return Err(Error::Validation(format!(
            "dual vector has length {} but {} is needed (constant plus {} moments)",
            xi.len(),
            spec.len() + 1,
            spec.len()
        )));
    }
    if xi.iter().any(|x| !x.is_finite()) {
        return Err(Error::Validation("dual vector has non-finite entries".into()));
    }
    spec.validate(ds.schema())?;
    let per_shard = engine.map(ds.shards(), |_, shard| {
        let cols: Vec<Vec<f64>> = spec.fns().iter().map(|f| f.column(&shard.control)).collect();
        (0..shard.control.len())
            .map(|i| {
                let mut s = 0.0;
                s += xi[0];
                for (x, col) in xi[1..].iter().zip(&cols) {
                    s += x * col[i];
                }
                (1.0 - s).max(0.0)
            })
            .collect::<Vec<f64>>()
    })?;
    WeightVector::for_controls(ds, per_shard.into_iter().flatten().collect())
}

/// MicroSynth by accelerated dual ascent with a nonnegativity projection.
pub fn solve_ms(
    ds: &Dataset,
    spec: &MomentSpec,
    cfg: &SolverConfig,
    engine: &Engine,
) -> Result<SolveResult> {
    cfg.validate()?;
    let opts = DesignOptions {
        standardize: cfg.standardize,
        drop_degenerate: true,
    };
    let design = MomentDesign::build(ds, spec, opts, engine)?;
    solve_ms_design(ds, &design, spec.len(), cfg, engine)
}

struct Check {
    /// ∞-norm over the sum row and the original-unit moment residuals.
    active: f64,
    /// Largest original-unit gap of the normalized weights.
    normalized: f64,
    sum: f64,
    objective: f64,
    residual: Vec<f64>,
    moments: Vec<f64>,
}

fn check(design: &MomentDesign, xi: &[f64], engine: &Engine) -> Result<Check> {
    let ev = design.ms_eval(xi, engine)?;
    let residual = design.original_residual(ev.sum, &ev.moments);
    let active = inf_norm(&residual).max((ev.sum - 1.0).abs());
    let normalized = if ev.sum > 0.0 {
        ev.moments
            .iter()
            .zip(design.target())
            .zip(design.scales())
            .map(|((m, t), sc)| sc.sd * (m / ev.sum - t).abs())
            .fold(0.0, f64::max)
    } else {
        f64::INFINITY
    };
    Ok(Check {
        active,
        normalized,
        sum: ev.sum,
        objective: ev.objective,
        residual,
        moments: ev.moments,
    })
}

pub(crate) fn solve_ms_design(
    ds: &Dataset,
    design: &MomentDesign,
    n_moments: usize,
    cfg: &SolverConfig,
    engine: &Engine,
) -> Result<SolveResult> {
    let mut cfg = cfg.clone();
    let p = design.p();
    let mut state = DualState::zeros(p + 1);
    // v^(k-1); the velocity field holds v^(k) - v^(k-1)
    let mut anchor = vec![0.0; p + 1];
    let gap = design.dropped_gap();
    let mut tracker = RunTracker::new(cfg.stagnation_window, &state.xi);
    let mut converged = false;
    let mut stagnated = false;
    let mut last = None;
    let mut objective = Vec::new();

    while tracker.trace.len() < cfg.max_iterations {
        let c = check(design, &state.xi, engine)?;
        tracker.record(c.active, c.active.max(gap), &state.xi)?;
        objective.push(c.objective);
        state.iteration = tracker.trace.len();
        let done = c.active <= cfg.tolerance && c.normalized <= cfg.tolerance;
        let (sum, moments) = (c.sum, c.moments.clone());
        last = Some(c);
        if done {
            converged = gap <= cfg.tolerance;
            break;
        }
        if tracker.stagnated() {
            stagnated = true;
            break;
        }
        if tracker.maybe_decay(&mut state, &mut cfg, &objective) {
            // a decay also restarts the acceleration sequence
            anchor.copy_from_slice(&state.xi);
            state.beta_seq = 1.0;
        }
        // ascent direction A w - X̃' (sum row first)
        let grad = std::iter::once(sum - 1.0)
            .chain(moments.iter().zip(design.target()).map(|(m, t)| m - t));
        let v: Vec<f64> = state
            .xi
            .iter()
            .zip(grad)
            .map(|(x, g)| x + cfg.alpha * g)
            .collect();
        let beta_next = (1.0 + (1.0 + 4.0 * state.beta_seq * state.beta_seq).sqrt()) / 2.0;
        let coef = (state.beta_seq - 1.0) / beta_next;
        for k in 0..=p {
            state.velocity[k] = v[k] - anchor[k];
            state.xi[k] = v[k] + coef * state.velocity[k];
        }
        anchor = v;
        state.beta_seq = beta_next;
    }

    if !converged && tracker.best_xi != state.xi {
        state.xi = tracker.best_xi.clone();
        last = Some(check(design, &state.xi, engine)?);
    }
    let last = last.expect("at least one iteration runs");
    let n0 = design.n_control() as f64;
    let mut values: Vec<f64> = design
        .ms_raw_weights(&state.xi, engine)?
        .into_iter()
        .flatten()
        .map(|u| u / n0)
        .collect();
    if (last.sum - 1.0).abs() <= cfg.tolerance && last.sum > 0.0 {
        let s: f64 = values.iter().sum();
        values.iter_mut().for_each(|v| *v /= s);
    } else {
        converged = false;
    }
    let weights = WeightVector::for_controls(ds, values)?;
    let worst = if converged {
        Vec::new()
    } else {
        log::warn!(
            "MicroSynth stopped after {} iterations without reaching tolerance {}",
            tracker.trace.len(),
            cfg.tolerance
        );
        worst_moments(design, &last.residual)
    };
    Ok(SolveResult {
        method: Method::Ms,
        weights,
        dual: state,
        iterations_used: tracker.trace.len(),
        residual_trace: tracker.trace,
        objective_trace: objective,
        converged,
        worst_moments: worst,
        dropped: design.dropped().to_vec(),
        stagnated,
        decays: tracker.decays,
        scales: design.scales().to_vec(),
        active: design.active().to_vec(),
        n_moments,
    })
}
