use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::design::{DesignOptions, MomentDesign};
use super::{
    dot, inf_norm, worst_moments, DualState, Method, RunTracker, SolveResult, SolverConfig,
    WeightVector,
};
use crate::data::{Dataset, MomentSpec, TargetMoments};
use crate::engine::Engine;
use crate::error::{Error, Result};

const RAW: DesignOptions = DesignOptions {
    standardize: false,
    drop_degenerate: false,
};

fn check_dual(xi: &[f64], p: usize) -> Result<()> {
    if xi.len() != p {
        return Err(Error::Validation(format!(
            "dual vector has length {} but the moment spec has {p} moments",
            xi.len()
        )));
    }
    if xi.iter().any(|x| !x.is_finite()) {
        return Err(Error::Validation("dual vector has non-finite entries".into()));
    }
    Ok(())
}

fn raw_design(
    ds: &Dataset,
    spec: &MomentSpec,
    target: Option<&TargetMoments>,
    engine: &Engine,
) -> Result<MomentDesign> {
    let mut design = MomentDesign::build(ds, spec, RAW, engine)?;
    if let Some(t) = target {
        if t.values.len() != spec.len() {
            return Err(Error::Validation(format!(
                "{} target moments for {} moment functions",
                t.values.len(),
                spec.len()
            )));
        }
        design.set_target(t.values.clone());
    }
    Ok(design)
}

/// Entropy-balancing weights `softmax(-ξ·c(X_i))` over control units, on the
/// original moment scale.
pub fn eb_weights_from_dual(
    ds: &Dataset,
    xi: &[f64],
    spec: &MomentSpec,
    engine: &Engine,
) -> Result<WeightVector> {
    check_dual(xi, spec.len())?;
    let design = raw_design(ds, spec, None, engine)?;
    let w = design.eb_weights(xi, engine)?;
    finish_weights(ds, w)
}

/// `log Σ exp(-ξ·c(X_i)) + ξ·X̃`.
pub fn eb_dual_objective(
    ds: &Dataset,
    xi: &[f64],
    spec: &MomentSpec,
    target: &TargetMoments,
    engine: &Engine,
) -> Result<f64> {
    check_dual(xi, spec.len())?;
    raw_design(ds, spec, Some(target), engine)?.eb_objective(xi, engine)
}

/// `X̃ - Σ w_i(ξ) c(X_i)`.
pub fn eb_dual_gradient(
    ds: &Dataset,
    xi: &[f64],
    spec: &MomentSpec,
    target: &TargetMoments,
    engine: &Engine,
) -> Result<Vec<f64>> {
    check_dual(xi, spec.len())?;
    let design = raw_design(ds, spec, Some(target), engine)?;
    let ev = design.eb_eval(xi, engine)?;
    Ok(design
        .target()
        .iter()
        .zip(&ev.weighted_mean)
        .map(|(t, m)| t - m)
        .collect())
}

fn finish_weights(ds: &Dataset, per_shard: Vec<Vec<f64>>) -> Result<WeightVector> {
    let values: Vec<f64> = per_shard.into_iter().flatten().collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("entropy-balancing weights are not finite".into()));
    }
    WeightVector::for_controls(ds, values)
}

/// Entropy balancing by heavy-ball gradient descent on the dual.
pub fn solve_eb(
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
    solve_eb_design(ds, &design, spec.len(), cfg, engine)
}

pub(crate) fn solve_eb_design(
    ds: &Dataset,
    design: &MomentDesign,
    n_moments: usize,
    cfg: &SolverConfig,
    engine: &Engine,
) -> Result<SolveResult> {
    let mut cfg = cfg.clone();
    let p = design.p();
    let mut state = DualState::zeros(p);
    if !cfg.zero_init {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for x in &mut state.xi {
            *x = StandardNormal.sample(&mut rng);
        }
    }
    let gap = design.dropped_gap();
    let mut tracker = RunTracker::new(cfg.stagnation_window, &state.xi);
    let mut converged = false;
    let mut stagnated = false;
    let mut last_residual = Vec::new();
    let mut objective = Vec::new();

    while tracker.trace.len() < cfg.max_iterations {
        let ev = design.eb_eval(&state.xi, engine)?;
        let resid = design.original_residual(1.0, &ev.weighted_mean);
        let active = inf_norm(&resid);
        tracker.record(active, active.max(gap), &state.xi)?;
        last_residual = resid;
        objective.push(ev.shift + ev.z.ln() + dot(&state.xi, design.target()));
        state.iteration = tracker.trace.len();
        if active <= cfg.tolerance {
            converged = gap <= cfg.tolerance;
            break;
        }
        if tracker.stagnated() {
            stagnated = true;
            break;
        }
        tracker.maybe_decay(&mut state, &mut cfg, &objective);
        // ∇L = X̃ - Σ w z ; v ← -α∇L + βv ; ξ ← ξ + v
        for k in 0..p {
            let g = design.target()[k] - ev.weighted_mean[k];
            state.velocity[k] = -cfg.alpha * g + cfg.momentum_beta * state.velocity[k];
            state.xi[k] += state.velocity[k];
        }
    }

    if !converged && tracker.best_xi != state.xi {
        state.xi = tracker.best_xi.clone();
        let ev = design.eb_eval(&state.xi, engine)?;
        last_residual = design.original_residual(1.0, &ev.weighted_mean);
    }
    let weights = finish_weights(ds, design.eb_weights(&state.xi, engine)?)?;
    let worst = if converged {
        Vec::new()
    } else {
        worst_moments(design, &last_residual)
    };
    if !converged {
        log::warn!(
            "entropy balancing stopped after {} iterations without reaching tolerance {}",
            tracker.trace.len(),
            cfg.tolerance
        );
    }
    Ok(SolveResult {
        method: Method::Eb,
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
