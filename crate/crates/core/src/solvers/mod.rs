//! Dual-space balancing solvers.
//!
//! Both solvers work on the Lagrange dual of a moment-matching problem. Every
//! iteration costs two engine passes over the control units: one to recover
//! the primal weights from the current multipliers, one to accumulate the
//! weighted moments that make up the dual gradient.
//!
//! Multipliers live in the solver's feature space (moment columns scaled by
//! their pooled mean and sd unless `standardize` is off); residuals and the
//! stopping rule are always measured in the original units of each moment.

mod design;
mod eb;
mod ms;
mod weights;

use serde::{Deserialize, Serialize};

pub use design::{DroppedMoment, MomentDesign};
pub use eb::{eb_dual_gradient, eb_dual_objective, eb_weights_from_dual, solve_eb};
pub use ms::{ms_weights_from_dual, solve_ms};
pub use weights::WeightVector;

pub(crate) use design::{dot, inf_norm};

use crate::data::{ColumnScale, Dataset, MomentSpec};
use crate::engine::Engine;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Eb,
    Ms,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Eb => "eb",
            Method::Ms => "ms",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eb" => Ok(Method::Eb),
            "ms" => Ok(Method::Ms),
            other => Err(Error::Validation(format!("unknown balancing method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Initial learning rate.
    pub alpha: f64,
    /// Heavy-ball coefficient for entropy balancing.
    pub momentum_beta: f64,
    pub max_iterations: usize,
    /// Threshold on the ∞-norm of the balance residual.
    pub tolerance: f64,
    /// Learning-rate multiplier applied when oscillation is detected.
    pub decay_factor: f64,
    pub decay: bool,
    /// Seed for the random initial multipliers of entropy balancing.
    pub seed: u64,
    /// Start entropy balancing from ξ = 0 instead of a random draw.
    pub zero_init: bool,
    pub standardize: bool,
    /// Iterations without 1e-12 improvement after which the run is declared stuck.
    pub stagnation_window: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            alpha: 0.01,
            momentum_beta: 0.9,
            max_iterations: 5_000,
            tolerance: 1e-4,
            decay_factor: 0.5,
            decay: true,
            seed: 0,
            zero_init: false,
            standardize: true,
            stagnation_window: 200,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum_beta) {
            return bad("momentum_beta must lie in [0, 1)");
        }
        if !(self.tolerance > 0.0) {
            return bad("tolerance must be positive");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return bad("decay_factor must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Multipliers and momentum state of a solver run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub xi: Vec<f64>,
    pub velocity: Vec<f64>,
    /// Acceleration sequence β^(k) of MicroSynth; stays 1 for entropy balancing.
    /// Non-decreasing except at an oscillation decay, which restarts it at 1.
    pub beta_seq: f64,
    pub iteration: usize,
}

impl DualState {
    pub fn zeros(len: usize) -> Self {
        DualState {
            xi: vec![0.0; len],
            velocity: vec![0.0; len],
            beta_seq: 1.0,
            iteration: 0,
        }
    }
}

/// Residual of one moment after solving.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentResidual {
    pub moment: String,
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub method: Method,
    pub weights: WeightVector,
    pub dual: DualState,
    pub residual_trace: Vec<f64>,
    /// Dual objective per iteration; the oscillation rule watches this trace.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub iterations_used: usize,
    /// Moments sorted by absolute residual, worst first. Filled when the run
    /// did not converge.
    pub worst_moments: Vec<MomentResidual>,
    pub dropped: Vec<DroppedMoment>,
    pub stagnated: bool,
    pub decays: usize,
    scales: Vec<ColumnScale>,
    active: Vec<usize>,
    n_moments: usize,
}

impl SolveResult {
    pub fn final_residual(&self) -> f64 {
        self.residual_trace.last().copied().unwrap_or(f64::NAN)
    }

    /// Multipliers on the original moment scale. For MicroSynth the first
    /// entry multiplies the constant and the vector reproduces the returned
    /// (pre-normalization) weights through [`ms_weights_from_dual`].
    pub fn dual_in_original_units(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_moments];
        match self.method {
            Method::Eb => {
                for ((x, s), &k) in self.dual.xi.iter().zip(&self.scales).zip(&self.active) {
                    out[k] = x / s.sd;
                }
                out
            }
            Method::Ms => {
                // solver iterates on u = N0 * w; map back to w = max(0, 1 - ξ·c')
                let n0 = self.weights.len() as f64;
                let mut constant = self.dual.xi[0];
                for ((x, s), &k) in self.dual.xi[1..].iter().zip(&self.scales).zip(&self.active) {
                    constant -= x * s.mean / s.sd;
                    out[k] = x / s.sd / n0;
                }
                std::iter::once(1.0 - (1.0 - constant) / n0)
                    .chain(out)
                    .collect()
            }
        }
    }

    pub fn metadata(&self) -> SolveMetadata {
        SolveMetadata {
            method: self.method,
            converged: self.converged,
            iterations: self.iterations_used,
            final_residual: self.final_residual(),
            stagnated: self.stagnated,
            decays: self.decays,
            worst_moments: self.worst_moments.clone(),
            dropped_moments: self.dropped.clone(),
            residual_trace: self.residual_trace.clone(),
        }
    }
}

/// Serializable summary of a solver run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveMetadata {
    pub method: Method,
    pub converged: bool,
    pub iterations: usize,
    pub final_residual: f64,
    pub stagnated: bool,
    pub decays: usize,
    pub worst_moments: Vec<MomentResidual>,
    pub dropped_moments: Vec<DroppedMoment>,
    pub residual_trace: Vec<f64>,
}

/// Halves (by `decay_factor`) the learning rate and zeroes the velocity when
/// the residual rose on at least 3 of the last 4 iterations.
///
/// Returns whether a decay was applied. Traces shorter than 4 entries are
/// left alone.
pub fn detect_oscillation_and_decay(
    state: &mut DualState,
    trace: &[f64],
    cfg: &mut SolverConfig,
) -> bool {
    if trace.len() < 4 {
        return false;
    }
    let tail = &trace[trace.len().saturating_sub(5)..];
    let rises = tail.windows(2).filter(|w| w[1] > w[0]).count();
    if rises >= 3 {
        cfg.alpha *= cfg.decay_factor;
        state.velocity.iter_mut().for_each(|v| *v = 0.0);
        true
    } else {
        false
    }
}

/// Dispatches to [`solve_eb`] or [`solve_ms`].
pub fn solve(
    method: Method,
    ds: &Dataset,
    spec: &MomentSpec,
    cfg: &SolverConfig,
    engine: &Engine,
) -> Result<SolveResult> {
    match method {
        Method::Eb => solve_eb(ds, spec, cfg, engine),
        Method::Ms => solve_ms(ds, spec, cfg, engine),
    }
}

/// Bookkeeping shared by both solver loops.
struct RunTracker {
    trace: Vec<f64>,
    best: f64,
    best_xi: Vec<f64>,
    best_history: Vec<f64>,
    window: usize,
    last_decay: usize,
    decays: usize,
}

impl RunTracker {
    fn new(window: usize, xi: &[f64]) -> Self {
        RunTracker {
            trace: Vec::new(),
            best: f64::INFINITY,
            best_xi: xi.to_vec(),
            best_history: Vec::new(),
            window,
            last_decay: 0,
            decays: 0,
        }
    }

    /// Records one iteration. `active` is the residual over solved-for
    /// moments, `full` additionally includes dropped moments.
    fn record(&mut self, active: f64, full: f64, xi: &[f64]) -> Result<()> {
        let k = self.trace.len();
        if !active.is_finite() || (k > 0 && active > 1e6 * self.trace[0].max(f64::MIN_POSITIVE)) {
            return Err(Error::Divergence {
                iteration: k + 1,
                residual: active,
            });
        }
        self.trace.push(full);
        if active < self.best {
            self.best = active;
            self.best_xi.copy_from_slice(xi);
        }
        self.best_history.push(self.best);
        Ok(())
    }

    fn stagnated(&self) -> bool {
        let k = self.best_history.len();
        k > self.window && self.best_history[k - 1 - self.window] - self.best < 1e-12
    }

    /// Applies the oscillation rule to the residual trace, except while the
    /// dual objective (`objective`) has fallen on each of the last 4 steps.
    /// That pattern is steady descent: plain gradient steps can raise the
    /// worst residual coordinate for hundreds of iterations while the
    /// objective falls, and halving α there only freezes the run.
    fn maybe_decay(&mut self, state: &mut DualState, cfg: &mut SolverConfig, objective: &[f64]) -> bool {
        let k = self.trace.len();
        if !cfg.decay || k < self.last_decay + 4 {
            return false;
        }
        let tail = &objective[objective.len().saturating_sub(5)..];
        if tail.len() == 5 && tail.windows(2).all(|w| w[1] < w[0]) {
            return false;
        }
        let decayed = detect_oscillation_and_decay(state, &self.trace, cfg);
        if decayed {
            self.last_decay = k;
            self.decays += 1;
        }
        decayed
    }
}

fn worst_moments(design: &MomentDesign, residual: &[f64]) -> Vec<MomentResidual> {
    let mut out: Vec<MomentResidual> = residual
        .iter()
        .enumerate()
        .map(|(k, r)| MomentResidual {
            moment: design.label(k).to_string(),
            residual: *r,
        })
        .chain(design.dropped().iter().map(|d| MomentResidual {
            moment: d.label.clone(),
            residual: d.control_value - d.target,
        }))
        .collect();
    out.sort_by(|a, b| b.residual.abs().total_cmp(&a.residual.abs()));
    out
}
