//! Semi-synthetic evaluation data and the replication benchmark.
//!
//! A parametric zero-inflated count generator stands in for real user data.
//! Its first half trains outcome and selection models; synthesized datasets
//! then take covariates from fresh draws, outcomes from the outcome models
//! plus resampled residuals, and treatment from the selection model. The
//! true effect is zero by construction.

mod benchmark;
mod dgp;
pub mod forest;
mod population;

use serde::{Deserialize, Serialize};

pub use benchmark::{
    prepare_dgp, replicate_dataset, run_benchmark, BenchMethod, BenchmarkConfig, BenchmarkReport,
    MethodSummary, OutcomeMetrics, ReplicationRecord,
};
pub use dgp::{
    fit_dgp_models, linear_coefficient_count, model_features, synthesis_rng, synthesize, DgpModels,
    OutcomeDgp, SelectionDgp, MAX_ATTEMPTS, PROPENSITY_CLIP,
};
pub use population::{
    generate_base_population, generate_rows, BasePopulation, BinaryParams, ContinuousParams,
    LatentParams, PopulationParams,
};

use crate::data::{Dataset, Schema};
use crate::engine::Engine;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DgpKind {
    #[serde(rename = "linear")]
    Linear,
    #[serde(rename = "interactions")]
    LinearInteractions,
    #[serde(rename = "forest")]
    RandomForest,
}

impl DgpKind {
    pub fn name(&self) -> &'static str {
        match self {
            DgpKind::Linear => "linear",
            DgpKind::LinearInteractions => "interactions",
            DgpKind::RandomForest => "forest",
        }
    }
}

impl std::str::FromStr for DgpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(DgpKind::Linear),
            "interactions" | "linear_interactions" => Ok(DgpKind::LinearInteractions),
            "forest" | "random_forest" => Ok(DgpKind::RandomForest),
            other => Err(Error::Validation(format!("unknown dgp {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    /// Size of the base population; each half has `n_units / 2` units.
    pub n_units: usize,
    pub d_continuous: usize,
    pub d_binary: usize,
    pub n_outcomes: usize,
    pub dgp: DgpKind,
    pub seed: u64,
    /// Index among the binary covariates of the interaction anchor.
    pub interaction_anchor: usize,
    pub shard_rows: usize,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        SimulationSpec {
            n_units: 20_000,
            d_continuous: 12,
            d_binary: 4,
            n_outcomes: 3,
            dgp: DgpKind::Linear,
            seed: 0,
            interaction_anchor: 0,
            shard_rows: 4096,
        }
    }
}

impl SimulationSpec {
    /// Spec whose synthesized datasets have `n` units.
    pub fn with_dataset_size(n: usize, dgp: DgpKind, seed: u64) -> Self {
        SimulationSpec {
            n_units: 2 * n,
            dgp,
            seed,
            ..SimulationSpec::default()
        }
    }

    pub fn d(&self) -> usize {
        self.d_continuous + self.d_binary
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.n_units < 4 || !self.n_units.is_multiple_of(2) {
            return fail(format!("n_units must be even and at least 4, got {}", self.n_units));
        }
        if self.d_continuous < 3 || self.d_binary < 1 {
            return fail("simulation needs at least 3 continuous and 1 binary covariate".into());
        }
        if self.n_outcomes < 1 {
            return fail("simulation needs at least one outcome".into());
        }
        if self.interaction_anchor >= self.d_binary {
            return fail(format!(
                "interaction anchor {} out of range for {} binary covariates",
                self.interaction_anchor, self.d_binary
            ));
        }
        if self.shard_rows == 0 {
            return fail("shard_rows must be at least 1".into());
        }
        Ok(())
    }

    /// Covariates `c0..` (counts) then `b0..` (binary); outcomes `y0..`.
    pub fn schema(&self) -> Schema {
        Schema::new(
            "unit_id",
            "treatment",
            (0..self.d_continuous)
                .map(|j| format!("c{j}"))
                .chain((0..self.d_binary).map(|j| format!("b{j}")))
                .collect(),
            (0..self.n_outcomes).map(|j| format!("y{j}")).collect(),
        )
    }
}

/// One synthesized dataset: the base population is split in halves, models
/// are trained on the first and applied to the second.
pub fn simulate_dataset(spec: &SimulationSpec, engine: &Engine) -> Result<Dataset> {
    spec.validate()?;
    let (train, test) = generate_base_population(spec).split_halves();
    let models = fit_dgp_models(&train, spec, engine)?;
    synthesize(&test, &models, spec, &mut synthesis_rng(spec, 0))
}
