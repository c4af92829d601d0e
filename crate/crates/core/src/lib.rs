//! Covariate balancing weights computed with map-reduce passes over sharded
//! data: entropy balancing and MicroSynth solvers, propensity and outcome
//! model baselines, balance diagnostics, effect estimation and a simulation
//! benchmark.

pub mod baselines;
pub mod data;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod estimation;
pub mod simulation;
pub mod solvers;

pub use data::{Dataset, MomentSpec, Schema, TargetMoments};
pub use engine::{Engine, EngineConfig};
pub use error::{Error, Result};
pub use solvers::{solve_eb, solve_ms, Method, SolveResult, SolverConfig, WeightVector};
