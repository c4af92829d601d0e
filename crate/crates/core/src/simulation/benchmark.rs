use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::{fit_dgp_models, synthesis_rng, synthesize, DgpModels};
use super::population::{generate_rows, PopulationParams};
use super::SimulationSpec;
use crate::baselines::{
    dr_correct, fit_logistic, ipw_weights, tune_ipw, LogisticConfig, Regularization, TuningGrid,
};
use crate::data::{Dataset, MomentSpec};
use crate::diagnostics::{diagnose, stability, DiagnoseOptions, Interactions};
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::estimation::{meta_metrics, patt, MetaMetrics};
use crate::solvers::{solve, Method, SolverConfig, WeightVector};

/// Benchmark replications may fail up to this fraction per method.
pub const MAX_FAILURE_RATE: f64 = 0.20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BenchMethod {
    #[serde(rename = "eb")]
    Eb,
    #[serde(rename = "ms")]
    Ms,
    /// Logistic propensity model with C = 1, pure L2, no cross-fitting.
    #[serde(rename = "ipw")]
    Ipw,
    #[serde(rename = "ipw-tuned")]
    IpwTuned,
    #[serde(rename = "ipw-dr")]
    IpwDr,
    #[serde(rename = "eb-dr")]
    EbDr,
    #[serde(rename = "ms-dr")]
    MsDr,
}

impl BenchMethod {
    pub const ALL: [BenchMethod; 7] = [
        BenchMethod::Eb,
        BenchMethod::Ms,
        BenchMethod::Ipw,
        BenchMethod::IpwTuned,
        BenchMethod::IpwDr,
        BenchMethod::EbDr,
        BenchMethod::MsDr,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            BenchMethod::Eb => "eb",
            BenchMethod::Ms => "ms",
            BenchMethod::Ipw => "ipw",
            BenchMethod::IpwTuned => "ipw-tuned",
            BenchMethod::IpwDr => "ipw-dr",
            BenchMethod::EbDr => "eb-dr",
            BenchMethod::MsDr => "ms-dr",
        }
    }

    /// The weighting method whose weights this method uses.
    fn base(&self) -> BenchMethod {
        match self {
            BenchMethod::IpwDr => BenchMethod::Ipw,
            BenchMethod::EbDr => BenchMethod::Eb,
            BenchMethod::MsDr => BenchMethod::Ms,
            other => *other,
        }
    }

    fn doubly_robust(&self) -> bool {
        self.base() != *self
    }
}

impl std::str::FromStr for BenchMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BenchMethod::ALL
            .iter()
            .find(|m| m.name() == s)
            .copied()
            .ok_or_else(|| Error::Validation(format!("unknown benchmark method {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub spec: SimulationSpec,
    pub methods: Vec<BenchMethod>,
    pub replications: usize,
    pub solver: SolverConfig,
    /// Balance squares as well as means.
    pub second_moments: bool,
    pub logistic: LogisticConfig,
}

impl BenchmarkConfig {
    pub fn new(spec: SimulationSpec, methods: Vec<BenchMethod>, replications: usize) -> Self {
        BenchmarkConfig {
            spec,
            methods,
            replications,
            solver: SolverConfig::default(),
            second_moments: false,
            logistic: LogisticConfig::default(),
        }
    }
}

/// One method on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub method: String,
    pub n_treated: usize,
    pub n_control: usize,
    pub converged: bool,
    pub error: Option<String>,
    /// Mean first-moment SMD after weighting.
    pub mean_smd: Option<f64>,
    pub ess_ratio: Option<f64>,
    /// Percentage-change estimate per outcome.
    pub deltas: Vec<Option<f64>>,
}

impl ReplicationRecord {
    fn ok(&self) -> bool {
        self.error.is_none() && self.converged
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeMetrics {
    pub outcome: String,
    pub metrics: MetaMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub successes: usize,
    pub failures: usize,
    pub outcomes: Vec<OutcomeMetrics>,
    /// Median over outcomes.
    pub median_amb: f64,
    pub max_amb: f64,
    pub median_sd: f64,
    /// Mean over replications of the mean first-moment SMD.
    pub mean_smd: f64,
    pub mean_ess_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub spec: SimulationSpec,
    pub replications: usize,
    /// The true percentage change of every synthesized dataset.
    pub truth: f64,
    pub methods: Vec<MethodSummary>,
    pub records: Vec<ReplicationRecord>,
}

impl BenchmarkReport {
    pub fn method(&self, m: BenchMethod) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m.name())
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

struct Weighting {
    weights: Option<WeightVector>,
    converged: bool,
    error: Option<String>,
}

fn weigh(base: BenchMethod, ds: &Dataset, spec: &MomentSpec, cfg: &BenchmarkConfig, engine: &Engine) -> Weighting {
    let result: Result<(WeightVector, bool)> = match base {
        BenchMethod::Eb | BenchMethod::Ms => {
            let method = if base == BenchMethod::Eb { Method::Eb } else { Method::Ms };
            solve(method, ds, spec, &cfg.solver, engine).map(|r| (r.weights, r.converged))
        }
        BenchMethod::Ipw => Regularization::new(1.0, 0.0)
            .and_then(|reg| fit_logistic(ds, reg, 0, &cfg.logistic, engine))
            .and_then(|m| ipw_weights(ds, &m))
            .map(|w| (w, true)),
        BenchMethod::IpwTuned => tune_ipw(ds, &TuningGrid::default(), &MomentSpec::first(ds.d()), &cfg.logistic, engine)
            .map(|r| (r.weights, true)),
        _ => unreachable!("dr methods reuse base weights"),
    };
    match result {
        Ok((w, converged)) => Weighting {
            weights: Some(w),
            converged,
            error: None,
        },
        Err(e) => Weighting {
            weights: None,
            converged: false,
            error: Some(e.to_string()),
        },
    }
}

fn evaluate(
    method: BenchMethod,
    r: usize,
    ds: &Dataset,
    base: &Weighting,
    engine: &Engine,
) -> ReplicationRecord {
    let mut rec = ReplicationRecord {
        replication: r,
        method: method.name().into(),
        n_treated: ds.n_treated(),
        n_control: ds.n_control(),
        converged: base.converged,
        error: base.error.clone(),
        mean_smd: None,
        ess_ratio: None,
        deltas: vec![None; ds.m()],
    };
    let Some(w) = &base.weights else {
        return rec;
    };
    let opts = DiagnoseOptions {
        interactions: Interactions::Never,
        ..DiagnoseOptions::default()
    };
    let run = || -> Result<(f64, f64, Vec<Option<f64>>)> {
        let report = diagnose(ds, w, &opts, engine)?;
        let st = stability(&w.aligned_to(ds)?.normalized()?)?;
        let deltas = (0..ds.m())
            .map(|j| {
                let p = patt(ds, w, j, engine)?;
                let tau = if method.doubly_robust() { dr_correct(ds, w, j, engine)? } else { p.patt };
                let base = p.treated_mean - tau;
                Ok((base != 0.0).then(|| tau / base))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((report.summary.mean_smd, st.ess_ratio, deltas))
    };
    match run() {
        Ok((smd, ess, deltas)) => {
            rec.mean_smd = Some(smd);
            rec.ess_ratio = Some(ess);
            rec.deltas = deltas;
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec
}

/// Training population and fitted models shared by all replications.
pub fn prepare_dgp(spec: &SimulationSpec, engine: &Engine) -> Result<(PopulationParams, DgpModels)> {
    spec.validate()?;
    let params = PopulationParams::draw(spec);
    let train = generate_rows(spec, &params, spec.n_units / 2, 0);
    let models = fit_dgp_models(&train, spec, engine)?;
    Ok((params, models))
}

/// Synthesized dataset of replication `r`: a fresh test half from stream
/// `r + 1` run through the fitted models.
pub fn replicate_dataset(
    spec: &SimulationSpec,
    params: &PopulationParams,
    models: &DgpModels,
    r: usize,
) -> Result<Dataset> {
    let test = generate_rows(spec, params, spec.n_units / 2, r as u64 + 1);
    synthesize(&test, models, spec, &mut synthesis_rng(spec, r))
}

/// Runs every method on `replications` synthesized datasets and aggregates
/// bias and spread of the percentage-change estimates (truth 0).
pub fn run_benchmark(cfg: &BenchmarkConfig, engine: &Engine) -> Result<BenchmarkReport> {
    if cfg.replications == 0 {
        return Err(Error::Validation("benchmark needs at least one replication".into()));
    }
    if cfg.methods.is_empty() {
        return Err(Error::Validation("benchmark needs at least one method".into()));
    }
    cfg.solver.validate()?;
    let spec = &cfg.spec;
    let (params, models) = prepare_dgp(spec, engine)?;
    let d = spec.d();
    let moments = if cfg.second_moments { MomentSpec::first_and_second(d) } else { MomentSpec::first(d) };

    let per_rep: Vec<Result<Vec<ReplicationRecord>>> = engine.install(|| {
        (0..cfg.replications)
            .into_par_iter()
            .map(|r| {
                let ds = replicate_dataset(spec, &params, &models, r)?;
                let mut bases: Vec<(BenchMethod, Weighting)> = Vec::new();
                let mut out = Vec::with_capacity(cfg.methods.len());
                for &m in &cfg.methods {
                    let b = m.base();
                    if !bases.iter().any(|(k, _)| *k == b) {
                        bases.push((b, weigh(b, &ds, &moments, cfg, engine)));
                    }
                    let w = &bases.iter().find(|(k, _)| *k == b).expect("just inserted").1;
                    out.push(evaluate(m, r, &ds, w, engine));
                }
                Ok(out)
            })
            .collect()
    });
    let mut records = Vec::new();
    for (r, rep) in per_rep.into_iter().enumerate() {
        match rep {
            Ok(v) => records.extend(v),
            Err(e) => records.extend(cfg.methods.iter().map(|m| ReplicationRecord {
                replication: r,
                method: m.name().into(),
                n_treated: 0,
                n_control: 0,
                converged: false,
                error: Some(e.to_string()),
                mean_smd: None,
                ess_ratio: None,
                deltas: vec![None; spec.n_outcomes],
            })),
        }
    }

    let outcome_names = spec.schema().outcomes;
    let mut methods = Vec::new();
    for &m in &cfg.methods {
        let recs: Vec<&ReplicationRecord> = records.iter().filter(|r| r.method == m.name()).collect();
        let ok: Vec<&&ReplicationRecord> = recs.iter().filter(|r| r.ok()).collect();
        let failures = recs.len() - ok.len();
        if failures as f64 > MAX_FAILURE_RATE * cfg.replications as f64 {
            let first = recs.iter().find_map(|r| r.error.clone()).unwrap_or_else(|| "solver did not converge".into());
            return Err(Error::Simulation(format!(
                "{}: {failures} of {} replications failed ({first})",
                m.name(),
                cfg.replications
            )));
        }
        let mut outcomes = Vec::new();
        for (j, name) in outcome_names.iter().enumerate() {
            let est: Vec<f64> = ok.iter().filter_map(|r| r.deltas[j]).collect();
            let metrics = if est.len() >= 2 {
                meta_metrics(&est, 0.0)?
            } else {
                // a single replication has a bias but no spread
                let amb = est.first().map_or(f64::NAN, |v| v.abs());
                MetaMetrics {
                    replications: est.len(),
                    amb,
                    sd: f64::NAN,
                    rmse: f64::NAN,
                    rmse_direct: amb,
                }
            };
            outcomes.push(OutcomeMetrics {
                outcome: name.clone(),
                metrics,
            });
        }
        let mut ambs: Vec<f64> = outcomes.iter().map(|o| o.metrics.amb).collect();
        let mut sds: Vec<f64> = outcomes.iter().map(|o| o.metrics.sd).collect();
        let mean_of = |f: &dyn Fn(&ReplicationRecord) -> Option<f64>| {
            let v: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        methods.push(MethodSummary {
            method: m.name().into(),
            successes: ok.len(),
            failures,
            max_amb: ambs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            median_amb: median(&mut ambs),
            median_sd: median(&mut sds),
            mean_smd: mean_of(&|r| r.mean_smd),
            mean_ess_ratio: mean_of(&|r| r.ess_ratio),
            outcomes,
        });
    }
    Ok(BenchmarkReport {
        spec: spec.clone(),
        replications: cfg.replications,
        truth: 0.0,
        methods,
        records,
    })
}
