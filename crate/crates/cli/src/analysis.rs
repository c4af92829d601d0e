//! The end-to-end workflow: ingest, solve, balance check, validation-period
//! estimates, then post-treatment estimates with bootstrap intervals.

use std::fs;
use std::path::{Path, PathBuf};

use balancekit::baselines::{fit_logistic, ipw_weights, tune_ipw, LogisticConfig, Regularization, TuningGrid};
use balancekit::diagnostics::{diagnose, stability, BalanceReport, DiagnoseOptions, StabilityReport, Violation};
use balancekit::estimation::{bootstrap_ci, patt, BootstrapConfig, EffectEstimate, Reweighting};
use balancekit::solvers::{solve, Method, MomentResidual};
use balancekit::{Dataset, Engine, Error, WeightVector};
use serde::Serialize;

use crate::config::{AnalysisConfig, AnalysisMethod};
use crate::load::{load_dataset, outcome_indices, Roles};
use crate::{exit, SCHEMA_VERSION};

pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMESERIES_FILE: &str = "timeseries.csv";
pub const WEIGHTS_FILE: &str = "weights.csv";
pub const CONFIG_FILE: &str = "effective.conf";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataSummary {
    pub n_treated: usize,
    pub n_control: usize,
    pub covariates: Vec<String>,
    pub shards: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverSummary {
    pub method: String,
    pub moments: String,
    pub converged: bool,
    pub iterations: Option<usize>,
    pub final_residual: Option<f64>,
    pub stagnated: bool,
    pub decays: usize,
    pub worst_moments: Vec<MomentResidual>,
    pub dropped_moments: Vec<String>,
    /// Chosen propensity hyperparameters (IPW only).
    pub ipw: Option<IpwSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IpwSummary {
    pub c: f64,
    pub l1_ratio: f64,
    pub folds: usize,
    pub tuned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BalanceCheck {
    pub passed: bool,
    /// Summary metrics beyond their thresholds.
    pub failed_metrics: Vec<String>,
    pub violations: Vec<Violation>,
}

/// One row of the metric table: treated and synthetic-control values, the
/// difference and its percentage, with interval bounds when computed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub metric: String,
    pub phase: String,
    pub treated_value: f64,
    pub synthetic_control_value: f64,
    pub difference: f64,
    pub pct_change: Option<f64>,
    pub ci_level: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub pct_ci_lower: Option<f64>,
    pub pct_ci_upper: Option<f64>,
    /// Validation metrics: whether the interval covers 0.
    pub covers_zero: Option<bool>,
}

impl MetricRow {
    pub fn from_estimate(e: &EffectEstimate, phase: &str) -> Self {
        let iv = e.interval.as_ref();
        let covers_zero = (phase == "validation")
            .then(|| iv.map(|iv| iv.pct_covers(0.0).unwrap_or_else(|| iv.covers(0.0))))
            .flatten();
        MetricRow {
            metric: e.outcome.clone(),
            phase: phase.into(),
            treated_value: e.treated_mean,
            synthetic_control_value: e.control_mean,
            difference: e.patt,
            pct_change: e.pct_change,
            ci_level: iv.map(|i| i.level),
            ci_lower: iv.map(|i| i.lower),
            ci_upper: iv.map(|i| i.upper),
            pct_ci_lower: iv.and_then(|i| i.pct_lower),
            pct_ci_upper: iv.and_then(|i| i.pct_upper),
            covers_zero,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationSummary {
    /// `None` when intervals were not computed.
    pub passed: Option<bool>,
    pub metrics: Vec<MetricRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorInfo {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub schema_version: &'static str,
    pub status: &'static str,
    pub exit_code: i32,
    pub data: Option<DataSummary>,
    pub solver: Option<SolverSummary>,
    pub balance_check: Option<BalanceCheck>,
    pub balance: Option<BalanceReport>,
    pub stability: Option<StabilityReport>,
    pub validation: Option<ValidationSummary>,
    pub post_treatment: Vec<MetricRow>,
    /// Why intervals were not computed, when they were not.
    pub intervals_skipped: Option<String>,
    pub bootstrap: Option<BootstrapConfig>,
    pub error: Option<ErrorInfo>,
}

impl AnalysisReport {
    fn empty() -> Self {
        AnalysisReport {
            schema_version: SCHEMA_VERSION,
            status: "ok",
            exit_code: exit::OK,
            data: None,
            solver: None,
            balance_check: None,
            balance: None,
            stability: None,
            validation: None,
            post_treatment: Vec::new(),
            intervals_skipped: None,
            bootstrap: None,
            error: None,
        }
    }

    fn fail(&mut self, e: &Error) {
        self.status = "error";
        self.exit_code = exit::ERROR;
        self.error = Some(ErrorInfo {
            code: e.code().into(),
            message: e.to_string(),
        });
    }
}

struct Weighting {
    weights: WeightVector,
    summary: SolverSummary,
    reweight: Reweighting,
}

fn weigh(ds: &Dataset, cfg: &AnalysisConfig, engine: &Engine) -> balancekit::Result<Weighting> {
    let spec = cfg.moments.spec(ds.d());
    let method = match cfg.method {
        AnalysisMethod::Eb => Method::Eb,
        AnalysisMethod::Ms => Method::Ms,
        AnalysisMethod::Ipw => {
            let lcfg = LogisticConfig::default();
            let (reg, folds, weights) = if cfg.ipw_tune {
                let t = tune_ipw(ds, &TuningGrid::default(), &balancekit::MomentSpec::first(ds.d()), &lcfg, engine)?;
                (t.model.regularization, t.model.folds, t.weights)
            } else {
                let reg = Regularization::new(cfg.ipw_c, cfg.ipw_l1_ratio)?;
                let m = fit_logistic(ds, reg, cfg.ipw_folds, &lcfg, engine)?;
                let w = ipw_weights(ds, &m)?;
                (reg, cfg.ipw_folds, w)
            };
            return Ok(Weighting {
                weights,
                summary: SolverSummary {
                    method: "ipw".into(),
                    moments: cfg.moments.name().into(),
                    converged: true,
                    iterations: None,
                    final_residual: None,
                    stagnated: false,
                    decays: 0,
                    worst_moments: Vec::new(),
                    dropped_moments: Vec::new(),
                    ipw: Some(IpwSummary {
                        c: reg.c,
                        l1_ratio: reg.l1_ratio,
                        folds,
                        tuned: cfg.ipw_tune,
                    }),
                },
                reweight: Reweighting::Ipw {
                    regularization: reg,
                    folds,
                    config: lcfg,
                },
            });
        }
    };
    let r = solve(method, ds, &spec, &cfg.solver, engine)?;
    Ok(Weighting {
        summary: SolverSummary {
            method: method.name().into(),
            moments: cfg.moments.name().into(),
            converged: r.converged,
            iterations: Some(r.iterations_used),
            final_residual: Some(r.final_residual()),
            stagnated: r.stagnated,
            decays: r.decays,
            worst_moments: r.worst_moments.iter().take(10).cloned().collect(),
            dropped_moments: r.dropped.iter().map(|d| d.label.clone()).collect(),
            ipw: None,
        },
        weights: r.weights,
        reweight: Reweighting::Solver {
            method,
            spec,
            config: cfg.solver.clone(),
        },
    })
}

fn failed_metrics(b: &BalanceReport) -> Vec<String> {
    let f = &b.flags;
    [
        (f.smd, "smd"),
        (f.smd_square, "smd_square"),
        (f.smd_interaction, "smd_interaction"),
        (f.variance_ratio, "variance_ratio"),
        (f.overlap, "overlap"),
        (f.ks, "ks"),
        (f.mahalanobis, "mahalanobis"),
    ]
    .iter()
    .filter(|(on, _)| *on)
    .map(|(_, n)| n.to_string())
    .collect()
}

/// Result of [`run_analysis`]: the report and where its files went.
#[derive(Debug)]
pub struct AnalysisOutcome {
    pub report: AnalysisReport,
    pub weights: Option<WeightVector>,
}

impl AnalysisOutcome {
    pub fn exit_code(&self) -> i32 {
        self.report.exit_code
    }
}

fn analyze(cfg: &AnalysisConfig, engine: &Engine, rep: &mut AnalysisReport) -> balancekit::Result<Option<WeightVector>> {
    let all_outcomes: Vec<String> = cfg.validation_outcomes.iter().chain(&cfg.outcomes).cloned().collect();
    let roles = Roles {
        id_column: &cfg.id_column,
        treatment_column: &cfg.treatment_column,
        covariates: &cfg.covariates,
        outcomes: &all_outcomes,
        delimiter: cfg.delimiter,
        shard_rows: cfg.shard_rows,
    };
    let ds = load_dataset(&cfg.data, &roles)?;
    rep.data = Some(DataSummary {
        n_treated: ds.n_treated(),
        n_control: ds.n_control(),
        covariates: ds.schema().covariates.clone(),
        shards: ds.shards().len(),
    });

    let w = weigh(&ds, cfg, engine)?;
    rep.solver = Some(w.summary.clone());
    let balance = diagnose(
        &ds,
        &w.weights,
        &DiagnoseOptions {
            thresholds: cfg.thresholds,
            interactions: cfg.interactions,
        },
        engine,
    )?;
    rep.stability = Some(stability(&w.weights)?);
    let check = BalanceCheck {
        passed: balance.passed(),
        failed_metrics: failed_metrics(&balance),
        violations: balance.violations.clone(),
    };
    let converged = w.summary.converged;
    rep.exit_code = if !check.passed {
        rep.status = "balance_check_failed";
        exit::BALANCE
    } else if !converged {
        rep.status = "not_converged";
        exit::NOT_CONVERGED
    } else {
        exit::OK
    };
    rep.balance_check = Some(check);
    rep.balance = Some(balance);

    let n_val = cfg.validation_outcomes.len();
    let idx = outcome_indices(&ds, &all_outcomes)?;
    let estimates = if rep.exit_code == exit::OK {
        let boot = BootstrapConfig {
            replicates: cfg.bootstrap_replicates,
            level: cfg.confidence_level,
            seed: cfg.seed,
        };
        rep.bootstrap = Some(boot);
        bootstrap_ci(&ds, &w.weights, &w.reweight, &idx, &boot, engine)?
    } else {
        rep.intervals_skipped = Some(format!("{}: estimates are not interpretable", rep.status.replace('_', " ")));
        idx.iter().map(|&j| patt(&ds, &w.weights, j, engine)).collect::<balancekit::Result<_>>()?
    };
    let (val, post) = estimates.split_at(n_val);
    let val_rows: Vec<MetricRow> = val.iter().map(|e| MetricRow::from_estimate(e, "validation")).collect();
    rep.validation = Some(ValidationSummary {
        passed: val_rows.iter().map(|r| r.covers_zero).collect::<Option<Vec<bool>>>().map(|v| v.iter().all(|c| *c)),
        metrics: val_rows,
    });
    rep.post_treatment = post.iter().map(|e| MetricRow::from_estimate(e, "post")).collect();
    Ok(Some(w.weights))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Period table: one row per validation metric, then per post-treatment metric.
pub fn timeseries_csv(rep: &AnalysisReport) -> String {
    let mut out = String::from(
        "period,phase,treated,synthetic_control,difference,pct_change,ci_lower,ci_upper,pct_ci_lower,pct_ci_upper\n",
    );
    let val = rep.validation.iter().flat_map(|v| &v.metrics);
    for r in val.chain(&rep.post_treatment) {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.metric,
            r.phase,
            r.treated_value,
            r.synthetic_control_value,
            r.difference,
            opt(r.pct_change),
            opt(r.ci_lower),
            opt(r.ci_upper),
            opt(r.pct_ci_lower),
            opt(r.pct_ci_upper)
        ));
    }
    out
}

fn write(path: PathBuf, bytes: &[u8]) -> balancekit::Result<()> {
    fs::write(&path, bytes).map_err(|source| Error::Io { path, source })
}

fn write_outputs(dir: &Path, cfg: &AnalysisConfig, out: &AnalysisOutcome) -> balancekit::Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let json = serde_json::to_string_pretty(&out.report).expect("report serializes");
    write(dir.join(SUMMARY_FILE), format!("{json}\n").as_bytes())?;
    write(dir.join(TIMESERIES_FILE), timeseries_csv(&out.report).as_bytes())?;
    write(dir.join(CONFIG_FILE), cfg.to_config_string().as_bytes())?;
    if let Some(w) = &out.weights {
        let mut buf = Vec::new();
        w.write_csv(&mut buf)?;
        write(dir.join(WEIGHTS_FILE), &buf)?;
    }
    Ok(())
}

/// Runs the workflow and writes the report files into `cfg.output_dir`.
/// Failures are recorded in the report with exit code 1.
pub fn run_analysis(cfg: &AnalysisConfig, engine: &Engine) -> AnalysisOutcome {
    let mut report = AnalysisReport::empty();
    let weights = match analyze(cfg, engine, &mut report) {
        Ok(w) => w,
        Err(e) => {
            report.fail(&e);
            None
        }
    };
    let mut out = AnalysisOutcome { report, weights };
    if let Err(e) = write_outputs(&cfg.output_dir, cfg, &out) {
        out.report.fail(&e);
    }
    out
}
