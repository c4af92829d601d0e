use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use balancekit::baselines::{fit_logistic, ipw_weights, tune_ipw, LogisticConfig, Regularization, TuningGrid};
use balancekit::data::write_dataset_dir;
use balancekit::diagnostics::{diagnose, stability, DiagnoseOptions, Thresholds};
use balancekit::estimation::{bootstrap_ci, patt, BootstrapConfig, Reweighting};
use balancekit::simulation::{
    replicate_dataset, prepare_dgp, run_benchmark, BenchMethod, BenchmarkConfig, DgpKind, SimulationSpec,
};
use balancekit::solvers::{solve, Method};
use balancekit::{Engine, EngineConfig, Error, Result, SolverConfig, WeightVector};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::analysis::{run_analysis, MetricRow};
use crate::config::{config_parse, parse_interactions, Moments};
use crate::load::{load_dataset, outcome_indices, Roles};
use crate::{exit, SCHEMA_VERSION};

#[derive(Debug, Parser)]
#[command(name = "balancekit", version, about = "Covariate balancing weights for observational studies")]
pub struct Cli {
    /// Worker threads (overrides BK_WORKERS).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Seed for solver initialization, bootstrap and simulation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Combine shard partials in a fixed tree order, making results
    /// independent of the worker count.
    #[arg(long, global = true)]
    pub ordered_reduce: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a CSV file into a shard directory.
    Ingest {
        #[command(flatten)]
        data: DataArgs,
        /// Output shard directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute balancing weights.
    Solve(SolveArgs),
    /// Balance and stability report for a set of weights.
    Diagnose {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        weights: PathBuf,
        /// Overrides such as `smd=0.05,ks=0.2` (keys smd, vr, overlap, ks, mb).
        #[arg(long)]
        thresholds: Option<String>,
        /// auto, always or never.
        #[arg(long, default_value = "auto")]
        interactions: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Effect estimates, optionally with bootstrap intervals.
    Estimate(EstimateArgs),
    /// Semi-synthetic benchmark, or one synthesized dataset.
    Simulate(SimulateArgs),
    /// Run the full workflow from a config file.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` of the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// CSV file or shard directory.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "unit_id")]
    pub id_column: String,
    #[arg(long, default_value = "treatment")]
    pub treatment_column: String,
    /// Comma-separated covariate columns; default is every column without another role.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    /// Comma-separated outcome columns, kept out of the covariates.
    #[arg(long, value_delimiter = ',')]
    pub outcomes: Vec<String>,
    #[arg(long, default_value_t = ',')]
    pub delimiter: char,
    #[arg(long, default_value_t = balancekit::data::DEFAULT_SHARD_ROWS)]
    pub shard_rows: usize,
}

impl DataArgs {
    fn load(&self) -> Result<balancekit::Dataset> {
        if !self.delimiter.is_ascii() {
            return Err(Error::Validation(format!("delimiter {:?} is not ASCII", self.delimiter)));
        }
        load_dataset(
            &self.data,
            &Roles {
                id_column: &self.id_column,
                treatment_column: &self.treatment_column,
                covariates: &self.covariates,
                outcomes: &self.outcomes,
                delimiter: self.delimiter as u8,
                shard_rows: self.shard_rows,
            },
        )
    }
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// eb, ms or ipw.
    #[arg(long, default_value = "eb")]
    pub method: String,
    /// first or first+second.
    #[arg(long, default_value = "first")]
    pub moments: String,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// IPW: choose the propensity model by grid search on balance.
    #[arg(long)]
    pub tune: bool,
    /// IPW inverse penalty strength.
    #[arg(long, default_value_t = 1.0)]
    pub c: f64,
    #[arg(long, default_value_t = 0.0)]
    pub l1_ratio: f64,
    /// IPW cross-fitting folds (0 = none).
    #[arg(long, default_value_t = 0)]
    pub folds: usize,
    /// Weights CSV (`unit_id,weight`).
    #[arg(long)]
    pub out: PathBuf,
    /// Run metadata JSON; printed to stdout when absent.
    #[arg(long)]
    pub metadata: Option<PathBuf>,
    /// IPW tuning report JSON.
    #[arg(long)]
    pub tuning_report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub weights: PathBuf,
    /// Bootstrap replicates; 0 gives point estimates only.
    #[arg(long, default_value_t = 0)]
    pub bootstrap: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// How weights are recomputed on each replicate: eb, ms or ipw.
    #[arg(long, default_value = "eb")]
    pub method: String,
    #[arg(long, default_value = "first")]
    pub moments: String,
    /// JSON array of estimates; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Metric-table summary JSON.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// linear, interactions or forest.
    #[arg(long, default_value = "linear")]
    pub dgp: String,
    /// Units per synthesized dataset.
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
    /// Comma-separated: eb, ms, ipw, ipw-tuned, ipw-dr, eb-dr, ms-dr.
    #[arg(long, value_delimiter = ',', default_value = "eb,ms,ipw,ipw-dr")]
    pub methods: Vec<String>,
    #[arg(long, default_value_t = 12)]
    pub d_continuous: usize,
    #[arg(long, default_value_t = 4)]
    pub d_binary: usize,
    #[arg(long, default_value_t = 3)]
    pub n_outcomes: usize,
    /// Balance squares as well as means.
    #[arg(long)]
    pub second_moments: bool,
    /// Directory for `replications.csv` and `summary.json`.
    #[arg(long, default_value = "simulation")]
    pub out_dir: PathBuf,
    /// Write one synthesized dataset (replication 0) as CSV instead of
    /// running the benchmark.
    #[arg(long)]
    pub dataset_out: Option<PathBuf>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn to_json<T: Serialize>(v: &T) -> String {
    format!("{}\n", serde_json::to_string_pretty(v).expect("reports serialize"))
}

/// Writes JSON to `path`, or to stdout when there is none.
fn emit<T: Serialize>(v: &T, path: Option<&Path>) -> Result<()> {
    let text = to_json(v);
    match path {
        Some(p) => write_file(p, text.as_bytes()),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).map_err(io_err(Path::new("<stdout>")))
        }
    }
}

fn read_weights(path: &Path) -> Result<WeightVector> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    WeightVector::read_csv(f)
}

fn moments(s: &str) -> Result<Moments> {
    Moments::parse(s).ok_or_else(|| Error::Validation(format!("unknown moments {s:?}; use first or first+second")))
}

fn solver_method(s: &str) -> Result<Method> {
    s.parse()
}

fn thresholds(spec: Option<&str>) -> Result<Thresholds> {
    let mut t = Thresholds::default();
    let Some(spec) = spec else { return Ok(t) };
    for part in spec.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("threshold {part:?} is not key=value")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::Validation(format!("threshold {part:?} has no numeric value")))?;
        match k.trim() {
            "smd" => t.smd = v,
            "vr" | "variance_ratio" => t.variance_ratio = v,
            "overlap" => t.overlap = v,
            "ks" => t.ks = v,
            "mb" | "mahalanobis" => t.mahalanobis = v,
            other => return Err(Error::Validation(format!("unknown threshold {other:?}"))),
        }
    }
    Ok(t)
}

fn cmd_ingest(data: &DataArgs, out: &Path) -> Result<i32> {
    let ds = data.load()?;
    write_dataset_dir(&ds, out)?;
    emit(
        &json!({
            "schema_version": SCHEMA_VERSION,
            "n_treated": ds.n_treated(),
            "n_control": ds.n_control(),
            "covariates": ds.schema().covariates,
            "outcomes": ds.schema().outcomes,
            "shards": ds.shards().len(),
            "out": out,
        }),
        None,
    )?;
    Ok(exit::OK)
}

fn cmd_solve(a: &SolveArgs, seed: u64, engine: &Engine) -> Result<i32> {
    let ds = a.data.load()?;
    let m = moments(&a.moments)?;
    let spec = m.spec(ds.d());
    let (weights, meta, code) = if a.method == "ipw" {
        let lcfg = LogisticConfig::default();
        let (weights, meta) = if a.tune {
            let t = tune_ipw(&ds, &TuningGrid::default(), &spec, &lcfg, engine)?;
            if let Some(p) = &a.tuning_report {
                emit(&json!({ "schema_version": SCHEMA_VERSION, "points": t.points }), Some(p))?;
            }
            let meta = json!({
                "method": "ipw",
                "tuned": true,
                "c": t.model.regularization.c,
                "l1_ratio": t.model.regularization.l1_ratio,
                "folds": t.model.folds,
                "iterations": t.model.iterations,
                "grid_points": t.points.len(),
            });
            (t.weights, meta)
        } else {
            let reg = Regularization::new(a.c, a.l1_ratio)?;
            let model = fit_logistic(&ds, reg, a.folds, &lcfg, engine)?;
            let meta = json!({
                "method": "ipw",
                "tuned": false,
                "c": reg.c,
                "l1_ratio": reg.l1_ratio,
                "folds": a.folds,
                "iterations": model.iterations,
            });
            (ipw_weights(&ds, &model)?, meta)
        };
        (weights, meta, exit::OK)
    } else {
        let method = solver_method(&a.method)?;
        let mut cfg = SolverConfig {
            seed,
            ..SolverConfig::default()
        };
        if let Some(t) = a.tolerance {
            cfg.tolerance = t;
        }
        if let Some(k) = a.max_iters {
            cfg.max_iterations = k;
        }
        if let Some(al) = a.alpha {
            cfg.alpha = al;
        }
        let r = solve(method, &ds, &spec, &cfg, engine)?;
        let code = if r.converged { exit::OK } else { exit::NOT_CONVERGED };
        (r.weights.clone(), serde_json::to_value(r.metadata()).expect("metadata serializes"), code)
    };
    let mut buf = Vec::new();
    weights.write_csv(&mut buf)?;
    write_file(&a.out, &buf)?;
    let mut meta = meta;
    meta["schema_version"] = json!(SCHEMA_VERSION);
    emit(&meta, a.metadata.as_deref())?;
    Ok(code)
}

fn cmd_diagnose(data: &DataArgs, weights: &Path, th: Option<&str>, inter: &str, out: Option<&Path>, engine: &Engine) -> Result<i32> {
    let ds = data.load()?;
    let w = read_weights(weights)?;
    let opts = DiagnoseOptions {
        thresholds: thresholds(th)?,
        interactions: parse_interactions(inter)
            .ok_or_else(|| Error::Validation(format!("interactions must be auto, always or never, not {inter:?}")))?,
    };
    let balance = diagnose(&ds, &w, &opts, engine)?;
    let st = stability(&w.aligned_to(&ds)?)?;
    let passed = balance.passed();
    emit(
        &json!({ "schema_version": SCHEMA_VERSION, "passed": passed, "balance": balance, "stability": st }),
        out,
    )?;
    Ok(if passed { exit::OK } else { exit::BALANCE })
}

fn cmd_estimate(a: &EstimateArgs, seed: u64, engine: &Engine) -> Result<i32> {
    if a.data.outcomes.is_empty() {
        return Err(Error::Validation("estimate needs --outcomes".into()));
    }
    let ds = a.data.load()?;
    let w = read_weights(&a.weights)?;
    let idx = outcome_indices(&ds, &a.data.outcomes)?;
    let estimates = if a.bootstrap > 0 {
        let m = moments(&a.moments)?;
        let reweight = if a.method == "ipw" {
            Reweighting::Ipw {
                regularization: Regularization::new(1.0, 0.0)?,
                folds: 0,
                config: LogisticConfig::default(),
            }
        } else {
            Reweighting::Solver {
                method: solver_method(&a.method)?,
                spec: m.spec(ds.d()),
                config: SolverConfig {
                    seed,
                    ..SolverConfig::default()
                },
            }
        };
        let boot = BootstrapConfig {
            replicates: a.bootstrap,
            level: a.level,
            seed,
        };
        bootstrap_ci(&ds, &w, &reweight, &idx, &boot, engine)?
    } else {
        idx.iter().map(|&j| patt(&ds, &w, j, engine)).collect::<Result<Vec<_>>>()?
    };
    emit(&estimates, a.out.as_deref())?;
    if let Some(p) = &a.summary {
        let rows: Vec<MetricRow> = estimates.iter().map(|e| MetricRow::from_estimate(e, "post")).collect();
        emit(&json!({ "schema_version": SCHEMA_VERSION, "metrics": rows }), Some(p))?;
    }
    Ok(exit::OK)
}

fn cmd_simulate(a: &SimulateArgs, seed: u64, engine: &Engine) -> Result<i32> {
    let dgp: DgpKind = a.dgp.parse()?;
    let spec = SimulationSpec {
        n_units: 2 * a.n,
        d_continuous: a.d_continuous,
        d_binary: a.d_binary,
        n_outcomes: a.n_outcomes,
        dgp,
        seed,
        ..SimulationSpec::default()
    };
    spec.validate()?;
    if let Some(path) = &a.dataset_out {
        let (params, models) = prepare_dgp(&spec, engine)?;
        let ds = replicate_dataset(&spec, &params, &models, 0)?;
        let mut buf = Vec::new();
        balancekit::data::write_csv(&ds, &mut buf, b',')?;
        write_file(path, &buf)?;
        emit(
            &json!({
                "schema_version": SCHEMA_VERSION,
                "dataset": path,
                "n_treated": ds.n_treated(),
                "n_control": ds.n_control(),
                "covariates": ds.schema().covariates,
                "outcomes": ds.schema().outcomes,
            }),
            None,
        )?;
        return Ok(exit::OK);
    }
    let methods = a.methods.iter().map(|m| m.parse()).collect::<Result<Vec<BenchMethod>>>()?;
    let mut cfg = BenchmarkConfig::new(spec, methods, a.reps);
    cfg.second_moments = a.second_moments;
    cfg.solver.seed = seed;
    let report = run_benchmark(&cfg, engine)?;

    let mut csv = String::from("replication,method,n_treated,n_control,converged,mean_smd,ess_ratio,outcome,pct_change,error\n");
    let names = cfg.spec.schema().outcomes;
    for r in &report.records {
        for (j, name) in names.iter().enumerate() {
            let err = r.error.as_deref().unwrap_or("").replace(['"', ','], " ");
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.replication,
                r.method,
                r.n_treated,
                r.n_control,
                r.converged,
                r.mean_smd.map_or_else(String::new, |v| v.to_string()),
                r.ess_ratio.map_or_else(String::new, |v| v.to_string()),
                name,
                r.deltas.get(j).copied().flatten().map_or_else(String::new, |v| v.to_string()),
                err
            ));
        }
    }
    write_file(&a.out_dir.join("replications.csv"), csv.as_bytes())?;
    let summary = json!({
        "schema_version": SCHEMA_VERSION,
        "spec": report.spec,
        "replications": report.replications,
        "truth": report.truth,
        "methods": report.methods,
    });
    write_file(&a.out_dir.join("summary.json"), to_json(&summary).as_bytes())?;
    emit(&summary["methods"], None)?;
    Ok(exit::OK)
}

fn cmd_analyze(config: &Path, output_dir: Option<&Path>, seed: Option<u64>, engine: &Engine) -> Result<i32> {
    let mut cfg = config_parse(config).map_err(|e| Error::Validation(e.to_string()))?;
    if let Some(d) = output_dir {
        cfg.output_dir = d.to_path_buf();
    }
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.solver.seed = s;
    }
    let out = run_analysis(&cfg, engine);
    if let Some(e) = &out.report.error {
        eprintln!("balancekit: {} ({})", e.message, e.code);
    } else {
        let r = &out.report;
        eprintln!(
            "balancekit: {} -> {} (exit {})",
            r.status,
            cfg.output_dir.display(),
            r.exit_code
        );
    }
    Ok(out.exit_code())
}

fn engine_for(cli: &Cli) -> Result<Engine> {
    let mut cfg = EngineConfig::from_env()?;
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.ordered_reduce = cli.ordered_reduce;
    Engine::new(cfg)
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = engine_for(&cli).and_then(|engine| {
        let seed = cli.seed.unwrap_or(0);
        match &cli.command {
            Command::Ingest { data, out } => cmd_ingest(data, out),
            Command::Solve(a) => cmd_solve(a, seed, &engine),
            Command::Diagnose {
                data,
                weights,
                thresholds,
                interactions,
                out,
            } => cmd_diagnose(data, weights, thresholds.as_deref(), interactions, out.as_deref(), &engine),
            Command::Estimate(a) => cmd_estimate(a, seed, &engine),
            Command::Simulate(a) => cmd_simulate(a, seed, &engine),
            Command::Analyze { config, output_dir } => cmd_analyze(config, output_dir.as_deref(), cli.seed, &engine),
        }
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("balancekit: {e} ({})", e.code());
            exit::ERROR
        }
    }
}
