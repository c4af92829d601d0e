//! Flat `key = value` analysis configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are comma
//! separated. Relative paths resolve against the directory of the file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use balancekit::diagnostics::{Interactions, Thresholds};
use balancekit::SolverConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: {key:?} already set on line {first}")]
    DuplicateKey { line: usize, key: String, first: usize },
    #[error("line {line}: invalid value for {key:?}: {message}")]
    InvalidValue { line: usize, key: String, message: String },
    #[error("missing required key {0:?}")]
    Missing(&'static str),
    #[error("role conflict: {0}")]
    RoleConflict(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalysisMethod {
    Eb,
    Ms,
    Ipw,
}

impl AnalysisMethod {
    pub fn name(&self) -> &'static str {
        match self {
            AnalysisMethod::Eb => "eb",
            AnalysisMethod::Ms => "ms",
            AnalysisMethod::Ipw => "ipw",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "eb" => Some(AnalysisMethod::Eb),
            "ms" => Some(AnalysisMethod::Ms),
            "ipw" => Some(AnalysisMethod::Ipw),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Moments {
    First,
    FirstAndSecond,
}

impl Moments {
    pub fn name(&self) -> &'static str {
        match self {
            Moments::First => "first",
            Moments::FirstAndSecond => "first+second",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "first" => Some(Moments::First),
            "first+second" | "first_and_second" => Some(Moments::FirstAndSecond),
            _ => None,
        }
    }

    pub fn spec(&self, d: usize) -> balancekit::MomentSpec {
        match self {
            Moments::First => balancekit::MomentSpec::first(d),
            Moments::FirstAndSecond => balancekit::MomentSpec::first_and_second(d),
        }
    }
}

pub fn interactions_name(i: Interactions) -> &'static str {
    match i {
        Interactions::Auto => "auto",
        Interactions::Always => "always",
        Interactions::Never => "never",
    }
}

pub fn parse_interactions(s: &str) -> Option<Interactions> {
    match s {
        "auto" => Some(Interactions::Auto),
        "always" => Some(Interactions::Always),
        "never" => Some(Interactions::Never),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    pub data: PathBuf,
    pub id_column: String,
    pub treatment_column: String,
    /// Empty means every column without another role.
    pub covariates: Vec<String>,
    /// Post-treatment metrics.
    pub outcomes: Vec<String>,
    /// Pre-treatment metrics held out of balancing; their effect should be 0.
    pub validation_outcomes: Vec<String>,
    pub delimiter: u8,
    pub shard_rows: usize,
    pub method: AnalysisMethod,
    pub moments: Moments,
    /// `seed` is shared with the bootstrap.
    pub solver: SolverConfig,
    pub ipw_c: f64,
    pub ipw_l1_ratio: f64,
    pub ipw_folds: usize,
    pub ipw_tune: bool,
    pub bootstrap_replicates: usize,
    pub confidence_level: f64,
    pub seed: u64,
    pub thresholds: Thresholds,
    pub interactions: Interactions,
    pub output_dir: PathBuf,
}

impl AnalysisConfig {
    /// Config with every default filled in.
    pub fn new(data: impl Into<PathBuf>, outcomes: Vec<String>) -> Self {
        AnalysisConfig {
            data: data.into(),
            id_column: "unit_id".into(),
            treatment_column: "treatment".into(),
            covariates: Vec::new(),
            outcomes,
            validation_outcomes: Vec::new(),
            delimiter: b',',
            shard_rows: balancekit::data::DEFAULT_SHARD_ROWS,
            method: AnalysisMethod::Eb,
            moments: Moments::First,
            solver: SolverConfig::default(),
            ipw_c: 1.0,
            ipw_l1_ratio: 0.0,
            ipw_folds: 0,
            ipw_tune: false,
            bootstrap_replicates: 500,
            confidence_level: 0.95,
            seed: 0,
            thresholds: Thresholds::default(),
            interactions: Interactions::Auto,
            output_dir: PathBuf::from("report"),
        }
    }

    /// Column-role and range checks that do not need the data.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let conflict = |m: String| Err(ConfigError::RoleConflict(m));
        if self.outcomes.is_empty() {
            return Err(ConfigError::Missing("outcomes"));
        }
        if self.id_column == self.treatment_column {
            return conflict(format!("{:?} is both id_column and treatment_column", self.id_column));
        }
        let mut seen: Vec<(&str, &str)> = vec![
            (self.id_column.as_str(), "id_column"),
            (self.treatment_column.as_str(), "treatment_column"),
        ];
        for (role, cols) in [
            ("covariates", &self.covariates),
            ("outcomes", &self.outcomes),
            ("validation_outcomes", &self.validation_outcomes),
        ] {
            for c in cols {
                if let Some((_, other)) = seen.iter().find(|(name, _)| name == c) {
                    return conflict(format!("column {c:?} appears in {other} and {role}"));
                }
                seen.push((c, role));
            }
        }
        if let Err(e) = self.solver.validate() {
            return conflict(e.to_string());
        }
        Ok(())
    }

    /// The effective configuration in file form; parsing it gives back `self`.
    pub fn to_config_string(&self) -> String {
        let s = &self.solver;
        let t = &self.thresholds;
        let delim = match self.delimiter {
            b'\t' => "tab".to_string(),
            c => (c as char).to_string(),
        };
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("data", self.data.display().to_string());
        kv("id_column", self.id_column.clone());
        kv("treatment_column", self.treatment_column.clone());
        kv("covariates", self.covariates.join(","));
        kv("outcomes", self.outcomes.join(","));
        kv("validation_outcomes", self.validation_outcomes.join(","));
        kv("delimiter", delim);
        kv("shard_rows", self.shard_rows.to_string());
        kv("method", self.method.name().into());
        kv("moments", self.moments.name().into());
        kv("alpha", s.alpha.to_string());
        kv("momentum_beta", s.momentum_beta.to_string());
        kv("max_iterations", s.max_iterations.to_string());
        kv("tolerance", s.tolerance.to_string());
        kv("decay_factor", s.decay_factor.to_string());
        kv("decay", s.decay.to_string());
        kv("zero_init", s.zero_init.to_string());
        kv("standardize", s.standardize.to_string());
        kv("stagnation_window", s.stagnation_window.to_string());
        kv("ipw_c", self.ipw_c.to_string());
        kv("ipw_l1_ratio", self.ipw_l1_ratio.to_string());
        kv("ipw_folds", self.ipw_folds.to_string());
        kv("ipw_tune", self.ipw_tune.to_string());
        kv("bootstrap_replicates", self.bootstrap_replicates.to_string());
        kv("confidence_level", self.confidence_level.to_string());
        kv("seed", self.seed.to_string());
        kv("smd_threshold", t.smd.to_string());
        kv("variance_ratio_threshold", t.variance_ratio.to_string());
        kv("overlap_threshold", t.overlap.to_string());
        kv("ks_threshold", t.ks.to_string());
        kv("mahalanobis_threshold", t.mahalanobis.to_string());
        kv("interactions", interactions_name(self.interactions).into());
        kv("output_dir", self.output_dir.display().to_string());
        out
    }
}

const KEYS: &[&str] = &[
    "data",
    "id_column",
    "treatment_column",
    "covariates",
    "outcomes",
    "validation_outcomes",
    "delimiter",
    "shard_rows",
    "method",
    "moments",
    "alpha",
    "momentum_beta",
    "max_iterations",
    "tolerance",
    "decay_factor",
    "decay",
    "zero_init",
    "standardize",
    "stagnation_window",
    "ipw_c",
    "ipw_l1_ratio",
    "ipw_folds",
    "ipw_tune",
    "bootstrap_replicates",
    "confidence_level",
    "seed",
    "smd_threshold",
    "variance_ratio_threshold",
    "overlap_threshold",
    "ks_threshold",
    "mahalanobis_threshold",
    "interactions",
    "output_dir",
];

fn list(v: &str) -> Result<Vec<String>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| {
            let s = s.trim();
            if s.is_empty() {
                Err("empty list entry".to_string())
            } else {
                Ok(s.to_string())
            }
        })
        .collect()
}

fn number<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("{v:?} is not a valid number"))
}

fn boolean(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("{v:?} is not true or false")),
    }
}

fn resolve(base: &Path, v: &str) -> PathBuf {
    let p = base.join(v);
    std::path::absolute(&p).unwrap_or(p)
}

/// Reads and validates a config file.
pub fn config_parse(path: impl AsRef<Path>) -> Result<AnalysisConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_str(&text, base)
}

/// Parses config text; relative paths resolve against `base`.
pub fn parse_str(text: &str, base: &Path) -> Result<AnalysisConfig, ConfigError> {
    let mut entries: Vec<(usize, &str, &str)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let Some((k, v)) = t.split_once('=') else {
            return Err(ConfigError::Syntax {
                line,
                message: format!("expected `key = value`, found {t:?}"),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line,
                message: "empty key".into(),
            });
        }
        if !KEYS.contains(&k) {
            return Err(ConfigError::UnknownKey { line, key: k.into() });
        }
        if let Some(&(first, _, _)) = entries.iter().find(|(_, key, _)| *key == k) {
            return Err(ConfigError::DuplicateKey {
                line,
                key: k.into(),
                first,
            });
        }
        entries.push((line, k, v));
    }

    let data = entries
        .iter()
        .find(|(_, k, _)| *k == "data")
        .map(|(_, _, v)| *v)
        .filter(|v| !v.is_empty())
        .ok_or(ConfigError::Missing("data"))?;
    let mut cfg = AnalysisConfig::new(resolve(base, data), Vec::new());
    cfg.output_dir = resolve(base, "report");

    for &(line, key, v) in &entries {
        let bad = |message: String| ConfigError::InvalidValue {
            line,
            key: key.into(),
            message,
        };
        let s = &mut cfg.solver;
        let t = &mut cfg.thresholds;
        match key {
            "data" => {}
            "id_column" => cfg.id_column = v.into(),
            "treatment_column" => cfg.treatment_column = v.into(),
            "covariates" => cfg.covariates = list(v).map_err(bad)?,
            "outcomes" => cfg.outcomes = list(v).map_err(bad)?,
            "validation_outcomes" => cfg.validation_outcomes = list(v).map_err(bad)?,
            "delimiter" => {
                cfg.delimiter = match v {
                    "tab" | "\\t" => b'\t',
                    _ if v.len() == 1 && v.is_ascii() => v.as_bytes()[0],
                    _ => return Err(bad(format!("{v:?} is not a single ASCII character or `tab`"))),
                }
            }
            "shard_rows" => {
                cfg.shard_rows = number(v).map_err(bad)?;
                if cfg.shard_rows == 0 {
                    return Err(bad("must be at least 1".into()));
                }
            }
            "method" => cfg.method = AnalysisMethod::parse(v).ok_or_else(|| bad(format!("{v:?} is not eb, ms or ipw")))?,
            "moments" => cfg.moments = Moments::parse(v).ok_or_else(|| bad(format!("{v:?} is not first or first+second")))?,
            "alpha" => s.alpha = number(v).map_err(bad)?,
            "momentum_beta" => s.momentum_beta = number(v).map_err(bad)?,
            "max_iterations" => s.max_iterations = number(v).map_err(bad)?,
            "tolerance" => s.tolerance = number(v).map_err(bad)?,
            "decay_factor" => s.decay_factor = number(v).map_err(bad)?,
            "decay" => s.decay = boolean(v).map_err(bad)?,
            "zero_init" => s.zero_init = boolean(v).map_err(bad)?,
            "standardize" => s.standardize = boolean(v).map_err(bad)?,
            "stagnation_window" => s.stagnation_window = number(v).map_err(bad)?,
            "ipw_c" => cfg.ipw_c = number(v).map_err(bad)?,
            "ipw_l1_ratio" => cfg.ipw_l1_ratio = number(v).map_err(bad)?,
            "ipw_folds" => cfg.ipw_folds = number(v).map_err(bad)?,
            "ipw_tune" => cfg.ipw_tune = boolean(v).map_err(bad)?,
            "bootstrap_replicates" => cfg.bootstrap_replicates = number(v).map_err(bad)?,
            "confidence_level" => cfg.confidence_level = number(v).map_err(bad)?,
            "seed" => cfg.seed = number(v).map_err(bad)?,
            "smd_threshold" => t.smd = number(v).map_err(bad)?,
            "variance_ratio_threshold" => t.variance_ratio = number(v).map_err(bad)?,
            "overlap_threshold" => t.overlap = number(v).map_err(bad)?,
            "ks_threshold" => t.ks = number(v).map_err(bad)?,
            "mahalanobis_threshold" => t.mahalanobis = number(v).map_err(bad)?,
            "interactions" => {
                cfg.interactions = parse_interactions(v).ok_or_else(|| bad(format!("{v:?} is not auto, always or never")))?
            }
            "output_dir" => cfg.output_dir = resolve(base, v),
            _ => unreachable!("keys are checked against KEYS"),
        }
    }
    cfg.solver.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}
