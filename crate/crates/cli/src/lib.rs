//! Command-line workflow for balancekit: config parsing, the end-to-end
//! analysis report and the individual subcommands.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod load;

pub use analysis::{run_analysis, AnalysisOutcome, AnalysisReport};
pub use config::{config_parse, AnalysisConfig, ConfigError};

/// Version tag written into every JSON report; see `schema/report.schema.json`.
pub const SCHEMA_VERSION: &str = "balancekit.report/1";

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const ERROR: i32 = 1;
    /// A summary balance metric is beyond its threshold.
    pub const BALANCE: i32 = 2;
    /// The solver stopped without reaching tolerance.
    pub const NOT_CONVERGED: i32 = 3;
}
