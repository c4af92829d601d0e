use std::path::Path;

use balancekit::data::{ingest_csv, read_dataset_dir, CsvConfig};
use balancekit::{Dataset, Error, Result};

/// Column roles for reading a dataset.
#[derive(Debug, Clone)]
pub struct Roles<'a> {
    pub id_column: &'a str,
    pub treatment_column: &'a str,
    pub covariates: &'a [String],
    pub outcomes: &'a [String],
    pub delimiter: u8,
    pub shard_rows: usize,
}

/// Reads a CSV file, or a shard directory written by `ingest`. A shard
/// directory carries its own schema, which must contain the named columns.
pub fn load_dataset(path: &Path, roles: &Roles) -> Result<Dataset> {
    if path.is_dir() {
        let ds = read_dataset_dir(path)?;
        let schema = ds.schema();
        if let Some(missing) = roles.outcomes.iter().find(|o| schema.outcome_index(o).is_none()) {
            return Err(Error::Validation(format!(
                "outcome {missing:?} not found in shard directory {}",
                path.display()
            )));
        }
        if !roles.covariates.is_empty() && roles.covariates != schema.covariates.as_slice() {
            return Err(Error::Validation(format!(
                "covariates of shard directory {} are {:?}, not {:?}",
                path.display(),
                schema.covariates,
                roles.covariates
            )));
        }
        return Ok(ds);
    }
    let mut cfg = CsvConfig::new(roles.id_column, roles.treatment_column)
        .with_covariates(roles.covariates)
        .with_outcomes(roles.outcomes);
    cfg.delimiter = roles.delimiter;
    ingest_csv(path, &cfg, roles.shard_rows)
}

/// Index of each named outcome in the dataset schema.
pub fn outcome_indices(ds: &Dataset, names: &[String]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            ds.schema()
                .outcome_index(n)
                .ok_or_else(|| Error::Validation(format!("outcome {n:?} not found")))
        })
        .collect()
}
