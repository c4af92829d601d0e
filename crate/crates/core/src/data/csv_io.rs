//! Delimited-text ingestion and export.

use std::collections::HashSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Schema, UnitRecord};
use crate::error::{Error, Result};

/// Mapping of CSV columns to roles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvConfig {
    pub id_column: String,
    pub treatment_column: String,
    /// Covariate columns. Empty means every column without another role.
    pub covariates: Vec<String>,
    pub outcomes: Vec<String>,
    pub delimiter: u8,
}

impl CsvConfig {
    pub fn new(id_column: &str, treatment_column: &str) -> Self {
        CsvConfig {
            id_column: id_column.to_string(),
            treatment_column: treatment_column.to_string(),
            covariates: Vec::new(),
            outcomes: Vec::new(),
            delimiter: b',',
        }
    }

    pub fn with_covariates<S: AsRef<str>>(mut self, cols: &[S]) -> Self {
        self.covariates = cols.iter().map(|c| c.as_ref().to_string()).collect();
        self
    }

    pub fn with_outcomes<S: AsRef<str>>(mut self, cols: &[S]) -> Self {
        self.outcomes = cols.iter().map(|c| c.as_ref().to_string()).collect();
        self
    }

    /// Resolves roles against a header, returning the schema and the column
    /// position of id, treatment, covariates and outcomes.
    fn resolve(&self, header: &[String]) -> Result<(Schema, Layout)> {
        let find = |name: &str| -> Result<usize> {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Validation(format!("column {name:?} not found in header")))
        };
        let mut claimed = HashSet::new();
        let mut claim = |name: &str| -> Result<()> {
            if !claimed.insert(name.to_string()) {
                return Err(Error::Validation(format!(
                    "column {name:?} is assigned more than one role"
                )));
            }
            Ok(())
        };
        claim(&self.id_column)?;
        claim(&self.treatment_column)?;
        for o in &self.outcomes {
            claim(o)?;
        }
        let covariates: Vec<String> = if self.covariates.is_empty() {
            header
                .iter()
                .filter(|h| !claimed.contains(h.as_str()))
                .cloned()
                .collect()
        } else {
            for c in &self.covariates {
                claim(c)?;
            }
            self.covariates.clone()
        };
        if covariates.is_empty() {
            return Err(Error::Validation("no covariate columns".into()));
        }
        let layout = Layout {
            id: find(&self.id_column)?,
            treatment: find(&self.treatment_column)?,
            covariates: covariates.iter().map(|c| find(c)).collect::<Result<_>>()?,
            outcomes: self.outcomes.iter().map(|c| find(c)).collect::<Result<_>>()?,
            width: header.len(),
        };
        let schema = Schema::new(
            self.id_column.clone(),
            self.treatment_column.clone(),
            covariates,
            self.outcomes.clone(),
        );
        Ok((schema, layout))
    }
}

struct Layout {
    id: usize,
    treatment: usize,
    covariates: Vec<usize>,
    outcomes: Vec<usize>,
    width: usize,
}

/// Reads a CSV file into a sharded dataset.
pub fn ingest_csv(path: impl AsRef<Path>, cfg: &CsvConfig, shard_rows: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, cfg, shard_rows)
}

/// Reads CSV from any reader. Row numbers in errors count data rows from 1.
pub fn read_csv<R: Read>(reader: R, cfg: &CsvConfig, shard_rows: usize) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(cfg.delimiter)
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Ingest {
            row: 0,
            message: format!("cannot read header: {e}"),
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let (schema, layout) = cfg.resolve(&header)?;

    let mut units = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 1;
        let rec = rec.map_err(|e| Error::Ingest {
            row,
            message: e.to_string(),
        })?;
        if rec.len() != layout.width {
            return Err(Error::Ingest {
                row,
                message: format!("expected {} fields, found {}", layout.width, rec.len()),
            });
        }
        let treated = match rec[layout.treatment].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::Ingest {
                    row,
                    message: format!("treatment value {other:?} is not 0 or 1"),
                })
            }
        };
        let parse = |col: usize| -> Result<f64> {
            let raw = rec[col].trim();
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Ingest {
                    row,
                    message: format!("column {:?}: cannot parse {raw:?} as a finite number", header[col]),
                }),
            }
        };
        units.push(UnitRecord {
            unit_id: rec[layout.id].to_string(),
            treated,
            covariates: layout.covariates.iter().map(|&c| parse(c)).collect::<Result<_>>()?,
            outcomes: layout.outcomes.iter().map(|&c| parse(c)).collect::<Result<_>>()?,
        });
    }
    Dataset::from_units(schema, units, shard_rows)
}

/// Writes the dataset back as CSV in original row order: id, treatment,
/// covariates, outcomes, using shortest round-trip float formatting.
pub fn write_csv<W: Write>(ds: &Dataset, writer: W, delimiter: u8) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(delimiter)
        .from_writer(writer);
    let schema = ds.schema();
    let header = [&schema.id_column, &schema.treatment_column]
        .into_iter()
        .chain(&schema.covariates)
        .chain(&schema.outcomes);
    w.write_record(header).map_err(csv_err)?;
    for unit in ds.units() {
        let mut fields = Vec::with_capacity(2 + unit.covariates.len() + unit.outcomes.len());
        fields.push(unit.unit_id);
        fields.push(if unit.treated { "1" } else { "0" }.to_string());
        fields.extend(unit.covariates.iter().chain(&unit.outcomes).map(|v| v.to_string()));
        w.write_record(&fields).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

pub fn export_csv(ds: &Dataset, path: impl AsRef<Path>, delimiter: u8) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(ds, std::io::BufWriter::new(file), delimiter)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Validation(format!("csv write failed: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> CsvConfig {
        CsvConfig::new("id", "t").with_outcomes(&["y"])
    }

    #[test]
    fn four_rows_two_shards() {
        let text = "id,t,x,y\na,1,1.5,2\nb,0,2,3\nc,1,0,1\nd,0,-1,0\n";
        let ds = read_csv(text.as_bytes(), &cfg(), 2).unwrap();
        assert_eq!(ds.shards().len(), 2);
        assert_eq!((ds.n_control(), ds.n_treated()), (2, 2));
        assert_eq!(ds.schema().covariates, vec!["x".to_string()]);
    }

    #[test]
    fn bad_treatment_names_row() {
        let text = "id,t,x,y\na,1,1,2\nb,2,2,3\n";
        match read_csv(text.as_bytes(), &cfg(), 8) {
            Err(Error::Ingest { row, message }) => {
                assert_eq!(row, 2);
                assert!(message.contains("\"2\""));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_rows() {
        let arity = "id,t,x,y\na,1,1\n";
        assert!(matches!(read_csv(arity.as_bytes(), &cfg(), 8), Err(Error::Ingest { row: 1, .. })));
        let num = "id,t,x,y\na,1,1,2\nb,0,abc,3\n";
        assert!(matches!(read_csv(num.as_bytes(), &cfg(), 8), Err(Error::Ingest { row: 2, .. })));
        let nan = "id,t,x,y\na,1,NaN,2\nb,0,1,3\n";
        assert!(matches!(read_csv(nan.as_bytes(), &cfg(), 8), Err(Error::Ingest { row: 1, .. })));
    }

    #[test]
    fn duplicate_ids_and_empty_group() {
        let dup = "id,t,x,y\na,1,1,2\na,0,2,3\n";
        assert!(matches!(read_csv(dup.as_bytes(), &cfg(), 8), Err(Error::Validation(_))));
        let all_treated = "id,t,x,y\na,1,1,2\nb,1,2,3\n";
        assert!(matches!(
            read_csv(all_treated.as_bytes(), &cfg(), 8),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn role_conflict() {
        let text = "id,t,x,y\na,1,1,2\nb,0,2,3\n";
        let c = cfg().with_covariates(&["x", "y"]);
        assert!(matches!(read_csv(text.as_bytes(), &c, 8), Err(Error::Validation(_))));
    }

    #[test]
    fn custom_delimiter() {
        let text = "id;t;x;y\na;1;1;2\nb;0;2;3\n";
        let mut c = cfg();
        c.delimiter = b';';
        let ds = read_csv(text.as_bytes(), &c, 8).unwrap();
        let mut out = Vec::new();
        write_csv(&ds, &mut out, b';').unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }
}
