use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of records per shard.
pub const DEFAULT_SHARD_ROWS: usize = 65_536;

/// Column roles of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub id_column: String,
    pub treatment_column: String,
    pub covariates: Vec<String>,
    pub outcomes: Vec<String>,
}

impl Schema {
    pub fn new(
        id_column: impl Into<String>,
        treatment_column: impl Into<String>,
        covariates: Vec<String>,
        outcomes: Vec<String>,
    ) -> Self {
        Schema {
            id_column: id_column.into(),
            treatment_column: treatment_column.into(),
            covariates,
            outcomes,
        }
    }

    /// Schema with generated names `x0..`, `y0..`.
    pub fn anonymous(d: usize, m: usize) -> Self {
        Schema::new(
            "unit_id",
            "treatment",
            (0..d).map(|j| format!("x{j}")).collect(),
            (0..m).map(|j| format!("y{j}")).collect(),
        )
    }

    pub fn d(&self) -> usize {
        self.covariates.len()
    }

    pub fn m(&self) -> usize {
        self.outcomes.len()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariates.iter().position(|c| c == name)
    }

    pub fn outcome_index(&self, name: &str) -> Option<usize> {
        self.outcomes.iter().position(|c| c == name)
    }
}

/// One unit (row) of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitRecord {
    pub unit_id: String,
    pub treated: bool,
    pub covariates: Vec<f64>,
    pub outcomes: Vec<f64>,
}

/// Column-major storage for the units of one treatment arm inside a shard.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Block {
    pub ids: Vec<String>,
    /// Position of each unit in the source file, used to restore row order on export.
    pub rows: Vec<u64>,
    pub covariates: Vec<Vec<f64>>,
    pub outcomes: Vec<Vec<f64>>,
}

impl Block {
    pub fn with_dims(d: usize, m: usize) -> Self {
        Block {
            ids: Vec::new(),
            rows: Vec::new(),
            covariates: vec![Vec::new(); d],
            outcomes: vec![Vec::new(); m],
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: String, row: u64, covariates: &[f64], outcomes: &[f64]) {
        self.ids.push(id);
        self.rows.push(row);
        for (col, &v) in self.covariates.iter_mut().zip(covariates) {
            col.push(v);
        }
        for (col, &v) in self.outcomes.iter_mut().zip(outcomes) {
            col.push(v);
        }
    }

    pub fn covariate(&self, j: usize) -> &[f64] {
        &self.covariates[j]
    }

    pub fn outcome(&self, j: usize) -> &[f64] {
        &self.outcomes[j]
    }

    pub fn unit_covariates(&self, i: usize) -> Vec<f64> {
        self.covariates.iter().map(|c| c[i]).collect()
    }

    fn unit(&self, i: usize, treated: bool) -> UnitRecord {
        UnitRecord {
            unit_id: self.ids[i].clone(),
            treated,
            covariates: self.unit_covariates(i),
            outcomes: self.outcomes.iter().map(|c| c[i]).collect(),
        }
    }
}

/// An independently scannable partition of a dataset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Shard {
    pub control: Block,
    pub treated: Block,
}

impl Shard {
    pub fn with_dims(d: usize, m: usize) -> Self {
        Shard {
            control: Block::with_dims(d, m),
            treated: Block::with_dims(d, m),
        }
    }

    pub fn record_count(&self) -> usize {
        self.control.len() + self.treated.len()
    }

    pub fn block(&self, treated: bool) -> &Block {
        if treated {
            &self.treated
        } else {
            &self.control
        }
    }

    pub fn push(&mut self, unit: UnitRecord, row: u64) {
        let block = if unit.treated {
            &mut self.treated
        } else {
            &mut self.control
        };
        block.push(unit.unit_id, row, &unit.covariates, &unit.outcomes);
    }
}

/// Immutable sharded table of units.
#[derive(Debug, Clone)]
pub struct Dataset {
    schema: Arc<Schema>,
    shards: Vec<Shard>,
    n_control: usize,
    n_treated: usize,
}

impl Dataset {
    /// Assembles a dataset from shards, checking every dataset invariant.
    pub fn new(schema: Schema, shards: Vec<Shard>) -> Result<Self> {
        let ds = Dataset::assemble(schema, shards)?;
        let mut seen = HashSet::with_capacity(ds.len());
        for shard in &ds.shards {
            for id in shard.control.ids.iter().chain(&shard.treated.ids) {
                if !seen.insert(id.as_str()) {
                    return Err(Error::Validation(format!("duplicate unit_id {id:?}")));
                }
            }
        }
        Ok(ds)
    }

    /// Like [`Dataset::new`] but skips the id-uniqueness scan. Used for
    /// internally generated datasets whose ids are unique by construction.
    pub(crate) fn assemble(schema: Schema, shards: Vec<Shard>) -> Result<Self> {
        let (d, m) = (schema.d(), schema.m());
        if d == 0 {
            return Err(Error::Validation("dataset needs at least one covariate".into()));
        }
        let mut n_control = 0;
        let mut n_treated = 0;
        for (s, shard) in shards.iter().enumerate() {
            for block in [&shard.control, &shard.treated] {
                let n = block.len();
                let shape_ok = block.rows.len() == n
                    && block.covariates.len() == d
                    && block.outcomes.len() == m
                    && block.covariates.iter().all(|c| c.len() == n)
                    && block.outcomes.iter().all(|c| c.len() == n);
                if !shape_ok {
                    return Err(Error::Validation(format!(
                        "shard {s}: block shape does not match schema (d={d}, m={m})"
                    )));
                }
                let finite = block
                    .covariates
                    .iter()
                    .chain(&block.outcomes)
                    .all(|c| c.iter().all(|v| v.is_finite()));
                if !finite {
                    return Err(Error::Validation(format!("shard {s}: non-finite value")));
                }
            }
            n_control += shard.control.len();
            n_treated += shard.treated.len();
        }
        if n_control == 0 {
            return Err(Error::Validation("control group is empty".into()));
        }
        if n_treated == 0 {
            return Err(Error::Validation("treated group is empty".into()));
        }
        Ok(Dataset {
            schema: Arc::new(schema),
            shards,
            n_control,
            n_treated,
        })
    }

    /// Builds a dataset from records in row order, cutting a new shard every
    /// `shard_rows` records.
    pub fn from_units(
        schema: Schema,
        units: impl IntoIterator<Item = UnitRecord>,
        shard_rows: usize,
    ) -> Result<Self> {
        if shard_rows == 0 {
            return Err(Error::Validation("shard_rows must be at least 1".into()));
        }
        let (d, m) = (schema.d(), schema.m());
        let mut shards = Vec::new();
        let mut current = Shard::with_dims(d, m);
        for (row, unit) in units.into_iter().enumerate() {
            if unit.covariates.len() != d || unit.outcomes.len() != m {
                return Err(Error::Ingest {
                    row: row + 1,
                    message: format!(
                        "expected {d} covariates and {m} outcomes, got {} and {}",
                        unit.covariates.len(),
                        unit.outcomes.len()
                    ),
                });
            }
            current.push(unit, row as u64);
            if current.record_count() == shard_rows {
                shards.push(std::mem::replace(&mut current, Shard::with_dims(d, m)));
            }
        }
        if current.record_count() > 0 {
            shards.push(current);
        }
        Dataset::new(schema, shards)
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn shards(&self) -> &[Shard] {
        &self.shards
    }

    pub fn n_control(&self) -> usize {
        self.n_control
    }

    pub fn n_treated(&self) -> usize {
        self.n_treated
    }

    pub fn len(&self) -> usize {
        self.n_control + self.n_treated
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d(&self) -> usize {
        self.schema.d()
    }

    pub fn m(&self) -> usize {
        self.schema.m()
    }

    /// Start index of each shard's control block in the global control order.
    pub fn control_offsets(&self) -> Vec<usize> {
        offsets(self.shards.iter().map(|s| s.control.len()))
    }

    /// Start index of each shard's treated block in the global treated order.
    pub fn treated_offsets(&self) -> Vec<usize> {
        offsets(self.shards.iter().map(|s| s.treated.len()))
    }

    /// Control unit ids in global control order (shard by shard).
    pub fn control_ids(&self) -> Vec<&str> {
        self.shards
            .iter()
            .flat_map(|s| s.control.ids.iter().map(String::as_str))
            .collect()
    }

    /// One covariate (or outcome) column of one arm, concatenated across shards.
    pub fn gather_covariate(&self, treated: bool, j: usize) -> Vec<f64> {
        self.shards
            .iter()
            .flat_map(|s| s.block(treated).covariate(j).iter().copied())
            .collect()
    }

    pub fn gather_outcome(&self, treated: bool, j: usize) -> Vec<f64> {
        self.shards
            .iter()
            .flat_map(|s| s.block(treated).outcome(j).iter().copied())
            .collect()
    }

    /// All units in their original row order.
    pub fn units(&self) -> Vec<UnitRecord> {
        let mut tagged: Vec<(u64, UnitRecord)> = Vec::with_capacity(self.len());
        for shard in &self.shards {
            for (block, treated) in [(&shard.control, false), (&shard.treated, true)] {
                for i in 0..block.len() {
                    tagged.push((block.rows[i], block.unit(i, treated)));
                }
            }
        }
        tagged.sort_by_key(|(row, _)| *row);
        tagged.into_iter().map(|(_, u)| u).collect()
    }

    /// Re-partitions the same units (in original row order) into shards of
    /// `shard_rows` records.
    pub fn reshard(&self, shard_rows: usize) -> Result<Dataset> {
        Dataset::from_units((*self.schema).clone(), self.units(), shard_rows)
    }

    /// Reorders shards; `order[k]` is the index of the shard placed at position `k`.
    pub fn permute_shards(&self, order: &[usize]) -> Result<Dataset> {
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != (0..self.shards.len()).collect::<Vec<_>>() {
            return Err(Error::Validation("shard order is not a permutation".into()));
        }
        let shards = order.iter().map(|&k| self.shards[k].clone()).collect();
        Dataset::assemble((*self.schema).clone(), shards)
    }

    /// Replaces covariate columns block by block, keeping everything else.
    pub(crate) fn map_covariates(&self, mut f: impl FnMut(usize, &[f64]) -> Vec<f64>) -> Dataset {
        let shards = self
            .shards
            .iter()
            .map(|shard| {
                let mut out = shard.clone();
                for block in [&mut out.control, &mut out.treated] {
                    for (j, col) in block.covariates.iter_mut().enumerate() {
                        *col = f(j, col);
                    }
                }
                out
            })
            .collect();
        Dataset {
            schema: self.schema.clone(),
            shards,
            n_control: self.n_control,
            n_treated: self.n_treated,
        }
    }
}

pub(crate) fn offsets(lens: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut acc = 0;
    lens.map(|n| {
        let start = acc;
        acc += n;
        start
    })
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(id: &str, treated: bool, x: f64) -> UnitRecord {
        UnitRecord {
            unit_id: id.into(),
            treated,
            covariates: vec![x],
            outcomes: vec![],
        }
    }

    #[test]
    fn partitions_into_shards() {
        let units = vec![
            unit("a", true, 1.0),
            unit("b", false, 2.0),
            unit("c", true, 3.0),
            unit("d", false, 4.0),
        ];
        let ds = Dataset::from_units(Schema::anonymous(1, 0), units, 2).unwrap();
        assert_eq!(ds.shards().len(), 2);
        assert_eq!(ds.n_control(), 2);
        assert_eq!(ds.n_treated(), 2);
        assert_eq!(ds.control_ids(), vec!["b", "d"]);
        assert_eq!(ds.units()[2].unit_id, "c");
    }

    #[test]
    fn rejects_duplicate_ids_and_empty_groups() {
        let dup = vec![unit("a", true, 1.0), unit("a", false, 2.0)];
        assert!(matches!(
            Dataset::from_units(Schema::anonymous(1, 0), dup, 8),
            Err(Error::Validation(_))
        ));
        let no_treated = vec![unit("a", false, 1.0), unit("b", false, 2.0)];
        assert!(Dataset::from_units(Schema::anonymous(1, 0), no_treated, 8).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let units = vec![unit("a", true, f64::NAN), unit("b", false, 2.0)];
        assert!(Dataset::from_units(Schema::anonymous(1, 0), units, 8).is_err());
    }

    #[test]
    fn permute_requires_permutation() {
        let units = (0..6).map(|i| unit(&i.to_string(), i % 2 == 0, i as f64));
        let ds = Dataset::from_units(Schema::anonymous(1, 0), units, 2).unwrap();
        assert!(ds.permute_shards(&[0, 0, 1]).is_err());
        let p = ds.permute_shards(&[2, 0, 1]).unwrap();
        assert_eq!(p.shards()[0], ds.shards()[2]);
        assert_eq!(p.units(), ds.units());
    }
}
