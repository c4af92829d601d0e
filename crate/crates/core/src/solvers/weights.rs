use std::collections::HashMap;
use std::io::{Read, Write};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Weights over control units, in the dataset's control order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    ids: Vec<String>,
    values: Vec<f64>,
}

impl WeightVector {
    pub fn new(ids: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if ids.len() != values.len() {
            return Err(Error::Validation(format!(
                "{} ids but {} weights",
                ids.len(),
                values.len()
            )));
        }
        Ok(WeightVector { ids, values })
    }

    /// Pairs values given in control order with the dataset's control ids.
    pub fn for_controls(ds: &Dataset, values: Vec<f64>) -> Result<Self> {
        let ids = ds.control_ids().into_iter().map(str::to_string).collect();
        WeightVector::new(ids, values)
    }

    pub fn uniform(ds: &Dataset) -> Self {
        let n = ds.n_control();
        WeightVector::for_controls(ds, vec![1.0 / n as f64; n]).expect("lengths match")
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn get(&self, id: &str) -> Option<f64> {
        self.ids.iter().position(|i| i == id).map(|k| self.values[k])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.ids.iter().map(String::as_str).zip(self.values.iter().copied())
    }

    /// Rescales to sum 1. Fails when the sum is not positive.
    pub fn normalized(mut self) -> Result<Self> {
        let s = self.sum();
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Numerical(format!("cannot normalize weights summing to {s}")));
        }
        for v in &mut self.values {
            *v /= s;
        }
        Ok(self)
    }

    /// Reorders to the control order of `ds`. Every control unit must be present
    /// exactly once.
    pub fn aligned_to(&self, ds: &Dataset) -> Result<Self> {
        let index: HashMap<&str, f64> = self.iter().collect();
        if index.len() != self.len() {
            return Err(Error::Validation("duplicate unit ids in weights".into()));
        }
        if self.len() != ds.n_control() {
            return Err(Error::Validation(format!(
                "{} weights for {} control units",
                self.len(),
                ds.n_control()
            )));
        }
        let ids: Vec<String> = ds.control_ids().into_iter().map(str::to_string).collect();
        let values = ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Validation(format!("no weight for control unit {id:?}")))
            })
            .collect::<Result<_>>()?;
        WeightVector::new(ids, values)
    }

    /// Splits the values into per-shard slices following `ds`'s control blocks.
    pub fn shard_slices<'a>(&'a self, ds: &Dataset) -> Vec<&'a [f64]> {
        let mut out = Vec::with_capacity(ds.shards().len());
        let mut start = 0;
        for shard in ds.shards() {
            let n = shard.control.len();
            out.push(&self.values[start..start + n]);
            start += n;
        }
        out
    }

    /// `unit_id,weight` CSV with shortest round-trip float formatting.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let fail = |e: csv::Error| Error::Validation(format!("weights csv: {e}"));
        w.write_record(["unit_id", "weight"]).map_err(fail)?;
        for (id, v) in self.iter() {
            w.write_record([id, &v.to_string()]).map_err(fail)?;
        }
        w.flush().map_err(|e| Error::io("<weights>", e))
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut ids = Vec::new();
        let mut values = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let bad = |message: String| Error::Ingest { row: k + 1, message };
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            if rec.len() != 2 {
                return Err(bad(format!("expected 2 fields, found {}", rec.len())));
            }
            let v: f64 = rec[1]
                .trim()
                .parse()
                .map_err(|_| bad(format!("cannot parse weight {:?}", &rec[1])))?;
            if !v.is_finite() || v < 0.0 {
                return Err(bad(format!("weight {v} is not a finite nonnegative number")));
            }
            ids.push(rec[0].to_string());
            values.push(v);
        }
        WeightVector::new(ids, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let w = WeightVector::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![0.1, 1.0 / 3.0, 0.5666666666666667],
        )
        .unwrap();
        let mut buf = Vec::new();
        w.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("unit_id,weight\na,0.1\n"));
        assert_eq!(WeightVector::read_csv(&buf[..]).unwrap(), w);
    }

    #[test]
    fn normalize_and_lookup() {
        let w = WeightVector::new(vec!["a".into(), "b".into()], vec![1.0, 3.0])
            .unwrap()
            .normalized()
            .unwrap();
        assert_eq!(w.get("b"), Some(0.75));
        assert_eq!(w.get("z"), None);
        let zero = WeightVector::new(vec!["a".into()], vec![0.0]).unwrap();
        assert!(zero.normalized().is_err());
    }

    #[test]
    fn rejects_negative_weights_in_csv() {
        let text = "unit_id,weight\na,-0.5\n";
        assert!(WeightVector::read_csv(text.as_bytes()).is_err());
    }
}
