use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::dataset::{Block, Dataset, Schema};
use crate::engine::Engine;
use crate::error::{Error, Result};

/// A moment function of the covariates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MomentFn {
    First(usize),
    Second(usize),
    Cross(usize, usize),
}

impl MomentFn {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            MomentFn::First(j) => x[j],
            MomentFn::Second(j) => x[j] * x[j],
            MomentFn::Cross(i, j) => x[i] * x[j],
        }
    }

    /// Evaluates the moment for every unit of a block.
    pub fn column(&self, block: &Block) -> Vec<f64> {
        match *self {
            MomentFn::First(j) => block.covariate(j).to_vec(),
            MomentFn::Second(j) => block.covariate(j).iter().map(|v| v * v).collect(),
            MomentFn::Cross(i, j) => block
                .covariate(i)
                .iter()
                .zip(block.covariate(j))
                .map(|(a, b)| a * b)
                .collect(),
        }
    }

    fn max_index(&self) -> usize {
        match *self {
            MomentFn::First(j) | MomentFn::Second(j) => j,
            MomentFn::Cross(i, j) => i.max(j),
        }
    }

    fn canonical(&self) -> MomentFn {
        match *self {
            MomentFn::Cross(i, j) if i > j => MomentFn::Cross(j, i),
            other => other,
        }
    }

    pub fn label(&self, schema: &Schema) -> String {
        let name = |j: usize| schema.covariates.get(j).map_or("?", String::as_str);
        match *self {
            MomentFn::First(j) => name(j).to_string(),
            MomentFn::Second(j) => format!("{}^2", name(j)),
            MomentFn::Cross(i, j) => format!("{}*{}", name(i), name(j)),
        }
    }
}

/// Ordered, duplicate-free list of moment functions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MomentSpec {
    fns: Vec<MomentFn>,
}

impl MomentSpec {
    pub fn new(fns: Vec<MomentFn>) -> Result<Self> {
        if fns.is_empty() {
            return Err(Error::Validation("moment spec is empty".into()));
        }
        let mut seen = HashSet::new();
        for f in &fns {
            if let MomentFn::Cross(i, j) = f {
                if i == j {
                    return Err(Error::Validation(format!(
                        "cross moment ({i}, {j}) repeats a covariate; use Second({i})"
                    )));
                }
            }
            if !seen.insert(f.canonical()) {
                return Err(Error::Validation(format!("duplicate moment {f:?}")));
            }
        }
        Ok(MomentSpec { fns })
    }

    /// First moments of all `d` covariates.
    pub fn first(d: usize) -> Self {
        MomentSpec {
            fns: (0..d).map(MomentFn::First).collect(),
        }
    }

    /// First moments followed by squares of all `d` covariates.
    pub fn first_and_second(d: usize) -> Self {
        MomentSpec {
            fns: (0..d)
                .map(MomentFn::First)
                .chain((0..d).map(MomentFn::Second))
                .collect(),
        }
    }

    pub fn validate(&self, schema: &Schema) -> Result<()> {
        match self.fns.iter().find(|f| f.max_index() >= schema.d()) {
            Some(f) => Err(Error::Validation(format!(
                "moment {f:?} references a covariate outside 0..{}",
                schema.d()
            ))),
            None => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.fns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fns.is_empty()
    }

    pub fn fns(&self) -> &[MomentFn] {
        &self.fns
    }

    /// Keeps only the moments at `keep` (in order).
    pub fn subset(&self, keep: &[usize]) -> Result<Self> {
        MomentSpec::new(keep.iter().map(|&k| self.fns[k]).collect())
    }

    pub fn labels(&self, schema: &Schema) -> Vec<String> {
        self.fns.iter().map(|f| f.label(schema)).collect()
    }
}

/// Treated-group means of the moment functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetMoments {
    pub values: Vec<f64>,
    pub spec: MomentSpec,
}

/// Per-shard sums of each moment over one arm.
pub(crate) fn moment_sums(
    ds: &Dataset,
    spec: &MomentSpec,
    treated: bool,
    engine: &Engine,
) -> Result<Vec<f64>> {
    let p = spec.len();
    engine.fold(
        ds.shards(),
        || vec![0.0; p],
        |_, shard| {
            let block = shard.block(treated);
            spec.fns()
                .iter()
                .map(|f| f.column(block).iter().sum::<f64>())
                .collect()
        },
        add_vecs,
    )
}

pub fn compute_target_moments(
    ds: &Dataset,
    spec: &MomentSpec,
    engine: &Engine,
) -> Result<TargetMoments> {
    spec.validate(ds.schema())?;
    if ds.n_treated() == 0 {
        return Err(Error::Validation("treated group is empty".into()));
    }
    let n1 = ds.n_treated() as f64;
    let values = moment_sums(ds, spec, true, engine)?
        .into_iter()
        .map(|s| s / n1)
        .collect();
    Ok(TargetMoments {
        values,
        spec: spec.clone(),
    })
}

pub(crate) fn add_vecs(mut a: Vec<f64>, b: Vec<f64>) -> Vec<f64> {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::UnitRecord;

    fn ds(treated: &[f64], control: &[f64]) -> Dataset {
        let units = treated
            .iter()
            .map(|&x| (true, x))
            .chain(control.iter().map(|&x| (false, x)))
            .enumerate()
            .map(|(i, (t, x))| UnitRecord {
                unit_id: i.to_string(),
                treated: t,
                covariates: vec![x, 2.0 * x + 1.0],
                outcomes: vec![],
            });
        Dataset::from_units(Schema::anonymous(2, 0), units, 3).unwrap()
    }

    #[test]
    fn first_and_second_targets() {
        let d = ds(&[1.0, 3.0], &[0.0, 5.0]);
        let e = Engine::serial();
        let t = compute_target_moments(&d, &MomentSpec::new(vec![MomentFn::First(0)]).unwrap(), &e)
            .unwrap();
        assert_eq!(t.values, vec![2.0]);
        let t = compute_target_moments(&d, &MomentSpec::new(vec![MomentFn::Second(0)]).unwrap(), &e)
            .unwrap();
        assert_eq!(t.values, vec![5.0]);
        let t = compute_target_moments(
            &d,
            &MomentSpec::new(vec![MomentFn::Cross(1, 0)]).unwrap(),
            &e,
        )
        .unwrap();
        // (1*3 + 3*7)/2
        assert_eq!(t.values, vec![12.0]);
    }

    #[test]
    fn spec_validation() {
        assert!(MomentSpec::new(vec![]).is_err());
        assert!(MomentSpec::new(vec![MomentFn::First(0), MomentFn::First(0)]).is_err());
        assert!(MomentSpec::new(vec![MomentFn::Cross(0, 1), MomentFn::Cross(1, 0)]).is_err());
        assert!(MomentSpec::new(vec![MomentFn::Cross(2, 2)]).is_err());
        let spec = MomentSpec::new(vec![MomentFn::First(5)]).unwrap();
        assert!(spec.validate(&Schema::anonymous(2, 0)).is_err());
        assert_eq!(MomentSpec::first_and_second(3).len(), 6);
    }

    #[test]
    fn labels_name_columns() {
        let schema = Schema::anonymous(2, 0);
        let spec = MomentSpec::new(vec![
            MomentFn::First(0),
            MomentFn::Second(1),
            MomentFn::Cross(0, 1),
        ])
        .unwrap();
        assert_eq!(spec.labels(&schema), vec!["x0", "x1^2", "x0*x1"]);
    }
}
