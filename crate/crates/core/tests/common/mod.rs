#![allow(dead_code)]

pub mod oracles;

use balancekit::data::{Dataset, Schema, UnitRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Units from explicit control and treated covariate rows.
pub fn dataset(control: &[Vec<f64>], treated: &[Vec<f64>], shard_rows: usize) -> Dataset {
    let d = control.first().or(treated.first()).map_or(0, Vec::len);
    let units = control
        .iter()
        .map(|x| (false, x))
        .chain(treated.iter().map(|x| (true, x)))
        .enumerate()
        .map(|(i, (t, x))| UnitRecord {
            unit_id: format!("u{i}"),
            treated: t,
            covariates: x.clone(),
            outcomes: vec![],
        });
    Dataset::from_units(Schema::anonymous(d, 0), units, shard_rows).unwrap()
}

pub fn scalar_dataset(control: &[f64], treated: &[f64]) -> Dataset {
    let c: Vec<Vec<f64>> = control.iter().map(|v| vec![*v]).collect();
    let t: Vec<Vec<f64>> = treated.iter().map(|v| vec![*v]).collect();
    dataset(&c, &t, 2)
}

/// Gaussian controls and shifted Gaussian treated units.
pub fn random_instance(n0: usize, n1: usize, d: usize, shift: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize, mu: f64| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| mu + rng.sample::<f64, _>(StandardNormal)).collect())
            .collect()
    };
    let c = draw(n0, 0.0);
    let t = draw(n1, shift);
    // interleave so both arms spread over shards
    let mut rows: Vec<(bool, Vec<f64>)> = c.into_iter().map(|x| (false, x)).collect();
    rows.extend(t.into_iter().map(|x| (true, x)));
    let mut order: Vec<usize> = (0..rows.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let units = order.into_iter().map(|i| UnitRecord {
        unit_id: format!("r{i}"),
        treated: rows[i].0,
        covariates: rows[i].1.clone(),
        outcomes: vec![],
    });
    Dataset::from_units(Schema::anonymous(d, 0), units, 37).unwrap()
}

/// Control-unit rows in control order.
pub fn control_rows(ds: &Dataset) -> Vec<Vec<f64>> {
    ds.shards()
        .iter()
        .flat_map(|s| (0..s.control.len()).map(move |i| s.control.unit_covariates(i)))
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Gaussian covariates, logistic treatment assignment on `x·gamma - 0.5`
/// and one linear outcome `1 + x·beta + N(0, noise²)` without any effect.
pub fn logistic_instance(n: usize, gamma: &[f64], beta: &[f64], noise: f64, seed: u64) -> Dataset {
    let d = gamma.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let units: Vec<UnitRecord> = (0..n)
        .map(|i| {
            let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let eta: f64 = x.iter().zip(gamma).map(|(a, b)| a * b).sum::<f64>() - 0.5;
            let treated = rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp());
            let e: f64 = rng.sample(StandardNormal);
            let y = 1.0 + x.iter().zip(beta).map(|(a, b)| a * b).sum::<f64>() + noise * e;
            UnitRecord {
                unit_id: format!("u{i}"),
                treated,
                covariates: x,
                outcomes: vec![y],
            }
        })
        .collect();
    Dataset::from_units(Schema::anonymous(d, 1), units, 113).unwrap()
}

/// Treated and control covariate rows and outcomes in dataset order.
pub fn arm(ds: &Dataset, treated: bool) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in ds.shards() {
        let b = s.block(treated);
        for i in 0..b.len() {
            xs.push(b.unit_covariates(i));
            ys.push(b.outcomes.iter().map(|c| c[i]).collect());
        }
    }
    (xs, ys)
}
