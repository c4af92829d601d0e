//! In-process map-reduce over shards.
//!
//! Every solver and diagnostic pass is expressed as a [`Reduction`]: a pure
//! per-shard `map`, an associative `combine` and its `identity`. The engine
//! maps shards in parallel on a worker pool that lives as long as the
//! [`Engine`], then folds the per-shard accumulators. In ordered mode the fold
//! is a fixed pairwise tree over shard indices, so the result does not depend
//! on the number of workers.

use std::panic::{catch_unwind, AssertUnwindSafe};

use rayon::prelude::*;

use crate::data::{Dataset, Shard};
use crate::error::{Error, Result};

/// Environment variable overriding the default worker count.
pub const WORKERS_ENV: &str = "BK_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineConfig {
    pub workers: usize,
    pub ordered_reduce: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            ordered_reduce: true,
        }
    }
}

impl EngineConfig {
    pub fn with_workers(workers: usize) -> Self {
        EngineConfig {
            workers,
            ..EngineConfig::default()
        }
    }

    /// Default configuration with `BK_WORKERS` applied when set.
    pub fn from_env() -> Result<Self> {
        let mut cfg = EngineConfig::default();
        if let Ok(raw) = std::env::var(WORKERS_ENV) {
            cfg.workers = raw.trim().parse().map_err(|_| {
                Error::Validation(format!("{WORKERS_ENV}={raw:?} is not a positive integer"))
            })?;
        }
        Ok(cfg)
    }
}

/// A fold-shaped computation over shards of type `S`.
pub trait Reduction<S: ?Sized>: Sync {
    type Acc: Send;

    fn identity(&self) -> Self::Acc;

    fn map(&self, index: usize, shard: &S) -> Self::Acc;

    fn combine(&self, a: Self::Acc, b: Self::Acc) -> Self::Acc;
}

/// A [`Reduction`] assembled from three closures.
pub struct FnReduction<I, M, C> {
    identity: I,
    map: M,
    combine: C,
}

pub fn reduction<S, A, I, M, C>(identity: I, map: M, combine: C) -> FnReduction<I, M, C>
where
    S: ?Sized,
    A: Send,
    I: Fn() -> A + Sync,
    M: Fn(usize, &S) -> A + Sync,
    C: Fn(A, A) -> A + Sync,
{
    FnReduction {
        identity,
        map,
        combine,
    }
}

impl<S, A, I, M, C> Reduction<S> for FnReduction<I, M, C>
where
    S: ?Sized,
    A: Send,
    I: Fn() -> A + Sync,
    M: Fn(usize, &S) -> A + Sync,
    C: Fn(A, A) -> A + Sync,
{
    type Acc = A;

    fn identity(&self) -> A {
        (self.identity)()
    }

    fn map(&self, index: usize, shard: &S) -> A {
        (self.map)(index, shard)
    }

    fn combine(&self, a: A, b: A) -> A {
        (self.combine)(a, b)
    }
}

pub struct Engine {
    config: EngineConfig,
    pool: rayon::ThreadPool,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("config", &self.config).finish()
    }
}

impl Engine {
    pub fn new(config: EngineConfig) -> Result<Self> {
        if config.workers == 0 {
            return Err(Error::Validation("worker_count must be at least 1".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .thread_name(|i| format!("bk-worker-{i}"))
            .build()
            .map_err(|e| Error::Validation(format!("cannot start worker pool: {e}")))?;
        Ok(Engine { config, pool })
    }

    /// Single-worker ordered engine.
    pub fn serial() -> Self {
        Engine::new(EngineConfig {
            workers: 1,
            ordered_reduce: true,
        })
        .expect("one worker is always valid")
    }

    pub fn config(&self) -> EngineConfig {
        self.config
    }

    /// Runs `f` inside the worker pool, so nested rayon work uses it too.
    pub fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        self.pool.install(f)
    }

    /// Folds `r` over `shards`.
    pub fn run<S, R>(&self, shards: &[S], r: &R) -> Result<R::Acc>
    where
        S: Sync,
        R: Reduction<S>,
    {
        let guarded = |i: usize, s: &S| -> Result<R::Acc> {
            catch_unwind(AssertUnwindSafe(|| r.map(i, s))).map_err(|payload| Error::Reduction {
                shard: i,
                message: panic_message(payload.as_ref()),
            })
        };
        if self.config.ordered_reduce {
            let parts: Vec<R::Acc> = self.pool.install(|| {
                shards
                    .par_iter()
                    .enumerate()
                    .map(|(i, s)| guarded(i, s))
                    .collect::<Result<Vec<_>>>()
            })?;
            Ok(tree_fold(parts, r))
        } else {
            self.pool.install(|| {
                shards
                    .par_iter()
                    .enumerate()
                    .map(|(i, s)| guarded(i, s))
                    .try_reduce(|| r.identity(), |a, b| Ok(r.combine(a, b)))
            })
        }
    }

    /// Convenience form of [`Engine::run`] taking closures.
    pub fn fold<S, A>(
        &self,
        shards: &[S],
        identity: impl Fn() -> A + Sync,
        map: impl Fn(usize, &S) -> A + Sync,
        combine: impl Fn(A, A) -> A + Sync,
    ) -> Result<A>
    where
        S: Sync,
        A: Send,
    {
        self.run(shards, &reduction(identity, map, combine))
    }

    /// Maps every shard, keeping results in shard order.
    pub fn map<S, T>(&self, shards: &[S], f: impl Fn(usize, &S) -> T + Sync) -> Result<Vec<T>>
    where
        S: Sync,
        T: Send,
    {
        self.fold(
            shards,
            Vec::new,
            |i, s| vec![f(i, s)],
            |mut a, mut b| {
                a.append(&mut b);
                a
            },
        )
    }
}

/// Runs a reduction over the shards of a dataset.
pub fn run_reduction<R>(ds: &Dataset, r: &R, engine: &Engine) -> Result<R::Acc>
where
    R: Reduction<Shard>,
{
    engine.run(ds.shards(), r)
}

fn tree_fold<S, R: Reduction<S>>(mut parts: Vec<R::Acc>, r: &R) -> R::Acc {
    if parts.is_empty() {
        return r.identity();
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(r.combine(a, b)),
                None => next.push(a),
            }
        }
        parts = next;
    }
    parts.pop().expect("non-empty")
}

fn panic_message(payload: &(dyn std::any::Any + Send)) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "worker panicked".to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn engine(workers: usize, ordered: bool) -> Engine {
        Engine::new(EngineConfig {
            workers,
            ordered_reduce: ordered,
        })
        .unwrap()
    }

    #[test]
    fn sum_over_shards() {
        let shards = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let total = engine(2, true)
            .fold(&shards, || 0.0, |_, s: &Vec<f64>| s.iter().sum(), |a, b| a + b)
            .unwrap();
        assert_eq!(total, 10.0);
    }

    #[test]
    fn ordered_is_bit_identical_across_workers() {
        let shards: Vec<Vec<f64>> = (0..37)
            .map(|k| (0..101).map(|i| ((k * 101 + i) as f64).sin() * 1e3).collect())
            .collect();
        let sum = |e: &Engine| {
            e.fold(&shards, || 0.0, |_, s: &Vec<f64>| s.iter().sum::<f64>(), |a, b| a + b)
                .unwrap()
        };
        let one = sum(&engine(1, true));
        for w in [2, 3, 8] {
            assert_eq!(one.to_bits(), sum(&engine(w, true)).to_bits());
        }
    }

    #[test]
    fn identity_for_empty_input() {
        let shards: Vec<Vec<f64>> = vec![];
        let r = engine(1, true).fold(&shards, || -1.0, |_, _| 0.0, |a, b| a + b).unwrap();
        assert_eq!(r, -1.0);
    }

    #[test]
    fn map_preserves_order() {
        let shards: Vec<usize> = (0..20).collect();
        let out = engine(4, true).map(&shards, |i, s| (i, *s * 2)).unwrap();
        assert_eq!(out, (0..20).map(|i| (i, i * 2)).collect::<Vec<_>>());
    }

    #[test]
    fn panics_name_the_shard() {
        let shards: Vec<usize> = (0..5).collect();
        for ordered in [true, false] {
            let err = engine(2, ordered)
                .fold(
                    &shards,
                    || 0,
                    |_, s: &usize| {
                        if *s == 3 {
                            panic!("bad shard");
                        }
                        *s
                    },
                    |a, b| a + b,
                )
                .unwrap_err();
            match err {
                Error::Reduction { shard, message } => {
                    assert_eq!(shard, 3);
                    assert!(message.contains("bad shard"));
                }
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn zero_workers_rejected() {
        assert!(Engine::new(EngineConfig {
            workers: 0,
            ordered_reduce: true
        })
        .is_err());
    }
}
