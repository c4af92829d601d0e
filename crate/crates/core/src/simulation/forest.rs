//! CART trees and bagged forests on in-memory rows.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Criterion {
    /// Sum of squared deviations; leaves predict the mean.
    Variance,
    /// Gini impurity for 0/1 labels; leaves predict the share of ones.
    Gini,
}

impl Criterion {
    /// Impurity of a node from its count, label sum and sum of squares,
    /// scaled by the count.
    fn impurity(self, n: f64, sum: f64, sumsq: f64) -> f64 {
        match self {
            Criterion::Variance => sumsq - sum * sum / n,
            Criterion::Gini => {
                let p = sum / n;
                n * (1.0 - p * p - (1.0 - p) * (1.0 - p))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Features tried per split; `None` means `⌈√d⌉`.
    pub max_features: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl ForestParams {
    pub fn new(n_trees: usize, max_depth: usize, seed: u64) -> Self {
        ForestParams {
            n_trees,
            max_depth,
            min_samples_leaf: 1,
            max_features: None,
            bootstrap: true,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                Node::Leaf(v) => return *v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => k = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], k: usize) -> usize {
            match &nodes[k] {
                Node::Leaf(_) => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf(_))).count()
    }
}

struct Builder<'a> {
    rows: &'a [Vec<f64>],
    y: &'a [f64],
    criterion: Criterion,
    params: &'a ForestParams,
    n_features: usize,
    nodes: Vec<Node>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl Builder<'_> {
    fn stats(&self, idx: &[usize]) -> (f64, f64, f64) {
        let mut s = 0.0;
        let mut ss = 0.0;
        for &i in idx {
            s += self.y[i];
            ss += self.y[i] * self.y[i];
        }
        (idx.len() as f64, s, ss)
    }

    fn best_split(&self, idx: &mut [usize], rng: &mut ChaCha8Rng) -> Option<BestSplit> {
        let d = self.rows[0].len();
        let (n, sum, sumsq) = self.stats(idx);
        let parent = self.criterion.impurity(n, sum, sumsq);
        let min_leaf = self.params.min_samples_leaf.max(1);
        let mut best: Option<BestSplit> = None;
        for feature in sample(rng, d, self.n_features.min(d)).into_iter() {
            idx.sort_by(|&a, &b| self.rows[a][feature].total_cmp(&self.rows[b][feature]));
            let (mut ls, mut lss) = (0.0, 0.0);
            for k in 0..idx.len() - 1 {
                let yi = self.y[idx[k]];
                ls += yi;
                lss += yi * yi;
                let left_n = k + 1;
                let (a, b) = (self.rows[idx[k]][feature], self.rows[idx[k + 1]][feature]);
                if a == b || left_n < min_leaf || idx.len() - left_n < min_leaf {
                    continue;
                }
                let ln = left_n as f64;
                let child = self.criterion.impurity(ln, ls, lss)
                    + self.criterion.impurity(n - ln, sum - ls, sumsq - lss);
                let gain = parent - child;
                if gain > 1e-12 * parent.abs().max(1e-300) && best.as_ref().is_none_or(|bs| gain > bs.gain) {
                    let mid = a + (b - a) / 2.0;
                    best = Some(BestSplit {
                        feature,
                        threshold: if mid < b { mid } else { a },
                        gain,
                    });
                }
            }
        }
        best
    }

    fn grow(&mut self, idx: &mut [usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let (n, sum, sumsq) = self.stats(idx);
        let k = self.nodes.len();
        self.nodes.push(Node::Leaf(sum / n));
        let pure = self.criterion.impurity(n, sum, sumsq) <= 0.0;
        if depth >= self.params.max_depth || idx.len() < 2 * self.params.min_samples_leaf.max(1) || pure {
            return k;
        }
        let Some(split) = self.best_split(idx, rng) else {
            return k;
        };
        let (mut left, mut right): (Vec<usize>, Vec<usize>) =
            idx.iter().partition(|&&i| self.rows[i][split.feature] <= split.threshold);
        let l = self.grow(&mut left, depth + 1, rng);
        let r = self.grow(&mut right, depth + 1, rng);
        self.nodes[k] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: l,
            right: r,
        };
        k
    }
}

/// Grows one tree on the units listed in `idx` (repeats allowed).
pub fn fit_tree(
    rows: &[Vec<f64>],
    y: &[f64],
    idx: &mut [usize],
    criterion: Criterion,
    params: &ForestParams,
    rng: &mut ChaCha8Rng,
) -> Tree {
    let d = rows.first().map_or(0, Vec::len);
    let n_features = params.max_features.unwrap_or_else(|| (d as f64).sqrt().ceil() as usize).max(1);
    let mut b = Builder {
        rows,
        y,
        criterion,
        params,
        n_features,
        nodes: Vec::new(),
    };
    b.grow(idx, 0, rng);
    Tree { nodes: b.nodes }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub criterion: Criterion,
    pub trees: Vec<Tree>,
}

impl Forest {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }
}

/// Bagged CART trees. Tree `t` draws from stream `t` of the seeded generator.
pub fn fit_forest(rows: &[Vec<f64>], y: &[f64], criterion: Criterion, params: &ForestParams) -> Forest {
    assert_eq!(rows.len(), y.len(), "rows and labels differ in length");
    assert!(!rows.is_empty(), "forest needs at least one row");
    let n = rows.len();
    let trees = (0..params.n_trees)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(t as u64);
            let mut idx: Vec<usize> = if params.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            fit_tree(rows, y, &mut idx, criterion, params, &mut rng)
        })
        .collect();
    Forest { criterion, trees }
}
