//! Independent reference implementations used to check the library.

use balancekit::data::MomentSpec;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------- solvers ----------

pub fn features(rows: &[Vec<f64>], spec: &MomentSpec) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|x| spec.fns().iter().map(|f| f.eval(x)).collect())
        .collect()
}

pub fn softmax_weights(c: &[Vec<f64>], xi: &[f64]) -> Vec<f64> {
    let e: Vec<f64> = c
        .iter()
        .map(|ci| -ci.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let m = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = e.iter().map(|v| (v - m).exp()).sum();
    e.iter().map(|v| (v - m).exp() / z).collect()
}

pub fn dual_objective(c: &[Vec<f64>], t: &[f64], xi: &[f64]) -> f64 {
    let e: Vec<f64> = c
        .iter()
        .map(|ci| -ci.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let m = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + e.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + xi.iter().zip(t).map(|(a, b)| a * b).sum::<f64>()
}

/// Damped Newton on the entropy-balancing dual with the explicit Hessian.
pub fn newton_eb(c: &[Vec<f64>], t: &[f64]) -> Vec<f64> {
    let p = t.len();
    let mut xi = DVector::zeros(p);
    for _ in 0..200 {
        let w = softmax_weights(c, xi.as_slice());
        let mean: Vec<f64> = (0..p).map(|k| c.iter().zip(&w).map(|(ci, wi)| wi * ci[k]).sum()).collect();
        let g = DVector::from_iterator(p, (0..p).map(|k| t[k] - mean[k]));
        if g.amax() < 1e-14 {
            break;
        }
        let h = DMatrix::from_fn(p, p, |a, b| {
            c.iter()
                .zip(&w)
                .map(|(ci, wi)| wi * (ci[a] - mean[a]) * (ci[b] - mean[b]))
                .sum()
        });
        let step = h.lu().solve(&g).expect("hessian is invertible");
        let f0 = dual_objective(c, t, xi.as_slice());
        let mut s = 1.0;
        loop {
            let cand = &xi - &step * s;
            if dual_objective(c, t, cand.as_slice()) <= f0 - 1e-4 * s * g.dot(&step) || s < 1e-10 {
                xi = cand;
                break;
            }
            s *= 0.5;
        }
    }
    softmax_weights(c, xi.as_slice())
}

/// Constraint matrix `[1; c^T]` and right-hand side `[1; t]`.
pub fn constraints(c: &[Vec<f64>], t: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let n = c.len();
    let p = t.len();
    let a = DMatrix::from_fn(p + 1, n, |r, i| if r == 0 { 1.0 } else { c[i][r - 1] });
    let b = DVector::from_iterator(p + 1, std::iter::once(1.0).chain(t.iter().copied()));
    (a, b)
}

/// Least-norm solution on every support that is nonnegative and satisfies
/// `A w = b` exactly; each is a feasible point.
pub fn support_solutions(c: &[Vec<f64>], t: &[f64]) -> Vec<Vec<f64>> {
    let (a, b) = constraints(c, t);
    let n = c.len();
    assert!(n <= 12);
    let mut out = Vec::new();
    for mask in 1u32..(1 << n) {
        let support: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let a_s = a.select_columns(&support);
        let pinv = a_s.clone().pseudo_inverse(1e-12).unwrap();
        let w_s = &pinv * &b;
        if (&a_s * &w_s - &b).amax() > 1e-10 || w_s.iter().any(|v| *v < -1e-12) {
            continue;
        }
        let mut w = vec![0.0; n];
        for (k, &i) in support.iter().enumerate() {
            w[i] = w_s[k].max(0.0);
        }
        out.push(w);
    }
    out
}

/// Minimum-norm nonnegative solution of `A w = b` by enumerating supports;
/// `None` when the target is infeasible.
pub fn try_enumerate_min_norm(c: &[Vec<f64>], t: &[f64]) -> Option<Vec<f64>> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for w in support_solutions(c, t) {
        let norm: f64 = w.iter().map(|v| v * v).sum();
        if best.as_ref().is_none_or(|(bn, _)| norm < *bn - 1e-14) {
            best = Some((norm, w));
        }
    }
    best.map(|b| b.1)
}

pub fn enumerate_min_norm(c: &[Vec<f64>], t: &[f64]) -> Vec<f64> {
    try_enumerate_min_norm(c, t).expect("target is feasible")
}

/// Minimum-norm nonnegative solution of `A w = b` by plain projected-gradient
/// ascent on the dual, `λ ← λ + (b − A max(0, Aᵀλ)) / ‖A‖²`, run for as long
/// as it takes. Returns the weights and the final constraint residual.
pub fn projected_gradient_min_norm(c: &[Vec<f64>], t: &[f64], max_iter: usize) -> (Vec<f64>, f64) {
    let (a, b) = constraints(c, t);
    let step = 1.0 / (&a * a.transpose()).symmetric_eigenvalues().max();
    let mut lam = DVector::zeros(b.len());
    let mut res = f64::INFINITY;
    let mut w = DVector::zeros(c.len());
    for _ in 0..max_iter {
        w = (a.transpose() * &lam).map(|v| v.max(0.0));
        let g = &b - &a * &w;
        res = g.amax();
        if res < 1e-13 {
            break;
        }
        lam += g * step;
    }
    (w.as_slice().to_vec(), res)
}

/// Minimum-norm nonnegative solution of `A w = b` through the optimality
/// condition `w = max(0, A^T λ)`, solved by semismooth Newton and accepted only
/// if the KKT conditions hold.
pub fn kkt_min_norm(c: &[Vec<f64>], t: &[f64]) -> Vec<f64> {
    let (a, b) = constraints(c, t);
    let aat = &a * a.transpose();
    let mut lam = aat.clone().lu().solve(&b).unwrap();
    let residual = |lam: &DVector<f64>| {
        let w = (a.transpose() * lam).map(|v| v.max(0.0));
        (&a * &w - &b, w)
    };
    for _ in 0..500 {
        let (f, _) = residual(&lam);
        if f.amax() < 1e-14 {
            break;
        }
        let z = a.transpose() * &lam;
        let active: Vec<usize> = (0..z.len()).filter(|&i| z[i] > 0.0).collect();
        let a_s = a.select_columns(&active);
        let j = &a_s * a_s.transpose() + DMatrix::identity(b.len(), b.len()) * 1e-14;
        let step = j.lu().solve(&f).unwrap();
        let f0 = f.norm();
        let mut s = 1.0;
        loop {
            let cand = &lam - &step * s;
            if residual(&cand).0.norm() < (1.0 - 1e-4 * s) * f0 || s < 1e-12 {
                lam = cand;
                break;
            }
            s *= 0.5;
        }
    }
    let (f, w) = residual(&lam);
    // primal feasibility, dual sign condition and complementarity hold by construction of w
    assert!(f.amax() < 1e-11, "oracle failed to reach feasibility: {}", f.amax());
    w.as_slice().to_vec()
}

pub fn bisect(lo: f64, hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    let (mut lo, mut hi) = (lo, hi);
    let flo = f(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if (f(mid) > 0.0) == (flo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

// ---------- diagnostics ----------

pub fn random_weights(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..n)
        .map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random::<f64>() })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

pub fn oracle_stats(t: &[f64], c: &[f64], w: &[f64]) -> (f64, f64, f64, f64) {
    let n1 = t.len() as f64;
    let mt = t.iter().sum::<f64>() / n1;
    let vt = t.iter().map(|x| (x - mt) * (x - mt)).sum::<f64>() / (n1 - 1.0);
    let mut mc = 0.0;
    for i in 0..c.len() {
        mc += w[i] * c[i];
    }
    let mut num = 0.0;
    let mut w2 = 0.0;
    for i in 0..c.len() {
        num += w[i] * (c[i] - mc) * (c[i] - mc);
        w2 += w[i] * w[i];
    }
    (mt, vt, mc, num / (1.0 - w2))
}

pub fn oracle_smd(t: &[f64], c: &[f64], w: &[f64]) -> f64 {
    let (mt, vt, mc, vc) = oracle_stats(t, c, w);
    (mt - mc).abs() / ((vt + vc) / 2.0).sqrt()
}

pub fn oracle_ks(t: &[f64], c: &[f64], w: &[f64]) -> f64 {
    let mut best = 0.0f64;
    for &x in t.iter().chain(c) {
        let ft = t.iter().filter(|v| **v <= x).count() as f64 / t.len() as f64;
        let fc: f64 = c.iter().zip(w).filter(|(v, _)| **v <= x).map(|(_, w)| w).sum();
        best = best.max((ft - fc).abs());
    }
    best
}

pub fn oracle_quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (s.len() as f64 - 1.0);
    let i = pos.floor() as usize;
    if i + 1 >= s.len() {
        return s[s.len() - 1];
    }
    s[i] * (1.0 - (pos - i as f64)) + s[i + 1] * (pos - i as f64)
}

pub fn oracle_overlap(t: &[f64], c: &[f64], w: &[f64], bins: usize) -> f64 {
    let pooled: Vec<f64> = t.iter().chain(c).copied().collect();
    let lo = pooled.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = pooled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut ovl = 0.0;
    for b in 0..bins {
        let inside = |x: f64| (((x - lo) / width).floor() as usize).min(bins - 1) == b;
        let pt = t.iter().filter(|x| inside(**x)).count() as f64 / t.len() as f64;
        let pc: f64 = c.iter().zip(w).filter(|(x, _)| inside(**x)).map(|(_, w)| w).sum();
        ovl += pt.min(pc);
    }
    1.0 - ovl
}

pub fn oracle_mb(t: &[Vec<f64>], c: &[Vec<f64>], w: &[f64]) -> f64 {
    let d = t[0].len();
    let all: Vec<&Vec<f64>> = t.iter().chain(c).collect();
    let n = all.len() as f64;
    let mu: Vec<f64> = (0..d).map(|j| all.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let cov = DMatrix::from_fn(d, d, |a, b| {
        all.iter().map(|x| (x[a] - mu[a]) * (x[b] - mu[b])).sum::<f64>() / (n - 1.0)
    });
    let inv = cov.try_inverse().unwrap();
    let diff = DVector::from_fn(d, |j, _| {
        t.iter().map(|x| x[j]).sum::<f64>() / t.len() as f64
            - c.iter().zip(w).map(|(x, w)| w * x[j]).sum::<f64>()
    });
    (diff.transpose() * inv * &diff)[(0, 0)]
}
