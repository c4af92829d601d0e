use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mergeable count, means and centered cross-products of `(x, y)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct CoMoments {
    n: f64,
    mean_x: Vec<f64>,
    mean_y: f64,
    /// Σ (x - x̄)(x - x̄)ᵀ, row-major `p × p`.
    sxx: Vec<f64>,
    sxy: Vec<f64>,
    syy: f64,
}

impl CoMoments {
    pub fn new(p: usize) -> Self {
        CoMoments {
            n: 0.0,
            mean_x: vec![0.0; p],
            mean_y: 0.0,
            sxx: vec![0.0; p * p],
            sxy: vec![0.0; p],
            syy: 0.0,
        }
    }

    pub fn p(&self) -> usize {
        self.mean_x.len()
    }

    pub fn count(&self) -> usize {
        self.n as usize
    }

    pub fn push(&mut self, x: &[f64], y: f64) {
        let p = self.p();
        self.n += 1.0;
        let n = self.n;
        let dy = y - self.mean_y;
        let dx: Vec<f64> = x.iter().zip(&self.mean_x).map(|(v, m)| v - m).collect();
        self.mean_y += dy / n;
        for (m, d) in self.mean_x.iter_mut().zip(&dx) {
            *m += d / n;
        }
        // the second factor uses the updated means
        let f = (n - 1.0) / n;
        for a in 0..p {
            for b in 0..p {
                self.sxx[a * p + b] += f * dx[a] * dx[b];
            }
            self.sxy[a] += f * dx[a] * dy;
        }
        self.syy += f * dy * dy;
    }

    pub fn merge(self, other: CoMoments) -> CoMoments {
        if other.n == 0.0 {
            return self;
        }
        if self.n == 0.0 {
            return other;
        }
        let p = self.p();
        let n = self.n + other.n;
        let f = self.n * other.n / n;
        let dx: Vec<f64> = other.mean_x.iter().zip(&self.mean_x).map(|(b, a)| b - a).collect();
        let dy = other.mean_y - self.mean_y;
        let mut out = self;
        for a in 0..p {
            for b in 0..p {
                out.sxx[a * p + b] += other.sxx[a * p + b] + f * dx[a] * dx[b];
            }
            out.sxy[a] += other.sxy[a] + f * dx[a] * dy;
            out.mean_x[a] += dx[a] * other.n / n;
        }
        out.syy += other.syy + f * dy * dy;
        out.mean_y += dy * other.n / n;
        out.n = n;
        out
    }

    /// Least squares with an intercept. A singular cross-product matrix gets a
    /// ridge of `1e-8` times its mean diagonal.
    pub fn solve(&self) -> Result<OlsFit> {
        let p = self.p();
        if self.n < 1.0 {
            return Err(Error::Numerical("least squares on zero observations".into()));
        }
        let sxx = DMatrix::from_row_slice(p, p, &self.sxx);
        let sxy = DVector::from_column_slice(&self.sxy);
        let beta = match sxx.clone().cholesky() {
            Some(ch) if p > 0 => ch.solve(&sxy),
            _ if p == 0 => DVector::zeros(0),
            _ => {
                let scale = (sxx.trace() / p as f64).max(f64::MIN_POSITIVE);
                let ridged = sxx + DMatrix::identity(p, p) * (1e-8 * scale);
                ridged
                    .cholesky()
                    .ok_or_else(|| Error::Numerical("cross-product matrix is not positive semidefinite".into()))?
                    .solve(&sxy)
            }
        };
        if beta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("least squares produced non-finite coefficients".into()));
        }
        let intercept = self.mean_y - beta.iter().zip(&self.mean_x).map(|(b, m)| b * m).sum::<f64>();
        let mut coefficients = Vec::with_capacity(p + 1);
        coefficients.push(intercept);
        coefficients.extend(beta.iter());
        Ok(OlsFit { coefficients })
    }
}

/// Linear model `b0 + Σ b_j x_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    /// Intercept first.
    pub coefficients: Vec<f64>,
}

impl OlsFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.coefficients[0] + self.coefficients[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }
}

/// Ordinary least squares on rows of `xs`.
pub fn ols(xs: &[Vec<f64>], y: &[f64]) -> Result<OlsFit> {
    let p = xs.first().map_or(0, Vec::len);
    let mut acc = CoMoments::new(p);
    for (x, v) in xs.iter().zip(y) {
        acc.push(x, *v);
    }
    acc.solve()
}
