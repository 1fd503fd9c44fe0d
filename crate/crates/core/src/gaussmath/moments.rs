//! Moments of a zero-mean Gaussian truncated to a rectangle.
//!
//! Uses the Tallis / Manjunath–Wilhelm identities, which express the first
//! and second moments through one- and two-dimensional marginal densities at
//! the rectangle faces, each multiplied by a lower-dimensional conditional
//! rectangle probability.

use super::{mvn, normal};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

struct Problem<'a> {
    cov: &'a DMatrix<f64>,
    lower: &'a [f64],
    upper: &'a [f64],
}

impl Problem<'_> {
    fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Marginal density of X_k at `x`, times P(others in box | X_k = x).
    fn face1(&self, k: usize, x: f64) -> f64 {
        if !x.is_finite() {
            return 0.0;
        }
        let d = self.dim();
        let skk = self.cov[(k, k)];
        let dens = normal::pdf(x / skk.sqrt()) / skk.sqrt();
        if dens == 0.0 || d == 1 {
            return dens;
        }
        let rest: Vec<usize> = (0..d).filter(|&j| j != k).collect();
        let cond = DMatrix::from_fn(d - 1, d - 1, |a, b| {
            let (i, j) = (rest[a], rest[b]);
            self.cov[(i, j)] - self.cov[(i, k)] * self.cov[(k, j)] / skk
        });
        let cond = (&cond + cond.transpose()) * 0.5;
        let shift: Vec<f64> = rest.iter().map(|&j| self.cov[(j, k)] / skk * x).collect();
        let lo: Vec<f64> = rest.iter().zip(&shift).map(|(&j, s)| self.lower[j] - s).collect();
        let hi: Vec<f64> = rest.iter().zip(&shift).map(|(&j, s)| self.upper[j] - s).collect();
        dens * mvn::prob(&lo, &hi, &cond)
    }

    /// Joint marginal density of (X_k, X_q) at (x, y), times the conditional
    /// probability of the remaining coordinates.
    fn face2(&self, k: usize, q: usize, x: f64, y: f64) -> f64 {
        if !x.is_finite() || !y.is_finite() {
            return 0.0;
        }
        let d = self.dim();
        let (skk, sqq, skq) = (self.cov[(k, k)], self.cov[(q, q)], self.cov[(k, q)]);
        let det = skk * sqq - skq * skq;
        if det <= 0.0 {
            return 0.0;
        }
        // Σ₂⁻¹ = [[sqq, −skq], [−skq, skk]] / det
        let quad = (sqq * x * x - 2.0 * skq * x * y + skk * y * y) / det;
        let dens = (-0.5 * quad).exp() / (2.0 * std::f64::consts::PI * det.sqrt());
        if dens == 0.0 || d == 2 {
            return dens;
        }
        let rest: Vec<usize> = (0..d).filter(|&j| j != k && j != q).collect();
        // Regression coefficients of each remaining coordinate on (X_k, X_q).
        let beta: Vec<[f64; 2]> = rest
            .iter()
            .map(|&j| {
                let (sjk, sjq) = (self.cov[(j, k)], self.cov[(j, q)]);
                [(sjk * sqq - sjq * skq) / det, (sjq * skk - sjk * skq) / det]
            })
            .collect();
        let m = rest.len();
        let cond = DMatrix::from_fn(m, m, |a, b| {
            let (i, j) = (rest[a], rest[b]);
            self.cov[(i, j)] - beta[a][0] * self.cov[(k, j)] - beta[a][1] * self.cov[(q, j)]
        });
        let cond = (&cond + cond.transpose()) * 0.5;
        let lo: Vec<f64> = rest
            .iter()
            .zip(&beta)
            .map(|(&j, b)| self.lower[j] - b[0] * x - b[1] * y)
            .collect();
        let hi: Vec<f64> = rest
            .iter()
            .zip(&beta)
            .map(|(&j, b)| self.upper[j] - b[0] * x - b[1] * y)
            .collect();
        dens * mvn::prob(&lo, &hi, &cond)
    }
}

/// `x · f` with the convention `±∞ · 0 = 0` at infinite limits.
fn times(x: f64, f: f64) -> f64 {
    if f == 0.0 {
        0.0
    } else {
        x * f
    }
}

/// First moment and raw second moment of N(0, cov) truncated to
/// `[lower, upper]`.
pub fn zero_mean_moments(
    cov: &DMatrix<f64>,
    lower: &[f64],
    upper: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = lower.len();
    let alpha = mvn::prob(lower, upper, cov);
    if !(alpha > 1e-12) {
        return Err(Error::VanishingMass {
            component: 0,
            prob: alpha,
        });
    }
    if d == 1 {
        let s = cov[(0, 0)].sqrt();
        let (a, b) = (lower[0] / s, upper[0] / s);
        let (pa, pb) = (normal::pdf(a), normal::pdf(b));
        let z = normal::interval(a, b);
        let m1 = s * (pa - pb) / z;
        let m2 = s * s * (1.0 + (times(a, pa) - times(b, pb)) / z);
        return Ok((DVector::from_element(1, m1), DMatrix::from_element(1, 1, m2)));
    }
    let p = Problem { cov, lower, upper };
    let fa: Vec<f64> = (0..d).map(|k| p.face1(k, lower[k]) / alpha).collect();
    let fb: Vec<f64> = (0..d).map(|k| p.face1(k, upper[k]) / alpha).collect();
    let m1 = DVector::from_fn(d, |i, _| {
        (0..d).map(|k| cov[(i, k)] * (fa[k] - fb[k])).sum()
    });
    // F_kq(a_k, a_q) − F_kq(a_k, b_q) − F_kq(b_k, a_q) + F_kq(b_k, b_q)
    let mut f2 = DMatrix::zeros(d, d);
    for k in 0..d {
        for q in k + 1..d {
            let v = (p.face2(k, q, lower[k], lower[q])
                - p.face2(k, q, lower[k], upper[q])
                - p.face2(k, q, upper[k], lower[q])
                + p.face2(k, q, upper[k], upper[q]))
                / alpha;
            f2[(k, q)] = v;
            f2[(q, k)] = v;
        }
    }
    let edge: Vec<f64> = (0..d)
        .map(|k| (times(lower[k], fa[k]) - times(upper[k], fb[k])) / cov[(k, k)])
        .collect();
    let mut m2 = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let mut v = cov[(i, j)];
            for k in 0..d {
                v += cov[(i, k)] * cov[(j, k)] * edge[k];
                let mut inner = 0.0;
                for q in 0..d {
                    if q != k {
                        inner += (cov[(j, q)] - cov[(k, q)] * cov[(j, k)] / cov[(k, k)]) * f2[(k, q)];
                    }
                }
                v += cov[(i, k)] * inner;
            }
            m2[(i, j)] = v;
            m2[(j, i)] = v;
        }
    }
    Ok((m1, m2))
}
