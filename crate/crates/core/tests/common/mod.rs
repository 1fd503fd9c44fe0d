//! Oracles and helpers shared by the integration tests. Nothing here calls
//! the numerical routines under test.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_accel-eval")
}

pub fn run_cli(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn accel-eval")
}

pub fn assets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets")
}

pub fn asset(name: &str) -> String {
    assets().join(name).to_string_lossy().into_owned()
}

/// Gauss–Legendre nodes and weights on [-1, 1] by Newton iteration on P_n.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

/// Composite rule on [a, b] with `panels` panels of `order` points.
pub fn composite(a: f64, b: f64, panels: usize, order: usize) -> Vec<(f64, f64)> {
    let base = gauss_legendre(order);
    let h = (b - a) / panels as f64;
    let mut out = Vec::with_capacity(panels * order);
    for p in 0..panels {
        let c = a + (p as f64 + 0.5) * h;
        for &(x, w) in &base {
            out.push((c + 0.5 * h * x, 0.5 * h * w));
        }
    }
    out
}

/// Quadratic form (x − μ)ᵀ P (x − μ).
pub fn quad_form(p: &DMatrix<f64>, mu: &[f64], x: &[f64]) -> f64 {
    let d = mu.len();
    let mut q = 0.0;
    for i in 0..d {
        for j in 0..d {
            q += (x[i] - mu[i]) * p[(i, j)] * (x[j] - mu[j]);
        }
    }
    q
}

/// Mean and raw second moment of N(μ, Σ) restricted to [lower, upper]
/// by tensor Gauss–Legendre quadrature; infinite limits are cut at 12
/// marginal standard deviations.
pub fn grid_moments(mu: &[f64], cov: &DMatrix<f64>, lower: &[f64], upper: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let d = mu.len();
    let prec = cov.clone().try_inverse().expect("invertible");
    let (panels, order) = match d {
        1 => (200, 20),
        2 => (40, 16),
        _ => (12, 14),
    };
    let axes: Vec<Vec<(f64, f64)>> = (0..d)
        .map(|i| {
            let s = cov[(i, i)].sqrt();
            let a = lower[i].max(mu[i] - 12.0 * s);
            let b = upper[i].min(mu[i] + 12.0 * s);
            composite(a, b, panels, order)
        })
        .collect();
    let mut z = 0.0;
    let mut m1 = DVector::zeros(d);
    let mut m2 = DMatrix::zeros(d, d);
    let mut idx = vec![0usize; d];
    let mut x = vec![0.0; d];
    loop {
        let mut w = 1.0;
        for i in 0..d {
            let (xi, wi) = axes[i][idx[i]];
            x[i] = xi;
            w *= wi;
        }
        let f = w * (-0.5 * quad_form(&prec, mu, &x)).exp();
        z += f;
        for i in 0..d {
            m1[i] += f * x[i];
            for j in 0..d {
                m2[(i, j)] += f * x[i] * x[j];
            }
        }
        let mut k = 0;
        loop {
            idx[k] += 1;
            if idx[k] < axes[k].len() {
                break;
            }
            idx[k] = 0;
            k += 1;
            if k == d {
                return (m1 / z, m2 / z);
            }
        }
    }
}

/// Maximizer of −(x − μ)ᵀ P (x − μ) over a box by successive grid zooming.
///
/// Every round uses one step `h` in all coordinates and includes the box
/// faces, so the best grid point is within `h·√(d·κ)/2` of the maximizer
/// (κ the condition number of P); the next window keeps that radius.
pub fn grid_argmax(mu: &[f64], cov: &DMatrix<f64>, lower: &[f64], upper: &[f64]) -> Vec<f64> {
    let d = mu.len();
    let prec = cov.clone().try_inverse().expect("invertible");
    let eig = prec.clone().symmetric_eigen().eigenvalues;
    let kappa = eig.max() / eig.min();
    let c = ((d as f64 * kappa).sqrt() / 2.0).ceil() + 1.0;
    let smax = (0..d).map(|i| cov[(i, i)].sqrt()).fold(0.0, f64::max);
    let reach = (0..d)
        .flat_map(|i| [lower[i], upper[i]].map(|b| if b.is_finite() { (b - mu[i]).abs() } else { 0.0 }))
        .fold(0.0, f64::max);
    let r = 50.0 * smax + reach;
    let mut lo: Vec<f64> = (0..d).map(|i| if lower[i].is_finite() { lower[i] } else { mu[i] - r }).collect();
    let mut hi: Vec<f64> = (0..d).map(|i| if upper[i].is_finite() { upper[i] } else { mu[i] + r }).collect();
    let mut h = (0..d).map(|i| hi[i] - lo[i]).fold(0.0, f64::max) / 60.0;
    let mut best = vec![0.0; d];
    while h > 1e-10 {
        let axes: Vec<Vec<f64>> = (0..d)
            .map(|i| {
                let n = ((hi[i] - lo[i]) / h).floor() as usize;
                let mut v: Vec<f64> = (0..=n).map(|k| lo[i] + k as f64 * h).collect();
                if *v.last().unwrap() < hi[i] {
                    v.push(hi[i]);
                }
                v
            })
            .collect();
        let mut best_val = f64::INFINITY;
        let mut idx = vec![0usize; d];
        let mut x = vec![0.0; d];
        'grid: loop {
            for i in 0..d {
                x[i] = axes[i][idx[i]];
            }
            let v = quad_form(&prec, mu, &x);
            if v < best_val {
                best_val = v;
                best.copy_from_slice(&x);
            }
            let mut k = 0;
            loop {
                idx[k] += 1;
                if idx[k] < axes[k].len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
                if k == d {
                    break 'grid;
                }
            }
        }
        for i in 0..d {
            lo[i] = (best[i] - c * h).max(lower[i]);
            hi[i] = (best[i] + c * h).min(upper[i]);
        }
        h *= 2.0 * c / (4.0 * c).max(30.0);
    }
    best
}

pub fn leq(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y)
}

/// Pareto-minimal (or maximal) points by an all-pairs scan, deduplicated
/// and sorted lexicographically.
pub fn pareto(points: &[Vec<f64>], minimal: bool) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for p in points {
        let beaten = points.iter().any(|q| {
            let dom = if minimal { leq(q, p) } else { leq(p, q) };
            dom && q != p
        });
        if !beaten && !out.contains(p) {
            out.push(p.clone());
        }
    }
    sort_points(out)
}

pub fn sort_points(mut v: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    v.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    v
}

/// Upper tail of the standard normal from `erfc`.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// Files in `dir` (non-recursive), sorted, excluding manifests.
pub fn output_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| !p.to_string_lossy().ends_with("manifest.json"))
        .collect();
    v.sort();
    v
}
