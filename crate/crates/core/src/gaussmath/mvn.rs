//! Zero-mean multivariate normal rectangle probabilities.
//!
//! d = 1 and d = 2 use closed forms. d = 3 conditions on the most
//! constrained coordinate and integrates the bivariate conditional
//! probability with composite Gauss–Legendre. d ≥ 4 uses Genz's separation
//! of variables with variable prioritization, integrated by a fixed Kronecker
//! lattice with the tent (baker's) periodization. No randomness is involved,
//! so every result is a deterministic function of its inputs.

use super::normal;
use nalgebra::DMatrix;

/// Lattice size for d ≤ 4.
pub const LATTICE_POINTS: usize = 1 << 14;
const LATTICE_POINTS_HIGH_DIM: usize = 1 << 16;

// Fractional parts of √p for the first primes.
const GENERATORS: [f64; 12] = [
    0.414_213_562_373_095_1,
    0.732_050_807_568_877_2,
    0.236_067_977_499_789_7,
    0.645_751_311_064_590_6,
    0.316_624_790_355_399_8,
    0.605_551_275_463_989_3,
    0.123_105_625_617_660_5,
    0.358_898_943_540_673_6,
    0.795_831_523_312_719_5,
    0.385_164_807_134_504,
    0.567_764_362_830_021_9,
    0.082_762_530_298_219_4,
];

/// P(lower ≤ X ≤ upper) for X ~ N(0, cov). Returns 0 for empty boxes.
pub fn prob(lower: &[f64], upper: &[f64], cov: &DMatrix<f64>) -> f64 {
    let d = lower.len();
    debug_assert_eq!(upper.len(), d);
    debug_assert_eq!(cov.nrows(), d);
    if lower.iter().zip(upper).any(|(l, u)| u <= l) {
        return 0.0;
    }
    // Drop coordinates with no constraint: the marginal of the rest is exact.
    let active: Vec<usize> = (0..d)
        .filter(|&i| lower[i] > f64::NEG_INFINITY || upper[i] < f64::INFINITY)
        .collect();
    match active.len() {
        0 => 1.0,
        1 => {
            let i = active[0];
            let s = cov[(i, i)].sqrt();
            normal::interval(lower[i] / s, upper[i] / s)
        }
        2 => {
            let (i, j) = (active[0], active[1]);
            let (si, sj) = (cov[(i, i)].sqrt(), cov[(j, j)].sqrt());
            let r = (cov[(i, j)] / (si * sj)).clamp(-1.0, 1.0);
            normal::bvn_rect(
                [lower[i] / si, lower[j] / sj],
                [upper[i] / si, upper[j] / sj],
                r,
            )
        }
        3 => {
            let sub = DMatrix::from_fn(3, 3, |a, b| cov[(active[a], active[b])]);
            let lo: Vec<f64> = active.iter().map(|&i| lower[i]).collect();
            let hi: Vec<f64> = active.iter().map(|&i| upper[i]).collect();
            trivariate_prob(&lo, &hi, &sub)
        }
        _ => {
            let sub = DMatrix::from_fn(active.len(), active.len(), |a, b| {
                cov[(active[a], active[b])]
            });
            let lo: Vec<f64> = active.iter().map(|&i| lower[i]).collect();
            let hi: Vec<f64> = active.iter().map(|&i| upper[i]).collect();
            lattice_prob(&lo, &hi, &sub)
        }
    }
}

struct Ordered {
    lo: Vec<f64>,
    hi: Vec<f64>,
    chol: Vec<Vec<f64>>,
}

/// Cholesky factorization with Genz–Bretz variable prioritization: at each
/// step the coordinate with the smallest conditional interval probability
/// (other coordinates at their conditional expectations) goes next.
fn prioritized_cholesky(lower: &[f64], upper: &[f64], cov: &DMatrix<f64>) -> Option<Ordered> {
    let d = lower.len();
    let mut c = cov.clone();
    let mut lo = lower.to_vec();
    let mut hi = upper.to_vec();
    let mut l = vec![vec![0.0; d]; d];
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut best = i;
        let mut best_p = f64::INFINITY;
        for j in i..d {
            let var = c[(j, j)] - (0..i).map(|m| l[j][m] * l[j][m]).sum::<f64>();
            if var <= 0.0 {
                return None;
            }
            let s = var.sqrt();
            let shift: f64 = (0..i).map(|m| l[j][m] * y[m]).sum();
            let p = normal::interval((lo[j] - shift) / s, (hi[j] - shift) / s);
            if p < best_p {
                best_p = p;
                best = j;
            }
        }
        if best != i {
            c.swap_rows(i, best);
            c.swap_columns(i, best);
            lo.swap(i, best);
            hi.swap(i, best);
            l.swap(i, best);
        }
        let var = c[(i, i)] - (0..i).map(|m| l[i][m] * l[i][m]).sum::<f64>();
        if var <= 0.0 {
            return None;
        }
        let lii = var.sqrt();
        l[i][i] = lii;
        for k in i + 1..d {
            let v = c[(k, i)] - (0..i).map(|m| l[k][m] * l[i][m]).sum::<f64>();
            l[k][i] = v / lii;
        }
        let shift: f64 = (0..i).map(|m| l[i][m] * y[m]).sum();
        let (a, b) = ((lo[i] - shift) / lii, (hi[i] - shift) / lii);
        let p = normal::interval(a, b);
        y[i] = if p > 0.0 {
            (normal::pdf(a) - normal::pdf(b)) / p
        } else if a > 0.0 {
            a
        } else {
            b
        };
    }
    Some(Ordered { lo, hi, chol: l })
}

fn lattice_prob(lower: &[f64], upper: &[f64], cov: &DMatrix<f64>) -> f64 {
    let d = lower.len();
    let Some(ord) = prioritized_cholesky(lower, upper, cov) else {
        return f64::NAN;
    };
    let n = if d <= 4 {
        LATTICE_POINTS
    } else {
        LATTICE_POINTS_HIGH_DIM
    };
    let l = &ord.chol;
    let first = normal::interval(ord.lo[0] / l[0][0], ord.hi[0] / l[0][0]);
    if first == 0.0 {
        return 0.0;
    }
    let mut y = vec![0.0; d];
    let mut total = 0.0;
    for k in 1..=n {
        let mut f = first;
        y[0] = {
            let w = tent((k as f64 * GENERATORS[0]).fract());
            normal::truncated_ppf(ord.lo[0] / l[0][0], ord.hi[0] / l[0][0], w)
        };
        for i in 1..d {
            let shift: f64 = (0..i).map(|m| l[i][m] * y[m]).sum();
            let a = (ord.lo[i] - shift) / l[i][i];
            let b = (ord.hi[i] - shift) / l[i][i];
            let p = normal::interval(a, b);
            f *= p;
            if f == 0.0 {
                break;
            }
            if i + 1 < d {
                let w = tent((k as f64 * GENERATORS[i % GENERATORS.len()]).fract());
                y[i] = normal::truncated_ppf(a, b, w);
            }
        }
        total += f;
    }
    total / n as f64
}

const TRIVARIATE_PANELS: usize = 16;

fn trivariate_prob(lower: &[f64], upper: &[f64], cov: &DMatrix<f64>) -> f64 {
    // Condition on the coordinate with the smallest marginal probability.
    let s: Vec<f64> = (0..3).map(|i| cov[(i, i)].sqrt()).collect();
    let k = (0..3)
        .min_by(|&i, &j| {
            let pi = normal::interval(lower[i] / s[i], upper[i] / s[i]);
            let pj = normal::interval(lower[j] / s[j], upper[j] / s[j]);
            pi.total_cmp(&pj)
        })
        .unwrap_or(0);
    let (a, b) = (lower[k] / s[k], upper[k] / s[k]);
    let first = normal::interval(a, b);
    if first == 0.0 {
        return 0.0;
    }
    let rest: Vec<usize> = (0..3).filter(|&j| j != k).collect();
    let skk = cov[(k, k)];
    let cond = |i: usize, j: usize| cov[(i, j)] - cov[(i, k)] * cov[(k, j)] / skk;
    let (v0, v1, c01) = (cond(rest[0], rest[0]), cond(rest[1], rest[1]), cond(rest[0], rest[1]));
    if v0 <= 0.0 || v1 <= 0.0 {
        return f64::NAN;
    }
    let (sd0, sd1) = (v0.sqrt(), v1.sqrt());
    let r = (c01 / (sd0 * sd1)).clamp(-1.0, 1.0);
    let beta = [cov[(rest[0], k)] / skk, cov[(rest[1], k)] / skk];
    let integrand = |w: f64| {
        let x = normal::truncated_ppf(a, b, w) * s[k];
        let lo = [
            (lower[rest[0]] - beta[0] * x) / sd0,
            (lower[rest[1]] - beta[1] * x) / sd1,
        ];
        let hi = [
            (upper[rest[0]] - beta[0] * x) / sd0,
            (upper[rest[1]] - beta[1] * x) / sd1,
        ];
        normal::bvn_rect(lo, hi, r)
    };
    // w = (1 − cos πt)/2 clusters nodes at both ends, where the conditioning
    // coordinate runs off to ±∞.
    let mapped = |t: f64| {
        let w = 0.5 * (1.0 - (std::f64::consts::PI * t).cos());
        integrand(w) * 0.5 * std::f64::consts::PI * (std::f64::consts::PI * t).sin()
    };
    let h = 1.0 / TRIVARIATE_PANELS as f64;
    let mut total = 0.0;
    for p in 0..TRIVARIATE_PANELS {
        let c = (p as f64 + 0.5) * h;
        for &(w, x) in &normal::GL20 {
            total += w * (mapped(c + x * h / 2.0) + mapped(c - x * h / 2.0));
        }
    }
    first * total * h / 2.0
}

#[inline]
fn tent(w: f64) -> f64 {
    (2.0 * w - 1.0).abs()
}
