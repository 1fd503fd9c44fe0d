//! Dominating points: the highest-density location of a Gaussian component
//! on a box.
//!
//! Every piece is the intersection of an upper orthant `{x ≥ l}` with the
//! support rectangle, so the problem is the box-constrained quadratic program
//! `min (x − μ)ᵀ Σ⁻¹ (x − μ)` subject to `lower ≤ x ≤ upper`, solved with a
//! primal active-set method.

use crate::error::{Error, Result, ResultExt};
use crate::gaussmath::{log_density_unchecked, GaussComponent};
use crate::monoset::lex_cmp;
use crate::tgmm::TruncatedGmm;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub const DEDUP_TOL: f64 = 1e-6;
pub const DEFAULT_DOMINATING_CAP: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthantPiece {
    #[serde(with = "crate::serde_ext::ext_vec")]
    pub lower: Vec<f64>,
    #[serde(with = "crate::serde_ext::ext_vec")]
    pub upper: Vec<f64>,
}

impl OrthantPiece {
    /// The orthant `{x ≥ corner}` clipped to the support; `None` when the
    /// two do not overlap.
    pub fn clipped(corner: &[f64], support: &crate::gaussmath::Rect) -> Option<Self> {
        let lower: Vec<f64> = corner
            .iter()
            .zip(&support.lower)
            .map(|(c, s)| c.max(*s))
            .collect();
        let upper = support.upper.clone();
        if lower.iter().zip(&upper).any(|(l, u)| l > u) {
            return None;
        }
        Some(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominatingPoint {
    pub point: Vec<f64>,
    pub component_index: usize,
    pub piece: OrthantPiece,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bound {
    Free,
    Lower,
    Upper,
}

/// Largest violation of the KKT conditions at `x`: the gradient
/// `g = Σ⁻¹(x − μ)` must vanish on free coordinates, be ≥ 0 at active lower
/// bounds and ≤ 0 at active upper bounds.
pub fn kkt_residual(c: &GaussComponent, lower: &[f64], upper: &[f64], x: &[f64]) -> f64 {
    let g = gradient(c, x);
    (0..x.len())
        .map(|i| {
            let at_lo = x[i] <= lower[i];
            let at_hi = x[i] >= upper[i];
            match (at_lo, at_hi) {
                (true, true) => 0.0,
                (true, false) => (-g[i]).max(0.0),
                (false, true) => g[i].max(0.0),
                (false, false) => g[i].abs(),
            }
        })
        .fold(0.0, f64::max)
}

fn gradient(c: &GaussComponent, x: &[f64]) -> DVector<f64> {
    let diff = DVector::from_iterator(x.len(), x.iter().zip(c.mean().iter()).map(|(a, m)| a - m));
    let l = c.chol();
    let y = l.solve_lower_triangular(&diff).expect("non-singular factor");
    l.transpose().solve_upper_triangular(&y).expect("non-singular factor")
}

/// Minimizes the Mahalanobis distance from the component mean over the piece.
pub fn solve_piece(c: &GaussComponent, piece: &OrthantPiece, component_index: usize) -> Result<DominatingPoint> {
    let d = c.dim();
    if piece.dim() != d || piece.upper.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: piece.dim(),
        });
    }
    if let Some(i) = (0..d).find(|&i| !(piece.lower[i] <= piece.upper[i])) {
        return Err(Error::InfeasiblePiece { coord: i });
    }
    let (lo, hi) = (&piece.lower, &piece.upper);
    let mu = c.mean();
    let prec = {
        let l = c.chol();
        let linv = l
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .expect("non-singular factor");
        linv.transpose() * linv
    };
    let mut x: Vec<f64> = (0..d).map(|i| mu[i].clamp(lo[i], hi[i])).collect();
    let mut state: Vec<Bound> = (0..d)
        .map(|i| {
            if lo[i] == hi[i] || x[i] == lo[i] && mu[i] < lo[i] {
                Bound::Lower
            } else if x[i] == hi[i] && mu[i] > hi[i] {
                Bound::Upper
            } else {
                Bound::Free
            }
        })
        .collect();
    let max_iter = 10 * d * d;
    for _ in 0..max_iter.max(10) {
        let free: Vec<usize> = (0..d).filter(|&i| state[i] == Bound::Free).collect();
        // Minimizer over the free coordinates with the others held fixed.
        let target: Vec<f64> = if free.is_empty() {
            x.clone()
        } else {
            let fixed: Vec<usize> = (0..d).filter(|&i| state[i] != Bound::Free).collect();
            let pff = DMatrix::from_fn(free.len(), free.len(), |a, b| prec[(free[a], free[b])]);
            let rhs = DVector::from_fn(free.len(), |a, _| {
                -fixed
                    .iter()
                    .map(|&j| prec[(free[a], j)] * (x[j] - mu[j]))
                    .sum::<f64>()
            });
            let step = pff
                .cholesky()
                .ok_or(Error::NotPositiveDefinite)?
                .solve(&rhs);
            let mut t = x.clone();
            for (a, &i) in free.iter().enumerate() {
                t[i] = mu[i] + step[a];
            }
            t
        };
        // Longest feasible step toward the target.
        let mut alpha = 1.0;
        let mut block = None;
        for &i in &free {
            let delta = target[i] - x[i];
            if target[i] < lo[i] && delta < 0.0 {
                let a = (lo[i] - x[i]) / delta;
                if a < alpha {
                    alpha = a;
                    block = Some((i, Bound::Lower));
                }
            } else if target[i] > hi[i] && delta > 0.0 {
                let a = (hi[i] - x[i]) / delta;
                if a < alpha {
                    alpha = a;
                    block = Some((i, Bound::Upper));
                }
            }
        }
        for &i in &free {
            x[i] = (x[i] + alpha * (target[i] - x[i])).clamp(lo[i], hi[i]);
        }
        if let Some((i, b)) = block {
            x[i] = if b == Bound::Lower { lo[i] } else { hi[i] };
            state[i] = b;
            continue;
        }
        // Release the active bound with the most negative multiplier.
        let g = gradient(c, &x);
        let mut worst = None;
        let mut worst_val = 0.0;
        for i in 0..d {
            if lo[i] == hi[i] {
                continue;
            }
            let lambda = match state[i] {
                Bound::Lower => g[i],
                Bound::Upper => -g[i],
                Bound::Free => continue,
            };
            if lambda < worst_val {
                worst_val = lambda;
                worst = Some(i);
            }
        }
        match worst {
            Some(i) => state[i] = Bound::Free,
            None => {
                let kkt = kkt_residual(c, lo, hi, &x);
                return Ok(DominatingPoint {
                    point: x,
                    component_index,
                    piece: piece.clone(),
                    kkt_residual: kkt,
                });
            }
        }
    }
    Err(Error::SolverNonConvergence {
        iterations: max_iter,
        last: x,
    })
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Drops every point within `tol` (Euclidean) of an earlier kept point.
pub fn dedup_points(points: Vec<DominatingPoint>, tol: f64) -> Vec<DominatingPoint> {
    let mut kept: Vec<DominatingPoint> = Vec::with_capacity(points.len());
    for p in points {
        if !kept.iter().any(|q| dist_sq(&q.point, &p.point) <= tol * tol) {
            kept.push(p);
        }
    }
    kept
}

/// Per-component dominating sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominatingSets {
    pub sets: Vec<Vec<DominatingPoint>>,
    /// Some component kept only the `cap` densest points.
    pub truncated: bool,
    /// Pieces that missed the support entirely.
    pub dropped_pieces: usize,
    /// Components that had no piece and fell back to their mean.
    pub fallback_components: Vec<usize>,
}

impl DominatingSets {
    /// `{μ_i}` for every component.
    pub fn initial(gmm: &TruncatedGmm) -> Self {
        let sets = gmm
            .components()
            .iter()
            .enumerate()
            .map(|(i, c)| vec![mean_point(gmm, c, i)])
            .collect();
        Self {
            sets,
            truncated: false,
            dropped_pieces: 0,
            fallback_components: Vec::new(),
        }
    }

    pub fn total(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }
}

/// The component mean pulled into the support.
fn mean_point(gmm: &TruncatedGmm, c: &GaussComponent, i: usize) -> DominatingPoint {
    let s = gmm.support();
    let point = c
        .mean()
        .iter()
        .zip(s.lower.iter().zip(&s.upper))
        .map(|(m, (l, u))| m.clamp(*l, *u))
        .collect();
    DominatingPoint {
        point,
        component_index: i,
        piece: OrthantPiece {
            lower: s.lower.clone(),
            upper: s.upper.clone(),
        },
        kkt_residual: 0.0,
    }
}

fn solve_all(gmm: &TruncatedGmm, corners: &[Vec<f64>], cap: usize) -> Result<DominatingSets> {
    let pieces: Vec<OrthantPiece> = corners
        .iter()
        .filter_map(|c| OrthantPiece::clipped(c, gmm.support()))
        .collect();
    let dropped = corners.len() - pieces.len();
    let k = gmm.n_components();
    let jobs: Vec<(usize, usize)> = (0..k).flat_map(|i| (0..pieces.len()).map(move |j| (i, j))).collect();
    let solved: Vec<DominatingPoint> = jobs
        .par_iter()
        .map(|&(i, j)| {
            solve_piece(&gmm.components()[i], &pieces[j], i)
                .context(|| format!("component {i}, piece corner {:?}", pieces[j].lower))
        })
        .collect::<Result<_>>()?;
    let mut sets: Vec<Vec<DominatingPoint>> = vec![Vec::new(); k];
    for p in solved {
        sets[p.component_index].push(p);
    }
    let mut truncated = false;
    let mut fallback = Vec::new();
    for (i, set) in sets.iter_mut().enumerate() {
        set.sort_by(|a, b| lex_cmp(&a.piece.lower, &b.piece.lower));
        let mut pts = dedup_points(std::mem::take(set), DEDUP_TOL);
        if pts.len() > cap {
            truncated = true;
            let c = &gmm.components()[i];
            pts.sort_by(|a, b| {
                log_density_unchecked(&b.point, c)
                    .total_cmp(&log_density_unchecked(&a.point, c))
                    .then_with(|| lex_cmp(&a.piece.lower, &b.piece.lower))
            });
            pts.truncate(cap);
            pts.sort_by(|a, b| lex_cmp(&a.piece.lower, &b.piece.lower));
        }
        if pts.is_empty() {
            fallback.push(i);
            pts.push(mean_point(gmm, &gmm.components()[i], i));
        }
        *set = pts;
    }
    Ok(DominatingSets {
        sets,
        truncated,
        dropped_pieces: dropped,
        fallback_components: fallback,
    })
}

/// Dominating points of every component on `{x ≥ a}`, `a ∈ s1`.
/// An empty `s1` gives the initial sets `{μ_i}`.
pub fn inner_dominating(gmm: &TruncatedGmm, s1: &[Vec<f64>]) -> Result<DominatingSets> {
    if s1.is_empty() {
        return Ok(DominatingSets::initial(gmm));
    }
    solve_all(gmm, s1, usize::MAX)
}

/// Dominating points of every component on the outer pieces, keeping at
/// most `cap` per component. No pieces gives the initial sets `{μ_i}`.
pub fn outer_dominating(gmm: &TruncatedGmm, corners: &[Vec<f64>], cap: usize) -> Result<DominatingSets> {
    if corners.is_empty() {
        return Ok(DominatingSets::initial(gmm));
    }
    solve_all(gmm, corners, cap.max(1))
}
