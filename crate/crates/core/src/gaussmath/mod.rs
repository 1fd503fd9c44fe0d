//! Dense multivariate Gaussian primitives: densities, sampling, rectangle
//! probabilities and moments of rectangle-truncated Gaussians.

mod moments;
pub mod mvn;
pub mod normal;

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use moments::zero_mean_moments;

/// Rectangle probabilities are only trusted up to this dimension.
pub const MAX_RECT_DIM: usize = 10;

/// An axis-aligned hyper-rectangle `[lower, upper]`; bounds may be infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    #[serde(with = "crate::serde_ext::ext_vec")]
    pub lower: Vec<f64>,
    #[serde(with = "crate::serde_ext::ext_vec")]
    pub upper: Vec<f64>,
}

impl Rect {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if l.is_nan() || u.is_nan() || l >= u {
                return Err(Error::InvalidArgument(format!(
                    "rectangle bound {i}: need lower < upper, got [{l}, {u}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn unbounded(d: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; d],
            upper: vec![f64::INFINITY; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn is_unbounded(&self) -> bool {
        self.lower.iter().all(|&l| l == f64::NEG_INFINITY)
            && self.upper.iter().all(|&u| u == f64::INFINITY)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    /// Returns `self` with limits expressed relative to `center`.
    pub fn shifted(&self, center: &[f64]) -> Rect {
        Rect {
            lower: self.lower.iter().zip(center).map(|(l, c)| l - c).collect(),
            upper: self.upper.iter().zip(center).map(|(u, c)| u - c).collect(),
        }
    }
}

/// A Gaussian N(mean, cov) with its lower Cholesky factor cached.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussComponent {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: DMatrix<f64>,
    half_log_det: f64,
}

impl GaussComponent {
    /// Symmetrizes `cov` and factors it; fails if it is not positive definite.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: cov.nrows(),
            });
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite Gaussian parameters".into()));
        }
        let cov = (&cov + cov.transpose()) * 0.5;
        let chol = nalgebra::Cholesky::new(cov.clone())
            .ok_or(Error::NotPositiveDefinite)?
            .l();
        if chol.diagonal().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::NotPositiveDefinite);
        }
        let half_log_det = chol.diagonal().iter().map(|v| v.ln()).sum();
        Ok(Self {
            mean,
            cov,
            chol,
            half_log_det,
        })
    }

    /// Like [`GaussComponent::new`], but adds `1e-8·trace/d` to the diagonal
    /// (repeatedly, growing tenfold) until the factorization succeeds.
    pub fn new_regularized(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        match Self::new(mean.clone(), cov.clone()) {
            Ok(c) => Ok(c),
            Err(Error::NotPositiveDefinite) => {
                let d = mean.len();
                let base = (cov.trace() / d as f64).abs().max(f64::MIN_POSITIVE);
                let mut jitter = 1e-8 * base;
                for _ in 0..8 {
                    let reg = &cov + DMatrix::identity(d, d) * jitter;
                    if let Ok(c) = Self::new(mean.clone(), reg) {
                        return Ok(c);
                    }
                    jitter *= 10.0;
                }
                Err(Error::NotPositiveDefinite)
            }
            Err(e) => Err(e),
        }
    }

    pub fn standard(d: usize) -> Self {
        Self::new(DVector::zeros(d), DMatrix::identity(d, d)).expect("identity is SPD")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    /// Same covariance, different mean.
    pub fn with_mean(&self, mean: DVector<f64>) -> Self {
        assert_eq!(mean.len(), self.dim());
        Self {
            mean,
            cov: self.cov.clone(),
            chol: self.chol.clone(),
            half_log_det: self.half_log_det,
        }
    }

    /// Squared Mahalanobis distance of `x` from the mean via forward
    /// substitution with the Cholesky factor.
    pub fn mahalanobis_sq(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut z = [0.0f64; MAX_RECT_DIM + 6];
        let mut heap;
        let z: &mut [f64] = if d <= z.len() {
            &mut z[..d]
        } else {
            heap = vec![0.0; d];
            &mut heap
        };
        let mut q = 0.0;
        for i in 0..d {
            let mut s = x[i] - self.mean[i];
            for j in 0..i {
                s -= self.chol[(i, j)] * z[j];
            }
            z[i] = s / self.chol[(i, i)];
            q += z[i] * z[i];
        }
        q
    }

    /// Density of `x` relative to the peak density (log φ(x) − log φ(μ)).
    pub fn log_kernel(&self, x: &[f64]) -> f64 {
        -0.5 * self.mahalanobis_sq(x)
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

/// log φ(x; μ, Σ).
pub fn log_density(x: &[f64], c: &GaussComponent) -> Result<f64> {
    check_dim(c.dim(), x.len())?;
    Ok(log_density_unchecked(x, c))
}

#[inline]
pub(crate) fn log_density_unchecked(x: &[f64], c: &GaussComponent) -> f64 {
    -0.5 * c.mahalanobis_sq(x) - c.half_log_det - c.dim() as f64 * normal::LN_SQRT_2PI
}

fn draw_one<R: Rng + ?Sized>(c: &GaussComponent, rng: &mut R, out: &mut [f64]) {
    for zi in out.iter_mut() {
        *zi = rng.sample(StandardNormal);
    }
    // In place from the last row: row i only reads z_0..=z_i.
    for i in (0..c.dim()).rev() {
        let mut s = c.mean[i];
        for j in 0..=i {
            s += c.chol[(i, j)] * out[j];
        }
        out[i] = s;
    }
}

/// `n` i.i.d. draws μ + L·z, one per row.
pub fn sample<R: Rng + ?Sized>(n: usize, c: &GaussComponent, rng: &mut R) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample size must be at least 1".into()));
    }
    let d = c.dim();
    let mut out = DMatrix::zeros(n, d);
    let mut row = vec![0.0; d];
    for r in 0..n {
        draw_one(c, rng, &mut row);
        for (j, v) in row.iter().enumerate() {
            out[(r, j)] = *v;
        }
    }
    Ok(out)
}

fn check_rect(c: &GaussComponent, r: &Rect) -> Result<()> {
    check_dim(c.dim(), r.dim())?;
    if c.dim() > MAX_RECT_DIM {
        return Err(Error::Unsupported(format!(
            "rectangle probabilities above {MAX_RECT_DIM} dimensions"
        )));
    }
    Ok(())
}

/// Unchecked P(X ∈ r); may return 0.
pub(crate) fn rect_prob_raw(c: &GaussComponent, r: &Rect) -> f64 {
    if r.is_unbounded() {
        return 1.0;
    }
    let rel = r.shifted(c.mean.as_slice());
    mvn::prob(&rel.lower, &rel.upper, &c.cov)
}

/// P(lower ≤ X ≤ upper) for X ~ N(μ, Σ).
pub fn rect_prob(c: &GaussComponent, r: &Rect) -> Result<f64> {
    check_rect(c, r)?;
    let p = rect_prob_raw(c, r);
    if !(p >= 1e-300) {
        return Err(Error::ZeroRegion { prob: p });
    }
    Ok(p.min(1.0))
}

/// First moment vector and second (raw) moment matrix of N(μ, Σ) truncated
/// to `r`.
pub fn trunc_moments(c: &GaussComponent, r: &Rect) -> Result<(DVector<f64>, DMatrix<f64>)> {
    check_rect(c, r)?;
    let rel = r.shifted(c.mean.as_slice());
    let (m1, m2) = zero_mean_moments(&c.cov, &rel.lower, &rel.upper)?;
    let mu = &c.mean;
    let raw2 = &m2 + mu * m1.transpose() + &m1 * mu.transpose() + mu * mu.transpose();
    let raw2 = (&raw2 + raw2.transpose()) * 0.5;
    Ok((mu + m1, raw2))
}

/// Rejection sampler for N(μ, Σ) conditioned on `r`.
pub fn sample_truncated<R: Rng + ?Sized>(
    n: usize,
    c: &GaussComponent,
    r: &Rect,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample size must be at least 1".into()));
    }
    check_rect(c, r)?;
    if r.is_unbounded() {
        return sample(n, c, rng);
    }
    let p = rect_prob_raw(c, r);
    if !(p > 1e-8) {
        return Err(Error::DegenerateTruncation { prob: p });
    }
    let d = c.dim();
    let mut out = DMatrix::zeros(n, d);
    let mut row = vec![0.0; d];
    for i in 0..n {
        sample_truncated_into(c, r, rng, &mut row);
        for (j, v) in row.iter().enumerate() {
            out[(i, j)] = *v;
        }
    }
    Ok(out)
}

/// One rejection draw into `out`. Callers must have checked that the
/// acceptance probability is not degenerate.
pub(crate) fn sample_truncated_into<R: Rng + ?Sized>(
    c: &GaussComponent,
    r: &Rect,
    rng: &mut R,
    out: &mut [f64],
) {
    loop {
        draw_one(c, rng, out);
        if r.contains(out) {
            return;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use proptest::prelude::*;

    fn comp(mean: &[f64], cov: &[f64]) -> GaussComponent {
        let d = mean.len();
        GaussComponent::new(
            DVector::from_column_slice(mean),
            DMatrix::from_row_slice(d, d, cov),
        )
        .unwrap()
    }

    const INF: f64 = f64::INFINITY;

    #[test]
    fn log_density_examples() {
        let c = GaussComponent::standard(1);
        assert!((log_density(&[0.0], &c).unwrap() + 0.918_938_53).abs() < 1e-8);
        let c3 = GaussComponent::standard(3);
        let expected = -1.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((log_density(&[0.0; 3], &c3).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn log_density_bivariate_by_hand() {
        // Σ = [[2,1],[1,2]]: det 3, Σ⁻¹ = [[2,−1],[−1,2]]/3, q(1,1) = 2/3.
        let c = comp(&[0.0, 0.0], &[2.0, 1.0, 1.0, 2.0]);
        let q = (2.0 * 1.0 - 1.0 - 1.0 + 2.0) / 3.0;
        let oracle = -0.5 * q - 0.5 * 3f64.ln() - (2.0 * std::f64::consts::PI).ln();
        assert!((log_density(&[1.0, 1.0], &c).unwrap() - oracle).abs() < 1e-13);
    }

    #[test]
    fn log_density_rejects_wrong_dimension() {
        let c = GaussComponent::standard(2);
        assert!(matches!(
            log_density(&[0.0], &c),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn sample_moments_and_determinism() {
        let mut rng = SeedStream::new(1).rng();
        let s = sample(100_000, &GaussComponent::standard(2), &mut rng).unwrap();
        for j in 0..2 {
            assert!(s.column(j).mean().abs() < 0.02);
        }
        let c = comp(&[0.0, 0.0], &[2.0, 1.0, 1.0, 2.0]);
        let a = sample(100_000, &c, &mut SeedStream::new(3).rng()).unwrap();
        let b = sample(100_000, &c, &mut SeedStream::new(3).rng()).unwrap();
        assert_eq!(a, b);
        let n = a.nrows() as f64;
        let means = [a.column(0).mean(), a.column(1).mean()];
        for i in 0..2 {
            for j in 0..2 {
                let cov = a
                    .column(i)
                    .iter()
                    .zip(a.column(j).iter())
                    .map(|(x, y)| (x - means[i]) * (y - means[j]))
                    .sum::<f64>()
                    / n;
                assert!((cov - c.cov()[(i, j)]).abs() < 0.05, "({i},{j}) {cov}");
            }
        }
    }

    #[test]
    fn rect_prob_examples() {
        let c1 = GaussComponent::standard(1);
        let half = Rect::new(vec![0.0], vec![INF]).unwrap();
        assert!((rect_prob(&c1, &half).unwrap() - 0.5).abs() < 1e-15);
        let c2 = GaussComponent::standard(2);
        assert_eq!(rect_prob(&c2, &Rect::unbounded(2)).unwrap(), 1.0);
        let quad = Rect::new(vec![0.0; 2], vec![INF; 2]).unwrap();
        assert!((rect_prob(&c2, &quad).unwrap() - 0.25).abs() < 1e-14);
        let far = Rect::new(vec![60.0], vec![INF]).unwrap();
        assert!(matches!(rect_prob(&c1, &far), Err(Error::ZeroRegion { .. })));
    }

    #[test]
    fn half_normal_moments_are_exact() {
        let c = GaussComponent::standard(1);
        let r = Rect::new(vec![0.0], vec![INF]).unwrap();
        let (m1, m2) = trunc_moments(&c, &r).unwrap();
        assert!((m1[0] - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-10);
        assert!((m2[(0, 0)] - 1.0).abs() < 1e-10);
        for a in [0.1, 1.0, 3.0] {
            let sym = Rect::new(vec![-a], vec![a]).unwrap();
            assert!(trunc_moments(&c, &sym).unwrap().0[0].abs() < 1e-15);
        }
    }

    #[test]
    fn vanishing_mass_is_reported() {
        let c = GaussComponent::standard(2);
        let r = Rect::new(vec![50.0, 50.0], vec![INF, INF]).unwrap();
        assert!(trunc_moments(&c, &r).is_err());
    }

    #[test]
    fn truncated_sampling() {
        let c = GaussComponent::standard(1);
        let r = Rect::new(vec![0.0], vec![INF]).unwrap();
        let s = sample_truncated(100_000, &c, &r, &mut SeedStream::new(5).rng()).unwrap();
        assert!(s.iter().all(|&v| v >= 0.0));
        assert!((s.mean() - 0.797_88).abs() < 0.01);

        // Unbounded: identical stream to plain sampling.
        let c2 = comp(&[1.0, -1.0], &[1.0, 0.3, 0.3, 2.0]);
        let a = sample(50, &c2, &mut SeedStream::new(9).rng()).unwrap();
        let b = sample_truncated(50, &c2, &Rect::unbounded(2), &mut SeedStream::new(9).rng())
            .unwrap();
        assert_eq!(a, b);

        let bad = Rect::new(vec![8.0], vec![INF]).unwrap();
        assert!(matches!(
            sample_truncated(10, &c, &bad, &mut SeedStream::new(1).rng()),
            Err(Error::DegenerateTruncation { .. })
        ));
    }

    #[test]
    fn truncated_sample_mean_matches_moments_3d() {
        let c = comp(
            &[0.2, -0.1, 0.5],
            &[1.0, 0.4, 0.2, 0.4, 1.5, -0.3, 0.2, -0.3, 0.8],
        );
        let r = Rect::new(vec![0.0, -1.0, f64::NEG_INFINITY], vec![INF, 1.5, 1.0]).unwrap();
        let (m1, m2) = trunc_moments(&c, &r).unwrap();
        let n = 200_000;
        let s = sample_truncated(n, &c, &r, &mut SeedStream::new(11).rng()).unwrap();
        for j in 0..3 {
            let var = m2[(j, j)] - m1[j] * m1[j];
            let se = (var / n as f64).sqrt();
            let mean = s.column(j).mean();
            assert!((mean - m1[j]).abs() < 3.0 * se, "coord {j}: {mean} vs {}", m1[j]);
        }
    }

    #[test]
    fn truncated_density_integrates_to_one_2d() {
        let c = comp(&[0.3, -0.2], &[1.0, 0.6, 0.6, 1.3]);
        let r = Rect::new(vec![0.0, -1.0], vec![2.5, INF]).unwrap();
        let lp = rect_prob(&c, &r).unwrap().ln();
        let h = 0.01;
        let mut total = 0.0;
        let (x0, x1) = (0.0, 2.5);
        let (y0, y1) = (-1.0, 8.0);
        let nx = ((x1 - x0) / h) as usize;
        let ny = ((y1 - y0) / h) as usize;
        for i in 0..nx {
            for j in 0..ny {
                let x = [x0 + (i as f64 + 0.5) * h, y0 + (j as f64 + 0.5) * h];
                total += (log_density(&x, &c).unwrap() - lp).exp() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    fn spd(d: usize, seed: &[f64]) -> DMatrix<f64> {
        let a = DMatrix::from_fn(d, d, |i, j| seed[(i * d + j) % seed.len()]);
        &a * a.transpose() + DMatrix::identity(d, d) * 0.5
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn cholesky_round_trip(d in 1usize..6, vals in proptest::collection::vec(-2.0f64..2.0, 36)) {
            let cov = spd(d, &vals);
            let c = GaussComponent::new(DVector::zeros(d), cov.clone()).unwrap();
            let rec = c.chol() * c.chol().transpose();
            let err = (&rec - &cov).norm() / cov.norm();
            prop_assert!(err < 1e-10);
            prop_assert!(c.chol().diagonal().iter().all(|&v| v > 0.0));
        }

        #[test]
        fn unbounded_moments_are_raw_moments(
            d in 1usize..5,
            vals in proptest::collection::vec(-1.5f64..1.5, 25),
            mean in proptest::collection::vec(-3.0f64..3.0, 5),
        ) {
            let cov = spd(d, &vals);
            let mu = DVector::from_column_slice(&mean[..d]);
            let c = GaussComponent::new(mu.clone(), cov.clone()).unwrap();
            let (m1, m2) = trunc_moments(&c, &Rect::unbounded(d)).unwrap();
            prop_assert!((&m1 - &mu).amax() < 1e-10);
            let expected = c.cov() + &mu * mu.transpose();
            prop_assert!((&m2 - expected).amax() < 1e-10);
        }

        #[test]
        fn rect_prob_monotone_under_inclusion(
            d in 1usize..5,
            vals in proptest::collection::vec(-1.0f64..1.0, 25),
            lo in proptest::collection::vec(-2.0f64..1.0, 4),
            width in proptest::collection::vec(0.1f64..3.0, 4),
            grow in proptest::collection::vec(0.0f64..1.0, 8),
        ) {
            let cov = spd(d, &vals);
            let c = GaussComponent::new(DVector::zeros(d), cov).unwrap();
            let small = Rect::new(
                lo[..d].to_vec(),
                lo[..d].iter().zip(&width).map(|(l, w)| l + w).collect(),
            ).unwrap();
            let big = Rect::new(
                small.lower.iter().zip(&grow).map(|(l, g)| l - g).collect(),
                small.upper.iter().zip(&grow[4..]).map(|(u, g)| u + g).collect(),
            ).unwrap();
            let p1 = rect_prob_raw(&c, &small);
            let p2 = rect_prob_raw(&c, &big);
            prop_assert!(p1 <= p2 + 1e-6, "{} > {}", p1, p2);
        }

        #[test]
        fn truncated_second_moment_dominates(
            d in 1usize..4,
            vals in proptest::collection::vec(-1.0f64..1.0, 16),
            lo in proptest::collection::vec(-1.5f64..0.5, 3),
        ) {
            let cov = spd(d, &vals);
            let c = GaussComponent::new(DVector::zeros(d), cov).unwrap();
            let r = Rect::new(lo[..d].to_vec(), vec![INF; d]).unwrap();
            let (m1, m2) = trunc_moments(&c, &r).unwrap();
            let centered = &m2 - &m1 * m1.transpose();
            let eig = centered.symmetric_eigenvalues();
            prop_assert!(eig.min() > -1e-8, "{:?}", eig);
        }
    }
}
