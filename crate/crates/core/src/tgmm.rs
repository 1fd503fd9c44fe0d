//! Truncated Gaussian mixture models: density evaluation, EM fitting with
//! truncation-corrected M-step, BIC, sampling and data standardization.

use crate::error::{Error, Result, ResultExt};
use crate::gaussmath::{
    self, log_density_unchecked, sample_truncated_into, zero_mean_moments,
    GaussComponent, Rect,
};
use crate::rng::SeedStream;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// A mixture of Gaussians, each conditioned on the same rectangle `support`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedGmm {
    weights: Vec<f64>,
    components: Vec<GaussComponent>,
    support: Rect,
    norm_consts: Vec<f64>,
    // ln η_k − ln α_k, the per-component offset of the log-density.
    log_offsets: Vec<f64>,
}

impl TruncatedGmm {
    pub fn new(weights: Vec<f64>, components: Vec<GaussComponent>, support: Rect) -> Result<Self> {
        let k = weights.len();
        if k == 0 || components.len() != k {
            return Err(Error::InvalidArgument(format!(
                "{} weights for {} components",
                k,
                components.len()
            )));
        }
        let d = support.dim();
        for c in &components {
            if c.dim() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: c.dim(),
                });
            }
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::InvalidArgument("mixture weights must be positive".into()));
        }
        let total: f64 = weights.iter().sum();
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut norm_consts = Vec::with_capacity(k);
        for (i, c) in components.iter().enumerate() {
            let p = gaussmath::rect_prob(c, &support).context(|| format!("component {i}"))?;
            norm_consts.push(p);
        }
        let log_offsets = weights
            .iter()
            .zip(&norm_consts)
            .map(|(w, a)| w.ln() - a.ln())
            .collect();
        Ok(Self {
            weights,
            components,
            support,
            norm_consts,
            log_offsets,
        })
    }

    /// A single untruncated Gaussian.
    pub fn single(component: GaussComponent) -> Self {
        let d = component.dim();
        Self::new(vec![1.0], vec![component], Rect::unbounded(d)).expect("valid single model")
    }

    pub fn dim(&self) -> usize {
        self.support.dim()
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[GaussComponent] {
        &self.components
    }

    pub fn support(&self) -> &Rect {
        &self.support
    }

    pub fn norm_consts(&self) -> &[f64] {
        &self.norm_consts
    }

    /// The model of `D·X` for `D = diag(signs)`, signs in {+1, −1}.
    pub fn reflect(&self, signs: &[f64]) -> Result<Self> {
        let d = self.dim();
        if signs.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: signs.len(),
            });
        }
        let components = self
            .components
            .iter()
            .map(|c| {
                let mean = DVector::from_fn(d, |i, _| signs[i] * c.mean()[i]);
                let cov = DMatrix::from_fn(d, d, |i, j| signs[i] * signs[j] * c.cov()[(i, j)]);
                GaussComponent::new(mean, cov)
            })
            .collect::<Result<Vec<_>>>()?;
        let (lower, upper) = (0..d)
            .map(|i| {
                if signs[i] < 0.0 {
                    (-self.support.upper[i], -self.support.lower[i])
                } else {
                    (self.support.lower[i], self.support.upper[i])
                }
            })
            .unzip();
        let support = Rect { lower, upper };
        // Rectangle probabilities are invariant under reflection.
        Ok(Self {
            weights: self.weights.clone(),
            components,
            support,
            norm_consts: self.norm_consts.clone(),
            log_offsets: self.log_offsets.clone(),
        })
    }

    /// Maps a model fitted in standardized coordinates back to the original
    /// coordinates `x = shift + scale ⊙ z`.
    pub fn destandardize(&self, s: &AffineStandardizer) -> Result<Self> {
        let d = self.dim();
        if s.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: s.dim(),
            });
        }
        let components = self
            .components
            .iter()
            .map(|c| {
                let mean = DVector::from_fn(d, |i, _| s.shift[i] + s.scale[i] * c.mean()[i]);
                let cov = DMatrix::from_fn(d, d, |i, j| s.scale[i] * s.scale[j] * c.cov()[(i, j)]);
                GaussComponent::new(mean, cov)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.weights.clone(), components, s.invert_rect(&self.support))
    }

    fn log_density_row(&self, x: &[f64]) -> f64 {
        if !self.support.contains(x) {
            return f64::NEG_INFINITY;
        }
        log_sum_exp(
            self.components
                .iter()
                .zip(&self.log_offsets)
                .map(|(c, off)| off + log_density_unchecked(x, c)),
        )
    }
}

pub(crate) fn log_sum_exp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// log g(x); `-inf` outside the support.
pub fn gmm_log_density(x: &[f64], m: &TruncatedGmm) -> Result<f64> {
    if x.len() != m.dim() {
        return Err(Error::DimensionMismatch {
            expected: m.dim(),
            got: x.len(),
        });
    }
    Ok(m.log_density_row(x))
}

/// Row-major copy of an n×d data matrix.
struct Rows {
    data: Vec<f64>,
    d: usize,
}

impl Rows {
    fn new(y: &DMatrix<f64>) -> Self {
        let (n, d) = y.shape();
        let mut data = Vec::with_capacity(n * d);
        for r in 0..n {
            for c in 0..d {
                data.push(y[(r, c)]);
            }
        }
        Self { data, d }
    }

    fn len(&self) -> usize {
        self.data.len() / self.d.max(1)
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d)
    }
}

fn check_data(rows: &Rows, m: &TruncatedGmm) -> Result<()> {
    if rows.d != m.dim() {
        return Err(Error::DimensionMismatch {
            expected: m.dim(),
            got: rows.d,
        });
    }
    for (i, x) in rows.iter().enumerate() {
        if !m.support.contains(x) {
            return Err(Error::InvalidArgument(format!("row {i} lies outside the support")));
        }
    }
    Ok(())
}

/// E-step: responsibilities (n×K) and the log-likelihood.
fn e_step(rows: &Rows, m: &TruncatedGmm) -> Result<(DMatrix<f64>, f64)> {
    let n = rows.len();
    let k = m.n_components();
    let mut resp = DMatrix::zeros(n, k);
    let mut terms = vec![0.0; k];
    let mut ll = 0.0;
    let mut comp = 0.0;
    for (i, x) in rows.iter().enumerate() {
        let mut max = f64::NEG_INFINITY;
        for (j, (c, off)) in m.components.iter().zip(&m.log_offsets).enumerate() {
            terms[j] = off + log_density_unchecked(x, c);
            max = max.max(terms[j]);
        }
        if !max.is_finite() {
            return Err(Error::ResponsibilityUnderflow { row: i });
        }
        let s: f64 = terms.iter().map(|t| (t - max).exp()).sum();
        for j in 0..k {
            resp[(i, j)] = (terms[j] - max).exp() / s;
        }
        // Neumaier summation keeps the trace reproducible to the last bits.
        let v = max + s.ln();
        let t = ll + v;
        if ll.abs() >= v.abs() {
            comp += (ll - t) + v;
        } else {
            comp += (v - t) + ll;
        }
        ll = t;
    }
    Ok((resp, ll + comp))
}

/// Responsibilities ⟨z_kⁿ⟩, one row per observation.
pub fn responsibilities(y: &DMatrix<f64>, m: &TruncatedGmm) -> Result<DMatrix<f64>> {
    let rows = Rows::new(y);
    check_data(&rows, m)?;
    e_step(&rows, m).map(|(r, _)| r)
}

/// Truncated-data log-likelihood Σₙ log g(yⁿ).
pub fn loglik(y: &DMatrix<f64>, m: &TruncatedGmm) -> Result<f64> {
    let rows = Rows::new(y);
    check_data(&rows, m)?;
    e_step(&rows, m).map(|(_, ll)| ll)
}

struct Proposal {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covs: Vec<DMatrix<f64>>,
}

/// Truncation-corrected M-step: weights from mean responsibilities, means
/// shifted by the truncated first moment, covariances corrected by
/// Σ − 𝓜²; moments evaluated at the current parameters.
fn m_step(rows: &Rows, resp: &DMatrix<f64>, m: &TruncatedGmm) -> Result<Proposal> {
    let n = rows.len();
    let d = rows.d;
    let mut weights = Vec::new();
    let mut means = Vec::new();
    let mut covs = Vec::new();
    for (k, c) in m.components.iter().enumerate() {
        let col = resp.column(k);
        let nk: f64 = col.iter().sum();
        let eta = nk / n as f64;
        if !(eta >= 1e-8) {
            return Err(Error::DyingComponent {
                component: k,
                weight: eta,
            });
        }
        let mut ybar = DVector::zeros(d);
        for (i, x) in rows.iter().enumerate() {
            let r = col[i];
            for j in 0..d {
                ybar[j] += r * x[j];
            }
        }
        ybar /= nk;
        let (mean, cov) = if m.support.is_unbounded() {
            (ybar, None)
        } else {
            let rel = m.support.shifted(c.mean().as_slice());
            let (m1, m2) = zero_mean_moments(c.cov(), &rel.lower, &rel.upper).map_err(|e| {
                match e {
                    Error::VanishingMass { prob, .. } => Error::VanishingMass { component: k, prob },
                    other => other,
                }
            })?;
            (ybar - m1, Some(c.cov() - m2))
        };
        let mut s = DMatrix::zeros(d, d);
        let mut diff = vec![0.0; d];
        for (i, x) in rows.iter().enumerate() {
            let r = col[i];
            for j in 0..d {
                diff[j] = x[j] - mean[j];
            }
            for a in 0..d {
                let ra = r * diff[a];
                for b in a..d {
                    s[(a, b)] += ra * diff[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..a {
                s[(a, b)] = s[(b, a)];
            }
        }
        s /= nk;
        if let Some(h) = cov {
            s += h;
        }
        weights.push(eta);
        means.push(mean);
        covs.push(s);
    }
    Ok(Proposal {
        weights,
        means,
        covs,
    })
}

/// Convex combination `(1 − t)·current + t·proposal`, or `None` if any
/// covariance is not positive definite after regularization.
fn blend(m: &TruncatedGmm, p: &Proposal, t: f64) -> Option<TruncatedGmm> {
    let mut comps = Vec::with_capacity(p.weights.len());
    let mut weights = Vec::with_capacity(p.weights.len());
    for (k, c) in m.components.iter().enumerate() {
        let mean = c.mean() * (1.0 - t) + &p.means[k] * t;
        let cov = c.cov() * (1.0 - t) + &p.covs[k] * t;
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return None;
        }
        comps.push(GaussComponent::new_regularized(mean, cov).ok()?);
        weights.push(m.weights[k] * (1.0 - t) + p.weights[k] * t);
    }
    TruncatedGmm::new(weights, comps, m.support.clone()).ok()
}

struct EmState {
    model: TruncatedGmm,
    resp: DMatrix<f64>,
    loglik: f64,
}

const MAX_HALVINGS: usize = 12;

/// One EM iteration. The truncation-corrected update is a fixed-point
/// iteration rather than an exact maximization of the expected complete-data
/// log-likelihood, so the proposal is accepted only if the log-likelihood
/// does not drop; otherwise the step is halved toward the current
/// parameters. If no halving helps the current parameters are kept.
fn advance(rows: &Rows, state: &EmState) -> Result<EmState> {
    let proposal = m_step(rows, &state.resp, &state.model)?;
    let mut t = 1.0;
    for _ in 0..=MAX_HALVINGS {
        if let Some(model) = blend(&state.model, &proposal, t) {
            if let Ok((resp, ll)) = e_step(rows, &model) {
                if ll.is_finite() && ll >= state.loglik {
                    return Ok(EmState {
                        model,
                        resp,
                        loglik: ll,
                    });
                }
            }
        }
        t *= 0.5;
    }
    Ok(EmState {
        model: state.model.clone(),
        resp: state.resp.clone(),
        loglik: state.loglik,
    })
}

/// One EM iteration on `y` starting from `m`.
pub fn em_step(y: &DMatrix<f64>, m: &TruncatedGmm) -> Result<TruncatedGmm> {
    let rows = Rows::new(y);
    check_data(&rows, m)?;
    if rows.len() < m.n_components() {
        return Err(Error::InvalidArgument(format!(
            "{} observations for {} components",
            rows.len(),
            m.n_components()
        )));
    }
    let (resp, loglik) = e_step(&rows, m)?;
    let state = EmState {
        model: m.clone(),
        resp,
        loglik,
    };
    Ok(advance(&rows, &state)?.model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Stop when |Δ loglik| < tol·|loglik|.
    pub tol: f64,
    pub restarts: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-7,
            restarts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub bic: f64,
}

impl FitReport {
    pub fn final_loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace holds the initial value")
    }
}

/// Number of free parameters: (K − 1) weights, K·d means, K·d(d+1)/2
/// covariance entries. Truncation bounds are fixed, not estimated.
pub fn param_count(k: usize, d: usize) -> usize {
    (k - 1) + k * d + k * d * (d + 1) / 2
}

/// −2·loglik + p·ln n.
pub fn bic(m: &TruncatedGmm, y: &DMatrix<f64>) -> Result<f64> {
    let ll = loglik(y, m)?;
    Ok(bic_from_loglik(ll, m.n_components(), m.dim(), y.nrows()))
}

fn bic_from_loglik(ll: f64, k: usize, d: usize, n: usize) -> f64 {
    -2.0 * ll + param_count(k, d) as f64 * (n as f64).ln()
}

/// k-means++ seeding for the means, pooled covariance / K, uniform weights.
fn initialize(rows: &Rows, k: usize, support: &Rect, seed: SeedStream) -> Result<TruncatedGmm> {
    let n = rows.len();
    let d = rows.d;
    let mut rng = seed.rng();
    let mut centers: Vec<usize> = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = rows
        .iter()
        .map(|x| sq_dist(x, rows.row(centers[0])))
        .collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in dist.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(next);
        for (i, x) in rows.iter().enumerate() {
            dist[i] = dist[i].min(sq_dist(x, rows.row(next)));
        }
    }
    let mut mean = DVector::zeros(d);
    for x in rows.iter() {
        for j in 0..d {
            mean[j] += x[j];
        }
    }
    mean /= n as f64;
    let mut pooled = DMatrix::zeros(d, d);
    for x in rows.iter() {
        for a in 0..d {
            for b in 0..d {
                pooled[(a, b)] += (x[a] - mean[a]) * (x[b] - mean[b]);
            }
        }
    }
    pooled /= n as f64 * k as f64;
    let comps = centers
        .iter()
        .map(|&c| GaussComponent::new_regularized(DVector::from_column_slice(rows.row(c)), pooled.clone()))
        .collect::<Result<Vec<_>>>()?;
    TruncatedGmm::new(vec![1.0 / k as f64; k], comps, support.clone())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn fit_once(rows: &Rows, k: usize, support: &Rect, seed: SeedStream, opts: &FitOptions) -> Result<(TruncatedGmm, FitReport)> {
    let model = initialize(rows, k, support, seed)?;
    let (resp, loglik) = e_step(rows, &model)?;
    if !loglik.is_finite() {
        return Err(Error::NonFiniteLoglik { iteration: 0 });
    }
    let mut state = EmState {
        model,
        resp,
        loglik,
    };
    let mut trace = vec![loglik];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        let next = advance(rows, &state).context(|| format!("EM iteration {}", iterations + 1))?;
        iterations += 1;
        if !next.loglik.is_finite() {
            return Err(Error::NonFiniteLoglik { iteration: iterations });
        }
        let delta = (next.loglik - state.loglik).abs();
        trace.push(next.loglik);
        state = next;
        if delta < opts.tol * state.loglik.abs() {
            converged = true;
            break;
        }
    }
    let bic = bic_from_loglik(state.loglik, k, rows.d, rows.len());
    Ok((
        state.model,
        FitReport {
            loglik_trace: trace,
            iterations,
            converged,
            bic,
        },
    ))
}

/// Fits a K-component truncated GMM by EM, keeping the best of
/// `opts.restarts` seeded initializations.
pub fn fit(
    y: &DMatrix<f64>,
    k: usize,
    support: &Rect,
    init_seed: u64,
    opts: &FitOptions,
) -> Result<(TruncatedGmm, FitReport)> {
    let rows = Rows::new(y);
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if rows.d != support.dim() {
        return Err(Error::DimensionMismatch {
            expected: support.dim(),
            got: rows.d,
        });
    }
    if rows.len() < 10 * k {
        return Err(Error::InvalidArgument(format!(
            "need at least {} observations for K = {k}, got {}",
            10 * k,
            rows.len()
        )));
    }
    for (i, x) in rows.iter().enumerate() {
        if !support.contains(x) {
            return Err(Error::InvalidArgument(format!("row {i} lies outside the support")));
        }
    }
    let seeds = SeedStream::new(init_seed);
    let mut best: Option<(TruncatedGmm, FitReport)> = None;
    let mut first_err = None;
    for r in 0..opts.restarts.max(1) {
        match fit_once(&rows, k, support, seeds.child(r as u64), opts) {
            Ok((m, rep)) => {
                let better = best
                    .as_ref()
                    .is_none_or(|(_, b)| rep.final_loglik() > b.final_loglik());
                if better {
                    best = Some((m, rep));
                }
            }
            Err(e) => {
                first_err.get_or_insert(e.context(format!("restart {r}")));
            }
        }
    }
    best.ok_or_else(|| first_err.expect("at least one restart ran"))
}

/// Draws `n` rows: component ∝ η, then a rejection draw from that
/// truncated component.
pub fn gmm_sample<R: Rng + ?Sized>(n: usize, m: &TruncatedGmm, rng: &mut R) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample size must be at least 1".into()));
    }
    let sampler = MixtureSampler::new(m)?;
    let d = m.dim();
    let mut out = DMatrix::zeros(n, d);
    let mut row = vec![0.0; d];
    for i in 0..n {
        sampler.draw(rng, &mut row);
        for (j, v) in row.iter().enumerate() {
            out[(i, j)] = *v;
        }
    }
    Ok(out)
}

/// Reusable per-row sampler for a truncated mixture.
pub(crate) struct MixtureSampler<'a> {
    model: &'a TruncatedGmm,
    cumulative: Vec<f64>,
}

impl<'a> MixtureSampler<'a> {
    pub(crate) fn new(model: &'a TruncatedGmm) -> Result<Self> {
        for (k, p) in model.norm_consts.iter().enumerate() {
            if !(*p > 1e-8) {
                return Err(Error::DegenerateTruncation { prob: *p }.context(format!("component {k}")));
            }
        }
        let mut acc = 0.0;
        let cumulative = model
            .weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Ok(Self { model, cumulative })
    }

    pub(crate) fn draw<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) -> usize {
        let u: f64 = rng.random::<f64>() * self.cumulative.last().copied().unwrap_or(1.0);
        let k = self
            .cumulative
            .iter()
            .position(|c| u < *c)
            .unwrap_or(self.cumulative.len() - 1);
        sample_truncated_into(&self.model.components[k], &self.model.support, rng, out);
        k
    }
}

/// `z = (x − shift) / scale`, column by column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineStandardizer {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl AffineStandardizer {
    pub fn identity(d: usize) -> Self {
        Self {
            shift: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    pub fn new(shift: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if shift.len() != scale.len() {
            return Err(Error::DimensionMismatch {
                expected: shift.len(),
                got: scale.len(),
            });
        }
        if let Some(i) = scale.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::ZeroVariance { column: i });
        }
        Ok(Self { shift, scale })
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn apply_point(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn invert_point(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (m, s))| m + s * v)
            .collect()
    }

    pub fn apply(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| (y[(i, j)] - self.shift[j]) / self.scale[j])
    }

    pub fn invert(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| self.shift[j] + self.scale[j] * z[(i, j)])
    }

    pub fn apply_rect(&self, r: &Rect) -> Rect {
        Rect {
            lower: self.apply_point(&r.lower),
            upper: self.apply_point(&r.upper),
        }
    }

    pub fn invert_rect(&self, r: &Rect) -> Rect {
        Rect {
            lower: self.invert_point(&r.lower),
            upper: self.invert_point(&r.upper),
        }
    }
}

/// Centers each column on its mean and scales it by its (population)
/// standard deviation.
pub fn standardize(y: &DMatrix<f64>) -> Result<(DMatrix<f64>, AffineStandardizer)> {
    let (n, d) = y.shape();
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two rows to standardize".into()));
    }
    let mut shift = Vec::with_capacity(d);
    let mut scale = Vec::with_capacity(d);
    for j in 0..d {
        let col = y.column(j);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        if !(var > 0.0) || var.sqrt() <= 1e-12 * mean.abs().max(1e-300) {
            return Err(Error::ZeroVariance { column: j });
        }
        shift.push(mean);
        scale.push(var.sqrt());
    }
    let s = AffineStandardizer::new(shift, scale)?;
    Ok((s.apply(y), s))
}

/// On-disk model: parameters in standardized coordinates plus the map back
/// to data coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub d: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub support: Rect,
    pub weights: Vec<f64>,
    pub components: Vec<ComponentDocument>,
    pub standardizer: AffineStandardizer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentDocument {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

impl ModelDocument {
    pub fn from_model(m: &TruncatedGmm, standardizer: &AffineStandardizer) -> Self {
        let d = m.dim();
        Self {
            d,
            k: m.n_components(),
            support: m.support.clone(),
            weights: m.weights.clone(),
            components: m
                .components
                .iter()
                .map(|c| ComponentDocument {
                    mean: c.mean().iter().copied().collect(),
                    cov: (0..d).map(|i| (0..d).map(|j| c.cov()[(i, j)]).collect()).collect(),
                })
                .collect(),
            standardizer: standardizer.clone(),
        }
    }

    pub fn to_model(&self) -> Result<(TruncatedGmm, AffineStandardizer)> {
        let d = self.d;
        if self.k != self.components.len() || self.k != self.weights.len() {
            return Err(Error::InvalidArgument(format!(
                "K = {} but {} components and {} weights",
                self.k,
                self.components.len(),
                self.weights.len()
            )));
        }
        let support = Rect::new(self.support.lower.clone(), self.support.upper.clone())?;
        let comps = self
            .components
            .iter()
            .map(|c| {
                if c.mean.len() != d || c.cov.len() != d || c.cov.iter().any(|r| r.len() != d) {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: c.mean.len(),
                    });
                }
                GaussComponent::new(
                    DVector::from_column_slice(&c.mean),
                    DMatrix::from_fn(d, d, |i, j| c.cov[i][j]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let s = AffineStandardizer::new(
            self.standardizer.shift.clone(),
            self.standardizer.scale.clone(),
        )?;
        if s.dim() != d || support.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: s.dim(),
            });
        }
        Ok((TruncatedGmm::new(self.weights.clone(), comps, support)?, s))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussmath::normal;
    use proptest::prelude::*;

    const INF: f64 = f64::INFINITY;

    fn comp1(mu: f64, var: f64) -> GaussComponent {
        GaussComponent::new(DVector::from_element(1, mu), DMatrix::from_element(1, 1, var)).unwrap()
    }

    fn comp2(mean: [f64; 2], cov: [f64; 4]) -> GaussComponent {
        GaussComponent::new(
            DVector::from_column_slice(&mean),
            DMatrix::from_row_slice(2, 2, &cov),
        )
        .unwrap()
    }

    #[test]
    fn log_density_examples() {
        let c = comp2([0.5, -0.5], [1.0, 0.2, 0.2, 2.0]);
        let m = TruncatedGmm::single(c.clone());
        let x = [0.1, 0.3];
        let a = gmm_log_density(&x, &m).unwrap();
        assert!((a - gaussmath::log_density(&x, &c).unwrap()).abs() < 1e-14);

        let half = Rect::new(vec![0.0], vec![INF]).unwrap();
        let t = TruncatedGmm::new(vec![1.0], vec![comp1(0.0, 1.0)], half).unwrap();
        assert_eq!(gmm_log_density(&[-0.1], &t).unwrap(), f64::NEG_INFINITY);

        let m2 = TruncatedGmm::new(
            vec![0.5, 0.5],
            vec![comp1(-1.0, 1.0), comp1(1.0, 1.0)],
            Rect::unbounded(1),
        )
        .unwrap();
        let oracle = normal::pdf(1.0).ln();
        assert!((gmm_log_density(&[0.0], &m2).unwrap() - oracle).abs() < 1e-14);
    }

    #[test]
    fn responsibilities_examples() {
        let y = DMatrix::from_column_slice(3, 1, &[-1.0, 0.0, 2.0]);
        let single = TruncatedGmm::single(comp1(0.0, 1.0));
        assert!(responsibilities(&y, &single).unwrap().iter().all(|&v| (v - 1.0).abs() < 1e-15));

        let sym = TruncatedGmm::new(
            vec![0.5, 0.5],
            vec![comp1(-1.0, 1.0), comp1(1.0, 1.0)],
            Rect::unbounded(1),
        )
        .unwrap();
        let r = responsibilities(&DMatrix::from_element(1, 1, 0.0), &sym).unwrap();
        assert!((r[(0, 0)] - 0.5).abs() < 1e-15);

        // Three truncated components, composed by hand.
        let support = Rect::new(vec![-1.0], vec![3.0]).unwrap();
        let w = [0.2, 0.5, 0.3];
        let cs = [comp1(0.0, 1.0), comp1(1.0, 0.5), comp1(2.5, 2.0)];
        let m = TruncatedGmm::new(w.to_vec(), cs.to_vec(), support).unwrap();
        let x = 0.7;
        let g: Vec<f64> = cs
            .iter()
            .zip(&w)
            .map(|(c, wk)| {
                let mu = c.mean()[0];
                let s = c.cov()[(0, 0)].sqrt();
                let z = normal::cdf((3.0 - mu) / s) - normal::cdf((-1.0 - mu) / s);
                wk * normal::pdf((x - mu) / s) / s / z
            })
            .collect();
        let total: f64 = g.iter().sum();
        let r = responsibilities(&DMatrix::from_element(1, 1, x), &m).unwrap();
        for k in 0..3 {
            assert!((r[(0, k)] - g[k] / total).abs() < 1e-12);
        }
        assert!((r.row(0).sum() - 1.0).abs() < 1e-12);
    }

    fn biased_cov(y: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let n = y.nrows() as f64;
        let mean = DVector::from_fn(y.ncols(), |j, _| y.column(j).mean());
        let mut cov = DMatrix::zeros(y.ncols(), y.ncols());
        for r in 0..y.nrows() {
            let d = y.row(r).transpose() - &mean;
            cov += &d * d.transpose();
        }
        (mean, cov / n)
    }

    #[test]
    fn unbounded_single_component_step_is_sample_moments() {
        let c = comp2([0.3, -0.2], [1.0, 0.5, 0.5, 1.5]);
        let y = gaussmath::sample(500, &c, &mut SeedStream::new(2).rng()).unwrap();
        let start = TruncatedGmm::single(comp2([0.0, 0.0], [1.0, 0.0, 0.0, 1.0]));
        let next = em_step(&y, &start).unwrap();
        let (mean, cov) = biased_cov(&y);
        assert!((next.components()[0].mean() - mean).amax() < 1e-12);
        assert!((next.components()[0].cov() - cov).amax() < 1e-12);
    }

    /// Plain (untruncated) GMM M-step written independently of `m_step`.
    fn ordinary_m_step(y: &DMatrix<f64>, m: &TruncatedGmm) -> Vec<(f64, DVector<f64>, DMatrix<f64>)> {
        let n = y.nrows();
        let k = m.n_components();
        let mut dens = DMatrix::zeros(n, k);
        for i in 0..n {
            let x: Vec<f64> = y.row(i).iter().copied().collect();
            for j in 0..k {
                dens[(i, j)] = m.weights()[j] * gaussmath::log_density(&x, &m.components()[j]).unwrap().exp();
            }
        }
        (0..k)
            .map(|j| {
                let r: Vec<f64> = (0..n).map(|i| dens[(i, j)] / dens.row(i).sum()).collect();
                let nk: f64 = r.iter().sum();
                let mut mean = DVector::zeros(y.ncols());
                for i in 0..n {
                    mean += y.row(i).transpose() * r[i];
                }
                mean /= nk;
                let mut cov = DMatrix::zeros(y.ncols(), y.ncols());
                for i in 0..n {
                    let d = y.row(i).transpose() - &mean;
                    cov += &d * d.transpose() * r[i];
                }
                (nk / n as f64, mean, cov / nk)
            })
            .collect()
    }

    #[test]
    fn unbounded_step_matches_ordinary_gmm() {
        let truth = TruncatedGmm::new(
            vec![0.4, 0.6],
            vec![comp2([-2.0, 0.0], [1.0, 0.3, 0.3, 1.0]), comp2([2.0, 1.0], [0.5, 0.0, 0.0, 2.0])],
            Rect::unbounded(2),
        )
        .unwrap();
        let y = gmm_sample(400, &truth, &mut SeedStream::new(4).rng()).unwrap();
        let start = TruncatedGmm::new(
            vec![0.5, 0.5],
            vec![comp2([-1.0, 0.5], [2.0, 0.0, 0.0, 2.0]), comp2([1.0, 0.0], [2.0, 0.0, 0.0, 2.0])],
            Rect::unbounded(2),
        )
        .unwrap();
        let next = em_step(&y, &start).unwrap();
        for (j, (w, mean, cov)) in ordinary_m_step(&y, &start).into_iter().enumerate() {
            assert!((next.weights()[j] - w).abs() < 1e-8);
            assert!((next.components()[j].mean() - mean).amax() < 1e-8);
            assert!((next.components()[j].cov() - cov).amax() < 1e-8);
        }
    }

    #[test]
    fn truncated_fixed_point_matches_grid_search_mle() {
        let support = Rect::new(vec![0.0], vec![INF]).unwrap();
        let truth = TruncatedGmm::new(vec![1.0], vec![comp1(0.5, 1.0)], support.clone()).unwrap();
        let y = gmm_sample(3000, &truth, &mut SeedStream::new(8).rng()).unwrap();
        let opts = FitOptions {
            max_iter: 2000,
            tol: 1e-12,
            restarts: 1,
        };
        let (m, rep) = fit(&y, 1, &support, 3, &opts).unwrap();
        assert_trace_monotone(&rep.loglik_trace);
        let mu = m.components()[0].mean()[0];
        let sigma = m.components()[0].cov()[(0, 0)].sqrt();

        // Independent oracle: grid search of the truncated-normal likelihood.
        let data: Vec<f64> = y.iter().copied().collect();
        let ll = |mu: f64, s: f64| -> f64 {
            let z = normal::sf(-mu / s);
            data.iter()
                .map(|x| -0.5 * ((x - mu) / s).powi(2) - s.ln() - z.ln())
                .sum()
        };
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        let mut g_mu = -1.0;
        while g_mu <= 2.0 {
            let mut g_s = 0.5;
            while g_s <= 2.0 {
                let v = ll(g_mu, g_s);
                if v > best.0 {
                    best = (v, g_mu, g_s);
                }
                g_s += 0.01;
            }
            g_mu += 0.01;
        }
        assert!((mu - best.1).abs() <= 0.011, "mu {mu} vs grid {}", best.1);
        assert!((sigma - best.2).abs() <= 0.011, "sigma {sigma} vs grid {}", best.2);
    }

    fn assert_trace_monotone(trace: &[f64]) {
        for w in trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "loglik decreased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn loop_contract_with_zero_tolerance() {
        let c = comp2([0.0, 0.0], [1.0, 0.0, 0.0, 1.0]);
        let y = gaussmath::sample(200, &c, &mut SeedStream::new(1).rng()).unwrap();
        let opts = FitOptions {
            max_iter: 5,
            tol: 0.0,
            restarts: 1,
        };
        let (_, rep) = fit(&y, 2, &Rect::unbounded(2), 1, &opts).unwrap();
        assert_eq!(rep.iterations, 5);
        assert_eq!(rep.loglik_trace.len(), 6);
        assert_trace_monotone(&rep.loglik_trace);
    }

    #[test]
    fn fit_is_deterministic() {
        let c = comp2([1.0, 2.0], [1.0, 0.4, 0.4, 1.0]);
        let support = Rect::new(vec![0.0, 0.0], vec![INF, INF]).unwrap();
        let y = gaussmath::sample_truncated(600, &c, &support, &mut SeedStream::new(5).rng()).unwrap();
        let opts = FitOptions {
            max_iter: 50,
            ..FitOptions::default()
        };
        let a = fit(&y, 2, &support, 9, &opts).unwrap();
        let b = fit(&y, 2, &support, 9, &opts).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_trace_monotone(&a.1.loglik_trace);
    }

    #[test]
    fn bic_parameter_counts() {
        assert_eq!(param_count(1, 1), 2);
        assert_eq!(param_count(9, 3), 89);
    }

    #[test]
    fn fit_rejects_bad_inputs() {
        let y = DMatrix::from_element(15, 1, 1.0);
        let support = Rect::unbounded(1);
        assert!(fit(&y, 2, &support, 0, &FitOptions::default()).is_err());
        let outside = DMatrix::from_fn(30, 1, |i, _| i as f64 - 1.0);
        let half = Rect::new(vec![0.0], vec![INF]).unwrap();
        assert!(fit(&outside, 1, &half, 0, &FitOptions::default()).is_err());
    }

    #[test]
    fn sampling_frequencies_and_support() {
        let support = Rect::new(vec![0.0], vec![4.0]).unwrap();
        let m = TruncatedGmm::new(
            vec![0.3, 0.7],
            vec![comp1(0.5, 1.0), comp1(3.0, 0.5)],
            support.clone(),
        )
        .unwrap();
        let sampler = MixtureSampler::new(&m).unwrap();
        let mut rng = SeedStream::new(12).rng();
        let n = 100_000;
        let mut counts = [0usize; 2];
        let mut row = [0.0];
        let mut sum = 0.0;
        for _ in 0..n {
            counts[sampler.draw(&mut rng, &mut row)] += 1;
            assert!(support.contains(&row));
            sum += row[0];
        }
        for k in 0..2 {
            let p = m.weights()[k];
            let sd = (p * (1.0 - p) / n as f64).sqrt();
            assert!((counts[k] as f64 / n as f64 - p).abs() < 3.0 * sd);
        }
        // Mixture of truncated first moments.
        let mut mean = 0.0;
        let mut second = 0.0;
        for k in 0..2 {
            let (m1, m2) = gaussmath::trunc_moments(&m.components()[k], &support).unwrap();
            mean += m.weights()[k] * m1[0];
            second += m.weights()[k] * m2[(0, 0)];
        }
        let se = ((second - mean * mean) / n as f64).sqrt();
        assert!((sum / n as f64 - mean).abs() < 3.0 * se);
    }

    #[test]
    fn standardize_examples() {
        let y = DMatrix::from_fn(1000, 2, |i, j| (i as f64 * 0.37 + j as f64).sin() * 3.0 + 10.0 * j as f64);
        let (z, s) = standardize(&y).unwrap();
        for j in 0..2 {
            let col = z.column(j);
            let mean = col.mean();
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 1000.0).sqrt();
            assert!(mean.abs() < 1e-10 && (sd - 1.0).abs() < 1e-10);
        }
        assert!((s.invert(&z) - &y).amax() < 1e-12);
        let (_, again) = standardize(&z).unwrap();
        assert!(again.shift.iter().all(|v| v.abs() < 1e-10));
        assert!(again.scale.iter().all(|v| (v - 1.0).abs() < 1e-10));

        let constant = DMatrix::from_fn(10, 2, |i, j| if j == 1 { 4.0 } else { i as f64 });
        assert!(matches!(standardize(&constant), Err(Error::ZeroVariance { column: 1 })));
    }

    #[test]
    fn reflection_preserves_density() {
        let support = Rect::new(vec![0.0, -1.0], vec![INF, 2.0]).unwrap();
        let m = TruncatedGmm::new(
            vec![0.4, 0.6],
            vec![comp2([1.0, 0.0], [1.0, 0.3, 0.3, 0.7]), comp2([0.2, 1.0], [0.6, -0.2, -0.2, 1.0])],
            support,
        )
        .unwrap();
        let signs = [-1.0, 1.0];
        let r = m.reflect(&signs).unwrap();
        for x in [[0.5, 0.5], [2.0, -0.9], [0.1, 1.9]] {
            let rx = [-x[0], x[1]];
            let a = gmm_log_density(&x, &m).unwrap();
            let b = gmm_log_density(&rx, &r).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn model_document_round_trip() {
        let support = Rect::new(vec![0.0, f64::NEG_INFINITY], vec![INF, 2.0]).unwrap();
        let m = TruncatedGmm::new(
            vec![0.4, 0.6],
            vec![comp2([1.0, 0.0], [1.0, 0.3, 0.3, 0.7]), comp2([0.2, 1.0], [0.6, -0.2, -0.2, 1.0])],
            support,
        )
        .unwrap();
        let s = AffineStandardizer::new(vec![1.0, -2.0], vec![0.5, 3.0]).unwrap();
        let doc = ModelDocument::from_model(&m, &s);
        let json = serde_json::to_string(&doc).unwrap();
        assert!(json.contains("\"K\":2") && json.contains("\"inf\"") && json.contains("\"-inf\""));
        let back: ModelDocument = serde_json::from_str(&json).unwrap();
        let (m2, s2) = back.to_model().unwrap();
        assert_eq!(m2, m);
        assert_eq!(s2, s);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn responsibilities_rows_sum_to_one(xs in proptest::collection::vec(0.0f64..5.0, 1..40)) {
            let support = Rect::new(vec![0.0], vec![INF]).unwrap();
            let m = TruncatedGmm::new(
                vec![0.2, 0.3, 0.5],
                vec![comp1(0.0, 1.0), comp1(2.0, 0.3), comp1(4.0, 2.0)],
                support,
            ).unwrap();
            let y = DMatrix::from_column_slice(xs.len(), 1, &xs);
            let r = responsibilities(&y, &m).unwrap();
            for i in 0..xs.len() {
                prop_assert!((r.row(i).sum() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn standardizer_round_trip(vals in proptest::collection::vec(-1e3f64..1e3, 3), scales in proptest::collection::vec(0.01f64..100.0, 3)) {
            let s = AffineStandardizer::new(vals.clone(), scales).unwrap();
            let x = [1.5, -20.0, 300.0];
            let back = s.invert_point(&s.apply_point(&x));
            for (a, b) in back.iter().zip(&x) {
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}
