//! Mixture importance sampling built from dominating points, the iterative
//! set-learning procedure, and the IS / crude Monte Carlo estimators.

use crate::dompoints::{self, DominatingSets, DEFAULT_DOMINATING_CAP};
use crate::error::{Error, Result, ResultExt};
use crate::gaussmath::{self, log_density_unchecked, sample_truncated_into, GaussComponent};
use crate::monoset::{DirectionMask, FrontierStore, Label, DEFAULT_PIECE_CAP};
use crate::rng::{shard_sizes, SeedStream};
use crate::tgmm::{log_sum_exp, MixtureSampler, TruncatedGmm};
use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// A crash indicator on model coordinates. Must be pure: it is evaluated
/// concurrently.
pub trait Indicator: Sync {
    fn eval(&self, x: &[f64]) -> Result<bool>;
}

impl<F: Fn(&[f64]) -> bool + Sync> Indicator for F {
    fn eval(&self, x: &[f64]) -> Result<bool> {
        Ok(self(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartKind {
    Inner,
    Outer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsPart {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub component_index: usize,
    pub kind: PartKind,
}

/// `(1 − α)·Σ_j w_j · φ(x; a_j, Σ_{i(j)}) / P_{a_j}(support) + α·g(x)`: every
/// part is a base component shifted to a dominating point and truncated to
/// the support; `α` is the defensive share of the base model `g` (0 unless
/// set with [`MixtureISDistribution::with_defensive`]).
#[derive(Debug, Clone)]
pub struct MixtureISDistribution {
    parts: Vec<IsPart>,
    shifted: Vec<GaussComponent>,
    log_offsets: Vec<f64>,
    base: TruncatedGmm,
    rho: f64,
    defensive: f64,
}

impl MixtureISDistribution {
    pub fn parts(&self) -> &[IsPart] {
        &self.parts
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn base(&self) -> &TruncatedGmm {
        &self.base
    }

    pub fn defensive(&self) -> f64 {
        self.defensive
    }

    /// Mixes in the base model with weight `alpha` ∈ [0, 1). The likelihood
    /// ratio is then at most `1/alpha`.
    pub fn with_defensive(mut self, alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!(
                "defensive weight must lie in [0, 1), got {alpha}"
            )));
        }
        self.defensive = alpha;
        Ok(self)
    }

    fn draw<R: Rng + ?Sized>(&self, cumulative: &[f64], rng: &mut R, out: &mut [f64]) {
        if self.defensive > 0.0 && rng.random::<f64>() < self.defensive {
            let w = self.base.weights();
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let k = w
                .iter()
                .position(|p| {
                    acc += p;
                    u < acc
                })
                .unwrap_or(w.len() - 1);
            sample_truncated_into(&self.base.components()[k], self.base.support(), rng, out);
            return;
        }
        let u: f64 = rng.random::<f64>() * cumulative.last().copied().unwrap_or(1.0);
        let j = cumulative.iter().position(|c| u < *c).unwrap_or(cumulative.len() - 1);
        sample_truncated_into(&self.shifted[j], self.base.support(), rng, out);
    }

    fn cumulative(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.parts
            .iter()
            .map(|p| {
                acc += p.weight;
                acc
            })
            .collect()
    }
}

/// Builds `ρ·f*_I + (1 − ρ)·f*_O`. `inner[i]` and `outer[i]` hold the
/// dominating points of component `i` in model coordinates; each component's
/// share `p_i` is split evenly over its points.
pub fn build_is(
    gmm: &TruncatedGmm,
    inner: &[Vec<Vec<f64>>],
    outer: &[Vec<Vec<f64>>],
    rho: f64,
) -> Result<MixtureISDistribution> {
    let k = gmm.n_components();
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!("rho must lie in [0, 1], got {rho}")));
    }
    if inner.len() != k || outer.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: inner.len().min(outer.len()),
        });
    }
    let mut parts = Vec::new();
    for (kind, sets, share) in [(PartKind::Inner, inner, rho), (PartKind::Outer, outer, 1.0 - rho)] {
        if share == 0.0 {
            continue;
        }
        for (i, set) in sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "empty {kind:?} dominating set for component {i}"
                )));
            }
            let w = share * gmm.weights()[i] / set.len() as f64;
            for a in set {
                if !gmm.support().contains(a) {
                    return Err(Error::InvalidArgument(format!(
                        "dominating point {a:?} lies outside the support"
                    )));
                }
                parts.push(IsPart {
                    weight: w,
                    mean: a.clone(),
                    component_index: i,
                    kind,
                });
            }
        }
    }
    let total: f64 = parts.iter().map(|p| p.weight).sum();
    for p in &mut parts {
        p.weight /= total;
    }
    let mut shifted = Vec::with_capacity(parts.len());
    let mut log_offsets = Vec::with_capacity(parts.len());
    for p in &parts {
        let c = gmm.components()[p.component_index].with_mean(DVector::from_column_slice(&p.mean));
        let alpha = gaussmath::rect_prob(&c, gmm.support())?;
        log_offsets.push(p.weight.ln() - alpha.ln());
        shifted.push(c);
    }
    Ok(MixtureISDistribution {
        parts,
        shifted,
        log_offsets,
        base: gmm.clone(),
        rho,
        defensive: 0.0,
    })
}

/// The base model itself as an IS distribution (every part at its mean).
pub fn base_is(gmm: &TruncatedGmm) -> Result<MixtureISDistribution> {
    let init = DominatingSets::initial(gmm);
    let pts = points_of(&init, None);
    build_is(gmm, &pts, &pts, 0.0)
}

/// log q(x); `-inf` outside the support.
pub fn is_log_density(x: &[f64], q: &MixtureISDistribution) -> f64 {
    if !q.base.support().contains(x) {
        return f64::NEG_INFINITY;
    }
    let shifted = log_sum_exp(
        q.shifted
            .iter()
            .zip(&q.log_offsets)
            .map(|(c, off)| off + log_density_unchecked(x, c)),
    );
    if q.defensive == 0.0 {
        return shifted;
    }
    let lg = crate::tgmm::gmm_log_density(x, &q.base).unwrap_or(f64::NEG_INFINITY);
    log_sum_exp([(1.0 - q.defensive).ln() + shifted, q.defensive.ln() + lg].into_iter())
}

/// g(x) / q(x).
pub fn likelihood_ratio(x: &[f64], gmm: &TruncatedGmm, q: &MixtureISDistribution) -> Result<f64> {
    let lg = crate::tgmm::gmm_log_density(x, gmm)?;
    let lq = is_log_density(x, q);
    let r = (lg - lq).exp();
    if !r.is_finite() || lq == f64::NEG_INFINITY {
        return Err(Error::NonFiniteRatio { x: x.to_vec() });
    }
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReportFlags {
    pub zero_hits: bool,
    /// Efficiency ratio below 2.
    pub low_efficiency: bool,
    /// p̂ lies outside the [p_lower, p_upper] bounds.
    pub outside_bounds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimator: String,
    pub p_hat: f64,
    pub stderr: f64,
    pub ci95: [f64; 2],
    pub n_samples: usize,
    pub hits: usize,
    pub max_likelihood_ratio: f64,
    pub effective_sample_size: f64,
    pub crude_equiv_n: f64,
    pub efficiency_ratio: f64,
    pub bounds: [f64; 2],
    pub flags: ReportFlags,
}

impl EstimateReport {
    /// Attaches probability bounds and updates the disagreement flag.
    pub fn with_bounds(mut self, lower: f64, upper: f64) -> Self {
        self.bounds = [lower, upper];
        self.flags.outside_bounds = self.p_hat < lower || self.p_hat > upper;
        self
    }

    pub fn relative_stderr(&self) -> f64 {
        self.stderr / self.p_hat
    }
}

/// Crude Monte Carlo sample size with the same standard error:
/// `p(1 − p) / stderr²`.
pub fn crude_equivalent_n(p: f64, stderr: f64) -> f64 {
    p * (1.0 - p) / (stderr * stderr)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub index: usize,
    pub p_hat: f64,
    pub ci_half_width: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub report: EstimateReport,
    pub trace: Vec<TraceRow>,
}

pub fn trace_stride(n: usize) -> usize {
    (n / 10_000).max(1)
}

/// Draws `n` points in `workers` shards (shard `w` uses child stream `w`),
/// evaluates the indicator and the weight `L(x)` on hits, and returns
/// `keep(x, hit, L(x)·I(x))` for every draw in shard order.
#[allow(clippy::too_many_arguments)]
fn draw_shards<D, W, K, T>(
    n: usize,
    d: usize,
    seed: SeedStream,
    workers: usize,
    draw: D,
    indicator: &dyn Indicator,
    weight: W,
    keep: K,
) -> Result<Vec<T>>
where
    D: Fn(&mut crate::rng::StreamRng, &mut [f64]) + Sync,
    W: Fn(&[f64]) -> Result<f64> + Sync,
    K: Fn(&[f64], bool, f64) -> T + Sync,
    T: Send,
{
    let shards: Vec<Vec<T>> = shard_sizes(n, workers)
        .into_par_iter()
        .enumerate()
        .map(|(w, size)| {
            let mut rng = seed.child(w as u64).rng();
            let mut out = Vec::with_capacity(size);
            let mut x = vec![0.0; d];
            for _ in 0..size {
                draw(&mut rng, &mut x);
                let hit = indicator.eval(&x)?;
                let v = if hit { weight(&x)? } else { 0.0 };
                out.push(keep(&x, hit, v));
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(shards.into_iter().flatten().collect())
}

fn summarize(estimator: &str, values: &[f64], crude: bool) -> Estimate {
    let n = values.len();
    let nf = n as f64;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut hits = 0;
    let mut max_lr: f64 = 0.0;
    let stride = trace_stride(n);
    let mut trace = Vec::with_capacity(n / stride + 1);
    // Welford running variance for the trace.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (j, &v) in values.iter().enumerate() {
        if v > 0.0 {
            hits += 1;
            max_lr = max_lr.max(v);
        }
        sum += v;
        sum_sq += v * v;
        let c = (j + 1) as f64;
        let delta = v - mean;
        mean += delta / c;
        m2 += delta * (v - mean);
        if (j + 1) % stride == 0 || j + 1 == n {
            let sd = if j > 0 { (m2 / (c - 1.0)).sqrt() } else { 0.0 };
            trace.push(TraceRow {
                index: j + 1,
                p_hat: mean,
                ci_half_width: 1.96 * sd / c.sqrt(),
            });
        }
    }
    let p_hat = sum / nf;
    let stderr = if crude {
        (p_hat * (1.0 - p_hat) / nf).sqrt()
    } else if n > 1 {
        ((sum_sq - nf * p_hat * p_hat).max(0.0) / (nf - 1.0)).sqrt() / nf.sqrt()
    } else {
        0.0
    };
    let crude_equiv_n = if crude || stderr == 0.0 {
        nf
    } else {
        crude_equivalent_n(p_hat, stderr).ceil()
    };
    let efficiency_ratio = crude_equiv_n / nf;
    let ess = if sum_sq > 0.0 { sum * sum / sum_sq } else { 0.0 };
    let report = EstimateReport {
        estimator: estimator.to_string(),
        p_hat,
        stderr,
        ci95: [p_hat - 1.96 * stderr, p_hat + 1.96 * stderr],
        n_samples: n,
        hits,
        max_likelihood_ratio: if crude && hits > 0 { 1.0 } else { max_lr },
        effective_sample_size: ess,
        crude_equiv_n,
        efficiency_ratio,
        bounds: [0.0, 1.0],
        flags: ReportFlags {
            zero_hits: hits == 0,
            low_efficiency: efficiency_ratio < 2.0,
            outside_bounds: false,
        },
    };
    Estimate { report, trace }
}

/// Importance-sampling estimate of `P_g(indicator)` with draws from `q`.
pub fn estimate(
    indicator: &dyn Indicator,
    gmm: &TruncatedGmm,
    q: &MixtureISDistribution,
    n: usize,
    seed: SeedStream,
    workers: usize,
) -> Result<Estimate> {
    if n < 100 {
        return Err(Error::InvalidArgument(format!("IS estimate needs n ≥ 100, got {n}")));
    }
    let cumulative = q.cumulative();
    let values = draw_shards(
        n,
        gmm.dim(),
        seed,
        workers,
        |rng, x| q.draw(&cumulative, rng, x),
        indicator,
        |x| likelihood_ratio(x, gmm, q),
        |_, _, v| v,
    )?;
    Ok(summarize("is", &values, false))
}

/// Crude Monte Carlo under the base model.
pub fn crude_mc(
    indicator: &dyn Indicator,
    gmm: &TruncatedGmm,
    n: usize,
    seed: SeedStream,
    workers: usize,
) -> Result<Estimate> {
    if n == 0 {
        return Err(Error::InvalidArgument("crude Monte Carlo needs n ≥ 1".into()));
    }
    let sampler = MixtureSampler::new(gmm)?;
    let values = draw_shards(
        n,
        gmm.dim(),
        seed,
        workers,
        |rng, x| {
            sampler.draw(rng, x);
        },
        indicator,
        |_| Ok(1.0),
        |_, _, v| v,
    )?;
    Ok(summarize("crude", &values, true))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum RhoPolicy {
    /// 0 until a rare point has been seen, 0.5 afterwards.
    Auto,
    Fixed(f64),
}

impl RhoPolicy {
    fn rho(&self, frontier: &FrontierStore) -> f64 {
        match self {
            RhoPolicy::Auto => {
                if frontier.s1().is_empty() {
                    0.0
                } else {
                    0.5
                }
            }
            RhoPolicy::Fixed(r) => *r,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcedureOptions {
    pub n_per_iter: usize,
    pub max_iter: usize,
    /// Stop once |S1| + |S0| exceeds this.
    pub max_frontier: usize,
    pub rho_policy: RhoPolicy,
    /// ρ of the returned distribution.
    pub final_rho: f64,
    /// Share of the base model mixed into the returned distribution.
    pub defensive: f64,
    pub piece_cap: usize,
    pub dominating_cap: usize,
    pub seed: u64,
    pub workers: usize,
}

/// Default defensive share of the base model in the final distribution.
pub const DEFAULT_DEFENSIVE: f64 = 0.05;

impl Default for ProcedureOptions {
    fn default() -> Self {
        Self {
            n_per_iter: 1000,
            max_iter: 5,
            max_frontier: 400,
            rho_policy: RhoPolicy::Auto,
            final_rho: 0.0,
            defensive: DEFAULT_DEFENSIVE,
            piece_cap: DEFAULT_PIECE_CAP,
            dominating_cap: DEFAULT_DOMINATING_CAP,
            seed: 0,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub rho: f64,
    pub samples: usize,
    pub hits: usize,
    pub s1_size: usize,
    pub s0_size: usize,
    pub outer_pieces: usize,
    pub pieces_truncated: bool,
    pub inner_points: usize,
    pub outer_points: usize,
}

/// Procedure state. Frontier and dominating points are in canonical model
/// coordinates (mask applied).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcedureState {
    pub frontier: FrontierStore,
    pub a_inner: DominatingSets,
    pub a_outer: DominatingSets,
    pub iteration: usize,
    pub simulator_calls: usize,
    pub history: Vec<IterationSummary>,
}

impl ProcedureState {
    pub fn new(gmm: &TruncatedGmm, mask: DirectionMask) -> Result<Self> {
        let canon = gmm.reflect(mask.signs())?;
        Ok(Self {
            frontier: FrontierStore::new(mask),
            a_inner: DominatingSets::initial(&canon),
            a_outer: DominatingSets::initial(&canon),
            iteration: 0,
            simulator_calls: 0,
            history: Vec::new(),
        })
    }

    /// Dominating points in model coordinates, per component.
    pub fn inner_points(&self) -> Vec<Vec<Vec<f64>>> {
        points_of(&self.a_inner, Some(self.frontier.mask()))
    }

    pub fn outer_points(&self) -> Vec<Vec<Vec<f64>>> {
        points_of(&self.a_outer, Some(self.frontier.mask()))
    }
}

fn points_of(sets: &DominatingSets, mask: Option<&DirectionMask>) -> Vec<Vec<Vec<f64>>> {
    sets.sets
        .iter()
        .map(|set| {
            set.iter()
                .map(|p| match mask {
                    Some(m) => m.canonicalize(&p.point),
                    None => p.point.clone(),
                })
                .collect()
        })
        .collect()
}

/// Runs the iterative construction: sample from the current ρ-blend, label,
/// update the frontiers, recompute dominating points; repeat. Returns the
/// final state and the IS distribution at `opts.final_rho`.
pub fn run_procedure(
    indicator: &dyn Indicator,
    gmm: &TruncatedGmm,
    mask: &DirectionMask,
    opts: &ProcedureOptions,
) -> Result<(ProcedureState, MixtureISDistribution)> {
    if mask.dim() != gmm.dim() {
        return Err(Error::DimensionMismatch {
            expected: gmm.dim(),
            got: mask.dim(),
        });
    }
    let canon = gmm.reflect(mask.signs())?;
    let mut state = ProcedureState::new(gmm, mask.clone())?;
    let seeds = SeedStream::new(opts.seed);
    // Outer pieces closer to a component mean are worth more.
    let score = |corner: &[f64]| {
        canon
            .components()
            .iter()
            .zip(canon.weights())
            .map(|(c, w)| {
                let clamp: Vec<f64> = c
                    .mean()
                    .iter()
                    .zip(corner)
                    .map(|(m, l)| m.max(*l))
                    .collect();
                w.ln() + c.log_kernel(&clamp)
            })
            .fold(f64::NEG_INFINITY, f64::max)
    };
    while state.iteration < opts.max_iter {
        let it = state.iteration + 1;
        let rho = opts.rho_policy.rho(&state.frontier);
        let q = build_is(gmm, &state.inner_points(), &state.outer_points(), rho)
            .context(|| format!("iteration {it}"))?;
        let cumulative = q.cumulative();
        let draws = draw_shards(
            opts.n_per_iter,
            gmm.dim(),
            seeds.child(it as u64),
            opts.workers,
            |rng, x| q.draw(&cumulative, rng, x),
            indicator,
            |_| Ok(1.0),
            |x, hit, _| (x.to_vec(), hit),
        )
        .context(|| format!("iteration {it}"))?;
        let mut hits = 0;
        for (x, hit) in &draws {
            hits += usize::from(*hit);
            state
                .frontier
                .insert(x, Label::from_hit(*hit))
                .context(|| format!("iteration {it}"))?;
        }
        state.simulator_calls += draws.len();
        state.a_inner = dompoints::inner_dominating(&canon, state.frontier.s1())
            .context(|| format!("iteration {it}: inner dominating points"))?;
        let (pieces, truncated) = state
            .frontier
            .outer_pieces_ranked(opts.piece_cap, score)
            .context(|| format!("iteration {it}"))?;
        state.a_outer = dompoints::outer_dominating(&canon, &pieces, opts.dominating_cap)
            .context(|| format!("iteration {it}: outer dominating points"))?;
        state.iteration = it;
        state.history.push(IterationSummary {
            iteration: it,
            rho,
            samples: draws.len(),
            hits,
            s1_size: state.frontier.s1().len(),
            s0_size: state.frontier.s0().len(),
            outer_pieces: pieces.len(),
            pieces_truncated: truncated,
            inner_points: state.a_inner.total(),
            outer_points: state.a_outer.total(),
        });
        if state.frontier.s1().len() + state.frontier.s0().len() > opts.max_frontier {
            break;
        }
    }
    let q = build_is(gmm, &state.inner_points(), &state.outer_points(), opts.final_rho)?
        .with_defensive(opts.defensive)?;
    Ok((state, q))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub p_lower: f64,
    pub p_upper: f64,
    pub stderr_lower: f64,
    pub stderr_upper: f64,
}

/// IS estimates of the inner- and outer-set probabilities. Both use the
/// same draws (from an even blend of the inner and outer IS mixtures), so
/// `p_lower ≤ p_upper` holds exactly.
pub fn bound_probabilities(
    gmm: &TruncatedGmm,
    state: &ProcedureState,
    n: usize,
    seed: SeedStream,
    workers: usize,
) -> Result<Bounds> {
    let frontier = &state.frontier;
    let has_inner = !frontier.s1().is_empty();
    let has_outer = !frontier.s0().is_empty();
    if !has_inner && !has_outer {
        return Ok(Bounds {
            p_lower: 0.0,
            p_upper: 1.0,
            stderr_lower: 0.0,
            stderr_upper: 0.0,
        });
    }
    let rho = if has_inner { 0.5 } else { 0.0 };
    let q = build_is(gmm, &state.inner_points(), &state.outer_points(), rho)?;
    let cumulative = q.cumulative();
    let outer_fn = |x: &[f64]| frontier.outer_indicator(x);
    let draws = draw_shards(
        n,
        gmm.dim(),
        seed,
        workers,
        |rng, x| q.draw(&cumulative, rng, x),
        &outer_fn,
        |x| likelihood_ratio(x, gmm, &q),
        |x, _, v| (if frontier.inner_indicator(x) { v } else { 0.0 }, v),
    )?;
    let (lower, upper): (Vec<f64>, Vec<f64>) = draws.into_iter().unzip();
    let lo = summarize("is", &lower, false).report;
    let hi = summarize("is", &upper, false).report;
    Ok(Bounds {
        p_lower: if has_inner { lo.p_hat.clamp(0.0, 1.0) } else { 0.0 },
        p_upper: if has_outer { hi.p_hat.clamp(0.0, 1.0) } else { 1.0 },
        stderr_lower: lo.stderr,
        stderr_upper: hi.stderr,
    })
}
