//! Crash indicators: a longitudinal lane-change simulator with ACC and AEB,
//! and analytic scenarios with known probabilities.

use crate::accel::Indicator;
use crate::error::{Error, Result};
use crate::gaussmath::{normal, rect_prob_raw, GaussComponent, Rect};
use crate::monoset::DirectionMask;
use crate::rng::SeedStream;
use crate::tgmm::{AffineStandardizer, ComponentDocument, ModelDocument, TruncatedGmm};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Initial condition of a cut-in: lead speed, time to collision, range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneChangeEvent {
    pub v: f64,
    pub ttc: f64,
    pub range: f64,
}

impl LaneChangeEvent {
    pub fn new(v: f64, ttc: f64, range: f64) -> Result<Self> {
        if !(range > 0.0) || !(ttc > 0.0) || !(v >= 0.0) || !v.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "need v ≥ 0, ttc > 0, range > 0; got v={v}, ttc={ttc}, range={range}"
            )));
        }
        Ok(Self { v, ttc, range })
    }

    /// From model coordinates `(v, 1/ttc, 1/range)`.
    pub fn from_model(x: &[f64]) -> Result<Self> {
        if x.len() != 3 {
            return Err(Error::DimensionMismatch {
                expected: 3,
                got: x.len(),
            });
        }
        Self::new(x[0], 1.0 / x[1], 1.0 / x[2])
    }

    pub fn to_model(&self) -> [f64; 3] {
        [self.v, 1.0 / self.ttc, 1.0 / self.range]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AVConfig {
    /// s
    pub acc_time_gap: f64,
    /// 1/s
    pub acc_speed_gain: f64,
    /// 1/s²
    pub acc_spacing_gain: f64,
    /// s
    pub aeb_ttc_trigger: f64,
    /// m/s², positive magnitude
    pub aeb_decel: f64,
    /// m/s²
    pub max_decel: f64,
    /// s
    pub reaction_delay: f64,
    /// s
    pub dt: f64,
    /// s
    pub horizon: f64,
    /// m
    pub crash_range: f64,
}

impl Default for AVConfig {
    fn default() -> Self {
        Self {
            acc_time_gap: 1.4,
            acc_speed_gain: 0.6,
            acc_spacing_gain: 0.25,
            aeb_ttc_trigger: 1.2,
            aeb_decel: 6.0,
            max_decel: 8.0,
            reaction_delay: 0.2,
            dt: 0.01,
            horizon: 15.0,
            crash_range: 0.1,
        }
    }
}

/// Standstill margin of the ACC spacing law, m.
const ACC_MARGIN: f64 = 2.0;
const ACC_MAX_ACCEL: f64 = 2.0;

impl AVConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.dt > 0.0
            && self.horizon >= 10.0 * self.dt
            && self.aeb_decel > 0.0
            && self.aeb_decel <= self.max_decel
            && self.crash_range >= 0.0
            && self.reaction_delay >= 0.0
            && self.acc_time_gap >= 0.0
            && self.aeb_ttc_trigger >= 0.0;
        if ok && [self.acc_speed_gain, self.acc_spacing_gain].iter().all(|g| g.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid AV configuration {self:?}")))
        }
    }
}

/// `−range / range_rate` for a closing encounter.
pub fn ttc_from_range_rate(range: f64, range_rate: f64) -> Result<f64> {
    if !(range > 0.0) {
        return Err(Error::InvalidArgument(format!("range must be positive, got {range}")));
    }
    if !(range_rate < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "time to collision is undefined for range rate {range_rate} ≥ 0"
        )));
    }
    Ok(-range / range_rate)
}

/// Integrates lead (constant speed `v`) and follower (ACC with AEB override)
/// with a fixed step; true iff the gap reaches `crash_range` within the
/// horizon. The follower starts at `v + range/ttc`.
pub fn simulate(event: &LaneChangeEvent, cfg: &AVConfig) -> Result<bool> {
    let mut gap = event.range;
    if gap <= cfg.crash_range {
        return Ok(true);
    }
    let v = event.v;
    let mut u = v + event.range / event.ttc;
    let steps = (cfg.horizon / cfg.dt).round() as usize;
    let mut triggered_at: Option<f64> = None;
    for step in 0..steps {
        let t = step as f64 * cfg.dt;
        let closing = u - v;
        if triggered_at.is_none() && closing > 0.0 && gap < cfg.aeb_ttc_trigger * closing {
            triggered_at = Some(t);
        }
        let mut a = cfg.acc_spacing_gain * (gap - u * cfg.acc_time_gap - ACC_MARGIN)
            + cfg.acc_speed_gain * (v - u);
        a = a.clamp(-cfg.max_decel, ACC_MAX_ACCEL);
        if let Some(t0) = triggered_at {
            if t >= t0 + cfg.reaction_delay - 1e-12 {
                a = a.min(-cfg.aeb_decel);
            }
        }
        let u_next = (u + a * cfg.dt).max(0.0);
        gap += (v - 0.5 * (u + u_next)) * cfg.dt;
        u = u_next;
        if !gap.is_finite() || !u.is_finite() {
            return Err(Error::InvalidArgument(format!("non-finite simulator state at step {step}")));
        }
        if gap <= cfg.crash_range {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Mask of the lane-change crash set in model coordinates `(v, 1/ttc, 1/range)`
/// for the default configuration, as certified by [`check_monotone`]: crash
/// is non-increasing in `v` and in `ttc`, and non-decreasing in `range` at
/// fixed `ttc` (a longer range at the same TTC means a faster closing speed).
pub fn lane_change_mask() -> DirectionMask {
    DirectionMask::new(vec![-1.0, 1.0, -1.0]).expect("valid mask")
}

/// The simulator as an indicator on data coordinates `(v, 1/ttc, 1/range)`.
#[derive(Debug, Clone)]
pub struct LaneChangeIndicator {
    pub cfg: AVConfig,
}

impl Indicator for LaneChangeIndicator {
    fn eval(&self, x: &[f64]) -> Result<bool> {
        if x.len() != 3 {
            return Err(Error::DimensionMismatch {
                expected: 3,
                got: x.len(),
            });
        }
        // Zero inverse TTC is a non-closing encounter; zero inverse range is
        // an infinitely distant lead vehicle.
        if x[1] <= 0.0 {
            return Ok(false);
        }
        if x[2] <= 0.0 {
            return Ok(true);
        }
        let ev = LaneChangeEvent::new(x[0].max(0.0), 1.0 / x[1], 1.0 / x[2])?;
        simulate(&ev, &self.cfg)
    }
}

/// An indicator on standardized coordinates wrapping one on data coordinates.
pub struct Standardized<'a, I: Indicator + ?Sized> {
    pub inner: &'a I,
    pub standardizer: &'a AffineStandardizer,
}

impl<I: Indicator + ?Sized> Indicator for Standardized<'_, I> {
    fn eval(&self, z: &[f64]) -> Result<bool> {
        self.inner.eval(&self.standardizer.invert_point(z))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub point: Vec<f64>,
    pub coord: usize,
    /// Signed step (in original coordinates) that changed the outcome.
    pub step: f64,
}

/// Probes `indicator` at uniform points of `envelope` (finite box). At each
/// probe, moves every coordinate by a few fractions of the box width in the
/// direction that must preserve the outcome (towards the rare set for rare
/// probes, away from it for safe ones) and reports each flip.
pub fn check_monotone(
    indicator: &dyn Indicator,
    mask: &DirectionMask,
    envelope: &Rect,
    probes: usize,
    seed: SeedStream,
) -> Result<Vec<Violation>> {
    let d = mask.dim();
    if envelope.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: envelope.dim(),
        });
    }
    if envelope.lower.iter().chain(&envelope.upper).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("probe envelope must be bounded".into()));
    }
    if probes == 0 {
        return Err(Error::InvalidArgument("need at least one probe".into()));
    }
    let mut rng = seed.rng();
    let mut out = Vec::new();
    for _ in 0..probes {
        let x: Vec<f64> = (0..d)
            .map(|i| rng.random_range(envelope.lower[i]..envelope.upper[i]))
            .collect();
        let hit = indicator.eval(&x)?;
        for k in 0..d {
            let width = envelope.upper[k] - envelope.lower[k];
            // Rare probes move towards larger canonical values, safe ones away.
            let dir = mask.signs()[k] * if hit { 1.0 } else { -1.0 };
            for frac in [0.01, 0.05, 0.2] {
                let mut y = x.clone();
                y[k] = (x[k] + dir * frac * width).clamp(envelope.lower[k], envelope.upper[k]);
                if y[k] == x[k] {
                    continue;
                }
                if indicator.eval(&y)? != hit {
                    out.push(Violation {
                        point: x.clone(),
                        coord: k,
                        step: y[k] - x[k],
                    });
                    break;
                }
            }
        }
    }
    Ok(out)
}

/// Synthetic monotone scenarios with exactly computable probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AnalyticScenario {
    /// `w · x ≥ gamma`.
    Halfspace { w: Vec<f64>, gamma: f64 },
    /// `x ≥ corner` componentwise; `"-inf"` entries leave a coordinate free.
    Orthant {
        #[serde(with = "crate::serde_ext::ext_vec")]
        corner: Vec<f64>,
    },
    /// `x[coord] ≥ gamma`.
    MixtureTail { coord: usize, gamma: f64 },
}

impl AnalyticScenario {
    pub fn validate(&self, d: usize) -> Result<()> {
        let bad_dim = |n: usize| Error::DimensionMismatch { expected: d, got: n };
        match self {
            AnalyticScenario::Halfspace { w, gamma } => {
                if w.len() != d {
                    return Err(bad_dim(w.len()));
                }
                if w.iter().all(|v| *v == 0.0) || !gamma.is_finite() {
                    return Err(Error::InvalidArgument("halfspace needs a nonzero normal and finite gamma".into()));
                }
            }
            AnalyticScenario::Orthant { corner } => {
                if corner.len() != d {
                    return Err(bad_dim(corner.len()));
                }
            }
            AnalyticScenario::MixtureTail { coord, gamma } => {
                if *coord >= d || !gamma.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "mixture-tail coordinate {coord} out of range for d = {d}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn hit(&self, x: &[f64]) -> bool {
        match self {
            AnalyticScenario::Halfspace { w, gamma } => {
                w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() >= *gamma
            }
            AnalyticScenario::Orthant { corner } => x.iter().zip(corner).all(|(a, c)| a >= c),
            AnalyticScenario::MixtureTail { coord, gamma } => x[*coord] >= *gamma,
        }
    }

    /// A mask under which the set is non-decreasing after canonicalization.
    pub fn mask(&self, d: usize) -> DirectionMask {
        match self {
            AnalyticScenario::Halfspace { w, .. } => {
                DirectionMask::new(w.iter().map(|v| if *v < 0.0 { -1.0 } else { 1.0 }).collect())
                    .expect("valid mask")
            }
            _ => DirectionMask::increasing(d),
        }
    }

    /// `P(X ∈ set)` under the truncated mixture. Orthants and coordinate tails
    /// are rectangle probabilities. Half-spaces are exact through the 1-D
    /// projection when the support is unbounded or d = 1; for a bounded
    /// support with d ∈ {2, 3} the conditional normal probability of one
    /// coordinate is integrated over the others with composite
    /// Gauss–Legendre.
    pub fn truth(&self, gmm: &TruncatedGmm) -> Result<f64> {
        let d = gmm.dim();
        self.validate(d)?;
        let support = gmm.support();
        let mut total = 0.0;
        for ((c, w), alpha) in gmm.components().iter().zip(gmm.weights()).zip(gmm.norm_consts()) {
            let p = match self {
                AnalyticScenario::Orthant { corner } => {
                    let lower = corner.iter().zip(&support.lower).map(|(a, b)| a.max(*b)).collect();
                    rect_within(c, lower, support.upper.clone())
                }
                AnalyticScenario::MixtureTail { coord, gamma } => {
                    let mut lower = support.lower.clone();
                    lower[*coord] = lower[*coord].max(*gamma);
                    rect_within(c, lower, support.upper.clone())
                }
                AnalyticScenario::Halfspace { w, gamma } => halfspace_prob(c, w, *gamma, support)?,
            };
            total += w * p / alpha;
        }
        Ok(total)
    }
}

fn rect_within(c: &GaussComponent, lower: Vec<f64>, upper: Vec<f64>) -> f64 {
    if lower.iter().zip(&upper).any(|(l, u)| l >= u) {
        return 0.0;
    }
    rect_prob_raw(c, &Rect { lower, upper })
}

const HALFSPACE_PANELS: usize = 80;

fn halfspace_prob(c: &GaussComponent, w: &[f64], gamma: f64, support: &Rect) -> Result<f64> {
    let d = c.dim();
    let mu = c.mean();
    let cov = c.cov();
    if support.is_unbounded() {
        let m: f64 = w.iter().zip(mu.iter()).map(|(a, b)| a * b).sum();
        let var = (DVector::from_column_slice(w).transpose() * cov * DVector::from_column_slice(w))[(0, 0)];
        return Ok(normal::sf((gamma - m) / var.sqrt()));
    }
    if d == 1 {
        let s = cov[(0, 0)].sqrt();
        let t = gamma / w[0];
        let (lo, hi) = if w[0] > 0.0 {
            (t.max(support.lower[0]), support.upper[0])
        } else {
            (support.lower[0], t.min(support.upper[0]))
        };
        return Ok(normal::interval((lo - mu[0]) / s, (hi - mu[0]) / s));
    }
    if d > 3 {
        return Err(Error::Unsupported(format!(
            "truncated half-space probability for d = {d}"
        )));
    }
    // Integrate out the coordinate carrying the most half-space variance last.
    let j = (0..d)
        .filter(|&i| w[i] != 0.0)
        .max_by(|&a, &b| (w[a].abs() * cov[(a, a)].sqrt()).total_cmp(&(w[b].abs() * cov[(b, b)].sqrt())))
        .expect("nonzero normal");
    let rest: Vec<usize> = (0..d).filter(|&i| i != j).collect();
    let r = rest.len();
    let srr = DMatrix::from_fn(r, r, |a, b| cov[(rest[a], rest[b])]);
    let srr_chol = srr.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
    let sjr = DVector::from_fn(r, |a, _| cov[(j, rest[a])]);
    let beta = srr_chol.solve(&sjr);
    let cond_sd = (cov[(j, j)] - sjr.dot(&beta)).max(0.0).sqrt();
    let marg = GaussComponent::new(
        DVector::from_fn(r, |a, _| mu[rest[a]]),
        srr,
    )?;
    let norm = (r as f64) * normal::LN_SQRT_2PI;
    // Integration box: support clipped to ±10 marginal sd.
    let ranges: Vec<(f64, f64)> = rest
        .iter()
        .map(|&i| {
            let s = cov[(i, i)].sqrt();
            (support.lower[i].max(mu[i] - 10.0 * s), support.upper[i].min(mu[i] + 10.0 * s))
        })
        .collect();
    let nodes: Vec<Vec<(f64, f64)>> = ranges.iter().map(|&(a, b)| gl_nodes(a, b, HALFSPACE_PANELS)).collect();
    let cond_prob = |y: &[f64]| -> f64 {
        let m = mu[j] + (0..r).map(|a| beta[a] * (y[a] - mu[rest[a]])).sum::<f64>();
        let t = (gamma - (0..r).map(|a| w[rest[a]] * y[a]).sum::<f64>()) / w[j];
        let (lo, hi) = if w[j] > 0.0 {
            (t.max(support.lower[j]), support.upper[j])
        } else {
            (support.lower[j], t.min(support.upper[j]))
        };
        if hi <= lo {
            return 0.0;
        }
        if cond_sd == 0.0 {
            return f64::from(lo <= m && m <= hi);
        }
        normal::interval((lo - m) / cond_sd, (hi - m) / cond_sd)
    };
    let mut total = 0.0;
    match r {
        1 => {
            for &(y, wy) in &nodes[0] {
                let dens = (-0.5 * marg.mahalanobis_sq(&[y]) - marg_half_log_det(&marg) - norm).exp();
                total += wy * dens * cond_prob(&[y]);
            }
        }
        _ => {
            let hld = marg_half_log_det(&marg);
            for &(y0, w0) in &nodes[0] {
                for &(y1, w1) in &nodes[1] {
                    let y = [y0, y1];
                    let dens = (-0.5 * marg.mahalanobis_sq(&y) - hld - norm).exp();
                    if dens > 0.0 {
                        total += w0 * w1 * dens * cond_prob(&y);
                    }
                }
            }
        }
    }
    Ok(total)
}

fn marg_half_log_det(c: &GaussComponent) -> f64 {
    c.chol().diagonal().iter().map(|v| v.ln()).sum()
}

/// Composite 20-point Gauss–Legendre nodes and weights on `[a, b]`.
fn gl_nodes(a: f64, b: f64, panels: usize) -> Vec<(f64, f64)> {
    if b <= a {
        return Vec::new();
    }
    let h = (b - a) / panels as f64;
    let mut out = Vec::with_capacity(panels * 20);
    for p in 0..panels {
        let c = a + (p as f64 + 0.5) * h;
        for &(w, x) in &normal::GL20 {
            out.push((c - x * h / 2.0, w * h / 2.0));
            out.push((c + x * h / 2.0, w * h / 2.0));
        }
    }
    out
}

/// A scenario file: either an analytic scenario (`{"kind": ...}`) or an
/// AV configuration for the lane-change simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioSpec {
    Analytic(AnalyticScenario),
    Simulator(AVConfig),
}

impl ScenarioSpec {
    pub fn default_mask(&self, d: usize) -> DirectionMask {
        match self {
            ScenarioSpec::Analytic(a) => a.mask(d),
            ScenarioSpec::Simulator(_) => lane_change_mask(),
        }
    }
}

impl Indicator for AnalyticScenario {
    fn eval(&self, x: &[f64]) -> Result<bool> {
        Ok(self.hit(x))
    }
}

impl Indicator for ScenarioSpec {
    fn eval(&self, x: &[f64]) -> Result<bool> {
        match self {
            ScenarioSpec::Analytic(a) => Ok(a.hit(x)),
            ScenarioSpec::Simulator(cfg) => LaneChangeIndicator { cfg: *cfg }.eval(x),
        }
    }
}

/// The shipped 3-D synthetic benchmark: a two-component mixture on the
/// positive orthant and a half-space crash set that is non-increasing in the
/// first coordinate and non-decreasing in the other two.
pub fn synthetic_model() -> ModelDocument {
    ModelDocument {
        d: 3,
        k: 2,
        support: Rect {
            lower: vec![0.0; 3],
            upper: vec![f64::INFINITY; 3],
        },
        weights: vec![0.6, 0.4],
        components: vec![
            ComponentDocument {
                mean: vec![2.0, 0.5, 0.5],
                cov: vec![
                    vec![0.5, 0.1, 0.0],
                    vec![0.1, 0.3, 0.05],
                    vec![0.0, 0.05, 0.3],
                ],
            },
            ComponentDocument {
                mean: vec![3.0, 1.0, 0.8],
                cov: vec![
                    vec![0.4, -0.05, 0.02],
                    vec![-0.05, 0.4, 0.1],
                    vec![0.02, 0.1, 0.2],
                ],
            },
        ],
        standardizer: AffineStandardizer::identity(3),
    }
}

pub fn synthetic_scenario() -> AnalyticScenario {
    AnalyticScenario::Halfspace {
        w: vec![-0.5, 1.0, 1.0],
        gamma: SYNTHETIC_GAMMA,
    }
}

pub const SYNTHETIC_GAMMA: f64 = 4.24;

/// Probability of [`synthetic_scenario`] under [`synthetic_model`], from
/// [`AnalyticScenario::truth`]; 10^8 crude draws gave 9.58e-6 ± 0.31e-6.
pub const SYNTHETIC_TRUTH: f64 = 9.886_373_744_578e-6;

/// Lane-change-like data in `(v, 1/ttc, 1/range)`: lead speed around
/// 20 m/s, TTC mostly several seconds, range mostly 10–40 m.
pub fn synthetic_lane_change_data<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    use rand_distr::{Distribution, LogNormal, Normal};
    let speed = Normal::new(20.0, 5.0).expect("valid");
    let ttc = LogNormal::new(1.9, 0.6).expect("valid");
    let range = LogNormal::new(3.0, 0.45).expect("valid");
    let mut out = DMatrix::zeros(n, 3);
    for i in 0..n {
        let v: f64 = loop {
            let s: f64 = speed.sample(rng);
            if s > 0.0 {
                break s;
            }
        };
        let r: f64 = range.sample(rng);
        // Faster traffic keeps longer gaps.
        let r = r * (0.7 + 0.015 * v);
        let t: f64 = ttc.sample(rng);
        out[(i, 0)] = v;
        out[(i, 1)] = 1.0 / t;
        out[(i, 2)] = 1.0 / r;
    }
    out
}
