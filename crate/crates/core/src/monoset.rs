//! Inner and outer approximations of a monotone rare-event set.
//!
//! After multiplying every coordinate by its mask sign the rare set is
//! non-decreasing: if `x` is rare and `y ≥ x` then `y` is rare. Rare samples
//! therefore certify the union of upper orthants `{x ≥ a}` (the inner set) and
//! safe samples certify the union of strict lower orthants `{x < b}` as safe;
//! everything outside the latter is the outer set. Only Pareto-minimal rare
//! points and Pareto-maximal safe points need to be stored.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Largest number of outer pieces tolerated while enumerating.
pub const MAX_PIECES: usize = 1_000_000;
pub const DEFAULT_PIECE_CAP: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DirectionMask {
    signs: Vec<f64>,
}

impl DirectionMask {
    pub fn new(signs: Vec<f64>) -> Result<Self> {
        if signs.is_empty() {
            return Err(Error::InvalidArgument("empty direction mask".into()));
        }
        if let Some(s) = signs.iter().find(|s| **s != 1.0 && **s != -1.0) {
            return Err(Error::InvalidArgument(format!("mask entries must be +1 or -1, got {s}")));
        }
        Ok(Self { signs })
    }

    pub fn increasing(d: usize) -> Self {
        Self { signs: vec![1.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.signs.len()
    }

    pub fn signs(&self) -> &[f64] {
        &self.signs
    }

    /// `signs ⊙ x`; its own inverse.
    pub fn canonicalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.signs).map(|(v, s)| v * s).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Rare,
    Safe,
}

impl Label {
    pub fn from_hit(hit: bool) -> Self {
        if hit {
            Label::Rare
        } else {
            Label::Safe
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    InnerRare,
    OuterSafe,
    Unknown,
}

#[inline]
fn leq(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y)
}

#[inline]
fn lt(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x < y)
}

/// Pareto frontiers of labeled points, stored in canonical coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "FrontierSnapshot", try_from = "FrontierSnapshot")]
pub struct FrontierStore {
    mask: DirectionMask,
    s1: Vec<Vec<f64>>,
    s0: Vec<Vec<f64>>,
}

impl FrontierStore {
    pub fn new(mask: DirectionMask) -> Self {
        Self {
            mask,
            s1: Vec::new(),
            s0: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mask.dim()
    }

    pub fn mask(&self) -> &DirectionMask {
        &self.mask
    }

    /// Minimal rare points, canonical coordinates.
    pub fn s1(&self) -> &[Vec<f64>] {
        &self.s1
    }

    /// Maximal safe points, canonical coordinates.
    pub fn s0(&self) -> &[Vec<f64>] {
        &self.s0
    }

    pub fn is_empty(&self) -> bool {
        self.s1.is_empty() && self.s0.is_empty()
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite point {x:?}")));
        }
        Ok(())
    }

    /// Adds a labeled point given in original coordinates. Returns whether a
    /// frontier changed.
    pub fn insert(&mut self, x: &[f64], label: Label) -> Result<bool> {
        self.check(x)?;
        let c = self.mask.canonicalize(x);
        self.insert_canonical(c, label)
    }

    pub(crate) fn insert_canonical(&mut self, c: Vec<f64>, label: Label) -> Result<bool> {
        match label {
            Label::Rare => {
                if let Some(b) = self.s0.iter().find(|b| leq(&c, b)) {
                    return Err(Error::NonMonotone {
                        rare: self.mask.canonicalize(&c),
                        safe: self.mask.canonicalize(b),
                    });
                }
                if self.s1.iter().any(|a| leq(a, &c)) {
                    return Ok(false);
                }
                self.s1.retain(|a| !leq(&c, a));
                self.s1.push(c);
            }
            Label::Safe => {
                if let Some(a) = self.s1.iter().find(|a| leq(a, &c)) {
                    return Err(Error::NonMonotone {
                        rare: self.mask.canonicalize(a),
                        safe: self.mask.canonicalize(&c),
                    });
                }
                if self.s0.iter().any(|b| leq(&c, b)) {
                    return Ok(false);
                }
                self.s0.retain(|b| !leq(b, &c));
                self.s0.push(c);
            }
        }
        Ok(true)
    }

    /// Value-style insert.
    pub fn inserted(&self, x: &[f64], label: Label) -> Result<Self> {
        let mut next = self.clone();
        next.insert(x, label)?;
        Ok(next)
    }

    pub fn classify(&self, x: &[f64]) -> Region {
        let c = self.mask.canonicalize(x);
        self.classify_canonical(&c)
    }

    pub(crate) fn classify_canonical(&self, c: &[f64]) -> Region {
        if self.s1.iter().any(|a| leq(a, c)) {
            Region::InnerRare
        } else if self.s0.iter().any(|b| lt(c, b)) {
            Region::OuterSafe
        } else {
            Region::Unknown
        }
    }

    pub fn inner_indicator(&self, x: &[f64]) -> bool {
        self.classify(x) == Region::InnerRare
    }

    pub fn outer_indicator(&self, x: &[f64]) -> bool {
        self.classify(x) != Region::OuterSafe
    }

    /// Indicators of the inner set and of the outer set, in original
    /// coordinates.
    pub fn bound_indicators(&self) -> (impl Fn(&[f64]) -> bool + '_, impl Fn(&[f64]) -> bool + '_) {
        (
            move |x: &[f64]| self.inner_indicator(x),
            move |x: &[f64]| self.outer_indicator(x),
        )
    }

    /// Lower corners (canonical coordinates) of the upper orthants whose
    /// union is the outer set, minimal and deduplicated, in lexicographic
    /// order. Empty when `s0` is empty (the outer set is then everything).
    pub fn all_outer_pieces(&self) -> Result<Vec<Vec<f64>>> {
        if self.s0.is_empty() {
            return Ok(Vec::new());
        }
        let d = self.dim();
        let mut pieces: Vec<Vec<f64>> = vec![vec![f64::NEG_INFINITY; d]];
        for b in &self.s0 {
            // Pieces already inside {x : x_i ≥ b_i for some i} are unaffected.
            let (hit, keep): (Vec<_>, Vec<_>) = pieces.into_iter().partition(|l| lt(l, b));
            let mut candidates: Vec<Vec<f64>> = Vec::with_capacity(hit.len() * d);
            for l in &hit {
                for i in 0..d {
                    let mut c = l.clone();
                    c[i] = b[i];
                    candidates.push(c);
                }
            }
            if keep.len() + candidates.len() > MAX_PIECES {
                return Err(Error::PieceExplosion {
                    count: keep.len() + candidates.len(),
                });
            }
            candidates.sort_by(|x, y| lex_cmp(x, y));
            candidates.dedup();
            let mut next = keep;
            let n_keep = next.len();
            for (j, c) in candidates.iter().enumerate() {
                let redundant = next[..n_keep].iter().any(|p| leq(p, c))
                    || candidates
                        .iter()
                        .enumerate()
                        .any(|(k, o)| k != j && leq(o, c));
                if !redundant {
                    next.push(c.clone());
                }
            }
            pieces = next;
        }
        pieces.sort_by(|x, y| lex_cmp(x, y));
        Ok(pieces)
    }

    /// At most `cap` outer pieces, keeping those with the largest `score`
    /// (ties broken lexicographically). The flag reports truncation.
    pub fn outer_pieces_ranked(
        &self,
        cap: usize,
        score: impl Fn(&[f64]) -> f64,
    ) -> Result<(Vec<Vec<f64>>, bool)> {
        let mut pieces = self.all_outer_pieces()?;
        if pieces.len() <= cap {
            return Ok((pieces, false));
        }
        let mut scored: Vec<(f64, Vec<f64>)> = pieces.drain(..).map(|p| (score(&p), p)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| lex_cmp(&a.1, &b.1)));
        scored.truncate(cap);
        let mut kept: Vec<Vec<f64>> = scored.into_iter().map(|(_, p)| p).collect();
        kept.sort_by(|x, y| lex_cmp(x, y));
        Ok((kept, true))
    }

    /// [`outer_pieces_ranked`](Self::outer_pieces_ranked) with corners closer to
    /// the origin preferred.
    pub fn outer_pieces(&self, cap: usize) -> Result<(Vec<Vec<f64>>, bool)> {
        self.outer_pieces_ranked(cap, |l| {
            -l.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>()
        })
    }

    pub fn snapshot(&self) -> FrontierSnapshot {
        FrontierSnapshot {
            mask: self.mask.signs.clone(),
            s1: self.s1.clone(),
            s0: self.s0.clone(),
        }
    }

    pub fn from_snapshot(s: &FrontierSnapshot) -> Result<Self> {
        let mut store = Self::new(DirectionMask::new(s.mask.clone())?);
        for p in &s.s1 {
            store.check(p)?;
            store.insert_canonical(p.clone(), Label::Rare)?;
        }
        for p in &s.s0 {
            store.check(p)?;
            store.insert_canonical(p.clone(), Label::Safe)?;
        }
        Ok(store)
    }
}

pub(crate) fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        let o = x.total_cmp(y);
        if o.is_ne() {
            return o;
        }
    }
    a.len().cmp(&b.len())
}

impl From<FrontierStore> for FrontierSnapshot {
    fn from(s: FrontierStore) -> Self {
        s.snapshot()
    }
}

impl TryFrom<FrontierSnapshot> for FrontierStore {
    type Error = Error;

    fn try_from(s: FrontierSnapshot) -> Result<Self> {
        FrontierStore::from_snapshot(&s)
    }
}

/// JSON form of a [`FrontierStore`]; points are in canonical coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierSnapshot {
    pub mask: Vec<f64>,
    pub s1: Vec<Vec<f64>>,
    pub s0: Vec<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    const NINF: f64 = f64::NEG_INFINITY;

    fn store(d: usize) -> FrontierStore {
        FrontierStore::new(DirectionMask::increasing(d))
    }

    fn sorted(mut v: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
        v.sort_by(|a, b| lex_cmp(a, b));
        v
    }

    #[test]
    fn insert_examples() {
        let mut s = store(2);
        for p in [[1.0, 2.0], [2.0, 1.0], [2.0, 2.0]] {
            s.insert(&p, Label::Rare).unwrap();
        }
        assert_eq!(sorted(s.s1().to_vec()), vec![vec![1.0, 2.0], vec![2.0, 1.0]]);
        let mut t = store(2);
        t.insert(&[0.0, 0.0], Label::Safe).unwrap();
        assert_eq!(t.s0(), &[vec![0.0, 0.0]]);
    }

    #[test]
    fn conflicting_labels_error() {
        let mut s = store(2);
        s.insert(&[2.0, 2.0], Label::Safe).unwrap();
        let e = s.insert(&[1.0, 1.0], Label::Rare).unwrap_err();
        assert!(matches!(e, Error::NonMonotone { .. }));
        let mut t = store(2);
        t.insert(&[1.0, 1.0], Label::Rare).unwrap();
        assert!(t.insert(&[1.0, 1.0], Label::Safe).is_err());
    }

    #[test]
    fn mask_flips_coordinates() {
        let mask = DirectionMask::new(vec![-1.0, 1.0]).unwrap();
        let x = [3.0, -2.0];
        assert_eq!(mask.canonicalize(&mask.canonicalize(&x)), x.to_vec());
        let mut s = FrontierStore::new(mask);
        // Rare set {x₁ ≤ 0, x₂ ≥ 0}.
        s.insert(&[0.0, 0.0], Label::Rare).unwrap();
        assert_eq!(s.classify(&[-1.0, 1.0]), Region::InnerRare);
        assert_eq!(s.classify(&[1.0, 1.0]), Region::Unknown);
        assert!(DirectionMask::new(vec![0.5]).is_err());
    }

    #[test]
    fn classify_examples() {
        let mut s = store(2);
        s.insert(&[1.0, 1.0], Label::Rare).unwrap();
        assert_eq!(s.classify(&[2.0, 2.0]), Region::InnerRare);
        let mut t = store(2);
        t.insert(&[3.0, 3.0], Label::Safe).unwrap();
        assert_eq!(t.classify(&[2.0, 2.0]), Region::OuterSafe);
        // Boundary of a safe point is not certified safe.
        assert_eq!(t.classify(&[3.0, 2.0]), Region::Unknown);

        let mut u = store(2);
        u.insert(&[1.0, 3.0], Label::Rare).unwrap();
        u.insert(&[3.0, 3.0], Label::Safe).unwrap_err();
        let mut v = store(2);
        v.insert(&[1.0, 3.5], Label::Rare).unwrap();
        v.insert(&[3.0, 3.0], Label::Safe).unwrap();
        let x = [2.0, 1.0];
        let inner = v.s1().iter().any(|a| x[0] >= a[0] && x[1] >= a[1]);
        let safe = v.s0().iter().any(|b| x[0] < b[0] && x[1] < b[1]);
        assert!(!inner && safe);
        assert_eq!(v.classify(&x), Region::OuterSafe);
        let y = [2.0, 3.2];
        assert_eq!(v.classify(&y), Region::Unknown);
    }

    #[test]
    fn empty_store_bounds() {
        let s = store(3);
        let (inner, outer) = s.bound_indicators();
        assert!(!inner(&[1e9, 1e9, 1e9]));
        assert!(outer(&[-1e9, -1e9, -1e9]));
        assert!(s.all_outer_pieces().unwrap().is_empty());
    }

    #[test]
    fn outer_piece_examples() {
        let mut s = store(3);
        s.insert(&[1.0, 2.0, 3.0], Label::Safe).unwrap();
        let p = s.all_outer_pieces().unwrap();
        assert_eq!(
            p,
            vec![
                vec![NINF, NINF, 3.0],
                vec![NINF, 2.0, NINF],
                vec![1.0, NINF, NINF]
            ]
        );
        s.insert(&[1.0, 2.0, 3.0], Label::Safe).unwrap();
        assert_eq!(s.all_outer_pieces().unwrap(), p);

        let mut t = store(2);
        t.insert(&[1.0, 2.0], Label::Safe).unwrap();
        t.insert(&[2.0, 1.0], Label::Safe).unwrap();
        assert_eq!(
            t.all_outer_pieces().unwrap(),
            vec![vec![NINF, 2.0], vec![1.0, 1.0], vec![2.0, NINF]]
        );
    }

    /// Literal enumeration over all selections (m_1, …, m_n) ∈ {0..d}ⁿ,
    /// followed by removal of duplicate and dominated corners.
    fn brute_pieces(s0: &[Vec<f64>], d: usize) -> Vec<Vec<f64>> {
        let n = s0.len();
        let total = d.pow(n as u32);
        let mut all = Vec::new();
        for mut code in 0..total {
            let mut l = vec![NINF; d];
            for b in s0 {
                let m = code % d;
                code /= d;
                l[m] = l[m].max(b[m]);
            }
            all.push(l);
        }
        all.sort_by(|a, b| lex_cmp(a, b));
        all.dedup();
        let minimal: Vec<Vec<f64>> = all
            .iter()
            .filter(|c| !all.iter().any(|o| o != *c && leq(o, c)))
            .cloned()
            .collect();
        minimal
    }

    #[test]
    fn outer_pieces_match_literal_enumeration() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let d = rng.random_range(2..=3);
            let mut s = store(d);
            for _ in 0..rng.random_range(1..=6) {
                let p: Vec<f64> = (0..d).map(|_| rng.random_range(0..5) as f64).collect();
                s.insert(&p, Label::Safe).unwrap();
            }
            assert_eq!(s.all_outer_pieces().unwrap(), brute_pieces(s.s0(), d));
        }
    }

    #[test]
    fn outer_pieces_cover_outer_set() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut s = store(3);
        for _ in 0..40 {
            let p: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            if p.iter().sum::<f64>() < 1.0 {
                s.insert(&p, Label::Safe).unwrap();
            }
        }
        let pieces = s.all_outer_pieces().unwrap();
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let in_union = pieces.iter().any(|l| leq(l, &x));
            assert_eq!(in_union, s.outer_indicator(&x));
        }
    }

    #[test]
    fn capped_pieces_keep_highest_scores() {
        let mut s = store(2);
        for i in 0..6 {
            s.insert(&[i as f64, 5.0 - i as f64], Label::Safe).unwrap();
        }
        let all = s.all_outer_pieces().unwrap();
        let (few, truncated) = s.outer_pieces(3).unwrap();
        assert!(truncated && few.len() == 3);
        let (same, t2) = s.outer_pieces(all.len()).unwrap();
        assert!(!t2 && same == all);
    }

    /// Quadratic-scan Pareto filter used as an oracle.
    fn pareto(points: &[Vec<f64>], minimal: bool) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::new();
        for (i, p) in points.iter().enumerate() {
            let beaten = points.iter().enumerate().any(|(j, q)| {
                let dom = if minimal { leq(q, p) } else { leq(p, q) };
                dom && (q != p || j < i)
            });
            if !beaten {
                out.push(p.clone());
            }
        }
        sorted(out)
    }

    #[test]
    fn frontier_matches_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut s = store(3);
            let (mut rare, mut safe) = (Vec::new(), Vec::new());
            for _ in 0..200 {
                let p: Vec<f64> = (0..3).map(|_| rng.random_range(0..20) as f64 / 4.0).collect();
                // Monotone rule: rare iff sum ≥ 7.5.
                let label = Label::from_hit(p.iter().sum::<f64>() >= 7.5);
                s.insert(&p, label).unwrap();
                match label {
                    Label::Rare => rare.push(p),
                    Label::Safe => safe.push(p),
                }
            }
            assert_eq!(sorted(s.s1().to_vec()), pareto(&rare, true));
            assert_eq!(sorted(s.s0().to_vec()), pareto(&safe, false));
        }
    }

    #[test]
    fn snapshot_round_trip() {
        let mut s = FrontierStore::new(DirectionMask::new(vec![1.0, -1.0]).unwrap());
        s.insert(&[1.0, -2.0], Label::Rare).unwrap();
        s.insert(&[0.0, 0.0], Label::Safe).unwrap();
        let json = serde_json::to_string(&s.snapshot()).unwrap();
        let back: FrontierSnapshot = serde_json::from_str(&json).unwrap();
        assert_eq!(FrontierStore::from_snapshot(&back).unwrap(), s);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn sandwich_and_monotone_classification(
            pts in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 2), 1..60),
            probes in proptest::collection::vec(proptest::collection::vec(-4.0f64..4.0, 2), 20),
        ) {
            // True set: x₁ + 2x₂ ≥ 1.
            let truth = |x: &[f64]| x[0] + 2.0 * x[1] >= 1.0;
            let mut s = store(2);
            for p in &pts {
                let before = s.s1().len() + s.s0().len();
                let changed = s.insert(p, Label::from_hit(truth(p))).unwrap();
                if !changed {
                    prop_assert_eq!(before, s.s1().len() + s.s0().len());
                }
            }
            for x in &probes {
                let (i, o) = (s.inner_indicator(x), s.outer_indicator(x));
                prop_assert!(!i || truth(x));
                prop_assert!(!truth(x) || o);
                let up = [x[0] + 0.5, x[1] + 0.25];
                let down = [x[0] - 0.5, x[1] - 0.25];
                if s.classify(x) == Region::InnerRare {
                    prop_assert_eq!(s.classify(&up), Region::InnerRare);
                }
                if s.classify(x) == Region::OuterSafe {
                    prop_assert_eq!(s.classify(&down), Region::OuterSafe);
                }
            }
        }
    }
}
