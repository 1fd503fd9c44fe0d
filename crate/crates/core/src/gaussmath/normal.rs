//! Scalar standard-normal functions and the bivariate upper-orthant
//! probability.
#![allow(clippy::excessive_precision)]

use libm::erfc;
use statrs::function::erf::erfc_inv;
use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[inline]
pub fn pdf(x: f64) -> f64 {
    if x.is_infinite() {
        return 0.0;
    }
    (-0.5 * x * x - LN_SQRT_2PI).exp()
}

/// Φ(x).
#[inline]
pub fn cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        1.0
    } else if x == f64::NEG_INFINITY {
        0.0
    } else {
        0.5 * erfc(-x * FRAC_1_SQRT_2)
    }
}

/// 1 − Φ(x), accurate in the upper tail.
#[inline]
pub fn sf(x: f64) -> f64 {
    cdf(-x)
}

/// Φ(hi) − Φ(lo), evaluated on the side of the origin that avoids cancellation.
#[inline]
pub fn interval(lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    let p = if lo > 0.0 {
        sf(lo) - sf(hi)
    } else {
        cdf(hi) - cdf(lo)
    };
    p.max(0.0)
}

/// Φ⁻¹(p).
#[inline]
pub fn ppf(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else if p >= 1.0 {
        f64::INFINITY
    } else {
        -SQRT_2 * erfc_inv(2.0 * p)
    }
}

/// Inverse CDF of the standard normal restricted to `[lo, hi]` at level `w`.
#[inline]
pub fn truncated_ppf(lo: f64, hi: f64, w: f64) -> f64 {
    let y = if lo > 0.0 {
        let (slo, shi) = (sf(lo), sf(hi));
        -ppf(slo - w * (slo - shi))
    } else {
        let (clo, chi) = (cdf(lo), cdf(hi));
        ppf(clo + w * (chi - clo))
    };
    y.clamp(lo, hi)
}

const GL6: [(f64, f64); 3] = [
    (0.1713244923791705, -0.9324695142031522),
    (0.3607615730481384, -0.6612093864662647),
    (0.4679139345726904, -0.2386191860831970),
];

const GL12: [(f64, f64); 6] = [
    (0.04717533638651177, -0.9815606342467191),
    (0.1069393259953183, -0.9041172563704750),
    (0.1600783285433464, -0.7699026741943050),
    (0.2031674267230659, -0.5873179542866171),
    (0.2334925365383547, -0.3678314989981802),
    (0.2491470458134029, -0.1252334085114692),
];

pub(crate) const GL20: [(f64, f64); 10] = [
    (0.01761400713915212, -0.9931285991850949),
    (0.04060142980038694, -0.9639719272779138),
    (0.06267204833410906, -0.9122344282513259),
    (0.08327674157670475, -0.8391169718222188),
    (0.1019301198172404, -0.7463319064601508),
    (0.1181945319615184, -0.6360536807265150),
    (0.1316886384491766, -0.5108670019508271),
    (0.1420961093183821, -0.3737060887154196),
    (0.1491729864726037, -0.2277858511416451),
    (0.1527533871307259, -0.07652652113349733),
];

/// P(X > h, Y > k) for standard normals with correlation `r`
/// (Drezner–Wesolowsky with Genz's double-precision refinements).
pub fn bvn_upper(h: f64, k: f64, r: f64) -> f64 {
    if h == f64::INFINITY || k == f64::INFINITY {
        return 0.0;
    }
    if h == f64::NEG_INFINITY {
        return sf(k);
    }
    if k == f64::NEG_INFINITY {
        return sf(h);
    }
    let two_pi = 2.0 * PI;
    let quad: &[(f64, f64)] = if r.abs() < 0.3 {
        &GL6
    } else if r.abs() < 0.75 {
        &GL12
    } else {
        &GL20
    };
    let mut k = k;
    let mut hk = h * k;
    let mut bvn = 0.0;
    if r.abs() < 0.925 {
        let hs = (h * h + k * k) / 2.0;
        let asr = r.asin();
        for &(w, x) in quad {
            for s in [-1.0, 1.0] {
                let sn = (asr * (s * x + 1.0) / 2.0).sin();
                bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
            }
        }
        return (bvn * asr / (2.0 * two_pi) + sf(h) * sf(k)).clamp(0.0, 1.0);
    }
    if r < 0.0 {
        k = -k;
        hk = -hk;
    }
    if r.abs() < 1.0 {
        let a2 = (1.0 - r) * (1.0 + r);
        let mut a = a2.sqrt();
        let b2 = (h - k) * (h - k);
        let c = (4.0 - hk) / 8.0;
        let d = (12.0 - hk) / 16.0;
        bvn = a
            * (-(b2 / a2 + hk) / 2.0).exp()
            * (1.0 - c * (b2 - a2) * (1.0 - d * b2 / 5.0) / 3.0 + c * d * a2 * a2 / 5.0);
        if hk > -160.0 {
            let b = b2.sqrt();
            bvn -= (-hk / 2.0).exp()
                * two_pi.sqrt()
                * cdf(-b / a)
                * b
                * (1.0 - c * b2 * (1.0 - d * b2 / 5.0) / 3.0);
        }
        a /= 2.0;
        for &(w, x) in quad {
            for s in [-1.0, 1.0] {
                let xs = (a * (s * x + 1.0)).powi(2);
                let rs = (1.0 - xs).sqrt();
                let asr = -(b2 / xs + hk) / 2.0;
                if asr > -100.0 {
                    bvn += a
                        * w
                        * asr.exp()
                        * ((-hk * (1.0 - rs) / (2.0 * (1.0 + rs))).exp() / rs
                            - (1.0 + c * xs * (1.0 + d * xs)));
                }
            }
        }
        bvn = -bvn / two_pi;
    }
    if r > 0.0 {
        bvn += sf(h.max(k));
    } else {
        bvn = -bvn;
        if k > h {
            if h < 0.0 {
                bvn += cdf(k) - cdf(h);
            } else {
                bvn += sf(h) - sf(k);
            }
        }
    }
    bvn.clamp(0.0, 1.0)
}

/// P(lo ≤ (X, Y) ≤ hi) for standard normals with correlation `r`.
pub fn bvn_rect(lo: [f64; 2], hi: [f64; 2], r: f64) -> f64 {
    if hi[0] <= lo[0] || hi[1] <= lo[1] {
        return 0.0;
    }
    // Reflect so that the corner with the most mass is evaluated directly;
    // the upper orthant form is most accurate when limits are positive.
    let p = bvn_upper(lo[0], lo[1], r) - bvn_upper(hi[0], lo[1], r) - bvn_upper(lo[0], hi[1], r)
        + bvn_upper(hi[0], hi[1], r);
    let q = bvn_upper(-hi[0], -hi[1], r) - bvn_upper(-lo[0], -hi[1], r)
        - bvn_upper(-hi[0], -lo[1], r)
        + bvn_upper(-lo[0], -lo[1], r);
    let mid0 = lo[0].max(-1e300) + hi[0].min(1e300);
    let mid1 = lo[1].max(-1e300) + hi[1].min(1e300);
    let v = if mid0 + mid1 >= 0.0 { p } else { q };
    v.max(0.0)
}
