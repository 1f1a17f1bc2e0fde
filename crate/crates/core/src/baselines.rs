//! Reference schemes: centralized allocation with full knowledge of both
//! users' rates and gains, and time-division with fixed or optimized shares.

use crate::alloc_unit::capacity_power;
use crate::curve::PowerCurve;
use crate::dist::{to_f64, RateFadingLaw};

/// Cheapest corner of the two-user capacity region: the user with the
/// weaker gain is decoded last at its single-user power. Equal gains put user
/// 2 at the single-user corner.
pub fn centralized_power(b1: f64, b2: f64, gain1: f64, gain2: f64) -> (f64, f64) {
    let total = capacity_power(b1 + b2);
    if gain1 < gain2 {
        let r1 = capacity_power(b1);
        (r1 / gain1, (total - r1) / gain2)
    } else {
        let r2 = capacity_power(b2);
        ((total - r2) / gain1, r2 / gain2)
    }
}

/// Expected centralized sum-power over independent rate-fading laws.
pub fn centralized_average(law1: &RateFadingLaw, law2: &RateFadingLaw) -> f64 {
    let (p1, p2) = (law1.pairs(), law2.pairs());
    let mut total = 0.0;
    for (b1, h1, q1) in &p1 {
        for (b2, h2, q2) in &p2 {
            let w = to_f64(q1) * to_f64(q2);
            if w == 0.0 {
                continue;
            }
            let (x, y) = centralized_power(to_f64(b1), to_f64(b2), to_f64(h1), to_f64(h2));
            total += w * (x + y);
        }
    }
    total
}

/// Power needed to carry `rate` in a `share` fraction of the slot.
pub fn tdma_power(rate: f64, gain: f64, share: f64) -> f64 {
    if rate == 0.0 {
        return 0.0;
    }
    share * capacity_power(rate / share) / gain
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StdmCurve {
    pub gain: f64,
    pub share: f64,
}

impl PowerCurve for StdmCurve {
    fn power(&self, rate: f64) -> f64 {
        tdma_power(rate.max(0.0), self.gain, self.share)
    }
}

pub fn stdm_curve(gain: f64, share: f64) -> StdmCurve {
    StdmCurve { gain, share }
}

/// Expected sum-power when user 1 owns a `tau` fraction of every slot.
pub fn tdma_average(laws: &[RateFadingLaw; 2], tau: f64) -> f64 {
    let one = |law: &RateFadingLaw, share: f64| -> f64 {
        law.pairs()
            .iter()
            .filter(|(_, _, p)| to_f64(p) > 0.0)
            .map(|(b, h, p)| to_f64(p) * tdma_power(to_f64(b), to_f64(h), share))
            .sum()
    };
    one(&laws[0], tau) + one(&laws[1], 1.0 - tau)
}

pub fn stdm_average(laws: &[RateFadingLaw; 2]) -> f64 {
    tdma_average(laws, 0.5)
}

const TAU_EPS: f64 = 1e-9;
const TAU_TOL: f64 = 1e-6;

/// Time share minimizing [`tdma_average`], by golden-section search. The
/// objective is convex in the share.
pub fn gtdm_optimize(laws: &[RateFadingLaw; 2]) -> (f64, f64) {
    let f = |t: f64| tdma_average(laws, t);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (TAU_EPS, 1.0 - TAU_EPS);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > TAU_TOL {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let tau = 0.5 * (a + b);
    let (cost, half) = (f(tau), f(0.5));
    // the bracket stops short of an interior optimum at exactly one half
    if half <= cost {
        (0.5, half)
    } else {
        (tau, cost)
    }
}
