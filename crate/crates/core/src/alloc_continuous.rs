//! Unit-delay allocation for continuous packet-size laws under fixed gains.
//!
//! User 1 has gain 1 and user 2 gain `alpha <= 1`. Both laws are mapped onto
//! a common quantile axis `x` in [0, 1]; user 1's law is compressed into
//! (1 - alpha, 1] above a rate-0 band. Along the axis the received powers
//! grow so that their sum stays at `2^{2(b1 + b2)} - 1`, each user taking the
//! share of the increment matching its share of the rate increment. User 2
//! starts at its single-user power.

use std::sync::Arc;

use serde::Serialize;

use crate::alloc_unit::capacity_power;
use crate::dist::{to_f64, DiscreteLaw};
use crate::error::{Error, Result};

pub const MIN_GRID: usize = 64;
const QUANTILE_TOL: f64 = 1e-10;
const MONOTONE_PROBES: usize = 1024;

type Cdf = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A packet-size law given by its CDF on `[lower, upper]`.
#[derive(Clone)]
pub struct ContinuousLaw {
    cdf: Cdf,
    lower: f64,
    upper: f64,
}

impl std::fmt::Debug for ContinuousLaw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ContinuousLaw")
            .field("lower", &self.lower)
            .field("upper", &self.upper)
            .finish_non_exhaustive()
    }
}

impl ContinuousLaw {
    pub fn new(cdf: impl Fn(f64) -> f64 + Send + Sync + 'static, lower: f64, upper: f64) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite() && 0.0 <= lower && lower <= upper) {
            return Err(Error::InvalidLaw(format!("support [{lower}, {upper}] must be finite and nonnegative")));
        }
        let below = lower - 1e-9 * lower.abs().max(1.0);
        if cdf(below).abs() > 1e-12 {
            return Err(Error::InvalidLaw(format!("cdf below the support is {}", cdf(below))));
        }
        if (cdf(upper) - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidLaw(format!("cdf at the upper bound is {}", cdf(upper))));
        }
        let mut prev = cdf(below);
        for k in 0..=MONOTONE_PROBES {
            let b = lower + (upper - lower) * k as f64 / MONOTONE_PROBES as f64;
            let v = cdf(b);
            if !v.is_finite() || v < prev - 1e-15 {
                return Err(Error::InvalidLaw(format!("cdf is not nondecreasing near {b}")));
            }
            prev = v;
        }
        Ok(Self {
            cdf: Arc::new(cdf),
            lower,
            upper,
        })
    }

    pub fn point(b: f64) -> Result<Self> {
        Self::new(move |x| if x >= b { 1.0 } else { 0.0 }, b, b)
    }

    pub fn uniform(a: f64, b: f64) -> Result<Self> {
        if !(a < b) {
            return Err(Error::InvalidLaw(format!("uniform law needs a < b, got [{a}, {b}]")));
        }
        Self::new(move |x| ((x - a) / (b - a)).clamp(0.0, 1.0), a, b)
    }

    /// Each atom spread uniformly over a window of `width` centred on it,
    /// shifted up where it would reach below zero.
    pub fn smoothed(law: &DiscreteLaw, width: f64) -> Result<Self> {
        if !(width > 0.0) {
            return Err(Error::InvalidLaw(format!("smoothing width {width} must be positive")));
        }
        let ramps: Vec<(f64, f64)> = law
            .support()
            .map(|a| ((to_f64(&a.value) - width / 2.0).max(0.0), to_f64(&a.prob)))
            .collect();
        let lower = ramps.first().map(|r| r.0).unwrap_or(0.0);
        let upper = ramps.last().map(|r| r.0 + width).unwrap_or(0.0);
        let cdf = move |x: f64| -> f64 {
            ramps
                .iter()
                .map(|&(start, p)| p * ((x - start) / width).clamp(0.0, 1.0))
                .sum::<f64>()
                .min(1.0)
        };
        Self::new(cdf, lower, upper)
    }

    pub fn cdf(&self, b: f64) -> f64 {
        (self.cdf)(b)
    }

    pub fn support(&self) -> (f64, f64) {
        (self.lower, self.upper)
    }

    /// Smallest `b` with `cdf(b) >= x`, by bisection.
    pub fn quantile(&self, x: f64) -> f64 {
        if x <= 0.0 || self.cdf(self.lower) >= x {
            return self.lower;
        }
        let (mut lo, mut hi) = (self.lower, self.upper);
        while hi - lo > QUANTILE_TOL {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) >= x {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct QuantileSample {
    pub quantile: f64,
    pub rate_1: f64,
    pub power_1: f64,
    pub rate_2: f64,
    pub power_2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContinuousAllocation {
    pub alpha: f64,
    pub samples: Vec<QuantileSample>,
    pub average_sum_power: f64,
    /// Largest deviation of the received sum from the sum-rate requirement.
    pub sum_residual: f64,
}

impl ContinuousAllocation {
    /// Distinct `(rate, power)` points of one user, ordered by rate.
    pub fn curve_points(&self, user: usize) -> Vec<(f64, f64)> {
        let mut pts: Vec<(f64, f64)> = self
            .samples
            .iter()
            .map(|s| if user == 0 { (s.rate_1, s.power_1) } else { (s.rate_2, s.power_2) })
            .collect();
        pts.dedup_by(|a, b| a.0 == b.0);
        pts
    }
}

/// Quantile-axis allocation sampled at `n_grid + 1` evenly spaced points
/// (plus the edge of user 1's rate-0 band).
pub fn allocate_continuous(
    law1: &ContinuousLaw,
    law2: &ContinuousLaw,
    alpha: f64,
    n_grid: usize,
) -> Result<ContinuousAllocation> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::OutOfRange(format!("gain ratio {alpha} must lie in (0, 1]")));
    }
    if n_grid < MIN_GRID {
        return Err(Error::OutOfRange(format!("quantile grid of {n_grid} points is below {MIN_GRID}")));
    }
    let band = 1.0 - alpha;
    let mut xs: Vec<f64> = (0..=n_grid).map(|k| k as f64 / n_grid as f64).collect();
    if band > 0.0 && !xs.contains(&band) {
        xs.push(band);
        xs.sort_by(f64::total_cmp);
    }
    let rate1 = |x: f64| if x <= band { 0.0 } else { law1.quantile((x - band) / alpha) };
    let y1: Vec<f64> = xs.iter().map(|&x| rate1(x)).collect();
    let y2: Vec<f64> = xs.iter().map(|&x| law2.quantile(x)).collect();

    let mut recv2 = capacity_power(y2[0]);
    let mut recv1 = capacity_power(y1[0] + y2[0]) - recv2;
    let mut samples = Vec::with_capacity(xs.len());
    let mut integral = 0.0;
    let mut residual: f64 = 0.0;
    for k in 0..xs.len() {
        if k > 0 {
            let (d1, d2) = (y1[k] - y1[k - 1], y2[k] - y2[k - 1]);
            let (u0, u1) = (y1[k - 1] + y2[k - 1], y1[k] + y2[k]);
            let du = d1 + d2;
            let inc = capacity_power(u1) - capacity_power(u0);
            if du > 0.0 {
                recv1 += inc * d1 / du;
                recv2 += inc * d2 / du;
            }
            // exact integral of 2^{2u} - 1 along the linear path in x
            let dx = xs[k] - xs[k - 1];
            let mean = if du > 1e-12 {
                inc / (2.0 * std::f64::consts::LN_2 * du) - 1.0
            } else {
                0.5 * (capacity_power(u0) + capacity_power(u1))
            };
            integral += dx * mean;
        }
        let u = y1[k] + y2[k];
        let (p1, p2) = (recv1, recv2 / alpha);
        if !(p1.is_finite() && p2.is_finite()) {
            return Err(Error::Quadrature(format!("non-finite power at quantile {}", xs[k])));
        }
        residual = residual.max((recv1 + recv2 - capacity_power(u)).abs());
        samples.push(QuantileSample {
            quantile: xs[k],
            rate_1: y1[k],
            power_1: p1,
            rate_2: y2[k],
            power_2: p2,
        });
    }
    if !integral.is_finite() {
        return Err(Error::Quadrature("average power diverged".into()));
    }
    Ok(ContinuousAllocation {
        alpha,
        samples,
        average_sum_power: integral / alpha,
        sum_residual: residual,
    })
}
