//! Rate-to-power curves.

use serde::Serialize;

use crate::error::{Error, Result};

pub trait PowerCurve: Sync {
    fn power(&self, rate: f64) -> f64;
}

impl<F> PowerCurve for F
where
    F: Fn(f64) -> f64 + Sync,
{
    fn power(&self, rate: f64) -> f64 {
        self(rate)
    }
}

/// Linear interpolation between `(rate, power)` knots, starting at `(0, 0)`.
/// Beyond the last knot the last slope continues.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PiecewiseLinear {
    knots: Vec<(f64, f64)>,
}

impl PiecewiseLinear {
    pub fn new(points: impl IntoIterator<Item = (f64, f64)>) -> Result<Self> {
        let mut knots: Vec<(f64, f64)> = points.into_iter().collect();
        if knots.iter().any(|&(r, p)| !r.is_finite() || !p.is_finite() || r < 0.0) {
            return Err(Error::OutOfRange("curve knots must be finite with nonnegative rates".into()));
        }
        knots.push((0.0, 0.0));
        knots.sort_by(|a, b| a.0.total_cmp(&b.0));
        knots.dedup_by(|next, kept| {
            if next.0 == kept.0 {
                kept.1 = kept.1.max(next.1);
                true
            } else {
                false
            }
        });
        if knots[0].1 != 0.0 {
            return Err(Error::OutOfRange(format!("power at rate 0 is {}", knots[0].1)));
        }
        Ok(Self { knots })
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn max_rate(&self) -> f64 {
        self.knots.last().unwrap().0
    }

    fn slope(&self, i: usize) -> f64 {
        let (r0, p0) = self.knots[i];
        let (r1, p1) = self.knots[i + 1];
        (p1 - p0) / (r1 - r0)
    }

    fn last_slope(&self) -> f64 {
        if self.knots.len() < 2 {
            0.0
        } else {
            self.slope(self.knots.len() - 2)
        }
    }

    /// Slope of the segment starting at or containing `rate`; the last
    /// segment's slope at and beyond the final knot.
    pub fn right_derivative(&self, rate: f64) -> f64 {
        if self.knots.len() < 2 {
            return 0.0;
        }
        let i = self.knots.partition_point(|k| k.0 <= rate);
        if i == 0 {
            self.slope(0)
        } else if i >= self.knots.len() {
            self.last_slope()
        } else {
            self.slope(i - 1)
        }
    }

    /// Largest rate whose right-derivative does not exceed `slope`; 0 when
    /// even the first segment is steeper.
    pub fn rate_at_slope(&self, slope: f64) -> f64 {
        let mut rate = 0.0;
        for i in 0..self.knots.len().saturating_sub(1) {
            if self.slope(i) <= slope {
                rate = self.knots[i + 1].0;
            } else {
                break;
            }
        }
        rate
    }

    /// Nondecreasing with nondecreasing slopes, up to `tol` relative slack.
    pub fn is_convex_nondecreasing(&self, tol: f64) -> bool {
        check_convex_nondecreasing(&self.knots, tol)
    }
}

impl PowerCurve for PiecewiseLinear {
    fn power(&self, rate: f64) -> f64 {
        if rate <= 0.0 {
            return 0.0;
        }
        let i = self.knots.partition_point(|k| k.0 <= rate);
        if i >= self.knots.len() {
            let (r, p) = *self.knots.last().unwrap();
            return p + self.last_slope() * (rate - r);
        }
        let (r0, p0) = self.knots[i - 1];
        let (r1, p1) = self.knots[i];
        p0 + (p1 - p0) * (rate - r0) / (r1 - r0)
    }
}

/// `points` sorted by rate: checks monotonicity and that successive slopes do
/// not decrease by more than `tol` times their magnitude.
pub fn check_convex_nondecreasing(points: &[(f64, f64)], tol: f64) -> bool {
    let mut prev_slope: Option<f64> = None;
    for w in points.windows(2) {
        let (r0, p0) = w[0];
        let (r1, p1) = w[1];
        if r1 < r0 {
            return false;
        }
        if p1 < p0 - tol * p0.abs().max(1.0) {
            return false;
        }
        if r1 == r0 {
            continue;
        }
        let s = (p1 - p0) / (r1 - r0);
        if let Some(ps) = prev_slope {
            if s < ps - tol * ps.abs().max(1.0) {
                return false;
            }
        }
        prev_slope = Some(s);
    }
    true
}

/// One piecewise-linear curve per fading gain.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FadingCurve {
    pub curves: Vec<(f64, PiecewiseLinear)>,
}

impl FadingCurve {
    pub fn for_gain(&self, gain: f64) -> Option<&PiecewiseLinear> {
        self.curves
            .iter()
            .find(|(g, _)| (g - gain).abs() <= 1e-12 * g.abs().max(1.0))
            .map(|(_, c)| c)
    }

    pub fn power(&self, rate: f64, gain: f64) -> Option<f64> {
        self.for_gain(gain).map(|c| c.power(rate))
    }
}
