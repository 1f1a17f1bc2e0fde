//! Alternating optimization of per-user schedulers and the joint power
//! allocation for delay bounds longer than one slot.
//!
//! Each round turns the current allocation into one convex rate-power curve
//! per user, re-solves every user's scheduler against its curve, pushes the
//! arrivals through the new schedulers and re-allocates on the resulting
//! rate laws.

use num::bigint::BigInt;
use num::{Integer, One, Signed, ToPrimitive, Zero};
use serde::Serialize;

use crate::alloc_unit::{allocate_dynamic, allocate_fixed, build_grid, AllocationReport, PowerTable};
use crate::baselines::stdm_curve;
use crate::curve::{FadingCurve, PiecewiseLinear, PowerCurve};
use crate::dist::{to_f64, DiscreteLaw, RateFadingLaw, Rational};
use crate::error::{Error, Result};
use crate::mdp::{stationary_rate_law, value_iteration, SchedulerPolicy, ViConfig};

/// Upper bound on zero-probability atoms added per user when extending a
/// curve; coarser steps are used beyond it.
pub const MAX_DUMMIES: usize = 512;

fn rational_gcd(a: &Rational, b: &Rational) -> Rational {
    let num = (a.numer() * b.denom()).gcd(&(b.numer() * a.denom()));
    Rational::new(num, a.denom() * b.denom())
}

/// Largest step dividing every positive value.
fn quantum<'a>(values: impl IntoIterator<Item = &'a Rational>) -> Option<Rational> {
    values
        .into_iter()
        .filter(|v| v.is_positive())
        .fold(None, |acc: Option<Rational>, v| Some(acc.map_or(v.clone(), |g| rational_gcd(&g, v))))
}

/// Dummy rates strictly above `top` up to and including `r_max`.
fn dummy_rates(top: &Rational, r_max: &Rational, step: &Rational) -> Vec<Rational> {
    if r_max <= top {
        return Vec::new();
    }
    let span = r_max - top;
    let count = (&span / step).ceil().to_integer().to_usize().unwrap_or(usize::MAX);
    let step = if count > MAX_DUMMIES {
        span / Rational::from_integer(BigInt::from(MAX_DUMMIES))
    } else {
        step.clone()
    };
    let mut out = Vec::new();
    let mut r = top + &step;
    while &r < r_max {
        out.push(r.clone());
        r += &step;
    }
    out.push(r_max.clone());
    out
}

/// Allocation on the report's laws with every user's rates extended by
/// zero-probability atoms up to `r_max`. Positive-probability entries keep
/// their powers.
pub fn extended_allocation(report: &AllocationReport, r_max: &Rational) -> Result<AllocationReport> {
    let laws = &report.laws;
    if laws.is_empty() {
        return Err(Error::Config("allocation report carries no laws".into()));
    }
    for (u, law) in laws.iter().enumerate() {
        let top = law.rate.max_support();
        if r_max < top {
            return Err(Error::OutOfRange(format!(
                "r_max {} is below user {u}'s largest assigned rate {}",
                to_f64(r_max),
                to_f64(top)
            )));
        }
    }
    let step = quantum(laws.iter().flat_map(|l| l.rate.values()).chain([r_max])).unwrap_or_else(Rational::one);
    let extended = laws
        .iter()
        .map(|l| {
            let rates = l.rate.with_dummies(dummy_rates(l.rate.max_value(), r_max, &step));
            RateFadingLaw::new(rates, l.fading.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    allocate_dynamic(&build_grid(&extended)?)
}

fn curve_for(table: &PowerTable, user: usize, gain: &Rational) -> Result<PiecewiseLinear> {
    PiecewiseLinear::new(
        table
            .entries(user)
            .iter()
            .filter(|e| &e.gain == gain)
            .map(|e| (to_f64(&e.rate), e.power)),
    )
}

fn fixed_gain(law: &RateFadingLaw, user: usize) -> Result<&Rational> {
    match law.fading.atoms() {
        [a] => Ok(&a.value),
        _ => Err(Error::Config(format!("user {user} has a time-varying gain; use per-gain curves"))),
    }
}

/// Rate-power curve of `user` under fixed fading: linear time-sharing
/// between assigned rates, extended to `r_max`.
pub fn rate_power_curve(report: &AllocationReport, user: usize, r_max: &Rational) -> Result<PiecewiseLinear> {
    Ok(rate_power_curves(report, r_max)?.swap_remove(user))
}

pub fn rate_power_curves(report: &AllocationReport, r_max: &Rational) -> Result<Vec<PiecewiseLinear>> {
    let ext = extended_allocation(report, r_max)?;
    report
        .laws
        .iter()
        .enumerate()
        .map(|(u, law)| curve_for(&ext.table, u, fixed_gain(law, u)?))
        .collect()
}

/// One rate-power curve per gain for every user.
pub fn fading_power_curves(report: &AllocationReport, r_max: &Rational) -> Result<Vec<FadingCurve>> {
    let ext = extended_allocation(report, r_max)?;
    report
        .laws
        .iter()
        .enumerate()
        .map(|(u, law)| {
            let curves = law
                .fading
                .values()
                .map(|g| Ok((to_f64(g), curve_for(&ext.table, u, g)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(FadingCurve { curves })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub enum Init {
    /// Every user serves its whole backlog each slot.
    UnitDelay,
    /// Schedulers solved against half-slot time-division curves.
    Tdma,
    /// Caller-supplied schedulers, refined to the configured quantum.
    Schedulers(Vec<SchedulerPolicy>),
}

#[derive(Clone, Debug)]
pub struct IterOptConfig {
    pub vi: ViConfig,
    pub halt_tol: f64,
    pub max_iterations: usize,
    pub init: Init,
}

impl Default for IterOptConfig {
    fn default() -> Self {
        Self {
            vi: ViConfig::default(),
            halt_tol: 1e-6,
            max_iterations: 50,
            init: Init::UnitDelay,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct IterationRecord {
    pub schedulers: Vec<SchedulerPolicy>,
    /// `true` where the re-solved scheduler was no cheaper on the current
    /// curve and the previous one was kept.
    pub retained: Vec<bool>,
    pub laws: Vec<DiscreteLaw>,
    pub table: PowerTable,
    pub average: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HaltReason {
    Converged,
    MaxIterations,
    UnitDelay,
}

#[derive(Clone, Debug, Serialize)]
pub struct IterOptTrace {
    pub iterations: Vec<IterationRecord>,
    pub halt: HaltReason,
    /// Curves built from the final allocation.
    pub curves: Vec<PiecewiseLinear>,
}

impl IterOptTrace {
    pub fn last(&self) -> &IterationRecord {
        self.iterations.last().expect("at least the initial record")
    }

    pub fn final_average(&self) -> f64 {
        self.last().average
    }

    /// Number of refinement rounds after the initial allocation.
    pub fn refinements(&self) -> usize {
        self.iterations.len() - 1
    }
}

fn expected_cost(law: &DiscreteLaw, curve: &dyn PowerCurve) -> f64 {
    law.expected_value(|b| curve.power(to_f64(b)))
}

fn initial_schedulers(
    arrivals: &[DiscreteLaw],
    gains: &[Rational],
    dmax: usize,
    cfg: &IterOptConfig,
) -> Result<Vec<SchedulerPolicy>> {
    match &cfg.init {
        Init::UnitDelay => arrivals
            .iter()
            .map(|a| SchedulerPolicy::transmit_all(a, dmax, &cfg.vi.delta))
            .collect(),
        Init::Tdma => arrivals
            .iter()
            .zip(gains)
            .map(|(a, g)| value_iteration(&stdm_curve(to_f64(g), 0.5), a, dmax, &cfg.vi))
            .collect(),
        Init::Schedulers(s) => {
            if s.len() != arrivals.len() {
                return Err(Error::Config(format!("{} initial schedulers for {} users", s.len(), arrivals.len())));
            }
            s.iter()
                .map(|p| {
                    if p.dmax() != dmax {
                        return Err(Error::Config(format!("initial scheduler has D_max {}, expected {dmax}", p.dmax())));
                    }
                    p.refine(&cfg.vi.delta)
                })
                .collect()
        }
    }
}

/// Two-user alternating optimization under fixed gains.
pub fn iteropt(arrivals: &[DiscreteLaw; 2], gains: &[Rational; 2], dmax: usize, cfg: &IterOptConfig) -> Result<IterOptTrace> {
    cfg.vi.validate()?;
    if dmax == 0 {
        return Err(Error::OutOfRange("D_max must be at least 1".into()));
    }
    if let Some(g) = gains.iter().find(|g| !g.is_positive()) {
        return Err(Error::NonPositiveGain(to_f64(g)));
    }
    let r_max = Rational::from_integer(BigInt::from(dmax))
        * arrivals.iter().map(|a| a.max_support().clone()).max().unwrap_or_else(Rational::zero);
    let allocate = |laws: &[DiscreteLaw]| allocate_fixed(&laws[0], &laws[1], &gains[0], &gains[1]);

    let mut schedulers = initial_schedulers(arrivals, gains, dmax, cfg)?;
    let mut laws = schedulers
        .iter()
        .zip(arrivals)
        .map(|(s, a)| stationary_rate_law(s, a))
        .collect::<Result<Vec<_>>>()?;
    let mut report = allocate(&laws)?;
    let mut records = vec![IterationRecord {
        schedulers: schedulers.clone(),
        retained: vec![false; 2],
        laws: laws.clone(),
        table: report.table.clone(),
        average: report.achieved,
    }];
    let mut curves = rate_power_curves(&report, &r_max)?;
    if dmax == 1 {
        return Ok(IterOptTrace {
            iterations: records,
            halt: HaltReason::UnitDelay,
            curves,
        });
    }

    let mut halt = HaltReason::MaxIterations;
    for iteration in 1..=cfg.max_iterations {
        let solve = |u: usize| value_iteration(&curves[u], &arrivals[u], dmax, &cfg.vi);
        let (c0, c1) = rayon::join(|| solve(0), || solve(1));
        let mut retained = vec![false; 2];
        for (u, candidate) in [c0?, c1?].into_iter().enumerate() {
            let law = stationary_rate_law(&candidate, &arrivals[u])?;
            let new_cost = expected_cost(&law, &curves[u]);
            let old_cost = expected_cost(&laws[u], &curves[u]);
            if new_cost <= old_cost + 1e-12 * old_cost.abs().max(1.0) {
                schedulers[u] = candidate;
                laws[u] = law;
            } else {
                retained[u] = true;
            }
        }
        let previous = report.achieved;
        report = allocate(&laws)?;
        if report.achieved > previous + 1e-9 * previous.abs().max(1.0) {
            return Err(Error::NonMonotone {
                iteration,
                previous,
                current: report.achieved,
            });
        }
        records.push(IterationRecord {
            schedulers: schedulers.clone(),
            retained,
            laws: laws.clone(),
            table: report.table.clone(),
            average: report.achieved,
        });
        curves = rate_power_curves(&report, &r_max)?;
        if (previous - report.achieved).abs() < cfg.halt_tol {
            halt = HaltReason::Converged;
            break;
        }
    }
    Ok(IterOptTrace {
        iterations: records,
        halt,
        curves,
    })
}
