//! Seeded slot-by-slot simulation of scheduler and power-map pairs.
//!
//! Each replication draws from its own ChaCha8 streams: stream
//! `(rep << 32) | (user << 1) | kind`, where kind 0 is arrivals and 1 is
//! fading, all keyed by the base seed. Replications run in parallel and are
//! reduced in index order, so a report depends only on (config, seed).

use std::collections::BTreeMap;

use num::{One, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::alloc_unit::{allocate_dynamic, build_grid, first_violated_subset, AllocationReport, PowerTable};
use crate::curve::FadingCurve;
use crate::dist::{to_f64, DiscreteLaw, RateFadingLaw, Rational};
use crate::error::{Error, Result};
use crate::iteropt::fading_power_curves;
use crate::mdp::{dd_rate, robust_rate, step_state, DdState, QueueState, SchedulerPolicy};

const RATE_SLACK: f64 = 1e-9;
const BATCHES: u64 = 20;

#[derive(Clone, Debug)]
pub enum Scheduler {
    /// Serve the whole backlog every slot.
    Identity,
    Policy(SchedulerPolicy),
    Robust,
    /// Derivative-directed rate selection from the given starting estimate.
    Dd(DdState),
}

/// Transmit power as a function of the scheduled rate and the fading gain.
#[derive(Clone, Debug)]
pub enum PowerMap {
    /// Exact `(rate, gain, power)` entries; other rates are undefined.
    Entries(Vec<(f64, f64, f64)>),
    Curves(FadingCurve),
}

impl PowerMap {
    pub fn from_table(table: &PowerTable, user: usize) -> Self {
        PowerMap::Entries(
            table
                .entries(user)
                .iter()
                .map(|e| (to_f64(&e.rate), to_f64(&e.gain), e.power))
                .collect(),
        )
    }

    pub fn lookup(&self, rate: f64, gain: f64) -> Option<f64> {
        let close = |a: f64, b: f64| (a - b).abs() <= RATE_SLACK * a.abs().max(1.0);
        match self {
            PowerMap::Entries(e) => {
                let start = e.partition_point(|t| t.0 < rate - RATE_SLACK * rate.abs().max(1.0));
                e[start..]
                    .iter()
                    .take_while(|t| close(t.0, rate))
                    .find(|t| close(t.1, gain))
                    .map(|t| t.2)
            }
            PowerMap::Curves(c) => c.power(rate, gain),
        }
    }
}

#[derive(Clone, Debug)]
pub struct UserConfig {
    pub arrivals: DiscreteLaw,
    /// Power gains.
    pub fading: DiscreteLaw,
    pub scheduler: Scheduler,
    pub power: PowerMap,
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub slots: u64,
    pub reps: u32,
    pub seed: u64,
    pub dmax: usize,
    pub users: Vec<UserConfig>,
    /// Record per-slot rows for the first replication.
    pub trace: bool,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slots == 0 {
            return Err(Error::Config("sim.slots must be at least 1".into()));
        }
        if self.reps == 0 {
            return Err(Error::Config("sim.reps must be at least 1".into()));
        }
        if self.dmax == 0 {
            return Err(Error::Config("dmax must be at least 1".into()));
        }
        if self.users.is_empty() {
            return Err(Error::Config("at least one user is required".into()));
        }
        for (u, user) in self.users.iter().enumerate() {
            match (&user.scheduler, &user.power) {
                (Scheduler::Policy(p), _) if p.dmax() != self.dmax => {
                    return Err(Error::Config(format!("user {u}: scheduler D_max {} differs from {}", p.dmax(), self.dmax)));
                }
                (Scheduler::Dd(_), PowerMap::Entries(_)) => {
                    return Err(Error::Config(format!("user {u}: derivative-directed scheduling needs power curves")));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// One-slot delay: every user serves its arrivals with the allocated
    /// powers, over the laws the allocation was built on.
    pub fn unit_delay(report: &AllocationReport, slots: u64, reps: u32, seed: u64) -> Self {
        let users = report
            .laws
            .iter()
            .enumerate()
            .map(|(u, l)| UserConfig {
                arrivals: l.rate.clone(),
                fading: l.fading.clone(),
                scheduler: Scheduler::Identity,
                power: PowerMap::from_table(&report.table, u),
            })
            .collect();
        SimConfig {
            slots,
            reps,
            seed,
            dmax: 1,
            users,
            trace: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RateBin {
    pub rate: f64,
    pub count: u64,
    pub mean_power: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub slot: u64,
    pub user: usize,
    pub arrival: f64,
    pub fading: f64,
    pub rate: f64,
    pub power: f64,
    pub outage_flag: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimReport {
    pub slots: u64,
    pub reps: u32,
    pub average_sum_power: f64,
    /// Across replications, or across batch means for a single one.
    pub standard_error: Option<f64>,
    pub per_user_average: Vec<f64>,
    pub outages: u64,
    pub delay_violations: u64,
    pub rate_histograms: Vec<Vec<RateBin>>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<TraceRow>,
}

/// Cumulative probabilities for inverse-transform draws.
struct Sampler {
    values: Vec<f64>,
    cumulative: Vec<f64>,
}

impl Sampler {
    fn new(law: &DiscreteLaw) -> Self {
        let mut acc = 0.0;
        let mut values = Vec::new();
        let mut cumulative = Vec::new();
        for a in law.support() {
            acc += to_f64(&a.prob);
            values.push(to_f64(&a.value));
            cumulative.push(acc);
        }
        Self { values, cumulative }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        let u: f64 = rng.gen();
        let i = self.cumulative.partition_point(|&c| c <= u);
        self.values[i.min(self.values.len() - 1)]
    }
}

fn stream(seed: u64, rep: u32, user: usize, kind: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((rep as u64) << 32) | ((user as u64) << 1) | kind);
    rng
}

#[derive(Default)]
struct RepOutcome {
    total: f64,
    per_user: Vec<f64>,
    batches: Vec<f64>,
    outages: u64,
    violations: u64,
    bins: Vec<BTreeMap<i64, (u64, f64)>>,
    trace: Vec<TraceRow>,
}

fn run_rep(cfg: &SimConfig, rep: u32) -> Result<RepOutcome> {
    let n = cfg.users.len();
    let arrivals: Vec<Sampler> = cfg.users.iter().map(|u| Sampler::new(&u.arrivals)).collect();
    let fading: Vec<Sampler> = cfg.users.iter().map(|u| Sampler::new(&u.fading)).collect();
    let mut arr_rng: Vec<ChaCha8Rng> = (0..n).map(|u| stream(cfg.seed, rep, u, 0)).collect();
    let mut fad_rng: Vec<ChaCha8Rng> = (0..n).map(|u| stream(cfg.seed, rep, u, 1)).collect();
    let mut dd: Vec<Option<DdState>> = cfg
        .users
        .iter()
        .map(|u| match u.scheduler {
            Scheduler::Dd(s) => Some(s),
            _ => None,
        })
        .collect();
    let mut states: Vec<QueueState> = (0..n)
        .map(|u| {
            let mut s = QueueState::empty(cfg.dmax);
            s.0[cfg.dmax - 1] = arrivals[u].draw(&mut arr_rng[u]);
            s
        })
        .collect();

    let mut out = RepOutcome {
        per_user: vec![0.0; n],
        bins: vec![BTreeMap::new(); n],
        ..RepOutcome::default()
    };
    let batch_len = (cfg.slots / BATCHES).max(1);
    let mut batch_sum = 0.0;
    let mut rates = vec![0.0; n];
    let mut gains = vec![0.0; n];
    let mut powers = vec![0.0; n];
    for slot in 0..cfg.slots {
        for (u, user) in cfg.users.iter().enumerate() {
            let s = &states[u];
            let h = fading[u].draw(&mut fad_rng[u]);
            let rate = match &user.scheduler {
                Scheduler::Identity => s.total(),
                Scheduler::Policy(p) => p.rate(s)?,
                Scheduler::Robust => robust_rate(s),
                Scheduler::Dd(_) => {
                    let PowerMap::Curves(curve) = &user.power else {
                        unreachable!("validated")
                    };
                    let (rate, next) = dd_rate(s, h, dd[u].as_ref().expect("dd state"), curve)?;
                    dd[u] = Some(next);
                    rate
                }
            };
            let power = user.power.lookup(rate, h).ok_or(Error::MissingPower { user: u, rate, gain: h })?;
            rates[u] = rate;
            gains[u] = h;
            powers[u] = power;
        }
        let received: Vec<f64> = gains.iter().zip(&powers).map(|(g, p)| g * p).collect();
        let outage = first_violated_subset(&rates, &received).is_some();
        if outage {
            out.outages += 1;
        }
        let mut slot_power = 0.0;
        for u in 0..n {
            slot_power += powers[u];
            out.per_user[u] += powers[u];
            let bin = out.bins[u].entry((rates[u] / RATE_SLACK).round() as i64).or_insert((0, 0.0));
            bin.0 += 1;
            bin.1 += powers[u];
            let mut s = states[u].clone();
            if cfg.trace && rep == 0 {
                out.trace.push(TraceRow {
                    slot,
                    user: u,
                    arrival: s.0[cfg.dmax - 1],
                    fading: gains[u],
                    rate: rates[u],
                    power: powers[u],
                    outage_flag: outage,
                });
            }
            let rate = rates[u].min(s.total());
            if rate < s.urgent() - RATE_SLACK * s.urgent().max(1.0) {
                out.violations += 1;
                // the unserved deadline bits are dropped
                s.0[0] = rate;
            }
            let next = arrivals[u].draw(&mut arr_rng[u]);
            states[u] = step_state(&s, rate.max(s.urgent()), next)?;
        }
        out.total += slot_power;
        batch_sum += slot_power;
        if (slot + 1) % batch_len == 0 {
            out.batches.push(batch_sum / batch_len as f64);
            batch_sum = 0.0;
        }
    }
    Ok(out)
}

fn standard_error(samples: &[f64]) -> Option<f64> {
    let k = samples.len();
    if k < 2 {
        return None;
    }
    let mean = samples.iter().sum::<f64>() / k as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    Some((var / k as f64).sqrt())
}

pub fn run(cfg: &SimConfig) -> Result<SimReport> {
    cfg.validate()?;
    let outcomes = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| run_rep(cfg, rep))
        .collect::<Result<Vec<_>>>()?;
    let n = cfg.users.len();
    let total_slots = cfg.slots * cfg.reps as u64;
    let mut per_user = vec![0.0; n];
    let mut bins: Vec<BTreeMap<i64, (u64, f64)>> = vec![BTreeMap::new(); n];
    let (mut outages, mut violations, mut total) = (0, 0, 0.0);
    let mut rep_means = Vec::with_capacity(outcomes.len());
    for o in &outcomes {
        total += o.total;
        rep_means.push(o.total / cfg.slots as f64);
        outages += o.outages;
        violations += o.violations;
        for u in 0..n {
            per_user[u] += o.per_user[u];
            for (k, (c, p)) in &o.bins[u] {
                let e = bins[u].entry(*k).or_insert((0, 0.0));
                e.0 += c;
                e.1 += p;
            }
        }
    }
    let standard_error = if cfg.reps >= 2 {
        standard_error(&rep_means)
    } else {
        standard_error(&outcomes[0].batches)
    };
    let mut outcomes = outcomes;
    Ok(SimReport {
        slots: cfg.slots,
        reps: cfg.reps,
        average_sum_power: total / total_slots as f64,
        standard_error,
        per_user_average: per_user.iter().map(|p| p / total_slots as f64).collect(),
        outages,
        delay_violations: violations,
        rate_histograms: bins
            .into_iter()
            .map(|b| {
                b.into_iter()
                    .map(|(k, (c, p))| RateBin {
                        rate: k as f64 * RATE_SLACK,
                        count: c,
                        mean_power: p / c as f64,
                    })
                    .collect()
            })
            .collect(),
        trace: std::mem::take(&mut outcomes[0].trace),
    })
}

/// Settings for the derivative-directed pipeline under time-varying fading.
#[derive(Clone, Debug)]
pub struct DdSpec {
    pub arrivals: Vec<DiscreteLaw>,
    pub fading: Vec<DiscreteLaw>,
    pub dmax: usize,
    pub slots: u64,
    pub reps: u32,
    pub seed: u64,
    pub smoothing: f64,
}

/// Per-user curves from the one-slot allocation extended to the largest
/// backlog, each user starting from the expected slope at its mean arrival.
pub fn dd_config(spec: &DdSpec) -> Result<SimConfig> {
    if spec.arrivals.len() != spec.fading.len() {
        return Err(Error::Config("one fading law per user is required".into()));
    }
    let laws = spec
        .arrivals
        .iter()
        .zip(&spec.fading)
        .map(|(a, f)| RateFadingLaw::new(a.clone(), f.clone()))
        .collect::<Result<Vec<_>>>()?;
    let report = allocate_dynamic(&build_grid(&laws)?)?;
    let top = spec.arrivals.iter().map(|a| a.max_support().clone()).max().unwrap_or_else(Rational::zero);
    let r_max = Rational::from_integer(spec.dmax.into()) * top.max(Rational::one());
    let curves = fading_power_curves(&report, &r_max)?;
    let users = spec
        .arrivals
        .iter()
        .zip(&spec.fading)
        .zip(curves)
        .map(|((a, f), curve)| {
            let mean = to_f64(&a.mean());
            let slope = f.expected_value(|g| curve.for_gain(to_f64(g)).map_or(0.0, |c| c.right_derivative(mean)));
            Ok(UserConfig {
                arrivals: a.clone(),
                fading: f.clone(),
                scheduler: Scheduler::Dd(DdState::new(slope, spec.smoothing)?),
                power: PowerMap::Curves(curve),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SimConfig {
        slots: spec.slots,
        reps: spec.reps,
        seed: spec.seed,
        dmax: spec.dmax,
        users,
        trace: false,
    })
}

pub fn run_dd_fading(spec: &DdSpec) -> Result<SimReport> {
    run(&dd_config(spec)?)
}

/// `P(B = k) = p (1-p)^k / (1 - (1-p)^levels)` for `k = 0..levels`.
pub fn truncated_geometric(p: &Rational, levels: usize) -> Result<DiscreteLaw> {
    if !(p > &Rational::zero() && p <= &Rational::one()) || levels == 0 {
        return Err(Error::InvalidLaw(format!("truncated geometric needs p in (0, 1] and levels >= 1, got {p}, {levels}")));
    }
    let q = Rational::one() - p;
    let mut pow = Rational::one();
    let mut pairs = Vec::with_capacity(levels);
    for k in 0..levels {
        pairs.push((Rational::from_integer(k.into()), p * &pow));
        pow *= &q;
    }
    let norm = Rational::one() - pow;
    DiscreteLaw::new(pairs.into_iter().map(|(v, w)| (v, w / &norm)).collect())
}

/// Uniform amplitudes `scale * k` for `k = 1..=levels`, as power gains.
pub fn amplitude_fading(scale: &Rational, levels: i64) -> Result<DiscreteLaw> {
    DiscreteLaw::uniform((1..=levels).map(|k| {
        let a = scale * Rational::from_integer(k.into());
        &a * &a
    }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alloc_unit::allocate_fixed;
    use crate::dist::{int, rational};

    fn bernoulli() -> DiscreteLaw {
        DiscreteLaw::new(vec![(int(1), rational(3, 4)), (int(2), rational(1, 4))]).unwrap()
    }

    fn bernoulli_config(slots: u64, reps: u32, seed: u64) -> SimConfig {
        let report = allocate_fixed(&bernoulli(), &bernoulli(), &int(1), &int(1)).unwrap();
        SimConfig::unit_delay(&report, slots, reps, seed)
    }

    #[test]
    fn bernoulli_average_and_reproducibility() {
        let cfg = bernoulli_config(20_000, 1, 7);
        let a = run(&cfg).unwrap();
        assert_eq!(a.outages, 0);
        assert_eq!(a.delay_violations, 0);
        assert!((a.average_sum_power - 75.0).abs() < 0.05 * 75.0);
        let b = run(&cfg).unwrap();
        assert_eq!(a, b);
        let c = run(&bernoulli_config(20_000, 1, 8)).unwrap();
        assert_ne!(a.average_sum_power, c.average_sum_power);
        assert!(a.standard_error.unwrap() > 0.0);
    }

    #[test]
    fn replicated_runs_are_reproducible() {
        let cfg = bernoulli_config(2_000, 4, 3);
        let r = run(&cfg).unwrap();
        assert_eq!(r, run(&cfg).unwrap());
        assert!(r.standard_error.unwrap() > 0.0);
        assert_eq!(r.rate_histograms[0].iter().map(|b| b.count).sum::<u64>(), 8_000);
        let p = &r.rate_histograms[0];
        assert_eq!(p.iter().map(|b| b.rate).collect::<Vec<_>>(), vec![1.0, 2.0]);
        assert_eq!(p[0].mean_power, 12.0);
    }

    #[test]
    fn zero_arrivals_cost_nothing() {
        let zero = DiscreteLaw::point(int(0));
        let report = allocate_fixed(&zero, &zero, &int(1), &int(2)).unwrap();
        let r = run(&SimConfig::unit_delay(&report, 500, 2, 1)).unwrap();
        assert_eq!(r.average_sum_power, 0.0);
        assert_eq!(r.outages, 0);
    }

    #[test]
    fn missing_power_is_fatal_and_outages_are_counted() {
        let report = allocate_fixed(&bernoulli(), &bernoulli(), &int(1), &int(1)).unwrap();
        let mut cfg = SimConfig::unit_delay(&report, 200, 1, 1);
        cfg.users[0].power = PowerMap::Entries(vec![(1.0, 1.0, 12.0)]);
        assert!(matches!(run(&cfg), Err(Error::MissingPower { user: 0, .. })));
        // halve every power of user 0: some tuples now fall outside the region
        let mut cfg = SimConfig::unit_delay(&report, 200, 1, 1);
        if let PowerMap::Entries(e) = &mut cfg.users[0].power {
            for t in e.iter_mut() {
                t.2 *= 0.5;
            }
        }
        assert!(run(&cfg).unwrap().outages > 0);
        assert!(run(&SimConfig { slots: 0, ..cfg }).is_err());
    }

    #[test]
    fn trace_rows() {
        let mut cfg = bernoulli_config(10, 2, 5);
        cfg.trace = true;
        let r = run(&cfg).unwrap();
        assert_eq!(r.trace.len(), 20);
        assert!(r.trace.iter().all(|t| t.rate == t.arrival && !t.outage_flag));
    }

    #[test]
    fn policies_meet_deadlines() {
        let u = DiscreteLaw::uniform(vec![int(1), int(2), int(3)]).unwrap();
        let report = allocate_fixed(&u, &u, &int(10), &int(1)).unwrap();
        let curves = fading_power_curves(&report, &int(6)).unwrap();
        let via = crate::mdp::value_iteration(&curves[0].curves[0].1, &u, 2, &Default::default()).unwrap();
        let users = vec![
            UserConfig {
                arrivals: u.clone(),
                fading: DiscreteLaw::point(int(10)),
                scheduler: Scheduler::Policy(via),
                power: PowerMap::Curves(curves[0].clone()),
            },
            UserConfig {
                arrivals: u.clone(),
                fading: DiscreteLaw::point(int(1)),
                scheduler: Scheduler::Robust,
                power: PowerMap::Curves(curves[1].clone()),
            },
        ];
        let cfg = SimConfig {
            slots: 5_000,
            reps: 2,
            seed: 11,
            dmax: 2,
            users,
            trace: false,
        };
        let r = run(&cfg).unwrap();
        assert_eq!(r.delay_violations, 0);
        assert_eq!(r.outages, 0);
    }

    fn dd_spec(dmax: usize, smoothing: f64) -> DdSpec {
        DdSpec {
            arrivals: vec![DiscreteLaw::uniform((0..=4).map(int).collect()).unwrap(); 2],
            fading: vec![
                DiscreteLaw::uniform(vec![int(3), int(4)]).unwrap(),
                DiscreteLaw::uniform(vec![int(1), int(2)]).unwrap(),
            ],
            dmax,
            slots: 5_000,
            reps: 2,
            seed: 21,
            smoothing,
        }
    }

    #[test]
    fn dd_unit_delay_equals_identity() {
        let spec = dd_spec(1, 0.9);
        let dd = run_dd_fading(&spec).unwrap();
        let mut cfg = dd_config(&spec).unwrap();
        for u in &mut cfg.users {
            u.scheduler = Scheduler::Identity;
        }
        let id = run(&cfg).unwrap();
        assert_eq!(dd.average_sum_power, id.average_sum_power);
        assert_eq!(dd.outages, 0);
        assert_eq!(dd.delay_violations, 0);
    }

    #[test]
    fn dd_without_smoothing_update_keeps_its_estimate() {
        let cfg = dd_config(&dd_spec(2, 1.0)).unwrap();
        let Scheduler::Dd(start) = cfg.users[0].scheduler else { panic!() };
        let PowerMap::Curves(curve) = &cfg.users[0].power else { panic!() };
        let mut d = start;
        let mut s = QueueState(vec![1.0, 3.0]);
        for a in [0.0, 4.0, 2.0, 1.0] {
            let (rate, next) = dd_rate(&s, 3.0, &d, curve).unwrap();
            assert_eq!(next.derivative, start.derivative);
            d = next;
            s = step_state(&s, rate, a).unwrap();
        }
    }

    #[test]
    fn dd_meets_deadlines_for_longer_delays() {
        for dmax in 2..=3 {
            let r = run_dd_fading(&dd_spec(dmax, 0.9)).unwrap();
            assert_eq!(r.delay_violations, 0);
            assert_eq!(r.outages, 0);
        }
    }

    #[test]
    fn presets() {
        let g = truncated_geometric(&rational(1, 4), 5).unwrap();
        let norm = 1.0 - 0.75f64.powi(5);
        for (k, a) in g.atoms().iter().enumerate() {
            assert_eq!(a.value, int(k as i64));
            assert!((to_f64(&a.prob) - 0.25 * 0.75f64.powi(k as i32) / norm).abs() < 1e-15);
        }
        let f = amplitude_fading(&int(2), 5).unwrap();
        assert_eq!(f.values().cloned().collect::<Vec<_>>(), vec![int(4), int(16), int(36), int(64), int(100)]);
        assert!(truncated_geometric(&int(0), 5).is_err());
    }
}
