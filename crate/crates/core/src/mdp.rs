//! Single-user delay-constrained scheduling.
//!
//! A queue state lists backlog by remaining deadline: entry 0 must leave in
//! the current slot, entry `D_max - 1` arrived this slot. Service is
//! earliest-deadline-first. Rates on a scheduling grid are held internally
//! as integer multiples of the quantum `delta`.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;

use num::{Signed, ToPrimitive, Zero};
use rayon::prelude::*;
use serde::ser::SerializeStruct;
use serde::{Serialize, Serializer};

use crate::curve::{FadingCurve, PowerCurve};
use crate::dist::{snap, to_f64, DiscreteLaw, Rational};
use crate::error::{Error, Result};

pub const DEFAULT_GAMMA: f64 = 0.99;
pub const DEFAULT_SMOOTHING: f64 = 0.9;

const RATE_SLACK: f64 = 1e-9;
const TIE_TOLERANCE: f64 = 1e-11;
const DENSE_SOLVE_LIMIT: usize = 600;

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct QueueState(pub Vec<f64>);

impl QueueState {
    pub fn empty(dmax: usize) -> Self {
        Self(vec![0.0; dmax])
    }

    pub fn dmax(&self) -> usize {
        self.0.len()
    }

    pub fn urgent(&self) -> f64 {
        self.0[0]
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Serves `action` earliest-deadline-first, ages the remainder by one slot
/// and appends `arrival` with the longest deadline.
pub fn step_state(s: &QueueState, action: f64, arrival: f64) -> Result<QueueState> {
    if s.0.is_empty() {
        return Err(Error::OutOfRange("queue state needs at least one entry".into()));
    }
    if !(arrival >= 0.0) || !arrival.is_finite() {
        return Err(Error::OutOfRange(format!("arrival {arrival} must be finite and nonnegative")));
    }
    let slack = RATE_SLACK * s.total().max(1.0);
    if !(action >= s.urgent() - slack) {
        return Err(Error::InvalidAction {
            state: s.0.clone(),
            action,
            reason: "leaves deadline-critical bits unserved",
        });
    }
    if action > s.total() + slack {
        return Err(Error::InvalidAction {
            state: s.0.clone(),
            action,
            reason: "exceeds the backlog",
        });
    }
    let mut left = action;
    let mut rest = s.0.clone();
    for x in rest.iter_mut() {
        let take = left.min(*x);
        *x -= take;
        left -= take;
        if *x <= slack {
            *x = 0.0;
        }
    }
    rest.remove(0);
    rest.push(arrival);
    Ok(QueueState(rest))
}

/// Largest running average of the most urgent entries.
pub fn robust_rate(s: &QueueState) -> f64 {
    let mut acc = 0.0;
    let mut best: f64 = 0.0;
    for (d, x) in s.0.iter().enumerate() {
        acc += x;
        best = best.max(acc / (d + 1) as f64);
    }
    best
}

fn drain_units(state: &[u64], action: u64) -> Vec<u64> {
    let mut left = action;
    state
        .iter()
        .map(|&x| {
            let take = left.min(x);
            left -= take;
            x - take
        })
        .collect()
}

/// Residual carried to the next slot after serving `action` from `state`.
fn residual_after(state: &[u64], action: u64) -> Vec<u64> {
    let mut left = drain_units(state, action);
    left.remove(0);
    left
}

fn with_arrival(residual: &[u64], arrival: u64) -> Vec<u64> {
    let mut s = residual.to_vec();
    s.push(arrival);
    s
}

fn robust_units(state: &[u64]) -> u64 {
    let mut acc = 0u64;
    let mut best = 0u64;
    for (d, x) in state.iter().enumerate() {
        acc += x;
        best = best.max(acc.div_ceil(d as u64 + 1));
    }
    best
}

/// `value / delta` when it is a nonnegative integer.
fn to_units(value: &Rational, delta: &Rational) -> Option<u64> {
    let q = value / delta;
    if q.is_integer() && !q.is_negative() {
        q.to_integer().to_u64()
    } else {
        None
    }
}

fn check_grid(dmax: usize, delta: &Rational) -> Result<()> {
    if dmax == 0 {
        return Err(Error::OutOfRange("D_max must be at least 1".into()));
    }
    if !delta.is_positive() {
        return Err(Error::OutOfRange(format!("rate quantum {delta} must be positive")));
    }
    Ok(())
}

/// Positive-probability arrivals in units of `delta`.
fn arrival_units(arrivals: &DiscreteLaw, delta: &Rational) -> Result<Vec<(u64, Rational)>> {
    arrivals
        .support()
        .map(|a| {
            to_units(&a.value, delta)
                .map(|u| (u, a.prob.clone()))
                .ok_or_else(|| Error::Config(format!("arrival {} is not a multiple of the rate quantum {delta}", a.value)))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyMatrix {
    pub rows: Vec<f64>,
    pub cols: Vec<f64>,
    pub cells: Vec<Vec<Option<f64>>>,
}

impl fmt::Display for PolicyMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let cell = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v}"));
        let width = self
            .cells
            .iter()
            .flatten()
            .map(|&c| cell(c).len())
            .chain(self.cols.iter().map(|c| format!("{c}").len()))
            .max()
            .unwrap_or(1);
        let label = self.rows.iter().map(|r| format!("{r}").len()).max().unwrap_or(1);
        write!(f, "{:label$}  ", "")?;
        for c in &self.cols {
            write!(f, " {:>width$}", format!("{c}"))?;
        }
        writeln!(f)?;
        for (r, row) in self.rows.iter().zip(&self.cells) {
            write!(f, "{:>label$} [", format!("{r}"))?;
            for &c in row {
                write!(f, " {:>width$}", cell(c))?;
            }
            writeln!(f, " ]")?;
        }
        Ok(())
    }
}

/// Deterministic scheduler on the grid of multiples of `delta`.
#[derive(Clone, Debug, PartialEq)]
pub struct SchedulerPolicy {
    dmax: usize,
    delta: Rational,
    entries: BTreeMap<Vec<u64>, u64>,
}

impl SchedulerPolicy {
    /// Entries map states to rates, both in units of `delta`.
    pub fn new(dmax: usize, delta: Rational, entries: BTreeMap<Vec<u64>, u64>) -> Result<Self> {
        check_grid(dmax, &delta)?;
        for (s, &a) in &entries {
            if s.len() != dmax {
                return Err(Error::Config(format!("state {s:?} does not have {dmax} entries")));
            }
            let total: u64 = s.iter().sum();
            if a < s[0] || a > total {
                return Err(Error::InvalidAction {
                    state: s.iter().map(|&x| x as f64 * to_f64(&delta)).collect(),
                    action: a as f64 * to_f64(&delta),
                    reason: "outside [urgent backlog, total backlog]",
                });
            }
        }
        Ok(Self { dmax, delta, entries })
    }

    /// Policy applying `rule` on every state reachable under it from the
    /// empty queue.
    pub fn from_rule(
        arrivals: &DiscreteLaw,
        dmax: usize,
        delta: &Rational,
        rule: impl Fn(&[u64]) -> u64,
    ) -> Result<Self> {
        check_grid(dmax, delta)?;
        let arr = arrival_units(arrivals, delta)?;
        let mut entries = BTreeMap::new();
        let mut seen = HashMap::new();
        let mut queue = VecDeque::from([vec![0u64; dmax - 1]]);
        seen.insert(vec![0u64; dmax - 1], ());
        while let Some(r) = queue.pop_front() {
            for (a, _) in &arr {
                let s = with_arrival(&r, *a);
                let act = rule(&s);
                let next = residual_after(&s, act);
                entries.insert(s, act);
                if seen.insert(next.clone(), ()).is_none() {
                    queue.push_back(next);
                }
            }
        }
        Self::new(dmax, delta.clone(), entries)
    }

    /// Serves the whole backlog every slot.
    pub fn transmit_all(arrivals: &DiscreteLaw, dmax: usize, delta: &Rational) -> Result<Self> {
        Self::from_rule(arrivals, dmax, delta, |s| s.iter().sum())
    }

    /// Serves only the deadline-critical entry.
    pub fn transmit_urgent(arrivals: &DiscreteLaw, dmax: usize, delta: &Rational) -> Result<Self> {
        Self::from_rule(arrivals, dmax, delta, |s| s[0])
    }

    /// [`robust_rate`] rounded up to the grid.
    pub fn robust(arrivals: &DiscreteLaw, dmax: usize, delta: &Rational) -> Result<Self> {
        Self::from_rule(arrivals, dmax, delta, robust_units)
    }

    pub fn dmax(&self) -> usize {
        self.dmax
    }

    pub fn delta(&self) -> &Rational {
        &self.delta
    }

    pub fn entries(&self) -> &BTreeMap<Vec<u64>, u64> {
        &self.entries
    }

    pub fn action_units(&self, state: &[u64]) -> Option<u64> {
        self.entries.get(state).copied()
    }

    fn units_of(&self, s: &QueueState) -> Option<Vec<u64>> {
        let d = to_f64(&self.delta);
        s.0.iter()
            .map(|&x| {
                let k = (x / d).round();
                ((x - k * d).abs() <= RATE_SLACK * x.abs().max(1.0) && k >= 0.0).then_some(k as u64)
            })
            .collect()
    }

    /// Scheduled rate for a state on this policy's grid.
    pub fn rate(&self, s: &QueueState) -> Result<f64> {
        self.units_of(s)
            .and_then(|u| self.action_units(&u))
            .map(|a| a as f64 * to_f64(&self.delta))
            .ok_or_else(|| Error::Config(format!("policy has no action for state {:?}", s.0)))
    }

    /// Same decisions expressed on a finer grid; `delta` must divide the
    /// current quantum.
    pub fn refine(&self, delta: &Rational) -> Result<Self> {
        let ratio = to_units(&self.delta, delta)
            .filter(|&r| r > 0)
            .ok_or_else(|| Error::Config(format!("{delta} does not divide the quantum {}", self.delta)))?;
        let entries = self
            .entries
            .iter()
            .map(|(s, a)| (s.iter().map(|x| x * ratio).collect(), a * ratio))
            .collect();
        Self::new(self.dmax, delta.clone(), entries)
    }

    /// Row per urgent backlog, column per newest arrival; only for `D_max = 2`.
    pub fn matrix(&self) -> Option<PolicyMatrix> {
        if self.dmax != 2 {
            return None;
        }
        let d = to_f64(&self.delta);
        let rows: Vec<u64> = self.entries.keys().map(|s| s[0]).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let cols: Vec<u64> = self.entries.keys().map(|s| s[1]).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let cells = rows
            .iter()
            .map(|&r| {
                cols.iter()
                    .map(|&c| self.entries.get(&vec![r, c]).map(|&a| a as f64 * d))
                    .collect()
            })
            .collect();
        Some(PolicyMatrix {
            rows: rows.iter().map(|&r| r as f64 * d).collect(),
            cols: cols.iter().map(|&c| c as f64 * d).collect(),
            cells,
        })
    }
}

impl Serialize for SchedulerPolicy {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let d = to_f64(&self.delta);
        let entries: Vec<(Vec<f64>, f64)> = self
            .entries
            .iter()
            .map(|(s, a)| (s.iter().map(|&x| x as f64 * d).collect(), *a as f64 * d))
            .collect();
        let mut st = serializer.serialize_struct("SchedulerPolicy", 3)?;
        st.serialize_field("Dmax", &self.dmax)?;
        st.serialize_field("delta", &d)?;
        st.serialize_field("entries", &entries)?;
        st.end()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViConfig {
    pub gamma: f64,
    /// Sweeps stop once the sup-norm change falls below `tol` times the
    /// largest value magnitude.
    pub tol: f64,
    pub max_iterations: usize,
    pub delta: Rational,
}

impl Default for ViConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            tol: 1e-12,
            max_iterations: 1_000_000,
            delta: Rational::from_integer(1.into()),
        }
    }
}

impl ViConfig {
    pub fn with_delta(mut self, delta: Rational) -> Self {
        self.delta = delta;
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("discount {} must lie in (0, 1)", self.gamma)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tolerance {} must be positive", self.tol)));
        }
        if !self.delta.is_positive() {
            return Err(Error::Config(format!("rate quantum {} must be positive", self.delta)));
        }
        Ok(())
    }
}

/// Every state reachable from the empty queue under some feasible action,
/// with the post-decision residuals that link them.
#[derive(Clone, Debug)]
pub struct SchedulingMdp {
    dmax: usize,
    delta: Rational,
    states: Vec<Vec<u64>>,
    /// Per state, ascending actions with the residual each one leaves.
    actions: Vec<Vec<(u64, usize)>>,
    /// Per residual, the successor states and their probabilities.
    successors: Vec<Vec<(usize, f64)>>,
    max_units: u64,
}

impl SchedulingMdp {
    pub fn new(arrivals: &DiscreteLaw, dmax: usize, delta: &Rational) -> Result<Self> {
        check_grid(dmax, delta)?;
        let arr = arrival_units(arrivals, delta)?;
        let mut residual_index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut residuals: Vec<Vec<u64>> = Vec::new();
        let mut state_index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut states: Vec<Vec<u64>> = Vec::new();
        let mut actions: Vec<Vec<(u64, usize)>> = Vec::new();
        let mut successors: Vec<Vec<(usize, f64)>> = Vec::new();

        residual_index.insert(vec![0; dmax - 1], 0);
        residuals.push(vec![0; dmax - 1]);
        let mut next_residual = 0;
        while next_residual < residuals.len() {
            let r = residuals[next_residual].clone();
            let mut succ = Vec::with_capacity(arr.len());
            for (a, p) in &arr {
                let s = with_arrival(&r, *a);
                let si = match state_index.get(&s) {
                    Some(&i) => i,
                    None => {
                        let i = states.len();
                        state_index.insert(s.clone(), i);
                        let total: u64 = s.iter().sum();
                        let mut acts = Vec::with_capacity((total - s[0] + 1) as usize);
                        for act in s[0]..=total {
                            let res = residual_after(&s, act);
                            let ri = *residual_index.entry(res.clone()).or_insert_with(|| {
                                residuals.push(res);
                                residuals.len() - 1
                            });
                            acts.push((act, ri));
                        }
                        states.push(s);
                        actions.push(acts);
                        i
                    }
                };
                succ.push((si, to_f64(p)));
            }
            successors.push(succ);
            next_residual += 1;
        }
        let max_units = states.iter().map(|s| s.iter().sum::<u64>()).max().unwrap_or(0);
        Ok(Self {
            dmax,
            delta: delta.clone(),
            states,
            actions,
            successors,
            max_units,
        })
    }

    pub fn states(&self) -> &[Vec<u64>] {
        &self.states
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    /// `curve` at every grid rate up to the largest backlog.
    pub fn costs(&self, curve: &dyn PowerCurve) -> Vec<f64> {
        let d = to_f64(&self.delta);
        (0..=self.max_units).map(|k| curve.power(k as f64 * d)).collect()
    }

    /// Upper bound on the discounted value: the dearest action forever.
    pub fn initial_values(&self, costs: &[f64], gamma: f64) -> Vec<f64> {
        let top = costs.iter().copied().fold(0.0, f64::max);
        vec![top / (1.0 - gamma); self.states.len()]
    }

    /// One Bellman sweep; returns the new values and the greedy actions,
    /// ties going to the smallest action.
    pub fn sweep(&self, costs: &[f64], values: &[f64], gamma: f64) -> (Vec<f64>, Vec<u64>) {
        let expected: Vec<f64> = self
            .successors
            .iter()
            .map(|succ| succ.iter().map(|&(s, p)| p * values[s]).sum())
            .collect();
        self.actions
            .par_iter()
            .map(|acts| {
                let (a0, r0) = acts[0];
                let mut best = costs[a0 as usize] + gamma * expected[r0];
                let mut arg = a0;
                for &(a, r) in &acts[1..] {
                    let q = costs[a as usize] + gamma * expected[r];
                    if q < best - TIE_TOLERANCE * best.abs().max(1.0) {
                        best = q;
                        arg = a;
                    }
                }
                (best, arg)
            })
            .unzip()
    }

    fn policy(&self, actions: &[u64]) -> Result<SchedulerPolicy> {
        let entries = self.states.iter().cloned().zip(actions.iter().copied()).collect();
        SchedulerPolicy::new(self.dmax, self.delta.clone(), entries)
    }
}

#[derive(Clone, Debug)]
pub struct ViOutcome {
    pub policy: SchedulerPolicy,
    pub values: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

/// Discounted value iteration for the scheduler minimizing the expected
/// power `curve(rate)` under a hard delay bound of `dmax` slots.
pub fn value_iteration(
    curve: &dyn PowerCurve,
    arrivals: &DiscreteLaw,
    dmax: usize,
    cfg: &ViConfig,
) -> Result<SchedulerPolicy> {
    solve(curve, arrivals, dmax, cfg).map(|o| o.policy)
}

pub fn solve(curve: &dyn PowerCurve, arrivals: &DiscreteLaw, dmax: usize, cfg: &ViConfig) -> Result<ViOutcome> {
    cfg.validate()?;
    let mdp = SchedulingMdp::new(arrivals, dmax, &cfg.delta)?;
    let costs = mdp.costs(curve);
    if let Some(c) = costs.iter().find(|c| !c.is_finite()) {
        return Err(Error::OutOfRange(format!("power curve returned {c}")));
    }
    let mut values = mdp.initial_values(&costs, cfg.gamma);
    let mut residual = f64::INFINITY;
    for it in 1..=cfg.max_iterations {
        let (next, actions) = mdp.sweep(&costs, &values, cfg.gamma);
        residual = next.iter().zip(&values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = next.iter().map(|v| v.abs()).fold(1.0, f64::max);
        values = next;
        if residual <= cfg.tol * scale {
            return Ok(ViOutcome {
                policy: mdp.policy(&actions)?,
                values,
                iterations: it,
                residual,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: cfg.max_iterations,
        residual,
    })
}

/// Stationary law of the post-decision residual chain started empty, as
/// `(residual, probability)` pairs.
pub fn stationary_residuals(policy: &SchedulerPolicy, arrivals: &DiscreteLaw) -> Result<Vec<(Vec<u64>, f64)>> {
    let arr = arrival_units(arrivals, &policy.delta)?;
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut residuals = vec![vec![0u64; policy.dmax - 1]];
    index.insert(residuals[0].clone(), 0);
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut k = 0;
    while k < residuals.len() {
        let r = residuals[k].clone();
        let mut row = Vec::with_capacity(arr.len());
        for (a, p) in &arr {
            let s = with_arrival(&r, *a);
            let act = policy.action_units(&s).ok_or_else(|| {
                Error::Config(format!("policy has no action for reachable state {s:?} (units of {})", policy.delta))
            })?;
            let next = residual_after(&s, act);
            let j = *index.entry(next.clone()).or_insert_with(|| {
                residuals.push(next);
                residuals.len() - 1
            });
            row.push((j, to_f64(p)));
        }
        rows.push(row);
        k += 1;
    }
    let pi = solve_stationary(&rows)?;
    Ok(residuals.into_iter().zip(pi).collect())
}

/// Marginal law of the scheduled rate when `policy` runs in steady state.
pub fn stationary_rate_law(policy: &SchedulerPolicy, arrivals: &DiscreteLaw) -> Result<DiscreteLaw> {
    let arr = arrival_units(arrivals, &policy.delta)?;
    let pi = stationary_residuals(policy, arrivals)?;
    let mut mass: BTreeMap<u64, Rational> = BTreeMap::new();
    for (r, w) in &pi {
        let w = snap(*w)?;
        if w.is_zero() {
            continue;
        }
        for (a, p) in &arr {
            let s = with_arrival(r, *a);
            let act = policy.action_units(&s).expect("visited while building the chain");
            *mass.entry(act).or_insert_with(Rational::zero) += &w * p;
        }
    }
    let pairs = mass
        .into_iter()
        .map(|(u, p)| (Rational::from_integer(u.into()) * &policy.delta, p))
        .collect();
    DiscreteLaw::normalized(pairs)
}

/// Solves `pi = pi T` with `sum pi = 1` for the row-stochastic sparse `rows`.
fn solve_stationary(rows: &[Vec<(usize, f64)>]) -> Result<Vec<f64>> {
    let n = rows.len();
    let pi = if n <= DENSE_SOLVE_LIMIT {
        dense_stationary(rows)?
    } else {
        iterate_stationary(rows)?
    };
    // residual of the balance equations
    let mut back = vec![0.0; n];
    for (i, row) in rows.iter().enumerate() {
        for &(j, p) in row {
            back[j] += pi[i] * p;
        }
    }
    let err = back.iter().zip(&pi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if err > 1e-12 {
        return Err(Error::ReducibleChain(format!("balance residual {err:e}")));
    }
    Ok(pi)
}

fn dense_stationary(rows: &[Vec<(usize, f64)>]) -> Result<Vec<f64>> {
    let n = rows.len();
    // a[j][i] = T[i][j] - delta_ij, last equation replaced by normalization
    let mut a = vec![vec![0.0; n + 1]; n];
    for (i, row) in rows.iter().enumerate() {
        for &(j, p) in row {
            a[j][i] += p;
        }
        a[i][i] -= 1.0;
    }
    for x in a[n - 1].iter_mut() {
        *x = 1.0;
    }
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .unwrap();
        if a[piv][col].abs() < 1e-13 {
            return Err(Error::ReducibleChain(format!("{n}-state chain has more than one recurrent class")));
        }
        a.swap(col, piv);
        let pivot = a[col].clone();
        for (r, row) in a.iter_mut().enumerate() {
            if r != col && row[col] != 0.0 {
                let f = row[col] / pivot[col];
                for (x, p) in row[col..].iter_mut().zip(&pivot[col..]) {
                    *x -= f * p;
                }
            }
        }
    }
    Ok((0..n).map(|i| (a[i][n] / a[i][i]).max(0.0)).collect())
}

fn iterate_stationary(rows: &[Vec<(usize, f64)>]) -> Result<Vec<f64>> {
    let n = rows.len();
    let mut pi = vec![0.0; n];
    pi[0] = 1.0;
    for _ in 0..10_000_000 {
        let mut next = vec![0.0; n];
        for (i, row) in rows.iter().enumerate() {
            for &(j, p) in row {
                next[j] += 0.5 * pi[i] * p;
            }
        }
        for (x, p) in next.iter_mut().zip(&pi) {
            *x += 0.5 * p;
        }
        let change: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if change < 1e-15 {
            return Ok(pi);
        }
    }
    Err(Error::ReducibleChain("power iteration did not settle".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DdState {
    pub derivative: f64,
    pub smoothing: f64,
}

impl DdState {
    pub fn new(derivative: f64, smoothing: f64) -> Result<Self> {
        if !(derivative >= 0.0) {
            return Err(Error::OutOfRange(format!("derivative estimate {derivative} must be nonnegative")));
        }
        if !(smoothing > 0.0 && smoothing <= 1.0) {
            return Err(Error::OutOfRange(format!("smoothing {smoothing} must lie in (0, 1]")));
        }
        Ok(Self { derivative, smoothing })
    }
}

/// Rate where the curve's slope for `gain` reaches the running derivative
/// estimate, clamped between [`robust_rate`] and the backlog, plus the
/// updated estimate.
pub fn dd_rate(s: &QueueState, gain: f64, dd: &DdState, curve: &FadingCurve) -> Result<(f64, DdState)> {
    let c = curve.for_gain(gain).ok_or(Error::MissingPower {
        user: 0,
        rate: s.total(),
        gain,
    })?;
    let r = c.rate_at_slope(dd.derivative);
    let rate = r.max(robust_rate(s)).min(s.total());
    let derivative = dd.smoothing * dd.derivative + (1.0 - dd.smoothing) * c.right_derivative(rate);
    Ok((rate, DdState { derivative, ..*dd }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::stdm_curve;
    use crate::curve::PiecewiseLinear;
    use crate::dist::{int, rational};
    use proptest::prelude::*;

    fn uniform123() -> DiscreteLaw {
        DiscreteLaw::uniform(vec![int(1), int(2), int(3)]).unwrap()
    }

    fn matrix_of(p: &SchedulerPolicy) -> Vec<Vec<f64>> {
        p.matrix()
            .unwrap()
            .cells
            .into_iter()
            .map(|row| row.into_iter().map(|c| c.unwrap()).collect())
            .collect()
    }

    const EQUAL_SHARE_POLICY: [[f64; 3]; 4] = [[1., 2., 2.], [2., 2., 2.], [2., 2., 2.], [3., 3., 3.]];

    #[test]
    fn step_examples() {
        let s = step_state(&QueueState(vec![1.0, 2.0]), 2.0, 3.0).unwrap();
        assert_eq!(s, QueueState(vec![1.0, 3.0]));
        let s = step_state(&QueueState(vec![0.0, 0.0]), 0.0, 2.5).unwrap();
        assert_eq!(s, QueueState(vec![0.0, 2.5]));
        let s = step_state(&QueueState(vec![2.0, 3.0]), 5.0, 1.0).unwrap();
        assert_eq!(s, QueueState(vec![0.0, 1.0]));
        let s = step_state(&QueueState(vec![1.0]), 1.0, 4.0).unwrap();
        assert_eq!(s, QueueState(vec![4.0]));
    }

    #[test]
    fn step_rejects_infeasible_actions() {
        let s = QueueState(vec![2.0, 3.0]);
        assert!(matches!(step_state(&s, 1.0, 0.0), Err(Error::InvalidAction { .. })));
        assert!(matches!(step_state(&s, 5.5, 0.0), Err(Error::InvalidAction { .. })));
        assert!(step_state(&s, 2.0, -1.0).is_err());
    }

    #[test]
    fn robust_examples() {
        assert_eq!(robust_rate(&QueueState(vec![2.0, 0.0])), 2.0);
        assert_eq!(robust_rate(&QueueState(vec![1.0, 3.0])), 2.0);
        assert_eq!(robust_rate(&QueueState(vec![0.0, 4.0])), 2.0);
        assert_eq!(robust_units(&[0, 3]), 2);
        assert_eq!(robust_units(&[1, 0, 4]), 2);
    }

    #[test]
    fn unit_delay_serves_everything() {
        let p = value_iteration(&stdm_curve(1.0, 0.5), &uniform123(), 1, &ViConfig::default()).unwrap();
        assert_eq!(p.entries().len(), 3);
        for (s, a) in p.entries() {
            assert_eq!(*a, s[0]);
        }
        assert_eq!(stationary_rate_law(&p, &uniform123()).unwrap(), uniform123());
    }

    #[test]
    fn tdma_curves_give_reference_matrices() {
        for gain in [10.0, 1.0] {
            let p = value_iteration(&stdm_curve(gain, 0.5), &uniform123(), 2, &ViConfig::default()).unwrap();
            let m = p.matrix().unwrap();
            assert_eq!(m.rows, vec![0.0, 1.0, 2.0, 3.0]);
            assert_eq!(m.cols, vec![1.0, 2.0, 3.0]);
            assert_eq!(matrix_of(&p), EQUAL_SHARE_POLICY.map(|r| r.to_vec()).to_vec());
        }
    }

    #[test]
    fn reference_scheduler_rate_law() {
        let p = value_iteration(&stdm_curve(10.0, 0.5), &uniform123(), 2, &ViConfig::default()).unwrap();
        let law = stationary_rate_law(&p, &uniform123()).unwrap();
        let expected = DiscreteLaw::new(vec![(int(1), rational(1, 9)), (int(2), rational(7, 9)), (int(3), rational(1, 9))]).unwrap();
        assert_eq!(law, expected);
        let rendered = p.matrix().unwrap().to_string();
        assert!(rendered.contains("0 [ 1 2 2 ]"), "{rendered}");
        let json = serde_json::to_value(&p).unwrap();
        assert_eq!(json["Dmax"], 2);
        assert_eq!(json["entries"][0], serde_json::json!([[0.0, 1.0], 1.0]));
    }

    #[test]
    fn transmit_all_keeps_the_arrival_law() {
        let arr = DiscreteLaw::new(vec![(int(0), rational(1, 5)), (int(2), rational(3, 10)), (int(3), rational(1, 2))]).unwrap();
        for dmax in 1..=3 {
            let p = SchedulerPolicy::transmit_all(&arr, dmax, &int(1)).unwrap();
            assert_eq!(stationary_rate_law(&p, &arr).unwrap(), arr);
        }
    }

    /// Average cost of a deterministic policy over residual states, by
    /// iterating the chain from empty for a long horizon.
    fn long_run_cost(policy: &BTreeMap<(u64, u64), u64>, arrivals: &[(u64, f64)], c: f64) -> f64 {
        let mut dist: BTreeMap<u64, f64> = BTreeMap::from([(0, 1.0)]);
        let mut avg = 0.0;
        let horizon = 4000;
        for t in 0..horizon {
            let mut next = BTreeMap::new();
            for (&r, &w) in &dist {
                for &(a, p) in arrivals {
                    let act = policy[&(r, a)];
                    if t >= horizon / 2 {
                        avg += w * p * c * act as f64;
                    }
                    *next.entry(r + a - act).or_insert(0.0) += w * p;
                }
            }
            dist = next;
        }
        avg / (horizon / 2) as f64
    }

    #[test]
    fn linear_curve_picks_urgent_backlog() {
        let arr = DiscreteLaw::new(vec![(int(0), rational(1, 2)), (int(1), rational(1, 2))]).unwrap();
        let c = 3.0;
        let p = value_iteration(&|b: f64| c * b, &arr, 2, &ViConfig::default()).unwrap();
        for (s, a) in p.entries() {
            assert_eq!(*a, s[0], "state {s:?}");
        }
        // exhaustive enumeration over states (r, a) with r, a in {0, 1}
        let states = [(0u64, 0u64), (0, 1), (1, 0), (1, 1)];
        let arrivals = [(0u64, 0.5), (1u64, 0.5)];
        let mut costs = Vec::new();
        for mask in 0..16u32 {
            let policy: BTreeMap<(u64, u64), u64> = states
                .iter()
                .enumerate()
                .map(|(k, &(r, a))| ((r, a), if mask >> k & 1 == 1 { r + a } else { r }))
                .collect();
            costs.push(long_run_cost(&policy, &arrivals, c));
        }
        let best = costs.iter().copied().fold(f64::INFINITY, f64::min);
        let worst = costs.iter().copied().fold(0.0, f64::max);
        assert!((worst - best).abs() < 1e-9);
        let via: BTreeMap<(u64, u64), u64> = states.iter().map(|&(r, a)| ((r, a), r)).collect();
        assert!((long_run_cost(&via, &arrivals, c) - best).abs() < 1e-9);
    }

    #[test]
    fn policy_lookup_and_refine() {
        let p = value_iteration(&stdm_curve(1.0, 0.5), &uniform123(), 2, &ViConfig::default()).unwrap();
        assert_eq!(p.rate(&QueueState(vec![1.0, 2.0])).unwrap(), 2.0);
        assert!(p.rate(&QueueState(vec![0.5, 2.0])).is_err());
        let fine = p.refine(&rational(1, 4)).unwrap();
        assert_eq!(fine.rate(&QueueState(vec![1.0, 2.0])).unwrap(), 2.0);
        assert_eq!(fine.action_units(&[4, 8]), Some(8));
        assert_eq!(
            stationary_rate_law(&fine, &uniform123()).unwrap(),
            stationary_rate_law(&p, &uniform123()).unwrap()
        );
        assert!(p.refine(&rational(2, 3)).is_err());
    }

    #[test]
    fn off_grid_arrivals_rejected() {
        let arr = DiscreteLaw::new(vec![(rational(1, 2), int(1))]).unwrap();
        assert!(matches!(SchedulingMdp::new(&arr, 2, &int(1)), Err(Error::Config(_))));
        assert!(ViConfig::default().with_gamma(1.0).validate().is_err());
    }

    #[test]
    fn nonconvergence_reported() {
        let cfg = ViConfig {
            max_iterations: 3,
            ..ViConfig::default()
        };
        let e = value_iteration(&stdm_curve(1.0, 0.5), &uniform123(), 2, &cfg).unwrap_err();
        assert!(matches!(e, Error::NonConvergence { iterations: 3, .. }));
    }

    #[test]
    fn urgent_only_policy_and_bad_entries() {
        let p = SchedulerPolicy::transmit_urgent(&uniform123(), 2, &int(1)).unwrap();
        let law = stationary_rate_law(&p, &uniform123()).unwrap();
        assert_eq!(law, uniform123());
        let bad = SchedulerPolicy::new(2, int(1), BTreeMap::from([(vec![2, 1], 1)]));
        assert!(matches!(bad, Err(Error::InvalidAction { .. })));
    }

    fn fading_curve() -> FadingCurve {
        FadingCurve {
            curves: vec![(1.0, PiecewiseLinear::new([(1.0, 3.0), (2.0, 15.0), (3.0, 63.0)]).unwrap())],
        }
    }

    #[test]
    fn dd_examples() {
        let curve = fading_curve();
        let dd = DdState::new(5.0, 0.9).unwrap();
        let (b, next) = dd_rate(&QueueState::empty(2), 1.0, &dd, &curve).unwrap();
        assert_eq!(b, 0.0);
        assert!((next.derivative - (0.9 * 5.0 + 0.1 * 3.0)).abs() < 1e-12);

        let s = QueueState(vec![1.0, 2.0]);
        let (b, _) = dd_rate(&s, 1.0, &DdState::new(1e9, 0.9).unwrap(), &curve).unwrap();
        assert_eq!(b, 3.0);
        let (b, _) = dd_rate(&s, 1.0, &DdState::new(0.0, 0.9).unwrap(), &curve).unwrap();
        assert_eq!(b, robust_rate(&s));
        let (b, next) = dd_rate(&s, 1.0, &DdState::new(12.0, 1.0).unwrap(), &curve).unwrap();
        assert_eq!(b, 2.0);
        assert_eq!(next.derivative, 12.0);
        assert!(dd_rate(&s, 2.0, &dd, &curve).is_err());
        assert!(DdState::new(-1.0, 0.5).is_err());
        assert!(DdState::new(1.0, 0.0).is_err());
    }

    fn arb_arrivals() -> impl Strategy<Value = DiscreteLaw> {
        proptest::collection::btree_map(0i64..4, 1i64..5, 1..4).prop_map(|m| {
            let total: i64 = m.values().sum();
            DiscreteLaw::new(m.into_iter().map(|(v, w)| (int(v), rational(w, total))).collect()).unwrap()
        })
    }

    fn arb_convex() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..5.0, 12).prop_map(|inc| {
            let mut slope = 0.0;
            let mut p = 0.0;
            let mut pts = vec![0.0];
            for d in inc {
                slope += d;
                p += slope;
                pts.push(p);
            }
            pts
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn value_iterates_decrease(arr in arb_arrivals(), pts in arb_convex(), dmax in 1usize..4) {
            let curve = move |b: f64| {
                let k = (b.floor() as usize).min(pts.len() - 2);
                pts[k] + (pts[k + 1] - pts[k]) * (b - k as f64)
            };
            let mdp = SchedulingMdp::new(&arr, dmax, &int(1)).unwrap();
            let costs = mdp.costs(&curve);
            let mut v = mdp.initial_values(&costs, 0.9);
            for _ in 0..50 {
                let (next, _) = mdp.sweep(&costs, &v, 0.9);
                for (a, b) in next.iter().zip(&v) {
                    prop_assert!(*a <= b + 1e-9 * b.abs().max(1.0));
                }
                v = next;
            }
        }

        #[test]
        fn schedulers_never_miss_deadlines(
            arr in arb_arrivals(),
            pts in arb_convex(),
            dmax in 1usize..4,
            draws in proptest::collection::vec(0usize..4, 60),
        ) {
            let curve = move |b: f64| {
                let k = (b.floor() as usize).min(pts.len() - 2);
                pts[k] + (pts[k + 1] - pts[k]) * (b - k as f64)
            };
            let cfg = ViConfig { gamma: 0.9, ..ViConfig::default() };
            let via = value_iteration(&curve, &arr, dmax, &cfg).unwrap();
            let robust = SchedulerPolicy::robust(&arr, dmax, &int(1)).unwrap();
            let values: Vec<f64> = arr.support().map(|a| to_f64(&a.value)).collect();
            for policy in [&via, &robust] {
                let mut s = QueueState(vec![0.0; dmax]);
                s.0[dmax - 1] = values[0];
                for &k in &draws {
                    let rate = policy.rate(&s).unwrap();
                    prop_assert!(rate >= s.urgent() && rate <= s.total());
                    s = step_state(&s, rate, values[k % values.len()]).unwrap();
                }
            }
            let law = stationary_rate_law(&via, &arr).unwrap();
            let total: Rational = law.atoms().iter().map(|a| a.prob.clone()).sum();
            prop_assert_eq!(total, int(1));
        }
    }
}
