//! Minimum average sum-power allocation for a unit slot delay.
//!
//! Each user's (rate, gain) pairs are laid out in lexicographic order as
//! blocks on a common level axis, a block of probability `p` under power gain
//! `g` taking length `p / g`. A leading zero-rate base block pads every user to
//! the height of the tallest one. Walking the axis upward visits a staircase
//! of block tuples; at each step the users whose block changed get the power
//! that makes the tuple's received sum meet the joint capacity bound with
//! equality. The resulting allocation attains the lower bound
//! `sum_l (2^{2 sum_i b_i(l)} - 1) * gap_l`.
//!
//! Rates and level positions are exact rationals. Powers are `f64`.

use num::{One, Signed, Zero};
use serde::Serialize;

use crate::dist::{to_f64, DiscreteLaw, Rational, RateFadingLaw};
use crate::error::{Error, Result};

/// Relative tolerance on power equalities.
pub const POWER_TOLERANCE: f64 = 1e-9;

/// `2^{2r} - 1`: received power needed to carry `r` bits per symbol alone.
pub fn capacity_power(rate: f64) -> f64 {
    if rate.abs() < 0.25 {
        (2.0 * rate * std::f64::consts::LN_2).exp_m1()
    } else {
        (2.0 * rate).exp2() - 1.0
    }
}

fn tolerance(scale: f64) -> f64 {
    POWER_TOLERANCE * scale.abs().max(1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub rate: Rational,
    pub gain: Rational,
    pub prob: Rational,
    pub weight: Rational,
    /// The zero-rate padding block at the bottom of a user's column.
    pub base: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserLevels {
    /// `blocks[0]` is the base block.
    pub blocks: Vec<Block>,
    /// Cumulative levels of the non-base blocks, starting at 0.
    pub cumulative: Vec<Rational>,
}

impl UserLevels {
    fn from_blocks(real: Vec<Block>) -> Self {
        let mut cumulative = vec![Rational::zero()];
        for b in &real {
            let next = cumulative.last().unwrap() + &b.weight;
            cumulative.push(next);
        }
        let mut blocks = Vec::with_capacity(real.len() + 1);
        blocks.push(Block {
            rate: Rational::zero(),
            gain: Rational::one(),
            prob: Rational::zero(),
            weight: Rational::zero(),
            base: true,
        });
        blocks.extend(real);
        Self { blocks, cumulative }
    }

    pub fn height(&self) -> &Rational {
        self.cumulative.last().unwrap()
    }

    /// Padding below the first real block.
    pub fn offset(&self) -> &Rational {
        &self.blocks[0].weight
    }
}

/// One step of the staircase: the block each user occupies over
/// `(gamma - gap, gamma]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    pub gamma: Rational,
    pub gap: Rational,
    pub blocks: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GammaGrid {
    pub users: Vec<UserLevels>,
    pub levels: Vec<Level>,
    /// Order in which users are updated when several advance together:
    /// tallest column first.
    pub order: Vec<usize>,
    /// First level at which some user has a positive rate.
    pub l_star: Option<usize>,
    pub laws: Vec<RateFadingLaw>,
    /// Level lengths are in units of `1 / level_unit` power gain.
    pub level_unit: Rational,
}

impl GammaGrid {
    fn build(columns: Vec<Vec<Block>>, laws: Vec<RateFadingLaw>, level_unit: Rational) -> Self {
        let mut users: Vec<UserLevels> = columns.into_iter().map(UserLevels::from_blocks).collect();
        let top = users
            .iter()
            .map(|u| u.height().clone())
            .max()
            .unwrap_or_else(Rational::zero);
        for u in &mut users {
            u.blocks[0].weight = &top - u.height();
        }
        let n = users.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| users[b].height().cmp(users[a].height()).then(b.cmp(&a)));
        let rank: Vec<usize> = {
            let mut r = vec![0; n];
            for (pos, &u) in order.iter().enumerate() {
                r[u] = pos;
            }
            r
        };

        // ends[u][k]: top of block k of user u on the shared axis.
        let ends: Vec<Vec<Rational>> = users
            .iter()
            .map(|u| {
                let mut acc = Rational::zero();
                u.blocks
                    .iter()
                    .map(|b| {
                        acc += &b.weight;
                        acc.clone()
                    })
                    .collect()
            })
            .collect();

        let mut idx = vec![0usize; n];
        let first = (0..n).map(|u| ends[u][0].clone()).min().unwrap_or_else(Rational::zero);
        let mut levels = vec![Level {
            gamma: first.clone(),
            gap: first,
            blocks: idx.clone(),
        }];
        loop {
            let m = (0..n).map(|u| &ends[u][idx[u]]).min().unwrap().clone();
            let cand: Vec<usize> = (0..n)
                .filter(|&u| ends[u][idx[u]] == m && idx[u] + 1 < users[u].blocks.len())
                .collect();
            if cand.is_empty() {
                break;
            }
            let massless: Vec<usize> = cand
                .iter()
                .copied()
                .filter(|&u| users[u].blocks[idx[u] + 1].weight.is_zero())
                .collect();
            if massless.is_empty() {
                for &u in &cand {
                    idx[u] += 1;
                }
            } else {
                // Zero-length blocks are entered one user at a time, lowest
                // rate first, the shorter column first on ties.
                let u = *massless
                    .iter()
                    .min_by(|&&a, &&b| {
                        let ra = &users[a].blocks[idx[a] + 1].rate;
                        let rb = &users[b].blocks[idx[b] + 1].rate;
                        ra.cmp(rb).then(rank[b].cmp(&rank[a]))
                    })
                    .unwrap();
                idx[u] += 1;
            }
            let gamma = (0..n).map(|u| &ends[u][idx[u]]).min().unwrap().clone();
            levels.push(Level {
                gap: &gamma - &m,
                gamma,
                blocks: idx.clone(),
            });
        }
        let l_star = levels.iter().position(|l| {
            l.blocks
                .iter()
                .enumerate()
                .any(|(u, &k)| users[u].blocks[k].rate.is_positive())
        });
        Self {
            users,
            levels,
            order,
            l_star,
            laws,
            level_unit,
        }
    }

    /// Distinct level values in ascending order, including 0.
    pub fn gammas(&self) -> Vec<Rational> {
        let mut g: Vec<Rational> = std::iter::once(Rational::zero())
            .chain(self.levels.iter().map(|l| l.gamma.clone()))
            .collect();
        g.sort();
        g.dedup();
        g
    }

    /// Height deficit of the shortest column.
    pub fn d0(&self) -> Rational {
        self.users
            .iter()
            .map(|u| u.offset().clone())
            .max()
            .unwrap_or_else(Rational::zero)
    }

    pub fn top(&self) -> Rational {
        self.users
            .iter()
            .map(|u| u.height().clone())
            .max()
            .unwrap_or_else(Rational::zero)
    }

    pub fn block(&self, level: usize, user: usize) -> &Block {
        &self.users[user].blocks[self.levels[level].blocks[user]]
    }

    /// Rate and gain of `user` at `level`.
    pub fn pair(&self, level: usize, user: usize) -> (&Rational, &Rational) {
        let b = self.block(level, user);
        (&b.rate, &b.gain)
    }

    pub fn rate_sum(&self, level: usize) -> f64 {
        (0..self.users.len())
            .map(|u| to_f64(&self.block(level, u).rate))
            .sum()
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }
}

fn fading_columns(laws: &[&RateFadingLaw]) -> Vec<Vec<Block>> {
    laws.iter()
        .map(|law| {
            law.pairs()
                .into_iter()
                .map(|(rate, gain, prob)| Block {
                    weight: &prob / &gain,
                    rate,
                    gain,
                    prob,
                    base: false,
                })
                .collect()
        })
        .collect()
}

/// Lays out two users' (rate, gain) pairs as pseudo-CDF columns and forms
/// the shared staircase.
pub fn build_pseudo_cdf(law1: &RateFadingLaw, law2: &RateFadingLaw) -> Result<GammaGrid> {
    build_grid(&[law1.clone(), law2.clone()])
}

/// Multi-user variant of [`build_pseudo_cdf`].
pub fn build_grid(laws: &[RateFadingLaw]) -> Result<GammaGrid> {
    if laws.is_empty() {
        return Err(Error::InvalidLaw("no users".into()));
    }
    for law in laws {
        if let Some(a) = law.fading.atoms().iter().find(|a| !a.value.is_positive()) {
            return Err(Error::NonPositiveGain(to_f64(&a.value)));
        }
    }
    let refs: Vec<&RateFadingLaw> = laws.iter().collect();
    Ok(GammaGrid::build(fading_columns(&refs), laws.to_vec(), Rational::one()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PowerEntry {
    #[serde(serialize_with = "ser_rational")]
    pub rate: Rational,
    #[serde(serialize_with = "ser_rational")]
    pub gain: Rational,
    #[serde(skip)]
    pub prob: Rational,
    pub power: f64,
}

fn ser_rational<S: serde::Serializer>(r: &Rational, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(to_f64(r))
}

/// Per-user transmit powers keyed by (rate, gain), lexicographically sorted.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
#[serde(transparent)]
pub struct PowerTable {
    pub users: Vec<Vec<PowerEntry>>,
}

impl PowerTable {
    pub fn power(&self, user: usize, rate: &Rational, gain: &Rational) -> Option<f64> {
        let entries = self.users.get(user)?;
        entries
            .binary_search_by(|e| e.rate.cmp(rate).then_with(|| e.gain.cmp(gain)))
            .ok()
            .map(|i| entries[i].power)
    }

    pub fn entries(&self, user: usize) -> &[PowerEntry] {
        &self.users[user]
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LevelAssignment {
    pub gamma: f64,
    pub gap: f64,
    pub rates: Vec<f64>,
    pub received: Vec<f64>,
    pub required: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AllocationReport {
    pub table: PowerTable,
    pub achieved: f64,
    pub lower_bound: f64,
    pub trace: Vec<LevelAssignment>,
    #[serde(skip)]
    pub laws: Vec<RateFadingLaw>,
}

impl AllocationReport {
    pub fn num_users(&self) -> usize {
        self.table.num_users()
    }
}

/// Staircase recursion over the grid, in received power.
fn assign(grid: &GammaGrid) -> Result<(Vec<Vec<f64>>, Vec<LevelAssignment>)> {
    let n = grid.num_users();
    let mut received: Vec<Vec<Option<f64>>> = grid
        .users
        .iter()
        .map(|u| {
            let mut v = vec![None; u.blocks.len()];
            v[0] = Some(0.0);
            v
        })
        .collect();
    let rate = |u: usize, k: usize| to_f64(&grid.users[u].blocks[k].rate);
    let mut trace = Vec::with_capacity(grid.levels.len());
    let record = |lvl: &Level, received: &[Vec<Option<f64>>]| LevelAssignment {
        gamma: to_f64(&lvl.gamma),
        gap: to_f64(&lvl.gap),
        rates: (0..n).map(|u| rate(u, lvl.blocks[u])).collect(),
        received: (0..n).map(|u| received[u][lvl.blocks[u]].unwrap_or(0.0)).collect(),
        required: capacity_power((0..n).map(|u| rate(u, lvl.blocks[u])).sum()),
    };
    trace.push(record(&grid.levels[0], &received));

    for w in grid.levels.windows(2) {
        let (prev, cur) = (&w[0].blocks, &w[1].blocks);
        let mut tuple = prev.clone();
        for &u in &grid.order {
            tuple[u] = cur[u];
            let rate_sum: f64 = (0..n).map(|v| rate(v, tuple[v])).sum();
            let others: f64 = (0..n)
                .filter(|&v| v != u)
                .map(|v| received[v][tuple[v]].expect("earlier users assigned"))
                .sum();
            let required = capacity_power(rate_sum);
            let mut value = required - others;
            let tol = tolerance(required);
            let block = &grid.users[u].blocks[cur[u]];
            if block.rate.is_zero() {
                if value.abs() > tol {
                    return Err(Error::InconsistentRederivation {
                        rate: 0.0,
                        gain: to_f64(&block.gain),
                        assigned: 0.0,
                        rederived: value,
                    });
                }
                value = 0.0;
            }
            match received[u][cur[u]] {
                Some(assigned) => {
                    if (assigned - value).abs() > tol {
                        return Err(Error::InconsistentRederivation {
                            rate: to_f64(&block.rate),
                            gain: to_f64(&block.gain),
                            assigned: assigned / to_f64(&block.gain),
                            rederived: value / to_f64(&block.gain),
                        });
                    }
                }
                None => {
                    if value < -tol {
                        return Err(Error::NegativePower {
                            user: u,
                            rate: to_f64(&block.rate),
                            power: value / to_f64(&block.gain),
                        });
                    }
                    received[u][cur[u]] = Some(value.max(0.0));
                }
            }
        }
        trace.push(record(&w[1], &received));
    }

    let powers = grid
        .users
        .iter()
        .enumerate()
        .map(|(u, col)| {
            col.blocks
                .iter()
                .zip(&received[u])
                .map(|(b, r)| r.unwrap_or(0.0) / to_f64(&b.gain))
                .collect()
        })
        .collect();
    Ok((powers, trace))
}

fn report_from(grid: &GammaGrid) -> Result<AllocationReport> {
    let (powers, trace) = assign(grid)?;
    let mut table = PowerTable::default();
    let mut achieved = 0.0;
    for (u, col) in grid.users.iter().enumerate() {
        let mut entries: Vec<PowerEntry> = col
            .blocks
            .iter()
            .zip(&powers[u])
            .filter(|(b, _)| !b.base)
            .map(|(b, &p)| PowerEntry {
                rate: b.rate.clone(),
                gain: b.gain.clone(),
                prob: b.prob.clone(),
                power: p,
            })
            .collect();
        entries.sort_by(|a, b| a.rate.cmp(&b.rate).then_with(|| a.gain.cmp(&b.gain)));
        achieved += entries.iter().map(|e| to_f64(&e.prob) * e.power).sum::<f64>();
        table.users.push(entries);
    }
    Ok(AllocationReport {
        table,
        achieved,
        lower_bound: lower_bound(grid) / to_f64(&grid.level_unit),
        trace,
        laws: grid.laws.clone(),
    })
}

/// Optimal allocation on a grid built from rate-fading laws.
pub fn allocate_dynamic(grid: &GammaGrid) -> Result<AllocationReport> {
    report_from(grid)
}

/// Two users with fixed power gains `gain1`, `gain2`.
pub fn allocate_fixed(
    rate_law1: &DiscreteLaw,
    rate_law2: &DiscreteLaw,
    gain1: &Rational,
    gain2: &Rational,
) -> Result<AllocationReport> {
    for g in [gain1, gain2] {
        if !g.is_positive() {
            return Err(Error::NonPositiveGain(to_f64(g)));
        }
    }
    let laws = vec![
        RateFadingLaw::fixed(rate_law1.clone(), gain1.clone())?,
        RateFadingLaw::fixed(rate_law2.clone(), gain2.clone())?,
    ];
    report_from(&build_grid(&laws)?)
}

/// L users with fixed gains sorted in descending order. Column `i` is the
/// rate law compressed by `gains[L-1] / gains[i]` on top of a zero-rate
/// block of the complementary height.
pub fn allocate_l_user(rate_laws: &[DiscreteLaw], gains: &[Rational]) -> Result<AllocationReport> {
    if rate_laws.len() < 2 || rate_laws.len() != gains.len() {
        return Err(Error::InvalidLaw(format!(
            "need at least two users with one gain each, got {} laws and {} gains",
            rate_laws.len(),
            gains.len()
        )));
    }
    if let Some(g) = gains.iter().find(|g| !g.is_positive()) {
        return Err(Error::NonPositiveGain(to_f64(g)));
    }
    if gains.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::OutOfRange("gains must be sorted in descending order".into()));
    }
    let weakest = gains.last().unwrap();
    let columns: Vec<Vec<Block>> = rate_laws
        .iter()
        .zip(gains)
        .map(|(law, g)| {
            let shrink = weakest / g;
            law.atoms()
                .iter()
                .map(|a| Block {
                    rate: a.value.clone(),
                    gain: g.clone(),
                    prob: a.prob.clone(),
                    weight: &a.prob * &shrink,
                    base: false,
                })
                .collect()
        })
        .collect();
    let laws = rate_laws
        .iter()
        .zip(gains)
        .map(|(l, g)| RateFadingLaw::fixed(l.clone(), g.clone()))
        .collect::<Result<Vec<_>>>()?;
    report_from(&GammaGrid::build(columns, laws, weakest.clone()))
}

/// `sum_l (2^{2 sum_i b_i(l)} - 1) * gap_l` over the staircase.
pub fn lower_bound(grid: &GammaGrid) -> f64 {
    (0..grid.levels.len())
        .map(|l| capacity_power(grid.rate_sum(l)) * to_f64(&grid.levels[l].gap))
        .sum()
}

/// Expected total transmit power of `table` under independent per-user laws.
pub fn average_sum_power(table: &PowerTable, laws: &[RateFadingLaw]) -> Result<f64> {
    let mut total = 0.0;
    for (u, law) in laws.iter().enumerate() {
        for (rate, gain, prob) in law.pairs() {
            if prob.is_zero() {
                continue;
            }
            let p = table.power(u, &rate, &gain).ok_or(Error::MissingPower {
                user: u,
                rate: to_f64(&rate),
                gain: to_f64(&gain),
            })?;
            total += to_f64(&prob) * p;
        }
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    /// `(rate, gain, power)` per user.
    pub tuple: Vec<(f64, f64, f64)>,
    /// Users in the violated subset.
    pub subset: Vec<usize>,
    pub received: f64,
    pub required: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Audit {
    Pass { tuples: usize },
    Fail(Violation),
}

impl Audit {
    pub fn passed(&self) -> bool {
        matches!(self, Audit::Pass { .. })
    }
}

/// Checks every subset constraint for one realized tuple of
/// `(rate, received power)`. Returns the first violated subset as a bitmask.
pub fn first_violated_subset(rates: &[f64], received: &[f64]) -> Option<(u32, f64, f64)> {
    let n = rates.len();
    for mask in 1u32..(1 << n) {
        let (mut r, mut p) = (0.0, 0.0);
        for i in 0..n {
            if mask & (1 << i) != 0 {
                r += rates[i];
                p += received[i];
            }
        }
        let required = capacity_power(r);
        if p < required - tolerance(required) {
            return Some((mask, p, required));
        }
    }
    None
}

/// Exhaustive capacity-region audit over every cross product of the users'
/// (rate, gain) atoms, including zero-probability ones.
pub fn verify_outage_free(table: &PowerTable, laws: &[RateFadingLaw]) -> Result<Audit> {
    let mut columns: Vec<Vec<(f64, f64, f64)>> = Vec::with_capacity(laws.len());
    for (u, law) in laws.iter().enumerate() {
        let mut col = Vec::new();
        for (rate, gain, _) in law.pairs() {
            let p = table.power(u, &rate, &gain).ok_or(Error::MissingPower {
                user: u,
                rate: to_f64(&rate),
                gain: to_f64(&gain),
            })?;
            col.push((to_f64(&rate), to_f64(&gain), p));
        }
        columns.push(col);
    }
    let n = columns.len();
    let mut idx = vec![0usize; n];
    let mut count = 0usize;
    loop {
        let tuple: Vec<(f64, f64, f64)> = (0..n).map(|u| columns[u][idx[u]]).collect();
        let rates: Vec<f64> = tuple.iter().map(|t| t.0).collect();
        let received: Vec<f64> = tuple.iter().map(|t| t.1 * t.2).collect();
        count += 1;
        if let Some((mask, got, req)) = first_violated_subset(&rates, &received) {
            return Ok(Audit::Fail(Violation {
                tuple,
                subset: (0..n).filter(|i| mask & (1 << i) != 0).collect(),
                received: got,
                required: req,
            }));
        }
        let mut u = 0;
        loop {
            if u == n {
                return Ok(Audit::Pass { tuples: count });
            }
            idx[u] += 1;
            if idx[u] < columns[u].len() {
                break;
            }
            idx[u] = 0;
            u += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{int, rational};

    fn law(pairs: &[(i64, i64, i64)]) -> DiscreteLaw {
        DiscreteLaw::new(pairs.iter().map(|&(v, n, d)| (int(v), rational(n, d))).collect()).unwrap()
    }

    fn gains(pairs: &[(i64, i64, i64)]) -> DiscreteLaw {
        law(pairs)
    }

    fn fading_instance() -> (RateFadingLaw, RateFadingLaw) {
        let u1 = RateFadingLaw::new(law(&[(2, 1, 3), (3, 2, 3)]), gains(&[(1, 1, 4), (3, 3, 4)])).unwrap();
        let u2 = RateFadingLaw::new(law(&[(1, 1, 4), (2, 3, 4)]), gains(&[(1, 1, 2), (2, 1, 2)])).unwrap();
        (u1, u2)
    }

    fn bernoulli() -> DiscreteLaw {
        law(&[(1, 3, 4), (2, 1, 4)])
    }

    /// Finite-sum evaluation of the fixed-fading minimum: user 2 alone on
    /// quantiles below `1 - a2/a1`, both users on the rest.
    fn fixed_fading_oracle(l1: &DiscreteLaw, l2: &DiscreteLaw, a1: f64, a2: f64) -> f64 {
        let ratio = a2 / a1;
        let q = |law: &DiscreteLaw, x: f64| -> f64 {
            let mut cum = 0.0;
            for a in law.support() {
                cum += to_f64(&a.prob);
                if cum >= x - 1e-15 {
                    return to_f64(&a.value);
                }
            }
            to_f64(law.max_support())
        };
        // Integrands are step functions; integrate exactly on their breakpoints.
        let mut breaks = vec![0.0, 1.0 - ratio, 1.0];
        let mut c = 0.0;
        for a in l2.support() {
            c += to_f64(&a.prob);
            breaks.push(c.min(1.0));
        }
        let mut c = 0.0;
        for a in l1.support() {
            c += to_f64(&a.prob);
            breaks.push(1.0 - ratio + ratio * c.min(1.0));
        }
        breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut total = 0.0;
        for w in breaks.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            if hi - lo <= 1e-15 {
                continue;
            }
            let mid = 0.5 * (lo + hi);
            let b2 = q(l2, mid);
            let b1 = if mid <= 1.0 - ratio { 0.0 } else { q(l1, (mid - 1.0 + ratio) / ratio) };
            total += (hi - lo) * capacity_power(b1 + b2) / a2;
        }
        total
    }

    #[test]
    fn fading_instance_levels() {
        let (u1, u2) = fading_instance();
        let grid = build_pseudo_cdf(&u1, &u2).unwrap();
        let alpha = [int(0), rational(1, 12), rational(1, 6), rational(1, 3), rational(1, 2)];
        let beta = [int(0), rational(1, 8), rational(3, 16), rational(9, 16), rational(3, 4)];
        assert_eq!(grid.users[0].cumulative, alpha);
        assert_eq!(grid.users[1].cumulative, beta);
        assert_eq!(grid.d0(), rational(1, 4));
        assert_eq!(grid.users[0].offset(), &rational(1, 4));
        let expect = [
            int(0),
            rational(1, 8),
            rational(3, 16),
            rational(1, 4),
            rational(1, 3),
            rational(5, 12),
            rational(9, 16),
            rational(7, 12),
            rational(3, 4),
        ];
        assert_eq!(grid.gammas(), expect);
        assert_eq!(grid.top(), rational(3, 4));
        // taller column updates first
        assert_eq!(grid.order, vec![1, 0]);
    }

    #[test]
    fn fading_instance_per_level_sums() {
        // Independent oracle: walk the union of block boundaries and read off
        // each user's block covering (gamma_{l-1}, gamma_l].
        let (u1, u2) = fading_instance();
        let grid = build_pseudo_cdf(&u1, &u2).unwrap();
        let gammas: Vec<f64> = grid.gammas().iter().map(to_f64).collect();
        let blocks = |law: &RateFadingLaw, offset: f64| -> Vec<(f64, f64)> {
            let mut out = vec![(offset, 0.0)];
            let mut c = offset;
            for (r, g, p) in law.pairs() {
                c += to_f64(&p) / to_f64(&g);
                out.push((c, to_f64(&r)));
            }
            out
        };
        let c1 = blocks(&u1, 0.25);
        let c2 = blocks(&u2, 0.0);
        let covering = |col: &[(f64, f64)], x: f64| col.iter().find(|(end, _)| *end >= x - 1e-12).unwrap().1;
        let mut expected = Vec::new();
        let mut bound = 0.0;
        for w in gammas.windows(2) {
            let s = covering(&c1, w[1]) + covering(&c2, w[1]);
            expected.push(capacity_power(s));
            bound += capacity_power(s) * (w[1] - w[0]);
        }
        assert_eq!(expected.len(), 8);
        let report = allocate_dynamic(&grid).unwrap();
        let sums: Vec<f64> = report.trace.iter().skip(1).map(|t| t.received.iter().sum()).collect();
        assert_eq!(sums.len(), 8);
        for (a, b) in sums.iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-9 * b.max(1.0), "{a} vs {b}");
        }
        assert!((report.achieved - bound).abs() < 1e-9 * bound);
        assert!((lower_bound(&grid) - bound).abs() < 1e-9 * bound);
        let avg = average_sum_power(&report.table, &[u1.clone(), u2.clone()]).unwrap();
        assert!((avg - report.lower_bound).abs() < 1e-9 * avg);
        assert!(verify_outage_free(&report.table, &[u1, u2]).unwrap().passed());
    }

    #[test]
    fn singleton_grid() {
        let u = RateFadingLaw::fixed(DiscreteLaw::point(int(1)), int(1)).unwrap();
        let grid = build_pseudo_cdf(&u, &u).unwrap();
        assert_eq!(grid.gammas(), vec![int(0), int(1)]);
        assert_eq!(grid.d0(), int(0));
        assert_eq!(grid.l_star, Some(1));
        assert_eq!(grid.pair(1, 0), (&int(1), &int(1)));
        assert_eq!(grid.pair(1, 1), (&int(1), &int(1)));
        let r = allocate_dynamic(&grid).unwrap();
        let p1 = r.table.power(0, &int(1), &int(1)).unwrap();
        let p2 = r.table.power(1, &int(1), &int(1)).unwrap();
        assert_eq!(p1 + p2, 15.0);
        assert!(p1 >= 3.0 && p2 >= 3.0);
        assert_eq!(lower_bound(&grid), 15.0);
        assert_eq!(average_sum_power(&r.table, &[u.clone(), u]).unwrap(), 15.0);
    }

    #[test]
    fn symmetric_fixed_levels_coincide() {
        let u = RateFadingLaw::fixed(bernoulli(), int(1)).unwrap();
        let grid = build_pseudo_cdf(&u, &u).unwrap();
        assert_eq!(grid.d0(), int(0));
        assert_eq!(grid.users[0].cumulative, grid.users[1].cumulative);
        assert_eq!(grid.gammas(), vec![int(0), rational(3, 4), int(1)]);
    }

    #[test]
    fn bernoulli_value() {
        let oracle = fixed_fading_oracle(&bernoulli(), &bernoulli(), 1.0, 1.0);
        assert!((oracle - 75.0).abs() < 1e-12);
        let r = allocate_fixed(&bernoulli(), &bernoulli(), &int(1), &int(1)).unwrap();
        assert!((r.achieved - 75.0).abs() < 1e-9);
        assert!((r.lower_bound - 75.0).abs() < 1e-9);
    }

    #[test]
    fn deterministic_fixed_is_the_corner_point() {
        let (b1, b2, a1, a2) = (2i64, 1i64, 4i64, 1i64);
        let r = allocate_fixed(&DiscreteLaw::point(int(b1)), &DiscreteLaw::point(int(b2)), &int(a1), &int(a2)).unwrap();
        let c2 = capacity_power(b2 as f64);
        let expect = (capacity_power((b1 + b2) as f64) - c2) / a1 as f64 + c2 / a2 as f64;
        assert!((r.achieved - expect).abs() < 1e-12);
    }

    #[test]
    fn weak_user_below_threshold_gets_single_user_power() {
        // 1 - a2/a1 = 3/4; user 2's atom 1 covers quantiles up to 1/2.
        let l2 = law(&[(1, 1, 2), (2, 1, 2)]);
        let r = allocate_fixed(&bernoulli(), &l2, &int(4), &int(1)).unwrap();
        assert_eq!(r.table.power(1, &int(1), &int(1)).unwrap(), 3.0);
    }

    #[test]
    fn fixed_matches_thm_oracle_and_swaps() {
        let l1 = law(&[(0, 1, 5), (1, 2, 5), (3, 2, 5)]);
        let l2 = law(&[(1, 1, 3), (2, 1, 3), (4, 1, 3)]);
        let oracle = fixed_fading_oracle(&l1, &l2, 5.0, 2.0);
        let r = allocate_fixed(&l1, &l2, &int(5), &int(2)).unwrap();
        assert!((r.achieved - oracle).abs() < 1e-9 * oracle);
        let swapped = allocate_fixed(&l2, &l1, &int(2), &int(5)).unwrap();
        assert!((swapped.achieved - oracle).abs() < 1e-9 * oracle);
        for (a, b) in r.table.users[0].iter().zip(&swapped.table.users[1]) {
            assert_eq!(a.power, b.power);
        }
    }

    #[test]
    fn fixed_equals_normalized_dynamic() {
        let l1 = law(&[(1, 1, 9), (2, 7, 9), (3, 1, 9)]);
        let l2 = law(&[(0, 1, 4), (1, 1, 4), (2, 1, 2)]);
        let (a1, a2) = (int(10), int(3));
        let fixed = allocate_fixed(&l1, &l2, &a1, &a2).unwrap();
        let d1 = RateFadingLaw::fixed(l1, &a1 / &a2).unwrap();
        let d2 = RateFadingLaw::fixed(l2, int(1)).unwrap();
        let dynamic = allocate_dynamic(&build_pseudo_cdf(&d1, &d2).unwrap()).unwrap();
        for u in 0..2 {
            for (f, d) in fixed.table.users[u].iter().zip(&dynamic.table.users[u]) {
                let rescaled = d.power / 3.0;
                assert!((f.power - rescaled).abs() <= 1e-12 * f.power.max(1.0));
            }
        }
    }

    #[test]
    fn zero_rates() {
        let z = RateFadingLaw::fixed(DiscreteLaw::point(int(0)), int(2)).unwrap();
        let grid = build_pseudo_cdf(&z, &z).unwrap();
        assert_eq!(lower_bound(&grid), 0.0);
        assert_eq!(grid.l_star, None);
        let r = allocate_dynamic(&grid).unwrap();
        assert_eq!(r.achieved, 0.0);
        assert!(verify_outage_free(&r.table, &[z.clone(), z]).unwrap().passed());
    }

    #[test]
    fn perturbed_table_fails_audit() {
        let (u1, u2) = fading_instance();
        let mut r = allocate_dynamic(&build_pseudo_cdf(&u1, &u2).unwrap()).unwrap();
        let top = r.table.users[0].iter().map(|e| e.rate.clone()).max().unwrap();
        for e in r.table.users[0].iter_mut().filter(|e| e.rate == top) {
            e.power /= 2.0;
        }
        match verify_outage_free(&r.table, &[u1.clone(), u2.clone()]).unwrap() {
            Audit::Fail(v) => {
                assert!(v.subset.contains(&0));
                assert_eq!(v.tuple[0].0, 3.0);
                assert!(v.received < v.required);
            }
            Audit::Pass { .. } => panic!("halved power passed the audit"),
        }
        r.table.users[1].pop();
        assert!(matches!(
            verify_outage_free(&r.table, &[u1, u2]),
            Err(Error::MissingPower { user: 1, .. })
        ));
    }

    #[test]
    fn three_users_deterministic() {
        let one = DiscreteLaw::point(int(1));
        let r = allocate_l_user(&[one.clone(), one.clone(), one.clone()], &[int(1), int(1), int(1)]).unwrap();
        let p: Vec<f64> = (0..3).map(|u| r.table.power(u, &int(1), &int(1)).unwrap()).collect();
        assert_eq!(p.iter().sum::<f64>(), 63.0);
        assert!(p.iter().all(|&x| x >= 3.0));
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(p[i] + p[j] >= 15.0);
            }
        }
        let laws: Vec<RateFadingLaw> = (0..3).map(|_| RateFadingLaw::fixed(one.clone(), int(1)).unwrap()).collect();
        assert!(verify_outage_free(&r.table, &laws).unwrap().passed());
        assert_eq!(r.lower_bound, 63.0);
    }

    #[test]
    fn two_user_l_path_matches_fixed() {
        let l1 = law(&[(0, 1, 6), (1, 1, 2), (2, 1, 3)]);
        let l2 = law(&[(1, 1, 4), (3, 3, 4)]);
        let a = allocate_l_user(&[l1.clone(), l2.clone()], &[int(7), int(2)]).unwrap();
        let f = allocate_fixed(&l1, &l2, &int(7), &int(2)).unwrap();
        for u in 0..2 {
            for (x, y) in a.table.users[u].iter().zip(&f.table.users[u]) {
                assert!((x.power - y.power).abs() <= 1e-12 * y.power.max(1.0));
            }
        }
        assert!((a.lower_bound - f.lower_bound).abs() < 1e-9 * f.lower_bound);
    }

    #[test]
    fn l_user_rejects_unsorted_gains() {
        let one = DiscreteLaw::point(int(1));
        assert!(allocate_l_user(&[one.clone(), one.clone()], &[int(1), int(2)]).is_err());
        assert!(allocate_l_user(std::slice::from_ref(&one), &[int(1)]).is_err());
    }

    #[test]
    fn dummies_extend_the_staircase() {
        let s = law(&[(1, 1, 9), (2, 7, 9), (3, 1, 9)]);
        let r = allocate_fixed(&s.with_dummies([int(4)]), &s, &int(10), &int(1)).unwrap();
        let p: Vec<f64> = (1..=4).map(|b| r.table.power(0, &int(b), &int(10)).unwrap()).collect();
        let expect = [19.2, 96.0, 403.2, 1632.0];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-9 * b);
        }
        assert!((r.achieved - r.lower_bound).abs() < 1e-9 * r.achieved);
    }

    #[test]
    fn nonpositive_gain_rejected() {
        let b = bernoulli();
        assert!(matches!(allocate_fixed(&b, &b, &int(0), &int(1)), Err(Error::NonPositiveGain(_))));
    }
}
