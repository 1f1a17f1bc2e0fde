#![allow(dead_code)]

use dmac::dist::{int, rational, DiscreteLaw, RateFadingLaw};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Law on `count` distinct values drawn from `pool`, with integer weights.
pub fn random_law(rng: &mut ChaCha8Rng, pool: &[(i64, i64)], count: usize) -> DiscreteLaw {
    let mut values = pool.to_vec();
    values.shuffle(rng);
    values.truncate(count.max(1));
    let weights: Vec<i64> = values.iter().map(|_| rng.gen_range(1..=8)).collect();
    let total: i64 = weights.iter().sum();
    DiscreteLaw::new(
        values
            .iter()
            .zip(&weights)
            .map(|(&(n, d), &w)| (rational(n, d), rational(w, total)))
            .collect(),
    )
    .unwrap()
}

/// Rates on halves in [0, 3], gains on halves in [1/2, 6].
pub fn random_user(rng: &mut ChaCha8Rng) -> RateFadingLaw {
    let rates: Vec<(i64, i64)> = (0..=6).map(|k| (k, 2)).collect();
    let gains: Vec<(i64, i64)> = (1..=12).map(|k| (k, 2)).collect();
    let nr = rng.gen_range(1..=6);
    let ng = rng.gen_range(1..=4);
    RateFadingLaw::new(random_law(rng, &rates, nr), random_law(rng, &gains, ng)).unwrap()
}

pub fn random_instances(count: usize, seed: u64) -> Vec<[RateFadingLaw; 2]> {
    let mut r = rng(seed);
    (0..count).map(|_| [random_user(&mut r), random_user(&mut r)]).collect()
}

pub fn bernoulli() -> DiscreteLaw {
    DiscreteLaw::new(vec![(int(1), rational(3, 4)), (int(2), rational(1, 4))]).unwrap()
}

pub fn uniform123() -> DiscreteLaw {
    DiscreteLaw::uniform(vec![int(1), int(2), int(3)]).unwrap()
}

pub fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}
