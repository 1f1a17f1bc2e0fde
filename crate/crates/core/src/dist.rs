//! Finite discrete laws over nonnegative rationals.
//!
//! Values and probabilities are held as exact [`BigRational`]s so that
//! cumulative levels built from them compare exactly. Floating-point inputs
//! are snapped to the simplest rational within [`SNAP_TOLERANCE`].

use std::fmt;
use std::str::FromStr;

use num::bigint::BigInt;
use num::rational::BigRational;
use num::{One, Signed, ToPrimitive, Zero};
use serde::ser::SerializeSeq;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

pub type Rational = BigRational;

/// Maximum distance between a float and the rational it is snapped to.
pub const SNAP_TOLERANCE: f64 = 1e-12;

pub fn rational(num: i64, den: i64) -> Rational {
    Rational::new(BigInt::from(num), BigInt::from(den))
}

pub fn int(n: i64) -> Rational {
    Rational::from_integer(BigInt::from(n))
}

pub fn to_f64(r: &Rational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// Simplest rational (smallest denominator) within `SNAP_TOLERANCE` of `x`,
/// found by walking the continued-fraction convergents.
pub fn snap(x: f64) -> Result<Rational> {
    if !x.is_finite() {
        return Err(Error::OutOfRange(format!("cannot snap non-finite value {x}")));
    }
    let negative = x < 0.0;
    let target = x.abs();
    let (mut h_prev, mut h) = (0i128, 1i128);
    let (mut k_prev, mut k) = (1i128, 0i128);
    let mut rest = target;
    for _ in 0..64 {
        let a = rest.floor();
        if a > 1e18 {
            break;
        }
        let a = a as i128;
        let h_next = a.checked_mul(h).and_then(|v| v.checked_add(h_prev));
        let k_next = a.checked_mul(k).and_then(|v| v.checked_add(k_prev));
        let (Some(h_next), Some(k_next)) = (h_next, k_next) else {
            break;
        };
        h_prev = h;
        h = h_next;
        k_prev = k;
        k = k_next;
        if ((h as f64) / (k as f64) - target).abs() <= SNAP_TOLERANCE {
            break;
        }
        let frac = rest - rest.floor();
        if frac <= f64::EPSILON {
            break;
        }
        rest = 1.0 / frac;
    }
    if k == 0 || ((h as f64) / (k as f64) - target).abs() > SNAP_TOLERANCE {
        // Fall back to the exact binary expansion.
        let exact = Rational::from_float(target)
            .ok_or_else(|| Error::OutOfRange(format!("cannot snap {x}")))?;
        return Ok(if negative { -exact } else { exact });
    }
    let r = Rational::new(BigInt::from(h), BigInt::from(k));
    Ok(if negative { -r } else { r })
}

/// Parses `"3"`, `"0.25"`, `"1/12"` or `"-2.5e-1"` into an exact rational.
pub fn parse_rational(s: &str) -> Result<Rational> {
    let s = s.trim();
    let bad = || Error::OutOfRange(format!("not a rational number: {s:?}"));
    if let Some((n, d)) = s.split_once('/') {
        let n = BigInt::from_str(n.trim()).map_err(|_| bad())?;
        let d = BigInt::from_str(d.trim()).map_err(|_| bad())?;
        if d.is_zero() {
            return Err(bad());
        }
        return Ok(Rational::new(n, d));
    }
    let (mantissa, exponent) = match s.find(['e', 'E']) {
        Some(i) => (&s[..i], s[i + 1..].parse::<i32>().map_err(|_| bad())?),
        None => (s, 0),
    };
    let (int_part, frac_part) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    let digits = format!("{int_part}{frac_part}");
    if digits.is_empty() || digits == "-" || digits == "+" {
        return Err(bad());
    }
    let numer = BigInt::from_str(&digits).map_err(|_| bad())?;
    let scale = exponent - frac_part.len() as i32;
    let ten = BigInt::from(10);
    Ok(if scale >= 0 {
        Rational::from_integer(numer * num::pow(ten, scale as usize))
    } else {
        Rational::new(numer, num::pow(ten, (-scale) as usize))
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Atom {
    pub value: Rational,
    pub prob: Rational,
}

/// A probability law on finitely many nonnegative values.
///
/// Atoms are kept in strictly increasing value order. Zero-probability atoms
/// are allowed; they hold a position in the order without carrying mass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscreteLaw {
    atoms: Vec<Atom>,
}

impl DiscreteLaw {
    /// Builds a law from `(value, prob)` pairs in any order. Probabilities must
    /// sum to exactly one.
    pub fn new(pairs: Vec<(Rational, Rational)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidLaw("empty support".into()));
        }
        let mut atoms: Vec<Atom> = pairs
            .into_iter()
            .map(|(value, prob)| Atom { value, prob })
            .collect();
        atoms.sort_by(|a, b| a.value.cmp(&b.value));
        for w in atoms.windows(2) {
            if w[0].value == w[1].value {
                return Err(Error::InvalidLaw(format!(
                    "duplicate value {}",
                    w[0].value
                )));
            }
        }
        if let Some(a) = atoms.iter().find(|a| a.value.is_negative()) {
            return Err(Error::InvalidLaw(format!("negative value {}", a.value)));
        }
        if let Some(a) = atoms.iter().find(|a| a.prob.is_negative()) {
            return Err(Error::InvalidLaw(format!(
                "negative probability {} at value {}",
                a.prob, a.value
            )));
        }
        let total: Rational = atoms.iter().map(|a| a.prob.clone()).sum();
        if !total.is_one() {
            return Err(Error::InvalidLaw(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(Self { atoms })
    }

    /// Builds a law from floats, snapping each entry to a rational. The
    /// snapped probabilities must sum to one within `SNAP_TOLERANCE`; any
    /// residual is absorbed by the heaviest atom.
    pub fn from_f64(pairs: &[(f64, f64)]) -> Result<Self> {
        let mut snapped = Vec::with_capacity(pairs.len());
        for &(v, p) in pairs {
            snapped.push((snap(v)?, snap(p)?));
        }
        Self::normalized(snapped)
    }

    /// Like [`DiscreteLaw::new`] but tolerates a total within
    /// `SNAP_TOLERANCE` of one, assigning the residual to the heaviest atom.
    pub fn normalized(mut pairs: Vec<(Rational, Rational)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidLaw("empty support".into()));
        }
        let total: Rational = pairs.iter().map(|(_, p)| p.clone()).sum();
        let residual = Rational::one() - total;
        if to_f64(&residual).abs() > SNAP_TOLERANCE * pairs.len() as f64 {
            return Err(Error::InvalidLaw(format!(
                "probabilities sum to {}, not 1",
                1.0 - to_f64(&residual)
            )));
        }
        if !residual.is_zero() {
            let heaviest = (0..pairs.len())
                .max_by(|&a, &b| pairs[a].1.cmp(&pairs[b].1))
                .expect("nonempty");
            pairs[heaviest].1 += residual;
        }
        Self::new(pairs)
    }

    pub fn point(value: Rational) -> Self {
        Self {
            atoms: vec![Atom {
                value,
                prob: Rational::one(),
            }],
        }
    }

    pub fn uniform(values: Vec<Rational>) -> Result<Self> {
        let n = values.len() as i64;
        if n == 0 {
            return Err(Error::InvalidLaw("empty support".into()));
        }
        Self::new(values.into_iter().map(|v| (v, rational(1, n))).collect())
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = &Rational> {
        self.atoms.iter().map(|a| &a.value)
    }

    /// Atoms carrying positive probability.
    pub fn support(&self) -> impl Iterator<Item = &Atom> {
        self.atoms.iter().filter(|a| a.prob.is_positive())
    }

    pub fn min_value(&self) -> &Rational {
        &self.atoms[0].value
    }

    pub fn max_value(&self) -> &Rational {
        &self.atoms[self.atoms.len() - 1].value
    }

    /// Largest value carrying positive probability.
    pub fn max_support(&self) -> &Rational {
        &self.support().last().expect("law has positive mass").value
    }

    pub fn prob_of(&self, value: &Rational) -> Rational {
        self.atoms
            .binary_search_by(|a| a.value.cmp(value))
            .map(|i| self.atoms[i].prob.clone())
            .unwrap_or_else(|_| Rational::zero())
    }

    /// Right-continuous CDF: total mass at values `<= b`.
    pub fn cdf(&self, b: &Rational) -> Rational {
        self.atoms
            .iter()
            .take_while(|a| &a.value <= b)
            .map(|a| a.prob.clone())
            .sum()
    }

    /// Generalized inverse CDF. For `x` in `(c_{k-1}, c_k]` returns the k-th
    /// value; for `x = 0` returns the smallest value with positive mass.
    pub fn inverse_cdf(&self, x: &Rational) -> Result<&Rational> {
        if x.is_negative() || x > &Rational::one() {
            return Err(Error::OutOfRange(format!(
                "quantile {x} outside [0, 1]"
            )));
        }
        let mut cum = Rational::zero();
        for atom in &self.atoms {
            if atom.prob.is_zero() {
                continue;
            }
            cum += &atom.prob;
            if &cum >= x {
                return Ok(&atom.value);
            }
        }
        Ok(self.max_support())
    }

    pub fn expected_value(&self, f: impl Fn(&Rational) -> f64) -> f64 {
        self.atoms
            .iter()
            .filter(|a| !a.prob.is_zero())
            .map(|a| to_f64(&a.prob) * f(&a.value))
            .sum()
    }

    pub fn mean(&self) -> Rational {
        self.atoms.iter().map(|a| &a.prob * &a.value).sum()
    }

    /// Returns a copy with zero-probability atoms at each of `values` lying
    /// strictly above the current largest value.
    pub fn with_dummies(&self, values: impl IntoIterator<Item = Rational>) -> Self {
        let mut atoms = self.atoms.clone();
        let mut extra: Vec<Rational> = values
            .into_iter()
            .filter(|v| v > self.max_value())
            .collect();
        extra.sort();
        extra.dedup();
        atoms.extend(extra.into_iter().map(|value| Atom {
            value,
            prob: Rational::zero(),
        }));
        Self { atoms }
    }

    /// Values paired with probabilities, as floats.
    pub fn to_f64_pairs(&self) -> Vec<(f64, f64)> {
        self.atoms
            .iter()
            .map(|a| (to_f64(&a.value), to_f64(&a.prob)))
            .collect()
    }
}

impl fmt::Display for DiscreteLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, a) in self.atoms.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{}: {}", a.value, a.prob)?;
        }
        write!(f, "}}")
    }
}

impl Serialize for DiscreteLaw {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut seq = serializer.serialize_seq(Some(self.atoms.len()))?;
        for pair in self.to_f64_pairs() {
            seq.serialize_element(&[pair.0, pair.1])?;
        }
        seq.end()
    }
}

/// Independent rate and fading laws of one transmitter. Fading values are
/// power gains and must be positive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RateFadingLaw {
    pub rate: DiscreteLaw,
    pub fading: DiscreteLaw,
}

impl RateFadingLaw {
    pub fn new(rate: DiscreteLaw, fading: DiscreteLaw) -> Result<Self> {
        if let Some(a) = fading.atoms().iter().find(|a| !a.value.is_positive()) {
            return Err(Error::NonPositiveGain(to_f64(&a.value)));
        }
        Ok(Self { rate, fading })
    }

    /// Fixed fading: a single gain with probability one.
    pub fn fixed(rate: DiscreteLaw, gain: Rational) -> Result<Self> {
        Self::new(rate, DiscreteLaw::point(gain))
    }

    /// `(rate, gain, joint probability)` in lexicographic order, rate-major.
    pub fn pairs(&self) -> Vec<(Rational, Rational, Rational)> {
        let mut out = Vec::with_capacity(self.rate.len() * self.fading.len());
        for r in self.rate.atoms() {
            for h in self.fading.atoms() {
                out.push((r.value.clone(), h.value.clone(), &r.prob * &h.prob));
            }
        }
        out
    }
}
