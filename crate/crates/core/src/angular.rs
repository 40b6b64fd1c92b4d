//! Angular-momentum algebra: half-integer quantum numbers, exact Wigner 3j/6j
//! symbols and electric-dipole amplitudes between field-dressed states.
//!
//! 3j and 6j symbols are evaluated with the Racah sums in exact integer
//! arithmetic. Every factorial is kept as a vector of prime exponents, the
//! alternating sum is carried out over big integers after pulling out the
//! common prime content, and only the final signed square root is converted
//! to `f64`.

use std::fmt;
use std::ops::{Add, Neg, Sub};
use std::str::FromStr;

use num_bigint::{BigInt, BigUint, Sign};
use num_traits::{One, ToPrimitive, Zero};
use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

use crate::structure::{IonModel, ZeemanState};

/// An angular-momentum quantum number stored as twice its value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct HalfInt(i32);

impl HalfInt {
    pub const ZERO: HalfInt = HalfInt(0);
    pub const HALF: HalfInt = HalfInt(1);
    pub const ONE: HalfInt = HalfInt(2);

    pub const fn from_twice(twice: i32) -> Self {
        HalfInt(twice)
    }

    pub const fn from_int(n: i32) -> Self {
        HalfInt(2 * n)
    }

    pub const fn twice(self) -> i32 {
        self.0
    }

    pub fn value(self) -> f64 {
        f64::from(self.0) / 2.0
    }

    pub const fn is_integer(self) -> bool {
        self.0 % 2 == 0
    }

    pub const fn abs(self) -> Self {
        HalfInt(self.0.abs())
    }

    /// Number of projections, 2j + 1.
    pub fn multiplicity(self) -> usize {
        debug_assert!(self.0 >= 0);
        (self.0 + 1) as usize
    }

    /// Projections -j, -j+1, ..., +j.
    pub fn projections(self) -> impl DoubleEndedIterator<Item = HalfInt> + Clone {
        let j = self.0;
        let n = if j < 0 { 0 } else { j + 1 };
        (0..n).map(move |k| HalfInt(-j + 2 * k))
    }

    /// True when `m` is a valid projection of `self`.
    pub fn admits(self, m: HalfInt) -> bool {
        m.0.abs() <= self.0 && (self.0 - m.0) % 2 == 0
    }

    /// j(j+1).
    pub fn casimir(self) -> f64 {
        let j = self.value();
        j * (j + 1.0)
    }
}

impl Add for HalfInt {
    type Output = HalfInt;
    fn add(self, rhs: HalfInt) -> HalfInt {
        HalfInt(self.0 + rhs.0)
    }
}

impl Sub for HalfInt {
    type Output = HalfInt;
    fn sub(self, rhs: HalfInt) -> HalfInt {
        HalfInt(self.0 - rhs.0)
    }
}

impl Neg for HalfInt {
    type Output = HalfInt;
    fn neg(self) -> HalfInt {
        HalfInt(-self.0)
    }
}

impl fmt::Display for HalfInt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_integer() {
            write!(f, "{}", self.0 / 2)
        } else {
            write!(f, "{}/2", self.0)
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("not a half-integer: {0:?}")]
pub struct ParseHalfIntError(pub String);

impl FromStr for HalfInt {
    type Err = ParseHalfIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let err = || ParseHalfIntError(s.to_string());
        if let Some((num, den)) = t.split_once('/') {
            let num: i32 = num.trim().parse().map_err(|_| err())?;
            match den.trim() {
                "2" => Ok(HalfInt(num)),
                "1" => Ok(HalfInt(2 * num)),
                _ => Err(err()),
            }
        } else if let Ok(n) = t.parse::<i32>() {
            Ok(HalfInt(2 * n))
        } else {
            let x: f64 = t.parse().map_err(|_| err())?;
            HalfInt::try_from(x).map_err(|_| err())
        }
    }
}

impl TryFrom<f64> for HalfInt {
    type Error = ParseHalfIntError;

    fn try_from(x: f64) -> Result<Self, Self::Error> {
        let twice = 2.0 * x;
        if (twice - twice.round()).abs() > 1e-9 || twice.abs() > 1e6 {
            return Err(ParseHalfIntError(x.to_string()));
        }
        Ok(HalfInt(twice.round() as i32))
    }
}

impl Serialize for HalfInt {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for HalfInt {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct HalfIntVisitor;

        impl Visitor<'_> for HalfIntVisitor {
            type Value = HalfInt;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a half-integer such as 3, 3.5 or \"7/2\"")
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<HalfInt, E> {
                i32::try_from(v)
                    .map(HalfInt::from_int)
                    .map_err(|_| E::custom("half-integer out of range"))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<HalfInt, E> {
                i32::try_from(v)
                    .map(HalfInt::from_int)
                    .map_err(|_| E::custom("half-integer out of range"))
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<HalfInt, E> {
                HalfInt::try_from(v).map_err(E::custom)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<HalfInt, E> {
                v.parse().map_err(E::custom)
            }
        }

        deserializer.deserialize_any(HalfIntVisitor)
    }
}

// ---------------------------------------------------------------------------
// exact Racah sums

/// Primes up to `n` (inclusive).
fn primes_upto(n: usize) -> Vec<u32> {
    if n < 2 {
        return Vec::new();
    }
    let mut sieve = vec![true; n + 1];
    sieve[0] = false;
    sieve[1] = false;
    let mut p = 2;
    while p * p <= n {
        if sieve[p] {
            let mut k = p * p;
            while k <= n {
                sieve[k] = false;
                k += p;
            }
        }
        p += 1;
    }
    sieve
        .iter()
        .enumerate()
        .filter_map(|(i, &is_p)| is_p.then_some(i as u32))
        .collect()
}

/// Prime-exponent bookkeeping for products and quotients of factorials.
struct FactorialAlgebra {
    primes: Vec<u32>,
}

impl FactorialAlgebra {
    fn new(max_arg: usize) -> Self {
        FactorialAlgebra {
            primes: primes_upto(max_arg.max(2)),
        }
    }

    fn zero(&self) -> Vec<i64> {
        vec![0; self.primes.len()]
    }

    /// Adds `sign` times the exponents of n! (Legendre's formula).
    fn add_factorial(&self, exps: &mut [i64], n: i64, sign: i64) {
        debug_assert!(n >= 0);
        for (e, &p) in exps.iter_mut().zip(&self.primes) {
            let p = i64::from(p);
            if p > n {
                break;
            }
            let mut q = n;
            let mut count = 0;
            while q > 0 {
                q /= p;
                count += q;
            }
            *e += sign * count;
        }
    }

    fn to_biguint(&self, exps: &[i64]) -> BigUint {
        let mut out = BigUint::one();
        for (&e, &p) in exps.iter().zip(&self.primes) {
            debug_assert!(e >= 0);
            if e > 0 {
                out *= BigUint::from(p).pow(e as u32);
            }
        }
        out
    }

    /// Evaluates `sign * sqrt(prod p^radicand) * sum_t (-1)^t prod p^term_t`.
    fn signed_sqrt_sum(&self, radicand: &[i64], terms: &[(bool, Vec<i64>)]) -> ExactSymbol {
        if terms.is_empty() {
            return ExactSymbol::zero();
        }
        // common prime content of all terms
        let mut common = terms[0].1.clone();
        for (_, t) in &terms[1..] {
            for (c, &e) in common.iter_mut().zip(t) {
                *c = (*c).min(e);
            }
        }
        let mut sum = BigInt::zero();
        for (negative, t) in terms {
            let rel: Vec<i64> = t.iter().zip(&common).map(|(e, c)| e - c).collect();
            let value = BigInt::from(self.to_biguint(&rel));
            if *negative {
                sum -= value;
            } else {
                sum += value;
            }
        }
        if sum.is_zero() {
            return ExactSymbol::zero();
        }
        let negative = sum.sign() == Sign::Minus;
        let magnitude = sum.magnitude().clone();
        // value^2 = sum^2 * prod p^(radicand + 2 common)
        let total: Vec<i64> = radicand.iter().zip(&common).map(|(r, c)| r + 2 * c).collect();
        let num_exps: Vec<i64> = total.iter().map(|&e| e.max(0)).collect();
        let den_exps: Vec<i64> = total.iter().map(|&e| (-e).max(0)).collect();
        ExactSymbol {
            negative,
            numerator: &magnitude * &magnitude * self.to_biguint(&num_exps),
            denominator: self.to_biguint(&den_exps),
        }
    }
}

/// An exactly evaluated symbol, `±sqrt(numerator / denominator)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExactSymbol {
    pub negative: bool,
    pub numerator: BigUint,
    pub denominator: BigUint,
}

impl ExactSymbol {
    pub fn zero() -> Self {
        ExactSymbol {
            negative: false,
            numerator: BigUint::zero(),
            denominator: BigUint::one(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.numerator.is_zero()
    }

    fn flip(mut self, flip: bool) -> Self {
        if flip {
            self.negative = !self.negative;
        }
        self
    }

    /// The square of the symbol as an `f64` ratio.
    pub fn square_f64(&self) -> f64 {
        ratio_to_f64(&self.numerator, &self.denominator)
    }

    pub fn to_f64(&self) -> f64 {
        if self.is_zero() {
            return 0.0;
        }
        let magnitude = self.square_f64().sqrt();
        if self.negative {
            -magnitude
        } else {
            magnitude
        }
    }
}

/// num/den rounded to f64 without intermediate overflow.
fn ratio_to_f64(num: &BigUint, den: &BigUint) -> f64 {
    if num.is_zero() {
        return 0.0;
    }
    let shift = num.bits() as i64 - den.bits() as i64;
    // bring the quotient into [2^63, 2^65)
    let q = if shift < 64 {
        (num << ((64 - shift) as usize)) / den
    } else {
        num / (den << ((shift - 64) as usize))
    };
    q.to_f64().unwrap_or(f64::INFINITY) * 2f64.powi((shift - 64) as i32)
}

fn is_even(x: i32) -> bool {
    x % 2 == 0
}

/// Triangle condition on doubled values, including integer perimeter.
fn triad(a: i32, b: i32, c: i32) -> bool {
    a >= 0 && b >= 0 && c >= 0 && c <= a + b && c >= (a - b).abs() && is_even(a + b + c)
}

/// Exact Wigner 3j symbol, or zero when a selection rule fails.
pub fn wigner3j_exact(
    j1: HalfInt,
    j2: HalfInt,
    j3: HalfInt,
    m1: HalfInt,
    m2: HalfInt,
    m3: HalfInt,
) -> ExactSymbol {
    let (tj1, tj2, tj3) = (j1.twice(), j2.twice(), j3.twice());
    let (tm1, tm2, tm3) = (m1.twice(), m2.twice(), m3.twice());
    if tm1 + tm2 + tm3 != 0
        || !triad(tj1, tj2, tj3)
        || !j1.admits(m1)
        || !j2.admits(m2)
        || !j3.admits(m3)
    {
        return ExactSymbol::zero();
    }
    // all of the following are integers once the selection rules hold
    let h = |x: i32| -> i64 { i64::from(x / 2) };
    let a = h(tj1 + tj2 - tj3);
    let b = h(tj1 - tj2 + tj3);
    let c = h(-tj1 + tj2 + tj3);
    let d = h(tj1 + tj2 + tj3) + 1;
    let projections = [
        h(tj1 + tm1),
        h(tj1 - tm1),
        h(tj2 + tm2),
        h(tj2 - tm2),
        h(tj3 + tm3),
        h(tj3 - tm3),
    ];
    let x1 = h(tj3 - tj2 + tm1); // j3 - j2 + m1
    let x2 = h(tj3 - tj1 - tm2); // j3 - j1 - m2
    let y1 = a; // j1 + j2 - j3
    let y2 = projections[1]; // j1 - m1
    let y3 = projections[2]; // j2 + m2
    let k_min = 0.max(-x1).max(-x2);
    let k_max = y1.min(y2).min(y3);
    if k_min > k_max {
        return ExactSymbol::zero();
    }

    let alg = FactorialAlgebra::new(d as usize);
    let mut radicand = alg.zero();
    for n in [a, b, c] {
        alg.add_factorial(&mut radicand, n, 1);
    }
    alg.add_factorial(&mut radicand, d, -1);
    for n in projections {
        alg.add_factorial(&mut radicand, n, 1);
    }
    let terms: Vec<(bool, Vec<i64>)> = (k_min..=k_max)
        .map(|k| {
            let mut e = alg.zero();
            for n in [k, x1 + k, x2 + k, y1 - k, y2 - k, y3 - k] {
                alg.add_factorial(&mut e, n, -1);
            }
            (k % 2 != 0, e)
        })
        .collect();
    // phase (-1)^(j1 - j2 - m3)
    let phase = (tj1 - tj2 - tm3) / 2;
    alg.signed_sqrt_sum(&radicand, &terms).flip(phase.rem_euclid(2) == 1)
}

/// Wigner 3j symbol (j1 j2 j3; m1 m2 m3) as `f64`.
pub fn wigner3j(j1: HalfInt, j2: HalfInt, j3: HalfInt, m1: HalfInt, m2: HalfInt, m3: HalfInt) -> f64 {
    wigner3j_exact(j1, j2, j3, m1, m2, m3).to_f64()
}

/// Exact Wigner 6j symbol {j1 j2 j3; j4 j5 j6}, zero on any triad violation.
pub fn wigner6j_exact(
    j1: HalfInt,
    j2: HalfInt,
    j3: HalfInt,
    j4: HalfInt,
    j5: HalfInt,
    j6: HalfInt,
) -> ExactSymbol {
    let t = [j1, j2, j3, j4, j5, j6].map(HalfInt::twice);
    let [a1, a2, a3, a4, a5, a6] = t;
    let triads = [(a1, a2, a3), (a1, a5, a6), (a4, a2, a6), (a4, a5, a3)];
    if triads.iter().any(|&(x, y, z)| !triad(x, y, z)) {
        return ExactSymbol::zero();
    }
    let h = |x: i32| -> i64 { i64::from(x / 2) };
    let alphas: Vec<i64> = triads.iter().map(|&(x, y, z)| h(x + y + z)).collect();
    let betas = [h(a1 + a2 + a4 + a5), h(a2 + a3 + a5 + a6), h(a3 + a1 + a6 + a4)];
    let t_min = *alphas.iter().max().unwrap();
    let t_max = *betas.iter().min().unwrap();
    if t_min > t_max {
        return ExactSymbol::zero();
    }

    let alg = FactorialAlgebra::new((t_max + 1) as usize);
    let mut radicand = alg.zero();
    for &(x, y, z) in &triads {
        alg.add_factorial(&mut radicand, h(x + y - z), 1);
        alg.add_factorial(&mut radicand, h(x - y + z), 1);
        alg.add_factorial(&mut radicand, h(-x + y + z), 1);
        alg.add_factorial(&mut radicand, h(x + y + z) + 1, -1);
    }
    let terms: Vec<(bool, Vec<i64>)> = (t_min..=t_max)
        .map(|s| {
            let mut e = alg.zero();
            alg.add_factorial(&mut e, s + 1, 1);
            for &al in &alphas {
                alg.add_factorial(&mut e, s - al, -1);
            }
            for &be in &betas {
                alg.add_factorial(&mut e, be - s, -1);
            }
            (s % 2 != 0, e)
        })
        .collect();
    alg.signed_sqrt_sum(&radicand, &terms)
}

/// Wigner 6j symbol {j1 j2 j3; j4 j5 j6} as `f64`.
pub fn wigner6j(j1: HalfInt, j2: HalfInt, j3: HalfInt, j4: HalfInt, j5: HalfInt, j6: HalfInt) -> f64 {
    wigner6j_exact(j1, j2, j3, j4, j5, j6).to_f64()
}

/// Clebsch-Gordan coefficient <j1 m1; j2 m2 | J M> (Condon-Shortley phases).
pub fn clebsch_gordan(j1: HalfInt, m1: HalfInt, j2: HalfInt, m2: HalfInt, j: HalfInt, m: HalfInt) -> f64 {
    let w = wigner3j(j1, j2, j, m1, m2, -m);
    if w == 0.0 {
        return 0.0;
    }
    let phase = (j1.twice() - j2.twice() + m.twice()) / 2;
    let sign = if phase.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
    sign * (f64::from(j.twice() + 1)).sqrt() * w
}

/// Relative strength of the zero-field hyperfine line F -> F' on a J -> J'
/// transition, normalized so the strengths out of any F sum to one:
/// (2F'+1)(2J+1) {J J' 1; F' F I}^2.
pub fn hyperfine_line_strength(
    nuclear_spin: HalfInt,
    j_lower: HalfInt,
    f_lower: HalfInt,
    j_upper: HalfInt,
    f_upper: HalfInt,
) -> f64 {
    let six = wigner6j_exact(j_lower, j_upper, HalfInt::ONE, f_upper, f_lower, nuclear_spin);
    f64::from(f_upper.twice() + 1) * f64::from(j_lower.twice() + 1) * six.square_f64()
}

// ---------------------------------------------------------------------------
// dipole couplings

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AngularError {
    #[error("levels {lower} and {upper} are not connected by an electric-dipole decay channel")]
    NotDipoleConnected { lower: String, upper: String },
    #[error("spherical component q = {0} is not in {{-1, 0, +1}}")]
    InvalidComponent(i32),
}

/// Fine-structure matrix element <J' m'| d_q |J m> in units where the reduced
/// element is normalized to the branching fraction of the channel:
/// |<J'||d||J>|^2 = (2J'+1) * b.
pub fn fine_structure_element(
    j_lower: HalfInt,
    m_lower: HalfInt,
    j_upper: HalfInt,
    m_upper: HalfInt,
    q: i32,
    branching: f64,
) -> f64 {
    let w = wigner3j(j_upper, HalfInt::ONE, j_lower, -m_upper, HalfInt::from_int(q), m_lower);
    if w == 0.0 {
        return 0.0;
    }
    let phase = (j_upper.twice() - m_upper.twice()) / 2;
    let sign = if phase.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
    sign * w * (f64::from(j_upper.twice() + 1) * branching).sqrt()
}

/// Electric-dipole amplitude for absorption `lower -> upper` of a photon with
/// spherical component `q` (M_upper = M_lower + q).
///
/// Both field-dressed states are expanded in |M_I, M_J>; the nuclear spin is a
/// spectator. The amplitudes are normalized so that, for any upper state, the
/// squares summed over all q and all states of a lower level equal the
/// branching fraction into that level.
pub fn dipole_amplitude(
    ion: &IonModel,
    lower: &ZeemanState,
    upper: &ZeemanState,
    q: i32,
) -> Result<f64, AngularError> {
    if !(-1..=1).contains(&q) {
        return Err(AngularError::InvalidComponent(q));
    }
    let lower_level = &ion.levels[lower.level];
    let upper_level = &ion.levels[upper.level];
    let branching = ion
        .branching_fraction(upper.level, lower.level)
        .ok_or_else(|| AngularError::NotDipoleConnected {
            lower: lower_level.label.clone(),
            upper: upper_level.label.clone(),
        })?;
    if upper.m != lower.m + HalfInt::from_int(q) {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for lc in &lower.components {
        for uc in &upper.components {
            if uc.m_i != lc.m_i || uc.m_j != lc.m_j + HalfInt::from_int(q) {
                continue;
            }
            total += lc.amplitude
                * uc.amplitude
                * fine_structure_element(lower_level.j, lc.m_j, upper_level.j, uc.m_j, q, branching);
        }
    }
    Ok(total)
}
