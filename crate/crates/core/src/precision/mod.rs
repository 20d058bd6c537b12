//! Precision levels, casting, decimal chopping and precision-generic LU.
//!
//! Three levels are available: IEEE single (`f32`), IEEE double (`f64`) and
//! an extended level realized as double-word arithmetic ([`DWord`]). The
//! extended level has about 31 significant decimal digits, a little short of
//! binary128, which is irrelevant for the perturbation sizes studied here.

mod dword;
mod lu;

use std::fmt;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use dword::DWord;
pub use lu::{invert_then_chop, lu_factor, LevelLu, Lu};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Ordered from coarsest to finest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionLevel {
    Single,
    Double,
    Extended,
}

impl PrecisionLevel {
    pub fn unit_roundoff(self) -> f64 {
        match self {
            PrecisionLevel::Single => 2f64.powi(-24),
            PrecisionLevel::Double => 2f64.powi(-53),
            PrecisionLevel::Extended => 2f64.powi(-106),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PrecisionLevel::Single => "single",
            PrecisionLevel::Double => "double",
            PrecisionLevel::Extended => "extended",
        }
    }
}

impl fmt::Display for PrecisionLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrecisionLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(PrecisionLevel::Single),
            "double" => Ok(PrecisionLevel::Double),
            "extended" | "quad" => Ok(PrecisionLevel::Extended),
            _ => Err(Error::UnknownName {
                kind: "precision level",
                name: s.to_string(),
            }),
        }
    }
}

/// A (high, low) pair for the mixed precision stage solver, written
/// `"high/low"` in configuration files.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrecisionPair {
    pub high: PrecisionLevel,
    pub low: PrecisionLevel,
}

impl PrecisionPair {
    pub fn new(high: PrecisionLevel, low: PrecisionLevel) -> Result<Self> {
        if low > high {
            return Err(Error::InvalidArgument(format!(
                "low precision {low} is finer than high precision {high}"
            )));
        }
        Ok(Self { high, low })
    }
}

impl fmt::Display for PrecisionPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.high, self.low)
    }
}

impl FromStr for PrecisionPair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (high, low) = s.split_once('/').ok_or_else(|| Error::UnknownName {
            kind: "precision pair",
            name: s.to_string(),
        })?;
        PrecisionPair::new(high.trim().parse()?, low.trim().parse()?)
    }
}

/// Scalar arithmetic at one precision level.
pub trait Real:
    Copy
    + Send
    + Sync
    + fmt::Debug
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const LEVEL: PrecisionLevel;

    fn zero() -> Self;
    fn one() -> Self;
    /// Rounds to the nearest value of this level.
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Exact embedding into the extended level.
    fn to_dword(self) -> DWord;
    /// Rounds to the nearest value of this level.
    fn from_dword(x: DWord) -> Self;
    fn abs(self) -> Self;
    fn sqrt(self) -> Self;
    fn is_finite(self) -> bool;
    /// Product with a double coefficient, carried out at this level.
    fn mul_f64(self, a: f64) -> Self;
}

impl Real for f32 {
    const LEVEL: PrecisionLevel = PrecisionLevel::Single;

    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn to_dword(self) -> DWord {
        DWord::from(self as f64)
    }
    fn from_dword(x: DWord) -> Self {
        round_dword_to_f32(x)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn mul_f64(self, a: f64) -> Self {
        self * (a as f32)
    }
}

impl Real for f64 {
    const LEVEL: PrecisionLevel = PrecisionLevel::Double;

    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn to_dword(self) -> DWord {
        DWord::from(self)
    }
    fn from_dword(x: DWord) -> Self {
        x.hi + x.lo
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn mul_f64(self, a: f64) -> Self {
        self * a
    }
}

impl Real for DWord {
    const LEVEL: PrecisionLevel = PrecisionLevel::Extended;

    fn zero() -> Self {
        DWord::ZERO
    }
    fn one() -> Self {
        DWord::ONE
    }
    fn from_f64(x: f64) -> Self {
        DWord::from(x)
    }
    fn to_f64(self) -> f64 {
        DWord::to_f64(self)
    }
    fn to_dword(self) -> DWord {
        self
    }
    fn from_dword(x: DWord) -> Self {
        x
    }
    fn abs(self) -> Self {
        DWord::abs(self)
    }
    fn sqrt(self) -> Self {
        DWord::sqrt(self)
    }
    fn is_finite(self) -> bool {
        DWord::is_finite(self)
    }
    fn mul_f64(self, a: f64) -> Self {
        DWord::mul_f64(self, a)
    }
}

// `hi as f32` alone rounds the wrong way when `hi` sits exactly on a single
// precision midpoint and `lo` breaks the tie.
fn round_dword_to_f32(x: DWord) -> f32 {
    let r = x.hi as f32;
    if !r.is_finite() {
        return r;
    }
    // Exact: `r` is within half a single ulp of `hi`.
    let d = x.hi - r as f64;
    if d == 0.0 || x.lo == 0.0 || x.lo.signum() != d.signum() {
        return r;
    }
    let neighbor = if d > 0.0 { r.next_up() } else { r.next_down() };
    let half = ((neighbor as f64) - (r as f64)).abs() / 2.0;
    if d.abs() == half {
        neighbor
    } else {
        r
    }
}

/// Converts a value between levels with round-to-nearest.
#[inline]
pub fn convert<S: Real, T: Real>(x: S) -> T {
    T::from_dword(x.to_dword())
}

/// Rounds each element to the coarser level `T`. Casting to the same level is
/// the identity; casting to a finer level is rejected.
pub fn cast_down<S: Real, T: Real>(v: &[S]) -> Result<Vec<T>> {
    if T::LEVEL > S::LEVEL {
        return Err(Error::CastToFiner {
            from: S::LEVEL,
            to: T::LEVEL,
        });
    }
    Ok(v.iter().map(|&x| convert(x)).collect())
}

/// Exact embedding into the finer level `T`.
pub fn cast_up<S: Real, T: Real>(v: &[S]) -> Result<Vec<T>> {
    if T::LEVEL < S::LEVEL {
        return Err(Error::CastToCoarser {
            from: S::LEVEL,
            to: T::LEVEL,
        });
    }
    Ok(v.iter().map(|&x| convert(x)).collect())
}

pub fn cast_down_matrix<S: Real, T: Real>(m: &Matrix<S>) -> Result<Matrix<T>> {
    let data = cast_down(m.as_slice())?;
    Ok(Matrix::from_vec(m.rows(), m.cols(), data))
}

pub fn cast_up_matrix<S: Real, T: Real>(m: &Matrix<S>) -> Result<Matrix<T>> {
    let data = cast_up(m.as_slice())?;
    Ok(Matrix::from_vec(m.rows(), m.cols(), data))
}

/// Number of significant decimal digits kept by [`chop`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChopSpec {
    digits: u32,
}

impl ChopSpec {
    pub fn new(digits: u32) -> Result<Self> {
        if digits == 0 {
            return Err(Error::InvalidArgument(
                "chop needs at least one significant digit".into(),
            ));
        }
        Ok(Self { digits })
    }

    pub fn digits(self) -> u32 {
        self.digits
    }

    /// Nominal perturbation size `10^-d`.
    pub fn epsilon(self) -> f64 {
        10f64.powi(-(self.digits as i32))
    }
}

/// Truncates the decimal significand of `x` toward zero after `digits`
/// significant digits.
pub fn chop_value(x: f64, digits: u32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let a = x.abs();
    let mut e = if a.is_normal() {
        let bexp = ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023;
        (bexp as f64 * std::f64::consts::LOG10_2).floor() as i32
    } else {
        a.log10().floor() as i32
    };
    while pow10(e) > a {
        e -= 1;
    }
    while pow10(e + 1) <= a {
        e += 1;
    }
    let k = digits as i32 - 1 - e;
    let scaled = if k >= 0 { a * pow10(k) } else { a / pow10(-k) };
    // A product that lands a few ulps under an integer is that integer.
    let nearest = scaled.round();
    let t = if (scaled - nearest).abs() <= 4.0 * f64::EPSILON * scaled {
        nearest
    } else {
        scaled.trunc()
    };
    let out = if k >= 0 { t / pow10(k) } else { t * pow10(-k) };
    out.copysign(x)
}

/// Correctly rounded `10^k`, tabulated over the normal range.
fn pow10(k: i32) -> f64 {
    static TABLE: std::sync::OnceLock<Vec<f64>> = std::sync::OnceLock::new();
    if k.abs() > 308 {
        return 10f64.powi(k);
    }
    let table = TABLE.get_or_init(|| {
        (-308..=308)
            .map(|k| format!("1e{k}").parse().expect("power of ten literal"))
            .collect()
    });
    table[(k + 308) as usize]
}

pub fn chop(v: &[f64], spec: ChopSpec) -> Vec<f64> {
    v.iter().map(|&x| chop_value(x, spec.digits)).collect()
}

pub fn chop_matrix(m: &Matrix<f64>, spec: ChopSpec) -> Matrix<f64> {
    m.map(|x| chop_value(x, spec.digits))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_roundoffs() {
        assert!((PrecisionLevel::Single.unit_roundoff() - 5.96e-8).abs() < 1e-10);
        assert!((PrecisionLevel::Double.unit_roundoff() - 1.11e-16).abs() < 1e-18);
        assert!((PrecisionLevel::Extended.unit_roundoff() - 1.23e-32).abs() < 1e-34);
    }

    #[test]
    fn cast_zero_and_finer_rejected() {
        let v: Vec<f32> = cast_down(&[0.0f64]).unwrap();
        assert_eq!(v, vec![0.0f32]);
        assert!(matches!(
            cast_down::<f32, f64>(&[1.0]),
            Err(Error::CastToFiner { .. })
        ));
        assert!(matches!(
            cast_up::<f64, f32>(&[1.0]),
            Err(Error::CastToCoarser { .. })
        ));
    }

    #[test]
    fn one_third_through_single() {
        // Nearest single to 1/3 is 11184811 / 2^25, found by bit arithmetic.
        let oracle = 11_184_811.0 / 2f64.powi(25);
        let down: Vec<f32> = cast_down(&[1.0 / 3.0]).unwrap();
        let up: Vec<f64> = cast_up(&down).unwrap();
        assert_eq!(up[0], oracle);
        // The gap is a third of 2^-25: about 9.93e-9 absolute, 2.98e-8 relative.
        let gap = (up[0] - 1.0 / 3.0).abs();
        // 1/3 itself carries a double rounding error of about 1.9e-17.
        assert!((gap - 2f64.powi(-25) / 3.0).abs() < 3e-17, "{gap}");
        assert!((gap - 9.934e-9).abs() < 1e-12);
        assert!((gap * 3.0 - 2.98e-8).abs() < 1e-10);
    }

    #[test]
    fn extended_embedding_and_rounding() {
        let up: Vec<DWord> = cast_up(&[0.5f64]).unwrap();
        assert_eq!(up[0], DWord::from(0.5));
        // 1 + 2^-24 + tiny: ties broken by the low word.
        let x = DWord::new(1.0 + 2f64.powi(-24), 1e-30);
        assert_eq!(f32::from_dword(x), 1.0 + 2f32.powi(-23));
        let y = DWord::new(1.0 + 2f64.powi(-24), -1e-30);
        assert_eq!(f32::from_dword(y), 1.0);
    }

    #[test]
    fn pair_parsing() {
        let p: PrecisionPair = "extended/single".parse().unwrap();
        assert_eq!(p.high, PrecisionLevel::Extended);
        assert_eq!(p.low, PrecisionLevel::Single);
        assert!("single/double".parse::<PrecisionPair>().is_err());
        assert!("double".parse::<PrecisionPair>().is_err());
    }

    #[test]
    fn chop_examples() {
        assert_eq!(chop_value(1.23456789, 4), 1.234);
        assert_eq!(chop_value(-0.00123456, 3), -0.00123);
        assert_eq!(chop_value(0.0, 4), 0.0);
        assert_eq!(chop_value(1.0, 4), 1.0);
        assert_eq!(chop_value(1.0 / 3.0, 4), 0.3333);
        assert_eq!(chop_value(999.99, 2), 990.0);
        assert_eq!(chop_value(1234567.0, 3), 1230000.0);
        assert!(ChopSpec::new(0).is_err());
    }

    #[test]
    fn chop_relative_error_bound() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for d in 1..=12u32 {
            for _ in 0..1000 {
                let x: f64 = rng.gen_range(-1.0..1.0) * 10f64.powi(rng.gen_range(-8..8));
                let c = chop_value(x, d);
                // toward zero, up to the snapping of near-integers
                assert!(c.abs() <= x.abs() * (1.0 + 8.0 * f64::EPSILON));
                assert!(c == 0.0 || c.signum() == x.signum());
                assert!((c - x).abs() <= 10f64.powi(1 - d as i32) * x.abs());
            }
        }
    }
}
