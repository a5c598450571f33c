//! Scalar coefficient fields for jets and series.
//!
//! All Taylor machinery is generic over [`Coeff`] so the same recursion can
//! run in floating point (the working mode) and in exact rational arithmetic
//! (used to certify coefficient identities without roundoff).

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Why a scalar square root could not be produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqrtError {
    /// The argument is zero or negative; no real branch exists at all.
    NonPositive,
    /// The argument is positive but not a perfect square in the exact field.
    NotExact,
}

/// A field of scalars that jets and series can be built over.
///
/// Implemented for `f64` and for [`BigRational`]. The `EXACT` flag tells
/// callers whether equality checks may demand exact zeros (rationals) or
/// must use tolerances (floats).
pub trait Coeff:
    Clone
    + PartialEq
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + 'static
{
    /// True when arithmetic in this field is exact (no rounding).
    const EXACT: bool;

    /// Additive identity.
    fn zero() -> Self;
    /// Multiplicative identity.
    fn one() -> Self;
    /// Embed a small integer.
    fn from_i64(v: i64) -> Self;
    /// Exact test against zero (floats compare bit-for-bit to `0.0`).
    fn is_zero(&self) -> bool;
    /// Positive square root. Errors on nonpositive input, or (in the exact
    /// field) on a positive value that is not a perfect square.
    fn sqrt(&self) -> Result<Self, SqrtError>;
    /// Approximate magnitude, used only for diagnostics and tolerances.
    fn to_f64(&self) -> f64;
}

impl Coeff for f64 {
    const EXACT: bool = false;

    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_i64(v: i64) -> Self {
        v as f64
    }
    fn is_zero(&self) -> bool {
        *self == 0.0
    }
    fn sqrt(&self) -> Result<Self, SqrtError> {
        if *self > 0.0 {
            Ok(f64::sqrt(*self))
        } else {
            Err(SqrtError::NonPositive)
        }
    }
    fn to_f64(&self) -> f64 {
        *self
    }
}

impl Coeff for BigRational {
    const EXACT: bool = true;

    fn zero() -> Self {
        <BigRational as Zero>::zero()
    }
    fn one() -> Self {
        <BigRational as One>::one()
    }
    fn from_i64(v: i64) -> Self {
        BigRational::from_integer(BigInt::from(v))
    }
    fn is_zero(&self) -> bool {
        Zero::is_zero(self)
    }
    fn sqrt(&self) -> Result<Self, SqrtError> {
        if !self.is_positive() {
            return Err(SqrtError::NonPositive);
        }
        let num = self.numer();
        let den = self.denom();
        let num_root = num.sqrt();
        let den_root = den.sqrt();
        if &(&num_root * &num_root) == num && &(&den_root * &den_root) == den {
            Ok(BigRational::new(num_root, den_root))
        } else {
            Err(SqrtError::NotExact)
        }
    }
    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rat(n: i64, d: i64) -> BigRational {
        BigRational::new(BigInt::from(n), BigInt::from(d))
    }

    #[test]
    fn float_sqrt_domain() {
        assert_eq!(Coeff::sqrt(&4.0_f64), Ok(2.0));
        assert_eq!(Coeff::sqrt(&0.0_f64), Err(SqrtError::NonPositive));
        assert_eq!(Coeff::sqrt(&-1.0_f64), Err(SqrtError::NonPositive));
    }

    #[test]
    fn rational_sqrt_perfect_squares() {
        assert_eq!(Coeff::sqrt(&rat(16, 25)), Ok(rat(4, 5)));
        assert_eq!(Coeff::sqrt(&rat(9, 1)), Ok(rat(3, 1)));
        assert_eq!(Coeff::sqrt(&rat(2, 1)), Err(SqrtError::NotExact));
        assert_eq!(Coeff::sqrt(&rat(4, 7)), Err(SqrtError::NotExact));
        assert_eq!(Coeff::sqrt(&rat(-4, 9)), Err(SqrtError::NonPositive));
    }

    #[test]
    fn rational_embedding() {
        let five = <BigRational as Coeff>::from_i64(5);
        assert_eq!(five, rat(5, 1));
        assert_eq!(Coeff::to_f64(&five), 5.0);
        assert!(Coeff::is_zero(&<BigRational as Coeff>::zero()));
    }
}
