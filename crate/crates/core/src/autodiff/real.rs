use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar abstraction shared by plain `f64`, forward-mode [`Dual`](super::Dual)
/// numbers and reverse-mode tape variables [`Var`](super::Var).
///
/// Numerical code is written once against this
/// trait; instantiating it with `Dual` gives a Jacobian-vector product and with
/// `Var` gives a vector-Jacobian product. Only the primitives below exist, so an
/// unsupported operation is rejected at compile time.
pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// A value that carries no derivative information.
    fn cst(v: f64) -> Self;
    fn value(&self) -> f64;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    /// Four-quadrant arctangent of `self / x`.
    fn atan2(self, x: Self) -> Self;
    /// Stop-gradient: same value, derivative information dropped.
    fn detach(self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn one() -> Self {
        Self::cst(1.0)
    }

    fn powi(self, n: i32) -> Self {
        let mut acc = Self::one();
        let (mut base, mut k) = if n < 0 {
            (Self::one() / self, -n)
        } else {
            (self, n)
        };
        while k > 0 {
            if k & 1 == 1 {
                acc = acc * base;
            }
            base = base * base;
            k >>= 1;
        }
        acc
    }

    /// `self^p` for a constant exponent; requires a positive base.
    fn powf(self, p: f64) -> Self {
        (self.ln() * p).exp()
    }

    /// Minimum; ties select `self`.
    fn min(self, other: Self) -> Self {
        if other.value() < self.value() {
            other
        } else {
            self
        }
    }

    /// Maximum; ties select `self`.
    fn max(self, other: Self) -> Self {
        if other.value() > self.value() {
            other
        } else {
            self
        }
    }

    fn abs(self) -> Self {
        if self.value() < 0.0 {
            -self
        } else {
            self
        }
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn atan2(self, x: Self) -> Self {
        f64::atan2(self, x)
    }
    #[inline]
    fn detach(self) -> Self {
        self
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    #[inline]
    fn powf(self, p: f64) -> Self {
        f64::powf(self, p)
    }
}

/// Inner product of two equally long slices.
#[inline]
pub fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = R::zero();
    for (x, y) in a.iter().zip(b) {
        acc = acc + *x * *y;
    }
    acc
}

#[inline]
pub fn norm_sq<R: Real>(a: &[R]) -> R {
    dot(a, a)
}

/// Lifts plain values into constants of `R`.
pub fn lift<R: Real>(v: &[f64]) -> Vec<R> {
    v.iter().map(|&x| R::cst(x)).collect()
}

/// Drops derivative information.
pub fn values<R: Real>(v: &[R]) -> Vec<f64> {
    v.iter().map(Real::value).collect()
}
