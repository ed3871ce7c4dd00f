// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scalar abstractions.
//!
//! [`Real`] is the floating-point field every matrix routine is generic over
//! (`f32` and `f64`). [`ForwardScalar`] is the narrower arithmetic the network
//! forward pass needs, so the same pass can run on plain reals or on
//! [`Dual`] numbers for forward-mode differentiation.

use std::fmt::{Debug, Display};
use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::RealField;
use num_traits::{FromPrimitive, One, ToPrimitive, Zero};

/// Floating-point scalar usable in every numeric routine of this crate.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive + Display + Debug {
    /// Lossy conversion from `f64`; exact for `f64` itself.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn finite(self) -> bool {
        self.to_f64_lossy().is_finite()
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Arithmetic needed by the network forward pass.
///
/// Implemented by `T` itself and by [`Dual<T>`].
pub trait ForwardScalar<T: Real>:
    Copy + Debug + Zero + One + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self>
{
    fn constant(value: T) -> Self;
    /// Multiply by a plain real without promoting it first.
    fn scale(self, by: T) -> Self;
    fn tanh(self) -> Self;
    fn primal(self) -> T;
    fn is_finite(self) -> bool;
}

impl<T: Real> ForwardScalar<T> for T {
    #[inline]
    fn constant(value: T) -> Self {
        value
    }
    #[inline]
    fn scale(self, by: T) -> Self {
        self * by
    }
    #[inline]
    fn tanh(self) -> Self {
        nalgebra::ComplexField::tanh(self)
    }
    #[inline]
    fn primal(self) -> T {
        self
    }
    #[inline]
    fn is_finite(self) -> bool {
        self.finite()
    }
}

/// First-order dual number `re + eps·ε` with `ε² = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<T> {
    pub re: T,
    pub eps: T,
}

impl<T: Real> Dual<T> {
    pub fn new(re: T, eps: T) -> Self {
        Self { re, eps }
    }

    /// A variable seeded with unit tangent.
    pub fn variable(re: T) -> Self {
        Self { re, eps: T::one() }
    }
}

impl<T: Real> Add for Dual<T> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        Self::new(self.re + rhs.re, self.eps + rhs.eps)
    }
}

impl<T: Real> Sub for Dual<T> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.re - rhs.re, self.eps - rhs.eps)
    }
}

impl<T: Real> Mul for Dual<T> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        Self::new(self.re * rhs.re, self.re * rhs.eps + self.eps * rhs.re)
    }
}

impl<T: Real> Neg for Dual<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self::new(-self.re, -self.eps)
    }
}

impl<T: Real> Zero for Dual<T> {
    fn zero() -> Self {
        Self::new(T::zero(), T::zero())
    }
    fn is_zero(&self) -> bool {
        self.re.is_zero() && self.eps.is_zero()
    }
}

impl<T: Real> One for Dual<T> {
    fn one() -> Self {
        Self::new(T::one(), T::zero())
    }
}

impl<T: Real> ForwardScalar<T> for Dual<T> {
    #[inline]
    fn constant(value: T) -> Self {
        Self::new(value, T::zero())
    }
    #[inline]
    fn scale(self, by: T) -> Self {
        Self::new(self.re * by, self.eps * by)
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = nalgebra::ComplexField::tanh(self.re);
        // d/dx tanh = 1 - tanh²
        Self::new(t, self.eps * (T::one() - t * t))
    }
    #[inline]
    fn primal(self) -> T {
        self.re
    }
    #[inline]
    fn is_finite(self) -> bool {
        self.re.finite() && self.eps.finite()
    }
}
