//! Scalar abstraction the model kernels are written against.
//!
//! Every piece of math that ever needs a derivative (kinematics, mass matrix,
//! impact map, network forward pass, barrier functions) is generic over
//! [`Scalar`]. Instantiating the same kernel with `f64`, [`crate::jet::Jet`]
//! or [`crate::tape::Var`] yields plain values, directional derivatives and
//! reverse-mode gradients from a single source of truth, so the three paths
//! cannot drift apart.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(x: f64) -> Self;

    /// Primal value. All branch decisions (pivot selection, hinge activity,
    /// `vmin`/`vmax`) are taken on this value, which fixes the
    /// almost-everywhere derivative convention at kinks.
    fn value(self) -> f64;

    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;

    fn recip(self) -> Self {
        Self::one() / self
    }

    /// Value-ordered maximum; on ties the first argument wins, so the
    /// derivative follows `self` at the kink.
    fn vmax(self, other: Self) -> Self {
        if self.value() >= other.value() {
            self
        } else {
            other
        }
    }

    fn vmin(self, other: Self) -> Self {
        if self.value() <= other.value() {
            self
        } else {
            other
        }
    }

    /// Hinge `max{0, x}` with subgradient 0 at x = 0.
    fn relu(self) -> Self {
        if self.value() > 0.0 {
            self
        } else {
            Self::zero()
        }
    }
}

impl Scalar for f64 {
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
    fn from_f64(x: f64) -> Self {
        x
    }
    fn value(self) -> f64 {
        self
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn recip(self) -> Self {
        f64::recip(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_is_zero_at_the_kink() {
        assert_eq!(0.0f64.relu(), 0.0);
        assert_eq!((-1.5f64).relu(), 0.0);
        assert_eq!(2.5f64.relu(), 2.5);
    }

    #[test]
    fn vmax_prefers_first_argument_on_ties() {
        assert_eq!(1.0f64.vmax(1.0), 1.0);
        assert_eq!(2.0f64.vmin(3.0), 2.0);
        assert_eq!(2.0f64.vmax(3.0), 3.0);
    }
}
