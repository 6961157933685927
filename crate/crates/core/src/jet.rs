//! Forward-mode tangents.
//!
//! [`Jet<S, N>`] carries a primal of scalar type `S` together with `N`
//! tangent components. Because the inner type is itself a [`Scalar`], jets
//! nest: `Jet<Jet<f64, 2>, 2>` yields second derivatives, and `Jet<Var, 2>`
//! threads directional z-derivatives through a reverse tape so a single
//! backward pass differentiates expressions that contain gradients.

use crate::scalar::Scalar;
use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug)]
pub struct Jet<S: Scalar, const N: usize> {
    pub re: S,
    pub du: [S; N],
}

impl<S: Scalar, const N: usize> Jet<S, N> {
    pub fn constant(re: S) -> Self {
        Jet {
            re,
            du: [S::zero(); N],
        }
    }

    /// Seeds tangent slot `i` with 1.
    pub fn variable(re: S, i: usize) -> Self {
        let mut du = [S::zero(); N];
        du[i] = S::one();
        Jet { re, du }
    }

    fn map_tangent(self, re: S, factor: S) -> Self {
        let mut du = [S::zero(); N];
        for i in 0..N {
            du[i] = factor * self.du[i];
        }
        Jet { re, du }
    }
}

impl<S: Scalar, const N: usize> Add for Jet<S, N> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        let mut du = [S::zero(); N];
        for i in 0..N {
            du[i] = self.du[i] + rhs.du[i];
        }
        Jet {
            re: self.re + rhs.re,
            du,
        }
    }
}

impl<S: Scalar, const N: usize> Sub for Jet<S, N> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        let mut du = [S::zero(); N];
        for i in 0..N {
            du[i] = self.du[i] - rhs.du[i];
        }
        Jet {
            re: self.re - rhs.re,
            du,
        }
    }
}

impl<S: Scalar, const N: usize> Mul for Jet<S, N> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let mut du = [S::zero(); N];
        for i in 0..N {
            du[i] = self.du[i] * rhs.re + self.re * rhs.du[i];
        }
        Jet {
            re: self.re * rhs.re,
            du,
        }
    }
}

impl<S: Scalar, const N: usize> Div for Jet<S, N> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let inv = rhs.re.recip();
        let re = self.re * inv;
        let mut du = [S::zero(); N];
        for i in 0..N {
            du[i] = (self.du[i] - re * rhs.du[i]) * inv;
        }
        Jet { re, du }
    }
}

impl<S: Scalar, const N: usize> Neg for Jet<S, N> {
    type Output = Self;
    fn neg(self) -> Self {
        let mut du = [S::zero(); N];
        for i in 0..N {
            du[i] = -self.du[i];
        }
        Jet { re: -self.re, du }
    }
}

impl<S: Scalar, const N: usize> Scalar for Jet<S, N> {
    fn zero() -> Self {
        Jet::constant(S::zero())
    }
    fn one() -> Self {
        Jet::constant(S::one())
    }
    fn from_f64(x: f64) -> Self {
        Jet::constant(S::from_f64(x))
    }
    fn value(self) -> f64 {
        self.re.value()
    }
    fn sin(self) -> Self {
        self.map_tangent(self.re.sin(), self.re.cos())
    }
    fn cos(self) -> Self {
        self.map_tangent(self.re.cos(), -self.re.sin())
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        self.map_tangent(t, S::one() - t * t)
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        self.map_tangent(s, (S::from_f64(2.0) * s).recip())
    }
}
