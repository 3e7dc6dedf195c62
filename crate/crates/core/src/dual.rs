//! Forward-mode dual numbers with three partials, plus the scalar
//! abstraction that lets the color math run identically in a plain-`f64`
//! path (for metrics) and a derivative-carrying path (for the color loss).
//!
//! Branch decisions inside generic kernels are made on the `value()` part,
//! which is exactly the piecewise-smooth interpretation of the formulas.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Minimum squared magnitude before derivative-carrying square roots and
/// `atan2` treat their input as zero (and zero the partials instead of
/// dividing by ~0).
const DERIV_GUARD: f64 = 1e-24;

pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn constant(v: f64) -> Self;
    fn value(self) -> f64;
    fn sqrt(self) -> Self;
    /// `sqrt` that returns exactly zero (value and partials) for inputs
    /// below [`DERIV_GUARD`]; keeps d(sqrt)/dx finite at the origin.
    fn sqrt_or_zero(self) -> Self;
    fn cbrt(self) -> Self;
    fn powf_const(self, e: f64) -> Self;
    fn exp(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn atan2(self, x: Self) -> Self;
}

impl Real for f64 {
    fn constant(v: f64) -> Self {
        v
    }

    fn value(self) -> f64 {
        self
    }

    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }

    fn sqrt_or_zero(self) -> Self {
        if self < DERIV_GUARD {
            0.0
        } else {
            f64::sqrt(self)
        }
    }

    fn cbrt(self) -> Self {
        f64::cbrt(self)
    }

    fn powf_const(self, e: f64) -> Self {
        f64::powf(self, e)
    }

    fn exp(self) -> Self {
        f64::exp(self)
    }

    fn sin(self) -> Self {
        f64::sin(self)
    }

    fn cos(self) -> Self {
        f64::cos(self)
    }

    fn atan2(self, x: Self) -> Self {
        f64::atan2(self, x)
    }
}

/// Value plus three partial derivatives (enough to differentiate any scalar
/// function of one RGB pixel).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual3 {
    pub v: f64,
    pub d: [f64; 3],
}

impl Dual3 {
    pub fn new(v: f64, d: [f64; 3]) -> Self {
        Dual3 { v, d }
    }

    /// Seed a variable: derivative 1 along `axis`, 0 elsewhere.
    pub fn var(v: f64, axis: usize) -> Self {
        let mut d = [0.0; 3];
        d[axis] = 1.0;
        Dual3 { v, d }
    }

    fn map(self, v: f64, dv: f64) -> Self {
        Dual3 {
            v,
            d: [self.d[0] * dv, self.d[1] * dv, self.d[2] * dv],
        }
    }
}

impl Add for Dual3 {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Dual3 {
            v: self.v + rhs.v,
            d: [
                self.d[0] + rhs.d[0],
                self.d[1] + rhs.d[1],
                self.d[2] + rhs.d[2],
            ],
        }
    }
}

impl Sub for Dual3 {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Dual3 {
            v: self.v - rhs.v,
            d: [
                self.d[0] - rhs.d[0],
                self.d[1] - rhs.d[1],
                self.d[2] - rhs.d[2],
            ],
        }
    }
}

impl Mul for Dual3 {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        Dual3 {
            v: self.v * rhs.v,
            d: [
                self.d[0] * rhs.v + self.v * rhs.d[0],
                self.d[1] * rhs.v + self.v * rhs.d[1],
                self.d[2] * rhs.v + self.v * rhs.d[2],
            ],
        }
    }
}

impl Div for Dual3 {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        // True division (not multiplication by the reciprocal) so the value
        // part stays bit-identical to the plain f64 path.
        let v = self.v / rhs.v;
        Dual3 {
            v,
            d: [
                (self.d[0] - v * rhs.d[0]) / rhs.v,
                (self.d[1] - v * rhs.d[1]) / rhs.v,
                (self.d[2] - v * rhs.d[2]) / rhs.v,
            ],
        }
    }
}

impl Neg for Dual3 {
    type Output = Self;
    fn neg(self) -> Self {
        Dual3 {
            v: -self.v,
            d: [-self.d[0], -self.d[1], -self.d[2]],
        }
    }
}

impl Real for Dual3 {
    fn constant(v: f64) -> Self {
        Dual3 { v, d: [0.0; 3] }
    }

    fn value(self) -> f64 {
        self.v
    }

    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.map(s, 0.5 / s)
    }

    fn sqrt_or_zero(self) -> Self {
        if self.v < DERIV_GUARD {
            Dual3::constant(0.0)
        } else {
            self.sqrt()
        }
    }

    fn cbrt(self) -> Self {
        let c = self.v.cbrt();
        self.map(c, 1.0 / (3.0 * c * c))
    }

    fn powf_const(self, e: f64) -> Self {
        let p = self.v.powf(e);
        self.map(p, e * self.v.powf(e - 1.0))
    }

    fn exp(self) -> Self {
        let e = self.v.exp();
        self.map(e, e)
    }

    fn sin(self) -> Self {
        self.map(self.v.sin(), self.v.cos())
    }

    fn cos(self) -> Self {
        self.map(self.v.cos(), -self.v.sin())
    }

    fn atan2(self, x: Self) -> Self {
        let y = self;
        let v = y.v.atan2(x.v);
        let denom = x.v * x.v + y.v * y.v;
        if denom < DERIV_GUARD {
            return Dual3::constant(v);
        }
        let inv = 1.0 / denom;
        Dual3 {
            v,
            d: [
                (x.v * y.d[0] - y.v * x.d[0]) * inv,
                (x.v * y.d[1] - y.v * x.d[1]) * inv,
                (x.v * y.d[2] - y.v * x.d[2]) * inv,
            ],
        }
    }
}
