//! Minimal real-number abstraction so the overlap solver can run in `f64`
//! or in 40-digit decimal floating point.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::str::FromStr;

use dashu_float::DBig;

pub trait Real:
    Clone
    + Debug
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(&self) -> f64;
    fn ln(&self) -> Self;
    fn exp(&self) -> Self;

    fn int(n: i64) -> Self {
        Self::from_f64(n as f64)
    }
    fn abs(&self) -> Self {
        if *self < Self::int(0) {
            -self.clone()
        } else {
            self.clone()
        }
    }
    fn powi(&self, n: u32) -> Self {
        let mut acc = Self::int(1);
        let mut base = self.clone();
        let mut e = n;
        while e > 0 {
            if e & 1 == 1 {
                acc = acc * base.clone();
            }
            base = base.clone() * base;
            e >>= 1;
        }
        acc
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(&self) -> f64 {
        *self
    }
    fn ln(&self) -> Self {
        f64::ln(*self)
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn abs(&self) -> Self {
        f64::abs(*self)
    }
    fn powi(&self, n: u32) -> Self {
        f64::powi(*self, n as i32)
    }
}

/// Decimal digits carried by [`Hp`].
pub const HP_DIGITS: usize = 40;

/// 40-digit decimal float.
#[derive(Clone, Debug, PartialEq, PartialOrd)]
pub struct Hp(pub DBig);

impl Hp {
    pub fn parse(s: &str) -> Hp {
        Hp(DBig::from_str(s).expect("decimal literal").with_precision(HP_DIGITS).value())
    }
}

impl Add for Hp {
    type Output = Hp;
    fn add(self, o: Hp) -> Hp {
        Hp(self.0 + o.0)
    }
}
impl Sub for Hp {
    type Output = Hp;
    fn sub(self, o: Hp) -> Hp {
        Hp(self.0 - o.0)
    }
}
impl Mul for Hp {
    type Output = Hp;
    fn mul(self, o: Hp) -> Hp {
        Hp(self.0 * o.0)
    }
}
impl Div for Hp {
    type Output = Hp;
    fn div(self, o: Hp) -> Hp {
        Hp(self.0 / o.0)
    }
}
impl Neg for Hp {
    type Output = Hp;
    fn neg(self) -> Hp {
        Hp(-self.0)
    }
}

impl Real for Hp {
    /// Goes through the shortest round-trip decimal form of `x`.
    fn from_f64(x: f64) -> Self {
        Hp::parse(&format!("{x:e}"))
    }
    fn to_f64(&self) -> f64 {
        self.0.to_f64().value()
    }
    fn ln(&self) -> Self {
        Hp(self.0.ln())
    }
    fn exp(&self) -> Self {
        Hp(self.0.exp())
    }
    fn int(n: i64) -> Self {
        Hp(DBig::from(n).with_precision(HP_DIGITS).value())
    }
}
