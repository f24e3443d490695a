//! Forward-mode dual numbers with a runtime number of derivative directions.
//!
//! A `Dual` with an empty tangent is a plain constant; binary operations treat
//! a missing tangent as zero, so constants and active variables mix freely.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use smallvec::SmallVec;

pub type Tangent = SmallVec<[f64; 8]>;

#[derive(Clone, Default, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub eps: Tangent,
}

impl fmt::Debug for Dual {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} + {:?}ε", self.re, self.eps.as_slice())
    }
}

impl Dual {
    pub fn constant(re: f64) -> Self {
        Dual { re, eps: Tangent::new() }
    }

    /// Seeds direction `dir` out of `ndir` with unit tangent.
    pub fn variable(re: f64, dir: usize, ndir: usize) -> Self {
        let mut eps = Tangent::from_elem(0.0, ndir);
        eps[dir] = 1.0;
        Dual { re, eps }
    }

    pub fn with_tangent(re: f64, eps: Tangent) -> Self {
        Dual { re, eps }
    }

    pub fn is_finite(&self) -> bool {
        self.re.is_finite() && self.eps.iter().all(|e| e.is_finite())
    }

    /// Derivative along direction `dir` (zero if the tangent is absent).
    pub fn d(&self, dir: usize) -> f64 {
        self.eps.get(dir).copied().unwrap_or(0.0)
    }

    /// Applies a scalar function with known value and derivative.
    #[inline]
    fn chain(&self, value: f64, slope: f64) -> Dual {
        Dual { re: value, eps: self.eps.iter().map(|e| slope * e).collect() }
    }

    pub fn sqrt(&self) -> Dual {
        let r = self.re.sqrt();
        self.chain(r, 0.5 / r)
    }

    pub fn sin(&self) -> Dual {
        self.chain(self.re.sin(), self.re.cos())
    }

    pub fn cos(&self) -> Dual {
        self.chain(self.re.cos(), -self.re.sin())
    }

    pub fn exp(&self) -> Dual {
        let e = self.re.exp();
        self.chain(e, e)
    }

    pub fn ln(&self) -> Dual {
        self.chain(self.re.ln(), 1.0 / self.re)
    }

    pub fn powi(&self, n: i32) -> Dual {
        if n == 0 {
            return Dual::constant(1.0);
        }
        self.chain(self.re.powi(n), n as f64 * self.re.powi(n - 1))
    }

    pub fn square(&self) -> Dual {
        self.chain(self.re * self.re, 2.0 * self.re)
    }

    /// `a*self + b*other` without intermediate temporaries.
    pub fn lin_comb(a: f64, x: &Dual, b: f64, y: &Dual) -> Dual {
        Dual { re: a * x.re + b * y.re, eps: zip_with(&x.eps, &y.eps, |p, q| a * p + b * q) }
    }

    /// In-place `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &Dual) {
        self.re += a * other.re;
        if other.eps.is_empty() {
            return;
        }
        if self.eps.is_empty() {
            self.eps = other.eps.iter().map(|e| a * e).collect();
        } else {
            for (s, o) in self.eps.iter_mut().zip(other.eps.iter()) {
                *s += a * o;
            }
        }
    }
}

#[inline]
fn zip_with(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Tangent {
    match (a.is_empty(), b.is_empty()) {
        (true, true) => Tangent::new(),
        (false, true) => a.iter().map(|&x| f(x, 0.0)).collect(),
        (true, false) => b.iter().map(|&y| f(0.0, y)).collect(),
        (false, false) => {
            debug_assert_eq!(a.len(), b.len(), "dual tangent length mismatch");
            a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
        }
    }
}

impl From<f64> for Dual {
    fn from(re: f64) -> Self {
        Dual::constant(re)
    }
}

fn add_dd(a: &Dual, b: &Dual) -> Dual {
    Dual { re: a.re + b.re, eps: zip_with(&a.eps, &b.eps, |x, y| x + y) }
}

fn sub_dd(a: &Dual, b: &Dual) -> Dual {
    Dual { re: a.re - b.re, eps: zip_with(&a.eps, &b.eps, |x, y| x - y) }
}

fn mul_dd(a: &Dual, b: &Dual) -> Dual {
    let (ar, br) = (a.re, b.re);
    Dual { re: ar * br, eps: zip_with(&a.eps, &b.eps, |x, y| x * br + ar * y) }
}

fn div_dd(a: &Dual, b: &Dual) -> Dual {
    let inv = 1.0 / b.re;
    let q = a.re * inv;
    Dual { re: q, eps: zip_with(&a.eps, &b.eps, |x, y| (x - q * y) * inv) }
}

macro_rules! impl_binop {
    ($tr:ident, $method:ident, $f:ident) => {
        impl $tr<Dual> for Dual {
            type Output = Dual;
            fn $method(self, rhs: Dual) -> Dual {
                $f(&self, &rhs)
            }
        }
        impl $tr<&Dual> for Dual {
            type Output = Dual;
            fn $method(self, rhs: &Dual) -> Dual {
                $f(&self, rhs)
            }
        }
        impl $tr<Dual> for &Dual {
            type Output = Dual;
            fn $method(self, rhs: Dual) -> Dual {
                $f(self, &rhs)
            }
        }
        impl $tr<&Dual> for &Dual {
            type Output = Dual;
            fn $method(self, rhs: &Dual) -> Dual {
                $f(self, rhs)
            }
        }
        impl $tr<f64> for Dual {
            type Output = Dual;
            fn $method(self, rhs: f64) -> Dual {
                $f(&self, &Dual::constant(rhs))
            }
        }
        impl $tr<f64> for &Dual {
            type Output = Dual;
            fn $method(self, rhs: f64) -> Dual {
                $f(self, &Dual::constant(rhs))
            }
        }
        impl $tr<Dual> for f64 {
            type Output = Dual;
            fn $method(self, rhs: Dual) -> Dual {
                $f(&Dual::constant(self), &rhs)
            }
        }
        impl $tr<&Dual> for f64 {
            type Output = Dual;
            fn $method(self, rhs: &Dual) -> Dual {
                $f(&Dual::constant(self), rhs)
            }
        }
    };
}

impl_binop!(Add, add, add_dd);
impl_binop!(Sub, sub, sub_dd);
impl_binop!(Mul, mul, mul_dd);
impl_binop!(Div, div, div_dd);

impl Neg for Dual {
    type Output = Dual;
    fn neg(mut self) -> Dual {
        self.re = -self.re;
        self.eps.iter_mut().for_each(|e| *e = -*e);
        self
    }
}

impl Neg for &Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        -self.clone()
    }
}

impl AddAssign<&Dual> for Dual {
    fn add_assign(&mut self, rhs: &Dual) {
        self.axpy(1.0, rhs);
    }
}

impl AddAssign<Dual> for Dual {
    fn add_assign(&mut self, rhs: Dual) {
        self.axpy(1.0, &rhs);
    }
}

impl SubAssign<&Dual> for Dual {
    fn sub_assign(&mut self, rhs: &Dual) {
        self.axpy(-1.0, rhs);
    }
}

impl MulAssign<f64> for Dual {
    fn mul_assign(&mut self, rhs: f64) {
        self.re *= rhs;
        self.eps.iter_mut().for_each(|e| *e *= rhs);
    }
}
