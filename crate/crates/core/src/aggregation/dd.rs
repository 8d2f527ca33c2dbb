//! Double-double arithmetic: an unevaluated sum `hi + lo` of two `f64` giving
//! about 32 significant digits. Used to evaluate finite differences without
//! cancellation error. Arithmetic, `exp`, `tanh`, `sqrt`, `ln` and `powi` are
//! carried to full precision; the remaining transcendental functions fall
//! back to `f64` on the leading part.

use std::cmp::Ordering;
use std::fmt;
use std::iter::Sum;
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Rem, Sub};

use num_traits::{Float, Num, NumCast, One, ToPrimitive, Zero};

use super::mlp::Scalar;

#[derive(Clone, Copy, Default, PartialEq)]
pub struct DoubleDouble {
    pub hi: f64,
    pub lo: f64,
}

const LN2: DoubleDouble = DoubleDouble {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn split(a: f64) -> (f64, f64) {
    let t = 134_217_729.0 * a;
    let hi = t - (t - a);
    (hi, a - hi)
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let (ah, al) = split(a);
    let (bh, bl) = split(b);
    (p, ((ah * bh - p) + ah * bl + al * bh) + al * bl)
}

impl DoubleDouble {
    pub const fn new(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    #[inline]
    fn norm(hi: f64, lo: f64) -> Self {
        let (hi, lo) = quick_two_sum(hi, lo);
        Self { hi, lo }
    }

    fn scale2(self, k: i32) -> Self {
        let f = 2f64.powi(k);
        Self {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }

    fn square(self) -> Self {
        self * self
    }

    fn exp_dd(self) -> Self {
        if self.hi > 709.0 {
            return Self::new(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Self::zero();
        }
        if self.hi.is_nan() {
            return Self::new(f64::NAN);
        }
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * Self::new(k)).scale2(-9);
        // exp(r) - 1 by Taylor series, then undo the scaling by squaring.
        let mut term = r;
        let mut s = r;
        for n in 2..=14 {
            term = term * r / Self::new(n as f64);
            s = s + term;
            if term.hi.abs() < 1e-34 {
                break;
            }
        }
        for _ in 0..9 {
            s = s.scale2(1) + s.square();
        }
        (s + Self::one()).scale2(k as i32)
    }

    fn tanh_dd(self) -> Self {
        if self.hi.is_nan() {
            return self;
        }
        if self.hi.abs() > 40.0 {
            return Self::new(self.hi.signum());
        }
        let em = (self.scale2(1)).exp_dd() - Self::one();
        em / (em + Self::new(2.0))
    }

    fn sqrt_dd(self) -> Self {
        if self.hi <= 0.0 {
            return if self.hi == 0.0 {
                Self::zero()
            } else {
                Self::new(f64::NAN)
            };
        }
        let x = 1.0 / self.hi.sqrt();
        let ax = self.hi * x;
        let r = (self - Self::new(ax).square()).hi * x * 0.5;
        let (hi, lo) = two_sum(ax, r);
        Self::norm(hi, lo)
    }

    fn ln_dd(self) -> Self {
        if !(self.hi > 0.0) {
            return Self::new(self.hi.ln());
        }
        let y = Self::new(self.hi.ln());
        y + self * (-y).exp_dd() - Self::one()
    }
}

impl fmt::Debug for DoubleDouble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:e}+{:e}", self.hi, self.lo)
    }
}

impl fmt::Display for DoubleDouble {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.hi, f)
    }
}

impl PartialOrd for DoubleDouble {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi) {
            Some(Ordering::Equal) => self.lo.partial_cmp(&other.lo),
            o => o,
        }
    }
}

impl Neg for DoubleDouble {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Add for DoubleDouble {
    type Output = Self;
    #[inline]
    fn add(self, b: Self) -> Self {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Self::norm(s, e + f)
    }
}

impl AddAssign for DoubleDouble {
    fn add_assign(&mut self, b: Self) {
        *self = *self + b;
    }
}

impl Sub for DoubleDouble {
    type Output = Self;
    #[inline]
    fn sub(self, b: Self) -> Self {
        self + (-b)
    }
}

impl Mul for DoubleDouble {
    type Output = Self;
    #[inline]
    fn mul(self, b: Self) -> Self {
        let (p, e) = two_prod(self.hi, b.hi);
        Self::norm(p, e + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for DoubleDouble {
    type Output = Self;
    fn div(self, b: Self) -> Self {
        let q1 = self.hi / b.hi;
        if !q1.is_finite() {
            return Self::new(q1);
        }
        let r = self - b * Self::new(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * Self::new(q2);
        let q3 = r.hi / b.hi;
        Self::norm(q1, q2) + Self::new(q3)
    }
}

impl Rem for DoubleDouble {
    type Output = Self;
    fn rem(self, b: Self) -> Self {
        self - (self / b).trunc() * b
    }
}

impl Sum for DoubleDouble {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::zero(), Add::add)
    }
}

impl Zero for DoubleDouble {
    fn zero() -> Self {
        Self::new(0.0)
    }
    fn is_zero(&self) -> bool {
        self.hi == 0.0
    }
}

impl One for DoubleDouble {
    fn one() -> Self {
        Self::new(1.0)
    }
}

impl Num for DoubleDouble {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Self::new)
    }
}

impl ToPrimitive for DoubleDouble {
    fn to_i64(&self) -> Option<i64> {
        (self.hi + self.lo).to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        (self.hi + self.lo).to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.hi + self.lo)
    }
}

impl NumCast for DoubleDouble {
    fn from<T: ToPrimitive>(n: T) -> Option<Self> {
        n.to_f64().map(Self::new)
    }
}

impl Float for DoubleDouble {
    fn nan() -> Self {
        Self::new(f64::NAN)
    }
    fn infinity() -> Self {
        Self::new(f64::INFINITY)
    }
    fn neg_infinity() -> Self {
        Self::new(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Self {
        Self::new(-0.0)
    }
    fn min_value() -> Self {
        Self::new(f64::MIN)
    }
    fn min_positive_value() -> Self {
        Self::new(f64::MIN_POSITIVE)
    }
    fn max_value() -> Self {
        Self::new(f64::MAX)
    }
    fn epsilon() -> Self {
        Self::new(4.930_380_657_631_324e-32)
    }
    fn is_nan(self) -> bool {
        self.hi.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.hi.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.hi.is_finite()
    }
    fn is_normal(self) -> bool {
        self.hi.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.hi.classify()
    }
    fn floor(self) -> Self {
        let h = self.hi.floor();
        if h == self.hi {
            Self::norm(h, self.lo.floor())
        } else {
            Self::new(h)
        }
    }
    fn ceil(self) -> Self {
        -(-self).floor()
    }
    fn round(self) -> Self {
        (self + Self::new(0.5)).floor()
    }
    fn trunc(self) -> Self {
        if self.hi >= 0.0 {
            self.floor()
        } else {
            self.ceil()
        }
    }
    fn fract(self) -> Self {
        self - self.trunc()
    }
    fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }
    fn signum(self) -> Self {
        Self::new(self.hi.signum())
    }
    fn is_sign_positive(self) -> bool {
        self.hi.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.hi.is_sign_negative()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn recip(self) -> Self {
        Self::one() / self
    }
    fn powi(self, n: i32) -> Self {
        let mut base = self;
        let mut e = n.unsigned_abs();
        let mut acc = Self::one();
        while e > 0 {
            if e & 1 == 1 {
                acc = acc * base;
            }
            base = base.square();
            e >>= 1;
        }
        if n < 0 {
            acc.recip()
        } else {
            acc
        }
    }
    fn powf(self, n: Self) -> Self {
        (n * self.ln()).exp()
    }
    fn sqrt(self) -> Self {
        self.sqrt_dd()
    }
    fn exp(self) -> Self {
        self.exp_dd()
    }
    fn exp2(self) -> Self {
        (self * LN2).exp_dd()
    }
    fn ln(self) -> Self {
        self.ln_dd()
    }
    fn log(self, base: Self) -> Self {
        self.ln() / base.ln()
    }
    fn log2(self) -> Self {
        self.ln() / LN2
    }
    fn log10(self) -> Self {
        self.ln() / Self::new(10.0).ln()
    }
    fn max(self, other: Self) -> Self {
        if self.is_nan() || other > self {
            other
        } else {
            self
        }
    }
    fn min(self, other: Self) -> Self {
        if self.is_nan() || other < self {
            other
        } else {
            self
        }
    }
    fn abs_sub(self, other: Self) -> Self {
        if self > other {
            self - other
        } else {
            Self::zero()
        }
    }
    fn cbrt(self) -> Self {
        Self::new(self.hi.cbrt())
    }
    fn hypot(self, other: Self) -> Self {
        (self.square() + other.square()).sqrt()
    }
    fn sin(self) -> Self {
        Self::new(self.hi.sin())
    }
    fn cos(self) -> Self {
        Self::new(self.hi.cos())
    }
    fn tan(self) -> Self {
        Self::new(self.hi.tan())
    }
    fn asin(self) -> Self {
        Self::new(self.hi.asin())
    }
    fn acos(self) -> Self {
        Self::new(self.hi.acos())
    }
    fn atan(self) -> Self {
        Self::new(self.hi.atan())
    }
    fn atan2(self, other: Self) -> Self {
        Self::new(self.hi.atan2(other.hi))
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn exp_m1(self) -> Self {
        self.exp() - Self::one()
    }
    fn ln_1p(self) -> Self {
        (self + Self::one()).ln()
    }
    fn sinh(self) -> Self {
        let e = self.exp();
        (e - e.recip()) * Self::new(0.5)
    }
    fn cosh(self) -> Self {
        let e = self.exp();
        (e + e.recip()) * Self::new(0.5)
    }
    fn tanh(self) -> Self {
        self.tanh_dd()
    }
    fn asinh(self) -> Self {
        Self::new(self.hi.asinh())
    }
    fn acosh(self) -> Self {
        Self::new(self.hi.acosh())
    }
    fn atanh(self) -> Self {
        Self::new(self.hi.atanh())
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.hi.integer_decode()
    }
}

impl Scalar for DoubleDouble {}
