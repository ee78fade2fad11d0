//! Double-double arithmetic (about 106 significand bits).
//!
//! Used as a reference scalar when finite-differencing the loss: at `f64`
//! the roundoff of a central difference is already ~1e-11, which swamps
//! small gradient entries.

use std::cmp::Ordering;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};
use std::sync::OnceLock;

use super::linalg::Scalar;

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd { hi: std::f64::consts::LN_2, lo: 2.319_046_813_846_299_6e-17 };

fn inverse_factorials() -> &'static [Dd; 10] {
    static TABLE: OnceLock<[Dd; 10]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [Dd::new(1.0); 10];
        let mut f = 1.0;
        for (k, e) in t.iter_mut().enumerate().skip(1) {
            f *= k as f64;
            *e = Dd::new(1.0) / Dd::new(f);
        }
        t
    })
}

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
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const fn new(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    fn renorm(hi: f64, lo: f64) -> Self {
        let (hi, lo) = quick_two_sum(hi, lo);
        Dd { hi, lo }
    }

    fn mul_pow2(self, k: i32) -> Self {
        let f = 2f64.powi(k);
        Dd { hi: self.hi * f, lo: self.lo * f }
    }

    pub fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    fn exp_dd(self) -> Self {
        if self.hi < -745.0 {
            return Dd::new(0.0);
        }
        if self.hi > 709.0 {
            return Dd::new(f64::INFINITY);
        }
        if self.hi.is_nan() {
            return self;
        }
        // x = k ln2 + r, then exp(r) = (exp(r / 2^10))^(2^10).
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * Dd::new(k)).mul_pow2(-10);
        // |r| < 3.4e-4, so nine Taylor terms reach double-double precision.
        let inv_fact = inverse_factorials();
        let mut acc = inv_fact[9];
        for c in inv_fact[..9].iter().rev() {
            acc = acc * r + *c;
        }
        for _ in 0..10 {
            acc = acc * acc;
        }
        acc.mul_pow2(k as i32)
    }

    fn ln_dd(self) -> Self {
        if self.hi <= 0.0 {
            return Dd::new(if self.hi == 0.0 { f64::NEG_INFINITY } else { f64::NAN });
        }
        if self.hi.is_infinite() {
            return self;
        }
        let mut x = Dd::new(self.hi.ln());
        for _ in 0..2 {
            x = x + self * (-x).exp_dd() - Dd::new(1.0);
        }
        x
    }

    fn sqrt_dd(self) -> Self {
        if self.hi <= 0.0 {
            return Dd::new(if self.hi == 0.0 { 0.0 } else { f64::NAN });
        }
        let s = Dd::new(self.hi.sqrt());
        s + (self - s * s) / (s * Dd::new(2.0))
    }

    fn tanh_dd(self) -> Self {
        if self.hi > 20.0 {
            return Dd::new(1.0) - Dd::new(2.0) * (self * Dd::new(-2.0)).exp_dd();
        }
        if self.hi < -20.0 {
            return -(-self).tanh_dd();
        }
        let e = (self * Dd::new(2.0)).exp_dd();
        (e - Dd::new(1.0)) / (e + Dd::new(1.0))
    }
}

impl From<f64> for Dd {
    fn from(x: f64) -> Self {
        Dd::new(x)
    }
}

impl PartialEq for Dd {
    fn eq(&self, other: &Self) -> bool {
        self.hi == other.hi && self.lo == other.lo
    }
}

impl PartialOrd for Dd {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi)? {
            Ordering::Equal => self.lo.partial_cmp(&other.lo),
            o => Some(o),
        }
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        if !self.hi.is_finite() || !o.hi.is_finite() {
            return Dd::new(self.hi + o.hi);
        }
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Dd::renorm(s, e + f)
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        if !self.hi.is_finite() || !o.hi.is_finite() {
            return Dd::new(self.hi * o.hi);
        }
        let (p, e) = two_prod(self.hi, o.hi);
        Dd::renorm(p, e + (self.hi * o.lo + self.lo * o.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        if !self.hi.is_finite() || !o.hi.is_finite() || o.hi == 0.0 {
            return Dd::new(self.hi / o.hi);
        }
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::new(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::new(q2);
        let q3 = r.hi / o.hi;
        let (q1, q2) = quick_two_sum(q1, q2);
        Dd { hi: q1, lo: q2 } + Dd::new(q3)
    }
}

impl AddAssign for Dd {
    fn add_assign(&mut self, o: Dd) {
        *self = *self + o;
    }
}

impl SubAssign for Dd {
    fn sub_assign(&mut self, o: Dd) {
        *self = *self - o;
    }
}

impl MulAssign for Dd {
    fn mul_assign(&mut self, o: Dd) {
        *self = *self * o;
    }
}

impl Scalar for Dd {
    fn zero() -> Self {
        Dd::new(0.0)
    }
    fn one() -> Self {
        Dd::new(1.0)
    }
    fn neg_infinity() -> Self {
        Dd::new(f64::NEG_INFINITY)
    }
    fn lit(x: f64) -> Self {
        Dd::new(x)
    }
    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
    fn exp(self) -> Self {
        self.exp_dd()
    }
    fn ln(self) -> Self {
        self.ln_dd()
    }
    fn sqrt(self) -> Self {
        self.sqrt_dd()
    }
    fn tanh(self) -> Self {
        self.tanh_dd()
    }
    fn is_finite(self) -> bool {
        self.hi.is_finite()
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        for i in 0..m as isize {
            for j in 0..n as isize {
                let mut acc = Dd::new(0.0);
                for p in 0..k as isize {
                    acc += *a.offset(i * rsa + p * csa) * *b.offset(p * rsb + j * csb);
                }
                let out = c.offset(i * rsc + j * csc);
                *out = if beta == Dd::new(0.0) { alpha * acc } else { alpha * acc + beta * *out };
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Dd, b: Dd, tol: f64) -> bool {
        ((a - b).abs() / b.abs().max(Dd::new(1e-300))).to_f64() < tol
    }

    #[test]
    fn arithmetic_beyond_f64() {
        let third = Dd::new(1.0) / Dd::new(3.0);
        assert!(close(third * Dd::new(3.0), Dd::new(1.0), 1e-31));
        let tiny = Dd::new(1.0) + Dd::new(1e-20);
        assert_eq!((tiny - Dd::new(1.0)).to_f64(), 1e-20);
        let s = Dd::new(2.0).sqrt();
        assert!(close(s * s, Dd::new(2.0), 1e-31));
    }

    #[test]
    fn transcendental_identities() {
        for i in 0..200 {
            let x = Dd::new(-30.0 + 0.3 * i as f64) + Dd::new(1e-19);
            let e = x.exp();
            assert!(close(e * (-x).exp(), Dd::new(1.0), 1e-28), "exp at {x:?}");
            assert!((e.ln() - x).abs().to_f64() < 1e-28 * x.abs().to_f64().max(1.0), "ln at {x:?}");
            let t = x.tanh();
            let want = (e * e - Dd::new(1.0)) / (e * e + Dd::new(1.0));
            assert!((t - want).abs().to_f64() < 1e-28);
        }
        assert!(close(Dd::new(1.0).exp(), Dd { hi: std::f64::consts::E, lo: 1.445_646_891_729_250_2e-16 }, 1e-28));
    }
}
