//! Row-major dense kernels over `f32`/`f64`.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Real scalar the model can be evaluated in.
pub trait Scalar:
    Copy
    + Default
    + Debug
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    fn zero() -> Self;
    fn one() -> Self;
    fn neg_infinity() -> Self;
    fn lit(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn is_finite(self) -> bool;

    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    /// `C = alpha * A * B + beta * C` with explicit row/column strides.
    ///
    /// # Safety
    /// Every index reachable through the given shapes and strides must be in
    /// bounds of the corresponding pointer.
    #[allow(clippy::too_many_arguments)]
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
    );
}

macro_rules! native_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn zero() -> Self {
                0.0
            }
            fn one() -> Self {
                1.0
            }
            fn neg_infinity() -> Self {
                <$t>::NEG_INFINITY
            }
            fn lit(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
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
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

native_scalar!(f32, matrixmultiply::sgemm);
native_scalar!(f64, matrixmultiply::dgemm);

pub(crate) fn sum<T: Scalar>(it: impl Iterator<Item = T>) -> T {
    it.fold(T::zero(), |a, b| a + b)
}

/// Strided view of a matrix inside a slice.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T: Scalar> View<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        View { data, rows, cols, rs: cols, cs: 1 }
    }

    /// Columns `col0..col0+cols` of a row-major matrix with `stride` columns.
    pub fn cols(data: &'a [T], rows: usize, stride: usize, col0: usize, cols: usize) -> Self {
        View { data: &data[col0..], rows, cols, rs: stride, cs: 1 }
    }

    pub fn t(self) -> Self {
        View { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `out = alpha * a * b + beta * out`, `out` strided like `View`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(alpha: T, a: View<T>, b: View<T>, beta: T, out: &mut [T], rso: usize, cso: usize) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    a.check();
    b.check();
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * rso + (n - 1) * cso < out.len(), "output out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let o = &mut out[i * rso + j * cso];
                *o = if beta == T::zero() { T::zero() } else { *o * beta };
            }
        }
        return;
    }
    // SAFETY: bounds of all three operands were checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            out.as_mut_ptr(),
            rso as isize,
            cso as isize,
        )
    }
}

/// `x (m×k) · w (k×n) + bias`, fresh output.
pub fn linear<T: Scalar>(x: &[T], m: usize, w: &[T], bias: &[T], n: usize) -> Vec<T> {
    let k = x.len().checked_div(m).unwrap_or(0);
    let mut out = vec![T::zero(); m * n];
    for row in out.chunks_exact_mut(n) {
        row.copy_from_slice(bias);
    }
    gemm(T::one(), View::new(x, m, k), View::new(w, k, n), T::one(), &mut out, n, 1);
    out
}

/// `x (m×k) · w (k×n)`, fresh output.
pub fn linear_nobias<T: Scalar>(x: &[T], m: usize, w: &[T], n: usize) -> Vec<T> {
    let k = x.len().checked_div(m).unwrap_or(0);
    let mut out = vec![T::zero(); m * n];
    gemm(T::one(), View::new(x, m, k), View::new(w, k, n), T::zero(), &mut out, n, 1);
    out
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm; returns normalized rows and per-row reciprocal std.
pub fn layer_norm<T: Scalar>(x: &[T], d: usize, g: &[T], b: &[T], out: &mut [T], xhat: Option<&mut [T]>) -> Vec<T> {
    let m = x.len() / d;
    let mut rstds = Vec::with_capacity(m);
    let eps = T::lit(LN_EPS);
    let inv_d = T::one() / T::lit(d as f64);
    let mut xhat = xhat;
    for r in 0..m {
        let row = &x[r * d..(r + 1) * d];
        let mean = sum(row.iter().copied()) * inv_d;
        let var = sum(row.iter().map(|&v| (v - mean) * (v - mean))) * inv_d;
        let rstd = T::one() / (var + eps).sqrt();
        rstds.push(rstd);
        for j in 0..d {
            let h = (row[j] - mean) * rstd;
            if let Some(xh) = xhat.as_deref_mut() {
                xh[r * d + j] = h;
            }
            out[r * d + j] = h * g[j] + b[j];
        }
    }
    rstds
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044715;

pub fn gelu<T: Scalar>(u: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * u * (T::one() + (c * (u + a * u * u * u)).tanh())
}

pub fn gelu_grad<T: Scalar>(u: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (u + a * u * u * u)).tanh();
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * u * u)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|x| x as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5 - 2.0).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(1.0, View::new(&a, 2, 3), View::new(&b, 3, 4), 0.0, &mut c, 4, 1);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-12);
            }
        }
        // (B^T)(A^T) = (AB)^T
        let mut ct = vec![0.0; 8];
        gemm(1.0, View::new(&b, 3, 4).t(), View::new(&a, 2, 3).t(), 0.0, &mut ct, 2, 1);
        for i in 0..2 {
            for j in 0..4 {
                assert!((ct[j * 2 + i] - c[i * 4 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &u in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_is_standardizing() {
        let x = vec![1.0f64, 2.0, 3.0, 4.0];
        let mut out = vec![0.0; 4];
        layer_norm(&x, 4, &[1.0; 4], &[0.0; 4], &mut out, None);
        let mean: f64 = out.iter().sum::<f64>() / 4.0;
        let var: f64 = out.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}
