//! Scalar abstraction shared by the density, geometry and autodiff code.
//!
//! Everything numeric in the crate is generic over [`Real`], implemented for
//! `f32` and `f64`. Training runs in `f64`; `f32` shows up in the underflow
//! diagnostics, where the precision itself is the quantity under study.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating-point scalar: `f32` or `f64`.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Short name used in CSV output (`single` / `double`).
    const PRECISION_NAME: &'static str;

    /// Converts an `f64` literal, rounding to the nearest representable value.
    fn lit(x: f64) -> Self;

    /// Smallest positive subnormal value.
    fn min_positive_subnormal() -> Self;

    /// `C = alpha * op(A) * op(B) + beta * C` on row-major buffers.
    ///
    /// `A` is `m x k`, `B` is `k x n`, `C` is `m x n`. Strides are given in
    /// elements as `(row_stride, col_stride)` so transposes are free.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn cast<U: Real>(self) -> U {
        U::lit(self.as_f64())
    }

    /// `ln` of [`Real::min_positive_subnormal`]; log-densities below this
    /// value round to exactly zero in linear space.
    fn ln_min_positive_subnormal() -> Self {
        Self::min_positive_subnormal().ln()
    }
}

fn check_gemm_bounds<T>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    sa: (isize, isize),
    b: &[T],
    sb: (isize, isize),
    c: &[T],
    sc: (isize, isize),
) {
    let extent = |rows: usize, cols: usize, s: (isize, isize)| -> usize {
        if rows == 0 || cols == 0 {
            return 0;
        }
        (rows - 1) * s.0 as usize + (cols - 1) * s.1 as usize + 1
    };
    assert!(sa.0 >= 0 && sa.1 >= 0 && sb.0 >= 0 && sb.1 >= 0 && sc.0 >= 0 && sc.1 >= 0);
    assert!(extent(m, k, sa) <= a.len(), "gemm: A too short");
    assert!(extent(k, n, sb) <= b.len(), "gemm: B too short");
    assert!(extent(m, n, sc) <= c.len(), "gemm: C too short");
}

impl Real for f32 {
    const PRECISION_NAME: &'static str = "single";

    fn lit(x: f64) -> Self {
        x as f32
    }

    fn min_positive_subnormal() -> Self {
        f32::from_bits(1)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        sa: (isize, isize),
        b: &[Self],
        sb: (isize, isize),
        beta: Self,
        c: &mut [Self],
        sc: (isize, isize),
    ) {
        check_gemm_bounds(m, k, n, a, sa, b, sb, c, sc);
        // SAFETY: every addressed element lies inside the slices (checked above).
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                sa.0,
                sa.1,
                b.as_ptr(),
                sb.0,
                sb.1,
                beta,
                c.as_mut_ptr(),
                sc.0,
                sc.1,
            );
        }
    }
}

impl Real for f64 {
    const PRECISION_NAME: &'static str = "double";

    fn lit(x: f64) -> Self {
        x
    }

    fn min_positive_subnormal() -> Self {
        f64::from_bits(1)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        sa: (isize, isize),
        b: &[Self],
        sb: (isize, isize),
        beta: Self,
        c: &mut [Self],
        sc: (isize, isize),
    ) {
        check_gemm_bounds(m, k, n, a, sa, b, sb, c, sc);
        // SAFETY: every addressed element lies inside the slices (checked above).
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                sa.0,
                sa.1,
                b.as_ptr(),
                sb.0,
                sb.1,
                beta,
                c.as_mut_ptr(),
                sc.0,
                sc.1,
            );
        }
    }
}

/// Floating-point precision selector for runtime configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::Single => f32::PRECISION_NAME,
            Precision::Double => f64::PRECISION_NAME,
        }
    }

    /// `ln` of the smallest positive subnormal at this precision, as `f64`.
    pub fn ln_underflow_floor(self) -> f64 {
        match self {
            Precision::Single => f32::ln_min_positive_subnormal() as f64,
            Precision::Double => f64::ln_min_positive_subnormal(),
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => Err(crate::Error::Parse(format!("unknown precision `{other}`"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subnormal_floors() {
        assert!((f64::ln_min_positive_subnormal() - (-744.440_071_921_381)).abs() < 1e-9);
        assert!((f32::ln_min_positive_subnormal() as f64 - (-103.278_929_903_431)).abs() < 1e-4);
        assert_eq!(f32::min_positive_subnormal() / 2.0, 0.0);
    }

    #[test]
    fn gemm_with_transposed_operand() {
        // A = [[1,2],[3,4]], B^T stored as [[5,6],[7,8]] -> B = [[5,7],[6,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let bt = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, 1.0, &a, (2, 1), &bt, (1, 2), 0.0, &mut c, (2, 1));
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
