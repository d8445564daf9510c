//! Floating-point abstraction shared by every numeric routine in the crate.
//!
//! Production code runs in `f32`; gradient checks run in `f64`, where central
//! differences are accurate enough to resolve a `1e-4` relative error.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Real scalar usable as tensor element type.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Short type tag used in diagnostics.
    const NAME: &'static str;

    /// `c = alpha * a * b + beta * c` on strided row/column views.
    ///
    /// `a` is `m × k`, `b` is `k × n`, `c` is `m × n`. Strides are in
    /// elements. Slices must cover every addressed element.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn erf(self) -> Self;

    /// `e^{-a}` for `a >= 0`.
    fn exp_neg(self) -> Self;

    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize, what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(
        rs >= 0 && cs >= 0 && (last as usize) < len,
        "gemm operand {what} too short: len {len}, last index {last}"
    );
}

macro_rules! impl_scalar {
    ($t:ty, $name:expr, $gemm:path, $erf:path, $exp_neg:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_extent(a.len(), m, k, rsa, csa, "a");
                check_extent(b.len(), k, n, rsb, csb, "b");
                check_extent(c.len(), m, n, rsc, csc, "c");
                // SAFETY: every element addressed by the strided views was
                // bounds-checked above; `c` is uniquely borrowed.
                unsafe {
                    $gemm(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc);
                }
            }

            #[inline]
            fn erf(self) -> Self {
                $erf(self)
            }

            #[inline]
            fn exp_neg(self) -> Self {
                $exp_neg(self)
            }
        }
    };
}

/// Rational approximation of `erf`; absolute error stays below `1e-6` once
/// single-precision rounding is included.
#[inline]
fn erf_f32(x: f32) -> f32 {
    const P: f32 = 0.327_591_1;
    const A: [f32; 5] = [0.254_829_6, -0.284_496_74, 1.421_413_8, -1.453_152_1, 1.061_405_4];
    let z = x.abs();
    let t = 1.0 / (1.0 + P * z);
    let poly = t * (A[0] + t * (A[1] + t * (A[2] + t * (A[3] + t * A[4]))));
    let y = 1.0 - poly * exp_neg_f32(z * z);
    y.copysign(x)
}

/// `e^{-a}` for `a >= 0` via range reduction to `2^n · 2^f`, `f ∈ [-1/2, 1/2]`;
/// branch-free so loops over it vectorize. Relative error is below `2e-7·(1 + a)`.
#[inline]
fn exp_neg_f32(a: f32) -> f32 {
    let t = (-a * std::f32::consts::LOG2_E).max(-126.0);
    // round to nearest by adding and removing 1.5·2^23
    const SHIFT: f32 = 12_582_912.0;
    let n = (t + SHIFT) - SHIFT;
    let f = (t - n) * std::f32::consts::LN_2;
    let p = 1.0 + f * (1.0 + f * (0.5 + f * (1.0 / 6.0 + f * (1.0 / 24.0 + f * (1.0 / 120.0 + f * (1.0 / 720.0))))));
    let scale = f32::from_bits(((n as i32 + 127) as u32) << 23);
    p * scale
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm, erf_f32, exp_neg_f32);
impl_scalar!(f64, "f64", matrixmultiply::dgemm, libm::erf, exp_neg_f64);

#[inline]
fn exp_neg_f64(a: f64) -> f64 {
    (-a).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_row_major_product() {
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, 1.0, &a, 2, 1, &b, 2, 1, 0.0, &mut c, 2, 1);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn gemm_transposed_view() {
        // aᵀ·b with a stored row-major 2×2
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b = [1.0f32, 0.0, 0.0, 1.0];
        let mut c = [0.0f32; 4];
        f32::gemm(2, 2, 2, 1.0, &a, 1, 2, &b, 2, 1, 0.0, &mut c, 2, 1);
        assert_eq!(c, [1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn erf_reference_points() {
        assert_eq!(Scalar::erf(0.0f64), 0.0);
        assert!((Scalar::erf(1.0f64) - 0.842_700_792_949_714_9).abs() < 1e-15);
        assert!((Scalar::erf(-1.0f32) + 0.842_700_8).abs() < 1e-6);
    }

    #[test]
    fn fast_erf_tracks_libm() {
        let worst = (-6000..=6000)
            .map(|i| i as f32 * 1e-3)
            .map(|x| (Scalar::erf(x) as f64 - libm::erf(x as f64)).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "{worst}");
        assert_eq!(Scalar::erf(20.0f32), 1.0);
        assert_eq!(Scalar::erf(-20.0f32), -1.0);
    }

    #[test]
    fn fast_exp_relative_error() {
        for i in 0..=40000 {
            let a = i as f32 * 2e-3;
            let want = (-(a as f64)).exp();
            let got = exp_neg_f32(a) as f64;
            assert!((got - want).abs() <= 2e-7 * (1.0 + a as f64) * want, "{a}: {got} vs {want}");
        }
    }
}
