use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type. `f32` is the working precision, `f64` backs the
/// oracle and finite-difference suites.
pub trait Real:
    Float
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
    const NAME: &'static str;

    fn of(x: f64) -> Self;

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `e^x - 1` for the scan kernels. `f32` uses a branch-free polynomial that
    /// vectorizes; `f64` defers to the standard library.
    fn expm1_kernel(self) -> Self;

    /// `c = a · b + beta · c` for row-major operands. `a` is `m×k` (or `k×m` when
    /// `a_t`), `b` is `k×n` (or `n×k` when `b_t`), `c` is `m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        beta: Self,
    );
}

/// Branch-free `e^x - 1` in single precision, relative error below `3e-7`.
///
/// Small arguments use the Taylor series directly; the rest go through
/// `2^k · e^r` with `|r| ≤ ln 2 / 2`. Inputs are clamped to `[-87, 88]`.
#[inline(always)]
pub fn expm1_f32(x: f32) -> f32 {
    let small = x
        * (1.0
            + x * (1.0 / 2.0
                + x * (1.0 / 6.0
                    + x * (1.0 / 24.0
                        + x * (1.0 / 120.0 + x * (1.0 / 720.0 + x * (1.0 / 5040.0 + x * (1.0 / 40320.0))))))));
    let xc = x.clamp(-87.0, 88.0);
    // Adding 1.5·2^23 rounds to an integer k that sits in the low mantissa
    // bits, so 2^k is assembled with integer ops only.
    let shifted = xc * std::f32::consts::LOG2_E + 12_582_912.0;
    let k = shifted - 12_582_912.0;
    let r = xc - k * 0.693_145_75 - k * 1.428_606_8e-6;
    let p = 1.0
        + r * (1.0
            + r * (1.0 / 2.0
                + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0 + r * (1.0 / 5040.0)))))));
    let scale = f32::from_bits(shifted.to_bits().wrapping_sub(0x4B40_0000).wrapping_add(127) << 23);
    let large = p * scale - 1.0;
    if x.abs() < 0.35 {
        small
    } else {
        large
    }
}

macro_rules! impl_real {
    ($t:ty, $name:expr, $gemm:path, $expm1:expr) => {
        impl Real for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline(always)]
            fn expm1_kernel(self) -> Self {
                $expm1(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                beta: Self,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: slice lengths were checked against the strides above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm, expm1_f32);
impl_real!(f64, "f64", matrixmultiply::dgemm, f64::exp_m1);
