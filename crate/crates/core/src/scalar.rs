//! Floating-point element type shared by every tensor in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar usable as a tensor element.
///
/// Implemented for `f32` (training and checkpoints) and `f64` (gradient
/// checks and reference computations). The only non-generic piece is the
/// dense matrix product, which is routed to the matching `matrixmultiply`
/// kernel.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const NAME: &'static str;

    /// `c = alpha * a · b + beta * c` over strided row/column layouts.
    ///
    /// `a` is `m×k`, `b` is `k×n`, `c` is `m×n`; strides are in elements.
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

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, strides: (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * strides.0 + (cols as isize - 1) * strides.1;
    assert!(
        strides.0 >= 0 && strides.1 >= 0 && (last as usize) < len,
        "gemm operand of {rows}x{cols} with strides {strides:?} exceeds buffer of {len}"
    );
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path, $name:expr) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

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
            ) {
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                check_extent(c.len(), m, n, c_strides);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every operand extent was bounds-checked above.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm, "f32");
impl_scalar!(f64, matrixmultiply::dgemm, "f64");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0f64; 4];
        f64::gemm(2, 3, 2, 1.0, &a, (3, 1), &b, (2, 1), 0.0, &mut c, (2, 1));
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        // a^T via strides: a viewed as 3x2
        let mut c2 = [0.0f64; 4];
        f64::gemm(2, 3, 2, 1.0, &a, (1, 2), &b, (2, 1), 0.0, &mut c2, (2, 1));
        // a^T rows: [1,3,5],[2,4,6]
        assert_eq!(c2, [1.0 * 7.0 + 3.0 * 9.0 + 5.0 * 11.0, 1.0 * 8.0 + 3.0 * 10.0 + 5.0 * 12.0, 2.0 * 7.0 + 4.0 * 9.0 + 6.0 * 11.0, 2.0 * 8.0 + 4.0 * 10.0 + 6.0 * 12.0]);
    }
}
