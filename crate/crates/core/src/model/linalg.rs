//! Strided GEMM over flat buffers, dispatching to `matrixmultiply`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float as NumFloat, FromPrimitive, ToPrimitive};

/// Scalar type the transformer can run in. `f32` for everything real;
/// `f64` exists so gradients can be checked against finite differences.
pub trait Float:
    NumFloat
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// # Safety
    /// Pointers and strides must describe in-bounds matrices.
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

    fn from_f64_lossy(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("representable")
    }

    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("representable")
    }
}

impl Float for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Float for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A strided 2-D window into a flat buffer.
#[derive(Clone, Copy, Debug)]
pub struct View {
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    /// Row-major matrix starting at `off` with leading dimension `ld`.
    pub fn rm(off: usize, ld: usize) -> Self {
        View { off, rs: ld, cs: 1 }
    }

    pub fn t(self) -> Self {
        View {
            off: self.off,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn check(&self, rows: usize, cols: usize, len: usize, what: &str) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.off + (rows - 1) * self.rs + (cols - 1) * self.cs;
        assert!(last < len, "{what} view out of bounds: {last} >= {len}");
    }
}

/// `c[m×n] = alpha · a[m×k] · b[k×n] + beta · c`. With `beta == 0` the
/// previous contents of `c` are ignored.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Float>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: &[F],
    av: View,
    b: &[F],
    bv: View,
    beta: F,
    c: &mut [F],
    cv: View,
) {
    av.check(m, k, a.len(), "lhs");
    bv.check(k, n, b.len(), "rhs");
    cv.check(m, n, c.len(), "out");
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: all three windows were bounds-checked above and `c` is a
    // unique borrow, so it cannot alias `a` or `b`.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.off),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.off),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.off),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strided_products_match_naive() {
        // a: 2x3, b: 3x2 stored transposed (2x3)
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let bt = [7.0f64, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c = [0.0f64; 4];
        gemm(2, 3, 2, 1.0, &a, View::rm(0, 3), &bt, View::rm(0, 3).t(), 0.0, &mut c, View::rm(0, 2));
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);

        // accumulate with beta = 1
        gemm(2, 3, 2, 1.0, &a, View::rm(0, 3), &bt, View::rm(0, 3).t(), 1.0, &mut c, View::rm(0, 2));
        assert_eq!(c, [116.0, 128.0, 278.0, 308.0]);
    }
}
