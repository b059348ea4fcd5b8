use std::fmt::{Debug, Display};

/// Floating-point element type for tensors.
///
/// `f32` is the training dtype; `f64` drives gradient checks. The `gemm`
/// hook dispatches to the matching `matrixmultiply` kernel so both dtypes
/// share every code path above the inner product.
pub trait Scalar: num_traits::Float + Send + Sync + Debug + Display + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c[m x n] = alpha * op(a) * op(b) + beta * c` over row-major slices,
    /// where `op` transposes when the corresponding flag is set (`a` is then
    /// stored `k x m`, `b` stored `n x k`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        beta: Self,
        c: &mut [Self],
    );

    /// Specialized weight-gradient kernel for single-row FIR convolutions
    /// (`Cin = 1`, `kH = 1`, unit stride); see [`crate::fir`]. Returns false
    /// when this dtype has no such kernel and the caller must take the
    /// generic GEMM route.
    #[allow(clippy::too_many_arguments)]
    fn fir_grad_weights(
        _n_samples: usize,
        _h: usize,
        _w_in: usize,
        _ow: usize,
        _n_co: usize,
        _kw: usize,
        _x: &[Self],
        _dy: &[Self],
        _dw: &mut [Self],
    ) -> bool {
        false
    }
}

macro_rules! impl_gemm {
    ($gemm:path) => {
        fn gemm(
            m: usize,
            k: usize,
            n: usize,
            alpha: Self,
            a: &[Self],
            a_trans: bool,
            b: &[Self],
            b_trans: bool,
            beta: Self,
            c: &mut [Self],
        ) {
            assert_eq!(a.len(), m * k, "gemm: a length");
            assert_eq!(b.len(), k * n, "gemm: b length");
            assert_eq!(c.len(), m * n, "gemm: c length");
            let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
            let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
            unsafe {
                $gemm(
                    m,
                    k,
                    n,
                    alpha,
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
    };
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }

    impl_gemm!(matrixmultiply::sgemm);

    fn fir_grad_weights(
        n_samples: usize,
        h: usize,
        w_in: usize,
        ow: usize,
        n_co: usize,
        kw: usize,
        x: &[Self],
        dy: &[Self],
        dw: &mut [Self],
    ) -> bool {
        crate::fir::grad_weights_f32(n_samples, h, w_in, ow, n_co, kw, x, dy, dw);
        true
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }

    impl_gemm!(matrixmultiply::dgemm);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_plain() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn gemm_transposed_operands() {
        // a^T where a is stored [k x m] = [[1,3],[2,4]] -> logical [1 2; 3 4]
        let a_t = [1.0f32, 3.0, 2.0, 4.0];
        let b = [5.0f32, 6.0, 7.0, 8.0];
        let mut c = [0.0f32; 4];
        f32::gemm(2, 2, 2, 1.0, &a_t, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);

        // b^T where b is stored [n x k] = [[5,7],[6,8]] -> logical [5 6; 7 8]
        let a = [1.0f32, 2.0, 3.0, 4.0];
        let b_t = [5.0f32, 7.0, 6.0, 8.0];
        let mut c = [0.0f32; 4];
        f32::gemm(2, 2, 2, 1.0, &a, false, &b_t, true, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn gemm_accumulates_with_beta() {
        let a = [2.0f64];
        let b = [3.0f64];
        let mut c = [10.0f64];
        f64::gemm(1, 1, 1, 1.0, &a, false, &b, false, 1.0, &mut c);
        assert_eq!(c, [16.0]);
    }
}
