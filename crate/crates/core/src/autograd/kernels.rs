//! Raw slice kernels shared by forward and backward passes.

use num_traits::Float;

/// Float types the tape can run on. Matrix products go through
/// `matrixmultiply`, which picks SIMD kernels at runtime.
pub trait Scalar: Float + std::fmt::Debug + Send + Sync + 'static {
    /// `c[m,n] += a[m,k] * b[k,n]` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        c: &mut [Self],
    );
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm_strided(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                (rsa, csa): (usize, usize),
                b: &[Self],
                (rsb, csb): (usize, usize),
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the strides describe dense row-major or transposed
                // views that lie within the asserted slice lengths.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        1.0,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    F::gemm_strided(m, k, n, a, (k, 1), b, (n, 1), out);
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_nt_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    F::gemm_strided(m, k, n, a, (k, 1), b, (1, k), out);
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
pub(crate) fn gemm_tn_acc<F: Scalar>(a: &[F], g: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    F::gemm_strided(k, m, n, a, (1, k), g, (n, 1), out);
}

/// Numerically stable softmax of one row, written into `out`.
pub(crate) fn softmax_row<F: Float>(row: &[F], out: &mut [F]) {
    let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let mut sum = F::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum = sum + *o;
    }
    let inv = sum.recip();
    out.iter_mut().for_each(|o| *o = *o * inv);
}
