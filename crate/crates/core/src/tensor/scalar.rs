use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Floating-point element type with a matrix-multiply kernel.
pub trait Scalar:
    Float + FromPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    /// `c = op(a) * op(b)`, or `c += op(a) * op(b)` when `accumulate`.
    ///
    /// `op(a)` is `m x k` and `op(b)` is `k x n`; a transposed operand is
    /// stored row-major in its untransposed shape (`k x m` / `n x k`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_transposed: bool,
        b: &[Self],
        b_transposed: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    /// `c = a * b` (or `c += a * b`) on strided views into flat buffers.
    ///
    /// Distinct `(i, j)` positions of `c` must map to distinct elements.
    fn gemm_view(
        m: usize,
        k: usize,
        n: usize,
        a: View<'_, Self>,
        b: View<'_, Self>,
        c: ViewMut<'_, Self>,
        accumulate: bool,
    );

    fn from_f64_lossy(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

/// A `rows x cols` matrix inside `data`: element `(i, j)` is at
/// `offset + i * rs + j * cs`.
#[derive(Debug, Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

#[derive(Debug)]
pub struct ViewMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

fn last_index(offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    offset + (rows - 1) * rs + (cols - 1) * cs
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_transposed: bool,
                b: &[Self],
                b_transposed: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if a_transposed { (1, m) } else { (k, 1) };
                let (rsb, csb) = if b_transposed { (1, k) } else { (n, 1) };
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the length assertion above guarantees every index
                // reachable through the strides lies inside the slices, and
                // `c` does not alias `a` or `b` because it is borrowed mutably.
                unsafe {
                    $kernel(
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
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn gemm_view(
                m: usize,
                k: usize,
                n: usize,
                a: View<'_, Self>,
                b: View<'_, Self>,
                c: ViewMut<'_, Self>,
                accumulate: bool,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    assert!(last_index(c.offset, m, n, c.rs, c.cs) < c.data.len());
                    if !accumulate {
                        for i in 0..m {
                            for j in 0..n {
                                c.data[c.offset + i * c.rs + j * c.cs] = 0.0;
                            }
                        }
                    }
                    return;
                }
                assert!(last_index(a.offset, m, k, a.rs, a.cs) < a.data.len());
                assert!(last_index(b.offset, k, n, b.rs, b.cs) < b.data.len());
                assert!(last_index(c.offset, m, n, c.rs, c.cs) < c.data.len());
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the assertions bound every reachable index by the
                // slice lengths, and `c` is a unique borrow.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.data.as_ptr().add(a.offset),
                        a.rs as isize,
                        a.cs as isize,
                        b.data.as_ptr().add(b.offset),
                        b.rs as isize,
                        b.cs as isize,
                        beta,
                        c.data.as_mut_ptr().add(c.offset),
                        c.rs as isize,
                        c.cs as isize,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
