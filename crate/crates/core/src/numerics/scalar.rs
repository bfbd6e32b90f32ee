use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::sync::atomic::{AtomicUsize, Ordering};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rayon::prelude::*;

/// Element type tag, also the checkpoint dtype byte.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Read-only strided view of a matrix inside a flat buffer.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

/// Mutable strided view of a matrix inside a flat buffer.
pub struct MatMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major dense matrix with `cols` columns.
    pub fn dense(data: &'a [T], cols: usize) -> Self {
        MatRef {
            data,
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }

    /// Same storage read as its transpose.
    pub fn t(self) -> Self {
        MatRef {
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs;
        assert!(last < self.data.len(), "strided view out of bounds");
    }
}

impl<'a, T> MatMut<'a, T> {
    pub fn dense(data: &'a mut [T], cols: usize) -> Self {
        MatMut {
            data,
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs;
        assert!(last < self.data.len(), "strided view out of bounds");
    }
}

static MATMUL_THREADS: AtomicUsize = AtomicUsize::new(1);

/// Number of worker threads used by large matrix products. `1` (the default)
/// is the deterministic single-threaded mode.
pub fn set_matmul_threads(n: usize) {
    MATMUL_THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn matmul_threads() -> usize {
    MATMUL_THREADS.load(Ordering::Relaxed)
}

/// Floating point element usable by tensors and the gradient tape.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: DType;

    /// Lossy conversion from a literal.
    fn of(x: f64) -> Self;

    fn erf(self) -> Self;

    /// `c = alpha * a @ b + beta * c` with `a: m×k`, `b: k×n`, `c: m×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: MatRef<'_, Self>,
        b: MatRef<'_, Self>,
        beta: Self,
        c: MatMut<'_, Self>,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

/// Strided matrix product with optional row-parallel split.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    beta: T,
    c: MatMut<'_, T>,
) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    c.check(m, n);
    let threads = matmul_threads();
    // Row-splitting needs a dense row-major destination.
    if threads > 1 && m >= 64 && c.cs == 1 && c.rs == n && m * k * n >= 1 << 18 {
        let chunk_rows = m.div_ceil(threads);
        let start = c.offset;
        let dst = &mut c.data[start..start + m * n];
        dst.par_chunks_mut(chunk_rows * n)
            .enumerate()
            .for_each(|(ci, chunk)| {
                let r0 = ci * chunk_rows;
                let rows = chunk.len() / n;
                let a_sub = MatRef {
                    offset: a.offset + r0 * a.rs,
                    ..a
                };
                T::gemm_raw(rows, k, n, alpha, a_sub, b, beta, MatMut::dense(chunk, n));
            });
    } else {
        T::gemm_raw(m, k, n, alpha, a, b, beta, c);
    }
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $gemm:path, $erf:path) => {
        impl Scalar for $t {
            const DTYPE: DType = $dtype;

            #[inline]
            fn of(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn erf(self) -> Self {
                $erf(self)
            }

            fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: MatRef<'_, Self>,
                b: MatRef<'_, Self>,
                beta: Self,
                c: MatMut<'_, Self>,
            ) {
                if k == 0 {
                    // matrixmultiply scales c by beta in this case, but be explicit.
                    for i in 0..m {
                        for j in 0..n {
                            let idx = c.offset + i * c.rs + j * c.cs;
                            c.data[idx] = if beta == 0.0 { 0.0 } else { beta * c.data[idx] };
                        }
                    }
                    return;
                }
                // SAFETY: all three views were bounds-checked against their
                // buffers for the requested extents, strides are non-negative,
                // and `c` is a unique borrow disjoint from `a` and `b`.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
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

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    };
}

impl_scalar!(f32, DType::F32, matrixmultiply::sgemm, libm::erff);
impl_scalar!(f64, DType::F64, matrixmultiply::dgemm, libm::erf);
