//! Scalar element types and the dense kernels shared by every op.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element stored in a [`Tensor`](crate::Tensor).
///
/// Implemented for `f32` (the working precision) and `f64` (verification).
pub trait Element:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// Tag written into model files.
    const DTYPE_TAG: u8;

    /// `c <- alpha * a * b + beta * c` for an `m x k` by `k x n` product with
    /// arbitrary non-negative row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (usize, usize), what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs + (cols - 1) * cs;
    assert!(last < len, "gemm operand {what} out of bounds: {last} >= {len}");
}

/// Below this many output columns the packing done by the blocked kernel
/// costs more than the arithmetic.
const SKINNY_COLUMNS: usize = 16;

fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Matrix product for very few output columns, as dot products when rows of
/// `a` are contiguous and as column updates when its columns are.
#[allow(clippy::too_many_arguments)]
fn skinny_gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    a_strides: (usize, usize),
    b: &[T],
    b_strides: (usize, usize),
    beta: T,
    c: &mut [T],
    c_strides: (usize, usize),
) {
    // Columns of op(b), each made contiguous.
    let mut columns = vec![T::zero(); n * k];
    for j in 0..n {
        for l in 0..k {
            columns[j * k + l] = b[l * b_strides.0 + j * b_strides.1];
        }
    }
    let mut acc = vec![T::zero(); m * n];
    if a_strides.1 == 1 {
        for i in 0..m {
            let row = &a[i * a_strides.0..i * a_strides.0 + k];
            for j in 0..n {
                acc[i * n + j] = dot(row, &columns[j * k..(j + 1) * k]);
            }
        }
    } else {
        // acc holds the transpose here: [n, m].
        for l in 0..k {
            let col = &a[l * a_strides.1..l * a_strides.1 + m];
            for j in 0..n {
                let bl = columns[j * k + l];
                for (out, &av) in acc[j * m..(j + 1) * m].iter_mut().zip(col) {
                    *out += av * bl;
                }
            }
        }
    }
    for i in 0..m {
        for j in 0..n {
            let v = if a_strides.1 == 1 { acc[i * n + j] } else { acc[j * m + i] };
            let dst = &mut c[i * c_strides.0 + j * c_strides.1];
            *dst = if beta == T::zero() { alpha * v } else { beta * *dst + alpha * v };
        }
    }
}

macro_rules! impl_element {
    ($t:ty, $tag:expr, $kernel:path) => {
        impl Element for $t {
            const DTYPE_TAG: u8 = $tag;

            fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                check_extent(a.len(), m, k, a_strides, "a");
                check_extent(b.len(), k, n, b_strides, "b");
                check_extent(c.len(), m, n, c_strides, "c");
                if m == 0 || n == 0 {
                    return;
                }
                if n <= SKINNY_COLUMNS && (a_strides.0 == 1 || a_strides.1 == 1) {
                    skinny_gemm(m, k, n, alpha, a, a_strides, b, b_strides, beta, c, c_strides);
                    return;
                }
                // SAFETY: every index reachable through the given strides was
                // bounds-checked above, and `c` does not alias `a` or `b`
                // because it is borrowed mutably.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }
        }
    };
}

impl_element!(f32, 0, matrixmultiply::sgemm);
impl_element!(f64, 1, matrixmultiply::dgemm);

/// Layout of a matrix operand stored row-major in a flat slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// The slice holds the matrix as written.
    Normal,
    /// The slice holds the transpose of the matrix.
    Transposed,
}

/// `c <- alpha * op(a) * op(b) + beta * c` on dense row-major buffers.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    a_layout: Layout,
    b: &[T],
    b_layout: Layout,
    beta: T,
    c: &mut [T],
) {
    let a_strides = match a_layout {
        Layout::Normal => (k, 1),
        Layout::Transposed => (1, m),
    };
    let b_strides = match b_layout {
        Layout::Normal => (n, 1),
        Layout::Transposed => (1, k),
    };
    T::gemm_raw(m, k, n, alpha, a, a_strides, b, b_strides, beta, c, (n, 1));
}

const PAIRWISE_BLOCK: usize = 32;

/// Sum with a fixed pairwise tree so that results do not depend on how the
/// caller chunked the work.
pub fn pairwise_sum<T: Element>(values: &[T]) -> T {
    if values.len() <= PAIRWISE_BLOCK {
        let mut acc = T::zero();
        for &v in values {
            acc += v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Pairwise sum of `f(v)` without materializing the mapped slice.
pub fn pairwise_sum_by<T: Element, F: Fn(T) -> T + Copy>(values: &[T], f: F) -> T {
    if values.len() <= PAIRWISE_BLOCK {
        let mut acc = T::zero();
        for &v in values {
            acc += f(v);
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum_by(&values[..mid], f) + pairwise_sum_by(&values[mid..], f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_gemm(m: usize, k: usize, n: usize, beta: f64) {
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let c0: Vec<f64> = (0..m * n).map(|i| (i as f64).cos()).collect();
        let mut expected: Vec<f64> = c0.iter().map(|v| beta * v).collect();
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    expected[i * n + j] += 2.0 * a[i * k + p] * b[p * n + j];
                }
            }
        }
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        for (aa, al) in [(&a, Layout::Normal), (&at, Layout::Transposed)] {
            for (bb, bl) in [(&b, Layout::Normal), (&bt, Layout::Transposed)] {
                let mut c = c0.clone();
                gemm(m, k, n, 2.0, aa, al, bb, bl, beta, &mut c);
                for (x, y) in c.iter().zip(&expected) {
                    assert!((x - y).abs() < 1e-10, "{m}x{k}x{n} beta {beta}");
                }
            }
        }
    }

    #[test]
    fn gemm_matches_naive_in_all_layouts() {
        for (m, k, n) in [(3, 4, 5), (6, 21, 1), (7, 19, 13), (1, 9, 8), (5, 3, 9)] {
            for beta in [0.0, 0.5] {
                check_gemm(m, k, n, beta);
            }
        }
    }

    #[test]
    fn pairwise_sum_is_exact_on_integers() {
        let v: Vec<f32> = (1..=1000).map(|i| i as f32).collect();
        assert_eq!(pairwise_sum(&v), 500_500.0);
        assert_eq!(pairwise_sum_by(&v, |x| x * 2.0), 1_001_000.0);
    }
}
