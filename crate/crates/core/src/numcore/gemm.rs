//! Strided matrix-multiply kernel.

/// Row/column strides of a matrix operand, in elements.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    /// Plain row-major layout with `cols` columns.
    pub fn row_major(cols: usize) -> Self {
        Self { rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Self { rs: 1, cs: cols }
    }

    fn max_offset(self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c = alpha * a·b + beta * c`, with `a: m×k`, `b: k×n`, `c: m×n`.
///
/// Operands are described by a slice plus strides so transposed and
/// column-sliced views need no copies.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = i * lc.rs + j * lc.cs;
                c[idx] *= beta;
            }
        }
        return;
    }
    assert!(la.max_offset(m, k) < a.len(), "gemm: lhs out of bounds");
    assert!(lb.max_offset(k, n) < b.len(), "gemm: rhs out of bounds");
    assert!(lc.max_offset(m, n) < c.len(), "gemm: output out of bounds");
    // SAFETY: every element addressed by the strides lies within the
    // slices (checked above); `c` is exclusively borrowed and cannot
    // alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}
