//! Thin strided wrapper over `matrixmultiply::sgemm`.

/// Row/column strides of a matrix operand.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    /// Row-major `rows x cols`, optionally read transposed.
    pub fn row_major(cols: usize, transposed: bool) -> Self {
        if transposed {
            Self { rs: 1, cs: cols as isize }
        } else {
            Self { rs: cols as isize, cs: 1 }
        }
    }
}

/// `c = alpha * a(m x k) * b(k x n) + beta * c`, `c` row-major `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    la: Layout,
    b: &[f32],
    lb: Layout,
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let max_a = (m as isize - 1) * la.rs + (k as isize - 1) * la.cs;
    let max_b = (k as isize - 1) * lb.rs + (n as isize - 1) * lb.cs;
    assert!((max_a as usize) < a.len() && (max_b as usize) < b.len());
    // SAFETY: the bounds of every accessed element were checked above and `c`
    // is an exclusive borrow of at least m*n elements.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
