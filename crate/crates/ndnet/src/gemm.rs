//! Thin wrappers over `matrixmultiply::sgemm` for row-major operands.

/// `c (m×n) = a (m×k) · b (k×n)`, or `c += ...` when `accumulate`.
pub(crate) fn matmul(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], accumulate: bool) {
    gemm(m, k, n, a, k as isize, 1, b, n as isize, 1, c, accumulate);
}

/// `c (m×n) = aᵀ · b` where `a` is stored `k×m`.
pub(crate) fn matmul_at_b(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], accumulate: bool) {
    gemm(m, k, n, a, 1, m as isize, b, n as isize, 1, c, accumulate);
}

/// `c (m×n) = a · bᵀ` where `b` is stored `n×k`.
pub(crate) fn matmul_a_bt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32], accumulate: bool) {
    gemm(m, k, n, a, k as isize, 1, b, 1, k as isize, c, accumulate);
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    c: &mut [f32],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserted lengths cover every index reachable through the
    // given strides for an m×k, k×n and m×n operand.
    unsafe {
        matrixmultiply::sgemm(
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
