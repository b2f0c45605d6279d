use super::Scalar;

/// Row-major GEMM on contiguous buffers: `C = alpha * op(A) * op(B) + beta * C`
/// where `op(A)` is `m x k` and `op(B)` is `k x n`. With `trans_a` the buffer
/// `a` holds `A^T` (`k x m`); likewise `trans_b` means `b` holds `n x k`.
///
/// Each output element is accumulated in the same order regardless of its
/// row, so results are independent of batch composition.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k, "gemm: A too small");
    assert!(b.len() >= k * n, "gemm: B too small");
    assert!(c.len() >= m * n, "gemm: C too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v = if beta == T::zero() { T::zero() } else { *v * beta };
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        T::gemm_raw(
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
        )
    }
}

/// GEMM where A is a column block of a wider row-major matrix with row stride `lda`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_lda<T: Scalar>(
    trans_a: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    lda: usize,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
    ldc: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // A view (m x k): plain -> a[i * lda + j]; transposed -> a[j * lda + i].
    let (rsa, csa) = if trans_a { (1, lda as isize) } else { (lda as isize, 1) };
    let a_extent = if trans_a { (k - 1) * lda + m } else { (m - 1) * lda + k };
    assert!(a.len() >= a_extent, "gemm_lda: A too small");
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    assert!(b.len() >= k * n, "gemm_lda: B too small");
    assert!(c.len() >= (m - 1) * ldc + n, "gemm_lda: C too small");
    // SAFETY: extents checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        )
    }
}
