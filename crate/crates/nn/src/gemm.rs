/// `c = alpha * a · b + beta * c` on strided row/column views.
///
/// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; strides are in elements.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    (a_rs, a_cs): (usize, usize),
    b: &[f32],
    (b_rs, b_cs): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (c_rs, c_cs): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| {
        (rows.max(1) - 1) * rs + (cols.max(1) - 1) * cs
    };
    assert!(k == 0 || last(m, k, a_rs, a_cs) < a.len(), "gemm: lhs out of bounds");
    assert!(k == 0 || last(k, n, b_rs, b_cs) < b.len(), "gemm: rhs out of bounds");
    assert!(last(m, n, c_rs, c_cs) < c.len(), "gemm: output out of bounds");
    // SAFETY: the asserts above bound every element the kernel may touch.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_rs as isize,
            a_cs as isize,
            b.as_ptr(),
            b_rs as isize,
            b_cs as isize,
            beta,
            c.as_mut_ptr(),
            c_rs as isize,
            c_cs as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product_with_transposed_operand() {
        // a: 2x3, b^T stored as 2x3 (so b is 3x2)
        let a = [1., 2., 3., 4., 5., 6.];
        let bt = [1., 0., -1., 2., 1., 0.];
        let mut c = [0f32; 4];
        sgemm(2, 3, 2, 1.0, &a, (3, 1), &bt, (1, 3), 0.0, &mut c, (2, 1));
        assert_eq!(c, [-2., 4., -2., 13.]);
    }
}
