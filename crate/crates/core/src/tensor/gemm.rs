//! Safe wrappers over `matrixmultiply`, with bounds validated up front.

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize, what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(rs >= 0 && cs >= 0, "{what}: negative strides unsupported");
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(last < len, "{what}: strided view exceeds buffer ({last} >= {len})");
}

macro_rules! wrap {
    ($name:ident, $t:ty, $inner:path) => {
        #[allow(clippy::too_many_arguments)]
        pub(super) fn $name(
            m: usize,
            k: usize,
            n: usize,
            alpha: $t,
            a: &[$t],
            rsa: isize,
            csa: isize,
            b: &[$t],
            rsb: isize,
            csb: isize,
            beta: $t,
            c: &mut [$t],
            rsc: isize,
            csc: isize,
        ) {
            check_extent(a.len(), m, k, rsa, csa, "lhs");
            check_extent(b.len(), k, n, rsb, csb, "rhs");
            check_extent(c.len(), m, n, rsc, csc, "out");
            if m == 0 || n == 0 {
                return;
            }
            // SAFETY: every strided view was checked against its buffer above,
            // and `c` is uniquely borrowed.
            unsafe {
                $inner(
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
                    rsc,
                    csc,
                )
            }
        }
    };
}

wrap!(sgemm, f32, matrixmultiply::sgemm);
wrap!(dgemm, f64, matrixmultiply::dgemm);
