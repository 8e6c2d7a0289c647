use super::Real;

/// A matrix operand: row-major storage with leading dimension `ld`,
/// optionally used transposed.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub ld: usize,
    pub trans: bool,
}

impl<'a, T> Mat<'a, T> {
    pub fn new(data: &'a [T], ld: usize) -> Self {
        Self { data, ld, trans: false }
    }

    pub fn t(data: &'a [T], ld: usize) -> Self {
        Self { data, ld, trans: true }
    }

    /// `(row stride, column stride)` of the logical matrix.
    fn strides(&self) -> (usize, usize) {
        if self.trans {
            (1, self.ld)
        } else {
            (self.ld, 1)
        }
    }

    fn fits(&self, rows: usize, cols: usize) -> bool {
        let (rs, cs) = self.strides();
        self.data.len() > (rows - 1) * rs + (cols - 1) * cs
    }
}

/// `c[m×n] = a[m×k]·b[k×n] + beta·c`, with `c` row-major of leading dimension `ldc`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(m: usize, k: usize, n: usize, a: Mat<'_, T>, b: Mat<'_, T>, beta: T, c: &mut [T], ldc: usize) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() > (m - 1) * ldc + (n - 1), "gemm: output buffer too small");
    if k == 0 {
        for i in 0..m {
            c[i * ldc..i * ldc + n].iter_mut().for_each(|v| *v = beta * *v);
        }
        return;
    }
    assert!(a.fits(m, k), "gemm: lhs buffer too small");
    assert!(b.fits(k, n), "gemm: rhs buffer too small");
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the largest index touched in each buffer is checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa as isize,
            csa as isize,
            b.data.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            lanes[l] = lanes[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ar.iter().zip(br) {
        tail = tail + x * y;
    }
    lanes.iter().fold(T::zero(), |s, &v| s + v) + tail
}

/// `c[i, j] += Σ_v a[i, v]·b[j, v]` for `v < len`, rows of `a` and `b` at
/// strides `lda` / `ldb`; `c` is row-major `m×n`.
///
/// Used for weight gradients, where both operands are long rows and a
/// GEMM would have to pack a transposed operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn row_dots_acc<T: Real>(m: usize, n: usize, len: usize, a: &[T], lda: usize, b: &[T], ldb: usize, c: &mut [T]) {
    const BLOCK: usize = 4096;
    for v0 in (0..len).step_by(BLOCK) {
        let v1 = (v0 + BLOCK).min(len);
        for j in 0..n {
            let bj = &b[j * ldb + v0..j * ldb + v1];
            for i in 0..m {
                let ai = &a[i * lda + v0..i * lda + v1];
                c[i * n + j] = c[i * n + j] + dot(ai, bj);
            }
        }
    }
}
