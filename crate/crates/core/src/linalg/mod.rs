//! Dense and sparse linear-algebra kernels used by the operator and basis stages.

mod lanczos;
mod qr;
mod sparse;

pub use lanczos::{largest_eigenpairs, EigenPairs, LanczosOptions, SymmetricOperator};
pub use qr::HouseholderQr;
pub use sparse::CsrMatrix;

use nalgebra::{DMatrix, Dyn, Matrix, RawStorage, RawStorageMut};

/// Eigenvalues (descending) and orthonormal eigenvectors of a dense
/// symmetric matrix; only the lower triangle is read.
pub fn symmetric_eigen(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "symmetric_eigen needs a square matrix");
    let m = faer::Mat::<f64>::from_fn(n, n, |i, j| a[(i, j)]);
    let evd = m.selfadjoint_eigendecomposition(faer::Side::Lower);
    let s = evd.s().column_vector();
    let u = evd.u();
    // faer returns ascending order.
    let values = (0..n).rev().map(|k| s.read(k)).collect();
    let vectors = DMatrix::from_fn(n, n, |i, c| u.read(i, n - 1 - c));
    (values, vectors)
}

/// `c = alpha * op(a) * op(b) + beta * c` for strided column-major storage.
///
/// `op(x)` is `x` or `x^T` depending on the corresponding flag. When `beta`
/// is zero the prior contents of `c` are ignored.
pub fn gemm<SA, SB, SC>(
    alpha: f64,
    a: &Matrix<f64, Dyn, Dyn, SA>,
    trans_a: bool,
    b: &Matrix<f64, Dyn, Dyn, SB>,
    trans_b: bool,
    beta: f64,
    c: &mut Matrix<f64, Dyn, Dyn, SC>,
) where
    SA: RawStorage<f64, Dyn, Dyn>,
    SB: RawStorage<f64, Dyn, Dyn>,
    SC: RawStorageMut<f64, Dyn, Dyn>,
{
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
    assert_eq!(k, kb, "gemm: inner dimensions differ");
    assert_eq!(c.shape(), (m, n), "gemm: output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        let scale = beta;
        c.apply(|x| *x = if scale == 0.0 { 0.0 } else { *x * scale });
        return;
    }
    let (ars, acs) = a.strides();
    let (brs, bcs) = b.strides();
    let (crs, ccs) = c.strides();
    let (rsa, csa) = if trans_a { (acs, ars) } else { (ars, acs) };
    let (rsb, csb) = if trans_b { (bcs, brs) } else { (brs, bcs) };
    // SAFETY: shapes were checked above, the strides come from the views
    // themselves, and `c` is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            crs as isize,
            ccs as isize,
        );
    }
}

/// `a^T * b` through the blocked kernel.
pub fn mul_tn<SA, SB>(
    a: &Matrix<f64, Dyn, Dyn, SA>,
    b: &Matrix<f64, Dyn, Dyn, SB>,
) -> nalgebra::DMatrix<f64>
where
    SA: RawStorage<f64, Dyn, Dyn>,
    SB: RawStorage<f64, Dyn, Dyn>,
{
    let mut c = nalgebra::DMatrix::zeros(a.ncols(), b.ncols());
    gemm(1.0, a, true, b, false, 0.0, &mut c);
    c
}

/// `a * b` through the blocked kernel.
pub fn mul_nn<SA, SB>(
    a: &Matrix<f64, Dyn, Dyn, SA>,
    b: &Matrix<f64, Dyn, Dyn, SB>,
) -> nalgebra::DMatrix<f64>
where
    SA: RawStorage<f64, Dyn, Dyn>,
    SB: RawStorage<f64, Dyn, Dyn>,
{
    let mut c = nalgebra::DMatrix::zeros(a.nrows(), b.ncols());
    gemm(1.0, a, false, b, false, 0.0, &mut c);
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_eigen_reconstructs_clustered_matrices() {
        // Nearly degenerate spectrum just below 1, rotated by a fixed orthogonal matrix.
        let n = 40;
        let values: Vec<f64> = (0..n)
            .map(|k| 1.0 - 1e-9 * (k * k) as f64 - 1e-3 * (k / 10) as f64)
            .collect();
        let g = DMatrix::from_fn(n, n, |i, j| ((i * 31 + j * 17) % 23) as f64 - 11.0);
        let q = HouseholderQr::new(g).thin_q();
        let a = &q
            * DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&values))
            * q.transpose();
        let (s, u) = symmetric_eigen(&a);
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
        let recon =
            &u * DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&s)) * u.transpose();
        assert!((recon - &a).amax() < 1e-13);
        assert!((u.transpose() * &u - DMatrix::identity(n, n)).amax() < 1e-13);
    }
    use nalgebra::DMatrix;

    #[test]
    fn gemm_matches_naive_products_for_all_transpositions() {
        let a = DMatrix::from_fn(7, 5, |i, j| (i as f64 + 1.0) * 0.3 - j as f64 * 0.7);
        let b = DMatrix::from_fn(7, 4, |i, j| ((i * 3 + j) % 5) as f64 - 2.0);
        let c = mul_tn(&a, &b);
        assert!((c - a.transpose() * &b).amax() < 1e-12);

        let at = a.transpose();
        let c = mul_nn(&at, &b);
        assert!((c - &at * &b).amax() < 1e-12);

        let mut c2 = DMatrix::from_element(4, 5, 1.0);
        gemm(2.0, &b, true, &a, false, 0.5, &mut c2);
        let want = b.transpose() * &a * 2.0 + DMatrix::from_element(4, 5, 0.5);
        assert!((c2 - want).amax() < 1e-12);
    }

    #[test]
    fn gemm_on_subviews_respects_strides() {
        let a = DMatrix::from_fn(10, 10, |i, j| (i * 10 + j) as f64 * 0.01);
        let sub = a.view((2, 3), (5, 4));
        let b = DMatrix::from_fn(4, 3, |i, j| (i + 2 * j) as f64);
        let c = mul_nn(&sub, &b);
        assert!((c - sub.clone_owned() * &b).amax() < 1e-12);
    }
}
