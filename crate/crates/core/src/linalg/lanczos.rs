//! Thick-restart block Lanczos for the largest eigenpairs of a symmetric operator.
//!
//! Every new block is orthogonalized against the whole Krylov basis twice
//! (classical Gram-Schmidt with one reorthogonalization pass), so the
//! projected matrix is assembled directly from the orthogonalization
//! coefficients. On restart the wanted Ritz vectors plus the residual block
//! are kept; a block size above one lets exactly degenerate eigenvalues
//! (e.g. sine/cosine pairs on a uniformly sampled circle) be resolved.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{gemm, mul_nn, mul_tn, symmetric_eigen};
use crate::error::{Error, Result};

/// Action of a real symmetric `dim x dim` matrix on a block of vectors.
pub trait SymmetricOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
}

impl SymmetricOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        mul_nn(self, x)
    }
}

#[derive(Debug, Clone)]
pub struct LanczosOptions {
    pub block_size: usize,
    /// Absolute residual tolerance `||A u - s u||` for unit `u`.
    pub tol: f64,
    pub max_restarts: usize,
    pub seed: u64,
}

impl Default for LanczosOptions {
    fn default() -> Self {
        LanczosOptions {
            block_size: 4,
            tol: 1e-8,
            max_restarts: 300,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EigenPairs {
    /// Descending.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors, one per column.
    pub vectors: DMatrix<f64>,
    /// Explicit residual norms `||A u - s u||`.
    pub residuals: Vec<f64>,
}

/// Computes the `nev` algebraically largest eigenpairs of `op`.
pub fn largest_eigenpairs<A: SymmetricOperator + ?Sized>(
    op: &A,
    nev: usize,
    opts: &LanczosOptions,
) -> Result<EigenPairs> {
    let n = op.dim();
    if nev == 0 || nev > n {
        return Err(Error::param(format!(
            "requested {nev} eigenpairs of a {n}-dimensional operator"
        )));
    }
    let b = opts.block_size.max(1);
    let extra = nev.max(10 * b).max(40);
    let m = (nev + extra).div_ceil(b) * b;
    if m + b > n {
        return dense_eigenpairs(op, nev);
    }
    let kept_target = ((nev + extra / 2).div_ceil(b) * b).min(m - b);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut basis = DMatrix::<f64>::zeros(n, m + b);
    let start = DMatrix::from_fn(n, b, |_, _| StandardNormal.sample(&mut rng));
    let (q0, _) = orthonormalize_block(start, &basis.columns(0, 0).clone_owned(), 1.0, &mut rng);
    basis.columns_mut(0, b).copy_from(&q0);

    let mut h = DMatrix::<f64>::zeros(m, m);
    let mut kept = 0;
    let mut last_converged = 0;

    for _restart in 0..opts.max_restarts {
        let mut r_last = DMatrix::<f64>::zeros(b, b);
        let mut j = kept;
        while j < m {
            let x = basis.columns(j, b).clone_owned();
            let mut w = op.apply(&x);
            let scale = w.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
            let prev = basis.columns(0, j + b);
            let mut coef = mul_tn(&prev, &w);
            gemm(-1.0, &prev, false, &coef, false, 1.0, &mut w);
            // Repeat while a pass still removes a sizeable fraction of some
            // column: tiny remainders of near-invariant blocks need it.
            for _pass in 0..4 {
                let before: Vec<f64> = w.column_iter().map(|c| c.norm()).collect();
                let again = mul_tn(&prev, &w);
                gemm(-1.0, &prev, false, &again, false, 1.0, &mut w);
                coef += again;
                let settled = w
                    .column_iter()
                    .zip(&before)
                    .all(|(c, &nb)| c.norm() > 0.7 * nb);
                if settled {
                    break;
                }
            }

            // Off-diagonal coefficients fill both triangles; the diagonal
            // block is symmetrized to remove rounding asymmetry.
            for c in 0..b {
                for r in 0..j {
                    h[(r, j + c)] = coef[(r, c)];
                    h[(j + c, r)] = coef[(r, c)];
                }
            }
            for c in 0..b {
                for r in 0..b {
                    h[(j + r, j + c)] = 0.5 * (coef[(j + r, c)] + coef[(j + c, r)]);
                }
            }

            let prev_owned = basis.columns(0, j + b).clone_owned();
            let (next, r) = orthonormalize_block(w, &prev_owned, scale, &mut rng);
            basis.columns_mut(j + b, b).copy_from(&next);
            if j + b < m {
                for c in 0..b {
                    for rr in 0..b {
                        h[(j + b + rr, j + c)] = r[(rr, c)];
                        h[(j + c, j + b + rr)] = r[(rr, c)];
                    }
                }
            } else {
                r_last = r;
            }
            j += b;
        }

        let (theta, y) = symmetric_eigen(&h);

        let tail = y.rows(m - b, b);
        let estimates: Vec<f64> = (0..m).map(|c| (&r_last * tail.column(c)).norm()).collect();
        let converged = estimates[..nev].iter().filter(|&&e| e <= opts.tol).count();
        last_converged = converged;

        if converged == nev {
            let vectors = mul_nn(&basis.columns(0, m), &y.columns(0, nev));
            let av = op.apply(&vectors);
            let values = theta[..nev].to_vec();
            let residuals = (0..nev)
                .map(|c| (av.column(c) - vectors.column(c) * values[c]).norm())
                .collect();
            return Ok(EigenPairs {
                values,
                vectors,
                residuals,
            });
        }

        kept = kept_target;
        let ritz = mul_nn(&basis.columns(0, m), &y.columns(0, kept));
        let residual_block = basis.columns(m, b).clone_owned();
        basis.columns_mut(0, kept).copy_from(&ritz);
        basis.columns_mut(kept, b).copy_from(&residual_block);
        h.fill(0.0);
        for (i, t) in theta.iter().take(kept).enumerate() {
            h[(i, i)] = *t;
        }
    }

    Err(Error::EigensolverFailed {
        converged: last_converged,
        requested: nev,
    })
}

/// Orthonormalizes the block `w` (already orthogonal to `prev`) within
/// itself by modified Gram-Schmidt with reorthogonalization. Returns the block and the `b x b` upper
/// triangular coupling `R` with `w = Q R` on the part orthogonal to `prev`.
/// Columns that vanish numerically (relative to their own size or to
/// `scale`) are replaced by fresh random directions with zero coupling.
fn orthonormalize_block(
    mut w: DMatrix<f64>,
    prev: &DMatrix<f64>,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, b) = w.shape();
    let mut r = DMatrix::zeros(b, b);
    for c in 0..b {
        let before = w.column(c).norm();
        for _pass in 0..4 {
            let start = w.column(c).norm();
            for k in 0..c {
                let proj = w.column(k).dot(&w.column(c));
                r[(k, c)] += proj;
                let qk = w.column(k).clone_owned();
                w.column_mut(c).axpy(-proj, &qk, 1.0);
            }
            if w.column(c).norm() > 0.7 * start {
                break;
            }
        }
        let norm = w.column(c).norm();
        if norm > 1e-10 * before && norm > 1e-14 * scale && norm > 1e-300 {
            r[(c, c)] = norm;
            w.column_mut(c).scale_mut(1.0 / norm);
        } else {
            let fresh = random_orthogonal(n, prev, &w.columns(0, c).clone_owned(), rng);
            w.set_column(c, &fresh);
        }
    }
    (w, r)
}

fn random_orthogonal(
    n: usize,
    prev: &DMatrix<f64>,
    current: &DMatrix<f64>,
    rng: &mut ChaCha8Rng,
) -> DVector<f64> {
    loop {
        let mut v = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut *rng));
        for _pass in 0..2 {
            for basis in [prev, current] {
                if basis.ncols() == 0 {
                    continue;
                }
                let coef = basis.tr_mul(&v);
                v -= basis * coef;
            }
        }
        let norm = v.norm();
        if norm > 1e-8 {
            return v / norm;
        }
    }
}

fn dense_eigenpairs<A: SymmetricOperator + ?Sized>(op: &A, nev: usize) -> Result<EigenPairs> {
    let n = op.dim();
    let full = op.apply(&DMatrix::identity(n, n));
    let sym = (&full + full.transpose()) * 0.5;
    let (mut values, all) = symmetric_eigen(&sym);
    values.truncate(nev);
    let vectors = all.columns(0, nev).clone_owned();
    let av = op.apply(&vectors);
    let residuals = (0..nev)
        .map(|c| (av.column(c) - vectors.column(c) * values[c]).norm())
        .collect();
    Ok(EigenPairs {
        values,
        vectors,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag_with_rotation(values: &[f64], seed: u64) -> DMatrix<f64> {
        let n = values.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
        let q = super::super::HouseholderQr::new(g).thin_q();
        &q * DMatrix::from_diagonal(&DVector::from_column_slice(values)) * q.transpose()
    }

    #[test]
    fn finds_leading_spectrum_of_known_matrix() {
        let n = 400;
        let values: Vec<f64> = (0..n).map(|k| (-(k as f64) * 0.02).exp()).collect();
        let a = diag_with_rotation(&values, 11);
        let pairs = largest_eigenpairs(&a, 12, &LanczosOptions::default()).unwrap();
        for (k, v) in pairs.values.iter().enumerate() {
            assert!(
                (v - values[k]).abs() < 1e-9,
                "eigenvalue {k}: {v} vs {}",
                values[k]
            );
        }
        assert!(pairs.residuals.iter().all(|&r| r < 1e-8));
        let gram = pairs.vectors.transpose() * &pairs.vectors;
        assert!((gram - DMatrix::identity(12, 12)).amax() < 1e-10);
    }

    #[test]
    fn resolves_exactly_degenerate_pairs() {
        let n = 300;
        let mut values = vec![1.0];
        let mut k = 1;
        while values.len() < n {
            let v = (-(k as f64) * 0.05).exp();
            values.push(v);
            values.push(v);
            k += 1;
        }
        values.truncate(n);
        let a = diag_with_rotation(&values, 5);
        let pairs = largest_eigenpairs(&a, 9, &LanczosOptions::default()).unwrap();
        for (k, v) in pairs.values.iter().enumerate() {
            assert!(
                (v - values[k]).abs() < 1e-9,
                "eigenvalue {k}: {v} vs {}",
                values[k]
            );
        }
    }

    #[test]
    fn small_problem_falls_back_to_dense() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0]);
        let pairs = largest_eigenpairs(&a, 3, &LanczosOptions::default()).unwrap();
        assert!((pairs.values[0] - (2.0 + 2f64.sqrt())).abs() < 1e-12);
        assert!((pairs.values[2] - (2.0 - 2f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn rejects_impossible_requests() {
        let a = DMatrix::<f64>::identity(4, 4);
        assert!(largest_eigenpairs(&a, 0, &LanczosOptions::default()).is_err());
        assert!(largest_eigenpairs(&a, 5, &LanczosOptions::default()).is_err());
    }
}
