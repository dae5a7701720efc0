//! Truncated, unpivoted Householder QR for tall matrices.
//!
//! The factorization is blocked: each panel of `BLOCK` columns is reduced
//! with rank-1 reflector updates, the panel's reflectors are aggregated into
//! the compact-WY form `I - V T V^T`, and the trailing columns are updated
//! with two matrix-matrix products. The thin `Q` factor is accumulated the
//! same way, panel by panel from the right.

use nalgebra::DMatrix;

use super::gemm;

const BLOCK: usize = 32;

/// Householder QR factorization `A = Q R` of an `n x m` matrix with `n >= m`.
#[derive(Debug, Clone)]
pub struct HouseholderQr {
    /// `R` in the upper triangle, reflector tails below the diagonal.
    packed: DMatrix<f64>,
    tau: Vec<f64>,
    /// Upper-triangular `T` factor of each panel.
    panels: Vec<(usize, DMatrix<f64>)>,
}

impl HouseholderQr {
    pub fn new(mut a: DMatrix<f64>) -> Self {
        let (n, m) = a.shape();
        assert!(n >= m, "HouseholderQr needs a tall matrix, got {n}x{m}");
        let mut tau = vec![0.0; m];
        let mut panels = Vec::with_capacity(m.div_ceil(BLOCK));

        let mut p = 0;
        while p < m {
            let pb = BLOCK.min(m - p);
            for j in p..p + pb {
                tau[j] = make_reflector(&mut a, j);
                apply_reflector(&mut a, j, tau[j], j + 1, p + pb);
            }
            let v = panel_reflectors(&a, p, pb);
            let t = triangular_factor(&v, &tau[p..p + pb]);
            if p + pb < m {
                // C <- (I - V T^T V^T) C on the trailing columns.
                let nc = m - p - pb;
                let mut w = DMatrix::zeros(pb, nc);
                {
                    let c = a.view((p, p + pb), (n - p, nc));
                    gemm(1.0, &v, true, &c, false, 0.0, &mut w);
                }
                let w = t.transpose() * w;
                let mut c = a.view_mut((p, p + pb), (n - p, nc));
                gemm(-1.0, &v, false, &w, false, 1.0, &mut c);
            }
            panels.push((p, t));
            p += pb;
        }
        HouseholderQr {
            packed: a,
            tau,
            panels,
        }
    }

    pub fn nrows(&self) -> usize {
        self.packed.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.packed.ncols()
    }

    /// Diagonal of `R`; `|R_kk|` is the norm of column `k` orthogonal to the
    /// span of the columns before it.
    pub fn r_diagonal(&self) -> Vec<f64> {
        (0..self.ncols()).map(|k| self.packed[(k, k)]).collect()
    }

    pub fn r(&self) -> DMatrix<f64> {
        let m = self.ncols();
        DMatrix::from_fn(m, m, |i, j| if i <= j { self.packed[(i, j)] } else { 0.0 })
    }

    /// The `n x m` factor with orthonormal columns.
    pub fn thin_q(&self) -> DMatrix<f64> {
        let (n, m) = self.packed.shape();
        let mut q = DMatrix::zeros(n, m);
        for k in 0..m {
            q[(k, k)] = 1.0;
        }
        for (p, t) in self.panels.iter().rev() {
            let p = *p;
            let pb = t.nrows();
            let v = panel_reflectors(&self.packed, p, pb);
            let mut w = DMatrix::zeros(pb, m - p);
            {
                let c = q.view((p, p), (n - p, m - p));
                gemm(1.0, &v, true, &c, false, 0.0, &mut w);
            }
            let w = t * w;
            let mut c = q.view_mut((p, p), (n - p, m - p));
            gemm(-1.0, &v, false, &w, false, 1.0, &mut c);
        }
        q
    }

    pub fn tau(&self) -> &[f64] {
        &self.tau
    }
}

/// Overwrites column `j` (rows `j..`) with the reflector tail and `R_jj`,
/// returning the reflector coefficient.
fn make_reflector(a: &mut DMatrix<f64>, j: usize) -> f64 {
    let n = a.nrows();
    let col = &mut a.as_mut_slice()[j * n + j..(j + 1) * n];
    let alpha = col[0];
    let tail_sq: f64 = col[1..].iter().map(|x| x * x).sum();
    if tail_sq == 0.0 {
        return 0.0;
    }
    let beta = -alpha.signum() * (alpha * alpha + tail_sq).sqrt();
    let tau = (beta - alpha) / beta;
    let scale = 1.0 / (alpha - beta);
    for x in &mut col[1..] {
        *x *= scale;
    }
    col[0] = beta;
    tau
}

/// Applies `I - tau v v^T` (reflector stored in column `j`) to columns `c0..c1`.
fn apply_reflector(a: &mut DMatrix<f64>, j: usize, tau: f64, c0: usize, c1: usize) {
    if tau == 0.0 || c0 >= c1 {
        return;
    }
    let n = a.nrows();
    let data = a.as_mut_slice();
    let (left, right) = data.split_at_mut(c0 * n);
    let v = &left[j * n + j + 1..(j + 1) * n];
    for c in 0..c1 - c0 {
        let col = &mut right[c * n + j..(c + 1) * n];
        let (head, tail) = col.split_first_mut().expect("non-empty column");
        let w = *head + v.iter().zip(tail.iter()).map(|(a, b)| a * b).sum::<f64>();
        let s = tau * w;
        *head -= s;
        for (x, vi) in tail.iter_mut().zip(v) {
            *x -= s * vi;
        }
    }
}

/// Explicit unit-lower-trapezoidal `V` for the panel starting at column `p`.
fn panel_reflectors(a: &DMatrix<f64>, p: usize, pb: usize) -> DMatrix<f64> {
    let n = a.nrows();
    DMatrix::from_fn(n - p, pb, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Less => 0.0,
        std::cmp::Ordering::Equal => 1.0,
        std::cmp::Ordering::Greater => a[(p + i, p + j)],
    })
}

/// Forward column-wise `T` such that `H_0 H_1 ... H_{k-1} = I - V T V^T`.
fn triangular_factor(v: &DMatrix<f64>, tau: &[f64]) -> DMatrix<f64> {
    let pb = tau.len();
    let mut t = DMatrix::zeros(pb, pb);
    for i in 0..pb {
        t[(i, i)] = tau[i];
        if i == 0 || tau[i] == 0.0 {
            continue;
        }
        let z = v.columns(0, i).tr_mul(&v.column(i));
        let col = t.view((0, 0), (i, i)) * z * (-tau[i]);
        t.view_mut((0, i), (i, 1)).copy_from(&col);
    }
    t
}
