//! Orthonormal bases over the training samples.
//!
//! Every basis is stored as its values `Phi_ik = phi_k(x_i)` and satisfies
//! `(1/N) Phi^T Phi = I`, so inner products are Monte-Carlo averages over
//! the sampling measure.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::io::{self, Metadata};
use crate::kernel::{DiffusionOperator, SymmetricView};
use crate::linalg::{gemm, largest_eigenpairs, mul_tn, HouseholderQr, LanczosOptions};

/// `|R_kk| < RANK_TOL * |R_00|` marks a dependent column.
pub const RANK_TOL: f64 = 1e-12;

/// How the `M_Q` columns of `T` are chosen.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selection {
    /// A consecutive block centred in the time-ordered series.
    Middle,
    /// Distinct uniform indices drawn with the given seed.
    Random(u64),
    Explicit(Vec<usize>),
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selection::Middle => write!(f, "middle"),
            Selection::Random(seed) => write!(f, "random:{seed}"),
            Selection::Explicit(idx) => {
                let list: Vec<String> = idx.iter().map(usize::to_string).collect();
                write!(f, "explicit:{}", list.join(","))
            }
        }
    }
}

impl FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidSelection(format!("cannot parse `{s}`"));
        match s.split_once(':') {
            None if s == "middle" => Ok(Selection::Middle),
            Some(("random", seed)) => seed.parse().map(Selection::Random).map_err(|_| bad()),
            Some(("explicit", list)) if list.is_empty() => Ok(Selection::Explicit(Vec::new())),
            Some(("explicit", list)) => list
                .split(',')
                .map(|v| v.trim().parse().map_err(|_| bad()))
                .collect::<Result<_>>()
                .map(Selection::Explicit),
            _ => Err(bad()),
        }
    }
}

/// Column indices of `T` used by the mixed basis.
pub fn select_columns(n: usize, m_q: usize, strategy: &Selection) -> Result<Vec<usize>> {
    if m_q == 0 || m_q > n {
        return Err(Error::InvalidSelection(format!(
            "need 1 <= M_Q <= N, got M_Q={m_q}, N={n}"
        )));
    }
    match strategy {
        Selection::Middle => {
            if m_q == n {
                return Ok((0..n).collect());
            }
            let mut m = m_q;
            if m % 2 == 1 || n % 2 == 1 {
                m -= m % 2;
                log::warn!(
                    "middle selection expects even N and M_Q (N={n}, M_Q={m_q}); using M_Q={m}"
                );
            }
            if m == 0 {
                return Err(Error::InvalidSelection("M_Q rounds down to zero".into()));
            }
            let start = (n - m) / 2;
            Ok((start..start + m).collect())
        }
        Selection::Random(seed) => {
            let mut rng = ChaCha20Rng::seed_from_u64(*seed);
            let mut idx = rand::seq::index::sample(&mut rng, n, m_q).into_vec();
            idx.sort_unstable();
            Ok(idx)
        }
        Selection::Explicit(idx) => {
            if idx.len() != m_q {
                return Err(Error::InvalidSelection(format!(
                    "{} indices given for M_Q={m_q}",
                    idx.len()
                )));
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
                return Err(Error::InvalidSelection(format!(
                    "index {bad} out of range for N={n}"
                )));
            }
            let mut sorted = idx.clone();
            sorted.sort_unstable();
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::InvalidSelection("duplicate indices".into()));
            }
            Ok(idx.clone())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    values: DMatrix<f64>,
    m_eigen: usize,
    m_qr: usize,
    eigenvalues: Vec<f64>,
    residuals: Vec<f64>,
    selection: Option<Selection>,
    columns: Vec<usize>,
    deficiency: usize,
}

impl BasisSet {
    /// Wraps arbitrary values after checking the orthonormality convention.
    pub fn from_values(
        values: DMatrix<f64>,
        m_eigen: usize,
        eigenvalues: Vec<f64>,
    ) -> Result<Self> {
        let (n, m) = values.shape();
        if m_eigen > m || eigenvalues.len() != m_eigen {
            return Err(Error::param("eigen column count inconsistent with values"));
        }
        let basis = BasisSet {
            values,
            m_eigen,
            m_qr: m - m_eigen,
            eigenvalues,
            residuals: Vec::new(),
            selection: None,
            columns: Vec::new(),
            deficiency: 0,
        };
        let defect = basis.orthonormality_defect();
        if defect > 1e-8 {
            return Err(Error::param(format!(
                "columns are not orthonormal over {n} samples (defect {defect:e})"
            )));
        }
        Ok(basis)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn m(&self) -> usize {
        self.values.ncols()
    }

    pub fn m_eigen(&self) -> usize {
        self.m_eigen
    }

    pub fn m_qr(&self) -> usize {
        self.m_qr
    }

    /// Eigenvalues of `That` behind the eigen columns, descending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Explicit residuals `|That u_k - s_k u_k|` of the eigenpairs.
    pub fn residuals(&self) -> &[f64] {
        &self.residuals
    }

    pub fn selection(&self) -> Option<&Selection> {
        self.selection.as_ref()
    }

    /// The `T` columns that entered the QR block.
    pub fn selected_columns(&self) -> &[usize] {
        &self.columns
    }

    /// Columns dropped as numerically dependent.
    pub fn deficiency(&self) -> usize {
        self.deficiency
    }

    /// Whether column 0 is the constant function.
    pub fn has_constant_mode(&self) -> bool {
        self.m() > 0
            && self
                .values
                .column(0)
                .iter()
                .all(|&v| (v - 1.0).abs() <= 1e-6)
    }

    pub fn orthonormality_defect(&self) -> f64 {
        let g = mul_tn(&self.values, &self.values) / self.n() as f64;
        (g - DMatrix::identity(self.m(), self.m())).amax()
    }

    /// Basis coefficients `(1/N) Phi^T s` of each signal column.
    pub fn project(&self, signal: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if signal.nrows() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: signal.nrows(),
            });
        }
        Ok(mul_tn(&self.values, signal) / self.n() as f64)
    }

    /// Orthogonal projection of each signal column onto the basis span.
    pub fn reconstruct(&self, signal: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let coef = self.project(signal)?;
        let mut out = DMatrix::zeros(self.n(), signal.ncols());
        gemm(1.0, &self.values, false, &coef, false, 0.0, &mut out);
        Ok(out)
    }

    /// The first `k` columns of a pure eigenbasis. Ordered orthonormalization
    /// makes every prefix the eigenbasis of that size.
    pub fn leading(&self, k: usize) -> Result<BasisSet> {
        if self.m_qr != 0 || k == 0 || k > self.m_eigen {
            return Err(Error::param(format!(
                "cannot take {k} leading columns of a basis with {}",
                self.describe()
            )));
        }
        Ok(BasisSet {
            values: self.values.columns(0, k).into_owned(),
            m_eigen: k,
            m_qr: 0,
            eigenvalues: self.eigenvalues[..k].to_vec(),
            residuals: self
                .residuals
                .get(..k)
                .map(<[f64]>::to_vec)
                .unwrap_or_default(),
            selection: None,
            columns: Vec::new(),
            deficiency: 0,
        })
    }

    pub fn describe(&self) -> String {
        match &self.selection {
            Some(sel) => format!("me={} mq={} select={sel}", self.m_eigen, self.m_qr),
            None => format!("me={} mq={}", self.m_eigen, self.m_qr),
        }
    }

    /// Values to `path` (DFM1) and a `path.meta` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_matrix(path, &self.values)?;
        let mut meta = Metadata::new();
        meta.set("kind", "basis")
            .set("m_eigen", self.m_eigen)
            .set("m_qr", self.m_qr)
            .set("deficiency", self.deficiency)
            .set("eigenvalues", io::join_f64(&self.eigenvalues))
            .set("residuals", io::join_f64(&self.residuals))
            .set(
                "columns",
                self.columns
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
            );
        if let Some(sel) = &self.selection {
            meta.set("selection", sel);
        }
        meta.write(io::sidecar(path, "meta"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let values = io::read_matrix(path)?;
        let meta = Metadata::read(io::sidecar(path, "meta"))?;
        let m_eigen: usize = meta.parse("m_eigen")?;
        let m_qr: usize = meta.parse("m_qr")?;
        if m_eigen + m_qr != values.ncols() {
            return Err(Error::Format(
                "basis metadata does not match the stored column count".into(),
            ));
        }
        let columns = match meta.get("columns") {
            Some("") | None => Vec::new(),
            Some(list) => list
                .split(',')
                .map(|v| {
                    v.parse()
                        .map_err(|_| Error::Format(format!("bad column index `{v}`")))
                })
                .collect::<Result<_>>()?,
        };
        Ok(BasisSet {
            values,
            m_eigen,
            m_qr,
            eigenvalues: io::split_f64(meta.get("eigenvalues").unwrap_or(""))?,
            residuals: io::split_f64(meta.get("residuals").unwrap_or(""))?,
            selection: meta.get("selection").map(str::parse).transpose()?,
            columns,
            deficiency: meta.parse("deficiency").unwrap_or(0),
        })
    }
}

/// Flips `v` so that `sum v^3 >= 0`; near-ties go to a positive first
/// nonzero entry.
fn fix_sign(v: &mut [f64]) {
    let cube: f64 = v.iter().map(|x| x * x * x).sum();
    let scale: f64 = v.iter().map(|x| x.abs().powi(3)).sum();
    let flip = if cube.abs() > 1e-10 * scale {
        cube < 0.0
    } else {
        let peak = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        v.iter()
            .find(|x| x.abs() > 1e-12 * peak)
            .is_some_and(|&x| x < 0.0)
    };
    if flip {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Thin `Q` of `a`, scaled to `(1/N) Q^T Q = I`.
fn scaled_q(qr: &HouseholderQr) -> DMatrix<f64> {
    qr.thin_q() * (qr.nrows() as f64).sqrt()
}

/// The `M_E` leading eigenfunctions of the operator, evaluated at the
/// training points.
///
/// The leading eigenvectors `u_k` of `That` are mapped to `T`-eigenvectors
/// `D^{-1/2} u_k` and then orthonormalized in order over the samples, so
/// each prefix keeps the span of the leading eigenfunctions.
pub fn leading_eigenbasis(op: &DiffusionOperator, m_e: usize) -> Result<BasisSet> {
    leading_eigenbasis_with(op, m_e, &LanczosOptions::default())
}

pub fn leading_eigenbasis_with(
    op: &DiffusionOperator,
    m_e: usize,
    opts: &LanczosOptions,
) -> Result<BasisSet> {
    let n = op.n();
    if m_e == 0 || m_e > n {
        return Err(Error::param(format!(
            "need 1 <= M_E <= N, got M_E={m_e}, N={n}"
        )));
    }
    let pairs = largest_eigenpairs(&SymmetricView(op), m_e, opts)?;
    let converged = pairs.residuals.iter().filter(|&&r| r <= opts.tol).count();
    if converged < m_e {
        return Err(Error::EigensolverFailed {
            converged,
            requested: m_e,
        });
    }
    let mut phi = pairs.vectors;
    for (i, mut row) in phi.row_iter_mut().enumerate() {
        row /= op.d_values()[i].sqrt();
    }
    // The top eigenvector of a row-stochastic T is exactly constant.
    let mean = phi.column(0).mean();
    if mean != 0.0
        && phi
            .column(0)
            .iter()
            .all(|&v| (v / mean - 1.0).abs() <= 1e-6)
    {
        phi.column_mut(0).fill(1.0);
    }
    let mut values = scaled_q(&HouseholderQr::new(phi));
    for mut col in values.column_iter_mut() {
        fix_sign(col.as_mut_slice());
    }
    Ok(BasisSet {
        values,
        m_eigen: m_e,
        m_qr: 0,
        eigenvalues: pairs.values,
        residuals: pairs.residuals,
        selection: None,
        columns: Vec::new(),
        deficiency: 0,
    })
}

/// Mixed basis: QR of `[T(:, selected), Phi_E]`, QR columns first.
///
/// Numerically dependent columns (`|R_kk| < RANK_TOL |R_00|`) are removed
/// and the factorization repeated; the count is reported by
/// [`BasisSet::deficiency`].
pub fn qr_mixed_basis(
    op: &DiffusionOperator,
    eigen: Option<&BasisSet>,
    m_q: usize,
    selection: &Selection,
) -> Result<BasisSet> {
    let n = op.n();
    let m_e = eigen.map_or(0, BasisSet::m);
    if let Some(e) = eigen {
        if e.n() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: e.n(),
            });
        }
    }
    if m_e + m_q > n {
        return Err(Error::param(format!(
            "M_E + M_Q = {} exceeds N = {n}",
            m_e + m_q
        )));
    }
    if m_e + m_q == 0 {
        return Err(Error::param("empty basis requested"));
    }
    let columns = if m_q > 0 {
        select_columns(n, m_q, selection)?
    } else {
        Vec::new()
    };
    let m_q = columns.len();

    let mut b = DMatrix::zeros(n, m_q + m_e);
    b.columns_mut(0, m_q).copy_from(&op.t_columns(&columns));
    if let Some(e) = eigen {
        b.columns_mut(m_q, m_e).copy_from(e.values());
    }

    let mut keep: Vec<usize> = (0..m_q + m_e).collect();
    let qr = loop {
        let qr = HouseholderQr::new(b.select_columns(&keep));
        let r = qr.r_diagonal();
        let floor = RANK_TOL * r[0].abs();
        let dependent: Vec<usize> = (0..keep.len())
            .filter(|&k| !(r[k].abs() >= floor) || r[k] == 0.0)
            .collect();
        if dependent.is_empty() {
            break qr;
        }
        let mut it = dependent.iter().peekable();
        keep = keep
            .into_iter()
            .enumerate()
            .filter(|(k, _)| {
                if it.peek() == Some(&k) {
                    it.next();
                    false
                } else {
                    true
                }
            })
            .map(|(_, c)| c)
            .collect();
        if keep.is_empty() {
            return Err(Error::param("every basis column is numerically zero"));
        }
    };
    let kept_qr = keep.iter().filter(|&&c| c < m_q).count();
    let kept_eigen = keep.len() - kept_qr;
    let deficiency = m_q + m_e - keep.len();
    if deficiency > 0 {
        log::warn!("dropped {deficiency} numerically dependent basis columns");
    }
    let eigenvalues = match eigen {
        Some(e) => keep
            .iter()
            .filter(|&&c| c >= m_q)
            .map(|&c| e.eigenvalues()[c - m_q])
            .collect(),
        None => Vec::new(),
    };
    let residuals = match eigen {
        Some(e) if e.residuals().len() == m_e => keep
            .iter()
            .filter(|&&c| c >= m_q)
            .map(|&c| e.residuals()[c - m_q])
            .collect(),
        _ => Vec::new(),
    };
    Ok(BasisSet {
        values: scaled_q(&qr),
        m_eigen: kept_eigen,
        m_qr: kept_qr,
        eigenvalues,
        residuals,
        selection: (m_q > 0).then(|| selection.clone()),
        columns: keep
            .iter()
            .filter(|&&c| c < m_q)
            .map(|&c| columns[c])
            .collect(),
        deficiency,
    })
}

/// Orthogonal projection onto the span of `basis`.
pub fn reconstruct(basis: &BasisSet, signal: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    basis.reconstruct(signal)
}
