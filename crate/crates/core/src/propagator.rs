//! Galerkin shift-operator estimation and density-coefficient propagation.
//!
//! A density is carried as `p = sum_k c_k phi_k p_eq`, so all functionals
//! are Monte-Carlo averages over the training samples.

use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::basis::BasisSet;
use crate::datasets::TimeSeries;
use crate::error::{Error, Result};
use crate::io::{self, Metadata};
use crate::linalg::gemm;

/// Estimated one-lag propagator `Ahat`.
#[derive(Debug, Clone, PartialEq)]
pub struct Propagator {
    a_hat: DMatrix<f64>,
    tau: f64,
    pair_count: usize,
    /// `g_k = (1/N) sum_i phi_k(x_i)`, so total probability is `g . c`.
    mass: DVector<f64>,
}

/// Coefficients of a density at `time_index` lags after initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityState {
    pub coeffs: DVector<f64>,
    pub time_index: usize,
}

impl DensityState {
    pub fn new(coeffs: DVector<f64>) -> Self {
        DensityState {
            coeffs,
            time_index: 0,
        }
    }

    /// The equilibrium density `e_0`.
    pub fn equilibrium(m: usize) -> Self {
        let mut c = DVector::zeros(m);
        if m > 0 {
            c[0] = 1.0;
        }
        DensityState::new(c)
    }

    pub fn m(&self) -> usize {
        self.coeffs.len()
    }
}

/// `g = (1/N) Phi^T 1`.
pub fn mass_vector(basis: &BasisSet) -> DVector<f64> {
    let phi = basis.values();
    let n = phi.nrows() as f64;
    DVector::from_iterator(phi.ncols(), phi.column_iter().map(|c| c.sum() / n))
}

/// `Ahat_kj = (1/(N-1)) sum_i phi_j(x_i) phi_k(x_{i+1})` over consecutive
/// training pairs.
pub fn build_propagator(basis: &BasisSet, train: &TimeSeries) -> Result<Propagator> {
    build_propagator_with_lag(basis, train, 1)
}

/// Pairs `(x_i, x_{i+lag})`. `lag = 0` gives the self-pair Gram matrix.
pub fn build_propagator_with_lag(
    basis: &BasisSet,
    train: &TimeSeries,
    lag: usize,
) -> Result<Propagator> {
    if basis.n() != train.len() {
        return Err(Error::DimensionMismatch {
            expected: train.len(),
            got: basis.n(),
        });
    }
    build_from_segments(
        basis,
        train.tau() * lag.max(1) as f64,
        &[0..train.len()],
        lag,
    )
}

/// Like [`build_propagator`], for a training set made of separate runs.
/// Pairs never straddle a segment boundary.
pub fn build_propagator_from_segments(
    basis: &BasisSet,
    tau: f64,
    segments: &[Range<usize>],
) -> Result<Propagator> {
    build_from_segments(basis, tau, segments, 1)
}

fn build_from_segments(
    basis: &BasisSet,
    tau: f64,
    segments: &[Range<usize>],
    lag: usize,
) -> Result<Propagator> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::param(format!("lag must be positive, got {tau}")));
    }
    let n = basis.n();
    if let Some(bad) = segments.iter().find(|s| s.start > s.end || s.end > n) {
        return Err(Error::param(format!("segment {bad:?} outside 0..{n}")));
    }
    let phi = basis.values();
    let m = basis.m();
    let mut a_hat = DMatrix::zeros(m, m);
    let mut pair_count = 0;
    for seg in segments {
        if seg.len() <= lag {
            continue;
        }
        let pairs = seg.len() - lag;
        let prev = phi.rows(seg.start, pairs);
        let next = phi.rows(seg.start + lag, pairs);
        gemm(1.0, &next, true, &prev, false, 1.0, &mut a_hat);
        pair_count += pairs;
    }
    if pair_count == 0 {
        return Err(Error::InsufficientLength {
            required: lag + 1,
            available: segments.iter().map(|s| s.len()).max().unwrap_or(0),
        });
    }
    a_hat /= pair_count as f64;
    Ok(Propagator {
        a_hat,
        tau,
        pair_count,
        mass: mass_vector(basis),
    })
}

impl Propagator {
    pub fn a_hat(&self) -> &DMatrix<f64> {
        &self.a_hat
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn pair_count(&self) -> usize {
        self.pair_count
    }

    pub fn m(&self) -> usize {
        self.a_hat.nrows()
    }

    pub fn mass(&self) -> &DVector<f64> {
        &self.mass
    }

    /// `|Ahat_00 - 1|` and `|Ahat e_0 - e_0|_2`.
    pub fn constant_mode_defect(&self) -> (f64, f64) {
        let mut col = self.a_hat.column(0).clone_owned();
        let diag = (col[0] - 1.0).abs();
        col[0] -= 1.0;
        (diag, col.norm())
    }

    /// Total probability `g . c` of a coefficient vector.
    pub fn total_mass(&self, coeffs: &DVector<f64>) -> f64 {
        self.mass.dot(coeffs)
    }

    /// `n` successive products `c <- Ahat c`, each followed by a rescale to
    /// unit mass. A step whose mass is not positive is left unscaled.
    pub fn step(&self, state: &DensityState, n: usize) -> DensityState {
        let mut c = state.coeffs.clone();
        for k in 0..n {
            c = &self.a_hat * c;
            let mass = self.total_mass(&c);
            if mass > 0.0 && mass.is_finite() {
                c /= mass;
            } else {
                log::warn!(
                    "forecast mass {mass:e} at step {}; left unnormalized",
                    state.time_index + k + 1
                );
            }
        }
        DensityState {
            coeffs: c,
            time_index: state.time_index + n,
        }
    }

    /// Applies [`Propagator::step`] to every column of `coeffs` at once.
    pub fn step_block(&self, coeffs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.m(), coeffs.ncols());
        gemm(1.0, &self.a_hat, false, coeffs, false, 0.0, &mut out);
        for mut col in out.column_iter_mut() {
            let mass = self.mass.dot(&col);
            if mass > 0.0 && mass.is_finite() {
                col /= mass;
            }
        }
        out
    }

    /// `Ahat` to `path` and `tau`, `pair_count`, the mass vector to `path.meta`.
    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_matrix(path, &self.a_hat)?;
        let mut meta = Metadata::new();
        meta.set("kind", "propagator")
            .set("tau", format!("{:e}", self.tau))
            .set("pair_count", self.pair_count)
            .set("renormalize", "rescale-mass-every-step")
            .set("clip", "init-and-correction-only")
            .set("mass", io::join_f64(self.mass.as_slice()));
        meta.write(io::sidecar(path, "meta"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a_hat = io::read_matrix(path)?;
        let meta = Metadata::read(io::sidecar(path, "meta"))?;
        let mass = io::split_f64(meta.require("mass")?)?;
        if a_hat.nrows() != a_hat.ncols() || mass.len() != a_hat.nrows() {
            return Err(Error::Format(
                "propagator matrix and mass vector disagree in size".into(),
            ));
        }
        Ok(Propagator {
            a_hat,
            tau: meta.parse("tau")?,
            pair_count: meta.parse("pair_count")?,
            mass: DVector::from_vec(mass),
        })
    }
}

/// `rho_i = sum_k c_k phi_k(x_i)`, the density relative to `p_eq`.
pub fn density_values(basis: &BasisSet, state: &DensityState) -> Result<DVector<f64>> {
    if state.m() != basis.m() {
        return Err(Error::DimensionMismatch {
            expected: basis.m(),
            got: state.m(),
        });
    }
    Ok(basis.values() * &state.coeffs)
}

/// `E[f] = (1/N) sum_i f(x_i) rho_i`.
pub fn expectation(basis: &BasisSet, state: &DensityState, f_values: &[f64]) -> Result<f64> {
    if f_values.len() != basis.n() {
        return Err(Error::DimensionMismatch {
            expected: basis.n(),
            got: f_values.len(),
        });
    }
    let rho = density_values(basis, state)?;
    Ok(rho.iter().zip(f_values).map(|(r, f)| r * f).sum::<f64>() / basis.n() as f64)
}

/// Rescales to unit mass. With `clip`, the density is first rebuilt on the
/// samples, negatives are zeroed, and it is projected back.
pub fn normalize(basis: &BasisSet, state: &DensityState, clip: bool) -> Result<DensityState> {
    let coeffs = if clip {
        let mut rho = density_values(basis, state)?;
        rho.apply(|v| *v = v.max(0.0));
        project_density(basis, &rho)
    } else {
        state.coeffs.clone()
    };
    let mass = mass_vector(basis).dot(&coeffs);
    if !(mass > 0.0 && mass.is_finite()) {
        return Err(Error::DegenerateDensity { step: None });
    }
    Ok(DensityState {
        coeffs: coeffs / mass,
        time_index: state.time_index,
    })
}

/// `c_k = (1/N) sum_i rho_i phi_k(x_i)`.
pub fn project_density(basis: &BasisSet, rho: &DVector<f64>) -> DVector<f64> {
    basis.values().tr_mul(rho) / basis.n() as f64
}

/// Precomputed coefficient functionals for the mean and the uncentered
/// second moment of each coordinate.
#[derive(Debug, Clone)]
pub struct MomentProjector {
    /// `M x n_dim`, `(1/N) Phi^T X`.
    first: DMatrix<f64>,
    /// `M x n_dim`, `(1/N) Phi^T X^2`.
    second: DMatrix<f64>,
}

impl MomentProjector {
    pub fn new(basis: &BasisSet, train: &TimeSeries) -> Result<Self> {
        if basis.n() != train.len() {
            return Err(Error::DimensionMismatch {
                expected: train.len(),
                got: basis.n(),
            });
        }
        let x = DMatrix::from_row_slice(train.len(), train.n_dim(), train.as_slice());
        let x2 = x.map(|v| v * v);
        Ok(MomentProjector {
            first: basis.project(&x)?,
            second: basis.project(&x2)?,
        })
    }

    pub fn n_dim(&self) -> usize {
        self.first.ncols()
    }

    pub fn mean(&self, coeffs: &DVector<f64>) -> Vec<f64> {
        self.first.tr_mul(coeffs).as_slice().to_vec()
    }

    pub fn second_moment(&self, coeffs: &DVector<f64>) -> Vec<f64> {
        self.second.tr_mul(coeffs).as_slice().to_vec()
    }

    /// Column `s` of each result holds the moments of `coeffs` column `s`;
    /// rows are coordinates.
    pub fn block(&self, coeffs: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut mean = DMatrix::zeros(self.n_dim(), coeffs.ncols());
        let mut second = DMatrix::zeros(self.n_dim(), coeffs.ncols());
        gemm(1.0, &self.first, true, coeffs, false, 0.0, &mut mean);
        gemm(1.0, &self.second, true, coeffs, false, 0.0, &mut second);
        (mean, second)
    }
}

/// Mean and uncentered second moment forecasts, indexed `[lead][state]`,
/// each a vector over coordinates. Lead `j` is `j` steps of `prop`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentForecast {
    pub mean: Vec<Vec<Vec<f64>>>,
    pub second: Vec<Vec<Vec<f64>>>,
}

/// Forecasts every initial state for leads `0..=max_lead`.
pub fn forecast_moments(
    prop: &Propagator,
    moments: &MomentProjector,
    initial: &[DensityState],
    max_lead: usize,
) -> Result<MomentForecast> {
    let m = prop.m();
    if let Some(bad) = initial.iter().find(|s| s.m() != m) {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: bad.m(),
        });
    }
    let mut c = DMatrix::zeros(m, initial.len());
    for (s, state) in initial.iter().enumerate() {
        c.set_column(s, &state.coeffs);
    }
    let split = |block: &DMatrix<f64>| {
        block
            .column_iter()
            .map(|col| col.iter().copied().collect())
            .collect::<Vec<Vec<f64>>>()
    };
    let mut out = MomentForecast {
        mean: Vec::with_capacity(max_lead + 1),
        second: Vec::with_capacity(max_lead + 1),
    };
    for lead in 0..=max_lead {
        if lead > 0 {
            c = prop.step_block(&c);
        }
        let (mean, second) = moments.block(&c);
        out.mean.push(split(&mean));
        out.second.push(split(&second));
    }
    Ok(out)
}
