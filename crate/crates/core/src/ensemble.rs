//! Reference Monte-Carlo forecasts with the true model, initialized by an
//! ensemble transform Kalman filter or by perturbing clean observations.

use std::thread;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::datasets::{stream, System, TimeSeries};
use crate::error::{Error, Result};
use crate::linalg::symmetric_eigen;

/// Default ensemble size.
pub const DEFAULT_MEMBERS: usize = 1000;

/// Initial spread used when observations are noiseless.
pub const PERTURBATION_VARIANCE: f64 = 0.04;

/// Member `k` of a stochastic forecast draws its noise from stream
/// `MEMBER_STREAM_BASE + k` of the launch seed.
const MEMBER_STREAM_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    /// `n_dim x K`, one member per column.
    members: DMatrix<f64>,
    pub time: f64,
}

impl Ensemble {
    pub fn new(members: DMatrix<f64>, time: f64) -> Result<Self> {
        if members.ncols() < 2 {
            return Err(Error::param(format!(
                "an ensemble needs at least 2 members, got {}",
                members.ncols()
            )));
        }
        if members.nrows() == 0 {
            return Err(Error::param("members must have at least one coordinate"));
        }
        if let Some(pos) = members.iter().position(|v| !v.is_finite()) {
            return Err(Error::MemberDiverged {
                member: pos / members.nrows(),
                step: 0,
            });
        }
        Ok(Ensemble { members, time })
    }

    pub fn members(&self) -> &DMatrix<f64> {
        &self.members
    }

    pub fn size(&self) -> usize {
        self.members.ncols()
    }

    pub fn n_dim(&self) -> usize {
        self.members.nrows()
    }

    pub fn mean(&self) -> DVector<f64> {
        DVector::from_vec(shifted_mean(&self.members))
    }

    /// Member average of `x^2`, per coordinate.
    pub fn second_moment(&self) -> DVector<f64> {
        self.members.map(|v| v * v).column_mean()
    }

    /// Deviations from the mean, `n_dim x K`.
    pub fn perturbations(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let mut a = self.members.clone();
        for mut col in a.column_iter_mut() {
            col -= &mean;
        }
        a
    }

    /// Sample covariance with the `K - 1` normalization.
    pub fn covariance(&self) -> DMatrix<f64> {
        let a = self.perturbations();
        &a * a.transpose() / (self.size() - 1) as f64
    }
}

/// Ensemble moments at one lead.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMoments {
    pub mean: Vec<f64>,
    pub second: Vec<f64>,
}

/// Row means computed as `x_0 + mean(x - x_0)`, exact for identical members.
fn shifted_mean(ens: &DMatrix<f64>) -> Vec<f64> {
    let k = ens.ncols() as f64;
    ens.row_iter()
        .map(|r| r[0] + r.iter().map(|v| v - r[0]).sum::<f64>() / k)
        .collect()
}

fn moments(ens: &DMatrix<f64>) -> EnsembleMoments {
    let k = ens.ncols() as f64;
    let mean = shifted_mean(ens);
    let second = ens
        .row_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>() / k)
        .collect();
    EnsembleMoments { mean, second }
}

/// Integrates every member for `n_leads` intervals of `tau` and returns the
/// moments at leads `0..=n_leads`. Stochastic members use independent noise
/// streams of `seed`.
pub fn ensemble_forecast(
    system: &System,
    ens: &Ensemble,
    tau: f64,
    n_leads: usize,
    seed: u64,
) -> Result<Vec<EnsembleMoments>> {
    Ok(integrate_members(system, ens, tau, n_leads, seed)?
        .iter()
        .map(moments)
        .collect())
}

/// Member states at leads `0..=n_leads`.
pub fn integrate_members(
    system: &System,
    ens: &Ensemble,
    tau: f64,
    n_leads: usize,
    seed: u64,
) -> Result<Vec<DMatrix<f64>>> {
    if system.n_dim() != ens.n_dim() {
        return Err(Error::DimensionMismatch {
            expected: system.n_dim(),
            got: ens.n_dim(),
        });
    }
    let stride = system.stride_for(tau)?;
    system.validate()?;
    let k = ens.size();
    let n = ens.n_dim();
    let workers = thread::available_parallelism()
        .map_or(1, |p| p.get())
        .min(k);
    let chunk = k.div_ceil(workers);
    // Each worker returns its members' trajectories, `[lead][member][coord]`.
    let pieces: Vec<Result<Vec<Vec<f64>>>> = thread::scope(|scope| {
        let handles: Vec<_> = (0..k)
            .step_by(chunk)
            .map(|start| {
                let end = (start + chunk).min(k);
                scope.spawn(move || -> Result<Vec<Vec<f64>>> {
                    let mut stepper = system.stepper()?;
                    let mut out = vec![Vec::with_capacity((end - start) * n); n_leads + 1];
                    for member in start..end {
                        let mut rng = stream(seed, MEMBER_STREAM_BASE + member as u64);
                        let mut x: Vec<f64> = ens.members.column(member).iter().copied().collect();
                        out[0].extend_from_slice(&x);
                        for (lead, slot) in out.iter_mut().enumerate().skip(1) {
                            stepper
                                .advance(&mut x, stride, &mut rng)
                                .map_err(|e| match e {
                                    Error::IntegrationDiverged { step } => Error::MemberDiverged {
                                        member,
                                        step: (lead - 1) * stride + step,
                                    },
                                    other => other,
                                })?;
                            slot.extend_from_slice(&x);
                        }
                    }
                    Ok(out)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ensemble worker panicked"))
            .collect()
    });
    let mut leads = vec![Vec::with_capacity(k * n); n_leads + 1];
    for piece in pieces {
        for (lead, block) in piece?.into_iter().enumerate() {
            leads[lead].extend(block);
        }
    }
    Ok(leads
        .into_iter()
        .map(|data| DMatrix::from_vec(n, k, data))
        .collect())
}

/// Deterministic square-root analysis with identity observation operator
/// and noise covariance `obs_variance * I`.
///
/// The symmetric ensemble-space transform `W = [(K-1) Pa~]^{1/2}` acts on
/// the perturbations as `A W = U diag(sqrt(r / (r + l))) U^T A`, with
/// `P_f = U diag(l) U^T`, so only an `n_dim x n_dim` eigenproblem is
/// solved. The mean moves by `P_f (P_f + r I)^{-1} (y - mean)`.
pub fn etkf_update(ens: &Ensemble, y: &[f64], obs_variance: f64) -> Result<Ensemble> {
    let n = ens.n_dim();
    if y.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: y.len(),
        });
    }
    if !(obs_variance > 0.0 && obs_variance.is_finite()) {
        return Err(Error::param(format!(
            "observation variance must be positive, got {obs_variance}"
        )));
    }
    let r = obs_variance;
    let mean = ens.mean();
    let a = ens.perturbations();
    let pf = &a * a.transpose() / (ens.size() - 1) as f64;
    let sym = (&pf + pf.transpose()) * 0.5;
    let (lambda, u) = symmetric_eigen(&sym);
    // Round-off can leave tiny negative eigenvalues of a PSD matrix.
    let lambda: Vec<f64> = lambda.into_iter().map(|l| l.max(0.0)).collect();
    if lambda.iter().any(|&l| !(l + r > 0.0) || !l.is_finite()) {
        return Err(Error::SingularInnovation);
    }
    let innovation = DVector::from_column_slice(y) - &mean;
    let gain =
        &u * DMatrix::from_diagonal(&DVector::from_iterator(
            n,
            lambda.iter().map(|l| l / (l + r)),
        )) * u.transpose();
    let shrink =
        &u * DMatrix::from_diagonal(&DVector::from_iterator(
            n,
            lambda.iter().map(|l| (r / (l + r)).sqrt()),
        )) * u.transpose();
    let mean_a = &mean + gain * innovation;
    let mut members = shrink * a;
    for mut col in members.column_iter_mut() {
        col += &mean_a;
    }
    Ensemble::new(members, ens.time)
}

/// `K` members `x + xi_k`, `xi_k ~ N(0, variance I)`.
pub fn perturbed_init(x: &[f64], k: usize, variance: f64, seed: u64) -> Result<Ensemble> {
    if !(variance >= 0.0 && variance.is_finite()) {
        return Err(Error::param(format!(
            "variance must be nonnegative, got {variance}"
        )));
    }
    let sd = variance.sqrt();
    let mut rng = stream(seed, 0);
    let members = DMatrix::from_fn(x.len(), k, |i, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        x[i] + sd * z
    });
    Ensemble::new(members, 0.0)
}

/// Sequential analyses over `observations`: assimilate, then forecast one
/// interval, for each observation in turn. Returns one analysis per
/// observation.
pub fn etkf_cycle(
    system: &System,
    initial: &Ensemble,
    observations: &TimeSeries,
    obs_variance: f64,
    seed: u64,
) -> Result<Vec<Ensemble>> {
    let tau = observations.tau();
    let mut ens = initial.clone();
    let mut out = Vec::with_capacity(observations.len());
    for (n, y) in observations.samples().enumerate() {
        if n > 0 {
            let traj = integrate_members(system, &ens, tau, 1, launch_seed(seed, n as u64))?;
            ens = Ensemble::new(
                traj.into_iter().nth(1).expect("lead 1 present"),
                ens.time + tau,
            )?;
        }
        ens = etkf_update(&ens, y, obs_variance)?;
        out.push(ens.clone());
    }
    Ok(out)
}

/// Distinct seed per forecast launch.
pub fn launch_seed(seed: u64, launch: u64) -> u64 {
    seed ^ launch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}
