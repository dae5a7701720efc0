//! Trajectory generation, observation and train/verify splitting.
//!
//! Deterministic systems are integrated with classical RK4, the stochastic
//! triad with Euler-Maruyama. All generators discard a burn-in of
//! [`BURN_IN_INTERVALS`] output intervals so recorded samples lie on the
//! attractor.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Random stream used for every stochastic quantity in the crate.
pub type StreamRng = ChaCha20Rng;

/// Recorded in run manifests.
pub const RNG_ALGORITHM: &str =
    "ChaCha20 (rand_chacha 0.3) with ziggurat standard normals (rand_distr 0.4)";

/// Output intervals integrated and discarded before recording.
pub const BURN_IN_INTERVALS: usize = 1000;

/// Magnitude of the seeded perturbation added to each default initial coordinate.
pub const INITIAL_PERTURBATION: f64 = 1e-3;

pub(crate) fn stream(seed: u64, stream_id: u64) -> StreamRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Lorenz63,
    Lorenz96,
    Triad,
    Circle,
    Ou,
    External,
}

/// Uniformly spaced samples of a state trajectory, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    data: Vec<f64>,
    n_dim: usize,
    tau: f64,
    origin: Origin,
}

impl TimeSeries {
    pub fn new(data: Vec<f64>, n_dim: usize, tau: f64, origin: Origin) -> Result<Self> {
        if n_dim == 0 {
            return Err(Error::param("state dimension must be at least 1"));
        }
        if data.len() % n_dim != 0 {
            return Err(Error::param(format!(
                "{} values do not form whole samples of dimension {n_dim}",
                data.len()
            )));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::param(format!(
                "sampling interval must be positive, got {tau}"
            )));
        }
        let len = data.len() / n_dim;
        if len < 2 {
            return Err(Error::InsufficientLength {
                required: 2,
                available: len,
            });
        }
        Ok(TimeSeries {
            data,
            n_dim,
            tau,
            origin,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], tau: f64, origin: Origin) -> Result<Self> {
        let n_dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * n_dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != n_dim {
                return Err(Error::param(format!(
                    "sample {i} has dimension {} not {n_dim}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        TimeSeries::new(data, n_dim, tau, origin)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.n_dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn n_dim(&self) -> usize {
        self.n_dim
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_dim..(i + 1) * self.n_dim]
    }

    pub fn samples(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.n_dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Values of coordinate `c` along the series.
    pub fn coordinate(&self, c: usize) -> Vec<f64> {
        self.samples().map(|s| s[c]).collect()
    }

    /// Contiguous sub-series `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Result<TimeSeries> {
        if end > self.len() || start > end {
            return Err(Error::InsufficientLength {
                required: end,
                available: self.len(),
            });
        }
        TimeSeries::new(
            self.data[start * self.n_dim..end * self.n_dim].to_vec(),
            self.n_dim,
            self.tau,
            self.origin,
        )
    }

    /// Every `step`-th sample, used to bound the cost of pairwise statistics.
    pub fn strided(&self, step: usize) -> Result<TimeSeries> {
        let step = step.max(1);
        let data = self.samples().step_by(step).flatten().copied().collect();
        TimeSeries::new(data, self.n_dim, self.tau * step as f64, self.origin)
    }

    pub fn with_origin(mut self, origin: Origin) -> Self {
        self.origin = origin;
        self
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lorenz63Params {
    pub sigma: f64,
    pub rho: f64,
    pub b: f64,
    pub dt: f64,
}

impl Default for Lorenz63Params {
    fn default() -> Self {
        Lorenz63Params {
            sigma: 10.0,
            rho: 28.0,
            b: 8.0 / 3.0,
            dt: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lorenz96Params {
    pub d: usize,
    pub forcing: f64,
    pub dt: f64,
}

impl Default for Lorenz96Params {
    fn default() -> Self {
        Lorenz96Params {
            d: 6,
            forcing: 8.0,
            dt: 0.05,
        }
    }
}

/// Stochastic triad `dx = [B(x,x) + Lx - d Lambda x] dt + sigma Lambda^{1/2} dW`.
#[derive(Debug, Clone, PartialEq)]
pub struct TriadParams {
    pub b: [f64; 3],
    pub l_mat: Matrix3<f64>,
    pub lambda: Matrix3<f64>,
    pub d_coef: f64,
    pub sigma: f64,
    pub dt: f64,
    pub seed: u64,
}

impl Default for TriadParams {
    fn default() -> Self {
        TriadParams {
            b: [0.5, 1.0, -1.5],
            l_mat: Matrix3::new(0.0, 1.0, 0.0, -1.0, 0.0, -1.0, 0.0, 1.0, 0.0),
            lambda: Matrix3::new(1.0, 0.5, 0.25, 0.5, 1.0, 0.5, 0.25, 0.5, 1.0),
            d_coef: 0.5,
            sigma: 0.2,
            dt: 0.01,
            seed: 0,
        }
    }
}

impl TriadParams {
    /// Checks the structural constraints and returns the symmetric square
    /// root of `Lambda`.
    pub fn validate(&self) -> Result<Matrix3<f64>> {
        if !(self.dt > 0.0) {
            return Err(Error::param("triad dt must be positive"));
        }
        if (self.b[0] + self.b[1] + self.b[2]).abs() > 1e-12 {
            return Err(Error::param("triad bilinear coefficients must sum to zero"));
        }
        if (self.l_mat + self.l_mat.transpose()).amax() > 1e-12 {
            return Err(Error::param("triad linear operator must be skew-symmetric"));
        }
        if (self.lambda - self.lambda.transpose()).amax() > 1e-12 {
            return Err(Error::param("triad Lambda must be symmetric"));
        }
        let eig = SymmetricEigen::new(self.lambda);
        if eig.eigenvalues.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::param("triad Lambda must be positive definite"));
        }
        let root = Matrix3::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
        Ok(eig.eigenvectors * root * eig.eigenvectors.transpose())
    }

    fn drift(&self, x: &Vector3<f64>) -> Vector3<f64> {
        let bilinear = Vector3::new(
            self.b[0] * x[1] * x[2],
            self.b[1] * x[0] * x[2],
            self.b[2] * x[0] * x[1],
        );
        bilinear + self.l_mat * x - self.lambda * x * self.d_coef
    }
}

/// Scalar Ornstein-Uhlenbeck process `dx = -theta x dt + sigma dW`, sampled
/// with its exact Gaussian transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuParams {
    pub theta: f64,
    pub sigma: f64,
    pub dt: f64,
}

impl Default for OuParams {
    /// Unit-variance stationary law.
    fn default() -> Self {
        OuParams {
            theta: 1.0,
            sigma: 2f64.sqrt(),
            dt: 0.01,
        }
    }
}

/// A dynamical system with its integrator.
#[derive(Debug, Clone, PartialEq)]
pub enum System {
    Lorenz63(Lorenz63Params),
    Lorenz96(Lorenz96Params),
    Triad(TriadParams),
    Ou(OuParams),
}

/// Integrator workspace for one trajectory.
pub struct Stepper<'a> {
    system: &'a System,
    triad_root: Matrix3<f64>,
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl System {
    pub fn n_dim(&self) -> usize {
        match self {
            System::Lorenz63(_) | System::Triad(_) => 3,
            System::Lorenz96(p) => p.d,
            System::Ou(_) => 1,
        }
    }

    pub fn dt(&self) -> f64 {
        match self {
            System::Lorenz63(p) => p.dt,
            System::Lorenz96(p) => p.dt,
            System::Triad(p) => p.dt,
            System::Ou(p) => p.dt,
        }
    }

    pub fn origin(&self) -> Origin {
        match self {
            System::Lorenz63(_) => Origin::Lorenz63,
            System::Lorenz96(_) => Origin::Lorenz96,
            System::Triad(_) => Origin::Triad,
            System::Ou(_) => Origin::Ou,
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self, System::Triad(_) | System::Ou(_))
    }

    /// Seed of the system's own noise stream, if it carries one.
    pub fn noise_seed(&self) -> Option<u64> {
        match self {
            System::Triad(p) => Some(p.seed),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            System::Lorenz63(p) if !(p.dt > 0.0) => {
                Err(Error::param("Lorenz-63 dt must be positive"))
            }
            System::Lorenz96(p) if p.d < 4 => Err(Error::param("Lorenz-96 needs at least 4 sites")),
            System::Lorenz96(p) if !(p.dt > 0.0) => {
                Err(Error::param("Lorenz-96 dt must be positive"))
            }
            System::Triad(p) => p.validate().map(|_| ()),
            System::Ou(p) if !(p.dt > 0.0 && p.theta > 0.0 && p.sigma >= 0.0) => {
                Err(Error::param("OU needs dt > 0, theta > 0, sigma >= 0"))
            }
            _ => Ok(()),
        }
    }

    /// Documented default initial condition before perturbation.
    pub fn default_initial_state(&self) -> Vec<f64> {
        match self {
            System::Lorenz63(_) => vec![1.0, 1.0, 1.0],
            System::Lorenz96(p) => {
                let mut x = vec![p.forcing; p.d];
                x[0] += 0.01;
                x
            }
            System::Triad(_) => vec![0.1, 0.1, 0.1],
            System::Ou(_) => vec![0.0],
        }
    }

    /// Integrator steps per output interval `tau`.
    pub fn stride_for(&self, tau: f64) -> Result<usize> {
        let ratio = tau / self.dt();
        let stride = ratio.round();
        if !(stride >= 1.0) || (ratio - stride).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::param(format!(
                "sampling interval {tau} is not a positive multiple of the integrator step {}",
                self.dt()
            )));
        }
        Ok(stride as usize)
    }

    pub fn stepper(&self) -> Result<Stepper<'_>> {
        self.validate()?;
        let triad_root = match self {
            System::Triad(p) => p.validate()?,
            _ => Matrix3::zeros(),
        };
        let n = self.n_dim();
        Ok(Stepper {
            system: self,
            triad_root,
            k: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
            tmp: vec![0.0; n],
        })
    }

    fn vector_field(&self, x: &[f64], out: &mut [f64]) {
        match self {
            System::Lorenz63(p) => {
                out[0] = p.sigma * (x[1] - x[0]);
                out[1] = p.rho * x[0] - x[1] - x[0] * x[2];
                out[2] = x[0] * x[1] - p.b * x[2];
            }
            System::Lorenz96(p) => {
                let d = p.d;
                for j in 0..d {
                    let xp1 = x[(j + 1) % d];
                    let xm1 = x[(j + d - 1) % d];
                    let xm2 = x[(j + d - 2) % d];
                    out[j] = (xp1 - xm2) * xm1 - x[j] + p.forcing;
                }
            }
            System::Triad(p) => {
                let f = p.drift(&Vector3::new(x[0], x[1], x[2]));
                out.copy_from_slice(f.as_slice());
            }
            System::Ou(p) => out[0] = -p.theta * x[0],
        }
    }
}

impl Stepper<'_> {
    /// Advances `x` by `n_steps` integrator steps. Stochastic systems draw
    /// their increments from `rng`.
    pub fn advance<R: Rng + ?Sized>(
        &mut self,
        x: &mut [f64],
        n_steps: usize,
        rng: &mut R,
    ) -> Result<()> {
        for step in 0..n_steps {
            match self.system {
                System::Lorenz63(_) | System::Lorenz96(_) => self.rk4(x),
                System::Triad(p) => {
                    let xi = Vector3::new(
                        StandardNormal.sample(rng),
                        StandardNormal.sample(rng),
                        StandardNormal.sample(rng),
                    );
                    let v = Vector3::new(x[0], x[1], x[2]);
                    let next =
                        v + p.drift(&v) * p.dt + self.triad_root * xi * (p.sigma * p.dt.sqrt());
                    x.copy_from_slice(next.as_slice());
                }
                System::Ou(p) => {
                    let decay = (-p.theta * p.dt).exp();
                    let sd = (p.sigma * p.sigma / (2.0 * p.theta) * (1.0 - decay * decay)).sqrt();
                    let xi: f64 = StandardNormal.sample(rng);
                    x[0] = x[0] * decay + sd * xi;
                }
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::IntegrationDiverged { step });
            }
        }
        Ok(())
    }

    fn rk4(&mut self, x: &mut [f64]) {
        let dt = self.system.dt();
        let [k1, k2, k3, k4] = &mut self.k;
        let tmp = &mut self.tmp;
        self.system.vector_field(x, k1);
        for i in 0..x.len() {
            tmp[i] = x[i] + 0.5 * dt * k1[i];
        }
        self.system.vector_field(tmp, k2);
        for i in 0..x.len() {
            tmp[i] = x[i] + 0.5 * dt * k2[i];
        }
        self.system.vector_field(tmp, k3);
        for i in 0..x.len() {
            tmp[i] = x[i] + dt * k3[i];
        }
        self.system.vector_field(tmp, k4);
        for i in 0..x.len() {
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
}

/// Integrates `n_steps` integrator steps from `x0`, recording the state at
/// step 0 and every `stride` steps thereafter; `tau = stride * dt`.
pub fn integrate(
    system: &System,
    x0: &[f64],
    n_steps: usize,
    stride: usize,
    seed: u64,
) -> Result<TimeSeries> {
    if x0.len() != system.n_dim() {
        return Err(Error::DimensionMismatch {
            expected: system.n_dim(),
            got: x0.len(),
        });
    }
    if n_steps == 0 || stride == 0 {
        return Err(Error::param("n_steps and stride must be at least 1"));
    }
    if n_steps < stride {
        return Err(Error::InsufficientLength {
            required: stride,
            available: n_steps,
        });
    }
    let mut stepper = system.stepper()?;
    let mut rng = stream(system.noise_seed().unwrap_or(seed), 0);
    let n_out = n_steps / stride;
    let mut data = Vec::with_capacity((n_out + 1) * x0.len());
    let mut x = x0.to_vec();
    data.extend_from_slice(&x);
    for k in 0..n_out {
        stepper
            .advance(&mut x, stride, &mut rng)
            .map_err(|e| match e {
                Error::IntegrationDiverged { step } => Error::IntegrationDiverged {
                    step: k * stride + step,
                },
                other => other,
            })?;
        data.extend_from_slice(&x);
    }
    TimeSeries::new(data, x0.len(), stride as f64 * system.dt(), system.origin())
}

pub fn integrate_lorenz63(
    params: Lorenz63Params,
    x0: [f64; 3],
    n_steps: usize,
    stride: usize,
) -> Result<TimeSeries> {
    integrate(&System::Lorenz63(params), &x0, n_steps, stride, 0)
}

pub fn integrate_lorenz96(
    params: Lorenz96Params,
    x0: &[f64],
    n_steps: usize,
    stride: usize,
) -> Result<TimeSeries> {
    integrate(&System::Lorenz96(params), x0, n_steps, stride, 0)
}

/// Euler-Maruyama path; the noise stream is fixed by `params.seed`.
pub fn integrate_triad(
    params: TriadParams,
    x0: [f64; 3],
    n_steps: usize,
    stride: usize,
) -> Result<TimeSeries> {
    let seed = params.seed;
    integrate(&System::Triad(params), &x0, n_steps, stride, seed)
}

/// Attractor samples: seeded perturbation of the default initial state,
/// burn-in, then `n_samples` states spaced `tau` apart.
pub fn generate(system: &System, n_samples: usize, tau: f64, seed: u64) -> Result<TimeSeries> {
    system.validate()?;
    let stride = system.stride_for(tau)?;
    if n_samples < 2 {
        return Err(Error::InsufficientLength {
            required: 2,
            available: n_samples,
        });
    }
    let mut init_rng = stream(seed, 1);
    let mut x: Vec<f64> = system
        .default_initial_state()
        .into_iter()
        .map(|v| v + INITIAL_PERTURBATION * init_rng.gen_range(-1.0..=1.0))
        .collect();
    let mut rng = stream(system.noise_seed().unwrap_or(seed), 0);
    let mut stepper = system.stepper()?;
    stepper.advance(&mut x, BURN_IN_INTERVALS * stride, &mut rng)?;
    let mut data = Vec::with_capacity(n_samples * x.len());
    data.extend_from_slice(&x);
    for k in 1..n_samples {
        stepper
            .advance(&mut x, stride, &mut rng)
            .map_err(|e| match e {
                Error::IntegrationDiverged { step } => Error::IntegrationDiverged {
                    step: (BURN_IN_INTERVALS + k - 1) * stride + step,
                },
                other => other,
            })?;
        data.extend_from_slice(&x);
    }
    TimeSeries::new(
        data,
        system.n_dim(),
        stride as f64 * system.dt(),
        system.origin(),
    )
}

/// `n` equispaced points `(cos t_i, sin t_i)`, `t_i = 2 pi i / n`.
pub fn unit_circle_dataset(n: usize) -> Result<TimeSeries> {
    if n < 3 {
        return Err(Error::param(format!(
            "circle dataset needs at least 3 points, got {n}"
        )));
    }
    let step = 2.0 * std::f64::consts::PI / n as f64;
    let mut data = Vec::with_capacity(2 * n);
    for i in 0..n {
        let (s, c) = (step * i as f64).sin_cos();
        data.push(c);
        data.push(s);
    }
    TimeSeries::new(data, 2, step, Origin::Circle)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationKind {
    Gaussian,
    Noiseless,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationModel {
    pub kind: ObservationKind,
    pub variance: f64,
    pub seed: u64,
}

impl ObservationModel {
    pub fn gaussian(variance: f64, seed: u64) -> Self {
        ObservationModel {
            kind: ObservationKind::Gaussian,
            variance,
            seed,
        }
    }

    pub fn noiseless() -> Self {
        ObservationModel {
            kind: ObservationKind::Noiseless,
            variance: 0.0,
            seed: 0,
        }
    }
}

/// `y_n = x_n + eta_n` with independent isotropic Gaussian `eta_n`.
pub fn observe(series: &TimeSeries, model: &ObservationModel) -> Result<TimeSeries> {
    if !(model.variance >= 0.0) {
        return Err(Error::param(format!(
            "observation variance must be non-negative, got {}",
            model.variance
        )));
    }
    match model.kind {
        ObservationKind::Noiseless if model.variance != 0.0 => Err(Error::param(
            "noiseless observations must have zero variance",
        )),
        ObservationKind::Noiseless => Ok(series.clone()),
        ObservationKind::Gaussian => {
            let sd = model.variance.sqrt();
            let mut rng = stream(model.seed, 2);
            let data = series
                .as_slice()
                .iter()
                .map(|&x| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    x + sd * e
                })
                .collect();
            TimeSeries::new(data, series.n_dim(), series.tau(), series.origin())
        }
    }
}

/// First `n` samples for training, the next `n_v` for verification.
pub fn split_train_verify(
    series: &TimeSeries,
    n: usize,
    n_v: usize,
) -> Result<(TimeSeries, TimeSeries)> {
    if n_v == 0 {
        return Err(Error::param("verification segment must not be empty"));
    }
    if n + n_v > series.len() {
        return Err(Error::InsufficientLength {
            required: n + n_v,
            available: series.len(),
        });
    }
    Ok((series.slice(0, n)?, series.slice(n, n + n_v)?))
}
