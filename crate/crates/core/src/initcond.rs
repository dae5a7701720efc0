//! Initial densities from observations: Nystrom delta initialization for
//! clean data and a Bayesian predictor-corrector filter for noisy data.

use nalgebra::DVector;

use crate::basis::BasisSet;
use crate::datasets::{squared_distance, TimeSeries};
use crate::error::{Error, Result};
use crate::kernel::DiffusionOperator;
use crate::propagator::{normalize, project_density, DensityState, Propagator};

/// How the Nystrom coefficients are formed; recorded in run metadata.
pub const NYSTROM_FORMULA: &str =
    "c_k = sum_i T(y,x_i) phi_k(x_i) with unit row sum, no 1/eigenvalue factor";

/// Observation likelihood `p(y | x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Likelihood {
    /// Isotropic Gaussian noise with this per-coordinate variance.
    Gaussian { variance: f64 },
    /// `p(y | x) = 1`; the correction leaves the density unchanged.
    Flat,
}

impl Likelihood {
    /// `0` means flat.
    pub fn from_variance(variance: f64) -> Result<Self> {
        if variance == 0.0 {
            Ok(Likelihood::Flat)
        } else if variance > 0.0 && variance.is_finite() {
            Ok(Likelihood::Gaussian { variance })
        } else {
            Err(Error::param(format!(
                "observation variance must be positive, got {variance}"
            )))
        }
    }

    /// Weights at every training sample, scaled so the largest is one.
    pub fn weights(&self, train: &TimeSeries, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != train.n_dim() {
            return Err(Error::DimensionMismatch {
                expected: train.n_dim(),
                got: y.len(),
            });
        }
        match *self {
            Likelihood::Flat => Ok(vec![1.0; train.len()]),
            Likelihood::Gaussian { variance } => {
                let log_l: Vec<f64> = train
                    .samples()
                    .map(|x| -squared_distance(x, y) / (2.0 * variance))
                    .collect();
                let top = log_l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                Ok(log_l.into_iter().map(|v| (v - top).exp()).collect())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    /// Leading posteriors excluded from skill metrics.
    pub spinup_discard: usize,
    pub likelihood: Likelihood,
    /// Zero negative density values after each correction.
    pub clip: bool,
}

impl FilterConfig {
    pub fn gaussian(variance: f64) -> Result<Self> {
        Ok(FilterConfig {
            spinup_discard: 10,
            likelihood: Likelihood::from_variance(variance)?,
            clip: true,
        })
    }
}

/// Raw coefficients `c_k = sum_i T(y, x_i) phi_k(x_i)`, before normalization.
pub fn nystrom_coefficients(
    op: &DiffusionOperator,
    basis: &BasisSet,
    y: &[f64],
) -> Result<DVector<f64>> {
    if basis.n() != op.n() {
        return Err(Error::DimensionMismatch {
            expected: op.n(),
            got: basis.n(),
        });
    }
    let row = DVector::from_vec(op.kernel_row(y)?);
    Ok(basis.values().tr_mul(&row))
}

/// Delta density at `y`, extended to the basis and normalized with clipping.
pub fn nystrom_delta_init(
    op: &DiffusionOperator,
    basis: &BasisSet,
    y: &[f64],
) -> Result<DensityState> {
    nystrom_delta_init_with(op, basis, y, true)
}

/// [`nystrom_delta_init`] with clipping optional. Without it the moments
/// of functions in the basis span are reproduced exactly, at the price of
/// negative density lobes.
pub fn nystrom_delta_init_with(
    op: &DiffusionOperator,
    basis: &BasisSet,
    y: &[f64],
    clip: bool,
) -> Result<DensityState> {
    let c = nystrom_coefficients(op, basis, y)?;
    normalize(basis, &DensityState::new(c), clip)
}

/// Sequential predictor-corrector over observations.
#[derive(Debug, Clone)]
pub struct BayesFilter<'a> {
    basis: &'a BasisSet,
    prop: &'a Propagator,
    train: &'a TimeSeries,
    cfg: FilterConfig,
    state: DensityState,
    corrections: usize,
}

impl<'a> BayesFilter<'a> {
    /// Starts from the density that is uniform in state space,
    /// `rho_i ∝ 1 / q(x_i)` with `q` the kernel density estimate.
    pub fn new(
        op: &'a DiffusionOperator,
        basis: &'a BasisSet,
        prop: &'a Propagator,
        cfg: FilterConfig,
    ) -> Result<Self> {
        if basis.n() != op.n() {
            return Err(Error::DimensionMismatch {
                expected: op.n(),
                got: basis.n(),
            });
        }
        if prop.m() != basis.m() {
            return Err(Error::DimensionMismatch {
                expected: basis.m(),
                got: prop.m(),
            });
        }
        let rho = DVector::from_iterator(op.n(), op.q_values().iter().map(|q| 1.0 / q));
        let state = normalize(
            basis,
            &DensityState::new(project_density(basis, &rho)),
            cfg.clip,
        )?;
        Ok(BayesFilter {
            basis,
            prop,
            train: op.training(),
            cfg,
            state,
            corrections: 0,
        })
    }

    pub fn state(&self) -> &DensityState {
        &self.state
    }

    /// `c <- Ahat c`, rescaled to unit mass.
    pub fn predict(&mut self) {
        let mut next = self.prop.step(&self.state, 1);
        next.time_index = 0;
        self.state = next;
    }

    /// Multiplies the density by the likelihood of `y` and renormalizes.
    pub fn correct(&mut self, y: &[f64]) -> Result<()> {
        let w = self.cfg.likelihood.weights(self.train, y)?;
        self.correct_with_weights(&w)
    }

    /// Correction with explicit likelihood values at the training samples.
    pub fn correct_with_weights(&mut self, weights: &[f64]) -> Result<()> {
        if weights.len() != self.basis.n() {
            return Err(Error::DimensionMismatch {
                expected: self.basis.n(),
                got: weights.len(),
            });
        }
        let step = self.corrections;
        let mut rho = self.basis.values() * &self.state.coeffs;
        for (r, w) in rho.iter_mut().zip(weights) {
            *r *= w;
            if self.cfg.clip && *r < 0.0 {
                *r = 0.0;
            }
        }
        let c = project_density(self.basis, &rho);
        let mass = self.prop.total_mass(&c);
        if !(mass > 0.0 && mass.is_finite()) {
            return Err(Error::DegenerateDensity { step: Some(step) });
        }
        self.state = DensityState::new(c / mass);
        self.corrections += 1;
        Ok(())
    }
}

/// Posterior states, one per observation.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterRun {
    pub states: Vec<DensityState>,
    pub spinup_discard: usize,
}

impl FilterRun {
    pub fn is_spinup(&self, n: usize) -> bool {
        n < self.spinup_discard
    }

    /// States after the spin-up window.
    pub fn retained(&self) -> &[DensityState] {
        &self.states[self.spinup_discard.min(self.states.len())..]
    }
}

/// Filters `observations`: the first is assimilated into the uniform prior,
/// every later one after a one-lag prediction.
pub fn bayesian_filter_init(
    op: &DiffusionOperator,
    basis: &BasisSet,
    prop: &Propagator,
    observations: &TimeSeries,
    cfg: FilterConfig,
) -> Result<FilterRun> {
    if ((observations.tau() - prop.tau()) / prop.tau()).abs() > 1e-9 {
        return Err(Error::param(format!(
            "observation spacing {} differs from propagator lag {}",
            observations.tau(),
            prop.tau()
        )));
    }
    let mut filter = BayesFilter::new(op, basis, prop, cfg)?;
    let mut states = Vec::with_capacity(observations.len());
    for (n, y) in observations.samples().enumerate() {
        if n > 0 {
            filter.predict();
        }
        filter.correct(y).map_err(|e| match e {
            Error::DegenerateDensity { .. } => Error::DegenerateDensity { step: Some(n) },
            other => other,
        })?;
        states.push(filter.state().clone());
    }
    Ok(FilterRun {
        states,
        spinup_discard: cfg.spinup_discard,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::basis::{leading_eigenbasis, qr_mixed_basis, Selection};
    use crate::datasets::{
        generate, observe, split_train_verify, ObservationModel, Origin, OuParams, System,
    };
    use crate::kernel::{auto_bandwidth, Sparsity};
    use crate::propagator::{
        build_propagator, density_values, expectation, mass_vector, MomentProjector,
    };
    use proptest::prelude::*;

    struct Fixture {
        op: DiffusionOperator,
        basis: BasisSet,
        prop: Propagator,
        verify: TimeSeries,
    }

    fn ou_fixture(n: usize, m_e: usize) -> Fixture {
        let all = generate(&System::Ou(OuParams::default()), n + 200, 0.1, 31).unwrap();
        let (train, verify) = split_train_verify(&all, n, 200).unwrap();
        let train = Arc::new(train);
        let eps = auto_bandwidth(&train).unwrap().epsilon;
        let op = DiffusionOperator::build(train.clone(), eps, Sparsity::Dense).unwrap();
        let basis = leading_eigenbasis(&op, m_e).unwrap();
        let prop = build_propagator(&basis, &train).unwrap();
        Fixture {
            op,
            basis,
            prop,
            verify,
        }
    }

    #[test]
    fn nystrom_constant_coefficient_is_one() {
        let f = ou_fixture(800, 10);
        for y in [-1.5, 0.0, 0.3, 2.0] {
            let c = nystrom_coefficients(&f.op, &f.basis, &[y]).unwrap();
            assert!((c[0] - 1.0).abs() <= 1e-6, "{}", c[0]);
        }
    }

    #[test]
    fn nystrom_at_a_training_point_is_the_t_row() {
        let f = ou_fixture(600, 12);
        let j = 217;
        let x = f.op.training().sample(j).to_vec();
        let c = nystrom_coefficients(&f.op, &f.basis, &x).unwrap();
        // Independent path: the stored T row applied to the basis.
        let t = f.op.t_matrix();
        let expect = f.basis.values().tr_mul(&t.row(j).transpose());
        assert!((c - &expect).amax() <= 1e-10);
        // Eigen columns are eigenvectors of T up to the reorthonormalization
        // over the samples.
        let tphi = f.op.apply_t(f.basis.values());
        for k in 0..4 {
            let s = f.basis.eigenvalues()[k];
            assert!(
                (expect[k] - s * f.basis.values()[(j, k)]).abs()
                    <= 1e-4 * (1.0 + f.basis.values()[(j, k)].abs())
            );
            assert!((tphi[(j, k)] - expect[k]).abs() <= 1e-10);
        }
        let mp = MomentProjector::new(&f.basis, f.op.training()).unwrap();
        let state = nystrom_delta_init(&f.op, &f.basis, &x).unwrap();
        let mean = mp.mean(&state.coeffs)[0];
        assert!(
            (mean - x[0]).abs() <= 2.0 * f.op.epsilon().sqrt(),
            "{mean} vs {}",
            x[0]
        );
    }

    #[test]
    fn delta_init_peaks_at_its_training_point() {
        // Sparse 3-D samples, so neighbouring points are resolved by the basis.
        let s = Arc::new(generate(&System::Lorenz63(Default::default()), 400, 0.1, 17).unwrap());
        let eps = auto_bandwidth(&s).unwrap().epsilon;
        let op = DiffusionOperator::build(s.clone(), eps, Sparsity::Dense).unwrap();
        let basis = leading_eigenbasis(&op, 300).unwrap();
        let width = eps.sqrt();
        let mut exact = 0;
        for j in (10..400).step_by(37) {
            let x = s.sample(j).to_vec();
            let state = nystrom_delta_init(&op, &basis, &x).unwrap();
            let rho = density_values(&basis, &state).unwrap();
            let peak = rho.argmax().0;
            // A miss must be a neighbour the kernel cannot separate from x_j.
            let dist = squared_distance(s.sample(peak), &x).sqrt();
            assert!(
                peak == j || dist <= 0.5 * width,
                "peak {peak} for {j}, {dist} apart"
            );
            exact += usize::from(peak == j);
        }
        assert!(exact >= 8, "{exact} of 11 exact peaks");
    }

    #[test]
    fn unclipped_init_reproduces_kernel_moments_of_basis_functions() {
        let Fixture { op, basis, .. } = ou_fixture(800, 20);
        let s = op.training().clone();
        let y = [1.37];
        // Oracle: brute-force normalized kernel row.
        let eps = op.epsilon();
        let k = |a: &[f64], b: &[f64]| (-squared_distance(a, b) / (4.0 * eps)).exp();
        let n = s.len() as f64;
        let q: Vec<f64> = s
            .samples()
            .map(|x| s.samples().map(|z| k(x, z)).sum::<f64>() / n)
            .collect();
        let qy = s.samples().map(|x| k(&y, x)).sum::<f64>() / n;
        let khat: Vec<f64> = s
            .samples()
            .zip(&q)
            .map(|(x, qi)| k(&y, x) / (qy.sqrt() * qi.sqrt()))
            .collect();
        let dy: f64 = khat.iter().sum::<f64>();
        let row: Vec<f64> = khat.iter().map(|v| v / dy).collect();

        let free = nystrom_delta_init_with(&op, &basis, &y, false).unwrap();
        let clipped = nystrom_delta_init_with(&op, &basis, &y, true).unwrap();
        assert!(
            density_values(&basis, &free).unwrap().min() < 0.0,
            "case has no negative lobes"
        );
        let mut clipped_dev: f64 = 0.0;
        for kk in [1, 4, 17] {
            // The basis is orthonormal over the samples, so E[phi_k] = c_k.
            let phi: Vec<f64> = basis.values().column(kk).iter().copied().collect();
            let oracle: f64 = row.iter().zip(&phi).map(|(r, p)| r * p).sum();
            assert!((expectation(&basis, &free, &phi).unwrap() - oracle).abs() <= 1e-10);
            clipped_dev =
                clipped_dev.max((expectation(&basis, &clipped, &phi).unwrap() - oracle).abs());
        }
        assert!(clipped_dev > 1e-6);
    }

    #[test]
    fn far_points_are_out_of_support() {
        let f = ou_fixture(300, 5);
        assert!(matches!(
            nystrom_delta_init(&f.op, &f.basis, &[1e4]),
            Err(Error::OutOfSupport)
        ));
    }

    #[test]
    fn flat_likelihood_keeps_the_prior() {
        let f = ou_fixture(500, 8);
        let cfg = FilterConfig {
            spinup_discard: 0,
            likelihood: Likelihood::Flat,
            clip: false,
        };
        let mut filt = BayesFilter::new(&f.op, &f.basis, &f.prop, cfg).unwrap();
        filt.predict();
        let prior = filt.state().clone();
        filt.correct(&[0.7]).unwrap();
        assert!((filt.state().coeffs.clone() - prior.coeffs).amax() <= 1e-10);
    }

    #[test]
    fn flat_likelihood_with_clipping_keeps_a_nonnegative_prior() {
        let f = ou_fixture(500, 4);
        let cfg = FilterConfig {
            spinup_discard: 0,
            likelihood: Likelihood::Flat,
            clip: true,
        };
        let mut filt = BayesFilter::new(&f.op, &f.basis, &f.prop, cfg).unwrap();
        filt.predict();
        let prior = filt.state().clone();
        assert!(density_values(&f.basis, &prior).unwrap().min() >= 0.0);
        filt.correct(&[0.0]).unwrap();
        assert!((filt.state().coeffs.clone() - prior.coeffs).amax() <= 1e-10);
    }

    #[test]
    fn first_prediction_matches_one_step() {
        let f = ou_fixture(500, 8);
        let cfg = FilterConfig::gaussian(0.5).unwrap();
        let mut filt = BayesFilter::new(&f.op, &f.basis, &f.prop, cfg).unwrap();
        let prior = filt.state().clone();
        filt.predict();
        assert_eq!(filt.state().coeffs, f.prop.step(&prior, 1).coeffs);
    }

    #[test]
    fn prior_is_inverse_density() {
        let f = ou_fixture(500, 40);
        let cfg = FilterConfig {
            spinup_discard: 0,
            likelihood: Likelihood::Flat,
            clip: false,
        };
        let filt = BayesFilter::new(&f.op, &f.basis, &f.prop, cfg).unwrap();
        let rho = DVector::from_iterator(500, f.op.q_values().iter().map(|q| 1.0 / q));
        let c = project_density(&f.basis, &rho);
        let expect = &c / mass_vector(&f.basis).dot(&c);
        assert!((filt.state().coeffs.clone() - expect).amax() <= 1e-12);
        // The prior puts more weight in the tails than the equilibrium.
        let mp = MomentProjector::new(&f.basis, f.op.training()).unwrap();
        assert!(
            mp.second_moment(&filt.state().coeffs)[0] > mp.second_moment(&mass_vector(&f.basis))[0]
        );
    }

    #[test]
    fn positivity_after_correction_in_a_complete_basis() {
        let s = Arc::new(
            TimeSeries::from_rows(
                &(0..80).map(|i| [i as f64 / 80.0]).collect::<Vec<_>>(),
                0.1,
                Origin::External,
            )
            .unwrap(),
        );
        let op = DiffusionOperator::build(s.clone(), 1e-5, Sparsity::Dense).unwrap();
        let basis = qr_mixed_basis(&op, None, 80, &Selection::Middle).unwrap();
        assert_eq!(basis.m(), 80);
        let prop = build_propagator(&basis, &s).unwrap();
        let mut filt =
            BayesFilter::new(&op, &basis, &prop, FilterConfig::gaussian(0.01).unwrap()).unwrap();
        for y in [0.2, 0.25, 0.3, 0.5] {
            filt.predict();
            filt.correct(&[y]).unwrap();
            let rho = density_values(&basis, filt.state()).unwrap();
            assert!(rho.min() >= -1e-10);
            assert!((prop.total_mass(&filt.state().coeffs) - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn ou_posterior_mean_tracks_the_kalman_filter() {
        let f = ou_fixture(3000, 40);
        let var = 0.25;
        let obs = observe(
            &f.verify.slice(0, 100).unwrap(),
            &ObservationModel::gaussian(var, 5),
        )
        .unwrap();
        let run = bayesian_filter_init(
            &f.op,
            &f.basis,
            &f.prop,
            &obs,
            FilterConfig::gaussian(var).unwrap(),
        )
        .unwrap();
        assert_eq!(run.states.len(), 100);
        let mp = MomentProjector::new(&f.basis, f.op.training()).unwrap();
        // Exact discrete filter for x' = a x + w, w ~ N(0, 1 - a^2).
        let a = (-0.1f64).exp();
        let (mut m, mut p) = (0.0, 1e6);
        let mut diff2 = 0.0;
        let mut ref2 = 0.0;
        for (n, y) in obs.samples().enumerate() {
            if n > 0 {
                m *= a;
                p = a * a * p + (1.0 - a * a);
            }
            let k = p / (p + var);
            m += k * (y[0] - m);
            p *= 1.0 - k;
            if n >= 10 {
                let got = mp.mean(&run.states[n].coeffs)[0];
                diff2 += (got - m).powi(2);
                ref2 += m * m;
            }
        }
        let rel = (diff2 / ref2).sqrt();
        assert!(rel <= 0.15, "relative deviation {rel}");
    }

    #[test]
    fn annihilated_posterior_names_the_step() {
        let f = ou_fixture(400, 6);
        let cfg = FilterConfig {
            spinup_discard: 0,
            likelihood: Likelihood::Flat,
            clip: true,
        };
        let mut filt = BayesFilter::new(&f.op, &f.basis, &f.prop, cfg).unwrap();
        let zero = vec![0.0; 400];
        assert!(matches!(
            filt.correct_with_weights(&zero),
            Err(Error::DegenerateDensity { step: Some(0) })
        ));
    }

    #[test]
    fn spinup_window_is_excluded() {
        let run = FilterRun {
            states: (0..15).map(|_| DensityState::equilibrium(2)).collect(),
            spinup_discard: 10,
        };
        assert!(run.is_spinup(9) && !run.is_spinup(10));
        assert_eq!(run.retained().len(), 5);
    }

    #[test]
    fn mismatched_lag_is_rejected() {
        let f = ou_fixture(300, 4);
        let obs = TimeSeries::new(vec![0.0, 0.1, 0.2], 1, 0.2, Origin::External).unwrap();
        assert!(bayesian_filter_init(
            &f.op,
            &f.basis,
            &f.prop,
            &obs,
            FilterConfig::gaussian(1.0).unwrap()
        )
        .is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn likelihood_scale_does_not_matter(lambda in 1e-3f64..1e3, y in -2.0f64..2.0) {
            let f = ou_fixture(300, 8);
            let cfg = FilterConfig::gaussian(0.3).unwrap();
            let w = cfg.likelihood.weights(f.op.training(), &[y]).unwrap();
            let scaled: Vec<f64> = w.iter().map(|v| v * lambda).collect();
            let mut a = BayesFilter::new(&f.op, &f.basis, &f.prop, cfg).unwrap();
            let mut b = a.clone();
            a.correct_with_weights(&w).unwrap();
            b.correct_with_weights(&scaled).unwrap();
            prop_assert!((a.state().coeffs.clone() - b.state().coeffs.clone()).amax() <= 1e-10);
        }

        #[test]
        fn corrected_posteriors_have_unit_mass(y in -2.5f64..2.5, var in 0.05f64..2.0) {
            let f = ou_fixture(300, 8);
            let mut filt = BayesFilter::new(&f.op, &f.basis, &f.prop, FilterConfig::gaussian(var).unwrap()).unwrap();
            filt.correct(&[y]).unwrap();
            let total = f.prop.total_mass(&filt.state().coeffs);
            prop_assert!((total - 1.0).abs() <= 1e-12);
            let rho = density_values(&f.basis, filt.state()).unwrap();
            prop_assert!((rho.sum() / 300.0 - 1.0).abs() <= 1e-8);
        }
    }
}
