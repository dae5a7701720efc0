//! Nonparametric density forecasting in diffusion-maps and QR-derived bases.
//!
//! The pipeline: sample a trajectory ([`datasets`]), build the normalized
//! kernel operator ([`kernel`]), construct an orthonormal basis ([`basis`]),
//! estimate the shift operator on its coefficients ([`propagator`]),
//! initialize densities from observations ([`initcond`]), and score moment
//! forecasts against the truth and an ensemble reference ([`ensemble`],
//! [`metrics`]). [`experiment`] wires the stages together from a TOML config.

pub mod basis;
pub mod datasets;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod initcond;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod metrics;
pub mod propagator;

pub use basis::{leading_eigenbasis, qr_mixed_basis, reconstruct, BasisSet, Selection};
pub use datasets::{
    generate, observe, split_train_verify, unit_circle_dataset, ObservationKind, ObservationModel,
    Origin, System, TimeSeries,
};
pub use ensemble::{ensemble_forecast, etkf_update, Ensemble};
pub use error::{Error, Result};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentOutcome};
pub use initcond::{bayesian_filter_init, nystrom_delta_init, FilterConfig};
pub use kernel::{auto_bandwidth, DiffusionOperator, Sparsity};
pub use metrics::{rmse_mean, rmse_second_moment, SkillCurve};
pub use nalgebra;
pub use propagator::{build_propagator, DensityState, Propagator};
