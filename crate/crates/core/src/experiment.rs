//! End-to-end driver: generate, tune, build the operator, construct each
//! basis variant, estimate propagators, initialize, forecast, and score.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::basis::{leading_eigenbasis, qr_mixed_basis, BasisSet, Selection};
use crate::datasets::{
    generate, observe, split_train_verify, unit_circle_dataset, Lorenz63Params, Lorenz96Params,
    ObservationKind, ObservationModel, OuParams, System, TimeSeries, TriadParams, RNG_ALGORITHM,
};
use crate::ensemble::{
    etkf_cycle, integrate_members, launch_seed, perturbed_init, Ensemble, PERTURBATION_VARIANCE,
};
use crate::error::{Error, Result};
use crate::initcond::{
    bayesian_filter_init, nystrom_delta_init_with, FilterConfig, NYSTROM_FORMULA,
};
use crate::io::{self, Metadata};
use crate::kernel::{auto_bandwidth, DiffusionOperator, Sparsity};
use crate::metrics::{rmse_mean, rmse_second_moment, write_curve, LeadTable, SkillCurve};
use crate::propagator::{
    build_propagator, forecast_moments, DensityState, MomentForecast, MomentProjector, Propagator,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemName {
    Lorenz63,
    Lorenz96,
    Triad,
    Ou,
    /// Reconstruction study on the unit circle; no forecasting.
    Circle,
}

/// `"auto"` or a fixed positive bandwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Bandwidth {
    Value(f64),
    Named(String),
}

impl Default for Bandwidth {
    fn default() -> Self {
        Bandwidth::Named("auto".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    pub me: usize,
    pub mq: usize,
    #[serde(default = "default_select")]
    pub select: String,
}

fn default_select() -> String {
    "middle".into()
}

impl VariantConfig {
    pub fn label(&self) -> String {
        format!("me{}_mq{}", self.me, self.mq)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisConfig {
    pub variants: Vec<VariantConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObsConfig {
    pub kind: ObservationKind,
    #[serde(default)]
    pub variance: f64,
}

impl Default for ObsConfig {
    fn default() -> Self {
        ObsConfig {
            kind: ObservationKind::Noiseless,
            variance: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default = "default_members")]
    pub members: usize,
}

fn default_members() -> usize {
    crate::ensemble::DEFAULT_MEMBERS
}

/// Overrides for the Lorenz-96 defaults.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lorenz96Config {
    pub d: Option<usize>,
    pub forcing: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemName,
    /// Training samples.
    pub n: usize,
    /// Verification samples.
    #[serde(default)]
    pub nv: usize,
    pub tau: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub epsilon: Bandwidth,
    /// `0` keeps the dense kernel.
    #[serde(default)]
    pub knn: usize,
    pub basis: BasisConfig,
    #[serde(default)]
    pub obs: ObsConfig,
    #[serde(default = "default_spinup")]
    pub spinup: usize,
    /// Largest lead, in steps of `tau`.
    #[serde(default)]
    pub leads: usize,
    /// Absent means no ensemble reference.
    #[serde(default)]
    pub ensemble: Option<EnsembleConfig>,
    pub out_dir: PathBuf,
    /// Leads (in steps) for which truth/forecast trajectories are written.
    #[serde(default)]
    pub trajectory_leads: Vec<usize>,
    #[serde(default)]
    pub lorenz96: Lorenz96Config,
    /// Clip negative density in Nystrom delta initialization.
    #[serde(default = "default_true")]
    pub nystrom_clip: bool,
}

fn default_true() -> bool {
    true
}

fn default_spinup() -> usize {
    10
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        ExperimentConfig::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.n < 3 {
            return bad(format!("n must be at least 3, got {}", self.n));
        }
        if self.basis.variants.is_empty() {
            return bad("at least one basis variant is required".into());
        }
        for v in &self.basis.variants {
            if v.me + v.mq == 0 || v.me + v.mq > self.n {
                return bad(format!("variant {} needs 1 <= me + mq <= n", v.label()));
            }
            v.select
                .parse::<Selection>()
                .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        }
        if let Bandwidth::Named(name) = &self.epsilon {
            if name != "auto" {
                return bad(format!("epsilon must be `auto` or a number, got `{name}`"));
            }
        }
        if let Bandwidth::Value(v) = self.epsilon {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("epsilon must be positive, got {v}"));
            }
        }
        if self.knn != 0 && self.knn < 16 {
            return bad(format!("knn must be 0 or at least 16, got {}", self.knn));
        }
        if self.system == SystemName::Circle {
            return Ok(());
        }
        if self.nv < self.spinup + 1 {
            return bad(format!(
                "nv = {} leaves no verification point after spinup = {}",
                self.nv, self.spinup
            ));
        }
        match self.obs.kind {
            ObservationKind::Gaussian
                if !(self.obs.variance > 0.0 && self.obs.variance.is_finite()) =>
            {
                return bad(format!(
                    "gaussian observations need a positive variance, got {}",
                    self.obs.variance
                ));
            }
            ObservationKind::Noiseless if self.obs.variance != 0.0 => {
                return bad("noiseless observations must have variance 0".into());
            }
            _ => {}
        }
        if let Some(e) = self.ensemble {
            if e.members < 2 {
                return bad(format!(
                    "ensemble needs at least 2 members, got {}",
                    e.members
                ));
            }
        }
        if let Some(&j) = self.trajectory_leads.iter().find(|&&j| j > self.leads) {
            return bad(format!(
                "trajectory lead {j} exceeds leads = {}",
                self.leads
            ));
        }
        self.build_system().map(|_| ())
    }

    pub fn build_system(&self) -> Result<System> {
        let system = self.system.build(self.seed, self.lorenz96)?;
        system
            .stride_for(self.tau)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(system)
    }
}

impl SystemName {
    /// The system with default parameters; `seed` drives the triad noise.
    pub fn build(self, seed: u64, l96: Lorenz96Config) -> Result<System> {
        let system = match self {
            SystemName::Lorenz63 => System::Lorenz63(Lorenz63Params::default()),
            SystemName::Lorenz96 => {
                let base = Lorenz96Params::default();
                System::Lorenz96(Lorenz96Params {
                    d: l96.d.unwrap_or(base.d),
                    forcing: l96.forcing.unwrap_or(base.forcing),
                    ..base
                })
            }
            SystemName::Triad => System::Triad(TriadParams {
                seed,
                ..TriadParams::default()
            }),
            SystemName::Ou => System::Ou(OuParams::default()),
            SystemName::Circle => {
                return Err(Error::InvalidConfig(
                    "the circle study has no dynamics".into(),
                ))
            }
        };
        system
            .validate()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(system)
    }
}

impl std::str::FromStr for SystemName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lorenz63" => Ok(SystemName::Lorenz63),
            "lorenz96" => Ok(SystemName::Lorenz96),
            "triad" => Ok(SystemName::Triad),
            "ou" => Ok(SystemName::Ou),
            "circle" => Ok(SystemName::Circle),
            _ => Err(Error::InvalidConfig(format!("unknown system `{s}`"))),
        }
    }
}

/// Forecasts and skill for one basis variant.
#[derive(Debug, Clone)]
pub struct VariantOutcome {
    pub label: String,
    pub basis: String,
    pub deficiency: usize,
    pub curve: SkillCurve,
    pub forecast: MomentForecast,
}

#[derive(Debug, Clone)]
pub struct EnsembleOutcome {
    pub curve: SkillCurve,
    pub mean: LeadTable,
    pub second: LeadTable,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub epsilon: f64,
    pub variants: Vec<VariantOutcome>,
    pub ensemble: Option<EnsembleOutcome>,
    /// `(label, |x - Q Q^T x|_2)` for the circle study.
    pub reconstruction: Vec<(String, f64)>,
    pub out_dir: PathBuf,
}

/// Seed of the observation-noise stream for an experiment seed.
pub fn obs_seed(seed: u64) -> u64 {
    launch_seed(seed, u64::MAX)
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

/// Runs the configured pipeline and writes every artifact under `out_dir`,
/// including `manifest.txt`. A failing stage is named in the error and in
/// the manifest; artifacts written before it are kept.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let mut manifest = base_manifest(cfg);
    let result = run_stages(cfg, &mut manifest);
    match &result {
        Ok(_) => manifest.set("status", "ok"),
        Err(e) => manifest.set("status", format!("failed: {e}")),
    };
    manifest.write(cfg.out_dir.join("manifest.txt"))?;
    result
}

fn base_manifest(cfg: &ExperimentConfig) -> Metadata {
    let mut m = Metadata::new();
    m.set("version", env!("CARGO_PKG_VERSION"))
        .set("system", format!("{:?}", cfg.system).to_lowercase())
        .set("n", cfg.n)
        .set("nv", cfg.nv)
        .set("tau", cfg.tau)
        .set("seed", cfg.seed)
        .set("obs_seed", obs_seed(cfg.seed))
        .set("rng", RNG_ALGORITHM)
        .set("knn", cfg.knn)
        .set("spinup", cfg.spinup)
        .set("leads", cfg.leads)
        .set("decision.renormalize", "mass rescaled to 1 after every forecast step")
        .set("decision.clip", "negative density clipped after each Bayes correction and, if nystrom_clip, at delta initialization; never during stepping")
        .set("nystrom_clip", cfg.nystrom_clip)
        .set("decision.prior", "density uniform in state space, rho_i proportional to 1/q(x_i)")
        .set("decision.nystrom", NYSTROM_FORMULA)
        .set("decision.etkf", "symmetric square root, identity observation operator, no inflation, no localization")
        .set("decision.rmse", "squared Euclidean error divided by n_dim; per-coordinate curves also written")
        .set("decision.moments", "Monte-Carlo sums over training samples only");
    m
}

fn run_stages(cfg: &ExperimentConfig, manifest: &mut Metadata) -> Result<ExperimentOutcome> {
    let out = &cfg.out_dir;
    if cfg.system == SystemName::Circle {
        return run_circle(cfg, manifest);
    }
    let system = cfg.build_system()?;
    let (train, verify) = stage(
        "generate",
        (|| {
            let all = generate(&system, cfg.n + cfg.nv, cfg.tau, cfg.seed)?;
            split_train_verify(&all, cfg.n, cfg.nv)
        })(),
    )?;
    let train = Arc::new(train);
    let obs_model = match cfg.obs.kind {
        ObservationKind::Gaussian => {
            ObservationModel::gaussian(cfg.obs.variance, obs_seed(cfg.seed))
        }
        ObservationKind::Noiseless => ObservationModel::noiseless(),
    };
    let obs = stage("generate", observe(&verify, &obs_model))?;
    stage(
        "generate",
        (|| {
            io::write_series(out.join("train.dfts"), &train)?;
            io::write_series(out.join("verify.dfts"), &verify)?;
            io::write_series(out.join("obs.dfts"), &obs)
        })(),
    )?;

    let epsilon = stage("tune", tune(cfg, &train, manifest))?;
    let op = stage(
        "build-operator",
        DiffusionOperator::build(train.clone(), epsilon, Sparsity::from_knn(cfg.knn)),
    )?;
    let bases = stage("basis", build_bases(cfg, &op, manifest))?;

    let mut variants = Vec::new();
    for (v, basis) in cfg.basis.variants.iter().zip(&bases) {
        let label = v.label();
        let prop = stage("propagator", build_propagator(basis, &train))?;
        stage(
            "propagator",
            prop.save(&out.join(format!("prop_{label}.dfm"))),
        )?;
        let (diag, col) = prop.constant_mode_defect();
        manifest.set(
            &format!("variant.{label}.constant_defect"),
            format!("{diag:e},{col:e}"),
        );
        let initial = stage(
            "init",
            initial_states(
                &op,
                basis,
                &prop,
                &obs,
                cfg.obs.variance,
                cfg.spinup,
                cfg.nystrom_clip,
            ),
        )?;
        let moments = stage("forecast", MomentProjector::new(basis, &train))?;
        let forecast = stage(
            "forecast",
            forecast_moments(&prop, &moments, &initial, cfg.leads),
        )?;
        variants.push(VariantOutcome {
            label,
            basis: basis.describe(),
            deficiency: basis.deficiency(),
            curve: SkillCurve::new(cfg.tau, Vec::new(), None, Metadata::new())?,
            forecast,
        });
    }

    let mut ensemble = match cfg.ensemble {
        Some(e) => Some(stage(
            "ensemble",
            run_ensemble(cfg, &system, &obs, e.members),
        )?),
        None => None,
    };

    stage(
        "evaluate",
        (|| {
            for v in &mut variants {
                let mean = rmse_mean(&v.forecast.mean, &verify, cfg.spinup)?;
                let second = match &ensemble {
                    Some(ens) => Some(rmse_second_moment(
                        &v.forecast.second,
                        Some(&ens.second),
                        cfg.spinup,
                    )?),
                    None => None,
                };
                let mut meta = Metadata::new();
                meta.set("basis", &v.basis)
                    .set("deficiency", v.deficiency)
                    .set("n", cfg.n)
                    .set("nv", cfg.nv)
                    .set("spinup", cfg.spinup)
                    .set(
                        "effective_count",
                        mean.iter()
                            .map(|l| l.count.to_string())
                            .collect::<Vec<_>>()
                            .join(","),
                    );
                v.curve = SkillCurve::new(cfg.tau, mean, second, meta)?;
                write_curve(out, &v.label, &v.curve)?;
                write_trajectories(out, &v.label, &v.forecast.mean, &verify, cfg)?;
            }
            if let Some(ens) = &mut ensemble {
                let mean = rmse_mean(&ens.mean, &verify, cfg.spinup)?;
                let meta = std::mem::take(&mut ens.curve.meta);
                ens.curve = SkillCurve::new(cfg.tau, mean, None, meta)?;
                write_curve(out, "ensemble", &ens.curve)?;
                write_trajectories(out, "ensemble", &ens.mean, &verify, cfg)?;
            }
            Ok(())
        })(),
    )?;

    Ok(ExperimentOutcome {
        epsilon,
        variants,
        ensemble,
        reconstruction: Vec::new(),
        out_dir: out.clone(),
    })
}

/// One initial density per observation: the Bayesian filter for
/// `variance > 0`, Nystrom delta initialization for noiseless data.
/// `nystrom_clip` only affects the latter.
pub fn initial_states(
    op: &DiffusionOperator,
    basis: &BasisSet,
    prop: &Propagator,
    obs: &TimeSeries,
    variance: f64,
    spinup: usize,
    nystrom_clip: bool,
) -> Result<Vec<DensityState>> {
    if variance > 0.0 {
        let fc = FilterConfig {
            spinup_discard: spinup,
            ..FilterConfig::gaussian(variance)?
        };
        bayesian_filter_init(op, basis, prop, obs, fc).map(|run| run.states)
    } else {
        obs.samples()
            .map(|y| nystrom_delta_init_with(op, basis, y, nystrom_clip))
            .collect()
    }
}

fn tune(cfg: &ExperimentConfig, train: &TimeSeries, manifest: &mut Metadata) -> Result<f64> {
    match cfg.epsilon {
        Bandwidth::Value(v) => {
            manifest
                .set("epsilon", format!("{v:e}"))
                .set("epsilon_source", "config");
            Ok(v)
        }
        Bandwidth::Named(_) => {
            let t = auto_bandwidth(train)?;
            manifest
                .set("epsilon", format!("{:e}", t.epsilon))
                .set("epsilon_source", "auto")
                .set("tuning_slope", t.slope)
                .set("tuning_subsample", t.subsample);
            Ok(t.epsilon)
        }
    }
}

/// One eigen solve at the largest `me`; smaller variants take prefixes.
fn build_bases(
    cfg: &ExperimentConfig,
    op: &DiffusionOperator,
    manifest: &mut Metadata,
) -> Result<Vec<BasisSet>> {
    let max_me = cfg.basis.variants.iter().map(|v| v.me).max().unwrap_or(0);
    let eigen = if max_me > 0 {
        Some(leading_eigenbasis(op, max_me)?)
    } else {
        None
    };
    let mut out = Vec::with_capacity(cfg.basis.variants.len());
    for v in &cfg.basis.variants {
        let prefix = match &eigen {
            Some(e) if v.me > 0 => Some(e.leading(v.me)?),
            _ => None,
        };
        let basis = match (prefix, v.mq) {
            (Some(p), 0) => p,
            (p, mq) => qr_mixed_basis(op, p.as_ref(), mq, &v.select.parse()?)?,
        };
        manifest
            .set(&format!("variant.{}.basis", v.label()), basis.describe())
            .set(
                &format!("variant.{}.deficiency", v.label()),
                basis.deficiency(),
            );
        out.push(basis);
    }
    Ok(out)
}

fn run_ensemble(
    cfg: &ExperimentConfig,
    system: &System,
    obs: &TimeSeries,
    members: usize,
) -> Result<EnsembleOutcome> {
    let spec = EnsembleSpec {
        obs: cfg.obs,
        members,
        spinup: cfg.spinup,
        leads: cfg.leads,
        tau: cfg.tau,
        seed: cfg.seed,
    };
    let (mean, second) = ensemble_reference(system, obs, &spec)?;
    let mut meta = Metadata::new();
    meta.set("members", members).set("spinup", cfg.spinup);
    Ok(EnsembleOutcome {
        curve: SkillCurve::new(cfg.tau, Vec::new(), None, meta)?,
        mean,
        second,
    })
}

/// Settings for [`ensemble_reference`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleSpec {
    pub obs: ObsConfig,
    pub members: usize,
    pub spinup: usize,
    pub leads: usize,
    pub tau: f64,
    pub seed: u64,
}

/// Ensemble mean and uncentered second moment, `[lead][n][coord]`, launched
/// from every verification point past spin-up. Noisy observations are
/// assimilated by ETKF cycling; noiseless ones seed a perturbed cloud around
/// the observed state. Spin-up entries are NaN.
pub fn ensemble_reference(
    system: &System,
    obs: &TimeSeries,
    spec: &EnsembleSpec,
) -> Result<(LeadTable, LeadTable)> {
    let nv = obs.len();
    let analyses: Vec<Option<Ensemble>> = match spec.obs.kind {
        ObservationKind::Gaussian => {
            let init = perturbed_init(
                obs.sample(0),
                spec.members,
                spec.obs.variance,
                launch_seed(spec.seed, 0),
            )?;
            etkf_cycle(
                system,
                &init,
                obs,
                spec.obs.variance,
                launch_seed(spec.seed, 1),
            )?
            .into_iter()
            .map(Some)
            .collect()
        }
        ObservationKind::Noiseless => (0..nv)
            .map(|n| {
                if n < spec.spinup {
                    return Ok(None);
                }
                let seed = launch_seed(spec.seed, 2 + n as u64);
                perturbed_init(obs.sample(n), spec.members, PERTURBATION_VARIANCE, seed).map(Some)
            })
            .collect::<Result<_>>()?,
    };
    let blank = vec![f64::NAN; obs.n_dim()];
    let mut mean: LeadTable = vec![vec![blank.clone(); nv]; spec.leads + 1];
    let mut second: LeadTable = mean.clone();
    for (n, analysis) in analyses.iter().enumerate() {
        // Spin-up launches never reach the metrics.
        let Some(ens) = analysis.as_ref().filter(|_| n >= spec.spinup) else {
            continue;
        };
        let traj = integrate_members(
            system,
            ens,
            spec.tau,
            spec.leads,
            launch_seed(spec.seed, 1 << 40 | n as u64),
        )?;
        for (lead, states) in traj.iter().enumerate() {
            let k = states.ncols() as f64;
            mean[lead][n] = states.row_iter().map(|r| r.sum() / k).collect();
            second[lead][n] = states
                .row_iter()
                .map(|r| r.iter().map(|v| v * v).sum::<f64>() / k)
                .collect();
        }
    }
    Ok((mean, second))
}

fn run_circle(cfg: &ExperimentConfig, manifest: &mut Metadata) -> Result<ExperimentOutcome> {
    let train = Arc::new(stage("generate", unit_circle_dataset(cfg.n))?);
    stage(
        "generate",
        io::write_series(cfg.out_dir.join("train.dfts"), &train),
    )?;
    let epsilon = stage("tune", tune(cfg, &train, manifest))?;
    let op = stage(
        "build-operator",
        DiffusionOperator::build(train.clone(), epsilon, Sparsity::from_knn(cfg.knn)),
    )?;
    let bases = stage("basis", build_bases(cfg, &op, manifest))?;
    let x = nalgebra::DMatrix::from_row_slice(train.len(), train.n_dim(), train.as_slice());
    let mut report = String::from("variant,basis,error\n");
    let mut reconstruction = Vec::new();
    for (v, basis) in cfg.basis.variants.iter().zip(&bases) {
        let err = (&x - stage("evaluate", basis.reconstruct(&x))?).norm();
        writeln!(report, "{},{},{err:e}", v.label(), basis.describe()).unwrap();
        manifest.set(
            &format!("variant.{}.reconstruction_error", v.label()),
            format!("{err:e}"),
        );
        reconstruction.push((v.label(), err));
    }
    stage(
        "evaluate",
        fs::write(cfg.out_dir.join("reconstruction.csv"), report).map_err(Error::from),
    )?;
    Ok(ExperimentOutcome {
        epsilon,
        variants: Vec::new(),
        ensemble: None,
        reconstruction,
        out_dir: cfg.out_dir.clone(),
    })
}

/// `traj_<stem>_lead<j>.csv`: `n,coord,truth,forecast` for every scored point.
fn write_trajectories(
    out: &Path,
    stem: &str,
    means: &LeadTable,
    verify: &TimeSeries,
    cfg: &ExperimentConfig,
) -> Result<()> {
    for &j in &cfg.trajectory_leads {
        let mut text = String::from("n,coord,truth,forecast\n");
        for n in cfg.spinup..verify.len().saturating_sub(j) {
            for (c, (t, f)) in verify.sample(n + j).iter().zip(&means[j][n]).enumerate() {
                writeln!(text, "{n},{c},{t:e},{f:e}").unwrap();
            }
        }
        fs::write(out.join(format!("traj_{stem}_lead{j}.csv")), text)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn l63_config(dir: &Path) -> String {
        format!(
            r#"
system = "lorenz63"
n = 600
nv = 40
tau = 0.1
seed = 3
spinup = 10
leads = 5
out_dir = "{}"
trajectory_leads = [0, 2]

[[basis.variants]]
me = 20
mq = 0

[[basis.variants]]
me = 5
mq = 15

[[basis.variants]]
me = 0
mq = 20
select = "random:4"

[obs]
kind = "gaussian"
variance = 1.0

[ensemble]
members = 20
"#,
            dir.display()
        )
    }

    #[test]
    fn config_round_trips_and_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_toml(&l63_config(dir.path())).unwrap();
        assert_eq!(cfg.epsilon, Bandwidth::Named("auto".into()));
        assert_eq!(cfg.basis.variants[0].select, "middle");
        assert_eq!(cfg.knn, 0);
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let fixed = l63_config(dir.path()).replace("seed = 3", "seed = 3\nepsilon = 0.5");
        assert_eq!(
            ExperimentConfig::from_toml(&fixed).unwrap().epsilon,
            Bandwidth::Value(0.5)
        );
    }

    #[test]
    fn degenerate_configs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let base = l63_config(dir.path());
        for bad in [
            base.replace("nv = 40", "nv = 10"),
            base.replace("seed = 3", "seed = 3\nepsilon = \"wide\""),
            base.replace("seed = 3", "seed = 3\nepsilon = -1.0"),
            base.replace("variance = 1.0", "variance = 0.0"),
            base.replace("select = \"random:4\"", "select = \"leftmost\""),
            base.replace("members = 20", "members = 1"),
            base.replace("[0, 2]", "[0, 9]"),
            base.replace("tau = 0.1", "tau = 0.015"),
            base.replace("n = 600", "n = 600\nbogus = 1"),
        ] {
            assert!(
                matches!(
                    ExperimentConfig::from_toml(&bad),
                    Err(Error::InvalidConfig(_))
                ),
                "{bad}"
            );
        }
    }

    #[test]
    fn lorenz63_run_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_toml(&l63_config(dir.path())).unwrap();
        let out = run_experiment(&cfg).unwrap();
        assert_eq!(out.variants.len(), 3);
        let ens = out.ensemble.as_ref().unwrap();
        assert_eq!(ens.curve.leads.len(), 6);
        for v in &out.variants {
            assert_eq!(v.curve.leads.len(), 6);
            assert!(v.curve.rmse_second.is_some());
            assert!(v.curve.rmse_mean.iter().all(|e| e.aggregate.is_finite()));
            for suffix in ["_mean.csv", "_second.csv", ".meta"] {
                assert!(dir.path().join(format!("{}{suffix}", v.label)).exists());
            }
            for j in [0, 2] {
                assert!(dir
                    .path()
                    .join(format!("traj_{}_lead{j}.csv", v.label))
                    .exists());
            }
            assert!(dir.path().join(format!("prop_{}.dfm", v.label)).exists());
        }
        assert!(dir.path().join("ensemble_mean.csv").exists());
        let m = Metadata::read(dir.path().join("manifest.txt")).unwrap();
        assert_eq!(m.get("status"), Some("ok"));
        assert_eq!(m.get("rng"), Some(RNG_ALGORITHM));
        assert_eq!(m.get("seed"), Some("3"));
        assert!(m.get("epsilon").unwrap().parse::<f64>().unwrap() > 0.0);
        assert_eq!(m.get("variant.me5_mq15.deficiency"), Some("0"));
        // Lead 0 of a filtered L63 run beats the raw observation error.
    }

    #[test]
    fn effective_counts_shrink_with_lead() {
        let dir = tempfile::tempdir().unwrap();
        let text = l63_config(dir.path()).replace("[ensemble]\nmembers = 20\n", "");
        let out = run_experiment(&ExperimentConfig::from_toml(&text).unwrap()).unwrap();
        assert!(out.ensemble.is_none());
        let counts: Vec<usize> = out.variants[0]
            .curve
            .rmse_mean
            .iter()
            .map(|e| e.count)
            .collect();
        assert_eq!(counts, vec![30, 29, 28, 27, 26, 25]);
        assert!(out.variants[0].curve.rmse_second.is_none());
    }

    #[test]
    fn failing_stage_is_named_and_partial_artifacts_kept() {
        let dir = tempfile::tempdir().unwrap();
        // Every observation is out of support of so narrow a kernel.
        let text = l63_config(dir.path()).replace("seed = 3", "seed = 3\nepsilon = 1e-9");
        let err = run_experiment(&ExperimentConfig::from_toml(&text).unwrap()).unwrap_err();
        let Error::Stage { stage, .. } = err else {
            panic!("unexpected {err}")
        };
        assert_eq!(stage, "init");
        assert!(dir.path().join("train.dfts").exists());
        assert!(dir.path().join("prop_me20_mq0.dfm").exists());
        let m = Metadata::read(dir.path().join("manifest.txt")).unwrap();
        assert!(m.get("status").unwrap().contains("`init`"));
        assert!(m.get("variant.me20_mq0.basis").is_some());
    }

    #[test]
    fn circle_config_reports_reconstruction() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            "system = \"circle\"\nn = 1000\ntau = 1.0\nout_dir = \"{}\"\n[[basis.variants]]\nme = 20\nmq = 380\n",
            dir.path().display()
        );
        let out = run_experiment(&ExperimentConfig::from_toml(&text).unwrap()).unwrap();
        assert_eq!(out.reconstruction.len(), 1);
        assert!(
            out.reconstruction[0].1 <= 1e-4,
            "{:e}",
            out.reconstruction[0].1
        );
        let report = fs::read_to_string(dir.path().join("reconstruction.csv")).unwrap();
        assert!(report.starts_with("variant,basis,error\nme20_mq380,"));
    }
}
