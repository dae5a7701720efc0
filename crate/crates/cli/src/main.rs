use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use dfcast::experiment::{
    ensemble_reference, initial_states, obs_seed, EnsembleSpec, Lorenz96Config, ObsConfig,
    SystemName,
};
use dfcast::io;
use dfcast::metrics::{bench_basis, bench_csv};
use dfcast::nalgebra::DMatrix;
use dfcast::{
    auto_bandwidth, build_propagator, generate, leading_eigenbasis, observe, qr_mixed_basis,
    run_experiment, split_train_verify, unit_circle_dataset, BasisSet, DiffusionOperator, Error,
    ExperimentConfig, ObservationKind, ObservationModel, Propagator, Result, Selection, Sparsity,
};

#[derive(Parser)]
#[command(
    name = "dfcast",
    version,
    about = "Diffusion-forecast density propagation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate a system and write train/verify trajectories (and observations).
    Generate {
        #[arg(long)]
        system: SystemName,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        nv: usize,
        #[arg(long, default_value_t = 0.1)]
        tau: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write `obs.dfts` from the verification series; 0 is noiseless.
        #[arg(long)]
        obs_var: Option<f64>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the normalized kernel operator from a training series.
    BuildOperator {
        #[arg(long = "in")]
        input: PathBuf,
        /// `auto` or a positive value.
        #[arg(long, default_value = "auto")]
        epsilon: String,
        #[arg(long, default_value_t = 0)]
        knn: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Eigen, QR, or mixed basis from a stored operator.
    Basis {
        #[arg(long)]
        op: PathBuf,
        #[arg(long, default_value_t = 0)]
        me: usize,
        #[arg(long, default_value_t = 0)]
        mq: usize,
        #[arg(long, default_value = "middle")]
        select: Selection,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the shift-operator matrix on a basis.
    Propagator {
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Initial densities for every observation, stored as an `N_V x M` matrix.
    FilterInit {
        #[arg(long)]
        op: PathBuf,
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        prop: PathBuf,
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        obs_var: f64,
        #[arg(long, default_value_t = 10)]
        spinup: usize,
        /// Keep negative lobes of Nystrom delta densities.
        #[arg(long)]
        no_clip: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte-Carlo reference moments launched from every observation.
    Ensemble {
        #[arg(long)]
        system: SystemName,
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        obs_var: f64,
        #[arg(long, default_value_t = 1000)]
        members: usize,
        #[arg(long)]
        leads: usize,
        #[arg(long, default_value_t = 10)]
        spinup: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a full experiment from a TOML config.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Time QR against the leading eigensolver.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "5000")]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "250,500")]
        ms: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = format!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                let _ = write!(msg, "\n  caused by: {s}");
                source = s.source();
            }
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate {
            system,
            n,
            nv,
            tau,
            seed,
            obs_var,
            out,
        } => {
            fs::create_dir_all(&out)?;
            if system == SystemName::Circle {
                io::write_series(out.join("train.dfts"), &unit_circle_dataset(n)?)?;
                return Ok(());
            }
            let sys = system.build(seed, Lorenz96Config::default())?;
            let all = generate(&sys, n + nv, tau, seed)?;
            if nv == 0 {
                return io::write_series(out.join("train.dfts"), &all);
            }
            let (train, verify) = split_train_verify(&all, n, nv)?;
            io::write_series(out.join("train.dfts"), &train)?;
            io::write_series(out.join("verify.dfts"), &verify)?;
            if let Some(var) = obs_var {
                let model = if var > 0.0 {
                    ObservationModel::gaussian(var, obs_seed(seed))
                } else {
                    ObservationModel::noiseless()
                };
                io::write_series(out.join("obs.dfts"), &observe(&verify, &model)?)?;
            }
            log::info!(
                "wrote {n} training and {nv} verification samples to {}",
                out.display()
            );
            Ok(())
        }
        Command::BuildOperator {
            input,
            epsilon,
            knn,
            out,
        } => {
            let train = io::read_series(&input)?;
            let eps = if epsilon == "auto" {
                let t = auto_bandwidth(&train)?;
                log::info!("tuned epsilon {:e} (slope {:.3})", t.epsilon, t.slope);
                t.epsilon
            } else {
                epsilon
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad epsilon `{epsilon}`")))?
            };
            let op = DiffusionOperator::build(Arc::new(train), eps, Sparsity::from_knn(knn))?;
            op.save(&out, &input.canonicalize()?)
        }
        Command::Basis {
            op,
            me,
            mq,
            select,
            out,
        } => {
            let op = DiffusionOperator::load(&op)?;
            let eigen = if me > 0 {
                Some(leading_eigenbasis(&op, me)?)
            } else {
                None
            };
            let basis = match (eigen, mq) {
                (Some(e), 0) => e,
                (e, mq) => qr_mixed_basis(&op, e.as_ref(), mq, &select)?,
            };
            log::info!("{} (deficiency {})", basis.describe(), basis.deficiency());
            basis.save(&out)
        }
        Command::Propagator { basis, train, out } => {
            let basis = BasisSet::load(&basis)?;
            let prop = build_propagator(&basis, &io::read_series(train)?)?;
            prop.save(&out)
        }
        Command::FilterInit {
            op,
            basis,
            prop,
            obs,
            obs_var,
            spinup,
            no_clip,
            out,
        } => {
            let op = DiffusionOperator::load(&op)?;
            let basis = BasisSet::load(&basis)?;
            let prop = Propagator::load(&prop)?;
            let states = initial_states(
                &op,
                &basis,
                &prop,
                &io::read_series(obs)?,
                obs_var,
                spinup,
                !no_clip,
            )?;
            let m = basis.m();
            let matrix = DMatrix::from_fn(states.len(), m, |n, k| states[n].coeffs[k]);
            io::write_matrix(&out, &matrix)
        }
        Command::Ensemble {
            system,
            obs,
            obs_var,
            members,
            leads,
            spinup,
            seed,
            out,
        } => {
            let obs = io::read_series(obs)?;
            let sys = system.build(seed, Lorenz96Config::default())?;
            let kind = if obs_var > 0.0 {
                ObservationKind::Gaussian
            } else {
                ObservationKind::Noiseless
            };
            let spec = EnsembleSpec {
                obs: ObsConfig {
                    kind,
                    variance: obs_var,
                },
                members,
                spinup,
                leads,
                tau: obs.tau(),
                seed,
            };
            let (mean, second) = ensemble_reference(&sys, &obs, &spec)?;
            write_ensemble_csv(&out, &mean, &second, spinup)
        }
        Command::Evaluate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let outcome = run_experiment(&cfg)?;
            for v in &outcome.variants {
                let last = v.curve.rmse_mean.last().map_or(f64::NAN, |e| e.aggregate);
                println!(
                    "{}: lead0 {:.4}, final {:.4}",
                    v.label, v.curve.rmse_mean[0].aggregate, last
                );
            }
            for (label, err) in &outcome.reconstruction {
                println!("{label}: reconstruction error {err:e}");
            }
            println!("artifacts in {}", outcome.out_dir.display());
            Ok(())
        }
        Command::Bench {
            sizes,
            ms,
            trials,
            seed,
            out,
        } => {
            let csv = bench_csv(&bench_basis(&sizes, &ms, trials, seed)?);
            match out {
                Some(path) => fs::write(path, csv).map_err(Error::from),
                None => {
                    print!("{csv}");
                    Ok(())
                }
            }
        }
    }
}

fn write_ensemble_csv(
    path: &Path,
    mean: &[Vec<Vec<f64>>],
    second: &[Vec<Vec<f64>>],
    spinup: usize,
) -> Result<()> {
    let mut text = String::from("n,lead,coord,mean,second\n");
    for (lead, (m, s)) in mean.iter().zip(second).enumerate() {
        for (n, (mv, sv)) in m.iter().zip(s).enumerate().skip(spinup) {
            for (c, (a, b)) in mv.iter().zip(sv).enumerate() {
                let _ = writeln!(text, "{n},{lead},{c},{a:e},{b:e}");
            }
        }
    }
    fs::write(path, text)?;
    Ok(())
}
