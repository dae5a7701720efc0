//! Forecast skill over verification points, CSV output, and basis timing.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use crate::basis::{leading_eigenbasis, qr_mixed_basis, Selection};
use crate::datasets::{generate, Lorenz96Params, System, TimeSeries};
use crate::error::{Error, Result};
use crate::io::Metadata;
use crate::kernel::{auto_bandwidth, DiffusionOperator, Sparsity};

/// Moments indexed `[lead][verification point][coordinate]`.
pub type LeadTable = Vec<Vec<Vec<f64>>>;

/// RMSE at one lead.
#[derive(Debug, Clone, PartialEq)]
pub struct LeadError {
    pub per_coord: Vec<f64>,
    /// `sqrt(mean_c per_coord[c]^2)`.
    pub aggregate: f64,
    /// Verification points that entered the average.
    pub count: usize,
}

fn lead_error(sq_sums: Vec<f64>, count: usize) -> LeadError {
    let per_coord: Vec<f64> = sq_sums.iter().map(|s| (s / count as f64).sqrt()).collect();
    let aggregate = (sq_sums.iter().sum::<f64>() / (count * sq_sums.len()) as f64).sqrt();
    LeadError {
        per_coord,
        aggregate,
        count,
    }
}

/// Mean-forecast RMSE against the truth shifted by the lead.
///
/// Point `n` at lead `j` is compared with `truth[n + j]`; points past the
/// end of the series are dropped and the remaining count is recorded.
/// Points `n < spinup` never contribute.
pub fn rmse_mean(
    forecast_means: &LeadTable,
    truth: &TimeSeries,
    spinup: usize,
) -> Result<Vec<LeadError>> {
    let n_dim = truth.n_dim();
    let mut out = Vec::with_capacity(forecast_means.len());
    for (lead, points) in forecast_means.iter().enumerate() {
        let mut sq = vec![0.0; n_dim];
        let mut count = 0;
        for (n, f) in points.iter().enumerate().skip(spinup) {
            if n + lead >= truth.len() {
                break;
            }
            if f.len() != n_dim {
                return Err(Error::DimensionMismatch {
                    expected: n_dim,
                    got: f.len(),
                });
            }
            for (c, (a, b)) in f.iter().zip(truth.sample(n + lead)).enumerate() {
                sq[c] += (a - b).powi(2);
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::InsufficientLength {
                required: spinup + lead + 1,
                available: truth.len().min(points.len()),
            });
        }
        out.push(lead_error(sq, count));
    }
    Ok(out)
}

/// Second-moment RMSE against a reference forecast at the same
/// `(lead, point)` entries.
pub fn rmse_second_moment(
    forecast_m2: &LeadTable,
    reference_m2: Option<&LeadTable>,
    spinup: usize,
) -> Result<Vec<LeadError>> {
    let reference = reference_m2.ok_or(Error::MissingReference)?;
    if reference.len() < forecast_m2.len() {
        return Err(Error::InsufficientLength {
            required: forecast_m2.len(),
            available: reference.len(),
        });
    }
    let mut out = Vec::with_capacity(forecast_m2.len());
    for (points, refs) in forecast_m2.iter().zip(reference) {
        let n_dim = points.first().map_or(0, Vec::len);
        let mut sq = vec![0.0; n_dim];
        let mut count = 0;
        for (f, r) in points.iter().zip(refs).skip(spinup) {
            if f.len() != n_dim || r.len() != n_dim {
                return Err(Error::DimensionMismatch {
                    expected: n_dim,
                    got: if f.len() != n_dim { f.len() } else { r.len() },
                });
            }
            for (c, (a, b)) in f.iter().zip(r).enumerate() {
                sq[c] += (a - b).powi(2);
            }
            count += 1;
        }
        if count == 0 || n_dim == 0 {
            return Err(Error::InsufficientLength {
                required: spinup + 1,
                available: points.len().min(refs.len()),
            });
        }
        out.push(lead_error(sq, count));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkillCurve {
    /// `j * tau`.
    pub leads: Vec<f64>,
    pub rmse_mean: Vec<LeadError>,
    pub rmse_second: Option<Vec<LeadError>>,
    pub meta: Metadata,
}

impl SkillCurve {
    pub fn new(
        tau: f64,
        rmse_mean: Vec<LeadError>,
        rmse_second: Option<Vec<LeadError>>,
        meta: Metadata,
    ) -> Result<Self> {
        if let Some(second) = &rmse_second {
            if second.len() != rmse_mean.len() {
                return Err(Error::DimensionMismatch {
                    expected: rmse_mean.len(),
                    got: second.len(),
                });
            }
        }
        let leads = (0..rmse_mean.len()).map(|j| j as f64 * tau).collect();
        Ok(SkillCurve {
            leads,
            rmse_mean,
            rmse_second,
            meta,
        })
    }

    /// Index of the lead closest to `t`.
    pub fn lead_index(&self, t: f64) -> Option<usize> {
        (0..self.leads.len()).min_by(|&a, &b| {
            (self.leads[a] - t)
                .abs()
                .total_cmp(&(self.leads[b] - t).abs())
        })
    }

    pub fn mean_at(&self, t: f64) -> Option<f64> {
        self.lead_index(t).map(|j| self.rmse_mean[j].aggregate)
    }
}

/// `lead,coord,value` rows; `coord` is a coordinate index or `all` for the
/// aggregate.
pub fn curve_csv(leads: &[f64], errors: &[LeadError]) -> String {
    let mut s = String::from("lead,coord,value\n");
    for (t, e) in leads.iter().zip(errors) {
        for (c, v) in e.per_coord.iter().enumerate() {
            let _ = writeln!(s, "{t},{c},{v:e}");
        }
        let _ = writeln!(s, "{t},all,{:e}", e.aggregate);
    }
    s
}

/// Writes `<stem>_mean.csv`, `<stem>_second.csv` (when present) and
/// `<stem>.meta` into `dir`.
pub fn write_curve(dir: &Path, stem: &str, curve: &SkillCurve) -> Result<()> {
    std::fs::write(
        dir.join(format!("{stem}_mean.csv")),
        curve_csv(&curve.leads, &curve.rmse_mean),
    )?;
    if let Some(second) = &curve.rmse_second {
        std::fs::write(
            dir.join(format!("{stem}_second.csv")),
            curve_csv(&curve.leads, second),
        )?;
    }
    curve.meta.write(dir.join(format!("{stem}.meta")))
}

/// Reads a `lead,coord,value` file back into per-lead errors.
pub fn read_curve_csv(text: &str) -> Result<(Vec<f64>, Vec<LeadError>)> {
    let mut lines = text.lines();
    if lines.next() != Some("lead,coord,value") {
        return Err(Error::Format("missing `lead,coord,value` header".into()));
    }
    let mut leads: Vec<f64> = Vec::new();
    let mut errors: Vec<LeadError> = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let mut parts = line.split(',');
        let (Some(t), Some(c), Some(v), None) =
            (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::Format(format!("bad row `{line}`")));
        };
        let bad = || Error::Format(format!("bad row `{line}`"));
        let t: f64 = t.parse().map_err(|_| bad())?;
        let v: f64 = v.parse().map_err(|_| bad())?;
        if leads.last() != Some(&t) {
            leads.push(t);
            errors.push(LeadError {
                per_coord: Vec::new(),
                aggregate: f64::NAN,
                count: 0,
            });
        }
        let e = errors.last_mut().expect("pushed above");
        if c == "all" {
            e.aggregate = v;
        } else {
            e.per_coord.push(v);
        }
    }
    Ok((leads, errors))
}

/// Median wall-clock seconds for one `(N, M)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub m: usize,
    pub qr_seconds: f64,
    pub eig_seconds: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Times a QR basis of `M` randomly selected `T` columns against the `M`
/// leading eigenvectors, on one operator per `N` built from Lorenz-96
/// samples.
pub fn bench_basis(ns: &[usize], ms: &[usize], trials: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if trials == 0 {
        return Err(Error::param("need at least one trial"));
    }
    let system = System::Lorenz96(Lorenz96Params::default());
    let mut rows = Vec::new();
    for &n in ns {
        let series = Arc::new(generate(&system, n, 0.05, seed)?);
        let eps = auto_bandwidth(&series)?.epsilon;
        let op = DiffusionOperator::build(series, eps, Sparsity::Dense)?;
        for &m in ms {
            let mut qr = Vec::with_capacity(trials);
            let mut eig = Vec::with_capacity(trials);
            for t in 0..trials {
                let start = Instant::now();
                qr_mixed_basis(
                    &op,
                    None,
                    m,
                    &Selection::Random(seed.wrapping_add(t as u64)),
                )?;
                qr.push(start.elapsed().as_secs_f64());
                let start = Instant::now();
                leading_eigenbasis(&op, m)?;
                eig.push(start.elapsed().as_secs_f64());
            }
            rows.push(BenchRow {
                n,
                m,
                qr_seconds: median(qr),
                eig_seconds: median(eig),
            });
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("n,m,qr_seconds,eig_seconds\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:e},{:e}", r.n, r.m, r.qr_seconds, r.eig_seconds);
    }
    s
}
