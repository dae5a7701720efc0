//! Diffusion-maps operators over a training series.
//!
//! With `K_ij = exp(-|x_i - x_j|^2 / (4 eps))`, `q_i = (1/N) sum_j K_ij`,
//! `Khat_ij = K_ij / sqrt(q_i q_j)` and `d_i = (1/N) sum_j Khat_ij`, the
//! operator exposes
//!
//! * `T_ij = Khat_ij / (N d_i)`, row-stochastic, and
//! * `That_ij = Khat_ij / (N sqrt(d_i d_j))`, its symmetric conjugate
//!   `D^{1/2} T D^{-1/2}`.
//!
//! Only the symmetric `Khat` is stored, densely or as a symmetrized
//! k-nearest-neighbour CSR matrix; `T` and `That` are derived on demand.

use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::datasets::{squared_distance, TimeSeries};
use crate::error::{Error, Result};
use crate::io::{self, Metadata};
use crate::linalg::{CsrMatrix, SymmetricOperator};

/// Normalization exponent of the density correction.
pub const ALPHA: f64 = 0.5;

/// Smallest admissible `q`; anything below counts as underflow.
pub const Q_FLOOR: f64 = 1e-300;

/// Points used by [`tune_bandwidth`]; longer series are strided down.
pub const TUNING_SUBSAMPLE: usize = 2000;

/// Slopes at or below this value mean the kernel sum never leaves a plateau.
pub const MIN_TUNING_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sparsity {
    Dense,
    /// Keep `K_ij` when either point is among the other's `k` nearest
    /// neighbours (itself included).
    Knn(usize),
}

impl Sparsity {
    /// `0` means dense.
    pub fn from_knn(k: usize) -> Self {
        if k == 0 {
            Sparsity::Dense
        } else {
            Sparsity::Knn(k)
        }
    }

    pub fn knn(&self) -> usize {
        match self {
            Sparsity::Dense => 0,
            Sparsity::Knn(k) => *k,
        }
    }
}

#[derive(Debug, Clone)]
enum Storage {
    Dense(DMatrix<f64>),
    Sparse(CsrMatrix),
}

#[derive(Debug, Clone)]
pub struct DiffusionOperator {
    epsilon: f64,
    q: Vec<f64>,
    d: Vec<f64>,
    khat: Storage,
    sparsity: Sparsity,
    train: Arc<TimeSeries>,
}

fn kernel(sq_dist: f64, epsilon: f64) -> f64 {
    (-sq_dist / (4.0 * epsilon)).exp()
}

/// Raw Gaussian kernel matrix `K`, before any normalization.
pub fn kernel_matrix(series: &TimeSeries, epsilon: f64) -> DMatrix<f64> {
    let n = series.len();
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        let xj = series.sample(j);
        for i in j..n {
            let v = kernel(squared_distance(series.sample(i), xj), epsilon);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Indices of the `k` nearest samples to `y` (ties by index), ascending.
fn nearest(series: &TimeSeries, y: &[f64], k: usize, dist: &mut Vec<(f64, u32)>) -> Vec<u32> {
    dist.clear();
    dist.extend(
        series
            .samples()
            .enumerate()
            .map(|(j, x)| (squared_distance(x, y), j as u32)),
    );
    let k = k.min(dist.len());
    if k < dist.len() {
        dist.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).expect("finite distances"));
    }
    let mut idx: Vec<u32> = dist[..k].iter().map(|&(_, j)| j).collect();
    idx.sort_unstable();
    idx
}

impl DiffusionOperator {
    pub fn build(series: Arc<TimeSeries>, epsilon: f64, sparsity: Sparsity) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::param(format!(
                "bandwidth must be positive, got {epsilon}"
            )));
        }
        let n = series.len();
        if n < 3 {
            return Err(Error::InsufficientLength {
                required: 3,
                available: n,
            });
        }
        if let Sparsity::Knn(k) = sparsity {
            if k < 16 {
                return Err(Error::param(format!("knn needs k >= 16, got {k}")));
            }
        }
        let nf = n as f64;
        let (q, d, khat) = match sparsity {
            Sparsity::Dense => {
                let mut m = kernel_matrix(&series, epsilon);
                let q: Vec<f64> = (0..n)
                    .map(|i| m.column(i).iter().sum::<f64>() / nf)
                    .collect();
                let sq = check_q(&q)?;
                for j in 0..n {
                    for i in 0..n {
                        m[(i, j)] /= sq[i] * sq[j];
                    }
                }
                let d = (0..n)
                    .map(|i| m.column(i).iter().sum::<f64>() / nf)
                    .collect();
                (q, d, Storage::Dense(m))
            }
            Sparsity::Knn(k) => {
                let mut scratch = Vec::with_capacity(n);
                let lists: Vec<Vec<u32>> = series
                    .samples()
                    .map(|x| nearest(&series, x, k, &mut scratch))
                    .collect();
                let mut rows: Vec<Vec<u32>> = lists.clone();
                for (i, list) in lists.iter().enumerate() {
                    for &j in list {
                        rows[j as usize].push(i as u32);
                    }
                }
                let rows: Vec<Vec<(u32, f64)>> = rows
                    .into_iter()
                    .enumerate()
                    .map(|(i, mut cols)| {
                        cols.sort_unstable();
                        cols.dedup();
                        let xi = series.sample(i);
                        cols.into_iter()
                            .map(|j| {
                                (
                                    j,
                                    kernel(
                                        squared_distance(series.sample(j as usize), xi),
                                        epsilon,
                                    ),
                                )
                            })
                            .collect()
                    })
                    .collect();
                let mut m = CsrMatrix::from_rows(rows);
                let q: Vec<f64> = (0..n)
                    .map(|i| m.row(i).1.iter().sum::<f64>() / nf)
                    .collect();
                let sq = check_q(&q)?;
                for i in 0..n {
                    let (idx, val) = m.row_mut(i);
                    for (&j, v) in idx.iter().zip(val.iter_mut()) {
                        *v /= sq[j as usize] * sq[i];
                    }
                }
                let d = (0..n)
                    .map(|i| m.row(i).1.iter().sum::<f64>() / nf)
                    .collect();
                (q, d, Storage::Sparse(m))
            }
        };
        Ok(DiffusionOperator {
            epsilon,
            q,
            d,
            khat,
            sparsity,
            train: series,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn alpha(&self) -> f64 {
        ALPHA
    }

    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn q_values(&self) -> &[f64] {
        &self.q
    }

    pub fn d_values(&self) -> &[f64] {
        &self.d
    }

    pub fn sparsity(&self) -> Sparsity {
        self.sparsity
    }

    pub fn training(&self) -> &Arc<TimeSeries> {
        &self.train
    }

    /// Stored entries of `Khat` (all `N^2` when dense).
    pub fn nnz(&self) -> usize {
        match &self.khat {
            Storage::Dense(m) => m.len(),
            Storage::Sparse(m) => m.nnz(),
        }
    }

    fn khat_dense(&self) -> DMatrix<f64> {
        match &self.khat {
            Storage::Dense(m) => m.clone(),
            Storage::Sparse(m) => m.to_dense(),
        }
    }

    /// Dense `T`.
    pub fn t_matrix(&self) -> DMatrix<f64> {
        let nf = self.n() as f64;
        let mut m = self.khat_dense();
        for j in 0..self.n() {
            for i in 0..self.n() {
                m[(i, j)] /= nf * self.d[i];
            }
        }
        m
    }

    /// Dense `That`.
    pub fn t_hat_matrix(&self) -> DMatrix<f64> {
        let nf = self.n() as f64;
        let sd: Vec<f64> = self.d.iter().map(|v| v.sqrt()).collect();
        let mut m = self.khat_dense();
        for j in 0..self.n() {
            for i in 0..self.n() {
                m[(i, j)] /= nf * sd[i] * sd[j];
            }
        }
        m
    }

    /// Row `i` of `T`.
    pub fn t_row(&self, i: usize) -> Vec<f64> {
        let nf = self.n() as f64;
        let mut row = vec![0.0; self.n()];
        match &self.khat {
            Storage::Dense(m) => {
                for (j, v) in m.column(i).iter().enumerate() {
                    row[j] = v / (nf * self.d[i]);
                }
            }
            Storage::Sparse(m) => {
                let (idx, val) = m.row(i);
                for (&j, v) in idx.iter().zip(val) {
                    row[j as usize] = v / (nf * self.d[i]);
                }
            }
        }
        row
    }

    /// The selected columns of `T`, in the given order.
    pub fn t_columns(&self, cols: &[usize]) -> DMatrix<f64> {
        let n = self.n();
        let nf = n as f64;
        let mut out = DMatrix::zeros(n, cols.len());
        for (c, &j) in cols.iter().enumerate() {
            let mut col = out.column_mut(c);
            // T_ij = Khat_ji / (N d_i) by symmetry of Khat.
            match &self.khat {
                Storage::Dense(m) => {
                    for (i, v) in m.column(j).iter().enumerate() {
                        col[i] = v / (nf * self.d[i]);
                    }
                }
                Storage::Sparse(m) => {
                    let (idx, val) = m.row(j);
                    for (&i, v) in idx.iter().zip(val) {
                        col[i as usize] = v / (nf * self.d[i as usize]);
                    }
                }
            }
        }
        out
    }

    fn khat_mul(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.khat {
            Storage::Dense(m) => m * x,
            Storage::Sparse(m) => m.mul_dense(x),
        }
    }

    /// `T X` for a block of vectors.
    pub fn apply_t(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let nf = self.n() as f64;
        let mut y = self.khat_mul(x);
        for (i, mut row) in y.row_iter_mut().enumerate() {
            row /= nf * self.d[i];
        }
        y
    }

    /// `That X` for a block of vectors.
    pub fn apply_t_hat(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let nf = self.n() as f64;
        let sd: Vec<f64> = self.d.iter().map(|v| v.sqrt()).collect();
        let mut xs = x.clone();
        for (i, mut row) in xs.row_iter_mut().enumerate() {
            row /= sd[i];
        }
        let mut y = self.khat_mul(&xs);
        for (i, mut row) in y.row_iter_mut().enumerate() {
            row /= nf * sd[i];
        }
        y
    }

    /// Out-of-sample row `T(y, x_i)`, computed with the same bandwidth and
    /// normalization as the training matrix. Operators built with `knn(k)`
    /// keep only the `k` nearest training points of `y`.
    pub fn kernel_row(&self, y: &[f64]) -> Result<Vec<f64>> {
        let train = &self.train;
        if y.len() != train.n_dim() {
            return Err(Error::DimensionMismatch {
                expected: train.n_dim(),
                got: y.len(),
            });
        }
        let n = self.n();
        let nf = n as f64;
        let support: Vec<usize> = match self.sparsity {
            Sparsity::Dense => (0..n).collect(),
            Sparsity::Knn(k) => nearest(train, y, k, &mut Vec::with_capacity(n))
                .into_iter()
                .map(|j| j as usize)
                .collect(),
        };
        let mut row = vec![0.0; n];
        let mut q_y = 0.0;
        for &j in &support {
            let v = kernel(squared_distance(train.sample(j), y), self.epsilon);
            row[j] = v;
            q_y += v;
        }
        q_y /= nf;
        if !(q_y >= Q_FLOOR) {
            return Err(Error::OutOfSupport);
        }
        let sq_y = q_y.sqrt();
        let mut d_y = 0.0;
        for &j in &support {
            row[j] /= sq_y * self.q[j].sqrt();
            d_y += row[j];
        }
        d_y /= nf;
        for &j in &support {
            row[j] /= nf * d_y;
        }
        Ok(row)
    }

    /// Writes dense `T` to `path`, `q` and `d` to `path.q` / `path.d`, and
    /// the build parameters to `path.meta`. `train_path` is recorded so the
    /// operator can be rebuilt by [`DiffusionOperator::load`].
    pub fn save(&self, path: &Path, train_path: &Path) -> Result<()> {
        io::write_matrix(path, &self.t_matrix())?;
        io::write_vector(io::sidecar(path, "q"), &self.q)?;
        io::write_vector(io::sidecar(path, "d"), &self.d)?;
        let mut meta = Metadata::new();
        meta.set("kind", "diffusion-operator")
            .set("epsilon", format!("{:e}", self.epsilon))
            .set("alpha", ALPHA)
            .set("knn", self.sparsity.knn())
            .set("n", self.n())
            .set("train", train_path.display());
        meta.write(io::sidecar(path, "meta"))
    }

    /// Rebuilds the operator from the recorded training series and bandwidth.
    pub fn load(path: &Path) -> Result<Self> {
        let meta = Metadata::read(io::sidecar(path, "meta"))?;
        let train = io::read_series(meta.require("train")?)?;
        let op = DiffusionOperator::build(
            Arc::new(train),
            meta.parse("epsilon")?,
            Sparsity::from_knn(meta.parse("knn")?),
        )?;
        let stored_q = io::read_vector(io::sidecar(path, "q"))?;
        if stored_q.len() != op.n()
            || stored_q
                .iter()
                .zip(&op.q)
                .any(|(a, b)| (a - b).abs() > 1e-12 * b.abs())
        {
            return Err(Error::Format(
                "stored density estimates do not match the training series".into(),
            ));
        }
        Ok(op)
    }
}

fn check_q(q: &[f64]) -> Result<Vec<f64>> {
    if let Some(index) = q.iter().position(|&v| !(v >= Q_FLOOR)) {
        return Err(Error::BandwidthTooSmall { index });
    }
    Ok(q.iter().map(|v| v.sqrt()).collect())
}

/// `That` as an operator for iterative eigensolvers.
pub struct SymmetricView<'a>(pub &'a DiffusionOperator);

impl SymmetricOperator for SymmetricView<'_> {
    fn dim(&self) -> usize {
        self.0.n()
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.0.apply_t_hat(x)
    }
}

/// Outcome of the bandwidth search.
#[derive(Debug, Clone, PartialEq)]
pub struct Tuning {
    pub epsilon: f64,
    /// Log-log slope at the selected bandwidth.
    pub slope: f64,
    pub grid: Vec<f64>,
    pub slopes: Vec<f64>,
    /// Points actually used after striding.
    pub subsample: usize,
}

fn tuning_points(series: &TimeSeries) -> Result<TimeSeries> {
    let step = series.len().div_ceil(TUNING_SUBSAMPLE);
    series.strided(step)
}

fn pair_distances(series: &TimeSeries) -> Vec<f64> {
    let n = series.len();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push(squared_distance(series.sample(i), series.sample(j)));
        }
    }
    out
}

/// `median(|x_i - x_j|^2) * 2^k` for `k = -30..=30`, over the tuning subsample.
pub fn default_grid(series: &TimeSeries) -> Result<Vec<f64>> {
    let pts = tuning_points(series)?;
    let mut dist = pair_distances(&pts);
    let mid = dist.len() / 2;
    let (_, median, _) =
        dist.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).expect("finite distances"));
    let mut scale = *median;
    if scale <= 0.0 {
        // More than half the pairs coincide; fall back to the largest distance.
        scale = dist.iter().copied().fold(0.0, f64::max);
    }
    if scale <= 0.0 {
        return Err(Error::TuningFailed { max_slope: 0.0 });
    }
    Ok((-30..=30).map(|k| scale * 2f64.powi(k)).collect())
}

/// `S(eps) = (1/N^2) sum_ij exp(-|x_i - x_j|^2 / (4 eps))` from the
/// off-diagonal pair distances of `n` points.
fn kernel_sum(pairs: &[f64], n: usize, epsilon: f64) -> f64 {
    let off: f64 = pairs.iter().map(|&d| kernel(d, epsilon)).sum();
    (n as f64 + 2.0 * off) / (n * n) as f64
}

/// Picks the grid bandwidth with the steepest `d log S / d log eps`,
/// preferring the smaller bandwidth on ties.
pub fn tune_bandwidth(series: &TimeSeries, grid: &[f64]) -> Result<Tuning> {
    if grid.len() < 8 {
        return Err(Error::param(format!(
            "bandwidth grid needs at least 8 points, got {}",
            grid.len()
        )));
    }
    if grid.iter().any(|&e| !(e > 0.0 && e.is_finite())) || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::param(
            "bandwidth grid must be positive and strictly increasing",
        ));
    }
    if grid[grid.len() - 1] / grid[0] < 1e6 {
        return Err(Error::param("bandwidth grid must span at least 6 decades"));
    }
    let pts = tuning_points(series)?;
    let pairs = pair_distances(&pts);
    let log_s: Vec<f64> = grid
        .iter()
        .map(|&e| kernel_sum(&pairs, pts.len(), e).ln())
        .collect();
    let log_e: Vec<f64> = grid.iter().map(|e| e.ln()).collect();
    let last = grid.len() - 1;
    let slopes: Vec<f64> = (0..grid.len())
        .map(|k| {
            let (a, b) = (k.saturating_sub(1), (k + 1).min(last));
            (log_s[b] - log_s[a]) / (log_e[b] - log_e[a])
        })
        .collect();
    let mut best = 0;
    for k in 1..slopes.len() {
        if slopes[k] > slopes[best] {
            best = k;
        }
    }
    if !(slopes[best] > MIN_TUNING_SLOPE) {
        return Err(Error::TuningFailed {
            max_slope: slopes[best],
        });
    }
    Ok(Tuning {
        epsilon: grid[best],
        slope: slopes[best],
        grid: grid.to_vec(),
        slopes,
        subsample: pts.len(),
    })
}

/// Tunes over [`default_grid`].
pub fn auto_bandwidth(series: &TimeSeries) -> Result<Tuning> {
    tune_bandwidth(series, &default_grid(series)?)
}
