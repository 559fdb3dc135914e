//! Spatial covariates: per-player kernel density surfaces, their non-negative
//! factorization into a few basis surfaces, and the standardized log-basis
//! design matrix.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::court::{CourtGrid, ShotRecord};
use crate::error::{Error, Result};

pub const DEFAULT_BANDWIDTH: f64 = 2.5;
pub const DEFAULT_RANK: usize = 5;
pub const NMF_FLOOR: f64 = 1e-12;

/// Covariates for every block: an intercept column followed by `p` basis columns.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    /// `J x (p + 1)`, row-major.
    pub x: Array2<f64>,
}

impl DesignMatrix {
    pub fn new(x: Array2<f64>) -> Result<Self> {
        if x.ncols() == 0 || x.nrows() == 0 {
            return Err(Error::Dimension("design matrix must be non-empty".into()));
        }
        if x.column(0).iter().any(|&v| v != 1.0) {
            return Err(Error::Parameter("first design column must be the intercept (all ones)".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("design matrix has non-finite entries".into()));
        }
        Ok(Self {
            x: x.as_standard_layout().into_owned(),
        })
    }

    /// Intercept plus the given raw covariate columns, each standardized.
    pub fn from_covariates(cov: &Array2<f64>) -> Result<Self> {
        let (rows, p) = cov.dim();
        let mut x = Array2::<f64>::ones((rows, p + 1));
        for m in 0..p {
            let col = standardize(cov.column(m).iter().copied())
                .ok_or_else(|| Error::Numeric(format!("covariate column {m} has zero standard deviation")))?;
            x.column_mut(m + 1).assign(&ndarray::Array1::from(col));
        }
        Self::new(x)
    }

    pub fn n_blocks(&self) -> usize {
        self.x.nrows()
    }

    /// Number of coefficients, `p + 1`.
    pub fn n_coef(&self) -> usize {
        self.x.ncols()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        self.x.row(j).to_slice().expect("standard layout")
    }

    pub fn select_blocks(&self, blocks: &[usize]) -> Self {
        Self {
            x: self.x.select(Axis(0), blocks),
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_matrix_csv(path, &self.x, &design_header(self.n_coef()))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::new(read_matrix_csv(path)?)
    }
}

/// Writes `K x J` basis surfaces with the block indices as the header.
pub fn write_basis_csv(path: &Path, b: &Array2<f64>) -> Result<()> {
    let header: Vec<String> = (0..b.ncols()).map(|j| j.to_string()).collect();
    write_matrix_csv(path, b, &header)
}

pub fn read_basis_csv(path: &Path) -> Result<Array2<f64>> {
    let b = read_matrix_csv(path)?;
    if b.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Format {
            path: path.into(),
            message: "basis entries must be finite and non-negative".into(),
        });
    }
    Ok(b)
}

fn design_header(n_coef: usize) -> Vec<String> {
    std::iter::once("intercept".to_string())
        .chain((1..n_coef).map(|m| format!("basis_{m}")))
        .collect()
}

pub(crate) fn write_matrix_csv(path: &Path, m: &Array2<f64>, header: &[String]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(header)?;
    for row in m.rows() {
        w.write_record(row.iter().map(|v| format!("{v:e}")))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub(crate) fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(BufReader::new(file));
    let cols = r.headers()?.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        for field in rec.iter() {
            values.push(field.trim().parse::<f64>().map_err(|_| Error::Format {
                path: path.into(),
                message: format!("row {}: '{field}' is not a number", rows + 1),
            })?);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, cols), values).map_err(|e| Error::Format {
        path: path.into(),
        message: e.to_string(),
    })
}

/// Mean 0, sample standard deviation 1. `None` for a constant sequence.
pub fn standardize(values: impl Iterator<Item = f64>) -> Option<Vec<f64>> {
    let v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    if v.len() < 2 {
        return None;
    }
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if !(sd > f64::EPSILON * mean.abs().max(1.0)) {
        return None;
    }
    Some(v.iter().map(|x| (x - mean) / sd).collect())
}

/// Per-player shot intensity surfaces, `N x J`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityMatrix {
    pub player_ids: Vec<String>,
    pub lambda: Array2<f64>,
}

/// Gaussian product-kernel density of one player's shots at every block centroid.
///
/// The row is rescaled so that its block-area-weighted sum equals the number of
/// shots, which also compensates for kernel mass falling off the court.
pub fn kde_grid(records: &[ShotRecord], grid: &CourtGrid, bandwidth: f64) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::Empty("kernel density needs at least one shot".into()));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::Parameter(format!("bandwidth must be positive, got {bandwidth}")));
    }
    // sorted so the floating-point sum does not depend on record order
    let mut pts: Vec<(f64, f64)> = records.iter().map(|r| (r.x, r.y)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let cx: Vec<f64> = (0..grid.nx).map(|c| (c as f64 + 0.5) * grid.block_len_x).collect();
    let cy: Vec<f64> = (0..grid.ny).map(|r| (r as f64 + 0.5) * grid.block_len_y).collect();
    let inv = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut dens = vec![0.0; grid.n_blocks()];
    let mut kx = vec![0.0; grid.nx];
    let mut ky = vec![0.0; grid.ny];
    for &(x, y) in &pts {
        for (k, c) in kx.iter_mut().zip(&cx) {
            *k = (-(c - x).powi(2) * inv).exp();
        }
        for (k, c) in ky.iter_mut().zip(&cy) {
            *k = (-(c - y).powi(2) * inv).exp();
        }
        for row in 0..grid.ny {
            let base = row * grid.nx;
            for col in 0..grid.nx {
                dens[base + col] += ky[row] * kx[col];
            }
        }
    }
    let mass: f64 = dens.iter().sum::<f64>() * grid.block_area();
    if !(mass > 0.0) {
        return Err(Error::Numeric("kernel density underflowed on every block".into()));
    }
    let scale = records.len() as f64 / mass;
    dens.iter_mut().for_each(|d| *d *= scale);
    Ok(dens)
}

/// Kernel density rows for every player in the shot list, in order of first appearance.
pub fn intensity_matrix(records: &[ShotRecord], grid: &CourtGrid, bandwidth: f64) -> Result<IntensityMatrix> {
    let ids = crate::court::players_in_order(records);
    let mut by_player: HashMap<&str, Vec<ShotRecord>> = HashMap::new();
    for r in records {
        by_player.entry(r.player_id.as_str()).or_default().push(r.clone());
    }
    let rows: Vec<Vec<f64>> = ids
        .par_iter()
        .map(|id| kde_grid(&by_player[id.as_str()], grid, bandwidth))
        .collect::<Result<_>>()?;
    if rows.is_empty() {
        return Err(Error::Empty("no shots to build intensities from".into()));
    }
    let j = grid.n_blocks();
    let lambda = Array2::from_shape_vec((rows.len(), j), rows.into_iter().flatten().collect())
        .map_err(|e| Error::Dimension(e.to_string()))?;
    Ok(IntensityMatrix {
        player_ids: ids,
        lambda,
    })
}

/// Non-negative factors `lambda ~ w . b`.
#[derive(Debug, Clone)]
pub struct NmfFactors {
    /// `N x K` player loadings.
    pub w: Array2<f64>,
    /// `K x J` basis surfaces.
    pub b: Array2<f64>,
    /// Generalized KL divergence after every iteration, starting with the initial value.
    pub objective_trace: Vec<f64>,
}

impl NmfFactors {
    pub fn rank(&self) -> usize {
        self.b.nrows()
    }

    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace holds the initial objective")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NmfOptions {
    pub rank: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl Default for NmfOptions {
    fn default() -> Self {
        Self {
            rank: DEFAULT_RANK,
            max_iter: 2000,
            tol: 1e-6,
            restarts: 5,
            seed: 0,
        }
    }
}

/// Generalized Kullback-Leibler divergence `D(a || b)`.
pub fn kl_divergence(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| if x > 0.0 { x * (x / y).ln() - x + y } else { y })
        .sum()
}

/// Best of `opts.restarts` multiplicative-update runs, by final divergence.
pub fn nmf(lambda: &Array2<f64>, opts: &NmfOptions) -> Result<NmfFactors> {
    let (n, j) = lambda.dim();
    if opts.rank == 0 || opts.rank > n.min(j) {
        return Err(Error::Parameter(format!(
            "NMF rank {} must lie in 1..={} for a {n} x {j} matrix",
            opts.rank,
            n.min(j)
        )));
    }
    if lambda.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("NMF input has non-finite entries".into()));
    }
    if lambda.iter().any(|&v| v < 0.0) {
        return Err(Error::Parameter("NMF input must be non-negative".into()));
    }
    let runs: Vec<NmfFactors> = (0..opts.restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(r as u64);
            nmf_single(lambda, opts.rank, opts.max_iter, opts.tol, &mut rng)
        })
        .collect();
    Ok(runs
        .into_iter()
        .min_by(|a, b| a.objective().total_cmp(&b.objective()))
        .expect("at least one restart"))
}

/// One run of the Lee-Seung multiplicative updates for the KL objective.
pub fn nmf_single<R: Rng>(lambda: &Array2<f64>, rank: usize, max_iter: usize, tol: f64, rng: &mut R) -> NmfFactors {
    let (n, j) = lambda.dim();
    let mean = lambda.mean().unwrap_or(1.0).max(NMF_FLOOR);
    // E[(w b)_ij] = rank * (s/2)^2 = mean
    let s = 2.0 * (mean / rank as f64).sqrt();
    let mut w = Array2::from_shape_fn((n, rank), |_| s * (1.0 - rng.gen::<f64>()));
    let mut b = Array2::from_shape_fn((rank, j), |_| s * (1.0 - rng.gen::<f64>()));

    let mut approx = w.dot(&b);
    let mut trace = vec![kl_divergence(lambda, &approx)];
    for _ in 0..max_iter {
        // b <- b * (w^T (lambda / wb)) / (w^T 1)
        let ratio = ratio(lambda, &approx);
        let num = w.t().dot(&ratio);
        let col_sums = w.sum_axis(Axis(0));
        for ((k, jj), v) in b.indexed_iter_mut() {
            *v = (*v * num[[k, jj]] / col_sums[k]).max(NMF_FLOOR);
        }
        approx = w.dot(&b);

        // w <- w * ((lambda / wb) b^T) / (1 b^T)
        let ratio = self::ratio(lambda, &approx);
        let num = ratio.dot(&b.t());
        let row_sums = b.sum_axis(Axis(1));
        for ((i, k), v) in w.indexed_iter_mut() {
            *v = (*v * num[[i, k]] / row_sums[k]).max(NMF_FLOOR);
        }
        approx = w.dot(&b);

        let obj = kl_divergence(lambda, &approx);
        let prev = *trace.last().unwrap();
        trace.push(obj);
        if (prev - obj).abs() <= tol * prev.abs().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    NmfFactors {
        w,
        b,
        objective_trace: trace,
    }
}

fn ratio(lambda: &Array2<f64>, approx: &Array2<f64>) -> Array2<f64> {
    let mut out = lambda.clone();
    out.zip_mut_with(approx, |l, &a| *l /= a);
    out
}

/// Intercept column followed by the standardized natural log of each basis row.
pub fn build_design(b: &Array2<f64>) -> Result<DesignMatrix> {
    let (k, j) = b.dim();
    if b.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Numeric("basis entries must be strictly positive before the log transform".into()));
    }
    let mut x = Array2::<f64>::ones((j, k + 1));
    for m in 0..k {
        let col = standardize(b.row(m).iter().map(|v| v.ln())).ok_or_else(|| {
            Error::Numeric(format!("basis {} is constant; zero standard deviation cannot be standardized", m + 1))
        })?;
        x.column_mut(m + 1).assign(&ndarray::Array1::from(col));
    }
    DesignMatrix::new(x)
}
