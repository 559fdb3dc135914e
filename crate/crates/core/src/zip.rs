//! The zero-inflated Poisson distribution and a per-player maximum-likelihood fit.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Poisson};

use crate::basis::DesignMatrix;
use crate::error::{Error, Result};

/// Default bound on the linear predictor `x_j . beta` before exponentiation.
pub const ETA_BOUND: f64 = 30.0;

/// Poisson mean and extra-zero probability of a ZIP law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZipParams {
    mu: f64,
    rho: f64,
}

impl ZipParams {
    pub fn new(mu: f64, rho: f64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::Parameter(format!("ZIP mean must be positive and finite, got {mu}")));
        }
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::Parameter(format!("extra-zero probability must lie in [0, 1], got {rho}")));
        }
        Ok(Self { mu, rho })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// `(1 - rho) * mu`.
    pub fn mean(&self) -> f64 {
        (1.0 - self.rho) * self.mu
    }
}

/// Regression coefficients, intercept first.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RegressionCoef(pub Vec<f64>);

impl RegressionCoef {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn ln_factorial(k: u32) -> f64 {
    if k < 2 {
        0.0
    } else {
        libm::lgamma(k as f64 + 1.0)
    }
}

pub fn zip_pmf(kappa: u32, params: ZipParams) -> f64 {
    let ZipParams { mu, rho } = params;
    if kappa == 0 {
        rho + (1.0 - rho) * (-mu).exp()
    } else {
        (1.0 - rho) * (kappa as f64 * mu.ln() - mu - ln_factorial(kappa)).exp()
    }
}

pub fn zip_logpmf(kappa: u32, params: ZipParams) -> f64 {
    let ZipParams { mu, rho } = params;
    if kappa == 0 {
        log_zero_prob(mu, rho)
    } else {
        (1.0 - rho).ln() + kappa as f64 * mu.ln() - mu - ln_factorial(kappa)
    }
}

/// `ln(rho + (1 - rho) e^{-mu})` evaluated as a log-sum-exp.
#[inline]
pub(crate) fn log_zero_prob(mu: f64, rho: f64) -> f64 {
    if rho <= 0.0 {
        return -mu;
    }
    if rho >= 1.0 {
        return 0.0;
    }
    let a = rho.ln();
    let b = (-rho).ln_1p() - mu;
    let hi = a.max(b);
    hi + ((a - hi).exp() + (b - hi).exp()).ln()
}

pub fn zip_sample<R: Rng + ?Sized>(params: ZipParams, rng: &mut R) -> u32 {
    if rng.gen::<f64>() < params.rho {
        return 0;
    }
    poisson_draw(params.mu, rng)
}

pub(crate) fn poisson_draw<R: Rng + ?Sized>(mu: f64, rng: &mut R) -> u32 {
    let d = Poisson::new(mu).expect("positive finite Poisson mean");
    let v: f64 = d.sample(rng);
    v.min(u32::MAX as f64) as u32
}

/// `exp(x . beta)` with the linear predictor clamped to `[-ETA_BOUND, ETA_BOUND]`.
pub fn link_mean(x: &[f64], beta: &RegressionCoef) -> f64 {
    link_mean_with_bound(x, beta, ETA_BOUND)
}

pub fn link_mean_with_bound(x: &[f64], beta: &RegressionCoef, bound: f64) -> f64 {
    clamp_eta(dot(x, beta.as_slice()), bound).exp()
}

#[inline]
pub(crate) fn clamp_eta(eta: f64, bound: f64) -> f64 {
    eta.clamp(-bound, bound)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Result of [`fit_zip_mle`].
#[derive(Debug, Clone, PartialEq)]
pub struct ZipFit {
    pub beta: RegressionCoef,
    pub rho: f64,
    pub loglik: f64,
    pub iterations: usize,
    /// Set for all-zero rows, where the likelihood is maximized by `rho = 1`
    /// and the coefficients are not identified.
    pub degenerate: bool,
}

/// Reusable buffers for per-player EM fits.
#[derive(Debug, Default, Clone)]
pub struct ZipMleWorkspace {
    eta: Vec<f64>,
    mu: Vec<f64>,
    tau: Vec<f64>,
}

const EM_TOL: f64 = 1e-8;
const EM_MAX_ITER: usize = 500;
const NEWTON_MAX_ITER: usize = 25;

impl ZipMleWorkspace {
    pub fn new() -> Self {
        Self::default()
    }

    /// EM fit of one player's ZIP regression.
    ///
    /// The E-step computes posterior structural-zero probabilities; the M-step
    /// sets `rho` to their mean and runs damped Newton on the weighted Poisson
    /// log-likelihood for `beta`.
    pub fn fit(&mut self, y: &[u32], design: &DesignMatrix) -> Result<ZipFit> {
        let n_blocks = design.n_blocks();
        let dim = design.n_coef();
        if y.len() != n_blocks {
            return Err(Error::Dimension(format!(
                "count row has {} blocks, design has {n_blocks}",
                y.len()
            )));
        }
        if y.iter().all(|&v| v == 0) {
            return Ok(ZipFit {
                beta: RegressionCoef::zeros(dim),
                rho: 1.0,
                loglik: 0.0,
                iterations: 0,
                degenerate: true,
            });
        }
        self.eta.resize(n_blocks, 0.0);
        self.mu.resize(n_blocks, 0.0);
        self.tau.resize(n_blocks, 0.0);

        let total: f64 = y.iter().map(|&v| v as f64).sum();
        let mean = total / n_blocks as f64;
        let zero_frac = y.iter().filter(|&&v| v == 0).count() as f64 / n_blocks as f64;
        let mut beta = vec![0.0; dim];
        beta[0] = mean.ln();
        let mut rho = (zero_frac - (-mean).exp()).clamp(0.01, 0.99);
        let lnfact: f64 = y.iter().map(|&v| ln_factorial(v)).sum();

        self.refresh(design, &beta);
        let mut loglik = self.loglik(y, rho, lnfact);
        let mut iterations = 0;
        for iter in 1..=EM_MAX_ITER {
            iterations = iter;
            // E-step
            for j in 0..n_blocks {
                self.tau[j] = if y[j] == 0 {
                    let p0 = rho + (1.0 - rho) * (-self.mu[j]).exp();
                    if p0 > 0.0 { rho / p0 } else { 1.0 }
                } else {
                    0.0
                };
            }
            // M-step
            rho = self.tau.iter().sum::<f64>() / n_blocks as f64;
            self.newton(y, design, &mut beta)?;
            let next = self.loglik(y, rho, lnfact);
            let gain = next - loglik;
            loglik = next;
            if gain.abs() < EM_TOL {
                break;
            }
        }
        if !loglik.is_finite() {
            return Err(Error::Numeric("ZIP EM produced a non-finite log-likelihood".into()));
        }
        Ok(ZipFit {
            beta: RegressionCoef(beta),
            rho,
            loglik,
            iterations,
            degenerate: false,
        })
    }

    fn refresh(&mut self, design: &DesignMatrix, beta: &[f64]) {
        for (j, row) in design.x.rows().into_iter().enumerate() {
            let eta = clamp_eta(dot(row.as_slice().unwrap(), beta), ETA_BOUND);
            self.eta[j] = eta;
            self.mu[j] = eta.exp();
        }
    }

    fn loglik(&self, y: &[u32], rho: f64, lnfact: f64) -> f64 {
        let log1m = (-rho).ln_1p();
        let mut ll = -lnfact;
        for j in 0..y.len() {
            ll += if y[j] == 0 {
                log_zero_prob(self.mu[j], rho)
            } else {
                log1m + y[j] as f64 * self.eta[j] - self.mu[j]
            };
        }
        ll
    }

    fn weighted_poisson(&self, y: &[u32]) -> f64 {
        y.iter()
            .enumerate()
            .map(|(j, &v)| (1.0 - self.tau[j]) * (v as f64 * self.eta[j] - self.mu[j]))
            .sum()
    }

    fn newton(&mut self, y: &[u32], design: &DesignMatrix, beta: &mut [f64]) -> Result<()> {
        let dim = beta.len();
        let mut current = self.weighted_poisson(y);
        for _ in 0..NEWTON_MAX_ITER {
            let mut grad = DVector::<f64>::zeros(dim);
            let mut info = DMatrix::<f64>::zeros(dim, dim);
            for (j, row) in design.x.rows().into_iter().enumerate() {
                let wt = 1.0 - self.tau[j];
                let resid = wt * (y[j] as f64 - self.mu[j]);
                let curv = wt * self.mu[j];
                for a in 0..dim {
                    grad[a] += row[a] * resid;
                    for b in 0..=a {
                        info[(a, b)] += row[a] * row[b] * curv;
                    }
                }
            }
            for a in 0..dim {
                for b in 0..a {
                    info[(b, a)] = info[(a, b)];
                }
                info[(a, a)] += 1e-10;
            }
            let step = info
                .cholesky()
                .ok_or_else(|| Error::Numeric("singular information matrix in ZIP Newton step".into()))?
                .solve(&grad);
            let old = beta.to_vec();
            let mut scale = 1.0;
            let mut improved = false;
            for _ in 0..30 {
                for a in 0..dim {
                    beta[a] = old[a] + scale * step[a];
                }
                self.refresh(design, beta);
                let cand = self.weighted_poisson(y);
                if cand >= current {
                    improved = cand - current > 1e-12 * current.abs().max(1.0);
                    current = cand;
                    break;
                }
                scale *= 0.5;
            }
            if scale < 1e-8 {
                beta.copy_from_slice(&old);
                self.refresh(design, beta);
                break;
            }
            if !improved || step.amax() * scale < 1e-10 {
                break;
            }
        }
        Ok(())
    }
}

/// Per-player ZIP maximum-likelihood estimate; see [`ZipMleWorkspace::fit`].
pub fn fit_zip_mle(y: &[u32], design: &DesignMatrix) -> Result<ZipFit> {
    ZipMleWorkspace::new().fit(y, design)
}
