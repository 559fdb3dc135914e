//! Mixture-of-finite-mixtures prior: the prior on the number of components,
//! the `V_n(t)` coefficients, urn conditionals and the stick-breaking simulator.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use libm::lgamma as ln_gamma;

use crate::error::{Error, Result};

/// Relative size of a series term below which summation stops (`e^-40`).
const SERIES_LOG_CUTOFF: f64 = 40.0;
/// Hard cap on the number of series terms.
pub const SERIES_TERM_CAP: usize = 10_000;

/// Form of the prior on the number of components `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KPrior {
    /// `k ~ Poisson(psi)` conditioned on `k >= 1`.
    Truncated,
    /// `k - 1 ~ Poisson(psi)`.
    #[default]
    Shifted,
}

impl std::str::FromStr for KPrior {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "truncated" => Ok(KPrior::Truncated),
            "shifted" => Ok(KPrior::Shifted),
            other => Err(Error::Parameter(format!("unknown k-prior form '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MfmPrior {
    pub psi: f64,
    pub gamma: f64,
    pub k_prior: KPrior,
}

impl Default for MfmPrior {
    fn default() -> Self {
        Self {
            psi: 1.0,
            gamma: 1.0,
            k_prior: KPrior::Shifted,
        }
    }
}

impl MfmPrior {
    pub fn new(psi: f64, gamma: f64, k_prior: KPrior) -> Result<Self> {
        if !(psi > 0.0 && psi.is_finite()) {
            return Err(Error::Parameter(format!("psi must be positive, got {psi}")));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Parameter(format!("gamma must be positive, got {gamma}")));
        }
        Ok(Self { psi, gamma, k_prior })
    }

    pub fn with_psi(self, psi: f64) -> Self {
        Self { psi, ..self }
    }

    /// `ln p(k)` for `k >= 1`.
    pub fn log_pk(&self, k: usize) -> f64 {
        debug_assert!(k >= 1);
        let psi = self.psi;
        match self.k_prior {
            KPrior::Shifted => (k - 1) as f64 * psi.ln() - psi - ln_gamma(k as f64),
            KPrior::Truncated => {
                k as f64 * psi.ln() - psi - ln_gamma(k as f64 + 1.0) - (-(-psi).exp_m1()).ln()
            }
        }
    }
}

/// `ln` of the series term `k_(t) / (gamma k)^(n) p(k)`; requires `k >= t`.
fn log_series_term(k: usize, t: usize, n: usize, prior: &MfmPrior) -> f64 {
    let kf = k as f64;
    let gk = prior.gamma * kf;
    let falling = ln_gamma(kf + 1.0) - ln_gamma((k - t) as f64 + 1.0);
    let rising = ln_gamma(gk + n as f64) - ln_gamma(gk);
    falling - rising + prior.log_pk(k)
}

#[inline]
fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn log_vn(n: usize, t: usize, prior: &MfmPrior) -> Result<f64> {
    let mut total = f64::NEG_INFINITY;
    let mut prev = f64::NEG_INFINITY;
    for k in t..t + SERIES_TERM_CAP {
        let term = log_series_term(k, t, n, prior);
        total = log_add(total, term);
        // terms are unimodal in k; stop once past the mode and negligible
        if term < prev && term < total - SERIES_LOG_CUTOFF {
            return Ok(total);
        }
        prev = term;
    }
    Err(Error::SeriesDivergence {
        n,
        t,
        cap: SERIES_TERM_CAP,
    })
}

/// `ln V_n(t)` for `t = 1..=t_max` at a fixed sample size and prior.
#[derive(Debug, Clone, PartialEq)]
pub struct VnTable {
    n: usize,
    prior: MfmPrior,
    log_v: Vec<f64>,
}

impl VnTable {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn prior(&self) -> &MfmPrior {
        &self.prior
    }

    pub fn t_max(&self) -> usize {
        self.log_v.len()
    }

    /// `ln V_n(t)`; panics outside `1..=t_max`.
    pub fn log_v(&self, t: usize) -> f64 {
        self.log_v[t - 1]
    }

    /// A new table covering `1..=t_max`, reusing the entries already computed.
    pub fn extended(&self, t_max: usize) -> Result<VnTable> {
        if t_max <= self.t_max() {
            return Ok(self.clone());
        }
        if t_max > self.n {
            return Err(Error::Parameter(format!(
                "cannot tabulate V_n(t) beyond t = n = {}",
                self.n
            )));
        }
        let mut log_v = self.log_v.clone();
        for t in self.t_max() + 1..=t_max {
            log_v.push(log_vn(self.n, t, &self.prior)?);
        }
        Ok(VnTable {
            n: self.n,
            prior: self.prior,
            log_v,
        })
    }
}

pub fn compute_vn(n: usize, t_max: usize, prior: &MfmPrior) -> Result<VnTable> {
    if n == 0 || t_max == 0 || t_max > n {
        return Err(Error::Parameter(format!(
            "V_n(t) table needs 1 <= t_max <= n, got t_max = {t_max}, n = {n}"
        )));
    }
    let log_v = (1..=t_max)
        .map(|t| log_vn(n, t, prior))
        .collect::<Result<Vec<_>>>()?;
    Ok(VnTable {
        n,
        prior: *prior,
        log_v,
    })
}

/// Unnormalized log weights for seating one held-out observation.
#[derive(Debug, Clone)]
pub struct UrnWeights {
    /// One entry per existing cluster, `ln(|c| + gamma)`.
    pub existing: Vec<f64>,
    /// `ln(gamma V_n(t+1) / V_n(t))`.
    pub new_cluster: f64,
    /// Set when the table had to be extended to reach `t + 1`.
    pub extended: Option<VnTable>,
}

impl UrnWeights {
    /// Normalized probabilities, existing clusters first and the new cluster last.
    pub fn probabilities(&self) -> Vec<f64> {
        let all: Vec<f64> = self
            .existing
            .iter()
            .copied()
            .chain(std::iter::once(self.new_cluster))
            .collect();
        normalize_log_weights(&all)
    }
}

pub fn urn_weights(cluster_sizes: &[usize], vn: &VnTable) -> Result<UrnWeights> {
    let n = vn.n();
    let t = cluster_sizes.len();
    let seated: usize = cluster_sizes.iter().sum();
    if n == 0 || seated != n - 1 {
        return Err(Error::Parameter(format!(
            "urn weights need n - 1 = {} seated observations, got {seated}",
            n.saturating_sub(1)
        )));
    }
    if cluster_sizes.contains(&0) {
        return Err(Error::Parameter("cluster sizes must all be positive".into()));
    }
    let gamma = vn.prior().gamma;
    let existing = cluster_sizes
        .iter()
        .map(|&s| (s as f64 + gamma).ln())
        .collect();
    let (table, extended) = if t + 1 > vn.t_max() {
        let ext = vn.extended(t + 1)?;
        (None, Some(ext))
    } else {
        (Some(vn), None)
    };
    let table = table.or(extended.as_ref()).unwrap();
    let new_cluster = if t == 0 {
        // first observation always opens a table
        0.0
    } else {
        gamma.ln() + table.log_v(t + 1) - table.log_v(t)
    };
    Ok(UrnWeights {
        existing,
        new_cluster,
        extended,
    })
}

/// Softmax of log weights.
pub fn normalize_log_weights(logw: &[f64]) -> Vec<f64> {
    let hi = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|&l| (l - hi).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Index drawn proportionally to `exp(logw)`.
pub fn sample_log_weights<R: Rng + ?Sized>(logw: &[f64], rng: &mut R) -> usize {
    let hi = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logw.iter().map(|&l| (l - hi).exp()).sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, &l) in logw.iter().enumerate() {
        u -= (l - hi).exp();
        if u < 0.0 {
            return i;
        }
    }
    // rounding can leave u marginally non-negative
    logw.iter().rposition(|&l| l > f64::NEG_INFINITY).unwrap_or(0)
}

/// Draws a partition of `n` items from the MFM prior by sequential seating.
/// Seating item `i + 1` uses the coefficients `V_{i+1}`, so only the sample
/// size and prior of `vn` are used. Labels are 0-based and in order of first
/// appearance.
pub fn sample_partition_prior<R: Rng + ?Sized>(vn: &VnTable, rng: &mut R) -> Result<Vec<usize>> {
    let n = vn.n();
    let mut sizes: Vec<usize> = Vec::new();
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let table = compute_vn(i + 1, sizes.len() + 1, vn.prior())?;
        let w = urn_weights(&sizes, &table)?;
        let mut logw = w.existing.clone();
        logw.push(w.new_cluster);
        let c = sample_log_weights(&logw, rng);
        if c == sizes.len() {
            sizes.push(1);
        } else {
            sizes[c] += 1;
        }
        labels.push(c);
    }
    Ok(labels)
}

/// `ln` of the exchangeable partition probability
/// `V_n(t) * prod_c gamma^(|c|)` (rising factorials).
pub fn log_partition_prior(cluster_sizes: &[usize], vn: &VnTable) -> Result<f64> {
    let t = cluster_sizes.len();
    if cluster_sizes.iter().sum::<usize>() != vn.n() {
        return Err(Error::Dimension("cluster sizes must sum to n".into()));
    }
    let table = if t > vn.t_max() {
        vn.extended(t)?
    } else {
        vn.clone()
    };
    let gamma = vn.prior().gamma;
    let lg = ln_gamma(gamma);
    Ok(table.log_v(t)
        + cluster_sizes
            .iter()
            .map(|&s| ln_gamma(gamma + s as f64) - lg)
            .sum::<f64>())
}

/// Number of components given `t` occupied clusters among `n` items:
/// `p(k | t) ~ k_(t) / (gamma k)^(n) p(k)` on `k >= t`.
pub fn sample_components<R: Rng + ?Sized>(n: usize, t: usize, prior: &MfmPrior, rng: &mut R) -> Result<usize> {
    let log_total = log_vn(n, t, prior)?;
    let mut u = rng.gen::<f64>();
    let mut prev = f64::NEG_INFINITY;
    for k in t..t + SERIES_TERM_CAP {
        let term = log_series_term(k, t, n, prior);
        u -= (term - log_total).exp();
        if u <= 0.0 || (term < prev && term < log_total - SERIES_LOG_CUTOFF) {
            return Ok(k);
        }
        prev = term;
    }
    Err(Error::SeriesDivergence {
        n,
        t,
        cap: SERIES_TERM_CAP,
    })
}

/// Exponential-gap construction of the mixture weights: gaps `eta_h ~ Exp(psi)`,
/// `k` is the first index whose partial sum reaches 1, `pi_h = eta_h` for
/// `h < k` and `pi_k` takes the remainder.
pub fn stick_breaking_sim<R: Rng + ?Sized>(psi: f64, rng: &mut R) -> (usize, Vec<f64>) {
    let gap = Exp::new(psi).expect("positive rate");
    let mut weights = Vec::new();
    let mut partial = 0.0;
    loop {
        let eta: f64 = gap.sample(rng);
        if partial + eta >= 1.0 {
            weights.push(1.0 - partial);
            return (weights.len(), weights);
        }
        partial += eta;
        weights.push(eta);
    }
}
