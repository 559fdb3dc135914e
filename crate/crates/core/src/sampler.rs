//! MCMC for the clustered ZIP regression under the MFM prior.
//!
//! One sweep updates, in order: the structural-zero indicators, the cluster
//! labels (collapsed urn moves with `m_aux` auxiliary components for the
//! non-conjugate cluster parameters), the coefficients by coordinate-wise
//! random-walk Metropolis, the extra-zero probabilities by their Beta
//! conditionals and, optionally, the Poisson rate of the prior on `k`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::DesignMatrix;
use crate::court::CountMatrix;
use crate::error::{Error, Result};
use crate::mfm::{self, KPrior, MfmPrior, VnTable};
use crate::zip::{clamp_eta, dot, ln_factorial, log_zero_prob, poisson_draw, ZipMleWorkspace, ETA_BOUND};

/// Bounds keeping the extra-zero probabilities strictly inside (0, 1).
pub const RHO_CLAMP: f64 = 1e-8;
const TARGET_ACCEPT: f64 = 0.44;
const ADAPT_BATCH: usize = 25;

/// How the chain is started.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Every player in its own cluster at its per-player ZIP estimate.
    #[default]
    Singletons,
    /// One cluster holding every player, parameters at the pooled estimate.
    OneCluster,
    /// A draw from the prior.
    Prior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub n_iter: usize,
    pub n_burnin: usize,
    pub thin: usize,
    /// Prior standard deviation of every coefficient.
    pub sigma0: f64,
    /// Initial random-walk step per coefficient, before division by the square
    /// root of the cluster size. A single entry is broadcast to all coefficients.
    pub rw_step: Vec<f64>,
    /// Tune the steps towards 0.44 acceptance during burn-in.
    pub adapt: bool,
    pub m_aux: usize,
    pub seed: u64,
    /// `psi` holds the starting (or fixed) rate.
    pub prior: MfmPrior,
    /// Resample `psi` under its Gamma(1, 1) prior.
    pub update_psi: bool,
    /// Set to false to sample from the prior alone.
    pub use_likelihood: bool,
    pub init: Init,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_iter: 15_000,
            n_burnin: 5_000,
            thin: 1,
            sigma0: 5.0,
            rw_step: vec![0.1],
            adapt: true,
            m_aux: 2,
            seed: 0,
            prior: MfmPrior::default(),
            update_psi: false,
            use_likelihood: true,
            init: Init::Singletons,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_burnin >= self.n_iter {
            return Err(Error::Parameter(format!(
                "burn-in ({}) must be shorter than the run ({})",
                self.n_burnin, self.n_iter
            )));
        }
        if self.thin == 0 {
            return Err(Error::Parameter("thinning interval must be at least 1".into()));
        }
        if self.m_aux == 0 {
            return Err(Error::Parameter("need at least one auxiliary component".into()));
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(Error::Parameter(format!("sigma0 must be positive, got {}", self.sigma0)));
        }
        if self.rw_step.is_empty() || self.rw_step.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Parameter("random-walk steps must be positive".into()));
        }
        MfmPrior::new(self.prior.psi, self.prior.gamma, self.prior.k_prior)?;
        Ok(())
    }

    /// Number of retained draws.
    pub fn n_retained(&self) -> usize {
        (self.n_iter - self.n_burnin) / self.thin
    }
}

/// Parameters of one mixture component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    pub beta: Vec<f64>,
    pub rho: f64,
}

/// Full sampler state. Labels are 0-based and always compact.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    pub z: Vec<usize>,
    pub clusters: Vec<ClusterParams>,
    /// Structural-zero indicators, `n x J`; zero wherever the count is positive.
    pub w: Array2<u8>,
    pub psi: f64,
    /// Number of mixture components, when `psi` is being updated.
    pub k: Option<usize>,
}

impl ClusterState {
    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.clusters.len()];
        for &c in &self.z {
            s[c] += 1;
        }
        s
    }

    /// Drops empty clusters and relabels the rest `0..t` in their existing order.
    pub fn compact(&mut self) {
        let sizes = self.sizes();
        let mut remap = vec![usize::MAX; sizes.len()];
        let mut kept = Vec::with_capacity(sizes.len());
        for (c, params) in std::mem::take(&mut self.clusters).into_iter().enumerate() {
            if sizes[c] > 0 {
                remap[c] = kept.len();
                kept.push(params);
            }
        }
        self.clusters = kept;
        for z in &mut self.z {
            *z = remap[*z];
        }
    }

    /// Checks the structural invariants against the counts.
    pub fn check(&self, y: &Array2<u32>) -> Result<()> {
        let sizes = self.sizes();
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::Numeric("state holds an empty cluster".into()));
        }
        for ((i, j), &w) in self.w.indexed_iter() {
            if w > 1 || (w == 1 && y[[i, j]] > 0) {
                return Err(Error::Numeric(format!("indicator ({i}, {j}) inconsistent with its count")));
            }
        }
        Ok(())
    }
}

/// One retained draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDraw {
    pub iteration: usize,
    /// 1-based cluster labels.
    pub labels: Vec<usize>,
    pub betas: Vec<Vec<f64>>,
    pub rhos: Vec<f64>,
    pub psi: f64,
    pub n_clusters: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub log_posterior: f64,
}

impl TraceDraw {
    /// Coefficients of the cluster holding `player`.
    pub fn player_beta(&self, player: usize) -> &[f64] {
        &self.betas[self.labels[player] - 1]
    }

    pub fn player_rho(&self, player: usize) -> f64 {
        self.rhos[self.labels[player] - 1]
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct McmcTrace {
    pub draws: Vec<TraceDraw>,
    /// Acceptance rate per coefficient after burn-in.
    #[serde(default)]
    pub acceptance: Vec<f64>,
    /// Final random-walk steps.
    #[serde(default)]
    pub rw_step: Vec<f64>,
}

impl McmcTrace {
    pub fn n_players(&self) -> usize {
        self.draws.first().map_or(0, |d| d.labels.len())
    }

    /// Newline-delimited JSON, one record per draw.
    pub fn write_ndjson<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        for d in &self.draws {
            serde_json::to_writer(&mut out, d)?;
            out.write_all(b"\n").map_err(|e| Error::io("<trace>", e))?;
        }
        Ok(())
    }

    pub fn read_ndjson<R: std::io::BufRead>(input: R) -> Result<Self> {
        let mut draws = Vec::new();
        for line in input.lines() {
            let line = line.map_err(|e| Error::io("<trace>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            draws.push(serde_json::from_str(&line)?);
        }
        Ok(Self {
            draws,
            ..Default::default()
        })
    }

    pub fn write_file(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_ndjson(&mut w)?;
        std::io::Write::flush(&mut w).map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_ndjson(std::io::BufReader::new(f))
    }
}

/// Per-player view of the counts: positive cells and their log-factorial mass.
#[derive(Debug, Clone)]
struct PlayerData {
    positives: Vec<(usize, u32)>,
    ln_fact: f64,
}

fn prepare(y: &Array2<u32>) -> Vec<PlayerData> {
    y.rows()
        .into_iter()
        .map(|row| {
            let positives: Vec<(usize, u32)> = row
                .iter()
                .enumerate()
                .filter(|(_, &v)| v > 0)
                .map(|(j, &v)| (j, v))
                .collect();
            let ln_fact = positives.iter().map(|&(_, v)| ln_factorial(v)).sum();
            PlayerData { positives, ln_fact }
        })
        .collect()
}

/// Block-level quantities of one component, shared by every player scored under it.
#[derive(Debug, Clone)]
struct ThetaCache {
    eta: Vec<f64>,
    mu: Vec<f64>,
    /// `ln P(y = 0)` per block.
    zero: Vec<f64>,
    zero_sum: f64,
    log1m_rho: f64,
}

impl ThetaCache {
    fn new(design: &DesignMatrix, theta: &ClusterParams) -> Self {
        let j = design.n_blocks();
        let mut eta = Vec::with_capacity(j);
        let mut mu = Vec::with_capacity(j);
        let mut zero = Vec::with_capacity(j);
        for b in 0..j {
            let e = clamp_eta(dot(design.row(b), &theta.beta), ETA_BOUND);
            let m = e.exp();
            eta.push(e);
            mu.push(m);
            zero.push(log_zero_prob(m, theta.rho));
        }
        Self {
            zero_sum: zero.iter().sum(),
            eta,
            mu,
            zero,
            log1m_rho: (-theta.rho).ln_1p(),
        }
    }

    /// Raw ZIP log-likelihood of one player's row.
    fn player_loglik(&self, player: &PlayerData) -> f64 {
        let mut ll = self.zero_sum - player.ln_fact;
        for &(j, v) in &player.positives {
            ll += self.log1m_rho + v as f64 * self.eta[j] - self.mu[j] - self.zero[j];
        }
        ll
    }
}

/// Sum of ZIP log-probabilities over the member rows under one component.
pub fn loglik_cluster(y: &Array2<u32>, members: &[usize], design: &DesignMatrix, theta: &ClusterParams) -> f64 {
    if members.is_empty() {
        return 0.0;
    }
    let cache = ThetaCache::new(design, theta);
    let data = prepare(y);
    members.iter().map(|&i| cache.player_loglik(&data[i])).sum()
}

/// Posterior probability that a zero cell is a structural zero.
pub fn structural_zero_prob(mu: f64, rho: f64) -> f64 {
    if rho <= 0.0 {
        return 0.0;
    }
    let p0 = rho + (1.0 - rho) * (-mu).exp();
    rho / p0
}

/// Sufficient statistics of the augmented Poisson likelihood for one cluster:
/// per block, the summed counts and the number of non-structural cells.
#[derive(Debug, Clone, Default)]
pub struct PoissonStats {
    pub count_sum: Vec<f64>,
    pub exposure: Vec<f64>,
}

impl PoissonStats {
    pub fn empty(n_blocks: usize) -> Self {
        Self {
            count_sum: vec![0.0; n_blocks],
            exposure: vec![0.0; n_blocks],
        }
    }

    fn log_target(&self, eta_raw: &[f64]) -> f64 {
        let mut ll = 0.0;
        for ((&s, &e), &eta) in self.count_sum.iter().zip(&self.exposure).zip(eta_raw) {
            if e > 0.0 {
                let eta = clamp_eta(eta, ETA_BOUND);
                ll += s * eta - e * eta.exp();
            }
        }
        ll
    }
}

/// Outcome of one coordinate-wise Metropolis pass over a coefficient vector.
#[derive(Debug, Clone)]
pub struct BetaPass {
    pub accepted: Vec<bool>,
    /// Log acceptance ratios of each proposal, `ln(target(prop) / target(cur))`.
    pub log_ratios: Vec<f64>,
}

/// Coordinate-wise Gaussian random-walk Metropolis targeting
/// `N(0, sigma0^2 I) x augmented Poisson likelihood`.
pub fn rw_beta_pass<R: Rng + ?Sized>(
    beta: &mut [f64],
    stats: &PoissonStats,
    design: &DesignMatrix,
    sigma0: f64,
    steps: &[f64],
    rng: &mut R,
) -> BetaPass {
    let j = design.n_blocks();
    let mut eta: Vec<f64> = (0..j).map(|b| dot(design.row(b), beta)).collect();
    let mut current = stats.log_target(&eta);
    let mut prop_eta = vec![0.0; j];
    let inv_var = 1.0 / (sigma0 * sigma0);
    let mut accepted = Vec::with_capacity(beta.len());
    let mut log_ratios = Vec::with_capacity(beta.len());
    for m in 0..beta.len() {
        let eps: f64 = StandardNormal.sample(rng);
        let delta = steps[m] * eps;
        let old = beta[m];
        let new = old + delta;
        for b in 0..j {
            prop_eta[b] = eta[b] + design.x[[b, m]] * delta;
        }
        let proposed = stats.log_target(&prop_eta);
        let log_ratio = proposed - current - 0.5 * inv_var * (new * new - old * old);
        let accept = log_ratio >= 0.0 || rng.gen::<f64>().ln() < log_ratio;
        if accept {
            beta[m] = new;
            std::mem::swap(&mut eta, &mut prop_eta);
            current = proposed;
        }
        accepted.push(accept);
        log_ratios.push(log_ratio);
    }
    BetaPass { accepted, log_ratios }
}

/// Runs the sweeps and owns everything that is not part of the posterior state.
pub struct Sampler<'d> {
    design: &'d DesignMatrix,
    y: Array2<u32>,
    data: Vec<PlayerData>,
    config: FitConfig,
    vn: VnTable,
    log_step: Vec<f64>,
    batch_tries: Vec<usize>,
    batch_accepts: Vec<usize>,
    total_tries: Vec<usize>,
    total_accepts: Vec<usize>,
    n_batches: usize,
    sweeps: usize,
    rng: ChaCha8Rng,
}

impl<'d> Sampler<'d> {
    pub fn new(counts: &CountMatrix, design: &'d DesignMatrix, config: FitConfig) -> Result<Self> {
        Self::with_stream(counts, design, config, 0)
    }

    /// Sampler whose random stream is `stream` under the configured seed.
    pub fn with_stream(counts: &CountMatrix, design: &'d DesignMatrix, config: FitConfig, stream: u64) -> Result<Self> {
        config.validate()?;
        if counts.n_blocks() != design.n_blocks() {
            return Err(Error::Dimension(format!(
                "counts have {} blocks but the design has {}",
                counts.n_blocks(),
                design.n_blocks()
            )));
        }
        if counts.n_players() == 0 {
            return Err(Error::Empty("no players to cluster".into()));
        }
        let p = design.n_coef();
        let log_step = match config.rw_step.len() {
            1 => vec![config.rw_step[0].ln(); p],
            len if len == p => config.rw_step.iter().map(|s| s.ln()).collect(),
            len => {
                return Err(Error::Dimension(format!(
                    "{len} random-walk steps for {p} coefficients"
                )))
            }
        };
        let n = counts.n_players();
        let vn = mfm::compute_vn(n, n, &config.prior)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(stream);
        Ok(Self {
            design,
            y: counts.y.clone(),
            data: prepare(&counts.y),
            vn,
            log_step,
            batch_tries: vec![0; p],
            batch_accepts: vec![0; p],
            total_tries: vec![0; p],
            total_accepts: vec![0; p],
            n_batches: 0,
            sweeps: 0,
            config,
            rng,
        })
    }

    pub fn config(&self) -> &FitConfig {
        &self.config
    }

    pub fn vn(&self) -> &VnTable {
        &self.vn
    }

    pub fn counts(&self) -> &Array2<u32> {
        &self.y
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn steps(&self) -> Vec<f64> {
        self.log_step.iter().map(|l| l.exp()).collect()
    }

    fn n_players(&self) -> usize {
        self.data.len()
    }

    /// Replaces the observed counts, keeping everything else.
    pub fn set_counts(&mut self, y: Array2<u32>) -> Result<()> {
        if y.dim() != self.y.dim() {
            return Err(Error::Dimension("replacement counts change the data shape".into()));
        }
        self.data = prepare(&y);
        self.y = y;
        Ok(())
    }

    fn draw_prior_params(&mut self) -> ClusterParams {
        let sigma0 = self.config.sigma0;
        let beta = (0..self.design.n_coef())
            .map(|_| { let e: f64 = StandardNormal.sample(&mut self.rng); sigma0 * e })
            .collect();
        let rho = self.rng.gen::<f64>().clamp(RHO_CLAMP, 1.0 - RHO_CLAMP);
        ClusterParams { beta, rho }
    }

    /// Starting state per the configured [`Init`].
    pub fn initial_state(&mut self) -> Result<ClusterState> {
        let n = self.n_players();
        let zeros = Array2::<u8>::zeros(self.y.dim());
        let psi = self.config.prior.psi;
        let use_prior = !self.config.use_likelihood || self.config.init == Init::Prior;
        let mut state = if use_prior {
            self.prior_state()?
        } else {
            match self.config.init {
                Init::Singletons => {
                    let fits: Vec<ClusterParams> = (0..n)
                        .into_par_iter()
                        .map_init(ZipMleWorkspace::new, |ws, i| {
                            let row = self.y.row(i).to_vec();
                            ws.fit(&row, self.design).map(|f| clean_fit(f.beta.0, f.rho))
                        })
                        .collect::<Result<_>>()?;
                    ClusterState {
                        z: (0..n).collect(),
                        clusters: fits,
                        w: zeros,
                        psi,
                        k: None,
                    }
                }
                Init::OneCluster => {
                    let pooled: Vec<u32> = (0..self.design.n_blocks())
                        .map(|j| self.y.column(j).sum())
                        .collect();
                    let fit = ZipMleWorkspace::new().fit(&pooled, self.design)?;
                    let mut params = clean_fit(fit.beta.0, fit.rho);
                    // pooled counts scale the mean by n
                    params.beta[0] -= (n as f64).ln();
                    ClusterState {
                        z: vec![0; n],
                        clusters: vec![params],
                        w: zeros,
                        psi,
                        k: None,
                    }
                }
                Init::Prior => unreachable!(),
            }
        };
        self.update_indicators(&mut state);
        Ok(state)
    }

    /// Partition, cluster parameters and indicators drawn from the prior.
    pub fn prior_state(&mut self) -> Result<ClusterState> {
        let z = mfm::sample_partition_prior(&self.vn, &mut self.rng)?;
        let t = z.iter().max().map_or(0, |m| m + 1);
        let clusters = (0..t).map(|_| self.draw_prior_params()).collect();
        Ok(ClusterState {
            z,
            clusters,
            w: Array2::zeros(self.y.dim()),
            psi: self.config.prior.psi,
            k: None,
        })
    }

    /// Draws counts and indicators from the likelihood given the state's parameters.
    pub fn sample_data(&mut self, state: &mut ClusterState) -> Array2<u32> {
        let (n, j) = self.y.dim();
        let mut y = Array2::<u32>::zeros((n, j));
        let caches: Vec<ThetaCache> = state
            .clusters
            .iter()
            .map(|c| ThetaCache::new(self.design, c))
            .collect();
        for i in 0..n {
            let h = state.z[i];
            let rho = state.clusters[h].rho;
            for b in 0..j {
                if self.rng.gen::<f64>() < rho {
                    state.w[[i, b]] = 1;
                } else {
                    state.w[[i, b]] = 0;
                    y[[i, b]] = poisson_draw(caches[h].mu[b], &mut self.rng);
                }
            }
        }
        y
    }

    fn resample_player_indicators(&mut self, state: &mut ClusterState, i: usize, cache: &ThetaCache) {
        let rho = state.clusters[state.z[i]].rho;
        for b in 0..self.y.ncols() {
            state.w[[i, b]] = if self.y[[i, b]] == 0 {
                let p = structural_zero_prob(cache.mu[b], rho);
                u8::from(self.rng.gen::<f64>() < p)
            } else {
                0
            };
        }
    }

    pub fn update_indicators(&mut self, state: &mut ClusterState) {
        if !self.config.use_likelihood {
            return;
        }
        let caches: Vec<ThetaCache> = state
            .clusters
            .iter()
            .map(|c| ThetaCache::new(self.design, c))
            .collect();
        for i in 0..self.n_players() {
            let h = state.z[i];
            self.resample_player_indicators(state, i, &caches[h]);
        }
    }

    /// Collapsed urn update of every label in turn.
    ///
    /// A player's indicators are redrawn right after its label, so the pair
    /// (label, indicators) is updated as a block.
    pub fn update_labels(&mut self, state: &mut ClusterState) -> Result<()> {
        let n = self.n_players();
        let m_aux = self.config.m_aux;
        let gamma = self.config.prior.gamma;
        let use_lik = self.config.use_likelihood;
        let mut sizes = state.sizes();
        let mut caches: Vec<Option<ThetaCache>> = state
            .clusters
            .iter()
            .map(|c| use_lik.then(|| ThetaCache::new(self.design, c)))
            .collect();

        for i in 0..n {
            let old = state.z[i];
            sizes[old] -= 1;
            let mut aux: Vec<(ClusterParams, Option<ThetaCache>)> = Vec::with_capacity(m_aux);
            if sizes[old] == 0 {
                aux.push((state.clusters[old].clone(), caches[old].take()));
            }
            while aux.len() < m_aux {
                let theta = self.draw_prior_params();
                let cache = use_lik.then(|| ThetaCache::new(self.design, &theta));
                aux.push((theta, cache));
            }

            let occupied: Vec<usize> = (0..sizes.len()).filter(|&c| sizes[c] > 0).collect();
            let t = occupied.len();
            let new_log_weight = if t == 0 {
                0.0
            } else {
                gamma.ln() + self.vn.log_v(t + 1) - self.vn.log_v(t) - (m_aux as f64).ln()
            };
            let player = &self.data[i];
            let mut logw = Vec::with_capacity(t + m_aux);
            for &c in &occupied {
                let ll = caches[c].as_ref().map_or(0.0, |cc| cc.player_loglik(player));
                logw.push((sizes[c] as f64 + gamma).ln() + ll);
            }
            for (_, cache) in &aux {
                let ll = cache.as_ref().map_or(0.0, |cc| cc.player_loglik(player));
                logw.push(new_log_weight + ll);
            }
            if logw.iter().any(|l| l.is_nan()) {
                return Err(Error::Numeric(format!("NaN label weight for player {i}")));
            }
            let pick = mfm::sample_log_weights(&logw, &mut self.rng);
            let target = if pick < t {
                occupied[pick]
            } else {
                let (theta, cache) = aux.swap_remove(pick - t);
                // reuse an empty slot when one exists
                match sizes.iter().position(|&s| s == 0) {
                    Some(slot) => {
                        state.clusters[slot] = theta;
                        caches[slot] = cache;
                        slot
                    }
                    None => {
                        state.clusters.push(theta);
                        caches.push(cache);
                        sizes.push(0);
                        sizes.len() - 1
                    }
                }
            };
            sizes[target] += 1;
            state.z[i] = target;
            if use_lik {
                let cache = caches[target].take().expect("occupied cluster has a cache");
                self.resample_player_indicators(state, i, &cache);
                caches[target] = Some(cache);
            }
        }
        state.compact();
        Ok(())
    }

    fn cluster_stats(&self, state: &ClusterState) -> Vec<PoissonStats> {
        let j = self.y.ncols();
        let mut stats: Vec<PoissonStats> = (0..state.n_clusters()).map(|_| PoissonStats::empty(j)).collect();
        if !self.config.use_likelihood {
            return stats;
        }
        for i in 0..self.n_players() {
            let s = &mut stats[state.z[i]];
            for b in 0..j {
                if state.w[[i, b]] == 0 {
                    s.count_sum[b] += self.y[[i, b]] as f64;
                    s.exposure[b] += 1.0;
                }
            }
        }
        stats
    }

    pub fn update_beta(&mut self, state: &mut ClusterState) {
        let stats = self.cluster_stats(state);
        let sizes = state.sizes();
        let base: Vec<f64> = self.log_step.iter().map(|l| l.exp()).collect();
        for (h, params) in state.clusters.iter_mut().enumerate() {
            let scale = 1.0 / (sizes[h].max(1) as f64).sqrt();
            let steps: Vec<f64> = base.iter().map(|s| s * scale).collect();
            let pass = rw_beta_pass(&mut params.beta, &stats[h], self.design, self.config.sigma0, &steps, &mut self.rng);
            for (m, &acc) in pass.accepted.iter().enumerate() {
                self.batch_tries[m] += 1;
                self.batch_accepts[m] += usize::from(acc);
                if self.sweeps >= self.config.n_burnin {
                    self.total_tries[m] += 1;
                    self.total_accepts[m] += usize::from(acc);
                }
            }
        }
    }

    pub fn update_rho(&mut self, state: &mut ClusterState) {
        let j = self.y.ncols();
        let sizes = state.sizes();
        let mut structural = vec![0usize; state.n_clusters()];
        if self.config.use_likelihood {
            for i in 0..self.n_players() {
                structural[state.z[i]] += state.w.row(i).iter().map(|&v| v as usize).sum::<usize>();
            }
        }
        for (h, params) in state.clusters.iter_mut().enumerate() {
            let (a, b) = if self.config.use_likelihood {
                let cells = sizes[h] * j;
                (1.0 + structural[h] as f64, 1.0 + (cells - structural[h]) as f64)
            } else {
                (1.0, 1.0)
            };
            let draw: f64 = Beta::new(a, b).expect("positive shapes").sample(&mut self.rng);
            params.rho = draw.clamp(RHO_CLAMP, 1.0 - RHO_CLAMP);
        }
    }

    /// Resamples the number of components given the occupied clusters, then `psi`.
    pub fn update_psi(&mut self, state: &mut ClusterState) -> Result<()> {
        if !self.config.update_psi {
            return Ok(());
        }
        let n = self.n_players();
        let t = state.n_clusters();
        let prior = self.config.prior.with_psi(state.psi);
        let k = mfm::sample_components(n, t, &prior, &mut self.rng)?;
        let psi = match prior.k_prior {
            KPrior::Shifted => {
                // Gamma(1, 1) prior with (k - 1) ~ Poisson(psi)
                let g = Gamma::new(1.0 + (k - 1) as f64, 0.5).expect("valid gamma");
                g.sample(&mut self.rng)
            }
            KPrior::Truncated => {
                let log_target = |psi: f64| -> f64 {
                    // Gamma(1, 1) density, zero-truncated Poisson(k), log-scale Jacobian
                    -psi + k as f64 * psi.ln() - psi - (-(-psi).exp_m1()).ln() + psi.ln()
                };
                let cur = state.psi;
                let eps: f64 = StandardNormal.sample(&mut self.rng);
                let prop = cur * (0.5 * eps).exp();
                if self.rng.gen::<f64>().ln() < log_target(prop) - log_target(cur) {
                    prop
                } else {
                    cur
                }
            }
        };
        state.psi = psi.max(1e-12);
        state.k = Some(k);
        self.vn = mfm::compute_vn(n, n, &self.config.prior.with_psi(state.psi))?;
        Ok(())
    }

    fn adapt(&mut self) {
        if !self.config.adapt || self.sweeps > self.config.n_burnin {
            return;
        }
        if self.sweeps % ADAPT_BATCH != 0 {
            return;
        }
        self.n_batches += 1;
        let delta = (1.0 / (self.n_batches as f64).sqrt()).min(0.5);
        for m in 0..self.log_step.len() {
            if self.batch_tries[m] > 0 {
                let rate = self.batch_accepts[m] as f64 / self.batch_tries[m] as f64;
                self.log_step[m] += if rate > TARGET_ACCEPT { delta } else { -delta };
            }
            self.batch_tries[m] = 0;
            self.batch_accepts[m] = 0;
        }
    }

    /// One full sweep.
    pub fn sweep(&mut self, state: &mut ClusterState) -> Result<()> {
        self.update_indicators(state);
        self.update_labels(state)?;
        self.update_beta(state);
        self.update_rho(state);
        self.update_psi(state)?;
        self.sweeps += 1;
        self.adapt();
        Ok(())
    }

    /// Unnormalized log posterior of the state, with the indicators marginalized.
    pub fn log_posterior(&self, state: &ClusterState) -> Result<f64> {
        let sigma0 = self.config.sigma0;
        let log_norm = -0.5 * (2.0 * std::f64::consts::PI).ln() - sigma0.ln();
        let mut lp = 0.0;
        if self.config.use_likelihood {
            let caches: Vec<ThetaCache> = state
                .clusters
                .iter()
                .map(|c| ThetaCache::new(self.design, c))
                .collect();
            for (i, player) in self.data.iter().enumerate() {
                lp += caches[state.z[i]].player_loglik(player);
            }
        }
        for c in &state.clusters {
            lp += c
                .beta
                .iter()
                .map(|b| log_norm - 0.5 * (b / sigma0).powi(2))
                .sum::<f64>();
        }
        lp += mfm::log_partition_prior(&state.sizes(), &self.vn)?;
        if self.config.update_psi {
            lp -= state.psi;
        }
        Ok(lp)
    }

    pub fn record(&self, state: &ClusterState, iteration: usize) -> Result<TraceDraw> {
        let log_posterior = self.log_posterior(state)?;
        if !log_posterior.is_finite() {
            return Err(Error::NonFinite {
                iteration,
                dump: serde_json::to_string(&(&state.z, &state.clusters, state.psi))?,
            });
        }
        Ok(TraceDraw {
            iteration,
            labels: state.z.iter().map(|&c| c + 1).collect(),
            betas: state.clusters.iter().map(|c| c.beta.clone()).collect(),
            rhos: state.clusters.iter().map(|c| c.rho).collect(),
            psi: state.psi,
            n_clusters: state.n_clusters(),
            k: state.k,
            log_posterior,
        })
    }

    /// Runs the configured number of sweeps from `state`, retaining thinned
    /// draws after burn-in.
    pub fn run(&mut self, state: &mut ClusterState) -> Result<McmcTrace> {
        let cfg = self.config.clone();
        let mut draws = Vec::with_capacity(cfg.n_retained());
        let report = (cfg.n_iter / 10).max(1);
        for iter in 1..=cfg.n_iter {
            self.sweep(state)?;
            if iter > cfg.n_burnin && (iter - cfg.n_burnin) % cfg.thin == 0 {
                draws.push(self.record(state, iter)?);
            }
            if iter % report == 0 {
                log::info!(
                    "iteration {iter}/{}: {} clusters, psi = {:.3}",
                    cfg.n_iter,
                    state.n_clusters(),
                    state.psi
                );
            }
        }
        let acceptance = self
            .total_tries
            .iter()
            .zip(&self.total_accepts)
            .map(|(&t, &a)| if t > 0 { a as f64 / t as f64 } else { f64::NAN })
            .collect();
        Ok(McmcTrace {
            draws,
            acceptance,
            rw_step: self.steps(),
        })
    }
}

fn clean_fit(mut beta: Vec<f64>, rho: f64) -> ClusterParams {
    for b in &mut beta {
        if !b.is_finite() {
            *b = 0.0;
        }
    }
    ClusterParams {
        beta,
        rho: rho.clamp(1e-3, 1.0 - 1e-3),
    }
}

pub fn run_chain(counts: &CountMatrix, design: &DesignMatrix, config: &FitConfig) -> Result<McmcTrace> {
    let mut sampler = Sampler::new(counts, design, config.clone())?;
    let mut state = sampler.initial_state()?;
    sampler.run(&mut state)
}

/// Independent chains on separate random streams of the same seed, run in parallel.
pub fn run_chains(counts: &CountMatrix, design: &DesignMatrix, config: &FitConfig, chains: usize) -> Result<Vec<McmcTrace>> {
    (0..chains as u64)
        .into_par_iter()
        .map(|c| {
            let mut sampler = Sampler::with_stream(counts, design, config.clone(), c)?;
            let mut state = sampler.initial_state()?;
            sampler.run(&mut state)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zip::{zip_logpmf, ZipParams};

    fn toy(n: usize, j: usize, seed: u64) -> (CountMatrix, DesignMatrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cov = Array2::from_shape_fn((j, 2), |_| StandardNormal.sample(&mut rng));
        let design = DesignMatrix::from_covariates(&cov).unwrap();
        let y = Array2::from_shape_fn((n, j), |_| if rng.gen::<f64>() < 0.4 { 0 } else { rng.gen_range(0..6) });
        let ids = (0..n).map(|i| format!("p{i}")).collect();
        (CountMatrix::new(ids, y).unwrap(), design)
    }

    #[test]
    fn loglik_matches_double_loop() {
        let (counts, design) = toy(6, 40, 1);
        let theta = ClusterParams {
            beta: vec![0.3, -0.4, 0.8],
            rho: 0.27,
        };
        let members = [0, 2, 5];
        let mut naive = 0.0;
        for &i in &members {
            for j in 0..40 {
                let mu = crate::zip::link_mean(design.row(j), &crate::zip::RegressionCoef(theta.beta.clone()));
                naive += zip_logpmf(counts.y[[i, j]], ZipParams::new(mu, theta.rho).unwrap());
            }
        }
        let fast = loglik_cluster(&counts.y, &members, &design, &theta);
        assert!((fast - naive).abs() < 1e-10 * naive.abs());
        assert_eq!(loglik_cluster(&counts.y, &[], &design, &theta), 0.0);

        let single = loglik_cluster(&counts.y.slice(ndarray::s![..1, ..1]).to_owned(), &[0], &design.select_blocks(&[0]), &theta);
        let mu = crate::zip::link_mean(design.row(0), &crate::zip::RegressionCoef(theta.beta.clone()));
        assert!((single - zip_logpmf(counts.y[[0, 0]], ZipParams::new(mu, theta.rho).unwrap())).abs() < 1e-12);
    }

    #[test]
    fn indicator_probability() {
        assert_eq!(structural_zero_prob(1.0, 0.0), 0.0);
        assert!((structural_zero_prob(1.0, 0.3) - 0.538_101_526_224_448_9).abs() < 1e-12);
        assert!(structural_zero_prob(200.0, 0.01) > 1.0 - 1e-12);
    }

    #[test]
    fn config_validation() {
        let ok = FitConfig::default();
        assert!(ok.validate().is_ok());
        assert_eq!(ok.n_retained(), 10_000);
        let bad = |f: fn(&mut FitConfig)| {
            let mut c = FitConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.n_burnin = c.n_iter));
        assert!(bad(|c| c.thin = 0));
        assert!(bad(|c| c.m_aux = 0));
        assert!(bad(|c| c.rw_step = vec![0.0]));
        assert!(bad(|c| c.sigma0 = -1.0));
    }

    #[test]
    fn dimension_mismatch_is_reported_before_sampling() {
        let (counts, design) = toy(3, 10, 2);
        let other = design.select_blocks(&[0, 1, 2]);
        assert!(matches!(
            Sampler::new(&counts, &other, FitConfig::default()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn single_player_stays_alone() {
        let (counts, design) = toy(1, 30, 3);
        let cfg = FitConfig {
            n_iter: 50,
            n_burnin: 10,
            ..Default::default()
        };
        let trace = run_chain(&counts, &design, &cfg).unwrap();
        assert!(trace.draws.iter().all(|d| d.n_clusters == 1 && d.labels == vec![1]));
    }

    #[test]
    fn indicators_follow_counts_and_inflation() {
        let (counts, design) = toy(5, 30, 4);
        let cfg = FitConfig {
            n_iter: 2,
            n_burnin: 1,
            ..Default::default()
        };
        let mut s = Sampler::new(&counts, &design, cfg).unwrap();
        let mut state = s.initial_state().unwrap();
        for c in &mut state.clusters {
            c.rho = 0.0;
        }
        s.update_indicators(&mut state);
        assert!(state.w.iter().all(|&v| v == 0));
        for _ in 0..20 {
            s.sweep(&mut state).unwrap();
            state.check(&counts.y).unwrap();
            let sizes = state.sizes();
            assert_eq!(sizes.len(), state.n_clusters());
            assert!(sizes.iter().all(|&v| v > 0));
        }
    }

    #[test]
    fn rho_conditional_mean() {
        let (counts, design) = toy(4, 25, 5);
        let cfg = FitConfig {
            n_iter: 2,
            n_burnin: 1,
            init: Init::OneCluster,
            ..Default::default()
        };
        let mut s = Sampler::new(&counts, &design, cfg).unwrap();
        let mut state = s.initial_state().unwrap();
        let structural: usize = state.w.iter().map(|&v| v as usize).sum();
        let cells = 4 * 25;
        let draws = 40_000;
        let mut sum = 0.0;
        for _ in 0..draws {
            s.update_rho(&mut state);
            sum += state.clusters[0].rho;
        }
        let expected = (1.0 + structural as f64) / (2.0 + cells as f64);
        let a = 1.0 + structural as f64;
        let b = 1.0 + (cells - structural) as f64;
        let sd = (a * b / ((a + b).powi(2) * (a + b + 1.0))).sqrt();
        assert!((sum / draws as f64 - expected).abs() < 4.0 * sd / (draws as f64).sqrt());
    }

    #[test]
    fn all_structural_zeros_push_rho_to_one() {
        let (mut counts, design) = toy(3, 40, 6);
        counts.y.fill(0);
        let cfg = FitConfig {
            n_iter: 2,
            n_burnin: 1,
            init: Init::OneCluster,
            ..Default::default()
        };
        let mut s = Sampler::new(&counts, &design, cfg).unwrap();
        let mut state = s.initial_state().unwrap();
        state.w.fill(1);
        s.update_rho(&mut state);
        // Beta(121, 1) has mean 121/122
        assert!(state.clusters[0].rho > 0.9);
    }

    #[test]
    fn psi_conditional_means() {
        let (counts, design) = toy(1, 10, 7);
        let cfg = FitConfig {
            n_iter: 2,
            n_burnin: 1,
            update_psi: true,
            ..Default::default()
        };
        let mut s = Sampler::new(&counts, &design, cfg).unwrap();
        let mut state = s.initial_state().unwrap();
        // with one player and one cluster, k given t = 1 is almost surely small;
        // check Gamma(1 + (k - 1), 2) via the recorded k
        let mut by_k: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
        for _ in 0..40_000 {
            s.update_psi(&mut state).unwrap();
            let e = by_k.entry(state.k.unwrap()).or_default();
            e.0 += state.psi;
            e.1 += 1;
        }
        let (sum, cnt) = by_k[&1];
        assert!((sum / cnt as f64 - 0.5).abs() < 0.02);

        let fixed_cfg = FitConfig {
            n_iter: 2,
            n_burnin: 1,
            ..Default::default()
        };
        let mut s = Sampler::new(&counts, &design, fixed_cfg).unwrap();
        let mut state = s.initial_state().unwrap();
        s.update_psi(&mut state).unwrap();
        assert_eq!(state.psi, 1.0);
    }

    #[test]
    fn metropolis_ratios_are_reciprocal() {
        let (counts, design) = toy(4, 30, 8);
        let mut stats = PoissonStats::empty(30);
        for j in 0..30 {
            stats.count_sum[j] = counts.y.column(j).sum() as f64;
            stats.exposure[j] = 4.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let start: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
            // force acceptance with a huge target improvement check via deterministic replay
            let mut fwd = start.clone();
            let mut r1 = ChaCha8Rng::seed_from_u64(rng.gen());
            let pass = rw_beta_pass(&mut fwd, &stats, &design, 5.0, &[0.05, 0.05, 0.05], &mut r1);
            if !pass.accepted[0] {
                continue;
            }
            // reverse move of the first coordinate from the accepted point
            let mut rev_point = start.clone();
            rev_point[0] = fwd[0];
            let eta_fwd: Vec<f64> = (0..30).map(|b| dot(design.row(b), &start)).collect();
            let eta_rev: Vec<f64> = (0..30).map(|b| dot(design.row(b), &rev_point)).collect();
            let lp = |eta: &[f64], beta: &[f64]| stats.log_target(eta) - beta.iter().map(|b| b * b).sum::<f64>() / 50.0;
            let forward = lp(&eta_rev, &rev_point) - lp(&eta_fwd, &start);
            let backward = lp(&eta_fwd, &start) - lp(&eta_rev, &rev_point);
            assert!((forward - pass.log_ratios[0]).abs() < 1e-8);
            assert!((forward + backward).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let (counts, design) = toy(8, 30, 9);
        let cfg = FitConfig {
            n_iter: 60,
            n_burnin: 20,
            seed: 42,
            update_psi: true,
            ..Default::default()
        };
        let a = run_chain(&counts, &design, &cfg).unwrap();
        let b = run_chain(&counts, &design, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.draws.len(), 40);
        assert!(a.draws.iter().all(|d| d.log_posterior.is_finite()));
        let mut buf = Vec::new();
        a.write_ndjson(&mut buf).unwrap();
        let back = McmcTrace::read_ndjson(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back.draws, a.draws);
    }

    #[test]
    fn compaction_removes_gaps() {
        let mut state = ClusterState {
            z: vec![2, 0, 2, 4],
            clusters: (0..5).map(|h| ClusterParams { beta: vec![h as f64], rho: 0.5 }).collect(),
            w: Array2::zeros((4, 1)),
            psi: 1.0,
            k: None,
        };
        state.compact();
        assert_eq!(state.z, vec![1, 0, 1, 2]);
        let kept: Vec<f64> = state.clusters.iter().map(|c| c.beta[0]).collect();
        assert_eq!(kept, vec![0.0, 2.0, 4.0]);
    }
}
