//! Synthetic datasets with three player groups of known ZIP parameters.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::baselines::{build_features, kmeans, mean_shift, rand_index, silverman_bandwidth, FeatureKind};
use crate::basis::DesignMatrix;
use crate::court::CountMatrix;
use crate::error::{Error, Result};
use crate::posterior::{dahl_select, summarize, ReplicateEstimates};
use crate::sampler::{run_chain, FitConfig};
use crate::zip::{link_mean, zip_sample, RegressionCoef, ZipParams};

pub const TRUE_BETAS: [[f64; 6]; 3] = [
    [-1.0, 1.2, 0.95, 1.1, 1.0, 0.8],
    [-0.4, 0.6, 0.7, 0.5, 0.8, 0.3],
    [-0.9, 0.2, 0.1, 0.3, 0.2, 0.4],
];
pub const TRUE_RHOS: [f64; 3] = [0.1, 0.3, 0.4];

/// Blocks kept by the reduced-scale preset.
pub const DESK_BLOCKS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignType {
    Balanced,
    Imbalanced,
}

impl std::str::FromStr for DesignType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced" => Ok(DesignType::Balanced),
            "imbalanced" => Ok(DesignType::Imbalanced),
            other => Err(Error::Parameter(format!("unknown design type '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// 75 players on every block.
    Full,
    /// 30 players on 200 blocks.
    Desk,
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Scale::Full),
            "desk" => Ok(Scale::Desk),
            other => Err(Error::Parameter(format!("unknown scale '{other}'"))),
        }
    }
}

impl DesignType {
    pub fn group_sizes(self, scale: Scale) -> Vec<usize> {
        match (self, scale) {
            (DesignType::Balanced, Scale::Full) => vec![25, 25, 25],
            (DesignType::Imbalanced, Scale::Full) => vec![10, 35, 30],
            (DesignType::Balanced, Scale::Desk) => vec![10, 10, 10],
            (DesignType::Imbalanced, Scale::Desk) => vec![4, 14, 12],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimDesign {
    pub group_sizes: Vec<usize>,
    pub true_betas: Vec<Vec<f64>>,
    pub true_rhos: Vec<f64>,
    pub design: DesignMatrix,
}

impl SimDesign {
    pub fn new(group_sizes: Vec<usize>, true_betas: Vec<Vec<f64>>, true_rhos: Vec<f64>, design: DesignMatrix) -> Result<Self> {
        let k = group_sizes.len();
        if k == 0 || true_betas.len() != k || true_rhos.len() != k {
            return Err(Error::Dimension("group sizes, coefficients and rhos must share one length".into()));
        }
        if group_sizes.contains(&0) {
            return Err(Error::Parameter("group sizes must be positive".into()));
        }
        if true_betas.iter().any(|b| b.len() != design.n_coef()) {
            return Err(Error::Dimension(format!(
                "true coefficients must have {} entries",
                design.n_coef()
            )));
        }
        if true_rhos.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Parameter("true rhos must lie in [0, 1]".into()));
        }
        Ok(Self {
            group_sizes,
            true_betas,
            true_rhos,
            design,
        })
    }

    pub fn n_players(&self) -> usize {
        self.group_sizes.iter().sum()
    }

    /// 1-based group of every player; groups are contiguous.
    pub fn true_labels(&self) -> Vec<usize> {
        self.group_sizes
            .iter()
            .enumerate()
            .flat_map(|(g, &s)| std::iter::repeat_n(g + 1, s))
            .collect()
    }

    /// True coefficients of every player, `[player][coefficient]`.
    pub fn player_betas(&self) -> Vec<Vec<f64>> {
        self.true_labels()
            .iter()
            .map(|&g| self.true_betas[g - 1].clone())
            .collect()
    }
}

/// The three-group design at full scale.
pub fn full_design(kind: DesignType, design: DesignMatrix) -> Result<SimDesign> {
    sim_design(kind, Scale::Full, design)
}

pub fn sim_design(kind: DesignType, scale: Scale, design: DesignMatrix) -> Result<SimDesign> {
    SimDesign::new(
        kind.group_sizes(scale),
        TRUE_BETAS.iter().map(|b| b.to_vec()).collect(),
        TRUE_RHOS.to_vec(),
        design,
    )
}

/// Intercept plus `p` independent standard-normal columns, each standardized.
pub fn synthetic_design<R: Rng + ?Sized>(n_blocks: usize, p: usize, rng: &mut R) -> Result<DesignMatrix> {
    let cov = Array2::from_shape_fn((n_blocks, p), |_| StandardNormal.sample(rng));
    DesignMatrix::from_covariates(&cov)
}

/// The design used at a given scale: the supplied one (sub-sampled to
/// [`DESK_BLOCKS`] rows at desk scale) or a synthetic one.
pub fn design_for_scale<R: Rng + ?Sized>(scale: Scale, supplied: Option<&DesignMatrix>, rng: &mut R) -> Result<DesignMatrix> {
    match (scale, supplied) {
        (Scale::Full, Some(d)) => Ok(d.clone()),
        (Scale::Full, None) => synthetic_design(crate::court::CourtGrid::standard().n_blocks(), 5, rng),
        (Scale::Desk, Some(d)) => {
            if d.n_blocks() < DESK_BLOCKS {
                return Ok(d.clone());
            }
            let mut blocks = sample(rng, d.n_blocks(), DESK_BLOCKS).into_vec();
            blocks.sort_unstable();
            Ok(d.select_blocks(&blocks))
        }
        (Scale::Desk, None) => synthetic_design(DESK_BLOCKS, 5, rng),
    }
}

/// Draws `y_ij ~ ZIP(exp(x_j . beta_g), rho_g)` for every player's group `g`.
/// Returns the counts and the 1-based true labels.
pub fn generate<R: Rng + ?Sized>(design: &SimDesign, rng: &mut R) -> Result<(CountMatrix, Vec<usize>)> {
    let labels = design.true_labels();
    let j = design.design.n_blocks();
    let means: Vec<Vec<f64>> = design
        .true_betas
        .iter()
        .map(|b| {
            let coef = RegressionCoef(b.clone());
            (0..j).map(|jj| link_mean(design.design.row(jj), &coef)).collect()
        })
        .collect();
    let mut y = Array2::<u32>::zeros((labels.len(), j));
    for (i, &g) in labels.iter().enumerate() {
        for jj in 0..j {
            let params = ZipParams::new(means[g - 1][jj], design.true_rhos[g - 1])?;
            y[[i, jj]] = zip_sample(params, rng);
        }
    }
    let ids = (0..labels.len()).map(|i| format!("sim{:03}", i + 1)).collect();
    Ok((CountMatrix::new(ids, y)?, labels))
}

/// Random stream for replicate `r` of a run seeded with `master`.
pub fn replicate_rng(master: u64, r: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(r);
    rng
}

/// Chain seed for replicate `r`: one SplitMix64 step on `master + r + 1`.
pub fn replicate_chain_seed(master: u64, r: u64) -> u64 {
    let mut z = master.wrapping_add(r.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Everything one simulation replicate contributes to the comparison tables.
#[derive(Debug, Clone)]
pub struct ReplicateResult {
    pub replicate: u64,
    pub truth: Vec<usize>,
    pub mfm_labels: Vec<usize>,
    pub kmeans_labels: Vec<usize>,
    pub meanshift_labels: Vec<usize>,
    pub k_hat: usize,
    pub ri_mfm: f64,
    pub ri_kmeans: f64,
    pub ri_meanshift: f64,
    /// Per-player coefficient estimates and 95% HPD intervals.
    pub estimates: ReplicateEstimates,
}

/// Generates replicate `r`, fits the MFM model and both baselines, and scores
/// each partition against the truth. k-means uses the true group count.
pub fn run_replicate(sim: &SimDesign, master: u64, r: u64, config: &FitConfig) -> Result<ReplicateResult> {
    let (counts, truth) = generate(sim, &mut replicate_rng(master, r))?;
    let seed = replicate_chain_seed(master, r);
    let cfg = FitConfig { seed, ..config.clone() };
    let trace = run_chain(&counts, &sim.design, &cfg)?;
    let dahl = dahl_select(&trace)?;
    let summary = summarize(&trace, &dahl, 0.95)?;

    let features = build_features(&counts, &sim.design, &FeatureKind::ZipMle)?;
    let km = kmeans(&features.values, sim.group_sizes.len(), 10, seed)?;
    let ms = mean_shift(&features.values, &silverman_bandwidth(&features.values))?;

    Ok(ReplicateResult {
        replicate: r,
        ri_mfm: rand_index(&summary.z_hat, &truth)?,
        ri_kmeans: rand_index(&km.labels, &truth)?,
        ri_meanshift: rand_index(&ms, &truth)?,
        k_hat: summary.k_hat,
        estimates: ReplicateEstimates::from_summary(&summary, false),
        mfm_labels: summary.z_hat,
        kmeans_labels: km.labels,
        meanshift_labels: ms,
        truth,
    })
}
