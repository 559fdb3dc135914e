//! Baseline clusterings (k-means and mean shift over per-player feature
//! vectors) and the Rand index used to score every method.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::basis::DesignMatrix;
use crate::court::CountMatrix;
use crate::error::{Error, Result};
use crate::zip::ZipMleWorkspace;

/// Fraction of item pairs on which two partitions agree.
pub fn rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("partitions of {} and {} items", a.len(), b.len())));
    }
    let n = a.len() as u64;
    if n < 2 {
        return Ok(1.0);
    }
    let pairs = |c: u64| c * c.saturating_sub(1) / 2;
    let mut joint = std::collections::HashMap::<(usize, usize), u64>::new();
    let mut rows = std::collections::HashMap::<usize, u64>::new();
    let mut cols = std::collections::HashMap::<usize, u64>::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let together_both: u64 = joint.values().map(|&c| pairs(c)).sum();
    let together_a: u64 = rows.values().map(|&c| pairs(c)).sum();
    let together_b: u64 = cols.values().map(|&c| pairs(c)).sum();
    let total = pairs(n);
    let apart_both = total + together_both - together_a - together_b;
    Ok((together_both + apart_both) as f64 / total as f64)
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    /// 1-based labels.
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    /// Within-cluster sum of squares.
    pub wcss: f64,
    /// Objective after every Lloyd iteration of the winning restart.
    pub trace: Vec<f64>,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum()
}

fn kmeans_pp<R: Rng>(x: &Array2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = x.nrows();
    let mut centers = Array2::<f64>::zeros((k, x.ncols()));
    let first = rng.gen_range(0..n);
    centers.row_mut(0).assign(&x.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                u -= d;
                if u < 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centers.row_mut(c).assign(&x.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), centers.row(c)));
        }
    }
    centers
}

fn assign(x: &Array2<f64>, centers: &Array2<f64>, labels: &mut [usize]) -> f64 {
    let mut total = 0.0;
    for (i, row) in x.rows().into_iter().enumerate() {
        let (best, d) = centers
            .rows()
            .into_iter()
            .enumerate()
            .map(|(c, ctr)| (c, sq_dist(row, ctr)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        labels[i] = best;
        total += d;
    }
    total
}

fn lloyd<R: Rng>(x: &Array2<f64>, k: usize, max_iter: usize, rng: &mut R) -> KMeansFit {
    let n = x.nrows();
    let mut centers = kmeans_pp(x, k, rng);
    let mut labels = vec![0; n];
    let mut trace = vec![assign(x, &centers, &mut labels)];
    for _ in 0..max_iter {
        // update step
        let mut sums = Array2::<f64>::zeros(centers.dim());
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            sums.row_mut(c).scaled_add(1.0, &x.row(i));
            counts[c] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            } else {
                // re-seed an empty cluster at the point farthest from its center
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(x.row(a), centers.row(labels[a]));
                        let db = sq_dist(x.row(b), centers.row(labels[b]));
                        da.total_cmp(&db)
                    })
                    .unwrap();
                centers.row_mut(c).assign(&x.row(far));
            }
        }
        let before = labels.clone();
        let obj = assign(x, &centers, &mut labels);
        trace.push(obj);
        if labels == before {
            break;
        }
    }
    KMeansFit {
        labels: labels.iter().map(|&c| c + 1).collect(),
        wcss: *trace.last().unwrap(),
        centroids: centers,
        trace,
    }
}

/// Lloyd's algorithm from k-means++ seeds; best of `restarts` by WCSS.
pub fn kmeans(features: &Array2<f64>, k: usize, restarts: usize, seed: u64) -> Result<KMeansFit> {
    let n = features.nrows();
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("k = {k} must lie in 1..={n}")));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite feature".into()));
    }
    let fits: Vec<KMeansFit> = (0..restarts.max(1) as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r);
            lloyd(features, k, 300, &mut rng)
        })
        .collect();
    Ok(fits
        .into_iter()
        .min_by(|a, b| a.wcss.total_cmp(&b.wcss))
        .unwrap())
}

/// Silverman's rule of thumb for each feature dimension.
pub fn silverman_bandwidth(features: &Array2<f64>) -> Vec<f64> {
    let (n, d) = features.dim();
    let factor = (4.0 / ((d as f64 + 2.0) * n as f64)).powf(1.0 / (d as f64 + 4.0));
    features
        .axis_iter(Axis(1))
        .map(|col| {
            let sd = if n > 1 { col.std(1.0) } else { 0.0 };
            (sd * factor).max(1e-8)
        })
        .collect()
}

const SHIFT_TOL: f64 = 1e-6;
const SHIFT_MAX_ITER: usize = 500;

/// Gaussian-kernel mean shift with a per-dimension bandwidth.
///
/// Every point climbs to a mode of the kernel density; modes closer than half
/// a bandwidth (single linkage) share a cluster. Labels are 1-based in order
/// of first appearance.
pub fn mean_shift(features: &Array2<f64>, bandwidth: &[f64]) -> Result<Vec<usize>> {
    let (n, d) = features.dim();
    if bandwidth.len() != d || bandwidth.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::Parameter("need one positive bandwidth per feature".into()));
    }
    // work in bandwidth units so the kernel is isotropic
    let scaled = Array2::from_shape_fn((n, d), |(i, m)| features[[i, m]] / bandwidth[m]);
    let modes: Vec<Array1<f64>> = (0..n)
        .into_par_iter()
        .map(|i| climb(&scaled, scaled.row(i).to_owned()))
        .collect();

    // union-find over modes within half a bandwidth
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for a in 0..n {
        for b in a + 1..n {
            if sq_dist(modes[a].view(), modes[b].view()) < 0.25 {
                let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let roots: Vec<usize> = (0..n).map(|i| root(&mut parent, i)).collect();
    Ok(crate::posterior::canonical_labels(&roots))
}

fn climb(points: &Array2<f64>, mut x: Array1<f64>) -> Array1<f64> {
    for _ in 0..SHIFT_MAX_ITER {
        let mut num = Array1::<f64>::zeros(x.len());
        let mut den = 0.0;
        for row in points.rows() {
            let w = (-0.5 * sq_dist(row, x.view())).exp();
            num.scaled_add(w, &row);
            den += w;
        }
        if den <= 0.0 {
            break;
        }
        let next = num / den;
        let step = sq_dist(next.view(), x.view()).sqrt();
        x = next;
        if step < SHIFT_TOL {
            break;
        }
    }
    x
}

/// Per-player feature representation fed to the baselines.
#[derive(Debug, Clone)]
pub enum FeatureKind {
    /// Per-player ZIP estimate: coefficients followed by the extra-zero probability.
    ZipMle,
    /// Non-negative least-squares loadings of the counts on `K x J` basis surfaces.
    NmfWeights { basis: Array2<f64> },
}

#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub values: Array2<f64>,
    pub kind: &'static str,
}

pub fn build_features(counts: &CountMatrix, design: &DesignMatrix, kind: &FeatureKind) -> Result<FeatureMatrix> {
    let n = counts.n_players();
    match kind {
        FeatureKind::ZipMle => {
            let d = design.n_coef() + 1;
            let rows: Vec<Vec<f64>> = (0..n)
                .into_par_iter()
                .map_init(ZipMleWorkspace::new, |ws, i| {
                    let fit = ws.fit(&counts.y.row(i).to_vec(), design)?;
                    let mut v = fit.beta.0;
                    v.push(fit.rho);
                    Ok(v)
                })
                .collect::<Result<_>>()?;
            let values = Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect())
                .map_err(|e| Error::Dimension(e.to_string()))?;
            Ok(FeatureMatrix { values, kind: "zip_mle" })
        }
        FeatureKind::NmfWeights { basis } => {
            if basis.ncols() != counts.n_blocks() {
                return Err(Error::Dimension("basis and counts disagree on the block count".into()));
            }
            let gram = basis.dot(&basis.t());
            let mut values = Array2::<f64>::zeros((n, basis.nrows()));
            for i in 0..n {
                let y = counts.y.row(i).mapv(|v| v as f64);
                let rhs = basis.dot(&y);
                values.row_mut(i).assign(&nnls(&gram, &rhs));
            }
            Ok(FeatureMatrix { values, kind: "nmf_weights" })
        }
    }
}

/// Minimizes `|A^T w - y|^2` over `w >= 0` given `gram = A A^T` and `rhs = A y`,
/// by cyclic coordinate descent.
pub fn nnls(gram: &Array2<f64>, rhs: &Array1<f64>) -> Array1<f64> {
    let k = rhs.len();
    let mut w = Array1::<f64>::zeros(k);
    for _ in 0..10_000 {
        let mut max_change: f64 = 0.0;
        for a in 0..k {
            if gram[[a, a]] <= 0.0 {
                continue;
            }
            let grad = gram.row(a).dot(&w) - rhs[a];
            let next = (w[a] - grad / gram[[a, a]]).max(0.0);
            max_change = max_change.max((next - w[a]).abs() / next.abs().max(1.0));
            w[a] = next;
        }
        if max_change < 1e-12 {
            break;
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn brute_ri(a: &[usize], b: &[usize]) -> f64 {
        let n = a.len();
        let mut agree = 0;
        let mut total = 0;
        for i in 0..n {
            for j in i + 1..n {
                total += 1;
                if (a[i] == a[j]) == (b[i] == b[j]) {
                    agree += 1;
                }
            }
        }
        agree as f64 / total as f64
    }

    #[test]
    fn rand_index_cases() {
        assert_eq!(rand_index(&[1, 1, 2, 2], &[1, 1, 2, 2]).unwrap(), 1.0);
        assert!((rand_index(&[1, 1, 2, 2], &[1, 2, 1, 2]).unwrap() - 2.0 / 6.0).abs() < 1e-15);
        assert!(rand_index(&[1, 2], &[1]).is_err());
    }

    fn clouds(seed: u64, per: usize, centers: &[[f64; 2]], spread: f64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::<f64>::zeros((per * centers.len(), 2));
        let mut truth = Vec::new();
        for (c, ctr) in centers.iter().enumerate() {
            for k in 0..per {
                let i = c * per + k;
                for m in 0..2 {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    x[[i, m]] = ctr[m] + spread * e;
                }
                truth.push(c + 1);
            }
        }
        (x, truth)
    }

    #[test]
    fn kmeans_separates_clouds_monotonically() {
        let (x, truth) = clouds(1, 25, &[[0.0, 0.0], [20.0, 5.0]], 1.0);
        let fit = kmeans(&x, 2, 5, 7).unwrap();
        assert_eq!(rand_index(&fit.labels, &truth).unwrap(), 1.0);
        for w in fit.trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        let again = kmeans(&x, 2, 5, 7).unwrap();
        assert_eq!(fit.labels, again.labels);
    }

    #[test]
    fn kmeans_with_k_equal_n() {
        let (x, _) = clouds(2, 4, &[[0.0, 0.0], [3.0, 3.0]], 1.0);
        let fit = kmeans(&x, 8, 3, 1).unwrap();
        assert!(fit.wcss.abs() < 1e-20);
        let mut l = fit.labels.clone();
        l.sort_unstable();
        l.dedup();
        assert_eq!(l.len(), 8);
        assert!(kmeans(&x, 9, 1, 1).is_err());
    }

    #[test]
    fn mean_shift_clouds() {
        let (x, truth) = clouds(3, 20, &[[0.0, 0.0]], 0.3);
        let l = mean_shift(&x, &[1.0, 1.0]).unwrap();
        assert!(l.iter().all(|&v| v == 1));
        let _ = truth;

        let (x, truth) = clouds(4, 20, &[[0.0, 0.0], [30.0, -30.0]], 0.5);
        let l = mean_shift(&x, &silverman_bandwidth(&x).iter().map(|_| 1.0).collect::<Vec<_>>()).unwrap();
        assert_eq!(rand_index(&l, &truth).unwrap(), 1.0);
    }

    #[test]
    fn mean_shift_fixed_point_at_duplicated_point() {
        let mut x = Array2::<f64>::zeros((6, 2));
        for i in 0..5 {
            x[[i, 0]] = 2.5;
            x[[i, 1]] = -1.0;
        }
        x[[5, 0]] = 10.0;
        let scaled = x.mapv(|v| v / 0.01);
        let mode = climb(&scaled, scaled.row(0).to_owned());
        assert_eq!(mode, scaled.row(0).to_owned());
        let l = mean_shift(&x, &[0.01, 0.01]).unwrap();
        assert_eq!(l, vec![1, 1, 1, 1, 1, 2]);
    }

    #[test]
    fn nnls_matches_unconstrained_when_interior() {
        let a = Array2::from_shape_vec((2, 4), vec![1.0, 2.0, 0.5, 1.0, 0.3, 0.1, 2.0, 1.0]).unwrap();
        let w_true = Array1::from(vec![0.7, 1.3]);
        let y = a.t().dot(&w_true);
        let w = nnls(&a.dot(&a.t()), &a.dot(&y));
        assert!((&w - &w_true).iter().all(|d| d.abs() < 1e-9));

        let y_neg = a.t().dot(&Array1::from(vec![1.0, -2.0]));
        let w = nnls(&a.dot(&a.t()), &a.dot(&y_neg));
        assert!(w.iter().all(|&v| v >= 0.0));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn rand_index_is_symmetric_and_label_free(
                a in proptest::collection::vec(0usize..4, 2..40),
                seed in any::<u64>(),
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let b: Vec<usize> = a.iter().map(|_| rng.gen_range(0..3)).collect();
                let ri = rand_index(&a, &b).unwrap();
                prop_assert_eq!(ri, rand_index(&b, &a).unwrap());
                prop_assert!((ri - brute_ri(&a, &b)).abs() < 1e-15);
                let relabeled: Vec<usize> = a.iter().map(|&v| 10 + (v * 7) % 4 * 3).collect();
                prop_assert_eq!(ri, rand_index(&relabeled, &b).unwrap());
            }

            #[test]
            fn mean_shift_ignores_order(seed in any::<u64>()) {
                let (x, _) = clouds(seed, 8, &[[0.0, 0.0], [4.0, 0.0], [0.0, 9.0]], 1.0);
                let h = silverman_bandwidth(&x);
                let l = mean_shift(&x, &h).unwrap();
                let rev: Vec<usize> = (0..x.nrows()).rev().collect();
                let xr = x.select(Axis(0), &rev);
                let mut lr = mean_shift(&xr, &h).unwrap();
                lr.reverse();
                prop_assert_eq!(rand_index(&l, &lr).unwrap(), 1.0);
            }
        }
    }
}
