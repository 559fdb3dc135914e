//! Posterior summaries: the representative partition, per-player and
//! per-cluster estimates, HPD intervals, and simulation metrics.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::sampler::McmcTrace;

/// `A(i, j) = 1` when items `i` and `j` share a label.
pub fn membership_matrix(labels: &[usize]) -> Array2<u8> {
    let n = labels.len();
    Array2::from_shape_fn((n, n), |(i, j)| u8::from(labels[i] == labels[j]))
}

/// Element-wise mean of the membership matrices of every draw.
pub fn mean_membership(trace: &McmcTrace) -> Result<Array2<f64>> {
    let t = trace.draws.len();
    if t == 0 {
        return Err(Error::Empty("trace holds no draws".into()));
    }
    let n = trace.n_players();
    let mut mean = Array2::<f64>::zeros((n, n));
    for d in &trace.draws {
        let z = &d.labels;
        for i in 0..n {
            for j in i..n {
                if z[i] == z[j] {
                    mean[[i, j]] += 1.0;
                }
            }
        }
    }
    let inv = 1.0 / t as f64;
    for i in 0..n {
        for j in i..n {
            let v = mean[[i, j]] * inv;
            mean[[i, j]] = v;
            mean[[j, i]] = v;
        }
    }
    Ok(mean)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DahlSelection {
    /// Position of the selected draw in the trace.
    pub index: usize,
    /// Its 1-based labels.
    pub labels: Vec<usize>,
    /// Squared distance between its membership matrix and the mean.
    pub distance: f64,
}

/// Least-squares draw selection: the retained draw whose membership matrix is
/// closest to the mean membership matrix. Ties go to the earliest draw.
///
/// Distances are compared exactly in integers: with `C` the co-clustering
/// counts over `T` draws, `T^2 |A - C/T|^2 = sum A (T^2 - 2 T C) + sum C^2`.
pub fn dahl_select(trace: &McmcTrace) -> Result<DahlSelection> {
    let t = trace.draws.len();
    if t == 0 {
        return Err(Error::Empty("trace holds no draws".into()));
    }
    let n = trace.n_players();
    let mut together = Array2::<u64>::zeros((n, n));
    for d in &trace.draws {
        let z = &d.labels;
        for i in 0..n {
            for j in i..n {
                if z[i] == z[j] {
                    together[[i, j]] += 1;
                }
            }
        }
    }
    let tt = t as i128;
    // full-matrix sum of C^2, counting off-diagonal pairs twice
    let mut base: i128 = 0;
    for i in 0..n {
        for j in i..n {
            let c = together[[i, j]] as i128;
            base += if i == j { c * c } else { 2 * c * c };
        }
    }
    let mut best: Option<(usize, i128)> = None;
    for (idx, d) in trace.draws.iter().enumerate() {
        let z = &d.labels;
        let mut dist = base;
        for i in 0..n {
            dist += tt * tt - 2 * tt * together[[i, i]] as i128;
            for j in i + 1..n {
                if z[i] == z[j] {
                    dist += 2 * (tt * tt - 2 * tt * together[[i, j]] as i128);
                }
            }
        }
        if best.is_none_or(|(_, b)| dist < b) {
            best = Some((idx, dist));
        }
    }
    let (index, scaled) = best.expect("non-empty trace");
    Ok(DahlSelection {
        index,
        labels: canonical_labels(&trace.draws[index].labels),
        distance: scaled as f64 / (tt * tt) as f64,
    })
}

/// Relabels `1..=t` in order of first appearance.
pub fn canonical_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len() + 1;
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

/// Shortest interval holding `ceil(level * T)` consecutive order statistics.
pub fn hpd_interval(draws: &[f64], level: f64) -> Result<(f64, f64)> {
    if draws.is_empty() {
        return Err(Error::Empty("no draws for an HPD interval".into()));
    }
    if !(level > 0.0 && level <= 1.0) {
        return Err(Error::Parameter(format!("HPD level must lie in (0, 1], got {level}")));
    }
    let mut x = draws.to_vec();
    x.sort_by(f64::total_cmp);
    let t = x.len();
    let m = ((level * t as f64).ceil() as usize).clamp(1, t);
    let mut best = (x[0], x[m - 1]);
    for i in 1..=t - m {
        let cand = (x[i], x[i + m - 1]);
        if cand.1 - cand.0 < best.1 - best.0 {
            best = cand;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlayerEstimate {
    pub beta: Vec<f64>,
    pub beta_hpd: Vec<(f64, f64)>,
    pub rho: f64,
    pub rho_hpd: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterEstimate {
    /// 1-based label in the representative partition.
    pub label: usize,
    pub members: Vec<usize>,
    pub beta: Vec<f64>,
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    pub dahl_index: usize,
    pub z_hat: Vec<usize>,
    pub k_hat: usize,
    pub players: Vec<PlayerEstimate>,
    pub clusters: Vec<ClusterEstimate>,
    pub level: f64,
}

/// Per-player posterior means and HPD intervals, with each draw's cluster
/// parameters dereferenced through that draw's labels, plus cluster-level
/// estimates averaged over the members of the representative partition.
pub fn summarize(trace: &McmcTrace, dahl: &DahlSelection, level: f64) -> Result<PosteriorSummary> {
    let t = trace.draws.len();
    if t == 0 {
        return Err(Error::Empty("trace holds no draws".into()));
    }
    let n = trace.n_players();
    if dahl.labels.len() != n {
        return Err(Error::Dimension("partition length differs from the trace".into()));
    }
    let p = trace.draws[0].betas.first().map_or(0, Vec::len);
    let mut players = Vec::with_capacity(n);
    let mut column = vec![0.0; t];
    for i in 0..n {
        let mut beta = Vec::with_capacity(p);
        let mut beta_hpd = Vec::with_capacity(p);
        for m in 0..p {
            for (c, d) in column.iter_mut().zip(&trace.draws) {
                *c = d.player_beta(i)[m];
            }
            beta.push(mean(&column));
            beta_hpd.push(hpd_interval(&column, level)?);
        }
        for (c, d) in column.iter_mut().zip(&trace.draws) {
            *c = d.player_rho(i);
        }
        players.push(PlayerEstimate {
            beta,
            beta_hpd,
            rho: mean(&column),
            rho_hpd: hpd_interval(&column, level)?,
        });
    }

    let k_hat = dahl.labels.iter().copied().max().unwrap_or(0);
    let clusters = (1..=k_hat)
        .map(|label| {
            let members: Vec<usize> = (0..n).filter(|&i| dahl.labels[i] == label).collect();
            let size = members.len() as f64;
            let beta = (0..p)
                .map(|m| members.iter().map(|&i| players[i].beta[m]).sum::<f64>() / size)
                .collect();
            let rho = members.iter().map(|&i| players[i].rho).sum::<f64>() / size;
            ClusterEstimate {
                label,
                members,
                beta,
                rho,
            }
        })
        .collect();
    Ok(PosteriorSummary {
        dahl_index: dahl.index,
        z_hat: dahl.labels.clone(),
        k_hat,
        players,
        clusters,
        level,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl PosteriorSummary {
    pub fn write_partition(&self, path: &Path, player_ids: &[String]) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["player_id", "cluster"])?;
        for (id, z) in player_ids.iter().zip(&self.z_hat) {
            w.write_record([id.as_str(), &z.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// One row per cluster: size, extra-zero probability, then coefficients.
    pub fn write_estimates(&self, path: &Path) -> Result<()> {
        let p = self.clusters.first().map_or(0, |c| c.beta.len());
        let mut w = csv_writer(path)?;
        let mut header = vec!["cluster".to_string(), "size".into(), "rho".into()];
        header.extend((0..p).map(|m| format!("beta_{m}")));
        w.write_record(&header)?;
        for c in &self.clusters {
            let mut row = vec![c.label.to_string(), c.members.len().to_string(), fmt(c.rho)];
            row.extend(c.beta.iter().map(|&b| fmt(b)));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Long format: player, parameter, mean, lower, upper.
    pub fn write_hpd(&self, path: &Path, player_ids: &[String]) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["player_id", "parameter", "mean", "lower", "upper"])?;
        for (id, est) in player_ids.iter().zip(&self.players) {
            w.write_record([id.as_str(), "rho", &fmt(est.rho), &fmt(est.rho_hpd.0), &fmt(est.rho_hpd.1)])?;
            for (m, (b, (lo, hi))) in est.beta.iter().zip(&est.beta_hpd).enumerate() {
                w.write_record([id.as_str(), &format!("beta_{m}"), &fmt(*b), &fmt(*lo), &fmt(*hi)])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// Reads a `player_id,cluster` file as written by
/// [`PosteriorSummary::write_partition`].
pub fn read_partition(path: &Path) -> Result<(Vec<String>, Vec<usize>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(std::io::BufReader::new(file));
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() < 2 {
            return Err(Error::Format {
                path: path.into(),
                message: format!("row {}: expected player_id,cluster", row + 1),
            });
        }
        let label = rec[1].trim().parse::<usize>().map_err(|_| Error::Format {
            path: path.into(),
            message: format!("row {}: '{}' is not a cluster label", row + 1, &rec[1]),
        })?;
        ids.push(rec[0].to_string());
        labels.push(label);
    }
    if ids.is_empty() {
        return Err(Error::Empty(format!("{} lists no players", path.display())));
    }
    Ok((ids, labels))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(f)))
}

/// Point estimates and intervals of one replicate, indexed `[player][coefficient]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateEstimates {
    pub estimates: Vec<Vec<f64>>,
    pub intervals: Vec<Vec<(f64, f64)>>,
}

impl ReplicateEstimates {
    /// The coefficients of a posterior summary, optionally followed by `rho`.
    pub fn from_summary(s: &PosteriorSummary, with_rho: bool) -> Self {
        let estimates = s
            .players
            .iter()
            .map(|p| {
                let mut v = p.beta.clone();
                if with_rho {
                    v.push(p.rho);
                }
                v
            })
            .collect();
        let intervals = s
            .players
            .iter()
            .map(|p| {
                let mut v = p.beta_hpd.clone();
                if with_rho {
                    v.push(p.rho_hpd);
                }
                v
            })
            .collect();
        Self { estimates, intervals }
    }
}

/// Mean absolute bias, mean standard deviation, mean squared error and mean
/// coverage rate, one entry per coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct SimMetrics {
    pub mab: Vec<f64>,
    pub msd: Vec<f64>,
    pub mmse: Vec<f64>,
    pub mcr: Vec<f64>,
}

/// Metrics across `R` replicates for `L` players; `truth` is `[player][coefficient]`.
/// Coverage counts replicates whose interval contains the true value.
pub fn sim_metrics(replicates: &[ReplicateEstimates], truth: &[Vec<f64>]) -> Result<SimMetrics> {
    let r = replicates.len();
    if r == 0 {
        return Err(Error::Empty("no replicates".into()));
    }
    let l = truth.len();
    let m_count = truth.first().map_or(0, Vec::len);
    for rep in replicates {
        if rep.estimates.len() != l || rep.intervals.len() != l || rep.estimates.iter().any(|e| e.len() != m_count) {
            return Err(Error::Dimension("replicate estimates do not match the truth".into()));
        }
    }
    let rf = r as f64;
    let mut out = SimMetrics {
        mab: vec![0.0; m_count],
        msd: vec![0.0; m_count],
        mmse: vec![0.0; m_count],
        mcr: vec![0.0; m_count],
    };
    for m in 0..m_count {
        for (player, truth_row) in truth.iter().enumerate() {
            let tv = truth_row[m];
            let est: Vec<f64> = replicates.iter().map(|rep| rep.estimates[player][m]).collect();
            let avg = est.iter().sum::<f64>() / rf;
            out.mab[m] += est.iter().map(|e| (e - tv).abs()).sum::<f64>() / rf;
            out.mmse[m] += est.iter().map(|e| (e - tv).powi(2)).sum::<f64>() / rf;
            let dof = if r > 1 { rf - 1.0 } else { 1.0 };
            out.msd[m] += (est.iter().map(|e| (e - avg).powi(2)).sum::<f64>() / dof).sqrt();
            out.mcr[m] += replicates
                .iter()
                .filter(|rep| {
                    let (lo, hi) = rep.intervals[player][m];
                    lo <= tv && tv <= hi
                })
                .count() as f64
                / rf;
        }
        let lf = l as f64;
        out.mab[m] /= lf;
        out.msd[m] /= lf;
        out.mmse[m] /= lf;
        out.mcr[m] /= lf;
    }
    Ok(out)
}
