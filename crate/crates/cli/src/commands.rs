//! Subcommand implementations. Each one reads its inputs from files and
//! writes its outputs to files, so stages can be run separately.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use mfmzip::baselines::{self, FeatureKind};
use mfmzip::basis::{self, DesignMatrix, NmfOptions};
use mfmzip::court::{self, CountMatrix, CourtGrid, IngestOptions, ShotRecord};
use mfmzip::mfm::{KPrior, MfmPrior};
use mfmzip::posterior::{self, PosteriorSummary};
use mfmzip::sampler::{self, FitConfig, Init, McmcTrace};
use mfmzip::simgen::{self, DesignType, Scale, SimDesign};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{
    manifest, plotdata, BasisArgs, Command, CountsArgs, EvalArgs, FeatureArg, FitArgs, IngestArgs, InitArg, KPriorArg,
    NmfArgs, PipelineArgs, PlotArgs, PlotKind, SamplerArgs, SimScale, SimType, SimulateArgs, SummarizeArgs,
};

pub fn run(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Counts(a) => counts(a),
        Command::Basis(a) => basis_cmd(a),
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Summarize(a) => summarize(a),
        Command::Eval(a) => eval(a),
        Command::Plotdata(a) => plot(a),
        Command::Pipeline(a) => pipeline(a),
    }
}

impl From<&IngestArgs> for IngestOptions {
    fn from(a: &IngestArgs) -> Self {
        IngestOptions {
            reflect: a.reflect,
            min_attempts: a.min_attempts,
            exclude: a.exclude.clone(),
        }
    }
}

impl From<SimType> for DesignType {
    fn from(t: SimType) -> Self {
        match t {
            SimType::Balanced => DesignType::Balanced,
            SimType::Imbalanced => DesignType::Imbalanced,
        }
    }
}

impl From<SimScale> for Scale {
    fn from(s: SimScale) -> Self {
        match s {
            SimScale::Full => Scale::Full,
            SimScale::Desk => Scale::Desk,
        }
    }
}

impl SamplerArgs {
    pub fn fit_config(&self, seed: u64) -> Result<FitConfig> {
        let k_prior = match self.kprior {
            KPriorArg::Truncated => KPrior::Truncated,
            KPriorArg::Shifted => KPrior::Shifted,
        };
        let cfg = FitConfig {
            n_iter: self.iters,
            n_burnin: self.burnin,
            thin: self.thin,
            sigma0: self.sigma0,
            rw_step: self.rw_step.clone(),
            adapt: !self.no_adapt,
            m_aux: self.m_aux,
            seed,
            prior: MfmPrior::new(self.psi, MfmPrior::default().gamma, k_prior)?,
            update_psi: self.psi_gamma_prior,
            use_likelihood: true,
            init: match self.init {
                InitArg::Singletons => Init::Singletons,
                InitArg::OneCluster => Init::OneCluster,
                InitArg::Prior => Init::Prior,
            },
        };
        cfg.validate()?;
        ensure!(self.chains >= 1, "need at least one chain");
        Ok(cfg)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating directory {}", dir.display()))
}

fn read_shots(path: &Path, ingest: &IngestArgs) -> Result<Vec<ShotRecord>> {
    let records = court::read_shots(path, &ingest.into())?;
    ensure!(!records.is_empty(), "{}: no shots left after filtering", path.display());
    Ok(records)
}

fn counts(a: &CountsArgs) -> Result<()> {
    let records = read_shots(&a.shots, &a.ingest)?;
    let y = court::bin_shots(&records, &CourtGrid::standard(), &court::players_in_order(&records))?;
    if a.binary {
        y.write_binary(&a.out)?;
    } else {
        y.write_csv(&a.out)?;
    }
    if let Some(path) = &a.histogram {
        write_histograms(path, &y)?;
    }
    log::info!("{} players binned into {}", y.n_players(), a.out.display());
    Ok(())
}

/// Blocks per count bucket for every player.
pub fn write_histograms(path: &Path, y: &CountMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    let mut header_done = false;
    for (i, id) in y.player_ids.iter().enumerate() {
        let hist = court::count_histogram(y, i)?;
        if !header_done {
            let names: Vec<String> = hist.keys().map(|b| b.to_string()).collect();
            writeln!(w, "player_id,{}", names.join(","))?;
            header_done = true;
        }
        let vals: Vec<String> = hist.values().map(|v| v.to_string()).collect();
        writeln!(w, "{id},{}", vals.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Output of the basis stage.
pub struct BasisOutput {
    pub b: ndarray::Array2<f64>,
    pub design: DesignMatrix,
}

fn build_basis(records: &[ShotRecord], nmf: &NmfArgs, seed: u64, out_dir: &Path) -> Result<BasisOutput> {
    let grid = CourtGrid::standard();
    let lambda = basis::intensity_matrix(records, &grid, nmf.bandwidth)?;
    let opts = NmfOptions {
        rank: nmf.rank,
        max_iter: nmf.max_iter,
        tol: nmf.tol,
        restarts: nmf.restarts,
        seed,
    };
    let factors = basis::nmf(&lambda.lambda, &opts)?;
    let design = basis::build_design(&factors.b)?;
    create_dir(out_dir)?;
    basis::write_basis_csv(&out_dir.join("basis.csv"), &factors.b)?;
    design.write_csv(&out_dir.join("design.csv"))?;
    for (m, row) in factors.b.rows().into_iter().enumerate() {
        plotdata::write_surface(&out_dir.join(format!("plot_basis_{}.csv", m + 1)), &grid, &row.to_vec())?;
    }
    log::info!("NMF rank {} finished at divergence {:.6}", factors.rank(), factors.objective());
    Ok(BasisOutput { b: factors.b, design })
}

fn basis_cmd(a: &BasisArgs) -> Result<()> {
    let records = read_shots(&a.shots, &a.ingest)?;
    build_basis(&records, &a.nmf, a.seed, &a.out_dir)?;
    Ok(())
}

fn write_truth(path: &Path, ids: &[String], labels: &[usize]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "player_id,cluster")?;
    for (id, z) in ids.iter().zip(labels) {
        writeln!(w, "{id},{z}")?;
    }
    w.flush()?;
    Ok(())
}

fn write_truth_params(path: &Path, sim: &SimDesign) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    let p = sim.design.n_coef();
    let betas: Vec<String> = (0..p).map(|m| format!("beta_{m}")).collect();
    writeln!(w, "cluster,size,rho,{}", betas.join(","))?;
    for g in 0..sim.group_sizes.len() {
        let b: Vec<String> = sim.true_betas[g].iter().map(|v| v.to_string()).collect();
        writeln!(w, "{},{},{},{}", g + 1, sim.group_sizes[g], sim.true_rhos[g], b.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Files written by the simulation stage.
pub struct SimOutput {
    pub sim: SimDesign,
    pub design_path: PathBuf,
    pub truth_path: PathBuf,
    pub count_paths: Vec<PathBuf>,
}

fn simulate_into(kind: SimType, scale: SimScale, replicates: usize, seed: u64, design: Option<&Path>, out_dir: &Path) -> Result<SimOutput> {
    ensure!(replicates >= 1, "need at least one replicate");
    let supplied = design.map(DesignMatrix::read_csv).transpose()?;
    // the design draw gets its own stream so replicate streams stay untouched
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let x = simgen::design_for_scale(scale.into(), supplied.as_ref(), &mut rng)?;
    let sim = simgen::sim_design(kind.into(), scale.into(), x)?;
    create_dir(out_dir)?;
    let design_path = out_dir.join("design.csv");
    sim.design.write_csv(&design_path)?;
    write_truth_params(&out_dir.join("truth_params.csv"), &sim)?;
    let mut count_paths = Vec::with_capacity(replicates);
    let mut truth = None;
    for r in 0..replicates {
        let (y, labels) = simgen::generate(&sim, &mut simgen::replicate_rng(seed, r as u64))?;
        let path = out_dir.join(format!("rep_{:03}_counts.csv", r + 1));
        y.write_csv(&path)?;
        count_paths.push(path);
        truth.get_or_insert((y.player_ids, labels));
    }
    let (ids, labels) = truth.expect("at least one replicate");
    let truth_path = out_dir.join("truth.csv");
    write_truth(&truth_path, &ids, &labels)?;
    Ok(SimOutput {
        sim,
        design_path,
        truth_path,
        count_paths,
    })
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let out = simulate_into(a.kind, a.scale, a.replicates, a.seed, a.design.as_deref(), &a.out_dir)?;
    log::info!("{} replicates of {} players written", out.count_paths.len(), out.sim.n_players());
    Ok(())
}

/// Trace file of chain `c`; a single chain keeps the name as given.
pub fn chain_path(out: &Path, c: usize, chains: usize) -> PathBuf {
    if chains == 1 {
        return out.to_path_buf();
    }
    let stem = out.file_stem().map_or_else(|| "trace".into(), |s| s.to_string_lossy().into_owned());
    let ext = out.extension().map_or_else(|| "ndjson".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}_chain{}.{ext}", c + 1))
}

fn run_fit(counts: &CountMatrix, design: &DesignMatrix, sampler: &SamplerArgs, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    let cfg = sampler.fit_config(seed)?;
    let traces = sampler::run_chains(counts, design, &cfg, sampler.chains)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut paths = Vec::new();
    for (c, t) in traces.iter().enumerate() {
        let path = chain_path(out, c, traces.len());
        t.write_file(&path)?;
        let accept: Vec<String> = t.acceptance.iter().map(|a| format!("{a:.2}")).collect();
        log::info!("chain {}: {} draws, acceptance [{}]", c + 1, t.draws.len(), accept.join(", "));
        paths.push(path);
    }
    Ok(paths)
}

fn fit(a: &FitArgs) -> Result<()> {
    let y = CountMatrix::read_any(&a.counts)?;
    let design = DesignMatrix::read_csv(&a.design)?;
    run_fit(&y, &design, &a.sampler, a.seed, &a.out)?;
    Ok(())
}

/// Draws of several chains pooled into one trace.
pub fn read_traces(paths: &[PathBuf]) -> Result<McmcTrace> {
    let mut pooled = McmcTrace::default();
    for p in paths {
        let t = McmcTrace::read_file(p)?;
        if let (Some(a), Some(b)) = (pooled.draws.first(), t.draws.first()) {
            ensure!(a.labels.len() == b.labels.len(), "{}: player count differs from the other chains", p.display());
        }
        pooled.draws.extend(t.draws);
    }
    ensure!(!pooled.draws.is_empty(), "trace holds no draws");
    Ok(pooled)
}

/// Trace files for `path`: the file itself, or its `_chainN` siblings.
fn trace_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.exists() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    for c in 0.. {
        let p = chain_path(path, c, 2);
        if !p.exists() {
            break;
        }
        out.push(p);
    }
    if out.is_empty() {
        bail!("{}: trace file not found", path.display());
    }
    Ok(out)
}

fn summarize_into(trace: &McmcTrace, ids: &[String], level: f64, out_dir: &Path) -> Result<PosteriorSummary> {
    ensure!(ids.len() == trace.n_players(), "{} player ids for a trace of {} players", ids.len(), trace.n_players());
    let dahl = posterior::dahl_select(trace)?;
    let s = posterior::summarize(trace, &dahl, level)?;
    create_dir(out_dir)?;
    s.write_partition(&out_dir.join("partition.csv"), ids)?;
    s.write_estimates(&out_dir.join("estimates.csv"))?;
    s.write_hpd(&out_dir.join("hpd.csv"), ids)?;
    let sizes: Vec<String> = s.clusters.iter().map(|c| c.members.len().to_string()).collect();
    println!("k_hat={} sizes={}", s.k_hat, sizes.join("/"));
    Ok(s)
}

fn summarize(a: &SummarizeArgs) -> Result<()> {
    let trace = read_traces(&trace_files(&a.trace)?)?;
    let ids = match &a.counts {
        Some(p) => CountMatrix::read_any(p)?.player_ids,
        None => (1..=trace.n_players()).map(|i| format!("player_{i}")).collect(),
    };
    summarize_into(&trace, &ids, a.level, &a.out_dir)?;
    Ok(())
}

/// One row of the Rand index table.
#[derive(Debug, Clone, PartialEq)]
pub struct RiRow {
    pub method: String,
    pub ri: f64,
    pub n_clusters: usize,
}

fn n_clusters(labels: &[usize]) -> usize {
    let mut v = labels.to_vec();
    v.sort_unstable();
    v.dedup();
    v.len()
}

/// Labels of `ids` looked up in a `player_id,cluster` listing.
fn align(ids: &[String], pred_ids: &[String], labels: &[usize], source: &str) -> Result<Vec<usize>> {
    let map: HashMap<&str, usize> = pred_ids.iter().map(String::as_str).zip(labels.iter().copied()).collect();
    ids.iter()
        .map(|id| {
            map.get(id.as_str())
                .copied()
                .with_context(|| format!("{source}: player '{id}' has no label"))
        })
        .collect()
}

pub fn write_ri_table(path: Option<&Path>, rows: &[RiRow]) -> Result<()> {
    let mut text = String::from("method,ri,n_clusters\n");
    for r in rows {
        text.push_str(&format!("{},{:.4},{}\n", r.method, r.ri, r.n_clusters));
    }
    print!("{text}");
    if let Some(p) = path {
        std::fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

/// k-means and mean shift on per-player features of `counts`.
fn baseline_rows(counts: &CountMatrix, design: &DesignMatrix, kind: &FeatureKind, k: usize, seed: u64, truth: &[usize]) -> Result<Vec<RiRow>> {
    let features = baselines::build_features(counts, design, kind)?;
    let km = baselines::kmeans(&features.values, k, 10, seed)?;
    let ms = baselines::mean_shift(&features.values, &baselines::silverman_bandwidth(&features.values))?;
    Ok(vec![
        RiRow {
            method: format!("kmeans_{}", features.kind),
            ri: baselines::rand_index(&km.labels, truth)?,
            n_clusters: n_clusters(&km.labels),
        },
        RiRow {
            method: format!("meanshift_{}", features.kind),
            ri: baselines::rand_index(&ms, truth)?,
            n_clusters: n_clusters(&ms),
        },
    ])
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (ids, truth) = posterior::read_partition(&a.truth)?;
    ensure!(!a.preds.is_empty() || a.counts.is_some(), "nothing to evaluate: give --pred or --counts");
    let mut rows = Vec::new();
    for spec in &a.preds {
        let Some((name, path)) = spec.split_once('=') else {
            bail!("--pred expects name=path, got '{spec}'");
        };
        let (pred_ids, labels) = posterior::read_partition(Path::new(path))?;
        let labels = align(&ids, &pred_ids, &labels, path)?;
        rows.push(RiRow {
            method: name.to_string(),
            ri: baselines::rand_index(&labels, &truth)?,
            n_clusters: n_clusters(&labels),
        });
    }
    if let Some(counts_path) = &a.counts {
        let y = CountMatrix::read_any(counts_path)?;
        let y_truth = align(&y.player_ids, &ids, &truth, &a.truth.display().to_string())?;
        let design = match &a.design {
            Some(p) => DesignMatrix::read_csv(p)?,
            None => bail!("baselines need --design"),
        };
        let kind = match a.features {
            FeatureArg::ZipMle => FeatureKind::ZipMle,
            FeatureArg::NmfWeights => match &a.basis {
                Some(p) => FeatureKind::NmfWeights {
                    basis: basis::read_basis_csv(p)?,
                },
                None => bail!("--features nmf-weights needs --basis"),
            },
        };
        let k = a.k.or(rows.first().map(|r| r.n_clusters)).unwrap_or_else(|| n_clusters(&truth));
        rows.extend(baseline_rows(&y, &design, &kind, k, a.seed, &y_truth)?);
    }
    write_ri_table(a.out.as_deref(), &rows)
}

fn plot(a: &PlotArgs) -> Result<()> {
    let grid = CourtGrid::standard();
    match a.kind {
        PlotKind::Counts => {
            let y = CountMatrix::read_any(&a.input)?;
            plotdata::counts(&a.out, &grid, &y, a.player.as_deref())
        }
        PlotKind::Partition => {
            let Some(counts_path) = &a.counts else {
                bail!("--kind partition needs --counts");
            };
            let y = CountMatrix::read_any(counts_path)?;
            let (ids, labels) = posterior::read_partition(&a.input)?;
            plotdata::partition(&a.out, &grid, &y, &ids, &labels)
        }
        PlotKind::Basis => {
            let b = basis::read_basis_csv(&a.input)?;
            let names: Vec<String> = (1..=b.nrows()).map(|m| m.to_string()).collect();
            plotdata::write_surfaces(&a.out, &grid, &b, &names, "basis")
        }
    }
}

fn pipeline(a: &PipelineArgs) -> Result<()> {
    let mut m = manifest::Manifest::new(a)?;
    create_dir(&a.out_dir)?;
    match (&a.shots, a.simulate) {
        (Some(shots), false) => pipeline_real(a, shots, &mut m)?,
        (None, true) => pipeline_sim(a, &mut m)?,
        _ => bail!("pipeline needs exactly one of --shots or --simulate"),
    }
    m.write(&a.out_dir)
}

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    log::info!("stage {name}");
    f().with_context(|| format!("stage '{name}' failed"))
}

fn pipeline_real(a: &PipelineArgs, shots: &Path, m: &mut manifest::Manifest) -> Result<()> {
    let dir = &a.out_dir;
    let grid = CourtGrid::standard();
    let counts_dir = dir.join("01_counts");
    let y = stage("counts", || {
        let records = read_shots(shots, &a.ingest)?;
        let y = court::bin_shots(&records, &grid, &court::players_in_order(&records))?;
        create_dir(&counts_dir)?;
        y.write_csv(&counts_dir.join("counts.csv"))?;
        write_histograms(&counts_dir.join("histograms.csv"), &y)?;
        Ok(y)
    })?;
    let nmf_seed = m.derive_seed("basis");
    let basis_out = stage("basis", || {
        // the basis may come from a wider pool of shots than the fitted players
        let records = match &a.basis_shots {
            Some(p) => read_shots(p, &IngestArgs { min_attempts: 0, exclude: Vec::new(), ..a.ingest.clone() })?,
            None => read_shots(shots, &a.ingest)?,
        };
        build_basis(&records, &a.nmf, nmf_seed, &dir.join("02_basis"))
    })?;
    let fit_seed = m.derive_seed("fit");
    let traces = stage("fit", || run_fit(&y, &basis_out.design, &a.sampler, fit_seed, &dir.join("03_fit/trace.ndjson")))?;
    let summary_dir = dir.join("04_summary");
    stage("summarize", || summarize_into(&read_traces(&traces)?, &y.player_ids, a.level, &summary_dir))?;
    stage("plotdata", || {
        let plot_dir = dir.join("05_plotdata");
        create_dir(&plot_dir)?;
        let (ids, labels) = posterior::read_partition(&summary_dir.join("partition.csv"))?;
        plotdata::partition(&plot_dir.join("partition.csv"), &grid, &y, &ids, &labels)?;
        plotdata::counts(&plot_dir.join("counts.csv"), &grid, &y, None)
    })?;
    m.record_outputs(dir)
}

fn pipeline_sim(a: &PipelineArgs, m: &mut manifest::Manifest) -> Result<()> {
    let dir = &a.out_dir;
    let sim_seed = m.derive_seed("simulate");
    let sim = stage("simulate", || simulate_into(a.kind, a.scale, 1, sim_seed, None, &dir.join("01_simulate")))?;
    let y = CountMatrix::read_csv(&sim.count_paths[0])?;
    let design = DesignMatrix::read_csv(&sim.design_path)?;
    let fit_seed = m.derive_seed("fit");
    let traces = stage("fit", || run_fit(&y, &design, &a.sampler, fit_seed, &dir.join("02_fit/trace.ndjson")))?;
    let summary_dir = dir.join("03_summary");
    stage("summarize", || summarize_into(&read_traces(&traces)?, &y.player_ids, a.level, &summary_dir))?;
    stage("eval", || {
        let eval_dir = dir.join("04_eval");
        create_dir(&eval_dir)?;
        let (ids, truth) = posterior::read_partition(&sim.truth_path)?;
        let (pred_ids, labels) = posterior::read_partition(&summary_dir.join("partition.csv"))?;
        let labels = align(&ids, &pred_ids, &labels, "partition.csv")?;
        let mut rows = vec![RiRow {
            method: "mfm".into(),
            ri: baselines::rand_index(&labels, &truth)?,
            n_clusters: n_clusters(&labels),
        }];
        let k = sim.sim.group_sizes.len();
        rows.extend(baseline_rows(&y, &design, &FeatureKind::ZipMle, k, m.derive_seed("baselines"), &truth)?);
        write_ri_table(Some(&eval_dir.join("rand_index.csv")), &rows)
    })?;
    m.record_outputs(dir)
}
