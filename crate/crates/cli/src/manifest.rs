//! Reproducibility record of a pipeline run: seeds, a hash of the effective
//! configuration, the source revision and a digest of every output file.
//! It carries no timestamps, so identical runs produce identical manifests.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::PipelineArgs;

const STAGES: [&str; 4] = ["simulate", "basis", "fit", "baselines"];

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub git_rev: String,
    pub mode: String,
    pub master_seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub outputs: BTreeMap<String, String>,
}

/// Seed for a named stage: the first eight bytes of `sha256(master || name)`.
pub fn stage_seed(master: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

/// Current commit of the source tree, or `unknown` outside a checkout.
fn git_rev() -> String {
    if let Ok(rev) = std::env::var("MFMZIP_GIT_REV") {
        return rev;
    }
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

impl Manifest {
    pub fn new(args: &PipelineArgs) -> Result<Self> {
        let mut config = serde_json::to_value(args)?;
        // where the outputs go does not change what they contain
        if let Some(obj) = config.as_object_mut() {
            obj.remove("out_dir");
        }
        let config_hash = hex::encode(Sha256::digest(serde_json::to_vec(&config)?));
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            git_rev: git_rev(),
            mode: if args.simulate { "simulate" } else { "real" }.into(),
            master_seed: args.seed,
            seeds: STAGES.iter().map(|s| (s.to_string(), stage_seed(args.seed, s))).collect(),
            config_hash,
            config,
            outputs: BTreeMap::new(),
        })
    }

    pub fn derive_seed(&self, stage: &str) -> u64 {
        self.seeds.get(stage).copied().unwrap_or_else(|| stage_seed(self.master_seed, stage))
    }

    /// Digests of every file under `dir` except the manifest itself.
    pub fn record_outputs(&mut self, dir: &Path) -> Result<()> {
        for entry in WalkDir::new(dir).sort_by_file_name() {
            let entry = entry.with_context(|| format!("listing {}", dir.display()))?;
            if !entry.file_type().is_file() {
                continue;
            }
            let f = entry.path();
            let rel = f.strip_prefix(dir).unwrap_or(f).to_string_lossy().replace('\\', "/");
            if rel == "manifest.json" {
                continue;
            }
            let bytes = std::fs::read(f).with_context(|| format!("reading {}", f.display()))?;
            self.outputs.insert(rel, hex::encode(Sha256::digest(&bytes)));
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_seeds_differ_and_repeat() {
        assert_eq!(stage_seed(7, "fit"), stage_seed(7, "fit"));
        assert_ne!(stage_seed(7, "fit"), stage_seed(7, "basis"));
        assert_ne!(stage_seed(7, "fit"), stage_seed(8, "fit"));
    }

    #[test]
    fn outputs_are_listed_relative_and_sorted() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("b")).unwrap();
        std::fs::write(dir.path().join("b/x.csv"), "1\n").unwrap();
        std::fs::write(dir.path().join("a.csv"), "").unwrap();
        std::fs::write(dir.path().join("manifest.json"), "{}").unwrap();
        let args = PipelineArgs {
            shots: None,
            basis_shots: None,
            simulate: true,
            kind: crate::SimType::Balanced,
            scale: crate::SimScale::Desk,
            out_dir: dir.path().into(),
            seed: 1,
            level: 0.95,
            sampler: crate::SamplerArgs {
                iters: 10,
                burnin: 5,
                thin: 1,
                chains: 1,
                psi: 1.0,
                psi_gamma_prior: false,
                sigma0: 5.0,
                kprior: crate::KPriorArg::Shifted,
                m_aux: 2,
                rw_step: vec![0.1],
                no_adapt: false,
                init: crate::InitArg::Singletons,
            },
            nmf: crate::NmfArgs {
                rank: 5,
                bandwidth: 2.5,
                restarts: 1,
                max_iter: 10,
                tol: 1e-6,
            },
            ingest: crate::IngestArgs {
                reflect: false,
                min_attempts: 0,
                exclude: vec![],
            },
        };
        let mut m = Manifest::new(&args).unwrap();
        m.record_outputs(dir.path()).unwrap();
        let keys: Vec<&str> = m.outputs.keys().map(String::as_str).collect();
        assert_eq!(keys, vec!["a.csv", "b/x.csv"]);
        assert_eq!(m.outputs["a.csv"], "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
        let mut moved = args.clone();
        moved.out_dir = "elsewhere".into();
        assert_eq!(Manifest::new(&moved).unwrap().config_hash, m.config_hash);
    }
}
