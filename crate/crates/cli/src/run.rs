//! Run directories: config snapshot, seeds, checkpoints, metrics, plots.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use asuka_core::nn::ParamStore;
use asuka_core::rng::{seeded, stream, ChaCha8Rng};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::config::Config;

pub const RUN_MANIFEST: &str = "run.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";
pub const METRICS: &str = "metrics.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub root_seed: u64,
    pub config_hash: String,
    pub created_utc: String,
    pub tool_version: String,
    /// Derived seed of every named stage used by the run.
    pub seeds: BTreeMap<String, u64>,
    /// Run directories whose checkpoints were read.
    pub inputs: Vec<PathBuf>,
    pub complete: bool,
}

pub struct Run {
    pub dir: PathBuf,
    pub cfg: Config,
    pub manifest: RunManifest,
    /// Checkpoint search path, most recent last; the run itself is searched first.
    from: Vec<PathBuf>,
}

/// Stream index of a stage name: the first 8 bytes of its SHA-256.
fn stage_index(name: &str) -> u64 {
    let d = Sha256::digest(name.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Seed of stage `name` under `root`.
pub fn stage_seed(root: u64, name: &str) -> u64 {
    stream(root, stage_index(name)).next_u64()
}

impl Run {
    /// Creates `<runs_dir>/<subcommand>-<utc timestamp>-<config hash>`, or
    /// uses `out` as given. An existing directory is reused only with `resume`.
    pub fn create(cfg: Config, subcommand: &str, out: Option<&Path>, resume: bool, from: Vec<PathBuf>) -> Result<Self> {
        let now = chrono::Utc::now();
        let hash = cfg.hash();
        let dir = match out {
            Some(p) => p.to_path_buf(),
            None => cfg.runs_dir.join(format!("{subcommand}-{}-{hash}", now.format("%Y%m%dT%H%M%SZ"))),
        };
        let mut manifest = RunManifest {
            subcommand: subcommand.to_string(),
            root_seed: cfg.seed,
            config_hash: hash.clone(),
            created_utc: now.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seeds: BTreeMap::new(),
            inputs: from.clone(),
            complete: false,
        };
        if dir.join(RUN_MANIFEST).exists() {
            if !resume {
                bail!("{} already holds a run; pass --resume to continue it", dir.display());
            }
            let old: RunManifest = read_json(&dir.join(RUN_MANIFEST))?;
            if old.config_hash != hash {
                bail!("cannot resume {}: config hash {} differs from {}", dir.display(), old.config_hash, hash);
            }
            manifest.created_utc = old.created_utc;
            manifest.seeds = old.seeds;
        }
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join(CONFIG_SNAPSHOT), cfg.snapshot()).context("writing config snapshot")?;
        let run = Self { dir, cfg, manifest, from };
        run.save_manifest()?;
        Ok(run)
    }

    pub fn save_manifest(&self) -> Result<()> {
        write_json(&self.dir.join(RUN_MANIFEST), &self.manifest)
    }

    pub fn finish(&mut self) -> Result<()> {
        self.manifest.complete = true;
        self.save_manifest()
    }

    /// Rng for a named stage, recorded in the manifest.
    pub fn rng(&mut self, stage: &str) -> ChaCha8Rng {
        let seed = stage_seed(self.cfg.seed, stage);
        self.manifest.seeds.insert(stage.to_string(), seed);
        seeded(seed)
    }

    pub fn seed(&mut self, stage: &str) -> u64 {
        let seed = stage_seed(self.cfg.seed, stage);
        self.manifest.seeds.insert(stage.to_string(), seed);
        seed
    }

    /// `dir/rel`, with its parent created.
    pub fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(p)
    }

    pub fn subdir(&self, rel: &str) -> Result<PathBuf> {
        let p = self.dir.join(rel);
        fs::create_dir_all(&p).with_context(|| format!("creating {}", p.display()))?;
        Ok(p)
    }

    fn search(&self) -> impl Iterator<Item = &Path> {
        std::iter::once(self.dir.as_path()).chain(self.from.iter().rev().map(PathBuf::as_path))
    }

    /// First `checkpoints/<name>` found on the search path.
    pub fn find_checkpoint(&self, name: &str) -> Option<PathBuf> {
        self.search().map(|d| d.join("checkpoints").join(name)).find(|p| p.join("header.json").exists())
    }

    pub fn load_store(&self, name: &str) -> Result<Option<ParamStore>> {
        match self.find_checkpoint(name) {
            Some(p) => Ok(Some(ParamStore::load(&p).with_context(|| format!("loading checkpoint {}", p.display()))?.0)),
            None => Ok(None),
        }
    }

    pub fn require_store(&self, name: &str) -> Result<ParamStore> {
        self.load_store(name)?.with_context(|| {
            format!("checkpoint `{name}` not found in this run or any --from directory; run the stage that produces it first")
        })
    }

    pub fn save_store(&self, name: &str, store: &ParamStore) -> Result<()> {
        let p = self.dir.join("checkpoints").join(name);
        store.save(&p, &self.manifest.config_hash).with_context(|| format!("saving checkpoint {name}"))
    }

    /// True when this run directory already holds `name` (resume support).
    pub fn has_own_checkpoint(&self, name: &str) -> bool {
        self.dir.join("checkpoints").join(name).join("header.json").exists()
    }

    /// Merges `value` under `key` in `metrics.json`.
    pub fn record_metric(&self, key: &str, value: Value) -> Result<()> {
        let path = self.dir.join(METRICS);
        let mut map: BTreeMap<String, Value> = if path.exists() { read_json(&path)? } else { BTreeMap::new() };
        map.insert(key.to_string(), value);
        write_json(&path, &map)
    }

    /// Writes `losses/<name>.csv` and `plots/<name>_loss.svg`.
    pub fn record_loss(&self, name: &str, trace: &[f64]) -> Result<()> {
        let mut csv = String::from("step,loss\n");
        for (i, l) in trace.iter().enumerate() {
            csv.push_str(&format!("{i},{l}\n"));
        }
        fs::write(self.path(&format!("losses/{name}.csv"))?, csv)?;
        let pts = trace.iter().enumerate().map(|(i, &l)| (i as f64, l)).collect();
        crate::plot::lines(&self.path(&format!("plots/{name}_loss.svg"))?, &format!("{name} loss"), "loss", &[(name, pts)])
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_seeds_are_stable_and_distinct() {
        assert_eq!(stage_seed(7, "masks"), stage_seed(7, "masks"));
        assert_ne!(stage_seed(7, "masks"), stage_seed(7, "vae"));
        assert_ne!(stage_seed(7, "masks"), stage_seed(8, "masks"));
    }

    #[test]
    fn create_resume_and_metrics() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = Config { runs_dir: tmp.path().to_path_buf(), ..Config::default() };
        let mut run = Run::create(cfg.clone(), "mask-gen", None, false, vec![]).unwrap();
        let name = run.dir.file_name().unwrap().to_string_lossy().to_string();
        assert!(name.starts_with("mask-gen-") && name.ends_with(&cfg.hash()), "{name}");
        let _ = run.rng("masks");
        run.record_metric("a", serde_json::json!(1)).unwrap();
        run.record_metric("b", serde_json::json!({"x": 2.5})).unwrap();
        run.finish().unwrap();
        let m: RunManifest = read_json(&run.dir.join(RUN_MANIFEST)).unwrap();
        assert!(m.complete);
        assert_eq!(m.seeds["masks"], stage_seed(0, "masks"));
        let metrics: BTreeMap<String, Value> = read_json(&run.dir.join(METRICS)).unwrap();
        assert_eq!(metrics.len(), 2);

        assert!(Run::create(cfg.clone(), "mask-gen", Some(&run.dir), false, vec![]).is_err());
        let resumed = Run::create(cfg.clone(), "mask-gen", Some(&run.dir), true, vec![]).unwrap();
        assert_eq!(resumed.manifest.created_utc, m.created_utc);
        let other = Config { seed: 3, ..cfg };
        assert!(Run::create(other, "mask-gen", Some(&run.dir), true, vec![]).is_err());
    }

    #[test]
    fn checkpoints_are_found_on_the_search_path() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = Config { runs_dir: tmp.path().to_path_buf(), ..Config::default() };
        let a = Run::create(cfg.clone(), "train-mae", Some(&tmp.path().join("a")), false, vec![]).unwrap();
        let mut store = ParamStore::new();
        store.add("w", asuka_core::nn::Mat::from_vec(1, 2, vec![1.0, 2.0]));
        a.save_store("mae", &store).unwrap();
        let b = Run::create(cfg, "train-align", Some(&tmp.path().join("b")), false, vec![a.dir.clone()]).unwrap();
        assert!(b.find_checkpoint("mae").is_some());
        assert!(!b.has_own_checkpoint("mae"));
        assert_eq!(b.require_store("mae").unwrap().digest(), store.digest());
        assert!(b.require_store("vae_encoder").is_err());
    }
}
