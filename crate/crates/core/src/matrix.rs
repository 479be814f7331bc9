//! Experiment matrix: fractions × strategies × extraction modes, run end to end.
//!
//! ```text
//! <runs>/cache/<key>/                 pretraining output, shared by every matrix
//! <runs>/cache/<key>/features_<mode>/ feature store for that checkpoint
//! <runs>/<matrix-hash>/experiment.cfg
//! <runs>/<matrix-hash>/cells.txt      cell order
//! <runs>/<matrix-hash>/<cell>/<target>/{folds.tsv, fold*.ckpt, scores.csv, labels.csv, metrics.csv}
//! <runs>/<matrix-hash>/report.{csv,txt}
//! ```
//!
//! The cache key hashes the full training config (fraction, strategy and seed
//! included) together with the dataset content hash.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::dataset::{write, Cohort, Dataset};
use crate::encoder::ExtractMode;
use crate::error::{Error, Result};
use crate::features::{extract_cohort_features, FeatureStore};
use crate::kv::{render, KvFile};
use crate::metrics::Metric;
use crate::mil::{
    class_count, deploy_external, load_bags, make_folds, recompute_metrics, save_models, train_mil, write_deployment,
    MilConfig,
};
use crate::sampling::Strategy;
use crate::trainer::{pretrain_dataset, TrainConfig, FINAL_CKPT};

pub const RUNS_ENV: &str = "CF_RUNS_DIR";
pub const CACHE_DIR: &str = "cache";
pub const CELLS_FILE: &str = "cells.txt";
pub const FAILURES_FILE: &str = "failures.txt";
pub const EXPERIMENT_FILE: &str = "experiment.cfg";
const DONE: &str = ".done";

/// Run root: `$CF_RUNS_DIR` if set, else `default`.
pub fn runs_root(default: &Path) -> PathBuf {
    std::env::var_os(RUNS_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| default.to_path_buf())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentMatrix {
    pub fractions: Vec<f64>,
    pub strategies: Vec<Strategy>,
    pub modes: Vec<ExtractMode>,
    pub targets: Vec<String>,
}

impl Default for ExperimentMatrix {
    fn default() -> Self {
        Self {
            fractions: vec![1.0],
            strategies: vec![Strategy::Baseline],
            modes: vec![ExtractMode::S4],
            targets: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub fraction: f64,
    pub strategy: Strategy,
    pub mode: ExtractMode,
}

impl Cell {
    pub fn name(&self) -> String {
        format!("f{}_{}_{}", self.fraction, self.strategy, self.mode)
    }
}

impl ExperimentMatrix {
    pub fn validate(&self) -> Result<()> {
        if self.fractions.is_empty() || self.strategies.is_empty() || self.modes.is_empty() || self.targets.is_empty() {
            return Err(Error::Config("every matrix axis needs at least one entry".into()));
        }
        const ALLOWED: [f64; 4] = [1.0, 0.5, 0.25, 0.1];
        if let Some(f) = self.fractions.iter().find(|f| !ALLOWED.contains(f)) {
            return Err(Error::Config(format!("fraction {f} is not one of 1.0, 0.5, 0.25, 0.1")));
        }
        Ok(())
    }

    /// Cells in fraction-major, then strategy, then mode order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &fraction in &self.fractions {
            for &strategy in &self.strategies {
                for &mode in &self.modes {
                    out.push(Cell {
                        fraction,
                        strategy,
                        mode,
                    });
                }
            }
        }
        out
    }

    /// Cells × targets.
    pub fn total_runs(&self) -> usize {
        self.fractions.len() * self.strategies.len() * self.modes.len() * self.targets.len()
    }
}

/// Matrix axes plus the training and MIL settings every cell shares.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub matrix: ExperimentMatrix,
    pub train: TrainConfig,
    pub mil: MilConfig,
}

impl ExperimentConfig {
    pub fn from_kv(mut kv: KvFile) -> Result<Self> {
        let mut matrix = ExperimentMatrix::default();
        if let Some(v) = kv.take_list("fractions")? {
            matrix.fractions = v;
        }
        if let Some(v) = kv.take_list("strategies")? {
            matrix.strategies = v;
        }
        if let Some(v) = kv.take_list("modes")? {
            matrix.modes = v;
        }
        if let Some(v) = kv.take_list("targets")? {
            matrix.targets = v;
        }
        let mil = MilConfig::take_from(&mut kv)?;
        let train = TrainConfig::from_kv(kv)?;
        Ok(Self { matrix, train, mil })
    }

    pub fn parse(origin: &str, text: &str) -> Result<Self> {
        Self::from_kv(KvFile::parse(origin, text)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(KvFile::read(path)?)
    }

    pub fn to_kv_string(&self) -> String {
        let join = |v: Vec<String>| v.join(", ");
        let m = &self.matrix;
        let mut s = render(&[
            ("fractions", join(m.fractions.iter().map(|f| f.to_string()).collect())),
            ("strategies", join(m.strategies.iter().map(|f| f.to_string()).collect())),
            ("modes", join(m.modes.iter().map(|f| f.to_string()).collect())),
            ("targets", m.targets.join(", ")),
        ]);
        s.push_str(&self.mil.to_kv_string());
        s.push_str(&self.train.to_kv_string());
        s
    }

    /// Training config for one cell.
    pub fn cell_train_config(&self, cell: &Cell) -> TrainConfig {
        let mut c = self.train.clone();
        c.data_fraction = cell.fraction;
        c.plan.strategy = cell.strategy;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.matrix.validate()?;
        self.mil.validate()?;
        for cell in self.matrix.cells() {
            self.cell_train_config(&cell).validate()?;
        }
        Ok(())
    }
}

fn sha_hex(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Cache key of a pretraining run.
pub fn checkpoint_key(train: &TrainConfig, dataset_hash: &str) -> String {
    sha_hex(&[&train.to_kv_string(), dataset_hash])[..16].to_string()
}

/// Directory name of a matrix run.
pub fn matrix_hash(cfg: &ExperimentConfig, dataset_hash: &str) -> String {
    sha_hex(&[&cfg.to_kv_string(), dataset_hash])[..16].to_string()
}

/// Exclusive marker file, removed on drop.
struct CacheLock {
    path: PathBuf,
}

impl CacheLock {
    fn acquire(path: PathBuf) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is held by another run (delete it if stale)",
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for CacheLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CacheStats {
    pub pretrained: usize,
    pub reused: usize,
}

/// Pretrains into the cache unless a finished checkpoint already exists.
pub fn cached_pretrain(
    train: &TrainConfig,
    dataset: &Dataset,
    dataset_hash: &str,
    root: &Path,
    stats: &mut CacheStats,
) -> Result<PathBuf> {
    let key = checkpoint_key(train, dataset_hash);
    let dir = root.join(CACHE_DIR).join(&key);
    let ckpt = dir.join(FINAL_CKPT);
    if ckpt.exists() {
        stats.reused += 1;
        return Ok(ckpt);
    }
    let _lock = CacheLock::acquire(root.join(CACHE_DIR).join(format!("{key}.lock")))?;
    log::info!(
        "pretraining {} ({} / fraction {})",
        key,
        train.plan.strategy,
        train.data_fraction
    );
    pretrain_dataset(train, dataset, &dir, None, true)?;
    stats.pretrained += 1;
    Ok(ckpt)
}

/// Feature store for a cached checkpoint, extracted once per mode.
pub fn cached_features(checkpoint: &Path, mode: ExtractMode, dataset: &Dataset) -> Result<FeatureStore> {
    let dir = checkpoint
        .parent()
        .expect("checkpoint lives in a cache directory")
        .join(format!("features_{mode}"));
    if dir.join(DONE).exists() {
        return FeatureStore::open(&dir);
    }
    let store = extract_cohort_features(checkpoint, mode, dataset, &dir)?;
    write(&dir.join(DONE), "")?;
    Ok(store)
}

/// MIL on the internal cohort, deployment on the external one, artifacts into `out`.
pub fn evaluate_target(
    store: &FeatureStore,
    dataset: &Dataset,
    target: &str,
    mil: &MilConfig,
    out: &Path,
) -> Result<BTreeMap<Metric, f64>> {
    let internal = load_bags(store, dataset, target, Cohort::Internal)?;
    let external = load_bags(store, dataset, target, Cohort::External)?;
    let classes = class_count(&internal).max(class_count(&external));
    let folds = make_folds(&internal, mil.folds, mil.seed)?;
    let models = train_mil(mil, &internal, &folds, classes)?;
    save_models(out, &models, &folds)?;
    let dep = deploy_external(&models, &external)?;
    write_deployment(out, &dep)?;
    Ok(dep.mean)
}

#[derive(Debug, Clone)]
pub struct MatrixReport {
    pub dir: PathBuf,
    pub cells: Vec<String>,
    pub targets: Vec<String>,
    /// `(cell, target) → metric → mean over fold models`.
    pub values: BTreeMap<(String, String), BTreeMap<Metric, f64>>,
    pub failures: Vec<(String, String)>,
    pub cache: CacheStats,
}

/// Runs every cell; a failing cell is recorded and the rest proceed.
pub fn run_matrix(cfg: &ExperimentConfig, dataset: &Dataset, root: &Path) -> Result<MatrixReport> {
    cfg.validate()?;
    for t in &cfg.matrix.targets {
        if !dataset.targets.contains(t) {
            return Err(Error::Config(format!("target `{t}` not in dataset")));
        }
    }
    let dataset_hash = dataset.content_hash()?;
    let dir = root.join(matrix_hash(cfg, &dataset_hash));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write(&dir.join(EXPERIMENT_FILE), cfg.to_kv_string())?;
    let cells = cfg.matrix.cells();
    write(
        &dir.join(CELLS_FILE),
        cells.iter().map(|c| c.name() + "\n").collect::<String>(),
    )?;
    let mut stats = CacheStats::default();
    let mut failures = Vec::new();
    for cell in &cells {
        let name = cell.name();
        let train = cfg.cell_train_config(cell);
        let cell_dir = dir.join(&name);
        let outcome = (|| -> Result<()> {
            write(&cell_dir.join("config.cfg"), train.to_kv_string())?;
            let ckpt = cached_pretrain(&train, dataset, &dataset_hash, root, &mut stats)?;
            write(&cell_dir.join("checkpoint.txt"), format!("{}\n", ckpt.display()))?;
            let store = cached_features(&ckpt, cell.mode, dataset)?;
            for target in &cfg.matrix.targets {
                let tdir = cell_dir.join(target);
                if tdir.join(DONE).exists() {
                    continue;
                }
                evaluate_target(&store, dataset, target, &cfg.mil, &tdir)?;
                write(&tdir.join(DONE), "")?;
            }
            Ok(())
        })();
        if let Err(e) = outcome {
            log::error!("cell {name} failed: {e}");
            failures.push((name, e.to_string()));
        }
    }
    write(
        &dir.join(FAILURES_FILE),
        failures.iter().map(|(c, e)| format!("{c}\t{e}\n")).collect::<String>(),
    )?;
    let mut report = collect_report(&dir)?;
    report.failures = failures;
    report.cache = stats;
    write_report(&report)?;
    Ok(report)
}

/// Rebuilds the report of a matrix directory from its persisted score matrices.
pub fn collect_report(dir: &Path) -> Result<MatrixReport> {
    let cells_path = dir.join(CELLS_FILE);
    let cells: Vec<String> = std::fs::read_to_string(&cells_path)
        .map_err(|e| Error::io(&cells_path, e))?
        .lines()
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    let cfg = ExperimentConfig::read(&dir.join(EXPERIMENT_FILE))?;
    let targets = cfg.matrix.targets.clone();
    let mut values = BTreeMap::new();
    let mut failures = Vec::new();
    for cell in &cells {
        for target in &targets {
            let tdir = dir.join(cell).join(target);
            if !tdir.join(crate::mil::SCORES_CSV).exists() {
                failures.push((cell.clone(), format!("{target}: no score matrix")));
                continue;
            }
            values.insert((cell.clone(), target.clone()), recompute_metrics(&tdir)?);
        }
    }
    Ok(MatrixReport {
        dir: dir.to_path_buf(),
        cells,
        targets,
        values,
        failures,
        cache: CacheStats::default(),
    })
}

impl MatrixReport {
    /// Row values and the AVG over available targets.
    fn row(&self, cell: &str, metric: Metric) -> (Vec<Option<f64>>, Option<f64>) {
        let vals: Vec<Option<f64>> = self
            .targets
            .iter()
            .map(|t| self.values.get(&(cell.to_string(), t.clone())).map(|m| m[&metric]))
            .collect();
        let present: Vec<f64> = vals.iter().flatten().copied().collect();
        let avg = if present.is_empty() {
            None
        } else {
            Some(present.iter().sum::<f64>() / present.len() as f64)
        };
        (vals, avg)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("metric,cell,{},avg\n", self.targets.join(","));
        for metric in Metric::ALL {
            for cell in &self.cells {
                let (vals, avg) = self.row(cell, metric);
                let _ = write!(s, "{},{cell}", metric.name());
                for v in vals.iter().chain(std::iter::once(&avg)) {
                    match v {
                        Some(x) => {
                            let _ = write!(s, ",{x}");
                        }
                        None => s.push(','),
                    }
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn to_text(&self) -> String {
        let fmt = |v: &Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
        let mut s = String::new();
        let width = self.cells.iter().map(String::len).max().unwrap_or(4).max(4);
        let cols: Vec<String> = self
            .targets
            .iter()
            .cloned()
            .chain(std::iter::once("AVG".into()))
            .collect();
        let cw: Vec<usize> = cols.iter().map(|c| c.len().max(5)).collect();
        for metric in Metric::ALL {
            let _ = writeln!(s, "{}", metric.name().to_uppercase());
            let _ = write!(s, "{:<width$}", "cell");
            for (c, w) in cols.iter().zip(&cw) {
                let _ = write!(s, "  {c:>w$}");
            }
            s.push('\n');
            for cell in &self.cells {
                let (vals, avg) = self.row(cell, metric);
                let _ = write!(s, "{cell:<width$}");
                for (v, w) in vals.iter().chain(std::iter::once(&avg)).zip(&cw) {
                    let _ = write!(s, "  {:>w$}", fmt(v));
                }
                s.push('\n');
            }
            s.push('\n');
        }
        if !self.failures.is_empty() {
            let _ = writeln!(s, "failed:");
            for (c, e) in &self.failures {
                let _ = writeln!(s, "  {c}: {e}");
            }
        }
        s
    }
}

pub fn write_report(report: &MatrixReport) -> Result<()> {
    write(&report.dir.join("report.csv"), report.to_csv())?;
    write(&report.dir.join("report.txt"), report.to_text())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment_config_round_trip_and_cells() {
        let text = "fractions = 1.0, 0.5\nstrategies = baseline, srcl\nmodes = S4, Last2\ntargets = tumor\nmil_epochs = 3\nepochs = 4\nwarmup_epochs = 1\n";
        let cfg = ExperimentConfig::parse("x", text).unwrap();
        assert_eq!(cfg.matrix.cells().len(), 8);
        assert_eq!(cfg.matrix.total_runs(), 8);
        assert_eq!(cfg.mil.epochs, 3);
        assert_eq!(cfg.train.epochs, 4);
        let back = ExperimentConfig::parse("x", &cfg.to_kv_string()).unwrap();
        assert_eq!(back, cfg);
        assert!(ExperimentConfig::parse("x", "fractions = 0.3\ntargets = t")
            .unwrap()
            .validate()
            .is_err());
        assert!(ExperimentConfig::parse("x", "nope = 1").is_err());
    }

    #[test]
    fn cache_key_tracks_cell_settings() {
        let cfg = ExperimentConfig::parse("x", "targets = t\nstrategies = baseline, nsam").unwrap();
        let cells = cfg.matrix.cells();
        let a = checkpoint_key(&cfg.cell_train_config(&cells[0]), "d");
        let b = checkpoint_key(&cfg.cell_train_config(&cells[1]), "d");
        assert_ne!(a, b);
        assert_eq!(a, checkpoint_key(&cfg.cell_train_config(&cells[0]), "d"));
        assert_ne!(a, checkpoint_key(&cfg.cell_train_config(&cells[0]), "e"));
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.lock");
        let held = CacheLock::acquire(p.clone()).unwrap();
        assert!(CacheLock::acquire(p.clone()).is_err());
        drop(held);
        assert!(CacheLock::acquire(p).is_ok());
    }
}
