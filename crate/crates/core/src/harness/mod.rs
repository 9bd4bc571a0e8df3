//! Experiment configuration, the four experiment blocks, resumable run
//! execution and persistence.

pub mod report;
mod svg;

pub use report::{report, Analysis, ReportOutcome};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::evalstats::{evaluate_ood, OODResult, StatsError};
use crate::grammar::{build_dataset, build_ood_suite, write_jsonl, Dataset, DatasetSpec, Example, GrammarError, VocabSpec};
use crate::hereg::{train_regularized, RegConfig};
use crate::model::{ModelConfig, ModelError, Transformer};
use crate::numerics::{load_checkpoint, save_checkpoint, NumericsError};
use crate::probes::{compute_he_report, HEReport, ProbeConfig, ProbeError};
use crate::trainer::{train, TrainConfig, TrainError, TrainHistory};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io error at {path}: {message}")]
    Io { path: String, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("no completed runs for block {0}")]
    NoRecords(Block),
}

pub(crate) fn io_err(path: &Path, e: impl fmt::Display) -> HarnessError {
    HarnessError::Io { path: path.display().to_string(), message: e.to_string() }
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

pub(crate) fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s
}

/// Run-suite settings that are not part of any single run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub seeds: usize,
    pub jobs: usize,
    /// Seed of the shared out-of-distribution suite.
    pub ood_seed: u64,
    pub ood_modifier_probability: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig { seeds: 5, jobs: 1, ood_seed: 7, ood_modifier_probability: 0.5 }
    }
}

/// Everything a run needs. Grid blocks override the swept field of the
/// dataset or model section.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub reg: RegConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub suite: SuiteConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Rq1a,
    Rq1b,
    Rq1c,
    Rq2,
}

impl Block {
    pub const ALL: [Block; 4] = [Block::Rq1a, Block::Rq1b, Block::Rq1c, Block::Rq2];

    pub fn as_str(self) -> &'static str {
        match self {
            Block::Rq1a => "rq1a",
            Block::Rq1b => "rq1b",
            Block::Rq1c => "rq1c",
            Block::Rq2 => "rq2",
        }
    }

    /// Block whose seeds this block reuses; regularized runs pair with the
    /// noise-sweep baselines.
    pub fn seed_block(self) -> Block {
        match self {
            Block::Rq2 => Block::Rq1c,
            b => b,
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Block {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Block::ALL
            .into_iter()
            .find(|b| b.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown block {s:?}; expected rq1a, rq1b, rq1c or rq2"))
    }
}

/// One grid point of a block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub block: Block,
    pub id: String,
    /// Value of the swept variable.
    pub x: f64,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub reg: Option<RegConfig>,
}

pub fn plan(block: Block, cfg: &ExperimentConfig) -> Vec<Cell> {
    let cell = |id: String, x: f64, dataset: DatasetSpec, model: ModelConfig, reg: Option<RegConfig>| Cell {
        block,
        id,
        x,
        dataset,
        model,
        train: cfg.train.clone(),
        reg,
    };
    let base_data = DatasetSpec { max_primitives: 2, num_noise: 0, ..cfg.dataset.clone() };
    let base_model = ModelConfig { n_layers: 4, ..cfg.model.clone() };
    match block {
        Block::Rq1a => (1..=10)
            .map(|l| cell(format!("layers-{l:02}"), l as f64, base_data.clone(), ModelConfig { n_layers: l, ..base_model.clone() }, None))
            .collect(),
        Block::Rq1b => (1..=4)
            .map(|k| cell(format!("prims-{k}"), k as f64, DatasetSpec { max_primitives: k, ..base_data.clone() }, base_model.clone(), None))
            .collect(),
        Block::Rq1c | Block::Rq2 => (0..=crate::grammar::MAX_NOISE)
            .map(|n| {
                let reg = (block == Block::Rq2).then(|| cfg.reg.clone());
                cell(format!("noise-{n:02}"), n as f64, DatasetSpec { num_noise: n, ..base_data.clone() }, base_model.clone(), reg)
            })
            .collect(),
    }
}

/// Per-run seed from the block (regularized runs borrow the baseline
/// block), cell and seed index.
pub fn run_seed(block: Block, cell: &str, seed_index: usize) -> u64 {
    crate::derive_seed(&["run", block.seed_block().as_str(), cell, &seed_index.to_string()])
}

pub fn run_dir(root: &Path, block: Block, cell: &str, seed_index: usize) -> PathBuf {
    root.join(block.as_str()).join(cell).join(seed_index.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegSummary {
    pub lambda: f64,
    pub reg_layers: Vec<usize>,
    pub pool_size: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub block: Block,
    pub cell: String,
    pub x: f64,
    pub seed_index: usize,
    pub run_seed: u64,
    pub dataset_hash: String,
    /// Relative to the run directory.
    pub checkpoint: String,
    pub train_examples: usize,
    pub history: TrainHistory,
    pub reg: Option<RegSummary>,
    pub ood: OODResult,
    pub he: HEReport,
    pub wall_clock_secs: f64,
}

pub fn dataset_hash(ds: &Dataset, vocab: &VocabSpec) -> String {
    let mut buf = Vec::new();
    write_jsonl(&ds.train, vocab, &mut buf).expect("writing to memory");
    buf.push(b'\n');
    write_jsonl(&ds.val, vocab, &mut buf).expect("writing to memory");
    hex::encode(Sha256::digest(&buf))
}

/// Out-of-distribution suite shared by every run of a configuration.
pub fn ood_suite(cfg: &ExperimentConfig, vocab: &VocabSpec) -> Result<BTreeMap<usize, Vec<Example>>, HarnessError> {
    Ok(build_ood_suite(vocab, cfg.suite.ood_modifier_probability, &mut crate::seeded_rng(cfg.suite.ood_seed))?)
}

/// Dataset, initial model and seeded configs of one run.
pub struct RunSetup {
    pub dataset: Dataset,
    pub model: Transformer,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

pub fn setup_run(cell: &Cell, probe: &ProbeConfig, seed: u64, vocab: &VocabSpec) -> Result<RunSetup, HarnessError> {
    let dataset = build_dataset(&DatasetSpec { seed: crate::derive_seed(&[&seed.to_string(), "dataset"]), ..cell.dataset.clone() }, vocab)?;
    let model = Transformer::init(cell.model.clone(), &mut crate::stream_rng(seed, "init"))?;
    Ok(RunSetup {
        dataset,
        model,
        train: TrainConfig { seed, ..cell.train.clone() },
        probe: ProbeConfig { seed, ..probe.clone() },
    })
}

/// Trains, evaluates and probes one (cell, seed) and writes its directory.
pub fn execute_run(
    root: &Path,
    cell: &Cell,
    seed_index: usize,
    probe: &ProbeConfig,
    suite: &BTreeMap<usize, Vec<Example>>,
    vocab: &VocabSpec,
) -> Result<RunRecord, HarnessError> {
    let start = Instant::now();
    let seed = run_seed(cell.block, &cell.id, seed_index);
    let dir = run_dir(root, cell.block, &cell.id, seed_index);
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    write_file(&dir.join("config.toml"), toml::to_string(cell).expect("cell serializes"))?;

    let setup = setup_run(cell, probe, seed, vocab)?;
    let hash = dataset_hash(&setup.dataset, vocab);
    write_file(&dir.join("dataset.sha256"), format!("{hash}\n"))?;
    let (model, history, reg) = match &cell.reg {
        None => {
            let (m, h) = train(setup.model, &setup.dataset.train, &setup.dataset.val, &setup.train)?;
            (m, h, None)
        }
        Some(rc) => {
            let (m, h, rh) = train_regularized(setup.model, &setup.dataset.train, &setup.dataset.val, vocab, &setup.train, rc)?;
            write_file(&dir.join("reg_history.csv"), rh.to_csv())?;
            let summary = RegSummary { lambda: rc.lambda, reg_layers: rc.reg_layers.clone(), pool_size: rh.pool_size, warnings: rh.warnings };
            (m, h, Some(summary))
        }
    };
    write_file(&dir.join("history.csv"), history.to_csv())?;
    save_checkpoint(&model.params, &dir.join("checkpoint.bin"))?;
    let ood = evaluate_ood(&model, suite)?;
    write_file(&dir.join("ood.json"), to_json(&ood))?;
    let he = compute_he_report(&model, &setup.dataset.train, vocab, &setup.probe)?;
    write_file(&dir.join("he_report.json"), to_json(&he))?;
    let record = RunRecord {
        block: cell.block,
        cell: cell.id.clone(),
        x: cell.x,
        seed_index,
        run_seed: seed,
        dataset_hash: hash,
        checkpoint: "checkpoint.bin".into(),
        train_examples: setup.dataset.train.len(),
        history,
        reg,
        ood,
        he,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    write_file(&dir.join("record.json"), to_json(&record))?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub block: Block,
    pub cell: String,
    pub seed_index: usize,
    pub run_seed: u64,
    pub ok: bool,
    pub error: Option<String>,
}

/// Append-only run log at `<root>/manifest.jsonl`. Every append rewrites
/// the file through a temporary and an atomic rename.
pub struct Manifest {
    path: PathBuf,
    lock: Mutex<()>,
}

impl Manifest {
    pub fn open(root: &Path) -> Result<Self, HarnessError> {
        fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        Ok(Manifest { path: root.join("manifest.jsonl"), lock: Mutex::new(()) })
    }

    pub fn entries(&self) -> Result<Vec<ManifestEntry>, HarnessError> {
        let text = match fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(io_err(&self.path, e)),
        };
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| io_err(&self.path, e)))
            .collect()
    }

    pub fn append(&self, entry: &ManifestEntry) -> Result<(), HarnessError> {
        let _guard = self.lock.lock().unwrap_or_else(|p| p.into_inner());
        let mut text = match fs::read_to_string(&self.path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(io_err(&self.path, e)),
        };
        text.push_str(&serde_json::to_string(entry).expect("entry serializes"));
        text.push('\n');
        let tmp = self.path.with_extension("jsonl.tmp");
        fs::write(&tmp, text).map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, &self.path).map_err(|e| io_err(&self.path, e))
    }

    /// Runs whose latest entry succeeded.
    pub fn completed(&self) -> Result<BTreeSet<(Block, String, usize)>, HarnessError> {
        let mut latest: BTreeMap<(Block, String, usize), bool> = BTreeMap::new();
        for e in self.entries()? {
            latest.insert((e.block, e.cell, e.seed_index), e.ok);
        }
        Ok(latest.into_iter().filter(|(_, ok)| *ok).map(|(k, _)| k).collect())
    }
}

pub fn load_record(root: &Path, block: Block, cell: &str, seed_index: usize) -> Result<RunRecord, HarnessError> {
    let path = run_dir(root, block, cell, seed_index).join("record.json");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(&path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub cell: String,
    pub seed_index: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BlockOutcome {
    pub records: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
    /// Runs executed in this call rather than loaded from disk.
    pub executed: usize,
}

/// Executes every (cell, seed) of `block` not already completed under
/// `root`, with up to `jobs` runs in flight. Regularized blocks first
/// complete their baseline block so pairs exist.
pub fn run_block(root: &Path, block: Block, cfg: &ExperimentConfig) -> Result<BlockOutcome, HarnessError> {
    if block == Block::Rq2 {
        let base = run_block(root, Block::Rq1c, cfg)?;
        if !base.failures.is_empty() {
            eprintln!("[rq2] {} baseline runs failed; their pairs will be missing", base.failures.len());
        }
    }
    let vocab = VocabSpec::default();
    let suite = ood_suite(cfg, &vocab)?;
    let manifest = Manifest::open(root)?;
    let done = manifest.completed()?;
    let cells = plan(block, cfg);
    let jobs: Vec<(&Cell, usize)> = cells.iter().flat_map(|c| (0..cfg.suite.seeds).map(move |s| (c, s))).collect();
    let total = jobs.len();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, Result<RunRecord, String>, bool)>> = Mutex::new(Vec::with_capacity(total));

    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(cell, seed_index)) = jobs.get(i) else { break };
        let key = (block, cell.id.clone(), seed_index);
        let (outcome, fresh) = if done.contains(&key) {
            (load_record(root, block, &cell.id, seed_index).map_err(|e| e.to_string()), false)
        } else {
            let r = execute_run(root, cell, seed_index, &cfg.probe, &suite, &vocab).map_err(|e| e.to_string());
            let entry = ManifestEntry {
                block,
                cell: cell.id.clone(),
                seed_index,
                run_seed: run_seed(block, &cell.id, seed_index),
                ok: r.is_ok(),
                error: r.as_ref().err().cloned(),
            };
            if let Err(e) = manifest.append(&entry) {
                eprintln!("[{block}] could not record {} seed {seed_index}: {e}", cell.id);
            }
            match &r {
                Ok(rec) => eprintln!(
                    "[{block}] {} seed {seed_index}: {:.1}s, exact {:.3}, token {:.3}, mod HE {:.3e} ({}/{total})",
                    cell.id,
                    rec.wall_clock_secs,
                    rec.ood.mean_exact_match,
                    rec.ood.mean_token_accuracy,
                    rec.he.he_mod_mean.unwrap_or(f64::NAN),
                    i + 1
                ),
                Err(e) => eprintln!("[{block}] {} seed {seed_index} failed: {e}", cell.id),
            }
            (r, true)
        };
        results.lock().unwrap_or_else(|p| p.into_inner()).push((i, outcome, fresh));
    };
    let n_workers = cfg.suite.jobs.clamp(1, total.max(1));
    std::thread::scope(|s| {
        for _ in 0..n_workers {
            s.spawn(worker);
        }
    });

    let mut results = results.into_inner().unwrap_or_else(|p| p.into_inner());
    results.sort_by_key(|r| r.0);
    let mut out = BlockOutcome::default();
    for (i, r, fresh) in results {
        out.executed += usize::from(fresh);
        match r {
            Ok(rec) => out.records.push(rec),
            Err(error) => out.failures.push(RunFailure { cell: jobs[i].0.id.clone(), seed_index: jobs[i].1, error }),
        }
    }
    Ok(out)
}

/// Completed records of a block, in plan order.
pub fn load_block(root: &Path, block: Block, cfg: &ExperimentConfig) -> Result<Vec<RunRecord>, HarnessError> {
    let done = Manifest::open(root)?.completed()?;
    let mut out = Vec::new();
    for cell in plan(block, cfg) {
        for s in 0..cfg.suite.seeds {
            if done.contains(&(block, cell.id.clone(), s)) {
                out.push(load_record(root, block, &cell.id, s)?);
            }
        }
    }
    Ok(out)
}

/// Retrains one noise-sweep cell with the regularizer at lambda = 0 and
/// checks the result against the stored baseline checkpoint bit for bit.
pub fn lambda_zero_control(root: &Path, cfg: &ExperimentConfig, noise: usize, seed_index: usize) -> Result<bool, HarnessError> {
    let cells = plan(Block::Rq1c, cfg);
    let cell = cells
        .iter()
        .find(|c| c.dataset.num_noise == noise)
        .ok_or_else(|| HarnessError::Config(format!("no noise cell {noise}")))?;
    let base_path = run_dir(root, Block::Rq1c, &cell.id, seed_index).join("checkpoint.bin");
    let baseline = load_checkpoint(&base_path)?;
    let vocab = VocabSpec::default();
    let seed = run_seed(Block::Rq2, &cell.id, seed_index);
    let setup = setup_run(cell, &cfg.probe, seed, &vocab)?;
    let reg = RegConfig { lambda: 0.0, ..cfg.reg.clone() };
    let (model, _, _) = train_regularized(setup.model, &setup.dataset.train, &setup.dataset.val, &vocab, &setup.train, &reg)?;
    Ok(model.params.bit_eq(&baseline))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.model = ModelConfig { d_model: 16, n_heads: 2, d_ff: 32, n_layers: 4, ..cfg.model };
        cfg.train.max_epochs = 1;
        cfg.train.lr = 1e-3;
        cfg.probe.mlp_steps = 5;
        cfg.reg.operator_hidden = 8;
        cfg.suite.seeds = 2;
        cfg
    }

    #[test]
    fn grid_sizes() {
        let cfg = ExperimentConfig::default();
        assert_eq!(plan(Block::Rq1a, &cfg).len() * cfg.suite.seeds, 50);
        assert_eq!(plan(Block::Rq1b, &cfg).len(), 4);
        assert_eq!(plan(Block::Rq1c, &cfg).len(), 16);
        let rq2 = plan(Block::Rq2, &cfg);
        assert_eq!(rq2.len() * cfg.suite.seeds, 80);
        assert!(rq2.iter().all(|c| c.reg.is_some()));
        assert!(plan(Block::Rq1b, &cfg).iter().all(|c| c.model.n_layers == 4 && c.dataset.num_noise == 0));
        assert!(plan(Block::Rq1a, &cfg).iter().all(|c| c.dataset.max_primitives == 2));
    }

    #[test]
    fn regularized_runs_share_baseline_seeds() {
        for c in plan(Block::Rq1c, &ExperimentConfig::default()) {
            for s in 0..5 {
                assert_eq!(run_seed(Block::Rq2, &c.id, s), run_seed(Block::Rq1c, &c.id, s));
            }
        }
        assert_ne!(run_seed(Block::Rq1a, "layers-04", 0), run_seed(Block::Rq1c, "noise-00", 0));
        assert_ne!(run_seed(Block::Rq1c, "noise-00", 0), run_seed(Block::Rq1c, "noise-00", 1));
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        let bad = text.replace("[train]", "[train]\nmomentum = 0.5");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let bad = format!("{text}\n[extra]\nx = 1\n");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
        let missing = text.replace("lambda = 0.1\n", "");
        assert!(ExperimentConfig::from_toml(&missing).is_err());
    }

    #[test]
    fn shipped_config_matches_defaults() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.toml");
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn block_names_parse() {
        assert_eq!("RQ1b".parse::<Block>().unwrap(), Block::Rq1b);
        assert!("rq3".parse::<Block>().is_err());
    }

    #[test]
    fn manifest_appends_and_tracks_latest_status() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::open(dir.path()).unwrap();
        let e = |ok| ManifestEntry { block: Block::Rq1c, cell: "noise-00".into(), seed_index: 0, run_seed: 1, ok, error: None };
        m.append(&e(false)).unwrap();
        assert!(m.completed().unwrap().is_empty());
        m.append(&e(true)).unwrap();
        assert_eq!(m.entries().unwrap().len(), 2);
        assert!(m.completed().unwrap().contains(&(Block::Rq1c, "noise-00".to_string(), 0)));
    }

    #[test]
    fn runs_resume_and_reproduce() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.suite.seeds = 1;
        let cells = plan(Block::Rq1b, &cfg);
        let vocab = VocabSpec::default();
        let suite: BTreeMap<usize, Vec<Example>> =
            ood_suite(&cfg, &vocab).unwrap().into_iter().map(|(k, v)| (k, v.into_iter().take(4).collect())).collect();
        let a = execute_run(dir.path(), &cells[1], 0, &cfg.probe, &suite, &vocab).unwrap();
        let files = ["history.csv", "ood.json", "he_report.json", "dataset.sha256", "checkpoint.bin", "config.toml"];
        let read = |f: &str| fs::read(run_dir(dir.path(), Block::Rq1b, &cells[1].id, 0).join(f)).unwrap();
        let first: Vec<Vec<u8>> = files.iter().map(|f| read(f)).collect();
        let b = execute_run(dir.path(), &cells[1], 0, &cfg.probe, &suite, &vocab).unwrap();
        assert_eq!(a.ood, b.ood);
        assert_eq!(a.he, b.he);
        for (f, bytes) in files.iter().zip(first) {
            assert_eq!(read(f), bytes, "{f} differs between identical runs");
        }
    }

    #[test]
    fn block_run_is_resumable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let mut small = cfg.clone();
        small.suite.seeds = 1;
        let first = run_block(dir.path(), Block::Rq1b, &small).unwrap();
        assert_eq!((first.executed, first.records.len()), (4, 4));
        let again = run_block(dir.path(), Block::Rq1b, &cfg).unwrap();
        assert_eq!((again.executed, again.records.len()), (4, 8));
        assert_eq!(again.records[0], first.records[0]);
        assert_eq!(load_block(dir.path(), Block::Rq1b, &cfg).unwrap().len(), 8);
    }
}
