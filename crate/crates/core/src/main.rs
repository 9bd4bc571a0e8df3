use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use homlab::evalstats::evaluate_ood;
use homlab::grammar::{build_dataset, vocab_json, write_jsonl, DatasetSpec, VocabSpec};
use homlab::harness::{self, Block, ExperimentConfig, HarnessError};
use homlab::hereg::train_regularized;
use homlab::model::Transformer;
use homlab::numerics::{load_checkpoint, save_checkpoint};
use homlab::probes::compute_he_report;
use homlab::trainer::train;

#[derive(Parser)]
#[command(name = "homlab", about = "Compositional grammar, transformer training and homomorphism-error probes")]
struct Cli {
    /// Output root for experiment blocks.
    #[arg(long, global = true, default_value = "runs")]
    root: PathBuf,
    /// Seeds per grid cell.
    #[arg(long, global = true)]
    seeds: Option<usize>,
    /// Concurrent runs.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Regularization strength.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// TOML file listing every config field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a dataset, the vocabulary and the OOD suite as JSON lines.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model from the config and write it to a run directory.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Add the homomorphism-error penalty.
        #[arg(long)]
        regularized: bool,
    },
    /// Compute the HE report of a trained run directory.
    Probe {
        #[arg(long)]
        run: PathBuf,
    },
    /// Evaluate a trained run directory on the OOD suite.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    /// Execute one experiment block, resuming completed runs.
    Run {
        #[arg(long)]
        block: Block,
    },
    /// Write figure data, plots and analysis for a block.
    Report {
        #[arg(long)]
        block: Block,
    },
    /// Run and report every block.
    All,
}

/// Snapshot stored in single-run directories.
#[derive(serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSnapshot {
    seed: u64,
    regularized: bool,
    config: ExperimentConfig,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seeds {
        cfg.suite.seeds = s;
    }
    if let Some(j) = cli.jobs {
        cfg.suite.jobs = j;
    }
    if let Some(l) = cli.lambda {
        cfg.reg.lambda = l;
    }
    cfg.reg.validate(cfg.model.n_layers).map_err(|e| HarnessError::Config(e.to_string()))?;
    if cfg.suite.seeds == 0 {
        return Err(HarnessError::Config("seeds must be at least 1".into()));
    }
    Ok(cfg)
}

fn dataset_spec(cfg: &ExperimentConfig, seed: u64) -> DatasetSpec {
    DatasetSpec { seed: homlab::derive_seed(&[&seed.to_string(), "dataset"]), ..cfg.dataset.clone() }
}

fn load_snapshot(run: &Path) -> Result<(RunSnapshot, Transformer), HarnessError> {
    let path = run.join("run.toml");
    let text = fs::read_to_string(&path).map_err(|e| HarnessError::Io { path: path.display().to_string(), message: e.to_string() })?;
    let snap: RunSnapshot = toml::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?;
    let params = load_checkpoint(&run.join("checkpoint.bin"))?;
    let model = Transformer::from_params(snap.config.model.clone(), params)?;
    Ok((snap, model))
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<(), HarnessError> {
    fs::write(&path, contents).map_err(|e| HarnessError::Io { path: path.display().to_string(), message: e.to_string() })
}

fn run_and_report(root: &Path, block: Block, cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    let out = harness::run_block(root, block, cfg)?;
    eprintln!("[{block}] {} runs complete ({} executed now), {} failed", out.records.len(), out.executed, out.failures.len());
    let rep = harness::report(root, block, cfg)?;
    eprintln!("[{block}] report in {}{}", rep.dir.display(), if rep.analysis.partial { " (partial)" } else { "" });
    Ok(())
}

fn execute(cli: &Cli) -> Result<(), HarnessError> {
    let cfg = load_config(cli)?;
    let vocab = VocabSpec::default();
    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| HarnessError::Io { path: p.display().to_string(), message: e.to_string() });
    match &cli.command {
        Command::GenData { out, seed } => {
            mkdir(out)?;
            let ds = build_dataset(&dataset_spec(&cfg, *seed), &vocab)?;
            let mut buf = Vec::new();
            write_jsonl(&ds.train, &vocab, &mut buf)?;
            write(out.join("train.jsonl"), &buf)?;
            buf.clear();
            write_jsonl(&ds.val, &vocab, &mut buf)?;
            write(out.join("val.jsonl"), &buf)?;
            buf.clear();
            let suite = harness::ood_suite(&cfg, &vocab)?;
            for items in suite.values() {
                write_jsonl(items, &vocab, &mut buf)?;
            }
            write(out.join("ood.jsonl"), &buf)?;
            write(out.join("vocab.json"), vocab_json(&vocab))?;
            eprintln!("{} train, {} val, {} ood examples in {}", ds.train.len(), ds.val.len(), buf.iter().filter(|&&b| b == b'\n').count(), out.display());
        }
        Command::Train { out, seed, regularized } => {
            mkdir(out)?;
            let ds = build_dataset(&dataset_spec(&cfg, *seed), &vocab)?;
            let model = Transformer::init(cfg.model.clone(), &mut homlab::stream_rng(*seed, "init"))?;
            let tc = homlab::trainer::TrainConfig { seed: *seed, ..cfg.train.clone() };
            let (model, history) = if *regularized {
                let (m, h, rh) = train_regularized(model, &ds.train, &ds.val, &vocab, &tc, &cfg.reg)?;
                write(out.join("reg_history.csv"), rh.to_csv())?;
                (m, h)
            } else {
                train(model, &ds.train, &ds.val, &tc)?
            };
            let snap = RunSnapshot { seed: *seed, regularized: *regularized, config: cfg.clone() };
            write(out.join("run.toml"), toml::to_string(&snap).expect("snapshot serializes"))?;
            write(out.join("history.csv"), history.to_csv())?;
            save_checkpoint(&model.params, &out.join("checkpoint.bin"))?;
            eprintln!("best epoch {} (val loss {:.5}) -> {}", history.best_epoch, history.best_val_loss, out.display());
        }
        Command::Probe { run } => {
            let (snap, model) = load_snapshot(run)?;
            let ds = build_dataset(&dataset_spec(&snap.config, snap.seed), &vocab)?;
            let probe = homlab::probes::ProbeConfig { seed: snap.seed, ..snap.config.probe.clone() };
            let he = compute_he_report(&model, &ds.train, &vocab, &probe)?;
            write(run.join("he_report.json"), serde_json::to_string_pretty(&he).expect("report serializes"))?;
            println!("modifier HE {:?}, sequence HE {:?}", he.he_mod_mean, he.he_seq_mean);
        }
        Command::Eval { run } => {
            let (snap, model) = load_snapshot(run)?;
            let ood = evaluate_ood(&model, &harness::ood_suite(&snap.config, &vocab)?)?;
            write(run.join("ood.json"), serde_json::to_string_pretty(&ood).expect("result serializes"))?;
            println!("exact match {:.4}, token accuracy {:.4}", ood.mean_exact_match, ood.mean_token_accuracy);
        }
        Command::Run { block } => {
            let out = harness::run_block(&cli.root, *block, &cfg)?;
            eprintln!("[{block}] {} runs complete ({} executed now), {} failed", out.records.len(), out.executed, out.failures.len());
            if !out.failures.is_empty() {
                return Err(HarnessError::Config(format!("{} runs failed; see manifest.jsonl", out.failures.len())));
            }
        }
        Command::Report { block } => {
            let rep = harness::report(&cli.root, *block, &cfg)?;
            println!("{}", fs::read_to_string(rep.dir.join("analysis.json")).unwrap_or_default());
        }
        Command::All => {
            for block in Block::ALL {
                run_and_report(&cli.root, block, &cfg)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
