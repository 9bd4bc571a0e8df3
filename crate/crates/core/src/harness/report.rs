//! Figure data, plots and statistical analysis for a completed block.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::svg::{self, Point, Series};
use super::{load_block, plan, to_json, write_file, Block, ExperimentConfig, HarnessError, RunRecord};
use crate::evalstats::{aggregate_seeds, mean_std, paired_t_test, polyfit_r2, spearman, AggregateRow, PolyFit, SummaryRow, TTest};
use crate::probes::TripleKind;

/// Per-run scalar metrics, in a fixed order.
pub fn record_metrics(r: &RunRecord) -> Vec<(String, f64)> {
    let nan = f64::NAN;
    let mut m = vec![
        ("ood_exact".to_string(), r.ood.mean_exact_match),
        ("ood_token".to_string(), r.ood.mean_token_accuracy),
        ("he_mod".to_string(), r.he.he_mod_mean.unwrap_or(nan)),
        ("he_seq".to_string(), r.he.he_seq_mean.unwrap_or(nan)),
        ("best_val_loss".to_string(), r.history.best_val_loss),
        ("best_epoch".to_string(), r.history.best_epoch as f64),
        ("wall_clock_secs".to_string(), r.wall_clock_secs),
    ];
    for (k, acc) in &r.ood.per_k {
        m.push((format!("ood_exact_k{k:02}"), acc.exact_match));
        m.push((format!("ood_token_k{k:02}"), acc.token_accuracy));
    }
    for (layer, kinds) in &r.he.layers {
        for (kind, fam) in kinds {
            let name = match kind {
                TripleKind::Modifier => "he_mod",
                TripleKind::Sequence => "he_seq",
            };
            m.push((format!("{name}_l{layer:02}"), fam.mean.unwrap_or(nan)));
        }
    }
    m
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FigureRow {
    pub x: f64,
    pub y: f64,
    pub series: String,
    pub mean: f64,
    pub std: f64,
}

fn figure_csv(rows: &[FigureRow]) -> String {
    let mut s = String::from("x,y,series,mean,std\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.x, r.y, r.series, r.mean, r.std);
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fitted<T> {
    pub value: Option<T>,
    pub error: Option<String>,
}

impl<T, E: std::fmt::Display> From<Result<T, E>> for Fitted<T> {
    fn from(r: Result<T, E>) -> Self {
        match r {
            Ok(v) => Fitted { value: Some(v), error: None },
            Err(e) => Fitted { value: None, error: Some(e.to_string()) },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseAnalysis {
    pub spearman_noise_he_mod: Option<f64>,
    pub spearman_noise_he_seq: Option<f64>,
    pub spearman_noise_ood_exact: Option<f64>,
    pub spearman_noise_ood_token: Option<f64>,
    pub he_mod_range: f64,
    pub he_seq_range: f64,
    pub ood_exact_range: f64,
    pub ood_token_range: f64,
    /// Degree 1..=3 fits of mean OOD exact-match against mean modifier HE.
    pub regression_exact: Vec<Fitted<PolyFit>>,
    pub regression_token: Vec<Fitted<PolyFit>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparsityAnalysis {
    pub he_mod_one: Option<f64>,
    pub he_mod_two: Option<f64>,
    pub he_mod_ratio: Option<f64>,
    pub ood_exact_one: Option<f64>,
    pub ood_exact_two: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegAnalysis {
    pub lambda: Option<f64>,
    /// Seeds with every noise level present in both arms.
    pub paired_seeds: Vec<usize>,
    /// metric -> (baseline, regularized) per-seed averages across noise.
    pub per_seed: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    /// Regularized minus baseline.
    pub t_tests: BTreeMap<String, Fitted<TTest>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Analysis {
    pub block: Block,
    pub partial: bool,
    pub expected_runs: usize,
    pub completed_runs: usize,
    pub noise: Option<NoiseAnalysis>,
    pub sparsity: Option<SparsityAnalysis>,
    pub regularization: Option<RegAnalysis>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutcome {
    pub dir: PathBuf,
    pub analysis: Analysis,
    pub files: Vec<PathBuf>,
}

/// cell -> metric -> aggregate.
type Aggregates = BTreeMap<String, BTreeMap<String, AggregateRow>>;

fn summarize(records: &[RunRecord]) -> (Vec<SummaryRow>, Vec<AggregateRow>, Aggregates) {
    let rows: Vec<SummaryRow> = records
        .iter()
        .flat_map(|r| {
            record_metrics(r)
                .into_iter()
                .filter(|(_, v)| v.is_finite())
                .map(|(metric, value)| SummaryRow { cell: r.cell.clone(), seed: r.seed_index, metric, value })
        })
        .collect();
    // Single-seed groups get a zero std rather than an error.
    let mut agg = Vec::new();
    let mut by_cell: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in &rows {
        by_cell.entry((r.cell.clone(), r.metric.clone())).or_default().push(r.value);
    }
    for ((cell, metric), vals) in by_cell {
        if vals.len() >= 2 {
            continue;
        }
        agg.push(AggregateRow { cell, metric, mean: vals[0], std: 0.0, n: 1 });
    }
    let multi: Vec<SummaryRow> = rows
        .iter()
        .filter(|r| !agg.iter().any(|a| a.cell == r.cell && a.metric == r.metric))
        .cloned()
        .collect();
    agg.extend(aggregate_seeds(&multi).expect("groups have at least two finite values"));
    agg.sort_by(|a, b| (&a.cell, &a.metric).cmp(&(&b.cell, &b.metric)));
    let mut map: Aggregates = BTreeMap::new();
    for a in &agg {
        map.entry(a.cell.clone()).or_default().insert(a.metric.clone(), a.clone());
    }
    (rows, agg, map)
}

fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("cell,seed,metric,value\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.cell, r.seed, r.metric, r.value);
    }
    s
}

fn aggregate_csv(rows: &[AggregateRow]) -> String {
    let mut s = String::from("cell,metric,mean,std,n\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.cell, r.metric, r.mean, r.std, r.n);
    }
    s
}

struct Writer {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Writer {
    fn put(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), HarnessError> {
        let path = self.dir.join(name);
        write_file(&path, contents)?;
        self.files.push(path);
        Ok(())
    }

    fn figure(&mut self, stem: &str, rows: &[FigureRow], svg: String) -> Result<(), HarnessError> {
        self.put(&format!("{stem}.csv"), figure_csv(rows))?;
        self.put(&format!("{stem}.svg"), svg)
    }
}

/// Line-figure rows for the given metrics over the block's cells.
fn sweep_rows(cells: &[(String, f64)], agg: &Aggregates, metrics: &[&str]) -> Vec<FigureRow> {
    let mut rows = Vec::new();
    for metric in metrics {
        for (cell, x) in cells {
            if let Some(a) = agg.get(cell).and_then(|m| m.get(*metric)) {
                rows.push(FigureRow { x: *x, y: a.mean, series: metric.to_string(), mean: a.mean, std: a.std });
            }
        }
    }
    rows
}

fn series_of(rows: &[FigureRow]) -> Vec<Series> {
    let mut by: BTreeMap<&str, Vec<Point>> = BTreeMap::new();
    for r in rows {
        by.entry(&r.series).or_default().push(Point { x: r.x, y: r.y, err: r.std });
    }
    by.into_iter().map(|(name, points)| Series { name: name.into(), points }).collect()
}

fn per_k_metrics(agg: &Aggregates, prefix: &str) -> Vec<String> {
    let mut names: Vec<String> = agg.values().flat_map(|m| m.keys()).filter(|k| k.starts_with(prefix)).cloned().collect();
    names.sort();
    names.dedup();
    names
}

fn sweep_figures(w: &mut Writer, stem: &str, what: &str, cells: &[(String, f64)], agg: &Aggregates) -> Result<(), HarnessError> {
    let acc = sweep_rows(cells, agg, &["ood_exact", "ood_token"]);
    let he = sweep_rows(cells, agg, &["he_mod", "he_seq"]);
    let per_k_names = per_k_metrics(agg, "ood_exact_k");
    let per_k = sweep_rows(cells, agg, &per_k_names.iter().map(String::as_str).collect::<Vec<_>>());
    let mut all = acc.clone();
    all.extend(he.iter().cloned());
    all.extend(per_k.iter().cloned());
    w.put(&format!("{stem}.csv"), figure_csv(&all))?;
    w.put(&format!("{stem}_accuracy.svg"), svg::plot("Mean OOD accuracy", what, "accuracy", &series_of(&acc), true))?;
    w.put(&format!("{stem}_he.svg"), svg::plot("Mean homomorphism error", what, "MSE", &series_of(&he), true))?;
    w.put(&format!("{stem}_per_k.svg"), svg::plot("OOD exact match by primitive count", what, "exact match", &series_of(&per_k), true))
}

fn cells_of(block: Block, cfg: &ExperimentConfig) -> Vec<(String, f64)> {
    plan(block, cfg).into_iter().map(|c| (c.id, c.x)).collect()
}

fn mean_of(agg: &Aggregates, cell: &str, metric: &str) -> Option<f64> {
    agg.get(cell).and_then(|m| m.get(metric)).map(|a| a.mean)
}

fn column(cells: &[(String, f64)], agg: &Aggregates, metric: &str) -> (Vec<f64>, Vec<f64>) {
    cells.iter().filter_map(|(c, x)| mean_of(agg, c, metric).map(|m| (*x, m))).unzip()
}

fn range(v: &[f64]) -> f64 {
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    if v.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

/// Noise-sweep statistics over per-cell means.
pub fn noise_analysis(cells: &[(String, f64)], agg: &Aggregates) -> NoiseAnalysis {
    let (xm, he_mod) = column(cells, agg, "he_mod");
    let (xs, he_seq) = column(cells, agg, "he_seq");
    let (xe, exact) = column(cells, agg, "ood_exact");
    let (xt, token) = column(cells, agg, "ood_token");
    // Regressions need both coordinates per cell.
    let paired = |metric: &str| -> (Vec<f64>, Vec<f64>) {
        cells
            .iter()
            .filter_map(|(c, _)| Some((mean_of(agg, c, "he_mod")?, mean_of(agg, c, metric)?)))
            .unzip()
    };
    let (hx, ey) = paired("ood_exact");
    let (tx, ty) = paired("ood_token");
    NoiseAnalysis {
        spearman_noise_he_mod: spearman(&xm, &he_mod),
        spearman_noise_he_seq: spearman(&xs, &he_seq),
        spearman_noise_ood_exact: spearman(&xe, &exact),
        spearman_noise_ood_token: spearman(&xt, &token),
        he_mod_range: range(&he_mod),
        he_seq_range: range(&he_seq),
        ood_exact_range: range(&exact),
        ood_token_range: range(&token),
        regression_exact: (1..=3).map(|d| polyfit_r2(&hx, &ey, d).into()).collect(),
        regression_token: (1..=3).map(|d| polyfit_r2(&tx, &ty, d).into()).collect(),
    }
}

/// Per-seed averages across noise levels for each arm, restricted to
/// seeds complete in both.
pub fn regularization_analysis(base: &[RunRecord], reg: &[RunRecord], n_cells: usize) -> RegAnalysis {
    let metrics = ["he_mod", "he_seq", "ood_exact", "ood_token"];
    let index = |recs: &[RunRecord]| {
        let mut by: BTreeMap<usize, BTreeMap<String, BTreeMap<String, f64>>> = BTreeMap::new();
        for r in recs {
            by.entry(r.seed_index).or_default().insert(r.cell.clone(), record_metrics(r).into_iter().collect());
        }
        by
    };
    let (bi, ri) = (index(base), index(reg));
    let paired_seeds: Vec<usize> = bi
        .iter()
        .filter(|(s, cells)| cells.len() == n_cells && ri.get(*s).is_some_and(|rc| rc.len() == n_cells && rc.keys().eq(cells.keys())))
        .map(|(s, _)| *s)
        .collect();
    let avg = |cells: &BTreeMap<String, BTreeMap<String, f64>>, metric: &str| {
        let v: Vec<f64> = cells.values().filter_map(|m| m.get(metric).copied()).filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let mut per_seed = BTreeMap::new();
    let mut t_tests = BTreeMap::new();
    for m in metrics {
        let b: Vec<f64> = paired_seeds.iter().map(|s| avg(&bi[s], m)).collect();
        let r: Vec<f64> = paired_seeds.iter().map(|s| avg(&ri[s], m)).collect();
        t_tests.insert(m.to_string(), paired_t_test(&r, &b).into());
        per_seed.insert(m.to_string(), (b, r));
    }
    RegAnalysis { lambda: reg.iter().find_map(|r| r.reg.as_ref().map(|g| g.lambda)), paired_seeds, per_seed, t_tests }
}

/// Writes `<root>/reports/<block>/` from the block's completed runs.
pub fn report(root: &Path, block: Block, cfg: &ExperimentConfig) -> Result<ReportOutcome, HarnessError> {
    let records = load_block(root, block, cfg)?;
    if records.is_empty() {
        return Err(HarnessError::NoRecords(block));
    }
    let cells = cells_of(block, cfg);
    let expected = cells.len() * cfg.suite.seeds;
    let mut w = Writer { dir: root.join("reports").join(block.as_str()), files: Vec::new() };
    let (rows, agg_rows, agg) = summarize(&records);
    w.put("summary.csv", summary_csv(&rows))?;
    w.put("aggregate.csv", aggregate_csv(&agg_rows))?;

    let mut analysis = Analysis {
        block,
        partial: records.len() < expected,
        expected_runs: expected,
        completed_runs: records.len(),
        noise: None,
        sparsity: None,
        regularization: None,
    };
    match block {
        Block::Rq1a => sweep_figures(&mut w, "fig1_layers", "transformer layers", &cells, &agg)?,
        Block::Rq1b => {
            sweep_figures(&mut w, "fig2_primitives", "max primitives in training", &cells, &agg)?;
            let one = |m| mean_of(&agg, "prims-1", m);
            let two = |m| mean_of(&agg, "prims-2", m);
            analysis.sparsity = Some(SparsityAnalysis {
                he_mod_one: one("he_mod"),
                he_mod_two: two("he_mod"),
                he_mod_ratio: one("he_mod").zip(two("he_mod")).map(|(a, b)| a / b),
                ood_exact_one: one("ood_exact"),
                ood_exact_two: two("ood_exact"),
            });
        }
        Block::Rq1c => {
            sweep_figures(&mut w, "fig3_noise", "noise tokens", &cells, &agg)?;
            let noise = noise_analysis(&cells, &agg);
            let mut rows = Vec::new();
            for (series, metric) in [("ood_exact", "ood_exact"), ("ood_token", "ood_token")] {
                for (cell, _) in &cells {
                    if let (Some(h), Some(a)) = (mean_of(&agg, cell, "he_mod"), agg.get(cell).and_then(|m| m.get(metric))) {
                        rows.push(FigureRow { x: h, y: a.mean, series: series.into(), mean: a.mean, std: a.std });
                    }
                }
            }
            let mut series = series_of(&rows);
            for (name, fits) in [("exact fit (deg 2)", &noise.regression_exact), ("token fit (deg 2)", &noise.regression_token)] {
                if let Some(fit) = fits.get(1).and_then(|f| f.value.as_ref()) {
                    let (lo, hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), r| (l.min(r.x), h.max(r.x)));
                    let points = (0..=20)
                        .map(|i| {
                            let x = lo + (hi - lo) * i as f64 / 20.0;
                            let y = fit.coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c);
                            Point { x, y, err: 0.0 }
                        })
                        .collect();
                    series.push(Series { name: name.into(), points });
                }
            }
            w.figure("fig4_accuracy_vs_he", &rows, svg::plot("OOD accuracy vs modifier HE", "mean modifier HE", "mean OOD accuracy", &series, false))?;
            analysis.noise = Some(noise);
        }
        Block::Rq2 => {
            sweep_figures(&mut w, "fig_reg_noise", "noise tokens", &cells, &agg)?;
            let base = load_block(root, Block::Rq1c, cfg)?;
            let reg = regularization_analysis(&base, &records, cells.len());
            let mut box_rows = Vec::new();
            let mut groups = Vec::new();
            for m in ["he_mod", "he_seq"] {
                let (b, r) = &reg.per_seed[m];
                for (arm, vals) in [("baseline", b), ("regularized", r)] {
                    let (mean, std) = mean_std(vals).unwrap_or((vals.first().copied().unwrap_or(f64::NAN), 0.0));
                    for (s, v) in reg.paired_seeds.iter().zip(vals) {
                        box_rows.push(FigureRow { x: *s as f64, y: *v, series: format!("{m}/{arm}"), mean, std });
                    }
                    groups.push((format!("{m} {arm}"), vals.clone()));
                }
            }
            w.figure("fig5_he_box", &box_rows, svg::box_plot("Per-seed HE averaged across noise", "MSE", &groups))?;

            // Baseline -> regularized arrows for each (seed, noise) pair.
            let key = |r: &RunRecord| (r.cell.clone(), r.seed_index);
            let base_by: BTreeMap<_, _> = base.iter().map(|r| (key(r), r)).collect();
            let cell_x: BTreeMap<&str, f64> = cells.iter().map(|(c, x)| (c.as_str(), *x)).collect();
            let mut arrow_rows = Vec::new();
            let mut arrows = Vec::new();
            for r in &records {
                let Some(b) = base_by.get(&key(r)) else { continue };
                let (bh, rh) = (b.he.he_mod_mean.unwrap_or(f64::NAN), r.he.he_mod_mean.unwrap_or(f64::NAN));
                let (ba, ra) = (b.ood.mean_token_accuracy, r.ood.mean_token_accuracy);
                let tag = format!("s{}-{}", r.seed_index, r.cell);
                let noise = cell_x.get(r.cell.as_str()).copied().unwrap_or(f64::NAN);
                arrow_rows.push(FigureRow { x: bh, y: ba, series: format!("baseline/{tag}"), mean: noise, std: 0.0 });
                arrow_rows.push(FigureRow { x: rh, y: ra, series: format!("regularized/{tag}"), mean: noise, std: 0.0 });
                arrows.push(((bh, ba), (rh, ra)));
            }
            w.figure(
                "fig6_arrows",
                &arrow_rows,
                svg::arrow_plot("Baseline to regularized", "mean modifier HE", "mean OOD token accuracy", &arrows),
            )?;
            analysis.partial |= reg.paired_seeds.len() < cfg.suite.seeds;
            analysis.regularization = Some(reg);
        }
    }
    w.put("analysis.json", to_json(&analysis))?;
    Ok(ReportOutcome { dir: w.dir.clone(), analysis, files: w.files })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalstats::{KAccuracy, OODResult};
    use crate::probes::HEReport;
    use crate::trainer::TrainHistory;

    fn record(block: Block, cell: &str, x: f64, seed: usize, he_mod: f64, exact: f64) -> RunRecord {
        RunRecord {
            block,
            cell: cell.into(),
            x,
            seed_index: seed,
            run_seed: 0,
            dataset_hash: String::new(),
            checkpoint: String::new(),
            train_examples: 0,
            history: TrainHistory::default(),
            reg: None,
            ood: OODResult {
                per_k: [(5, KAccuracy { exact_match: exact, token_accuracy: exact, n: 1 })].into(),
                mean_exact_match: exact,
                mean_token_accuracy: exact,
            },
            he: HEReport { he_mod_mean: Some(he_mod), he_seq_mean: Some(1.0), ..HEReport::default() },
            wall_clock_secs: 1.0,
        }
    }

    #[test]
    fn aggregates_tolerate_single_seed_cells() {
        let recs = vec![record(Block::Rq1b, "prims-1", 1.0, 0, 2.0, 0.1), record(Block::Rq1b, "prims-2", 2.0, 0, 1.0, 0.2), record(Block::Rq1b, "prims-2", 2.0, 1, 3.0, 0.2)];
        let (_, _, agg) = summarize(&recs);
        assert_eq!(agg["prims-1"]["he_mod"].std, 0.0);
        assert_eq!(agg["prims-2"]["he_mod"].mean, 2.0);
        assert!((agg["prims-2"]["he_mod"].std - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn noise_analysis_recovers_a_monotone_trend() {
        let cells: Vec<(String, f64)> = (0..16).map(|n| (format!("noise-{n:02}"), n as f64)).collect();
        let recs: Vec<RunRecord> = cells
            .iter()
            .flat_map(|(c, x)| (0..2).map(move |s| record(Block::Rq1c, c, *x, s, 0.001 * (1.0 + x), 0.5 - 0.01 * x - 0.0005 * x * x)))
            .collect();
        let (_, _, agg) = summarize(&recs);
        let a = noise_analysis(&cells, &agg);
        assert!((a.spearman_noise_he_mod.unwrap() - 1.0).abs() < 1e-12);
        assert!((a.spearman_noise_ood_exact.unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(a.spearman_noise_he_seq, None);
        assert_eq!(a.he_seq_range, 0.0);
        let r2: Vec<f64> = a.regression_exact.iter().map(|f| f.value.as_ref().unwrap().r2).collect();
        assert!(r2[1] > 1.0 - 1e-9 && r2[2] > 1.0 - 1e-9 && r2[0] < r2[1]);
    }

    #[test]
    fn regularization_pairs_only_complete_seeds() {
        let mut base = Vec::new();
        let mut reg = Vec::new();
        for s in 0..3 {
            for n in 0..2 {
                let cell = format!("noise-{n:02}");
                base.push(record(Block::Rq1c, &cell, n as f64, s, 1.0 + s as f64, 0.3));
                if s != 2 || n == 0 {
                    reg.push(record(Block::Rq2, &cell, n as f64, s, 0.5 + s as f64 * 1.1, 0.4));
                }
            }
        }
        let a = regularization_analysis(&base, &reg, 2);
        assert_eq!(a.paired_seeds, vec![0, 1]);
        let t = a.t_tests["he_mod"].value.unwrap();
        assert!((t.mean_diff - (-0.45)).abs() < 1e-12);
        assert!(a.t_tests["ood_exact"].value.is_some());
    }

    #[test]
    fn empty_block_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = report(dir.path(), Block::Rq1c, &ExperimentConfig::default()).unwrap_err();
        assert!(matches!(err, HarnessError::NoRecords(Block::Rq1c)));
    }
}
