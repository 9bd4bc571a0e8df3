//! Out-of-distribution evaluation and the statistics used by the reports:
//! seed aggregation, paired t-tests, polynomial fits and rank correlation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{Example, TokenId};
use crate::model::{ModelError, Transformer};
use crate::numerics::cholesky_solve;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least {need} values, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("degenerate design matrix: {0}")]
    Degenerate(String),
    #[error("non-finite input")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KAccuracy {
    pub exact_match: f64,
    pub token_accuracy: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OODResult {
    pub per_k: BTreeMap<usize, KAccuracy>,
    pub mean_exact_match: f64,
    pub mean_token_accuracy: f64,
}

/// Fraction of positions that agree, over the longer of the two lengths.
pub fn token_accuracy(pred: &[TokenId], gold: &[TokenId]) -> f64 {
    let longest = pred.len().max(gold.len());
    if longest == 0 {
        return 1.0;
    }
    pred.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / longest as f64
}

/// Scores a suite given a decoder mapping prompts and output budgets to
/// predicted outputs (EOS included when the decoder stopped).
pub fn evaluate_with<F>(suite: &BTreeMap<usize, Vec<Example>>, mut decode: F) -> Result<OODResult, ModelError>
where
    F: FnMut(&[Vec<TokenId>], &[usize]) -> Result<Vec<Vec<TokenId>>, ModelError>,
{
    let mut out = OODResult::default();
    for (&k, items) in suite {
        if items.is_empty() {
            continue;
        }
        let prompts: Vec<Vec<TokenId>> = items.iter().map(|e| e.input_tokens.clone()).collect();
        // One token past the gold length is enough to see that an output
        // overruns.
        let budgets: Vec<usize> = items.iter().map(|e| e.output_tokens.len() + 1).collect();
        let preds = decode(&prompts, &budgets)?;
        let mut exact = 0usize;
        let mut tok = 0.0;
        for (p, e) in preds.iter().zip(items) {
            exact += usize::from(*p == e.output_tokens);
            tok += token_accuracy(p, &e.output_tokens);
        }
        let n = items.len();
        out.per_k.insert(k, KAccuracy { exact_match: exact as f64 / n as f64, token_accuracy: tok / n as f64, n });
    }
    let nk = out.per_k.len().max(1) as f64;
    out.mean_exact_match = out.per_k.values().map(|a| a.exact_match).sum::<f64>() / nk;
    out.mean_token_accuracy = out.per_k.values().map(|a| a.token_accuracy).sum::<f64>() / nk;
    Ok(out)
}

/// Greedy-decoding OOD accuracy of `model`.
pub fn evaluate_ood(model: &Transformer, suite: &BTreeMap<usize, Vec<Example>>) -> Result<OODResult, ModelError> {
    evaluate_with(suite, |prompts, budgets| {
        Ok(model.greedy_decode_batch(prompts, budgets)?.iter().map(|d| d.with_eos()).collect())
    })
}

/// Mean and sample standard deviation (n - 1 denominator).
pub fn mean_std(values: &[f64]) -> Result<(f64, f64), StatsError> {
    if values.len() < 2 {
        return Err(StatsError::TooFew { need: 2, got: values.len() });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    /// Two-sided.
    pub p: f64,
    pub mean_diff: f64,
}

/// Paired t-test on `a - b`. All-zero differences give `t = 0, p = 1`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::Length(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(StatsError::TooFew { need: 2, got: a.len() });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let df = diffs.len() - 1;
    let (mean, sd) = mean_std(&diffs)?;
    if diffs.iter().all(|&d| d == 0.0) {
        return Ok(TTest { t: 0.0, df, p: 1.0, mean_diff: 0.0 });
    }
    if sd == 0.0 {
        return Ok(TTest { t: mean.signum() * f64::INFINITY, df, p: 0.0, mean_diff: mean });
    }
    let t = mean / (sd / (diffs.len() as f64).sqrt());
    Ok(TTest { t, df, p: student_t_two_sided(t, df as f64), mean_diff: mean })
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(x, df / 2.0, 0.5).clamp(0.0, 1.0)
}

/// Lanczos approximation (g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// `I_x(a, b)` by Lentz's continued fraction, using the symmetry
/// `I_x(a, b) = 1 - I_{1-x}(b, a)` where the fraction converges faster.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(1.0 - x, b, a) / b
    }
}

fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=1000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyFit {
    pub degree: usize,
    /// Ascending powers of the original `x`.
    pub coefficients: Vec<f64>,
    pub r2: f64,
}

/// Least-squares polynomial fit. `x` is standardized and the design columns
/// scaled to unit norm before solving the normal equations; coefficients
/// are mapped back to the original `x`. When `y` is constant, R² is 1 if
/// the fit reproduces it and 0 otherwise.
pub fn polyfit_r2(x: &[f64], y: &[f64], degree: usize) -> Result<PolyFit, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::Length(x.len(), y.len()));
    }
    if x.len() <= degree {
        return Err(StatsError::TooFew { need: degree + 1, got: x.len() });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let n = x.len();
    let p = degree + 1;
    let mx = x.iter().sum::<f64>() / n as f64;
    let sx = (x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n as f64).sqrt();
    if degree > 0 && sx == 0.0 {
        return Err(StatsError::Degenerate("x is constant".into()));
    }
    let sx = if sx == 0.0 { 1.0 } else { sx };
    let z: Vec<f64> = x.iter().map(|v| (v - mx) / sx).collect();
    let mut design = vec![0.0; n * p];
    for (i, &zi) in z.iter().enumerate() {
        for j in 0..p {
            design[i * p + j] = zi.powi(j as i32);
        }
    }
    let norms: Vec<f64> = (0..p).map(|j| (0..n).map(|i| design[i * p + j].powi(2)).sum::<f64>().sqrt()).collect();
    if norms.iter().any(|&c| c == 0.0) {
        return Err(StatsError::Degenerate("zero design column".into()));
    }
    for i in 0..n {
        for j in 0..p {
            design[i * p + j] /= norms[j];
        }
    }
    let g = crate::numerics::gram(&design, n, p);
    let mut beta: Vec<f64> = (0..p).map(|j| (0..n).map(|i| design[i * p + j] * y[i]).sum()).collect();
    cholesky_solve(&g, p, &mut beta, 1).map_err(|e| StatsError::Degenerate(e.to_string()))?;
    // Coefficients in z, then expand (x - mx)^j / sx^j binomially.
    let cz: Vec<f64> = beta.iter().zip(&norms).map(|(b, c)| b / c).collect();
    let mut coefficients = vec![0.0; p];
    for (j, &c) in cz.iter().enumerate() {
        let scale = c / sx.powi(j as i32);
        let mut binom = 1.0;
        for k in 0..=j {
            // term: C(j, k) x^k (-mx)^(j - k)
            coefficients[k] += scale * binom * (-mx).powi((j - k) as i32);
            binom = binom * (j - k) as f64 / (k + 1) as f64;
        }
    }
    let fitted: Vec<f64> = z.iter().map(|&zi| cz.iter().enumerate().map(|(j, c)| c * zi.powi(j as i32)).sum()).collect();
    let my = y.iter().sum::<f64>() / n as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(&fitted).map(|(v, f)| (v - f).powi(2)).sum();
    let scale = y.iter().map(|v| v * v).sum::<f64>().max(1.0);
    let r2 = if ss_tot <= 1e-24 * scale {
        if ss_res <= 1e-20 * scale {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(PolyFit { degree, coefficients, r2 })
}

/// Average ranks, ties sharing the mean of their positions (1-based).
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&ranks(x), &ranks(y))
}

/// One metric value of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cell: String,
    pub seed: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub cell: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Mean and standard deviation over seeds for every (cell, metric).
pub fn aggregate_seeds(rows: &[SummaryRow]) -> Result<Vec<AggregateRow>, StatsError> {
    let mut groups: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups.entry((&r.cell, &r.metric)).or_default().push(r.value);
    }
    groups
        .into_iter()
        .map(|((cell, metric), values)| {
            let (mean, std) = mean_std(&values)?;
            Ok(AggregateRow { cell: cell.into(), metric: metric.into(), mean, std, n: values.len() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{build_ood_suite, VocabSpec, EOS};
    use crate::seeded_rng;

    fn suite() -> BTreeMap<usize, Vec<Example>> {
        let mut s = build_ood_suite(&VocabSpec::default(), 0.5, &mut seeded_rng(1)).unwrap();
        s.values_mut().for_each(|v| v.truncate(10));
        s
    }

    #[test]
    fn gold_decoder_scores_one() {
        let s = suite();
        let gold: BTreeMap<Vec<TokenId>, Vec<TokenId>> =
            s.values().flatten().map(|e| (e.input_tokens.clone(), e.output_tokens.clone())).collect();
        let r = evaluate_with(&s, |p, _| Ok(p.iter().map(|x| gold[x].clone()).collect())).unwrap();
        assert_eq!(r.per_k.len(), 8);
        assert!(r.per_k.values().all(|a| a.exact_match == 1.0 && a.token_accuracy == 1.0));
        assert_eq!(r.mean_exact_match, 1.0);
    }

    #[test]
    fn immediate_eos_scores_zero() {
        let r = evaluate_with(&suite(), |p, _| Ok(vec![vec![EOS]; p.len()])).unwrap();
        assert_eq!(r.mean_exact_match, 0.0);
        assert_eq!(r.mean_token_accuracy, 0.0);
    }

    #[test]
    fn token_accuracy_penalizes_length() {
        assert_eq!(token_accuracy(&[5, 5, 3], &[5, 5, 3]), 1.0);
        assert_eq!(token_accuracy(&[5, 5, 5, 3], &[5, 5, 3]), 0.5);
        assert_eq!(token_accuracy(&[5], &[5, 5, 3]), 1.0 / 3.0);
    }

    #[test]
    fn model_evaluation_is_deterministic() {
        let cfg = crate::model::ModelConfig { d_model: 16, n_heads: 2, d_ff: 32, n_layers: 1, vocab_size: 26, max_len: 128 };
        let m = Transformer::init(cfg, &mut seeded_rng(0)).unwrap();
        let s = suite();
        let a = evaluate_ood(&m, &s).unwrap();
        assert_eq!(a, evaluate_ood(&m, &s).unwrap());
        assert!(a.per_k.values().all(|x| (0.0..=1.0).contains(&x.exact_match) && (0.0..=1.0).contains(&x.token_accuracy)));
    }

    #[test]
    fn mean_std_by_hand() {
        assert_eq!(mean_std(&[1.0, 2.0, 3.0]).unwrap(), (2.0, 1.0));
        assert_eq!(mean_std(&[4.0, 4.0]).unwrap(), (4.0, 0.0));
        assert!(mean_std(&[1.0]).is_err());
    }

    #[test]
    fn t_test_known_case() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let r = paired_t_test(&a, &[0.0; 5]).unwrap();
        assert!((r.t - 3.0 / (2.5f64.sqrt() / 5f64.sqrt())).abs() < 1e-12);
        assert!((r.t - 4.2426).abs() < 1e-4);
        assert_eq!(r.df, 4);
        assert!((r.p - 0.0132).abs() < 1e-4, "{}", r.p);
        let s = paired_t_test(&[0.0; 5], &a).unwrap();
        assert_eq!(s.t, -r.t);
        assert_eq!(s.p, r.p);
    }

    #[test]
    fn t_test_degenerate_cases() {
        let a = [0.3, 0.1, 0.2];
        assert_eq!(paired_t_test(&a, &a).unwrap(), TTest { t: 0.0, df: 2, p: 1.0, mean_diff: 0.0 });
        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[2.0]).is_err());
    }

    #[test]
    fn t_distribution_reference_values() {
        // Cauchy (df = 1): P(|T| > 1) = 1/2.
        assert!((student_t_two_sided(1.0, 1.0) - 0.5).abs() < 1e-12);
        // df = 2 has the closed form 1 - t / sqrt(2 + t^2).
        for t in [0.3, 1.0, 2.5, 7.0] {
            let exact = 1.0 - t / (2.0f64 + t * t).sqrt();
            assert!((student_t_two_sided(t, 2.0) - exact).abs() < 1e-12);
        }
        assert_eq!(student_t_two_sided(0.0, 5.0), 1.0);
    }

    #[test]
    fn ln_gamma_matches_factorials() {
        let mut f = 1.0f64;
        for n in 1..20 {
            assert!((ln_gamma(n as f64) - f.ln()).abs() < 1e-10, "n={n}");
            f *= n as f64;
        }
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
    }

    #[test]
    fn polyfit_exact_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let f = polyfit_r2(&x, &y, 1).unwrap();
        assert!((f.r2 - 1.0).abs() < 1e-12);
        assert!((f.coefficients[0] - 1.0).abs() < 1e-10 && (f.coefficients[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn polyfit_recovers_cubic_coefficients() {
        let x: Vec<f64> = (0..12).map(|i| 0.5 + i as f64 * 0.3).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.5 - v + 0.25 * v * v - 0.125 * v * v * v).collect();
        let f = polyfit_r2(&x, &y, 3).unwrap();
        for (c, e) in f.coefficients.iter().zip([0.5, -1.0, 0.25, -0.125]) {
            assert!((c - e).abs() < 1e-8, "{:?}", f.coefficients);
        }
    }

    #[test]
    fn polyfit_constant_target() {
        let f = polyfit_r2(&[1.0, 2.0, 3.0, 4.0], &[0.7; 4], 2).unwrap();
        assert_eq!(f.r2, 1.0);
    }

    #[test]
    fn polyfit_errors() {
        assert!(matches!(polyfit_r2(&[1.0, 2.0], &[1.0, 2.0], 2), Err(StatsError::TooFew { .. })));
        assert!(matches!(polyfit_r2(&[1.0; 4], &[1.0, 2.0, 3.0, 4.0], 1), Err(StatsError::Degenerate(_))));
    }

    #[test]
    fn spearman_cases() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 40.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]), None);
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn aggregate_groups_by_cell_and_metric() {
        let row = |cell: &str, seed, metric: &str, value| SummaryRow { cell: cell.into(), seed, metric: metric.into(), value };
        let rows = vec![row("a", 0, "m", 1.0), row("a", 1, "m", 2.0), row("a", 2, "m", 3.0), row("b", 0, "m", 5.0), row("b", 1, "m", 5.0)];
        let agg = aggregate_seeds(&rows).unwrap();
        assert_eq!(agg.len(), 2);
        assert_eq!((agg[0].mean, agg[0].std, agg[0].n), (2.0, 1.0, 3));
        assert_eq!((agg[1].mean, agg[1].std), (5.0, 0.0));
        assert!(aggregate_seeds(&[row("c", 0, "m", 1.0)]).is_err());
    }
}
