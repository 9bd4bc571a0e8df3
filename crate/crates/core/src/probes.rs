//! Composition probes: mine (left, right, combined) triples from hidden
//! states and measure how well linear, bilinear and MLP operators predict
//! the combined representation from its parts.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{ConnId, Example, ModId, TokenId, TokenKind, VocabSpec};
use crate::model::{ModelError, Transformer};
use crate::numerics::{cholesky_solve, gemm, gram, Adam, AdamConfig, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum ProbeError {
    #[error("no triples to fit")]
    Empty,
    #[error("triples mix layers, kinds or tags")]
    Mixed,
    #[error("probe config: {0}")]
    Config(String),
    #[error("linear solve failed: {0}")]
    Solve(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripleKind {
    Modifier,
    Sequence,
}

impl TripleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TripleKind::Modifier => "modifier",
            TripleKind::Sequence => "sequence",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeTriple {
    pub kind: TripleKind,
    /// 1-based block index.
    pub layer: usize,
    pub left: Vec<f32>,
    pub right: Vec<f32>,
    pub combined: Vec<f32>,
    /// Modifier id for modifier triples, connector id for sequence triples.
    pub tag: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorFamily {
    Linear,
    Bilinear,
    Mlp,
}

impl OperatorFamily {
    pub const ALL: [OperatorFamily; 3] = [OperatorFamily::Linear, OperatorFamily::Bilinear, OperatorFamily::Mlp];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Ridge strength for the closed-form linear and bilinear fits.
    pub ridge: f64,
    pub mlp_hidden: usize,
    pub mlp_steps: usize,
    pub mlp_lr: f32,
    /// Triples per (layer, kind, tag) beyond this are subsampled.
    pub max_triples: usize,
    /// When positive, this fraction of triples is held out and the MSE is
    /// measured on it instead of on the fitted triples.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { ridge: 1e-6, mlp_hidden: 128, mlp_steps: 500, mlp_lr: 1e-3, max_triples: 512, holdout_fraction: 0.0, seed: 0 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), ProbeError> {
        let bad = |m: &str| Err(ProbeError::Config(m.into()));
        if !(self.ridge > 0.0) {
            return bad("ridge must be positive");
        }
        if self.mlp_hidden == 0 || self.max_triples == 0 {
            return bad("mlp_hidden and max_triples must be positive");
        }
        if !(self.mlp_lr > 0.0) {
            return bad("mlp_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// A primitive followed, ignoring noise, by a modifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModifierSite {
    pub prim_pos: usize,
    pub mod_pos: usize,
    pub modifier: ModId,
}

/// Two adjacent primitive-initiated segments around a connector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceSite {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub connector: ConnId,
}

fn content_positions(tokens: &[TokenId], vocab: &VocabSpec) -> Vec<(usize, TokenKind)> {
    tokens
        .iter()
        .enumerate()
        .filter_map(|(i, &t)| match vocab.kind(t) {
            Some(TokenKind::Special) | Some(TokenKind::Noise) | None => None,
            Some(k) => Some((i, k)),
        })
        .collect()
}

pub fn modifier_sites(tokens: &[TokenId], vocab: &VocabSpec) -> Vec<ModifierSite> {
    content_positions(tokens, vocab)
        .windows(2)
        .filter_map(|w| match (w[0].1, w[1].1) {
            (TokenKind::Primitive(_), TokenKind::Modifier(m)) => Some(ModifierSite { prim_pos: w[0].0, mod_pos: w[1].0, modifier: m }),
            _ => None,
        })
        .collect()
}

pub fn sequence_sites(tokens: &[TokenId], vocab: &VocabSpec) -> Vec<SequenceSite> {
    let mut segments: Vec<Vec<usize>> = vec![Vec::new()];
    let mut connectors = Vec::new();
    for (pos, kind) in content_positions(tokens, vocab) {
        match kind {
            TokenKind::Connector(c) => {
                connectors.push(c);
                segments.push(Vec::new());
            }
            _ => segments.last_mut().expect("never empty").push(pos),
        }
    }
    connectors
        .iter()
        .enumerate()
        .filter(|(i, _)| !segments[*i].is_empty() && !segments[i + 1].is_empty())
        .map(|(i, &c)| SequenceSite { left: segments[i].clone(), right: segments[i + 1].clone(), connector: c })
        .collect()
}

fn mean_rows(h: &Tensor, rows: &[usize]) -> Vec<f32> {
    let mut out = vec![0.0f32; h.cols()];
    for &r in rows {
        out.iter_mut().zip(h.row(r)).for_each(|(o, &x)| *o += x);
    }
    let inv = 1.0 / rows.len() as f32;
    out.iter_mut().for_each(|o| *o *= inv);
    out
}

fn average(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect()
}

/// Modifier and sequence triples for blocks `1..=layers`, computing each
/// prompt's hidden states once. Only prompt tokens are run through the
/// model; causal attention makes later tokens irrelevant.
pub fn collect_triples(
    model: &Transformer,
    examples: &[Example],
    vocab: &VocabSpec,
    layers: usize,
    kinds: &[TripleKind],
) -> Result<Vec<ProbeTriple>, ProbeError> {
    let want_mod = kinds.contains(&TripleKind::Modifier);
    let want_seq = kinds.contains(&TripleKind::Sequence);
    let mut out = Vec::new();
    for ex in examples {
        let tokens = &ex.input_tokens;
        let mods = if want_mod { modifier_sites(tokens, vocab) } else { Vec::new() };
        let seqs = if want_seq { sequence_sites(tokens, vocab) } else { Vec::new() };
        if mods.is_empty() && seqs.is_empty() {
            continue;
        }
        let hidden = model.hidden_states(tokens, layers)?;
        for (li, h) in hidden.iter().enumerate() {
            for s in &mods {
                let left = h.row(s.prim_pos).to_vec();
                let right = h.row(s.mod_pos).to_vec();
                let combined = average(&left, &right);
                out.push(ProbeTriple { kind: TripleKind::Modifier, layer: li + 1, left, right, combined, tag: s.modifier.0 });
            }
            for s in &seqs {
                let left = mean_rows(h, &s.left);
                let right = mean_rows(h, &s.right);
                let combined = average(&left, &right);
                out.push(ProbeTriple { kind: TripleKind::Sequence, layer: li + 1, left, right, combined, tag: s.connector.0 });
            }
        }
    }
    Ok(out)
}

pub fn mine_modifier_triples(
    model: &Transformer,
    examples: &[Example],
    layer: usize,
    vocab: &VocabSpec,
) -> Result<Vec<ProbeTriple>, ProbeError> {
    let all = collect_triples(model, examples, vocab, layer, &[TripleKind::Modifier])?;
    Ok(all.into_iter().filter(|t| t.layer == layer).collect())
}

pub fn mine_sequence_triples(
    model: &Transformer,
    examples: &[Example],
    layer: usize,
    vocab: &VocabSpec,
) -> Result<Vec<ProbeTriple>, ProbeError> {
    let all = collect_triples(model, examples, vocab, layer, &[TripleKind::Sequence])?;
    Ok(all.into_iter().filter(|t| t.layer == layer).collect())
}

/// Row-major views of a triple set in f64.
struct Design {
    n: usize,
    d: usize,
    left: Vec<f64>,
    right: Vec<f64>,
    target: Vec<f64>,
}

impl Design {
    fn new(triples: &[&ProbeTriple]) -> Self {
        let d = triples[0].left.len();
        let flat = |f: fn(&ProbeTriple) -> &[f32]| triples.iter().flat_map(|t| f(t).iter().map(|&x| x as f64)).collect();
        Design {
            n: triples.len(),
            d,
            left: flat(|t| &t.left),
            right: flat(|t| &t.right),
            target: flat(|t| &t.combined),
        }
    }

    fn inputs_f32(&self) -> Vec<f32> {
        let d = self.d;
        let mut x = Vec::with_capacity(self.n * 2 * d);
        for i in 0..self.n {
            x.extend(self.left[i * d..(i + 1) * d].iter().map(|&v| v as f32));
            x.extend(self.right[i * d..(i + 1) * d].iter().map(|&v| v as f32));
        }
        x
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Affine ridge on `[left; right; 1]`; the bias is not penalized.
fn linear_predict(fit: &Design, eval: &Design, ridge: f64) -> Result<Vec<f64>, ProbeError> {
    let (n, d) = (fit.n, fit.d);
    let p = 2 * d + 1;
    let features = |x: &Design| -> Vec<f64> {
        let mut f = Vec::with_capacity(x.n * p);
        for i in 0..x.n {
            f.extend_from_slice(&x.left[i * d..(i + 1) * d]);
            f.extend_from_slice(&x.right[i * d..(i + 1) * d]);
            f.push(1.0);
        }
        f
    };
    let xf = features(fit);
    let mut g = gram(&xf, n, p);
    for i in 0..p - 1 {
        g[i * p + i] += ridge;
    }
    let mut w = vec![0.0f64; p * d];
    for (row, y) in xf.chunks_exact(p).zip(fit.target.chunks_exact(d)) {
        for (i, &xi) in row.iter().enumerate() {
            if xi != 0.0 {
                w[i * d..(i + 1) * d].iter_mut().zip(y).for_each(|(wv, &yv)| *wv += xi * yv);
            }
        }
    }
    cholesky_solve(&g, p, &mut w, d).map_err(|e| ProbeError::Solve(e.to_string()))?;
    let xe = features(eval);
    let mut pred = vec![0.0f64; eval.n * d];
    for (row, out) in xe.chunks_exact(p).zip(pred.chunks_exact_mut(d)) {
        for (i, &xi) in row.iter().enumerate() {
            if xi != 0.0 {
                out.iter_mut().zip(&w[i * d..(i + 1) * d]).for_each(|(o, &wv)| *o += xi * wv);
            }
        }
    }
    Ok(pred)
}

/// Ridge regression on the features `vec([left; 1] [right; 1]^T)`, solved
/// in the dual through the kernel `(l.l' + 1)(r.r' + 1)`. The augmented
/// inputs give every output coordinate a full bilinear form plus linear
/// terms in each argument and a bias.
fn bilinear_predict(fit: &Design, eval: &Design, ridge: f64) -> Result<Vec<f64>, ProbeError> {
    let (n, d) = (fit.n, fit.d);
    let kernel = |a: &Design, i: usize, j: usize| {
        let li = &a.left[i * d..(i + 1) * d];
        let ri = &a.right[i * d..(i + 1) * d];
        (dot(li, &fit.left[j * d..(j + 1) * d]) + 1.0) * (dot(ri, &fit.right[j * d..(j + 1) * d]) + 1.0)
    };
    let mut k = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v = kernel(fit, i, j);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    // Near-duplicate triples make the kernel numerically singular; grow the
    // ridge until the factorization succeeds.
    let mut lambda = ridge;
    let alpha = loop {
        let mut kr = k.clone();
        for i in 0..n {
            kr[i * n + i] += lambda;
        }
        let mut a = fit.target.clone();
        match cholesky_solve(&kr, n, &mut a, d) {
            Ok(()) => break a,
            Err(e) if lambda > 1e3 => return Err(ProbeError::Solve(e.to_string())),
            Err(_) => lambda *= 10.0,
        }
    };
    let mut pred = vec![0.0f64; eval.n * d];
    for i in 0..eval.n {
        let out = &mut pred[i * d..(i + 1) * d];
        for j in 0..n {
            let kv = kernel(eval, i, j);
            out.iter_mut().zip(&alpha[j * d..(j + 1) * d]).for_each(|(o, &a)| *o += kv * a);
        }
    }
    Ok(pred)
}

/// Two-layer relu MLP on `[left; right]`, trained full-batch with Adam.
/// Weights start uniform in `±1/sqrt(fan_in)` and biases at zero.
fn mlp_predict(fit: &Design, eval: &Design, cfg: &ProbeConfig, seed: u64) -> Vec<f64> {
    let (n, d, h) = (fit.n, fit.d, cfg.mlp_hidden);
    let mut rng = crate::seeded_rng(seed);
    let mut uniform = |len: usize, fan_in: usize| -> Vec<f32> {
        let a = 1.0 / (fan_in as f32).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("finite bounds");
        (0..len).map(|_| rng.sample(dist)).collect()
    };
    let mut w1 = Tensor::new(vec![2 * d, h], uniform(2 * d * h, 2 * d)).expect("shape");
    let mut b1 = Tensor::zeros(&[h]);
    let mut w2 = Tensor::new(vec![h, d], uniform(h * d, h)).expect("shape");
    let mut b2 = Tensor::zeros(&[d]);
    let mut adam = Adam::new(AdamConfig { lr: cfg.mlp_lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 });

    let x = fit.inputs_f32();
    let y: Vec<f32> = fit.target.iter().map(|&v| v as f32).collect();
    let mut z = vec![0.0f32; n * h];
    let mut a = vec![0.0f32; n * h];
    let mut p = vec![0.0f32; n * d];
    let forward = |x: &[f32], rows: usize, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor, z: &mut [f32], a: &mut [f32], p: &mut [f32]| {
        for r in 0..rows {
            z[r * h..(r + 1) * h].copy_from_slice(b1.data());
            p[r * d..(r + 1) * d].copy_from_slice(b2.data());
        }
        gemm(rows, 2 * d, h, x, false, w1.data(), false, z, 1.0);
        a.iter_mut().zip(z.iter()).for_each(|(av, &zv)| *av = zv.max(0.0));
        gemm(rows, h, d, a, false, w2.data(), false, p, 1.0);
    };
    let scale = 2.0 / (n * d) as f32;
    let (mut gw1, mut gb1, mut gw2, mut gb2) = (Tensor::zeros(&[2 * d, h]), Tensor::zeros(&[h]), Tensor::zeros(&[h, d]), Tensor::zeros(&[d]));
    let mut dz = vec![0.0f32; n * h];
    for _ in 0..cfg.mlp_steps {
        forward(&x, n, &w1, &b1, &w2, &b2, &mut z, &mut a, &mut p);
        // p becomes dL/dp in place.
        p.iter_mut().zip(&y).for_each(|(pv, &yv)| *pv = (*pv - yv) * scale);
        gemm(h, n, d, &a, true, &p, false, gw2.data_mut(), 0.0);
        gb2.data_mut().fill(0.0);
        for row in p.chunks_exact(d) {
            gb2.data_mut().iter_mut().zip(row).for_each(|(g, &v)| *g += v);
        }
        gemm(n, d, h, &p, false, w2.data(), true, &mut dz, 0.0);
        dz.iter_mut().zip(&z).for_each(|(g, &zv)| {
            if zv <= 0.0 {
                *g = 0.0;
            }
        });
        gemm(2 * d, n, h, &x, true, &dz, false, gw1.data_mut(), 0.0);
        gb1.data_mut().fill(0.0);
        for row in dz.chunks_exact(h) {
            gb1.data_mut().iter_mut().zip(row).for_each(|(g, &v)| *g += v);
        }
        adam.step(&mut [&mut w1, &mut b1, &mut w2, &mut b2], &[Some(&gw1), Some(&gb1), Some(&gw2), Some(&gb2)]);
    }
    let xe = eval.inputs_f32();
    let (mut ze, mut ae, mut pe) = (vec![0.0f32; eval.n * h], vec![0.0f32; eval.n * h], vec![0.0f32; eval.n * d]);
    forward(&xe, eval.n, &w1, &b1, &w2, &b2, &mut ze, &mut ae, &mut pe);
    pe.into_iter().map(f64::from).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorFit {
    pub family: OperatorFamily,
    /// Mean over triples and coordinates of the squared prediction error.
    pub mse: f64,
    pub n_fit: usize,
    pub n_eval: usize,
}

/// Fits one operator family to triples sharing layer, kind and tag and
/// returns its final mean squared error.
pub fn fit_operator(triples: &[ProbeTriple], family: OperatorFamily, cfg: &ProbeConfig) -> Result<OperatorFit, ProbeError> {
    cfg.validate()?;
    let first = triples.first().ok_or(ProbeError::Empty)?;
    if triples.iter().any(|t| t.layer != first.layer || t.kind != first.kind || t.tag != first.tag || t.left.len() != first.left.len()) {
        return Err(ProbeError::Mixed);
    }
    let seed = crate::derive_seed(&[
        "probe",
        &cfg.seed.to_string(),
        &first.layer.to_string(),
        first.kind.as_str(),
        &first.tag.to_string(),
    ]);
    let mut rng = crate::seeded_rng(seed);
    let mut refs: Vec<&ProbeTriple> = triples.iter().collect();
    if refs.len() > cfg.max_triples {
        refs.shuffle(&mut rng);
        refs.truncate(cfg.max_triples);
    }
    let n_hold = if refs.len() >= 2 { ((refs.len() as f64 * cfg.holdout_fraction).round() as usize).min(refs.len() - 1) } else { 0 };
    let (fit, eval) = if n_hold > 0 {
        refs.shuffle(&mut rng);
        let (h, f) = refs.split_at(n_hold);
        (Design::new(f), Design::new(h))
    } else {
        (Design::new(&refs), Design::new(&refs))
    };
    let pred = match family {
        OperatorFamily::Linear => linear_predict(&fit, &eval, cfg.ridge)?,
        OperatorFamily::Bilinear => bilinear_predict(&fit, &eval, cfg.ridge)?,
        OperatorFamily::Mlp => mlp_predict(&fit, &eval, cfg, seed),
    };
    let sse: f64 = pred.iter().zip(&eval.target).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok(OperatorFit { family, mse: sse / eval.target.len().max(1) as f64, n_fit: fit.n, n_eval: eval.n })
}

/// Per-family MSE averaged over tags, and the family average.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FamilyMse {
    pub linear: Option<f64>,
    pub bilinear: Option<f64>,
    pub mlp: Option<f64>,
    pub mean: Option<f64>,
}

impl FamilyMse {
    fn get_mut(&mut self, f: OperatorFamily) -> &mut Option<f64> {
        match f {
            OperatorFamily::Linear => &mut self.linear,
            OperatorFamily::Bilinear => &mut self.bilinear,
            OperatorFamily::Mlp => &mut self.mlp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HEReport {
    /// layer -> kind -> family MSEs. Kinds without triples are absent.
    pub layers: BTreeMap<usize, BTreeMap<TripleKind, FamilyMse>>,
    pub he_mod_mean: Option<f64>,
    pub he_seq_mean: Option<f64>,
    /// Triples found per (layer, kind), before subsampling.
    pub triple_counts: BTreeMap<usize, BTreeMap<TripleKind, usize>>,
    /// Fits where the MLP ended worse than the linear map.
    pub diagnostics: Vec<String>,
}

impl HEReport {
    pub fn kind_mean(&self, kind: TripleKind) -> Option<f64> {
        match kind {
            TripleKind::Modifier => self.he_mod_mean,
            TripleKind::Sequence => self.he_seq_mean,
        }
    }
}

fn mean_of(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Builds the report from pre-mined triples.
pub fn he_report_from_triples(triples: &[ProbeTriple], cfg: &ProbeConfig) -> Result<HEReport, ProbeError> {
    cfg.validate()?;
    let mut groups: BTreeMap<(usize, TripleKind, usize), Vec<ProbeTriple>> = BTreeMap::new();
    for t in triples {
        groups.entry((t.layer, t.kind, t.tag)).or_default().push(t.clone());
    }
    let mut report = HEReport::default();
    let mut per_family: BTreeMap<(usize, TripleKind), BTreeMap<OperatorFamily, Vec<f64>>> = BTreeMap::new();
    for ((layer, kind, tag), group) in &groups {
        *report.triple_counts.entry(*layer).or_default().entry(*kind).or_default() += group.len();
        let mut fits = BTreeMap::new();
        for family in OperatorFamily::ALL {
            let fit = fit_operator(group, family, cfg)?;
            fits.insert(family, fit.mse);
            per_family.entry((*layer, *kind)).or_default().entry(family).or_default().push(fit.mse);
        }
        if fits[&OperatorFamily::Mlp] > fits[&OperatorFamily::Linear] + 1e-6 {
            report.diagnostics.push(format!(
                "layer {layer} {} tag {tag}: mlp {:.3e} above linear {:.3e}",
                kind.as_str(),
                fits[&OperatorFamily::Mlp],
                fits[&OperatorFamily::Linear]
            ));
        }
    }
    for ((layer, kind), fams) in per_family {
        let mut entry = FamilyMse::default();
        for (family, values) in &fams {
            *entry.get_mut(*family) = mean_of(values.iter().copied());
        }
        entry.mean = mean_of([entry.linear, entry.bilinear, entry.mlp].into_iter().flatten());
        report.layers.entry(layer).or_default().insert(kind, entry);
    }
    let kind_mean = |k: TripleKind| mean_of(report.layers.values().filter_map(|m| m.get(&k).and_then(|f| f.mean)));
    report.he_mod_mean = kind_mean(TripleKind::Modifier);
    report.he_seq_mean = kind_mean(TripleKind::Sequence);
    Ok(report)
}

/// Modifier and sequence HE at every block of `model`, from triples mined
/// on `train_examples`.
pub fn compute_he_report(
    model: &Transformer,
    train_examples: &[Example],
    vocab: &VocabSpec,
    cfg: &ProbeConfig,
) -> Result<HEReport, ProbeError> {
    let triples = collect_triples(
        model,
        train_examples,
        vocab,
        model.config.n_layers,
        &[TripleKind::Modifier, TripleKind::Sequence],
    )?;
    he_report_from_triples(&triples, cfg)
}
