//! HE-regularized training: cross-entropy plus a modifier-homomorphism
//! penalty at selected layers, learned jointly with per-modifier operators.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::grammar::{Example, TokenId, VocabSpec, PAD};
use crate::model::Transformer;
use crate::numerics::{ParamKey, ParamStore, Tape, Tensor, Var};
use crate::probes::modifier_sites;
use crate::trainer::{train_with, AuxObjective, TrainConfig, TrainError, TrainHistory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegConfig {
    pub lambda: f64,
    /// 1-based block indices whose outputs are regularized.
    pub reg_layers: Vec<usize>,
    pub he_batch_size: usize,
    pub operator_hidden: usize,
}

impl Default for RegConfig {
    fn default() -> Self {
        RegConfig { lambda: 0.1, reg_layers: vec![2, 4], he_batch_size: 32, operator_hidden: 128 }
    }
}

impl RegConfig {
    pub fn validate(&self, n_layers: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        if self.reg_layers.is_empty() || self.reg_layers.iter().any(|&l| l == 0 || l > n_layers) {
            return bad(format!("reg_layers {:?} must be a non-empty subset of 1..={n_layers}", self.reg_layers));
        }
        let mut sorted = self.reg_layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.reg_layers.len() {
            return bad("reg_layers contains duplicates".into());
        }
        if self.he_batch_size == 0 || self.operator_hidden == 0 {
            return bad("he_batch_size and operator_hidden must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolItem {
    pub example: usize,
    pub prim_pos: usize,
    pub mod_pos: usize,
    pub modifier: usize,
}

/// Every primitive-modifier adjacency in a training split, fixed before
/// training starts.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModifierPool {
    pub items: Vec<PoolItem>,
}

impl ModifierPool {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

pub fn mine_modifier_pool(train: &[Example], vocab: &VocabSpec) -> ModifierPool {
    let items = train
        .iter()
        .enumerate()
        .flat_map(|(i, ex)| {
            modifier_sites(&ex.input_tokens, vocab).into_iter().map(move |s| PoolItem {
                example: i,
                prim_pos: s.prim_pos,
                mod_pos: s.mod_pos,
                modifier: s.modifier.0,
            })
        })
        .collect();
    ModifierPool { items }
}

/// Parameter indices of one operator MLP inside the operator store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OperatorSlots {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Per-(layer, modifier) operators: `relu([h_e; h_m] W1 + b1) W2 + b2`.
#[derive(Debug, Clone)]
pub struct Operators {
    pub params: ParamStore,
    pub slots: BTreeMap<(usize, usize), OperatorSlots>,
}

impl Operators {
    pub fn init(layers: &[usize], n_modifiers: usize, d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamStore::new();
        let mut slots = BTreeMap::new();
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let a = 1.0 / (fan_in as f32).sqrt();
            let dist = Uniform::new_inclusive(-a, a).expect("finite bounds");
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(dist)).collect()).expect("shape matches data")
        };
        for &l in layers {
            for m in 0..n_modifiers {
                let name = |s: &str| format!("op.l{l}.m{m}.{s}");
                let w1 = params.push(name("w1"), uniform(&[2 * d, hidden], 2 * d));
                let b1 = params.push(name("b1"), Tensor::zeros(&[hidden]));
                let w2 = params.push(name("w2"), uniform(&[hidden, d], hidden));
                let b2 = params.push(name("b2"), Tensor::zeros(&[d]));
                slots.insert((l, m), OperatorSlots { w1, b1, w2, b2 });
            }
        }
        Operators { params, slots }
    }
}

/// Mean over the batch of `||op_m([h_e; h_m]) - (h_e + h_m)/2||^2`, where
/// `items` lists `(row of h_e, row of h_m, modifier)` in `hidden`.
/// Operator parameters enter the tape as `ParamKey(key_offset + index)`.
pub fn he_mod_loss(
    tape: &mut Tape,
    hidden: Var,
    items: &[(usize, usize, usize)],
    ops: &Operators,
    layer: usize,
    key_offset: usize,
) -> Result<Var, TrainError> {
    if items.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0))?);
    }
    let d = tape.shape(hidden)[1];
    let mut by_mod: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for &(e, m, tag) in items {
        let entry = by_mod.entry(tag).or_default();
        entry.0.push(e);
        entry.1.push(m);
    }
    let mut total: Option<Var> = None;
    for (tag, (rows_e, rows_m)) in by_mod {
        let slots = ops
            .slots
            .get(&(layer, tag))
            .ok_or_else(|| TrainError::Config(format!("no operator for modifier {tag} at layer {layer}")))?;
        let p = |tape: &mut Tape, i: usize| tape.param(ParamKey(key_offset + i), ops.params.get(i));
        let he = tape.gather_rows(hidden, &rows_e)?;
        let hm = tape.gather_rows(hidden, &rows_m)?;
        let x = tape.concat(&[he, hm])?;
        let (w1, b1, w2, b2) = (p(tape, slots.w1)?, p(tape, slots.b1)?, p(tape, slots.w2)?, p(tape, slots.b2)?);
        let z = tape.linear(x, w1, b1)?;
        let a = tape.relu(z)?;
        let out = tape.linear(a, w2, b2)?;
        let sum = tape.add(he, hm)?;
        let target = tape.scale(sum, 0.5)?;
        let diff = tape.sub(out, target)?;
        let sq = tape.mul(diff, diff)?;
        // mean_all divides by n_m * d; rescale to a per-item squared norm
        // averaged over the whole batch.
        let part = tape.mean_all(sq)?;
        let part = tape.scale(part, (rows_e.len() * d) as f32 / items.len() as f32)?;
        total = Some(match total {
            None => part,
            Some(t) => tape.add(t, part)?,
        });
    }
    Ok(total.expect("at least one modifier group"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegStep {
    pub step: usize,
    pub ce_loss: f64,
    /// HE penalty per regularized layer, in `RegConfig::reg_layers` order.
    pub he_loss: Vec<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RegHistory {
    pub reg_layers: Vec<usize>,
    pub steps: Vec<RegStep>,
    pub pool_size: usize,
    pub warnings: Vec<String>,
}

impl RegHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,ce_loss");
        for l in &self.reg_layers {
            s.push_str(&format!(",he_loss_layer{l}"));
        }
        s.push_str(",total\n");
        for r in &self.steps {
            s.push_str(&format!("{},{}", r.step, r.ce_loss));
            for h in &r.he_loss {
                s.push_str(&format!(",{h}"));
            }
            s.push_str(&format!(",{}\n", r.total));
        }
        s
    }
}

/// The regularizer as an auxiliary objective of the shared training loop.
pub struct HeRegularizer<'a> {
    cfg: RegConfig,
    train: &'a [Example],
    pool: ModifierPool,
    ops: Operators,
    batch_rng: ChaCha8Rng,
    history: RegHistory,
}

impl<'a> HeRegularizer<'a> {
    pub fn new(model: &Transformer, train: &'a [Example], vocab: &VocabSpec, cfg: RegConfig, seed: u64) -> Result<Self, TrainError> {
        cfg.validate(model.config.n_layers)?;
        let pool = mine_modifier_pool(train, vocab);
        let ops = Operators::init(
            &cfg.reg_layers,
            vocab.modifiers.len(),
            model.config.d_model,
            cfg.operator_hidden,
            &mut crate::stream_rng(seed, "he-operators"),
        );
        let mut history = RegHistory { reg_layers: cfg.reg_layers.clone(), pool_size: pool.len(), ..RegHistory::default() };
        if pool.is_empty() {
            history.warnings.push("modifier pool is empty; the regularizer contributes nothing".into());
        }
        Ok(HeRegularizer { cfg, train, pool, ops, batch_rng: crate::stream_rng(seed, "he-batch"), history })
    }

    pub fn operators(&self) -> &Operators {
        &self.ops
    }

    pub fn into_history(self) -> RegHistory {
        self.history
    }

    fn sample(&mut self) -> Vec<PoolItem> {
        if self.pool.is_empty() {
            return Vec::new();
        }
        (0..self.cfg.he_batch_size)
            .map(|_| self.pool.items[self.batch_rng.random_range(0..self.pool.len())])
            .collect()
    }
}

impl AuxObjective for HeRegularizer<'_> {
    fn params(&mut self) -> &mut ParamStore {
        &mut self.ops.params
    }

    fn extend_loss(&mut self, model: &Transformer, tape: &mut Tape, ce: Var, key_offset: usize, step: usize) -> Result<Var, TrainError> {
        // Drawn even when lambda is zero so every lambda sees the same stream.
        let batch = self.sample();
        let ce_value = tape.value(ce).item() as f64;
        if batch.is_empty() {
            self.history.steps.push(RegStep { step, ce_loss: ce_value, he_loss: vec![0.0; self.cfg.reg_layers.len()], total: ce_value });
            return Ok(ce);
        }

        // Prompts only: causal attention makes later tokens irrelevant.
        let mut rows: Vec<usize> = batch.iter().map(|it| it.example).collect();
        rows.sort_unstable();
        rows.dedup();
        let t = rows.iter().map(|&i| self.train[i].input_tokens.len()).max().unwrap_or(0);
        let seqs: Vec<Vec<TokenId>> = rows
            .iter()
            .map(|&i| {
                let mut s = self.train[i].input_tokens.clone();
                s.resize(t, PAD);
                s
            })
            .collect();
        let top = *self.cfg.reg_layers.iter().max().expect("validated non-empty");
        let fwd = model.forward_tape(tape, 0, &seqs, Some(top))?;
        let items: Vec<(usize, usize, usize)> = batch
            .iter()
            .map(|it| {
                let r = rows.binary_search(&it.example).expect("row present");
                (r * t + it.prim_pos, r * t + it.mod_pos, it.modifier)
            })
            .collect();

        let mut he_vars = Vec::with_capacity(self.cfg.reg_layers.len());
        for &l in &self.cfg.reg_layers {
            he_vars.push(he_mod_loss(tape, fwd.hidden[l - 1], &items, &self.ops, l, key_offset)?);
        }
        let he_values: Vec<f64> = he_vars.iter().map(|&v| tape.value(v).item() as f64).collect();

        let total = if self.cfg.lambda == 0.0 {
            ce
        } else {
            let mut sum = he_vars[0];
            for &v in &he_vars[1..] {
                sum = tape.add(sum, v)?;
            }
            let penalty = tape.scale(sum, (self.cfg.lambda / he_vars.len() as f64) as f32)?;
            tape.add(ce, penalty)?
        };
        let total_value = tape.value(total).item() as f64;
        self.history.steps.push(RegStep { step, ce_loss: ce_value, he_loss: he_values, total: total_value });
        Ok(total)
    }
}

/// Regularized training. Early stopping monitors validation CE only.
pub fn train_regularized(
    model: Transformer,
    train: &[Example],
    val: &[Example],
    vocab: &VocabSpec,
    train_cfg: &TrainConfig,
    reg_cfg: &RegConfig,
) -> Result<(Transformer, TrainHistory, RegHistory), TrainError> {
    let mut reg = HeRegularizer::new(&model, train, vocab, reg_cfg.clone(), train_cfg.seed)?;
    let (model, hist) = train_with(model, train, val, train_cfg, Some(&mut reg))?;
    Ok((model, hist, reg.into_history()))
}
