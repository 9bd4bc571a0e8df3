//! Teacher-forced causal-LM training with early stopping on validation loss.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{Example, TokenId, PAD};
use crate::model::{ModelError, Transformer};
use crate::numerics::{Adam, AdamConfig, NumericsError, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub early_stop_min_delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            batch_size: 64,
            max_epochs: 50,
            early_stop_patience: 5,
            early_stop_min_delta: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.early_stop_patience == 0 || self.max_epochs == 0 {
            return Err(TrainError::Config("batch_size, patience and max_epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{:.8},{:.8}\n", e.epoch, e.train_loss, e.val_loss));
        }
        s
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("loss diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        TrainError::Model(ModelError::Numerics(e))
    }
}

/// One padded teacher-forcing batch. Row `r` holds the full sequence minus
/// its last token; `targets[r * T + i]` is the token at position `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<TokenId>>,
    pub targets: Vec<usize>,
    /// Set exactly on positions that predict an output token or EOS.
    pub mask: Vec<bool>,
}

impl Batch {
    pub fn new(examples: &[&Example]) -> Self {
        let t = examples.iter().map(|e| e.input_tokens.len() + e.output_tokens.len() - 1).max().unwrap_or(0);
        let mut inputs = Vec::with_capacity(examples.len());
        let mut targets = Vec::with_capacity(examples.len() * t);
        let mut mask = Vec::with_capacity(examples.len() * t);
        for ex in examples {
            let seq = ex.sequence();
            let n = seq.len();
            let sep = ex.sep_index();
            let mut row: Vec<TokenId> = seq[..n - 1].to_vec();
            row.resize(t, PAD);
            inputs.push(row);
            for i in 0..t {
                let supervised = i >= sep && i < n - 1;
                targets.push(if i + 1 < n { seq[i + 1] as usize } else { PAD as usize });
                mask.push(supervised);
            }
        }
        Batch { inputs, targets, mask }
    }

    pub fn supervised(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Records the masked cross-entropy of `batch` on `tape`.
pub fn ce_on_tape(model: &Transformer, tape: &mut Tape, batch: &Batch) -> Result<Var, TrainError> {
    let fwd = model.forward_tape(tape, 0, &batch.inputs, None)?;
    let logits = fwd.logits.expect("full forward yields logits");
    Ok(tape.cross_entropy(logits, &batch.targets, &batch.mask)?)
}

/// Supervised-token-weighted mean cross-entropy over `examples`.
pub fn mean_loss(model: &Transformer, examples: &[Example], batch_size: usize) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = Batch::new(&refs);
        let mut tape = Tape::new();
        let ce = ce_on_tape(model, &mut tape, &batch)?;
        let n = batch.supervised();
        total += tape.value(ce).item() as f64 * n as f64;
        count += n;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Extra objective mixed into each training step.
pub trait AuxObjective {
    /// Trainable tensors owned by the objective; updated by the same Adam
    /// instance as the model, with keys following the model's.
    fn params(&mut self) -> &mut ParamStore;

    /// Adds the auxiliary term to `ce` on the tape and returns the total
    /// loss. `key_offset` is the first `ParamKey` available to the
    /// objective's own parameters.
    fn extend_loss(
        &mut self,
        model: &Transformer,
        tape: &mut Tape,
        ce: Var,
        key_offset: usize,
        step: usize,
    ) -> Result<Var, TrainError>;
}

/// Baseline training.
pub fn train(
    model: Transformer,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
) -> Result<(Transformer, TrainHistory), TrainError> {
    train_with(model, train_set, val_set, cfg, None)
}

/// Training loop shared by the baseline and regularized trainers.
pub fn train_with(
    mut model: Transformer,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    mut aux: Option<&mut dyn AuxObjective>,
) -> Result<(Transformer, TrainHistory), TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut order_rng = crate::stream_rng(cfg.seed, "data-order");
    let mut adam = Adam::new(cfg.adam());
    let n_model = model.params.len();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory { best_val_loss: f64::INFINITY, ..TrainHistory::default() };
    let mut best_params = model.params.clone();
    let mut wait = 0;
    let mut step = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_total = 0.0;
        let mut epoch_count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = Batch::new(&refs);
            let mut tape = Tape::new();
            let diverged = |detail: String| TrainError::Diverged { epoch, step, detail };
            let ce = ce_on_tape(&model, &mut tape, &batch).map_err(|e| diverged(e.to_string()))?;
            let ce_value = tape.value(ce).item();
            if !ce_value.is_finite() {
                return Err(diverged(format!("cross-entropy {ce_value}")));
            }
            let loss = match aux.as_deref_mut() {
                Some(a) => a.extend_loss(&model, &mut tape, ce, n_model, step).map_err(|e| diverged(e.to_string()))?,
                None => ce,
            };
            let grads = tape.backward(loss)?;
            let n_sup = batch.supervised();
            epoch_total += ce_value as f64 * n_sup as f64;
            epoch_count += n_sup;

            let model_grads: Vec<Option<Tensor>> =
                (0..n_model).map(|i| grads.param(crate::numerics::ParamKey(i)).cloned()).collect();
            match aux.as_deref_mut() {
                Some(a) => {
                    let aux_params = a.params();
                    let aux_grads: Vec<Option<Tensor>> = (0..aux_params.len())
                        .map(|i| grads.param(crate::numerics::ParamKey(n_model + i)).cloned())
                        .collect();
                    let mut ps: Vec<&mut Tensor> = model.params.tensors_mut().iter_mut().collect();
                    ps.extend(aux_params.tensors_mut().iter_mut());
                    let gs: Vec<Option<&Tensor>> = model_grads.iter().chain(&aux_grads).map(Option::as_ref).collect();
                    adam.step(&mut ps, &gs);
                }
                None => {
                    let mut ps: Vec<&mut Tensor> = model.params.tensors_mut().iter_mut().collect();
                    let gs: Vec<Option<&Tensor>> = model_grads.iter().map(Option::as_ref).collect();
                    adam.step(&mut ps, &gs);
                }
            }
            if let Some(bad) = model.params.iter().find(|(_, t)| !t.all_finite()) {
                return Err(diverged(format!("parameter {} became non-finite", bad.0)));
            }
            step += 1;
        }

        let train_loss = if epoch_count == 0 { 0.0 } else { epoch_total / epoch_count as f64 };
        let val_loss = if val_set.is_empty() { train_loss } else { mean_loss(&model, val_set, cfg.batch_size)? };
        if !val_loss.is_finite() {
            return Err(TrainError::Diverged { epoch, step, detail: format!("validation loss {val_loss}") });
        }
        history.epochs.push(EpochRecord { epoch, train_loss, val_loss });
        let improved_enough = val_loss < history.best_val_loss - cfg.early_stop_min_delta;
        if val_loss < history.best_val_loss {
            history.best_val_loss = val_loss;
            history.best_epoch = epoch;
            best_params = model.params.clone();
        }
        if improved_enough {
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.early_stop_patience {
                history.stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    model.params = best_params;
    Ok((model, history))
}
