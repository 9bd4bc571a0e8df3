//! Pre-norm decoder-only transformer with learned absolute positions.
//!
//! Two forward paths share one parameter layout: a taped batch forward used
//! for training, and a tape-free path used for probing and greedy decoding.
//! Decoding keeps per-layer key/value buffers so each new token costs one
//! row of work per layer.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{TokenId, EOS};
use crate::numerics::{gemm, layer_norm_rows, softmax_in_place, NumericsError, ParamKey, ParamStore, Tape, Tensor, Var};

pub const INIT_STD: f32 = 0.02;
const PER_BLOCK: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: TokenId, vocab: usize },
    #[error("sequence of length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("batch rows must share one length")]
    RaggedBatch,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { d_model: 128, n_heads: 4, d_ff: 256, n_layers: 4, vocab_size: 26, max_len: 128 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.vocab_size == 0 || self.max_len == 0 || self.d_ff == 0 {
            return Err(ModelError::Config("layer count, vocabulary, max_len and d_ff must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn param_count(&self) -> usize {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let block = 4 * d + 4 * d * d + 4 * d + 2 * d * f + f + d;
        v * d + self.max_len * d + self.n_layers * block + 2 * d + d * v + v
    }
}

/// Indices of one block's tensors in the parameter store.
#[derive(Debug, Clone, Copy)]
struct BlockIdx {
    ln1g: usize,
    ln1b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2g: usize,
    ln2b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

impl BlockIdx {
    fn new(layer: usize) -> Self {
        let b = 2 + PER_BLOCK * layer;
        BlockIdx {
            ln1g: b,
            ln1b: b + 1,
            wq: b + 2,
            bq: b + 3,
            wk: b + 4,
            bk: b + 5,
            wv: b + 6,
            bv: b + 7,
            wo: b + 8,
            bo: b + 9,
            ln2g: b + 10,
            ln2b: b + 11,
            w1: b + 12,
            b1: b + 13,
            w2: b + 14,
            b2: b + 15,
        }
    }
}

const TOK_EMB: usize = 0;
const POS_EMB: usize = 1;

#[derive(Debug, Clone)]
pub struct Transformer {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Tape handles produced by [`Transformer::forward_tape`].
#[derive(Debug, Clone)]
pub struct TapeForward {
    /// `[B*T, V]`, absent when the forward stopped early.
    pub logits: Option<Var>,
    /// `hidden[l]` is `[B*T, d]` after block `l + 1`.
    pub hidden: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub hidden: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    /// Generated tokens without the terminating EOS.
    pub tokens: Vec<TokenId>,
    pub terminated: bool,
}

impl Decoded {
    /// Generated sequence with EOS appended when it was produced.
    pub fn with_eos(&self) -> Vec<TokenId> {
        let mut v = self.tokens.clone();
        if self.terminated {
            v.push(EOS);
        }
        v
    }
}

impl Transformer {
    pub fn init(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let mut p = ParamStore::new();
        p.push("tok_emb", Tensor::randn(&[v, d], INIT_STD, rng));
        p.push("pos_emb", Tensor::randn(&[config.max_len, d], INIT_STD, rng));
        for l in 0..config.n_layers {
            let n = |s: &str| format!("blocks.{l}.{s}");
            p.push(n("ln1.gamma"), Tensor::filled(&[d], 1.0));
            p.push(n("ln1.beta"), Tensor::zeros(&[d]));
            for w in ["q", "k", "v", "o"] {
                p.push(n(&format!("attn.w{w}")), Tensor::randn(&[d, d], INIT_STD, rng));
                p.push(n(&format!("attn.b{w}")), Tensor::zeros(&[d]));
            }
            p.push(n("ln2.gamma"), Tensor::filled(&[d], 1.0));
            p.push(n("ln2.beta"), Tensor::zeros(&[d]));
            p.push(n("ff.w1"), Tensor::randn(&[d, f], INIT_STD, rng));
            p.push(n("ff.b1"), Tensor::zeros(&[f]));
            p.push(n("ff.w2"), Tensor::randn(&[f, d], INIT_STD, rng));
            p.push(n("ff.b2"), Tensor::zeros(&[d]));
        }
        p.push("ln_f.gamma", Tensor::filled(&[d], 1.0));
        p.push("ln_f.beta", Tensor::zeros(&[d]));
        p.push("head.w", Tensor::randn(&[d, v], INIT_STD, rng));
        p.push("head.b", Tensor::zeros(&[v]));
        Ok(Transformer { config, params: p })
    }

    /// Wraps loaded parameters after checking names and shapes against a
    /// fresh layout.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        let template = Transformer::init(config.clone(), &mut crate::seeded_rng(0))?;
        if template.params.len() != params.len() {
            return Err(ModelError::Config("parameter count does not match config".into()));
        }
        for ((tn, tt), (n, t)) in template.params.iter().zip(params.iter()) {
            if tn != n || tt.shape() != t.shape() {
                return Err(ModelError::Config(format!("parameter {n} {:?} does not match {tn} {:?}", t.shape(), tt.shape())));
            }
        }
        Ok(Transformer { config, params })
    }

    fn head_idx(&self) -> (usize, usize, usize, usize) {
        let b = 2 + PER_BLOCK * self.config.n_layers;
        (b, b + 1, b + 2, b + 3)
    }

    /// Parameter-store indices belonging to block `layer` (1-based).
    pub fn block_param_range(&self, layer: usize) -> std::ops::Range<usize> {
        let b = 2 + PER_BLOCK * (layer - 1);
        b..b + PER_BLOCK
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), ModelError> {
        if tokens.len() > self.config.max_len {
            return Err(ModelError::TooLong { len: tokens.len(), max_len: self.config.max_len });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange { token: t, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    /// Taped forward over a rectangular batch. Parameters are registered
    /// with `ParamKey(key_offset + index)`. With `layers = Some(n)` only the
    /// first `n` blocks run and no logits are produced.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        key_offset: usize,
        batch: &[Vec<TokenId>],
        layers: Option<usize>,
    ) -> Result<TapeForward, ModelError> {
        let b = batch.len();
        let t = batch.first().map_or(0, Vec::len);
        if batch.iter().any(|r| r.len() != t) {
            return Err(ModelError::RaggedBatch);
        }
        for row in batch {
            self.check_tokens(row)?;
        }
        let cfg = &self.config;
        let (d, h, dh) = (cfg.d_model, cfg.n_heads, cfg.head_dim());
        let n_blocks = layers.unwrap_or(cfg.n_layers).min(cfg.n_layers);
        let mut cache: Vec<Option<Var>> = vec![None; self.params.len()];
        let mut param = |tape: &mut Tape, i: usize| -> Result<Var, ModelError> {
            if let Some(v) = cache[i] {
                return Ok(v);
            }
            let v = tape.param(ParamKey(key_offset + i), self.params.get(i))?;
            cache[i] = Some(v);
            Ok(v)
        };

        let ids: Vec<usize> = batch.iter().flatten().map(|&x| x as usize).collect();
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let tok_table = param(tape, TOK_EMB)?;
        let pos_table = param(tape, POS_EMB)?;
        let tok = tape.embedding(tok_table, &ids)?;
        let pos = tape.embedding(pos_table, &positions)?;
        let mut x = tape.add(tok, pos)?;
        let mut hidden = Vec::with_capacity(n_blocks);
        let scale = 1.0 / (dh as f32).sqrt();

        for l in 0..n_blocks {
            let bi = BlockIdx::new(l);
            let g1 = param(tape, bi.ln1g)?;
            let b1n = param(tape, bi.ln1b)?;
            let hn = tape.layer_norm(x, g1, b1n)?;
            let mut heads = Vec::with_capacity(3);
            for (w, bias) in [(bi.wq, bi.bq), (bi.wk, bi.bk), (bi.wv, bi.bv)] {
                let wv = param(tape, w)?;
                let bv = param(tape, bias)?;
                let proj = tape.linear(hn, wv, bv)?;
                let r = tape.reshape(proj, &[b, t, h, dh])?;
                let r = tape.swap_axes12(r)?;
                heads.push(tape.reshape(r, &[b * h, t, dh])?);
            }
            let scores = tape.bmm(heads[0], heads[1], true)?;
            let scores = tape.scale(scores, scale)?;
            let probs = tape.causal_softmax(scores)?;
            let ctx = tape.bmm(probs, heads[2], false)?;
            let ctx = tape.reshape(ctx, &[b, h, t, dh])?;
            let ctx = tape.swap_axes12(ctx)?;
            let ctx = tape.reshape(ctx, &[b * t, d])?;
            let wo = param(tape, bi.wo)?;
            let bo = param(tape, bi.bo)?;
            let attn = tape.linear(ctx, wo, bo)?;
            x = tape.add(x, attn)?;

            let g2 = param(tape, bi.ln2g)?;
            let b2n = param(tape, bi.ln2b)?;
            let hn = tape.layer_norm(x, g2, b2n)?;
            let w1 = param(tape, bi.w1)?;
            let bb1 = param(tape, bi.b1)?;
            let w2 = param(tape, bi.w2)?;
            let bb2 = param(tape, bi.b2)?;
            let f = tape.linear(hn, w1, bb1)?;
            let f = tape.relu(f)?;
            let f = tape.linear(f, w2, bb2)?;
            x = tape.add(x, f)?;
            hidden.push(x);
        }

        if layers.is_some() {
            return Ok(TapeForward { logits: None, hidden });
        }
        let (gf, bf, hw, hb) = self.head_idx();
        let gf = param(tape, gf)?;
        let bf = param(tape, bf)?;
        let hw = param(tape, hw)?;
        let hb = param(tape, hb)?;
        let xf = tape.layer_norm(x, gf, bf)?;
        let logits = tape.linear(xf, hw, hb)?;
        Ok(TapeForward { logits: Some(logits), hidden })
    }

    /// Tape-free forward of a single sequence.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<ForwardOutput, ModelError> {
        self.check_tokens(tokens)?;
        let mut kv = KvCache::new(&self.config);
        let (x, hidden) = self.run_blocks(tokens, 0, &mut kv, self.config.n_layers, true);
        let logits = self.logits_rows(&x, tokens.len());
        Ok(ForwardOutput {
            logits: Tensor::new(vec![tokens.len(), self.config.vocab_size], logits)?,
            hidden: hidden
                .into_iter()
                .map(|hd| Tensor::new(vec![tokens.len(), self.config.d_model], hd))
                .collect::<Result<_, _>>()?,
        })
    }

    /// Hidden states after blocks `1..=layers` for one sequence, without
    /// evaluating later blocks or the output head.
    pub fn hidden_states(&self, tokens: &[TokenId], layers: usize) -> Result<Vec<Tensor>, ModelError> {
        self.check_tokens(tokens)?;
        let mut kv = KvCache::new(&self.config);
        let (_, hidden) = self.run_blocks(tokens, 0, &mut kv, layers.min(self.config.n_layers), true);
        hidden
            .into_iter()
            .map(|hd| Tensor::new(vec![tokens.len(), self.config.d_model], hd).map_err(ModelError::from))
            .collect()
    }

    /// Runs `tokens` (occupying positions `start..`) through the first
    /// `layers` blocks of one sequence, appending keys and values to `kv`.
    fn run_blocks(
        &self,
        tokens: &[TokenId],
        start: usize,
        kv: &mut KvCache,
        layers: usize,
        keep_hidden: bool,
    ) -> (Vec<f32>, Vec<Vec<f32>>) {
        let d = self.config.d_model;
        let n = tokens.len();
        let mut x = vec![0.0f32; n * d];
        let tok = self.params.get(TOK_EMB);
        let pos = self.params.get(POS_EMB);
        for (i, &t) in tokens.iter().enumerate() {
            let row = &mut x[i * d..(i + 1) * d];
            for ((r, a), b) in row.iter_mut().zip(tok.row(t as usize)).zip(pos.row(start + i)) {
                *r = a + b;
            }
        }
        let mut hidden = Vec::new();
        for l in 0..layers {
            self.block_rows(l, &mut x, &[(0, n)], std::slice::from_mut(kv));
            if keep_hidden {
                hidden.push(x.clone());
            }
        }
        (x, hidden)
    }

    /// Applies block `l` to rows of `x`. `spans[s] = (row_start, len)`
    /// assigns a contiguous run of rows to sequence `s`, whose cached
    /// positions precede these rows.
    fn block_rows(&self, l: usize, x: &mut [f32], spans: &[(usize, usize)], kvs: &mut [KvCache]) {
        let cfg = &self.config;
        let (d, h, dh, f) = (cfg.d_model, cfg.n_heads, cfg.head_dim(), cfg.d_ff);
        let rows = x.len() / d;
        let bi = BlockIdx::new(l);
        let p = |i: usize| self.params.get(i).data();
        let affine = |input: &[f32], w: usize, bias: usize, out_cols: usize, in_cols: usize| -> Vec<f32> {
            let mut out = Vec::with_capacity(rows * out_cols);
            for _ in 0..rows {
                out.extend_from_slice(p(bias));
            }
            gemm(rows, in_cols, out_cols, input, false, p(w), false, &mut out, 1.0);
            out
        };

        let mut hn = vec![0.0; rows * d];
        layer_norm_rows(x, p(bi.ln1g), p(bi.ln1b), &mut hn, None, None);
        let q = affine(&hn, bi.wq, bi.bq, d, d);
        let k = affine(&hn, bi.wk, bi.bk, d, d);
        let v = affine(&hn, bi.wv, bi.bv, d, d);
        let scale = 1.0 / (dh as f32).sqrt();
        let mut ctx = vec![0.0f32; rows * d];
        for (&(r0, len), cache) in spans.iter().zip(kvs.iter_mut()) {
            let layer = &mut cache.layers[l];
            let past = layer.len;
            layer.keys.extend_from_slice(&k[r0 * d..(r0 + len) * d]);
            layer.values.extend_from_slice(&v[r0 * d..(r0 + len) * d]);
            layer.len += len;
            let mut scores = vec![0.0f32; past + len];
            for i in 0..len {
                let visible = past + i + 1;
                let qi = &q[(r0 + i) * d..(r0 + i + 1) * d];
                for hh in 0..h {
                    let qh = &qi[hh * dh..(hh + 1) * dh];
                    for (j, s) in scores[..visible].iter_mut().enumerate() {
                        let kj = &layer.keys[j * d + hh * dh..j * d + (hh + 1) * dh];
                        *s = qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
                    }
                    softmax_in_place(&mut scores[..visible]);
                    let out = &mut ctx[(r0 + i) * d + hh * dh..(r0 + i) * d + (hh + 1) * dh];
                    for (j, &w) in scores[..visible].iter().enumerate() {
                        let vj = &layer.values[j * d + hh * dh..j * d + (hh + 1) * dh];
                        out.iter_mut().zip(vj).for_each(|(o, vv)| *o += w * vv);
                    }
                }
            }
        }
        let attn = affine(&ctx, bi.wo, bi.bo, d, d);
        x.iter_mut().zip(&attn).for_each(|(a, b)| *a += b);
        layer_norm_rows(x, p(bi.ln2g), p(bi.ln2b), &mut hn, None, None);
        let mut ff = affine(&hn, bi.w1, bi.b1, f, d);
        ff.iter_mut().for_each(|v| *v = v.max(0.0));
        let ff = affine(&ff, bi.w2, bi.b2, d, f);
        x.iter_mut().zip(&ff).for_each(|(a, b)| *a += b);
    }

    fn logits_rows(&self, x: &[f32], rows: usize) -> Vec<f32> {
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        let (gf, bf, hw, hb) = self.head_idx();
        let mut xf = vec![0.0; rows * d];
        layer_norm_rows(x, self.params.get(gf).data(), self.params.get(bf).data(), &mut xf, None, None);
        let mut out = Vec::with_capacity(rows * v);
        for _ in 0..rows {
            out.extend_from_slice(self.params.get(hb).data());
        }
        gemm(rows, d, v, &xf, false, self.params.get(hw).data(), false, &mut out, 1.0);
        out
    }

    /// Greedy continuation of a prompt ending in SEP.
    pub fn greedy_decode(&self, prefix: &[TokenId], max_out: usize) -> Result<Decoded, ModelError> {
        Ok(self.greedy_decode_batch(&[prefix.to_vec()], &[max_out])?.remove(0))
    }

    /// Greedy decoding of many prompts; per-step linear layers run over all
    /// unfinished sequences at once. Ties go to the lowest token id.
    pub fn greedy_decode_batch(&self, prefixes: &[Vec<TokenId>], max_outs: &[usize]) -> Result<Vec<Decoded>, ModelError> {
        assert_eq!(prefixes.len(), max_outs.len(), "one output budget per prompt");
        let cfg = &self.config;
        let d = cfg.d_model;
        let mut caches: Vec<KvCache> = Vec::with_capacity(prefixes.len());
        let mut results: Vec<Decoded> = Vec::with_capacity(prefixes.len());
        let mut next: Vec<TokenId> = Vec::with_capacity(prefixes.len());
        for prefix in prefixes {
            self.check_tokens(prefix)?;
            let mut kv = KvCache::new(cfg);
            let (x, _) = self.run_blocks(prefix, 0, &mut kv, cfg.n_layers, false);
            let last = &x[(prefix.len() - 1) * d..];
            next.push(argmax(&self.logits_rows(last, 1)));
            caches.push(kv);
            results.push(Decoded { tokens: Vec::new(), terminated: false });
        }
        let mut active: Vec<usize> = Vec::new();
        for (i, &t) in next.iter().enumerate() {
            if t == EOS {
                results[i].terminated = true;
            } else if max_outs[i] > 0 {
                results[i].tokens.push(t);
                if results[i].tokens.len() < max_outs[i] && prefixes[i].len() + results[i].tokens.len() < cfg.max_len {
                    active.push(i);
                }
            }
        }
        let tok = self.params.get(TOK_EMB);
        let pos = self.params.get(POS_EMB);
        while !active.is_empty() {
            let mut x = vec![0.0f32; active.len() * d];
            for (r, &i) in active.iter().enumerate() {
                let t = *results[i].tokens.last().expect("active sequences have a pending token");
                let p = prefixes[i].len() + results[i].tokens.len() - 1;
                for ((o, a), b) in x[r * d..(r + 1) * d].iter_mut().zip(tok.row(t as usize)).zip(pos.row(p)) {
                    *o = a + b;
                }
            }
            let spans: Vec<(usize, usize)> = (0..active.len()).map(|r| (r, 1)).collect();
            let mut group: Vec<KvCache> = active.iter().map(|&i| std::mem::take(&mut caches[i])).collect();
            for l in 0..cfg.n_layers {
                self.block_rows(l, &mut x, &spans, &mut group);
            }
            for (&i, c) in active.iter().zip(group) {
                caches[i] = c;
            }
            let logits = self.logits_rows(&x, active.len());
            let v = cfg.vocab_size;
            let mut still = Vec::with_capacity(active.len());
            for (r, &i) in active.iter().enumerate() {
                let t = argmax(&logits[r * v..(r + 1) * v]);
                if t == EOS {
                    results[i].terminated = true;
                    continue;
                }
                results[i].tokens.push(t);
                if results[i].tokens.len() < max_outs[i] && prefixes[i].len() + results[i].tokens.len() < cfg.max_len {
                    still.push(i);
                }
            }
            active = still;
        }
        Ok(results)
    }
}

fn argmax(row: &[f32]) -> TokenId {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as TokenId
}

#[derive(Debug, Clone, Default)]
struct LayerCache {
    keys: Vec<f32>,
    values: Vec<f32>,
    len: usize,
}

#[derive(Debug, Clone, Default)]
struct KvCache {
    layers: Vec<LayerCache>,
}

impl KvCache {
    fn new(cfg: &ModelConfig) -> Self {
        KvCache { layers: vec![LayerCache::default(); cfg.n_layers] }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn small(layers: usize) -> ModelConfig {
        ModelConfig { d_model: 16, n_heads: 4, d_ff: 32, n_layers: layers, vocab_size: 26, max_len: 32 }
    }

    #[test]
    fn param_count_matches_closed_form() {
        for layers in [1, 2, 4, 10] {
            let cfg = ModelConfig { n_layers: layers, ..ModelConfig::default() };
            let m = Transformer::init(cfg.clone(), &mut seeded_rng(0)).unwrap();
            assert_eq!(m.params.num_scalars(), cfg.param_count());
        }
        // 26*128 + 128*128 + 4*(9*128 + 4*128^2 + 2*128*256 + 256) + 2*128 + 128*26 + 26
        assert_eq!(ModelConfig::default().param_count(), 553_242);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig { d_model: 10, n_heads: 4, ..ModelConfig::default() };
        assert!(matches!(Transformer::init(cfg, &mut seeded_rng(0)), Err(ModelError::Config(_))));
    }

    #[test]
    fn forward_shapes() {
        let cfg = ModelConfig::default();
        let m = Transformer::init(cfg, &mut seeded_rng(1)).unwrap();
        let out = m.forward(&[1, 4, 9, 10, 5]).unwrap();
        assert_eq!(out.logits.shape(), [5, 26]);
        assert_eq!(out.hidden.len(), 4);
        assert!(out.hidden.iter().all(|h| h.shape() == [5, 128]));
    }

    #[test]
    fn rejects_bad_tokens_and_lengths() {
        let m = Transformer::init(small(1), &mut seeded_rng(1)).unwrap();
        assert_eq!(m.forward(&[1, 26]).unwrap_err(), ModelError::TokenOutOfRange { token: 26, vocab: 26 });
        assert_eq!(m.forward(&[1; 33]).unwrap_err(), ModelError::TooLong { len: 33, max_len: 32 });
    }

    #[test]
    fn tape_and_inference_paths_agree() {
        let m = Transformer::init(small(2), &mut seeded_rng(2)).unwrap();
        let seqs = vec![vec![1, 4, 8, 10, 5, 2], vec![1, 7, 9, 2, 7, 7]];
        let mut tape = Tape::new();
        let fwd = m.forward_tape(&mut tape, 0, &seqs, None).unwrap();
        let logits = tape.value(fwd.logits.unwrap()).clone();
        for (s, seq) in seqs.iter().enumerate() {
            let out = m.forward(seq).unwrap();
            for t in 0..seq.len() {
                let a = logits.row(s * seq.len() + t);
                let b = out.logits.row(t);
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() < 1e-5, "{x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn incremental_decoding_matches_full_forward() {
        let m = Transformer::init(small(2), &mut seeded_rng(3)).unwrap();
        let prefix = vec![1, 5, 9, 10, 4, 2];
        let dec = m.greedy_decode(&prefix, 8).unwrap();
        let mut seq = prefix.clone();
        for &t in &dec.tokens {
            let out = m.forward(&seq).unwrap();
            assert_eq!(argmax(out.logits.row(seq.len() - 1)), t);
            seq.push(t);
        }
    }

    #[test]
    fn batch_decoding_matches_single() {
        let m = Transformer::init(small(2), &mut seeded_rng(4)).unwrap();
        let prefixes = vec![vec![1, 5, 2], vec![1, 6, 8, 10, 7, 2], vec![1, 4, 9, 2]];
        let budgets = vec![5, 7, 3];
        let batch = m.greedy_decode_batch(&prefixes, &budgets).unwrap();
        for ((p, &b), got) in prefixes.iter().zip(&budgets).zip(&batch) {
            assert_eq!(&m.greedy_decode(p, b).unwrap(), got);
            assert!(got.tokens.len() <= b);
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.5, 1.0, 1.0, 0.2]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn hidden_prefix_property() {
        let deep = Transformer::init(small(4), &mut seeded_rng(5)).unwrap();
        let mut shallow_params = ParamStore::new();
        let keep = 2 + PER_BLOCK * 2;
        for (i, (n, t)) in deep.params.iter().enumerate() {
            if i < keep || i >= 2 + PER_BLOCK * 4 {
                shallow_params.push(n, t.clone());
            }
        }
        let shallow = Transformer::from_params(small(2), shallow_params).unwrap();
        let tokens = [1, 4, 8, 10, 6, 2, 4];
        let a = deep.forward(&tokens).unwrap();
        let b = shallow.forward(&tokens).unwrap();
        assert_eq!(a.hidden[0], b.hidden[0]);
        assert_eq!(a.hidden[1], b.hidden[1]);
        assert_eq!(deep.hidden_states(&tokens, 2).unwrap(), b.hidden);
    }

    #[test]
    fn decoding_is_deterministic() {
        let m = Transformer::init(small(1), &mut seeded_rng(6)).unwrap();
        let p = vec![1, 5, 8, 2];
        assert_eq!(m.greedy_decode(&p, 6).unwrap(), m.greedy_decode(&p, 6).unwrap());
    }
}
