//! Expression grammar, deterministic semantics, dataset sampling and
//! tokenization.
//!
//! Expressions follow `e ::= p | m(e) | e c e`. The surface form puts a
//! modifier after its argument (`jump thrice`) and connectors infix
//! (`jump then walk`). Outputs are sequences over the primitive tokens
//! themselves, so `jump thrice then look` means `jump jump jump look`.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const SEP: TokenId = 2;
pub const EOS: TokenId = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<sep>", "<eos>"];

/// Largest `num_noise` any experiment asks for.
pub const MAX_NOISE: usize = 15;

/// Primitive counts used by the out-of-distribution suite.
pub const OOD_PRIMITIVES: std::ops::RangeInclusive<usize> = 5..=12;
pub const OOD_PER_K: usize = 200;

#[derive(Debug, Error, PartialEq)]
pub enum GrammarError {
    #[error("unknown {kind} id {id}")]
    UnknownId { kind: &'static str, id: usize },
    #[error("token {0} cannot be parsed at this position")]
    UnexpectedToken(TokenId),
    #[error("empty token sequence")]
    Empty,
    #[error("requested {requested} noise tokens but the noise vocabulary has {available}")]
    TooMuchNoise { requested: usize, available: usize },
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PrimId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConnId(pub usize);

/// What a token id denotes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Special,
    Primitive(PrimId),
    Modifier(ModId),
    Connector(ConnId),
    Noise,
}

/// Surface vocabulary. Token ids are dense: specials first (PAD=0, BOS=1,
/// SEP=2, EOS=3), then primitives, modifiers, connectors and noise tokens in
/// list order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub primitives: Vec<String>,
    pub modifiers: Vec<(String, usize)>,
    pub connectors: Vec<String>,
    pub noise_tokens: Vec<String>,
}

impl Default for VocabSpec {
    fn default() -> Self {
        let mut noise_tokens: Vec<String> = ["foo", "bar", "baz"].iter().map(|s| s.to_string()).collect();
        const NONCE: [&str; 12] = [
            "dax", "wug", "blicket", "fep", "zorp", "kiki", "bouba", "tove", "gimble", "mome",
            "rath", "snark",
        ];
        noise_tokens.extend(NONCE.iter().map(|s| s.to_string()));
        VocabSpec {
            primitives: ["walk", "jump", "look", "turn"].iter().map(|s| s.to_string()).collect(),
            modifiers: vec![("twice".into(), 2), ("thrice".into(), 3)],
            connectors: vec!["then".into()],
            noise_tokens,
        }
    }
}

impl VocabSpec {
    pub fn validate(&self) -> Result<(), GrammarError> {
        if self.primitives.is_empty() || self.connectors.is_empty() {
            return Err(GrammarError::InvalidVocab("need at least one primitive and one connector".into()));
        }
        if let Some((m, _)) = self.modifiers.iter().find(|(_, c)| *c < 2) {
            return Err(GrammarError::InvalidVocab(format!("modifier {m} must repeat at least twice")));
        }
        if self.noise_tokens.len() < MAX_NOISE {
            return Err(GrammarError::InvalidVocab(format!(
                "need at least {MAX_NOISE} noise tokens, have {}",
                self.noise_tokens.len()
            )));
        }
        let mut seen = HashSet::new();
        for s in self.surface_strings() {
            if !seen.insert(s) {
                return Err(GrammarError::InvalidVocab(format!("duplicate surface string {s:?}")));
            }
        }
        Ok(())
    }

    fn surface_strings(&self) -> impl Iterator<Item = &str> {
        SPECIALS
            .iter()
            .copied()
            .chain(self.primitives.iter().map(String::as_str))
            .chain(self.modifiers.iter().map(|(s, _)| s.as_str()))
            .chain(self.connectors.iter().map(String::as_str))
            .chain(self.noise_tokens.iter().map(String::as_str))
    }

    pub fn size(&self) -> usize {
        SPECIALS.len()
            + self.primitives.len()
            + self.modifiers.len()
            + self.connectors.len()
            + self.noise_tokens.len()
    }

    fn prim_base(&self) -> usize {
        SPECIALS.len()
    }
    fn mod_base(&self) -> usize {
        self.prim_base() + self.primitives.len()
    }
    fn conn_base(&self) -> usize {
        self.mod_base() + self.modifiers.len()
    }
    fn noise_base(&self) -> usize {
        self.conn_base() + self.connectors.len()
    }

    pub fn prim_token(&self, p: PrimId) -> TokenId {
        (self.prim_base() + p.0) as TokenId
    }
    pub fn mod_token(&self, m: ModId) -> TokenId {
        (self.mod_base() + m.0) as TokenId
    }
    pub fn conn_token(&self, c: ConnId) -> TokenId {
        (self.conn_base() + c.0) as TokenId
    }
    pub fn noise_token(&self, i: usize) -> TokenId {
        (self.noise_base() + i) as TokenId
    }

    pub fn kind(&self, t: TokenId) -> Option<TokenKind> {
        let t = t as usize;
        if t < self.prim_base() {
            Some(TokenKind::Special)
        } else if t < self.mod_base() {
            Some(TokenKind::Primitive(PrimId(t - self.prim_base())))
        } else if t < self.conn_base() {
            Some(TokenKind::Modifier(ModId(t - self.mod_base())))
        } else if t < self.noise_base() {
            Some(TokenKind::Connector(ConnId(t - self.conn_base())))
        } else if t < self.size() {
            Some(TokenKind::Noise)
        } else {
            None
        }
    }

    pub fn is_noise(&self, t: TokenId) -> bool {
        matches!(self.kind(t), Some(TokenKind::Noise))
    }

    pub fn surface(&self, t: TokenId) -> Option<&str> {
        self.surface_strings().nth(t as usize)
    }

    pub fn token_of(&self, s: &str) -> Option<TokenId> {
        self.surface_strings().position(|x| x == s).map(|i| i as TokenId)
    }

    pub fn repeat_count(&self, m: ModId) -> Result<usize, GrammarError> {
        self.modifiers
            .get(m.0)
            .map(|(_, c)| *c)
            .ok_or(GrammarError::UnknownId { kind: "modifier", id: m.0 })
    }

    /// Surface string → id map, specials first.
    pub fn id_map(&self) -> BTreeMap<String, TokenId> {
        self.surface_strings()
            .enumerate()
            .map(|(i, s)| (s.to_string(), i as TokenId))
            .collect()
    }

    /// Number of distinct single-primitive units (bare or wrapped once).
    fn unit_count(&self) -> usize {
        self.primitives.len() * (1 + self.modifiers.len())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Expression {
    Prim(PrimId),
    Mod(ModId, Box<Expression>),
    Seq(Box<Expression>, ConnId, Box<Expression>),
}

impl Expression {
    pub fn modified(m: ModId, e: Expression) -> Self {
        Expression::Mod(m, Box::new(e))
    }

    pub fn seq(l: Expression, c: ConnId, r: Expression) -> Self {
        Expression::Seq(Box::new(l), c, Box::new(r))
    }

    pub fn primitive_count(&self) -> usize {
        match self {
            Expression::Prim(_) => 1,
            Expression::Mod(_, e) => e.primitive_count(),
            Expression::Seq(l, _, r) => l.primitive_count() + r.primitive_count(),
        }
    }
}

/// Output sequence of an expression.
pub fn interpret(e: &Expression, vocab: &VocabSpec) -> Result<Vec<TokenId>, GrammarError> {
    let mut out = Vec::new();
    interpret_into(e, vocab, &mut out)?;
    Ok(out)
}

fn interpret_into(e: &Expression, vocab: &VocabSpec, out: &mut Vec<TokenId>) -> Result<(), GrammarError> {
    match e {
        Expression::Prim(p) => {
            if p.0 >= vocab.primitives.len() {
                return Err(GrammarError::UnknownId { kind: "primitive", id: p.0 });
            }
            out.push(vocab.prim_token(*p));
        }
        Expression::Mod(m, inner) => {
            let count = vocab.repeat_count(*m)?;
            let start = out.len();
            interpret_into(inner, vocab, out)?;
            let span = out[start..].to_vec();
            for _ in 1..count {
                out.extend_from_slice(&span);
            }
        }
        Expression::Seq(l, c, r) => {
            if c.0 >= vocab.connectors.len() {
                return Err(GrammarError::UnknownId { kind: "connector", id: c.0 });
            }
            interpret_into(l, vocab, out)?;
            interpret_into(r, vocab, out)?;
        }
    }
    Ok(())
}

/// Clean surface tokens of an expression (no BOS/SEP, no noise).
pub fn linearize(e: &Expression, vocab: &VocabSpec) -> Vec<TokenId> {
    let mut out = Vec::new();
    linearize_into(e, vocab, &mut out);
    out
}

fn linearize_into(e: &Expression, vocab: &VocabSpec, out: &mut Vec<TokenId>) {
    match e {
        Expression::Prim(p) => out.push(vocab.prim_token(*p)),
        Expression::Mod(m, inner) => {
            linearize_into(inner, vocab, out);
            out.push(vocab.mod_token(*m));
        }
        Expression::Seq(l, c, r) => {
            linearize_into(l, vocab, out);
            out.push(vocab.conn_token(*c));
            linearize_into(r, vocab, out);
        }
    }
}

/// Inverse of [`linearize`]: postfix modifiers bind tightest, connectors
/// associate to the left.
pub fn parse(tokens: &[TokenId], vocab: &VocabSpec) -> Result<Expression, GrammarError> {
    let mut it = tokens.iter().copied().peekable();
    let unit = |it: &mut std::iter::Peekable<std::iter::Copied<std::slice::Iter<TokenId>>>| -> Result<Expression, GrammarError> {
        let t = it.next().ok_or(GrammarError::Empty)?;
        let mut e = match vocab.kind(t) {
            Some(TokenKind::Primitive(p)) => Expression::Prim(p),
            _ => return Err(GrammarError::UnexpectedToken(t)),
        };
        while let Some(&t) = it.peek() {
            match vocab.kind(t) {
                Some(TokenKind::Modifier(m)) => {
                    it.next();
                    e = Expression::modified(m, e);
                }
                _ => break,
            }
        }
        Ok(e)
    };
    let mut expr = unit(&mut it)?;
    while let Some(t) = it.next() {
        match vocab.kind(t) {
            Some(TokenKind::Connector(c)) => {
                let rhs = unit(&mut it)?;
                expr = Expression::seq(expr, c, rhs);
            }
            _ => return Err(GrammarError::UnexpectedToken(t)),
        }
    }
    Ok(expr)
}

/// Inserts `num_noise` noise tokens at uniformly chosen gaps. Returns the
/// noisy sequence and the (sorted) indices of the inserted tokens.
pub fn inject_noise(
    tokens: &[TokenId],
    num_noise: usize,
    vocab: &VocabSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<TokenId>, Vec<usize>), GrammarError> {
    if num_noise > vocab.noise_tokens.len() {
        return Err(GrammarError::TooMuchNoise { requested: num_noise, available: vocab.noise_tokens.len() });
    }
    let mut marked: Vec<(TokenId, bool)> = tokens.iter().map(|&t| (t, false)).collect();
    for _ in 0..num_noise {
        let which = rng.random_range(0..vocab.noise_tokens.len());
        let slot = rng.random_range(0..=marked.len());
        marked.insert(slot, (vocab.noise_token(which), true));
    }
    let positions = marked.iter().enumerate().filter(|(_, (_, n))| *n).map(|(i, _)| i).collect();
    Ok((marked.into_iter().map(|(t, _)| t).collect(), positions))
}

fn sample_unit(p_mod: f64, rng: &mut ChaCha8Rng, vocab: &VocabSpec) -> Expression {
    let p = Expression::Prim(PrimId(rng.random_range(0..vocab.primitives.len())));
    if !vocab.modifiers.is_empty() && rng.random_bool(p_mod) {
        Expression::modified(ModId(rng.random_range(0..vocab.modifiers.len())), p)
    } else {
        p
    }
}

/// Random expression with exactly `k` primitives, left-folded on connectors.
pub fn sample_expression(k: usize, p_mod: f64, rng: &mut ChaCha8Rng, vocab: &VocabSpec) -> Expression {
    assert!(k >= 1, "expressions need at least one primitive");
    let mut e = sample_unit(p_mod, rng, vocab);
    for _ in 1..k {
        let c = ConnId(rng.random_range(0..vocab.connectors.len()));
        let rhs = sample_unit(p_mod, rng, vocab);
        e = Expression::seq(e, c, rhs);
    }
    e
}

fn all_units(vocab: &VocabSpec) -> Vec<Expression> {
    let mut units = Vec::with_capacity(vocab.unit_count());
    for p in 0..vocab.primitives.len() {
        units.push(Expression::Prim(PrimId(p)));
        for m in 0..vocab.modifiers.len() {
            units.push(Expression::modified(ModId(m), Expression::Prim(PrimId(p))));
        }
    }
    units
}

/// Number of distinct sampler-reachable expressions with exactly `k`
/// primitives, saturating at `usize::MAX`.
pub fn expression_space(k: usize, vocab: &VocabSpec) -> usize {
    let units = vocab.unit_count();
    let conns = vocab.connectors.len();
    let mut n = units;
    for _ in 1..k {
        n = n.saturating_mul(units).saturating_mul(conns);
    }
    n
}

/// Every sampler-reachable expression with exactly `k` primitives.
pub fn enumerate_expressions(k: usize, vocab: &VocabSpec) -> Vec<Expression> {
    let units = all_units(vocab);
    let mut level = units.clone();
    for _ in 1..k {
        let mut next = Vec::with_capacity(level.len() * units.len() * vocab.connectors.len());
        for l in &level {
            for c in 0..vocab.connectors.len() {
                for u in &units {
                    next.push(Expression::seq(l.clone(), ConnId(c), u.clone()));
                }
            }
        }
        level = next;
    }
    level
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub max_primitives: usize,
    pub num_noise: usize,
    pub modifier_probability: f64,
    pub train_size_cap: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            max_primitives: 2,
            num_noise: 0,
            modifier_probability: 0.5,
            train_size_cap: 2000,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), GrammarError> {
        if self.max_primitives == 0 {
            return Err(GrammarError::InvalidSpec("max_primitives must be at least 1".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 0.5) {
            return Err(GrammarError::InvalidSpec("val_fraction must lie in (0, 0.5)".into()));
        }
        if !(0.0..=1.0).contains(&self.modifier_probability) {
            return Err(GrammarError::InvalidSpec("modifier_probability must lie in [0, 1]".into()));
        }
        if self.num_noise > MAX_NOISE {
            return Err(GrammarError::InvalidSpec(format!("num_noise must be at most {MAX_NOISE}")));
        }
        if self.train_size_cap == 0 {
            return Err(GrammarError::InvalidSpec("train_size_cap must be positive".into()));
        }
        Ok(())
    }

    /// Size of the distinct-expression space the dataset draws from.
    pub fn space_size(&self, vocab: &VocabSpec) -> usize {
        (1..=self.max_primitives).fold(0usize, |acc, k| acc.saturating_add(expression_space(k, vocab)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    /// BOS + (noisy) linearization + SEP.
    pub input_tokens: Vec<TokenId>,
    /// Semantics + EOS.
    pub output_tokens: Vec<TokenId>,
    pub expression: Expression,
    /// Indices into `input_tokens`.
    pub noise_positions: Vec<usize>,
}

impl Example {
    pub fn new(
        expression: Expression,
        num_noise: usize,
        vocab: &VocabSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, GrammarError> {
        let clean = linearize(&expression, vocab);
        let (noisy, positions) = inject_noise(&clean, num_noise, vocab, rng)?;
        let mut input_tokens = Vec::with_capacity(noisy.len() + 2);
        input_tokens.push(BOS);
        input_tokens.extend(noisy);
        input_tokens.push(SEP);
        let mut output_tokens = interpret(&expression, vocab)?;
        output_tokens.push(EOS);
        Ok(Example {
            input_tokens,
            output_tokens,
            expression,
            noise_positions: positions.into_iter().map(|p| p + 1).collect(),
        })
    }

    /// The full causal-LM sequence: input followed by output.
    pub fn sequence(&self) -> Vec<TokenId> {
        let mut s = self.input_tokens.clone();
        s.extend_from_slice(&self.output_tokens);
        s
    }

    /// Index of SEP in the full sequence.
    pub fn sep_index(&self) -> usize {
        self.input_tokens.len() - 1
    }

    /// Input tokens between BOS and SEP with noise removed.
    pub fn clean_input(&self) -> Vec<TokenId> {
        let inner = &self.input_tokens[1..self.input_tokens.len() - 1];
        inner
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.noise_positions.contains(&(i + 1)))
            .map(|(_, &t)| t)
            .collect()
    }

    pub fn primitive_count(&self) -> usize {
        self.expression.primitive_count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

/// Builds train/validation splits. The expression space is enumerated in
/// full when it fits under `train_size_cap`, otherwise that many distinct
/// expressions are drawn with primitive counts uniform over
/// `1..=max_primitives`.
pub fn build_dataset(spec: &DatasetSpec, vocab: &VocabSpec) -> Result<Dataset, GrammarError> {
    spec.validate()?;
    vocab.validate()?;
    let mut rng = crate::seeded_rng(spec.seed);
    let mut exprs: Vec<Expression> = if spec.space_size(vocab) <= spec.train_size_cap {
        (1..=spec.max_primitives).flat_map(|k| enumerate_expressions(k, vocab)).collect()
    } else {
        let mut seen = HashSet::with_capacity(spec.train_size_cap);
        let mut out = Vec::with_capacity(spec.train_size_cap);
        while out.len() < spec.train_size_cap {
            let k = rng.random_range(1..=spec.max_primitives);
            let e = sample_expression(k, spec.modifier_probability, &mut rng, vocab);
            if seen.insert(e.clone()) {
                out.push(e);
            }
        }
        out
    };
    exprs.shuffle(&mut rng);
    let n_val = ((exprs.len() as f64 * spec.val_fraction).round() as usize).clamp(1, exprs.len().saturating_sub(1).max(1));
    let mut examples = Vec::with_capacity(exprs.len());
    for e in exprs {
        examples.push(Example::new(e, spec.num_noise, vocab, &mut rng)?);
    }
    let train = examples.split_off(n_val);
    Ok(Dataset { train, val: examples })
}

/// Held-out suite: for each k in 5..=12, 200 distinct noise-free
/// expressions with exactly k primitives.
pub fn build_ood_suite(
    vocab: &VocabSpec,
    p_mod: f64,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeMap<usize, Vec<Example>>, GrammarError> {
    let mut suite = BTreeMap::new();
    for k in OOD_PRIMITIVES {
        let mut seen = HashSet::new();
        let mut items = Vec::with_capacity(OOD_PER_K);
        while items.len() < OOD_PER_K {
            let e = sample_expression(k, p_mod, rng, vocab);
            if seen.insert(e.clone()) {
                items.push(Example::new(e, 0, vocab, rng)?);
            }
        }
        suite.insert(k, items);
    }
    Ok(suite)
}

#[derive(Serialize)]
struct DumpRecord<'a> {
    input: Vec<&'a str>,
    output: Vec<&'a str>,
    k: usize,
    noise_positions: &'a [usize],
}

/// Writes examples as JSON lines. Surface tokens exclude BOS/SEP/EOS;
/// noise positions index the written `input` list.
pub fn write_jsonl<W: Write>(examples: &[Example], vocab: &VocabSpec, mut w: W) -> Result<(), GrammarError> {
    for ex in examples {
        let body = &ex.input_tokens[1..ex.input_tokens.len() - 1];
        let out = &ex.output_tokens[..ex.output_tokens.len() - 1];
        let positions: Vec<usize> = ex.noise_positions.iter().map(|p| p - 1).collect();
        let rec = DumpRecord {
            input: body.iter().map(|&t| vocab.surface(t).unwrap_or("<unk>")).collect(),
            output: out.iter().map(|&t| vocab.surface(t).unwrap_or("<unk>")).collect(),
            k: ex.primitive_count(),
            noise_positions: &positions,
        };
        let line = serde_json::to_string(&rec).map_err(|e| GrammarError::Io(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| GrammarError::Io(e.to_string()))?;
    }
    Ok(())
}

pub fn vocab_json(vocab: &VocabSpec) -> String {
    serde_json::to_string_pretty(&vocab.id_map()).expect("string map serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn v() -> VocabSpec {
        VocabSpec::default()
    }
    fn tok(vocab: &VocabSpec, s: &str) -> TokenId {
        vocab.token_of(s).unwrap()
    }
    fn prim(vocab: &VocabSpec, s: &str) -> Expression {
        match vocab.kind(tok(vocab, s)) {
            Some(TokenKind::Primitive(p)) => Expression::Prim(p),
            _ => panic!("{s} is not a primitive"),
        }
    }
    fn md(vocab: &VocabSpec, s: &str) -> ModId {
        match vocab.kind(tok(vocab, s)) {
            Some(TokenKind::Modifier(m)) => m,
            _ => panic!("{s} is not a modifier"),
        }
    }
    fn words(vocab: &VocabSpec, ts: &[TokenId]) -> Vec<String> {
        ts.iter().map(|&t| vocab.surface(t).unwrap().to_string()).collect()
    }

    #[test]
    fn vocabulary_layout() {
        let vocab = v();
        vocab.validate().unwrap();
        assert_eq!(vocab.size(), 26);
        let ids = vocab.id_map();
        assert_eq!(ids["<pad>"], 0);
        assert_eq!(ids["<bos>"], 1);
        assert_eq!(ids["<sep>"], 2);
        assert_eq!(ids["<eos>"], 3);
        assert_eq!(ids["walk"], 4);
        let mut sorted: Vec<_> = ids.values().copied().collect();
        sorted.sort();
        assert_eq!(sorted, (0..26).collect::<Vec<_>>());
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_unit_modifiers() {
        let mut vocab = v();
        vocab.noise_tokens[0] = "walk".into();
        assert!(vocab.validate().is_err());
        let mut vocab = v();
        vocab.modifiers[0].1 = 1;
        assert!(vocab.validate().is_err());
    }

    #[test]
    fn interpret_examples() {
        let vocab = v();
        let jump_twice = Expression::modified(md(&vocab, "twice"), prim(&vocab, "jump"));
        assert_eq!(words(&vocab, &interpret(&jump_twice, &vocab).unwrap()), ["jump", "jump"]);
        let look_then_walk = Expression::seq(prim(&vocab, "look"), ConnId(0), prim(&vocab, "walk"));
        assert_eq!(words(&vocab, &interpret(&look_then_walk, &vocab).unwrap()), ["look", "walk"]);
        assert_eq!(words(&vocab, &interpret(&prim(&vocab, "walk"), &vocab).unwrap()), ["walk"]);
        let e = Expression::seq(
            Expression::modified(md(&vocab, "thrice"), prim(&vocab, "jump")),
            ConnId(0),
            prim(&vocab, "look"),
        );
        assert_eq!(words(&vocab, &interpret(&e, &vocab).unwrap()), ["jump", "jump", "jump", "look"]);
    }

    #[test]
    fn interpret_rejects_unknown_ids() {
        let vocab = v();
        assert_eq!(
            interpret(&Expression::Prim(PrimId(9)), &vocab),
            Err(GrammarError::UnknownId { kind: "primitive", id: 9 })
        );
        let e = Expression::modified(ModId(5), Expression::Prim(PrimId(0)));
        assert!(interpret(&e, &vocab).is_err());
        let e = Expression::seq(Expression::Prim(PrimId(0)), ConnId(3), Expression::Prim(PrimId(1)));
        assert!(interpret(&e, &vocab).is_err());
    }

    #[test]
    fn linearize_examples() {
        let vocab = v();
        let jt = Expression::modified(md(&vocab, "thrice"), prim(&vocab, "jump"));
        assert_eq!(words(&vocab, &linearize(&jt, &vocab)), ["jump", "thrice"]);
        assert_eq!(words(&vocab, &linearize(&prim(&vocab, "turn"), &vocab)), ["turn"]);
        let e = Expression::seq(
            Expression::modified(md(&vocab, "twice"), prim(&vocab, "jump")),
            ConnId(0),
            Expression::modified(md(&vocab, "thrice"), prim(&vocab, "walk")),
        );
        assert_eq!(words(&vocab, &linearize(&e, &vocab)), ["jump", "twice", "then", "walk", "thrice"]);
    }

    #[test]
    fn parse_rejects_malformed() {
        let vocab = v();
        assert_eq!(parse(&[], &vocab), Err(GrammarError::Empty));
        let then = tok(&vocab, "then");
        let walk = tok(&vocab, "walk");
        assert!(parse(&[then, walk], &vocab).is_err());
        assert!(parse(&[walk, then], &vocab).is_err());
        assert!(parse(&[walk, walk], &vocab).is_err());
    }

    #[test]
    fn noise_injection() {
        let vocab = v();
        let clean: Vec<TokenId> = ["jump", "thrice", "then", "look"].iter().map(|s| tok(&vocab, s)).collect();
        let mut rng = seeded_rng(1);
        let (same, pos) = inject_noise(&clean, 0, &vocab, &mut rng).unwrap();
        assert_eq!(same, clean);
        assert!(pos.is_empty());

        let (noisy, pos) = inject_noise(&clean, 3, &vocab, &mut rng).unwrap();
        assert_eq!(noisy.len(), 7);
        assert_eq!(pos.len(), 3);
        assert!(pos.iter().all(|&p| vocab.is_noise(noisy[p])));
        let restored: Vec<_> = noisy.iter().enumerate().filter(|(i, _)| !pos.contains(i)).map(|(_, &t)| t).collect();
        assert_eq!(restored, clean);

        let a = inject_noise(&clean, 5, &vocab, &mut seeded_rng(42)).unwrap();
        let b = inject_noise(&clean, 5, &vocab, &mut seeded_rng(42)).unwrap();
        assert_eq!(a, b);

        assert_eq!(
            inject_noise(&clean, 16, &vocab, &mut rng),
            Err(GrammarError::TooMuchNoise { requested: 16, available: 15 })
        );
    }

    #[test]
    fn sampler_examples() {
        let vocab = v();
        let mut rng = seeded_rng(3);
        assert!(matches!(sample_expression(1, 0.0, &mut rng, &vocab), Expression::Prim(_)));
        for _ in 0..50 {
            assert_eq!(sample_expression(3, 0.5, &mut rng, &vocab).primitive_count(), 3);
        }
        let e = sample_expression(2, 1.0, &mut seeded_rng(7), &vocab);
        match e {
            Expression::Seq(l, _, r) => {
                assert!(matches!(*l, Expression::Mod(_, _)));
                assert!(matches!(*r, Expression::Mod(_, _)));
            }
            other => panic!("expected a sequence, got {other:?}"),
        }
    }

    #[test]
    fn dataset_space_sizes() {
        let vocab = v();
        let one = DatasetSpec { max_primitives: 1, ..DatasetSpec::default() };
        assert_eq!(one.space_size(&vocab), 12);
        let two = DatasetSpec { max_primitives: 2, ..DatasetSpec::default() };
        assert_eq!(two.space_size(&vocab), 156);
        let ds = build_dataset(&one, &vocab).unwrap();
        assert_eq!(ds.train.len() + ds.val.len(), 12);
        let ds = build_dataset(&two, &vocab).unwrap();
        assert_eq!(ds.train.len() + ds.val.len(), 156);
        assert_eq!(ds.val.len(), 16);
    }

    #[test]
    fn dataset_noise_and_disjoint_splits() {
        let vocab = v();
        let spec = DatasetSpec { num_noise: 15, ..DatasetSpec::default() };
        let ds = build_dataset(&spec, &vocab).unwrap();
        for ex in &ds.train {
            let noise = ex.input_tokens.iter().filter(|&&t| vocab.is_noise(t)).count();
            assert_eq!(noise, 15);
            assert_eq!(ex.noise_positions.len(), 15);
            assert!(ex.output_tokens.iter().all(|&t| !vocab.is_noise(t) && t != PAD));
            assert_eq!(parse(&ex.clean_input(), &vocab).unwrap(), ex.expression);
        }
        let train: HashSet<_> = ds.train.iter().map(|e| &e.expression).collect();
        assert!(ds.val.iter().all(|e| !train.contains(&e.expression)));
    }

    #[test]
    fn dataset_is_seed_deterministic() {
        let vocab = v();
        let spec = DatasetSpec { num_noise: 4, seed: 11, ..DatasetSpec::default() };
        assert_eq!(build_dataset(&spec, &vocab).unwrap(), build_dataset(&spec, &vocab).unwrap());
    }

    #[test]
    fn large_space_is_sampled_to_cap() {
        let vocab = v();
        let spec = DatasetSpec { max_primitives: 4, ..DatasetSpec::default() };
        let ds = build_dataset(&spec, &vocab).unwrap();
        assert_eq!(ds.train.len() + ds.val.len(), 2000);
        let all: HashSet<_> = ds.train.iter().chain(&ds.val).map(|e| &e.expression).collect();
        assert_eq!(all.len(), 2000);
    }

    #[test]
    fn dataset_rejects_zero_primitives() {
        let spec = DatasetSpec { max_primitives: 0, ..DatasetSpec::default() };
        assert!(matches!(build_dataset(&spec, &v()), Err(GrammarError::InvalidSpec(_))));
    }

    #[test]
    fn ood_suite_shape() {
        let vocab = v();
        let suite = build_ood_suite(&vocab, 0.5, &mut seeded_rng(5)).unwrap();
        assert_eq!(suite.keys().copied().collect::<Vec<_>>(), (5..=12).collect::<Vec<_>>());
        for (k, items) in &suite {
            assert_eq!(items.len(), 200);
            let distinct: HashSet<_> = items.iter().map(|e| &e.expression).collect();
            assert_eq!(distinct.len(), 200);
            assert!(items.iter().all(|e| e.primitive_count() == *k && e.noise_positions.is_empty()));
        }
        let again = build_ood_suite(&vocab, 0.5, &mut seeded_rng(5)).unwrap();
        assert_eq!(suite, again);
    }

    #[test]
    fn jsonl_dump() {
        let vocab = v();
        let ex = Example::new(
            Expression::seq(
                Expression::modified(md(&vocab, "thrice"), prim(&vocab, "jump")),
                ConnId(0),
                prim(&vocab, "look"),
            ),
            3,
            &vocab,
            &mut seeded_rng(0),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_jsonl(std::slice::from_ref(&ex), &vocab, &mut buf).unwrap();
        let line: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(line["input"].as_array().unwrap().len(), 7);
        assert_eq!(line["output"], serde_json::json!(["jump", "jump", "jump", "look"]));
        assert_eq!(line["k"], 2);
        for p in line["noise_positions"].as_array().unwrap() {
            let w = line["input"][p.as_u64().unwrap() as usize].as_str().unwrap();
            assert!(vocab.is_noise(vocab.token_of(w).unwrap()));
        }
    }

    fn all_upto(k: usize, vocab: &VocabSpec) -> Vec<Expression> {
        (1..=k).flat_map(|i| enumerate_expressions(i, vocab)).collect()
    }

    #[test]
    fn parse_inverts_linearize_on_enumeration() {
        let vocab = v();
        for e in all_upto(3, &vocab) {
            assert_eq!(parse(&linearize(&e, &vocab), &vocab).unwrap(), e);
        }
    }

    #[test]
    fn nested_modifiers_round_trip() {
        let vocab = v();
        let e = Expression::modified(ModId(1), Expression::modified(ModId(0), Expression::Prim(PrimId(2))));
        assert_eq!(parse(&linearize(&e, &vocab), &vocab).unwrap(), e);
        assert_eq!(interpret(&e, &vocab).unwrap().len(), 6);
    }

    proptest::proptest! {
        #[test]
        fn sampled_expressions_round_trip(seed in 0u64..10_000, k in 1usize..12, p in 0.0f64..=1.0) {
            let vocab = v();
            let e = sample_expression(k, p, &mut seeded_rng(seed), &vocab);
            proptest::prop_assert_eq!(parse(&linearize(&e, &vocab), &vocab).unwrap(), e);
        }

        #[test]
        fn labels_ignore_noise(seed in 0u64..10_000, n in 0usize..=15) {
            let vocab = v();
            let mut rng = seeded_rng(seed);
            let e = sample_expression(3, 0.5, &mut rng, &vocab);
            let noisy = Example::new(e.clone(), n, &vocab, &mut rng).unwrap();
            let clean = Example::new(e.clone(), 0, &vocab, &mut rng).unwrap();
            proptest::prop_assert_eq!(&noisy.output_tokens, &clean.output_tokens);
            proptest::prop_assert_eq!(noisy.clean_input(), linearize(&e, &vocab));
        }
    }
}
