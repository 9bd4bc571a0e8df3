//! Operation record for reverse-mode differentiation.
//!
//! Every op evaluates eagerly, checks its output for NaN/Inf and appends a
//! node. Nodes are appended in evaluation order, so walking the list
//! backwards is a valid reverse topological order. `backward` may run
//! once per tape.

use std::collections::{BTreeMap, HashMap};

use super::kernels::{gemm, layer_norm_rows, softmax_in_place};
use super::{shape_err, NumericsError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Caller-assigned identity of a trainable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamKey),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Concat(Vec<Var>),
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    MeanAxis { x: Var, axis: usize },
    MeanAll(Var),
    Softmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Relu(Var),
    Reshape(Var),
    SwapAxes12(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, count: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Result of one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamKey, Tensor>,
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, key: ParamKey) -> Option<&Tensor> {
        self.params.get(&key)
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamKey, &Tensor)> {
        self.params.iter().map(|(k, t)| (*k, t))
    }
}

fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str, needs_grad: bool) -> Result<Var, NumericsError> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite(name));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input.
    pub fn constant(&mut self, t: Tensor) -> Result<Var, NumericsError> {
        self.push(t, Op::Leaf, "constant", false)
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Result<Var, NumericsError> {
        self.push(t, Op::Leaf, "input", true)
    }

    pub fn param(&mut self, key: ParamKey, t: &Tensor) -> Result<Var, NumericsError> {
        self.push(t.clone(), Op::Param(key), "param", true)
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), "matmul", ng)
    }

    /// `x W + b` for `x: [m, k]`, `W: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || sb != [sw[1]] {
            return Err(shape_err("linear", format!("{sx:?} x {sw:?} + {sb:?}")));
        }
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(self.value(b).data());
        }
        gemm(m, k, n, self.value(x).data(), false, self.value(w).data(), false, &mut out, 1.0);
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::Linear { x, w, b }, "linear", ng)
    }

    /// `[B, m, k] x [B, k, n]`, or `[B, m, k] x [B, n, k]^T` with `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || shape_err("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0.0; bt * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bt {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                false,
                &bd[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![bt, m, n], out)?, Op::BatchMatMul { a, b, trans_b }, "bmm", ng)
    }

    fn broadcast(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !is_suffix(ta.shape(), tb.shape()) {
            return Err(shape_err(name, format!("{:?} with {:?}", ta.shape(), tb.shape())));
        }
        let nb = tb.len().max(1);
        let bd = tb.data();
        let mut data = Vec::with_capacity(ta.len());
        for chunk in ta.data().chunks_exact(nb) {
            data.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
        }
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// Elementwise sum; `b` may be broadcast along leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let t = self.broadcast(a, b, "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Add(a, b), "add", ng)
    }

    /// Elementwise product; `b` may be broadcast along leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let t = self.broadcast(a, b, "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Mul(a, b), "mul", ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("sub", format!("{:?} - {:?}", self.shape(a), self.shape(b))));
        }
        let t = self.broadcast(a, b, "sub", |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(t, Op::Sub(a, b), "sub", ng)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var, NumericsError> {
        let ta = self.value(a);
        let t = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * c).collect())?;
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, c), "scale", ng)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs"))?;
        let lead = self.shape(*first)[..self.shape(*first).len().saturating_sub(1)].to_vec();
        let rows = self.value(*first).rows();
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(shape_err("concat", format!("{s:?} vs leading {lead:?}")));
            }
            total += s[s.len() - 1];
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), "concat", ng)
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || start > end || end > s[0] {
            return Err(shape_err("slice", format!("{start}..{end} of {s:?}")));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * inner..end * inner].to_vec();
        let mut shape = s.clone();
        shape[0] = end - start;
        let ng = self.needs(x);
        self.push(Tensor::new(shape, data)?, Op::SliceRows { x, start }, "slice", ng)
    }

    /// Selects rows of a 2-D tensor (embedding lookup when `x` is a table).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(shape_err("gather_rows", format!("needs 2-D input, got {s:?}")));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * s[1]);
        for &r in rows {
            if r >= s[0] {
                return Err(NumericsError::Index { op: "gather_rows", index: r, len: s[0] });
            }
            data.extend_from_slice(t.row(r));
        }
        let ng = self.needs(x);
        self.push(Tensor::new(vec![rows.len(), s[1]], data)?, Op::GatherRows { x, rows: rows.to_vec() }, "gather_rows", ng)
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        self.gather_rows(table, ids)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(shape_err("mean_axis", format!("axis {axis} of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                add_into(&mut out[o * inner..(o + 1) * inner], &xd[base..base + inner]);
            }
        }
        let inv = 1.0 / len as f32;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = s.clone();
        shape.remove(axis);
        let ng = self.needs(x);
        self.push(Tensor::new(shape, out)?, Op::MeanAxis { x, axis }, "mean_axis", ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(shape_err("mean_all", "empty tensor"));
        }
        let m = (t.data().iter().map(|&v| v as f64).sum::<f64>() / t.len() as f64) as f32;
        let ng = self.needs(x);
        self.push(Tensor::scalar(m), Op::MeanAll(x), "mean_all", ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if t.shape().is_empty() {
            return Err(shape_err("softmax", "scalar input"));
        }
        let c = t.cols();
        let mut data = t.data().to_vec();
        data.chunks_exact_mut(c).for_each(softmax_in_place);
        let shape = t.shape().to_vec();
        let ng = self.needs(x);
        self.push(Tensor::new(shape, data)?, Op::Softmax { x }, "softmax", ng)
    }

    /// Softmax over the last axis of `[.., T, T]` scores where row `i` only
    /// attends to columns `0..=i`; masked entries get probability zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(shape_err("causal_softmax", format!("needs [.., T, T], got {s:?}")));
        }
        let tt = s[s.len() - 1];
        let mut data = t.data().to_vec();
        for (r, row) in data.chunks_exact_mut(tt).enumerate() {
            let i = r % tt;
            softmax_in_place(&mut row[..=i]);
            row[i + 1..].iter_mut().for_each(|v| *v = 0.0);
        }
        let shape = s.to_vec();
        let ng = self.needs(x);
        self.push(Tensor::new(shape, data)?, Op::Softmax { x }, "causal_softmax", ng)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericsError> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = tx.cols();
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(shape_err("layer_norm", format!("x {:?}, gamma {:?}, beta {:?}", tx.shape(), tg.shape(), tb.shape())));
        }
        let rows = tx.rows();
        let mut out = vec![0.0; tx.len()];
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        layer_norm_rows(tx.data(), tg.data(), tb.data(), &mut out, Some(&mut xhat), Some(&mut rstd));
        let shape = tx.shape().to_vec();
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(Tensor::new(shape, out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd }, "layer_norm", ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v.max(0.0)).collect())?;
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), "relu", ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(x).clone().reshaped(shape)?;
        let ng = self.needs(x);
        self.push(t, Op::Reshape(x), "reshape", ng)
    }

    /// `[a, b, c, d] -> [a, c, b, d]`.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var, NumericsError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("swap_axes12", format!("needs 4-D input, got {s:?}")));
        }
        let data = swap12(self.value(x).data(), s[0], s[1], s[2], s[3]);
        let ng = self.needs(x);
        self.push(Tensor::new(vec![s[0], s[2], s[1], s[3]], data)?, Op::SwapAxes12(x), "swap_axes12", ng)
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` is
    /// set. Logits are `[N, V]`. An all-false mask gives zero loss.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var, NumericsError> {
        let t = self.value(logits);
        let s = t.shape();
        if s.len() != 2 || targets.len() != s[0] || mask.len() != s[0] {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {s:?}, {} targets, {} mask entries", targets.len(), mask.len()),
            ));
        }
        let v = s[1];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, (&tg, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            if tg >= v {
                return Err(NumericsError::Index { op: "cross_entropy", index: tg, len: v });
            }
            let row = t.row(r);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max as f64 + row.iter().map(|&x| ((x - max) as f64).exp()).sum::<f64>().ln();
            total += lse - row[tg] as f64;
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { (total / count as f64) as f32 };
        let ng = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), count },
            "cross_entropy",
            ng,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, NumericsError> {
        if self.consumed {
            return Err(NumericsError::BackwardTwice);
        }
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(NumericsError::NotScalar(lt.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut acc = |v: Var, d: Vec<f32>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => add_into(existing, &d),
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(i, Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Param(key) => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    match out.params.get_mut(key) {
                        Some(existing) => add_into(existing.data_mut(), t.data()),
                        None => {
                            out.params.insert(*key, t);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    if self.nodes[a.0].needs_grad {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, &g, false, tb.data(), true, &mut da, 0.0);
                        acc(*a, da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, ta.data(), true, &g, false, &mut db, 0.0);
                        acc(*b, db);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                    let (m, k, n) = (tx.shape()[0], tx.shape()[1], tw.shape()[1]);
                    if self.nodes[x.0].needs_grad {
                        let mut dx = vec![0.0; m * k];
                        gemm(m, n, k, &g, false, tw.data(), true, &mut dx, 0.0);
                        acc(*x, dx);
                    }
                    if self.nodes[w.0].needs_grad {
                        let mut dw = vec![0.0; k * n];
                        gemm(k, m, n, tx.data(), true, &g, false, &mut dw, 0.0);
                        acc(*w, dw);
                    }
                    if self.nodes[b.0].needs_grad {
                        let mut db = vec![0.0; n];
                        for chunk in g.chunks_exact(n) {
                            add_into(&mut db, chunk);
                        }
                        acc(*b, db);
                    }
                }
                Op::BatchMatMul { a, b, trans_b } => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (bt, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
                    let n = if *trans_b { tb.shape()[1] } else { tb.shape()[2] };
                    if self.nodes[a.0].needs_grad {
                        let mut da = vec![0.0; bt * m * k];
                        for j in 0..bt {
                            gemm(
                                m,
                                n,
                                k,
                                &g[j * m * n..(j + 1) * m * n],
                                false,
                                &tb.data()[j * k * n..(j + 1) * k * n],
                                !*trans_b,
                                &mut da[j * m * k..(j + 1) * m * k],
                                0.0,
                            );
                        }
                        acc(*a, da);
                    }
                    if self.nodes[b.0].needs_grad {
                        let mut db = vec![0.0; bt * k * n];
                        for j in 0..bt {
                            let gj = &g[j * m * n..(j + 1) * m * n];
                            let aj = &ta.data()[j * m * k..(j + 1) * m * k];
                            let dbj = &mut db[j * k * n..(j + 1) * k * n];
                            if *trans_b {
                                gemm(n, m, k, gj, true, aj, false, dbj, 0.0);
                            } else {
                                gemm(k, m, n, aj, true, gj, false, dbj, 0.0);
                            }
                        }
                        acc(*b, db);
                    }
                }
                Op::Add(a, b) => {
                    let nb = self.nodes[b.0].value.len().max(1);
                    if self.nodes[b.0].needs_grad {
                        let mut db = vec![0.0; nb];
                        for chunk in g.chunks_exact(nb) {
                            add_into(&mut db, chunk);
                        }
                        acc(*b, db);
                    }
                    acc(*a, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.iter().map(|v| -v).collect());
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let nb = tb.len().max(1);
                    if self.nodes[b.0].needs_grad {
                        let mut db = vec![0.0; nb];
                        for (gc, ac) in g.chunks_exact(nb).zip(ta.data().chunks_exact(nb)) {
                            db.iter_mut().zip(gc.iter().zip(ac)).for_each(|(d, (&gv, &av))| *d += gv * av);
                        }
                        acc(*b, db);
                    }
                    if self.nodes[a.0].needs_grad {
                        let bd = tb.data();
                        let mut da = Vec::with_capacity(g.len());
                        for gc in g.chunks_exact(nb) {
                            da.extend(gc.iter().zip(bd).map(|(&gv, &bv)| gv * bv));
                        }
                        acc(*a, da);
                    }
                }
                Op::Scale(a, c) => acc(*a, g.iter().map(|v| v * c).collect()),
                Op::Concat(parts) => {
                    let rows = node.value.rows();
                    let total = node.value.cols();
                    let mut offset = 0;
                    for p in parts {
                        let c = self.nodes[p.0].value.cols();
                        if self.nodes[p.0].needs_grad {
                            let mut d = Vec::with_capacity(rows * c);
                            for r in 0..rows {
                                d.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                            }
                            acc(*p, d);
                        }
                        offset += c;
                    }
                }
                Op::SliceRows { x, start } => {
                    let tx = &self.nodes[x.0].value;
                    let inner: usize = tx.shape()[1..].iter().product();
                    let mut d = vec![0.0; tx.len()];
                    d[start * inner..start * inner + g.len()].copy_from_slice(&g);
                    acc(*x, d);
                }
                Op::GatherRows { x, rows } => {
                    let tx = &self.nodes[x.0].value;
                    let c = tx.cols();
                    let mut d = vec![0.0; tx.len()];
                    for (j, &r) in rows.iter().enumerate() {
                        add_into(&mut d[r * c..(r + 1) * c], &g[j * c..(j + 1) * c]);
                    }
                    acc(*x, d);
                }
                Op::MeanAxis { x, axis } => {
                    let s = self.nodes[x.0].value.shape();
                    let outer: usize = s[..*axis].iter().product();
                    let len = s[*axis];
                    let inner: usize = s[axis + 1..].iter().product();
                    let inv = 1.0 / len as f32;
                    let mut d = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for j in 0..inner {
                                d[base + j] = g[o * inner + j] * inv;
                            }
                        }
                    }
                    acc(*x, d);
                }
                Op::MeanAll(x) => {
                    let n = self.nodes[x.0].value.len();
                    acc(*x, vec![g[0] / n as f32; n]);
                }
                Op::Softmax { x } => {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let mut d = vec![0.0; y.len()];
                    for ((dr, yr), gr) in d.chunks_exact_mut(c).zip(y.chunks_exact(c)).zip(g.chunks_exact(c)) {
                        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(*x, d);
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let gm = self.nodes[gamma.0].value.data();
                    let n = gm.len();
                    let rows = rstd.len();
                    let mut dgamma = vec![0.0; n];
                    let mut dbeta = vec![0.0; n];
                    let mut dx = vec![0.0; rows * n];
                    for r in 0..rows {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = 0.0f32;
                        let mut mean_dh = 0.0f32;
                        for j in 0..n {
                            let dh = gr[j] * gm[j];
                            mean_d += dh;
                            mean_dh += dh * hr[j];
                            dgamma[j] += gr[j] * hr[j];
                            dbeta[j] += gr[j];
                        }
                        mean_d /= n as f32;
                        mean_dh /= n as f32;
                        for j in 0..n {
                            let dh = gr[j] * gm[j];
                            dx[r * n + j] = rstd[r] * (dh - mean_d - hr[j] * mean_dh);
                        }
                    }
                    acc(*x, dx);
                    acc(*gamma, dgamma);
                    acc(*beta, dbeta);
                }
                Op::Relu(x) => {
                    let xd = self.nodes[x.0].value.data();
                    acc(*x, g.iter().zip(xd).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }).collect());
                }
                Op::Reshape(x) => acc(*x, g),
                Op::SwapAxes12(x) => {
                    let s = node.value.shape();
                    acc(*x, swap12(&g, s[0], s[1], s[2], s[3]));
                }
                Op::CrossEntropy { logits, targets, mask, count } => {
                    let tl = &self.nodes[logits.0].value;
                    let v = tl.cols();
                    let mut d = vec![0.0; tl.len()];
                    if *count > 0 {
                        let w = g[0] / *count as f32;
                        for (r, (&tg, &m)) in targets.iter().zip(mask).enumerate() {
                            if !m {
                                continue;
                            }
                            let dr = &mut d[r * v..(r + 1) * v];
                            dr.copy_from_slice(tl.row(r));
                            softmax_in_place(dr);
                            dr[tg] -= 1.0;
                            dr.iter_mut().for_each(|x| *x *= w);
                        }
                    }
                    acc(*logits, d);
                }
            }
        }
        Ok(out)
    }
}

fn swap12(src: &[f32], a: usize, b: usize, c: usize, d: usize) -> Vec<f32> {
    let mut out = vec![0.0; src.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let s = ((i * b + j) * c + k) * d;
                let t = ((i * c + k) * b + j) * d;
                out[t..t + d].copy_from_slice(&src[s..s + d]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3])).unwrap();
        let y = tape.softmax(x).unwrap();
        for &p in tape.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn identity_matmul() {
        let mut rng = seeded_rng(0);
        let a = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let i = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.])).unwrap();
        let av = tape.constant(a.clone()).unwrap();
        let p = tape.matmul(i, av).unwrap();
        assert_eq!(tape.value(p), &a);
    }

    #[test]
    fn uniform_prediction_cross_entropy_is_ln_v() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[2, 4])).unwrap();
        let ce = tape.cross_entropy(logits, &[1, 3], &[true, true]).unwrap();
        assert!((tape.value(ce).item() - 4f32.ln()).abs() < 1e-6);
        assert!((4f32.ln() - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(3.0)).unwrap();
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(ParamKey(0), &Tensor::filled(&[2, 2], 0.5)).unwrap();
        let c = tape.constant(Tensor::filled(&[2, 2], 1.0)).unwrap();
        let z = tape.scale(w, 0.0).unwrap();
        let s = tape.add(c, z).unwrap();
        let loss = tape.mean_all(s).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.param(ParamKey(0)).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::scalar(1.0)).unwrap();
        let y = tape.scale(x, 2.0).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.backward(y).unwrap_err(), NumericsError::BackwardTwice);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2])).unwrap();
        assert_eq!(tape.backward(x).unwrap_err(), NumericsError::NotScalar(vec![2]));
    }

    #[test]
    fn shape_mismatch_is_structural() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(NumericsError::Shape { .. })));
        let c = tape.constant(Tensor::zeros(&[4])).unwrap();
        assert!(matches!(tape.add(a, c), Err(NumericsError::Shape { .. })));
    }

    #[test]
    fn non_finite_output_is_detected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::filled(&[2], 3e38)).unwrap();
        assert_eq!(tape.scale(a, 10.0).unwrap_err(), NumericsError::NonFinite("scale"));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut rng = seeded_rng(2);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[2, 4, 4], 1.0, &mut rng)).unwrap();
        let y = tape.causal_softmax(x).unwrap();
        let v = tape.value(y);
        for r in 0..8 {
            let row = v.row(r);
            let i = r % 4;
            assert!(row[i + 1..].iter().all(|&p| p == 0.0));
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_standardizes() {
        let mut rng = seeded_rng(3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[5, 16], 3.0, &mut rng)).unwrap();
        let g = tape.constant(Tensor::filled(&[16], 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros(&[16])).unwrap();
        let y = tape.layer_norm(x, g, b).unwrap();
        for r in 0..5 {
            let row = tape.value(y).row(r);
            let mean = row.iter().sum::<f32>() / 16.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 16.0;
            assert!(mean.abs() < 1e-4);
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn swap_axes_round_trip() {
        let mut rng = seeded_rng(4);
        let x0 = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone()).unwrap();
        let y = tape.swap_axes12(x).unwrap();
        assert_eq!(tape.shape(y), [2, 4, 3, 5]);
        let z = tape.swap_axes12(y).unwrap();
        assert_eq!(tape.value(z), &x0);
    }

    #[test]
    fn masked_cross_entropy_ignores_unmasked_rows() {
        let mut tape = Tape::new();
        let logits = tape.input(t(&[2, 3], &[1.0, 2.0, 3.0, 100.0, -50.0, 0.0])).unwrap();
        let ce = tape.cross_entropy(logits, &[2, 1], &[true, false]).unwrap();
        let g = tape.backward(ce).unwrap();
        assert!(g.wrt(logits).unwrap().row(1).iter().all(|&v| v == 0.0));
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one(seed in 0u64..1000, rows in 1usize..6, cols in 1usize..20, scale in 0.1f32..30.0) {
            let mut rng = seeded_rng(seed);
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::randn(&[rows, cols], scale, &mut rng)).unwrap();
            let y = tape.softmax(x).unwrap();
            for r in 0..rows {
                let s: f32 = tape.value(y).row(r).iter().sum();
                proptest::prop_assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }
}
