//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the tape, so the tape is always in
//! topological order; [`Graph::backward`] walks it once in reverse.

use crate::error::{Error, Result};
use crate::tensor::{gemm_into, Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf { param: Option<usize> },
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    MulConst { a: Var, factor: Vec<T> },
    Scale { a: Var, s: T },
    Gelu { a: Var },
    Relu { a: Var },
    Tanh { a: Var },
    SoftmaxRows { a: Var },
    LayerNorm { a: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    GatherRows { table: Var, ids: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, probs: Vec<T> },
    Sum { a: Var },
    MaskedSse { a: Var, target: Vec<T>, mask: Option<Vec<T>>, scale: T },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    SoftCrossEntropy { logits: Var, target: Vec<T>, probs: Vec<T>, temperature: T },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recorded computation for a single forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(usize, Var)>,
    visited: usize,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// `(param id, gradient)` for every parameter leaf that received a gradient.
    pub fn params(&self) -> impl Iterator<Item = (usize, &[T])> {
        self.params.iter().filter_map(|&(id, v)| self.get(v).map(|g| (id, g)))
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let c = *shape.last().unwrap();
            (shape.iter().product::<usize>() / c.max(1), c)
        }
    }
}

fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(0.044715);
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x);
    (y, dy)
}

/// Row-wise softmax of a `rows×cols` buffer, stabilized by the row max.
pub(crate) fn softmax_rows_into<T: Scalar>(src: &[T], cols: usize, dst: &mut [T]) {
    for (row, out) in src.chunks_exact(cols).zip(dst.chunks_exact_mut(cols)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (o, &x) in out.iter_mut().zip(row) {
            *o = (x - max).exp();
            sum = sum + *o;
        }
        for o in out.iter_mut() {
            *o = *o / sum;
        }
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = match &op {
            Op::Leaf { .. } => false,
            _ => self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { shape, value, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match *op {
            Op::Leaf { .. } => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![a, b],
            Op::AddBias { a, bias } => vec![a, bias],
            Op::LayerNorm { a, gain, bias, .. } => vec![a, gain, bias],
            Op::Attention { q, k, v, .. } => vec![q, k, v],
            Op::GatherRows { table, .. } => vec![table],
            Op::CrossEntropy { logits, .. } | Op::SoftCrossEntropy { logits, .. } => vec![logits],
            Op::MulConst { a, .. }
            | Op::Scale { a, .. }
            | Op::Gelu { a }
            | Op::Relu { a }
            | Op::Tanh { a }
            | Op::SoftmaxRows { a }
            | Op::Sum { a }
            | Op::MaskedSse { a, .. } => vec![a],
        }
    }

    fn leaf_node(&mut self, t: Tensor<T>, requires_grad: bool, param: Option<usize>) -> Result<Var> {
        let shape = t.shape().to_vec();
        let v = self.push("leaf", shape, t.into_data(), Op::Leaf { param })?;
        self.nodes[v.0].requires_grad = requires_grad;
        Ok(v)
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf_node(t, false, None)
    }

    /// Input whose gradient is tracked when the tensor is flagged `requires_grad`.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        let rg = t.requires_grad();
        self.leaf_node(t, rg, None)
    }

    /// Trainable parameter identified by `id` in [`Gradients::params`].
    pub fn param(&mut self, id: usize, t: &Tensor<T>) -> Result<Var> {
        self.leaf_node(t.clone(), true, Some(id))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Attention probabilities (`batch × heads × seq × seq`) cached by [`Graph::attention`].
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_into(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", format!("{:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        self.push("add", self.shape(a).to_vec(), out, Op::Add { a, b })
    }

    /// `a` (`m×n`) plus a length-`n` bias broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = dims2(self.shape(a));
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", self.shape(a), self.shape(bias))));
        }
        let bv = self.value(bias);
        let out = self.value(a).chunks_exact(n).flat_map(|r| r.iter().zip(bv).map(|(&x, &b)| x + b)).collect();
        self.push("add_bias", self.shape(a).to_vec(), out, Op::AddBias { a, bias })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", format!("{:?} * {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        self.push("mul", self.shape(a).to_vec(), out, Op::Mul { a, b })
    }

    /// Elementwise product with an untracked factor (dropout and width masks).
    pub fn mul_const(&mut self, a: Var, factor: Vec<T>) -> Result<Var> {
        if factor.len() != self.value(a).len() {
            return Err(Error::shape("mul_const", format!("{} vs {}", factor.len(), self.value(a).len())));
        }
        let out = self.value(a).iter().zip(&factor).map(|(&x, &f)| x * f).collect();
        self.push("mul_const", self.shape(a).to_vec(), out, Op::MulConst { a, factor })
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        self.push("scale", self.shape(a).to_vec(), out, Op::Scale { a, s })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| gelu(x).0).collect();
        self.push("gelu", self.shape(a).to_vec(), out, Op::Gelu { a })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x.max(T::zero())).collect();
        self.push("relu", self.shape(a).to_vec(), out, Op::Relu { a })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x.tanh()).collect();
        self.push("tanh", self.shape(a).to_vec(), out, Op::Tanh { a })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, n) = dims2(self.shape(a));
        let mut out = vec![T::zero(); self.value(a).len()];
        softmax_rows_into(self.value(a), n, &mut out);
        self.push("softmax_rows", self.shape(a).to_vec(), out, Op::SoftmaxRows { a })
    }

    /// Per-row normalization over the last axis followed by the affine `gain`/`bias`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, d) = dims2(self.shape(a));
        if d < 2 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("{:?} with gain {:?}, bias {:?}", self.shape(a), self.shape(gain), self.shape(bias)),
            ));
        }
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let dn = T::from_usize(d).unwrap();
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for (r, row) in self.value(a).chunks_exact(d).enumerate() {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        self.push("layer_norm", self.shape(a).to_vec(), out, Op::LayerNorm { a, gain, bias, xhat, rstd })
    }

    /// Rows of `table` selected by `ids` (embedding lookup, row gathering).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = dims2(self.shape(table));
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!("row index {bad} out of range for {rows} rows")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        self.push("gather_rows", vec![ids.len(), d], out, Op::GatherRows { table, ids: ids.to_vec() })
    }

    /// Multi-head scaled dot-product attention over `batch` stacked sequences of
    /// length `seq`. `q`, `k`, `v` are `(batch·seq)×d`; the output has the same
    /// shape, with heads concatenated along the columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        if shape.len() != 2 || self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(Error::shape("attention", "q, k, v must share one rank-2 shape"));
        }
        let d = shape[1];
        if shape[0] != batch * seq || heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::shape("attention", format!("{shape:?} for batch {batch}, seq {seq}, heads {heads}")));
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); batch * seq * d];
        let mut scores = vec![T::zero(); seq * seq];
        let ds = d as isize;
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                // scores = Q_bh · K_bhᵀ · scale
                T::gemm(seq, dh, seq, scale, &qv[off..], ds, 1, &kv[off..], 1, ds, T::zero(), &mut scores, seq as isize, 1);
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                softmax_rows_into(&scores, seq, p);
                T::gemm(seq, seq, dh, T::one(), p, seq as isize, 1, &vv[off..], ds, 1, T::zero(), &mut out[off..], ds, 1);
            }
        }
        self.push("attention", shape, out, Op::Attention { q, k, v, batch, seq, heads, probs })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum();
        self.push("sum", vec![], vec![s], Op::Sum { a })
    }

    /// `scale · Σ (mask ⊙ a − target)²`, with `mask` treated as a constant.
    pub fn masked_sse(&mut self, a: Var, target: Vec<T>, mask: Option<Vec<T>>, scale: T) -> Result<Var> {
        let av = self.value(a);
        if target.len() != av.len() || mask.as_ref().is_some_and(|m| m.len() != av.len()) {
            return Err(Error::shape("masked_sse", format!("{} values vs {} targets", av.len(), target.len())));
        }
        let s: T = match &mask {
            Some(m) => av.iter().zip(&target).zip(m).map(|((&x, &t), &m)| (m * x - t) * (m * x - t)).sum(),
            None => av.iter().zip(&target).map(|(&x, &t)| (x - t) * (x - t)).sum(),
        };
        self.push("masked_sse", vec![], vec![s * scale], Op::MaskedSse { a, target, mask, scale })
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, a: Var, target: Vec<T>) -> Result<Var> {
        let n = T::from_usize(target.len().max(1)).unwrap();
        self.masked_sse(a, target, None, T::one() / n)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, c) = dims2(self.shape(logits));
        if labels.len() != rows || labels.iter().any(|&l| l >= c) {
            return Err(Error::shape("cross_entropy", format!("{rows}×{c} logits with {} labels", labels.len())));
        }
        let mut probs = vec![T::zero(); rows * c];
        softmax_rows_into(self.value(logits), c, &mut probs);
        let n = T::from_usize(rows).unwrap();
        let loss = labels.iter().enumerate().map(|(r, &l)| -probs[r * c + l].ln()).sum::<T>() / n;
        self.push("cross_entropy", vec![], vec![loss], Op::CrossEntropy { logits, labels: labels.to_vec(), probs })
    }

    /// Mean over rows of the cross-entropy between a constant target distribution
    /// and `softmax(logits / temperature)`.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: Vec<T>, temperature: T) -> Result<Var> {
        let (rows, c) = dims2(self.shape(logits));
        if target.len() != rows * c {
            return Err(Error::shape("soft_cross_entropy", format!("{rows}×{c} logits, {} targets", target.len())));
        }
        let scaled: Vec<T> = self.value(logits).iter().map(|&z| z / temperature).collect();
        let mut probs = vec![T::zero(); rows * c];
        softmax_rows_into(&scaled, c, &mut probs);
        let mut loss = T::zero();
        for r in 0..rows {
            let row = &scaled[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            for j in 0..c {
                loss = loss - target[r * c + j] * (row[j] - lse);
            }
        }
        let n = T::from_usize(rows).unwrap();
        self.push(
            "soft_cross_entropy",
            vec![],
            vec![loss / n],
            Op::SoftCrossEntropy { logits, target, probs, temperature },
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            visited += 1;
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Leaf { param: Some(id) } => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params, visited })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf { .. } => {}
            &Op::MatMul { a, b } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.wants(a) {
                    let ga = accumulate(&mut grads[a.0], m * k);
                    gemm_into(m, n, k, g, false, self.value(b), true, ga, true);
                }
                if self.wants(b) {
                    let gb = accumulate(&mut grads[b.0], k * n);
                    gemm_into(k, m, n, self.value(a), true, g, false, gb, true);
                }
            }
            &Op::Add { a, b } => {
                for x in [a, b] {
                    if self.wants(x) {
                        let gx = accumulate(&mut grads[x.0], g.len());
                        gx.iter_mut().zip(g).for_each(|(o, &d)| *o = *o + d);
                    }
                }
            }
            &Op::AddBias { a, bias } => {
                if self.wants(a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(o, &d)| *o = *o + d);
                }
                if self.wants(bias) {
                    let n = self.shape(bias)[0];
                    let gb = accumulate(&mut grads[bias.0], n);
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(o, &d)| *o = *o + d);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if self.wants(a) {
                    let bv = self.value(b);
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * bv[i];
                    }
                }
                if self.wants(b) {
                    let av = self.value(a);
                    let gb = accumulate(&mut grads[b.0], g.len());
                    for i in 0..g.len() {
                        gb[i] = gb[i] + g[i] * av[i];
                    }
                }
            }
            Op::MulConst { a, factor } => {
                if self.wants(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * factor[i];
                    }
                }
            }
            &Op::Scale { a, s } => {
                if self.wants(a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(o, &d)| *o = *o + d * s);
                }
            }
            &Op::Gelu { a } => {
                if self.wants(a) {
                    let av = self.value(a);
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * gelu(av[i]).1;
                    }
                }
            }
            &Op::Relu { a } => {
                if self.wants(a) {
                    let av = self.value(a);
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        if av[i] > T::zero() {
                            ga[i] = ga[i] + g[i];
                        }
                    }
                }
            }
            &Op::Tanh { a } => {
                if self.wants(a) {
                    let y = &node.value;
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        ga[i] = ga[i] + g[i] * (T::one() - y[i] * y[i]);
                    }
                }
            }
            &Op::SoftmaxRows { a } => {
                if self.wants(a) {
                    let (_, n) = dims2(&node.shape);
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for ((yr, gr), out) in node.value.chunks_exact(n).zip(g.chunks_exact(n)).zip(ga.chunks_exact_mut(n)) {
                        let dot: T = yr.iter().zip(gr).map(|(&y, &d)| y * d).sum();
                        for j in 0..n {
                            out[j] = out[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { a, gain, bias, xhat, rstd } => {
                let d = self.shape(*gain)[0];
                let gv = self.value(*gain);
                if self.wants(*a) {
                    let dn = T::from_usize(d).unwrap();
                    let ga = accumulate(&mut grads[a.0], g.len());
                    let mut dxhat = vec![T::zero(); d];
                    for (r, gr) in g.chunks_exact(d).enumerate() {
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() / dn;
                        let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for j in 0..d {
                            let o = &mut ga[r * d + j];
                            *o = *o + rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
                if self.wants(*gain) {
                    let gg = accumulate(&mut grads[gain.0], d);
                    for (gr, xh) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            gg[j] = gg[j] + gr[j] * xh[j];
                        }
                    }
                }
                if self.wants(*bias) {
                    let gb = accumulate(&mut grads[bias.0], d);
                    for gr in g.chunks_exact(d) {
                        gb.iter_mut().zip(gr).for_each(|(o, &x)| *o = *o + x);
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                if self.wants(*table) {
                    let d = node.shape[1];
                    let len = self.value(*table).len();
                    let gt = accumulate(&mut grads[table.0], len);
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[i * d + j] = gt[i * d + j] + g[r * d + j];
                        }
                    }
                }
            }
            Op::Attention { q, k, v, batch, seq, heads, probs } => {
                self.attention_backward(*q, *k, *v, *batch, *seq, *heads, probs, g, grads);
            }
            &Op::Sum { a } => {
                if self.wants(a) {
                    let n = self.value(a).len();
                    let ga = accumulate(&mut grads[a.0], n);
                    ga.iter_mut().for_each(|o| *o = *o + g[0]);
                }
            }
            Op::MaskedSse { a, target, mask, scale } => {
                if self.wants(*a) {
                    let av = self.value(*a);
                    let two = T::from_f64_lossy(2.0) * *scale * g[0];
                    let ga = accumulate(&mut grads[a.0], av.len());
                    for i in 0..av.len() {
                        let m = mask.as_ref().map_or(T::one(), |m| m[i]);
                        ga[i] = ga[i] + two * m * (m * av[i] - target[i]);
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.wants(*logits) {
                    let c = probs.len() / labels.len();
                    let n = T::from_usize(labels.len()).unwrap();
                    let gl = accumulate(&mut grads[logits.0], probs.len());
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..c {
                            let y = if j == l { T::one() } else { T::zero() };
                            gl[r * c + j] = gl[r * c + j] + g[0] * (probs[r * c + j] - y) / n;
                        }
                    }
                }
            }
            Op::SoftCrossEntropy { logits, target, probs, temperature } => {
                if self.wants(*logits) {
                    let (rows, _) = dims2(self.shape(*logits));
                    let denom = T::from_usize(rows).unwrap() * *temperature;
                    let gl = accumulate(&mut grads[logits.0], probs.len());
                    for i in 0..probs.len() {
                        gl[i] = gl[i] + g[0] * (probs[i] - target[i]) / denom;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let d = self.shape(q)[1];
        let dh = d / heads;
        let ds = d as isize;
        let ss = seq as isize;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let n = batch * seq * d;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut gq = vec![T::zero(); n];
        let mut gk = vec![T::zero(); n];
        let mut gv = vec![T::zero(); n];
        let mut dp = vec![T::zero(); seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * seq * d + h * dh;
                let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                // dP = dO · Vᵀ
                T::gemm(seq, dh, seq, T::one(), &g[off..], ds, 1, &vv[off..], 1, ds, T::zero(), &mut dp, ss, 1);
                // dV = Pᵀ · dO
                T::gemm(seq, seq, dh, T::one(), p, 1, ss, &g[off..], ds, 1, T::one(), &mut gv[off..], ds, 1);
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), then the 1/√dh factor.
                for r in 0..seq {
                    let pr = &p[r * seq..(r + 1) * seq];
                    let dr = &mut dp[r * seq..(r + 1) * seq];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..seq {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                // dQ = dS · K, dK = dSᵀ · Q
                T::gemm(seq, seq, dh, T::one(), &dp, ss, 1, &kv[off..], ds, 1, T::one(), &mut gq[off..], ds, 1);
                T::gemm(seq, seq, dh, T::one(), &dp, 1, ss, &qv[off..], ds, 1, T::one(), &mut gk[off..], ds, 1);
            }
        }
        for (x, gx) in [(q, gq), (k, gk), (v, gv)] {
            if self.wants(x) {
                let slot = accumulate(&mut grads[x.0], n);
                slot.iter_mut().zip(&gx).for_each(|(o, &d)| *o = *o + d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central finite differences of `f` at `x` against the recorded gradient.
    /// Returns the norm-wise relative error.
    fn fd_check<T: Scalar>(x: &Tensor<T>, h: f64, f: impl Fn(&mut Graph<T>, Var) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let xv = g.input(x.clone().with_grad(true)).unwrap();
        let loss = f(&mut g, xv).unwrap();
        let grads = g.backward(loss).unwrap();
        let analytic: Vec<f64> = grads.get(xv).unwrap().iter().map(|v| v.to_f64().unwrap()).collect();
        let eval = |t: Tensor<T>| {
            let mut g = Graph::new();
            let v = g.input(t).unwrap();
            let l = f(&mut g, v).unwrap();
            g.scalar(l).to_f64().unwrap()
        };
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..x.len() {
            let mut plus = x.clone();
            let mut minus = x.clone();
            let hh = T::from_f64_lossy(h);
            plus.data_mut()[i] = plus.data()[i] + hh;
            minus.data_mut()[i] = minus.data()[i] - hh;
            let fd = (eval(plus) - eval(minus)) / (2.0 * h);
            num += (fd - analytic[i]).powi(2);
            den += fd.powi(2).max(analytic[i].powi(2));
        }
        (num / den.max(1e-30)).sqrt()
    }

    fn weights(g: &mut Graph<f64>, shape: &[usize], seed: u64) -> Var {
        g.constant(random(shape, seed)).unwrap()
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::full(&[2, 4], 3.0)).unwrap();
        let s = g.softmax_rows(a).unwrap();
        assert!(g.value(s).iter().all(|&p| (p - 0.25).abs() < 1e-7));
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let x = random(&[3, 5], 1).cast::<f32>();
        let shifted = Tensor::new(vec![3, 5], x.data().iter().map(|v| v + 7.5).collect()).unwrap();
        let mut g = Graph::<f32>::new();
        let (a, b) = (g.constant(x).unwrap(), g.constant(shifted).unwrap());
        let (sa, sb) = (g.softmax_rows(a).unwrap(), g.softmax_rows(b).unwrap());
        for (p, q) in g.value(sa).iter().zip(g.value(sb)) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::new(vec![1, 2], vec![0.0, 3f32.ln()]).unwrap()).unwrap();
        let s = g.softmax_rows(a).unwrap();
        assert!((g.value(s)[0] - 0.25).abs() < 1e-6);
        assert!((g.value(s)[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_constant_vector_is_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1, 6], 4.25)).unwrap();
        let gain = g.constant(Tensor::full(&[6], 1.0)).unwrap();
        let bias = g.constant(Tensor::zeros(&[6])).unwrap();
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_output_moments_follow_affine() {
        let d = 64;
        let mut g = Graph::<f64>::new();
        let x = weights(&mut g, &[1, d], 11);
        let gain = g.constant(Tensor::full(&[d], 1.7)).unwrap();
        let bias = g.constant(Tensor::full(&[d], -0.3)).unwrap();
        let y = g.layer_norm(x, gain, bias).unwrap();
        let v = g.value(y);
        let mean = v.iter().sum::<f64>() / d as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
        assert!((mean + 0.3).abs() < 1e-9);
        assert!((var - 1.7 * 1.7).abs() < 1e-3);
    }

    #[test]
    fn layer_norm_rejects_scalar_width() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[3, 1])).unwrap();
        let p = g.constant(Tensor::zeros(&[1])).unwrap();
        assert!(g.layer_norm(x, p, p).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full(&[2, 3], 0.5).with_grad(true)).unwrap();
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_mse_to_zero_is_two_x_over_n() {
        let x = random(&[2, 5], 3);
        let mut g = Graph::<f64>::new();
        let xv = g.input(x.clone().with_grad(true)).unwrap();
        let l = g.mse(xv, vec![0.0; 10]).unwrap();
        let grads = g.backward(l).unwrap();
        for (gx, xx) in grads.get(xv).unwrap().iter().zip(x.data()) {
            assert!((gx - 2.0 * xx / 10.0).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(&[2, 2]).with_grad(true)).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_input_accumulates_and_each_node_runs_once() {
        // loss = sum(x * x + x): dL/dx = 2x + 1
        let x = random(&[4], 5);
        let mut g = Graph::<f64>::new();
        let xv = g.input(x.clone().with_grad(true)).unwrap();
        let sq = g.mul(xv, xv).unwrap();
        let s = g.add(sq, xv).unwrap();
        let l = g.sum(s).unwrap();
        let grads = g.backward(l).unwrap();
        for (gx, xx) in grads.get(xv).unwrap().iter().zip(x.data()) {
            assert!((gx - (2.0 * xx + 1.0)).abs() < 1e-12);
        }
        assert_eq!(grads.visited(), g.len());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[2], f32::MAX)).unwrap();
        assert!(matches!(g.scale(x, 10.0), Err(Error::NonFinite { op: "scale" })));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(&[3, 4], 7).cast::<f32>();
        let b = random(&[4, 2], 8).cast::<f32>();
        let mut g = Graph::<f32>::new();
        let (av, bv) = (g.constant(a.clone()).unwrap(), g.constant(b.clone()).unwrap());
        let c = g.matmul(av, bv).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0f32;
                for p in 0..4 {
                    s += a.data()[i * 4 + p] * b.data()[p * 2 + j];
                }
                assert!((g.value(c)[i * 2 + j] - s).abs() < 1e-6);
            }
        }
    }

    const TOL64: f64 = 1e-6;

    #[test]
    fn fd_matmul_both_sides() {
        let w = random(&[4, 3], 21);
        let err = fd_check(&random(&[2, 4], 20), 1e-6, |g, x| {
            let wv = g.input(w.clone().with_grad(true))?;
            let y = g.matmul(x, wv)?;
            let t = g.tanh(y)?;
            g.sum(t)
        });
        assert!(err < TOL64, "{err}");
        let a = random(&[2, 4], 22);
        let err = fd_check(&w, 1e-6, |g, wv| {
            let av = g.constant(a.clone())?;
            let y = g.matmul(av, wv)?;
            let t = g.tanh(y)?;
            g.sum(t)
        });
        assert!(err < TOL64, "{err}");
    }

    #[test]
    fn fd_elementwise_ops() {
        let other = random(&[3, 4], 31);
        let bias = random(&[4], 32);
        let err = fd_check(&random(&[3, 4], 30), 1e-6, |g, x| {
            let o = g.constant(other.clone())?;
            let b = g.constant(bias.clone())?;
            let y = g.mul(x, o)?;
            let y = g.add(y, x)?;
            let y = g.add_bias(y, b)?;
            let y = g.scale(y, 1.3)?;
            let y = g.gelu(y)?;
            let y = g.mul_const(y, vec![0.5; 12])?;
            g.mse(y, vec![0.1; 12])
        });
        assert!(err < TOL64, "{err}");
        let err = fd_check(&bias, 1e-6, |g, b| {
            let x = g.constant(other.clone())?;
            let y = g.add_bias(x, b)?;
            let y = g.relu(y)?;
            g.mse(y, vec![0.2; 12])
        });
        assert!(err < TOL64, "{err}");
    }

    #[test]
    fn fd_softmax_and_layer_norm() {
        let target = random(&[3, 5], 41).data().to_vec();
        let err = fd_check(&random(&[3, 5], 40), 1e-6, |g, x| {
            let s = g.softmax_rows(x)?;
            g.mse(s, target.clone())
        });
        assert!(err < TOL64, "{err}");
        let gain = random(&[5], 42);
        let bias = random(&[5], 43);
        let err = fd_check(&random(&[3, 5], 44), 1e-6, |g, x| {
            let gv = g.constant(gain.clone())?;
            let bv = g.constant(bias.clone())?;
            let y = g.layer_norm(x, gv, bv)?;
            g.mse(y, target.clone())
        });
        assert!(err < TOL64, "{err}");
        let x = random(&[3, 5], 45);
        let err = fd_check(&gain, 1e-6, |g, gv| {
            let xv = g.constant(x.clone())?;
            let bv = g.constant(bias.clone())?;
            let y = g.layer_norm(xv, gv, bv)?;
            g.mse(y, target.clone())
        });
        assert!(err < TOL64, "{err}");
    }

    #[test]
    fn fd_layer_norm_f32() {
        let gain = random(&[6], 46).cast::<f32>();
        let bias = random(&[6], 47).cast::<f32>();
        let target: Vec<f32> = random(&[2, 6], 48).cast::<f32>().into_data();
        let err = fd_check(&random(&[2, 6], 49).cast::<f32>(), 1e-3, |g, x| {
            let gv = g.constant(gain.clone())?;
            let bv = g.constant(bias.clone())?;
            let y = g.layer_norm(x, gv, bv)?;
            g.mse(y, target.clone())
        });
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn fd_gather_and_losses() {
        let ids = [2usize, 0, 2, 1];
        let target = random(&[4, 3], 51);
        let probs: Vec<f64> = {
            let mut p = vec![0.0; 12];
            softmax_rows_into(target.data(), 3, &mut p);
            p
        };
        let err = fd_check(&random(&[3, 3], 50), 1e-6, |g, table| {
            let rows = g.gather_rows(table, &ids)?;
            let a = g.cross_entropy(rows, &[0, 1, 2, 0])?;
            let b = g.soft_cross_entropy(rows, probs.clone(), 2.0)?;
            let s = g.add(a, b)?;
            let c = g.masked_sse(rows, target.data().to_vec(), Some(vec![1.0, 0.0, 1.0].repeat(4)), 0.25)?;
            g.add(s, c)
        });
        assert!(err < TOL64, "{err}");
    }

    #[test]
    fn fd_attention_all_inputs() {
        let (batch, seq, heads, d) = (2, 3, 2, 4);
        let shape = [batch * seq, d];
        let target = random(&shape, 60).data().to_vec();
        let others = [random(&shape, 61), random(&shape, 62)];
        for which in 0..3 {
            let err = fd_check(&random(&shape, 63 + which as u64), 1e-6, |g, x| {
                let o0 = g.constant(others[0].clone())?;
                let o1 = g.constant(others[1].clone())?;
                let (q, k, v) = match which {
                    0 => (x, o0, o1),
                    1 => (o0, x, o1),
                    _ => (o0, o1, x),
                };
                let y = g.attention(q, k, v, batch, seq, heads)?;
                g.mse(y, target.clone())
            });
            assert!(err < TOL64, "input {which}: {err}");
        }
    }

    #[test]
    fn attention_matches_unfused_reference() {
        let (batch, seq, heads, d) = (2, 4, 2, 6);
        let dh = d / heads;
        let q = random(&[batch * seq, d], 70);
        let k = random(&[batch * seq, d], 71);
        let v = random(&[batch * seq, d], 72);
        let mut g = Graph::<f64>::new();
        let (qv, kv, vv) = (g.constant(q.clone()).unwrap(), g.constant(k.clone()).unwrap(), g.constant(v.clone()).unwrap());
        let out = g.attention(qv, kv, vv, batch, seq, heads).unwrap();
        let probs = g.attention_probs(out).unwrap();
        let at = |t: &Tensor<f64>, b: usize, i: usize, h: usize, j: usize| t.data()[(b * seq + i) * d + h * dh + j];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..seq {
                    let scores: Vec<f64> = (0..seq)
                        .map(|s| (0..dh).map(|j| at(&q, b, i, h, j) * at(&k, b, s, h, j)).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let max = scores.iter().copied().fold(f64::MIN, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                    let p: Vec<f64> = scores.iter().map(|s| (s - max).exp() / z).collect();
                    for s in 0..seq {
                        assert!((probs[((b * heads + h) * seq + i) * seq + s] - p[s]).abs() < 1e-12);
                    }
                    for j in 0..dh {
                        let o: f64 = (0..seq).map(|s| p[s] * at(&v, b, s, h, j)).sum();
                        assert!((g.value(out)[(b * seq + i) * d + h * dh + j] - o).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn param_gradients_are_reported_by_id() {
        let w = random(&[2, 2], 80);
        let mut g = Graph::<f64>::new();
        let wv = g.param(7, &w).unwrap();
        let s = g.sum(wv).unwrap();
        let grads = g.backward(s).unwrap();
        let ps: Vec<_> = grads.params().collect();
        assert_eq!(ps.len(), 1);
        assert_eq!(ps[0].0, 7);
    }

    proptest::proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f32..30.0, 1..40), cols in 1usize..8) {
            let rows = vals.len() / cols;
            proptest::prop_assume!(rows > 0);
            let data = vals[..rows * cols].to_vec();
            let mut g = Graph::<f32>::new();
            let a = g.constant(Tensor::new(vec![rows, cols], data).unwrap()).unwrap();
            let s = g.softmax_rows(a).unwrap();
            for row in g.value(s).chunks(cols) {
                let total: f32 = row.iter().sum();
                proptest::prop_assert!((total - 1.0).abs() <= 1e-5);
                proptest::prop_assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
    }
}
