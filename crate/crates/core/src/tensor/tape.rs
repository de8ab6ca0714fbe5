use std::rc::Rc;

use super::kernels;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One independent sequence inside a batched attention call.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSpan {
    /// First row of the sequence in the batched matrix.
    pub start: usize,
    pub len: usize,
    /// `allowed[q * len + k]`: may query `q` see key `k`.
    pub allowed: Vec<bool>,
}

/// Row layout for [`Tape::attention`].
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    pub spans: Vec<SequenceSpan>,
    pub n_heads: usize,
    pub head_dim: usize,
}

impl AttentionLayout {
    fn rows(&self) -> usize {
        self.spans.iter().map(|s| s.start + s.len).max().unwrap_or(0)
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Softmax(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Rope {
        x: Var,
        positions: Rc<[usize]>,
        n_heads: usize,
        head_dim: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Rc<AttentionLayout>,
        probs: Vec<T>,
    },
    GatherRows {
        x: Var,
        rows: Rc<[usize]>,
    },
    MergeRows {
        parts: Vec<(Var, Rc<[usize]>)>,
    },
    ConcatCols(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    MeanSquaredError(Var, Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Wengert-style tape. Nodes are appended in execution order, so every
/// node's inputs precede it and the reverse sweep is a plain reverse scan.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) into `tensor.grad`.
    pub fn accumulate_into(&self, v: Var, tensor: &mut Tensor<T>) {
        if let Some(g) = self.get(v) {
            tensor.accumulate_grad(g);
        }
    }
}

fn slot<'a, T: Real>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> &'a mut [T] {
    let len = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn cols(shape: &[usize]) -> usize {
    *shape.last().expect("non-empty shape")
}

fn rows(shape: &[usize]) -> usize {
    shape.iter().product::<usize>() / cols(shape)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape holds valid tensors")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Records a copy of `t` as a leaf. Gradients are tracked iff
    /// `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| kernels::silu(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Silu(a), rg)
    }

    /// Softmax over the last axis. `-inf` entries become exactly zero; a
    /// slice with no finite entry becomes all zeros.
    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let out = kernels::softmax_rows(self.value(a), cols(self.shape(a)));
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Softmax(a), rg)
    }

    /// RMS normalization over the last axis followed by an elementwise gain.
    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        if self.shape(gain) != [cols(self.shape(x))] {
            return Err(Error::ShapeMismatch {
                op: "rmsnorm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let (out, inv_rms) = kernels::rmsnorm(self.value(x), self.value(gain));
        let rg = self.rg(&[x, gain]);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::RmsNorm { x, gain, inv_rms },
            rg,
        ))
    }

    /// Rotary position encoding on interleaved pairs of each head.
    pub fn rope(
        &mut self,
        x: Var,
        positions: Rc<[usize]>,
        n_heads: usize,
        head_dim: usize,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != n_heads * head_dim || shape[0] != positions.len() {
            return Err(Error::ShapeMismatch {
                op: "rope",
                lhs: shape,
                rhs: vec![positions.len(), n_heads * head_dim],
            });
        }
        if !head_dim.is_multiple_of(2) {
            return Err(Error::invalid("rope", "head_dim must be even"));
        }
        let mut out = vec![T::zero(); self.value(x).len()];
        kernels::rope_apply(self.value(x), &positions, n_heads, head_dim, 1.0, &mut out);
        let rg = self.rg(&[x]);
        Ok(self.push(
            shape,
            out,
            Op::Rope {
                x,
                positions,
                n_heads,
                head_dim,
            },
            rg,
        ))
    }

    /// Masked multi-head scaled dot-product attention over independent
    /// sequences. `q`, `k`, `v` are `[rows × n_heads*head_dim]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: Rc<AttentionLayout>,
    ) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let shape = self.shape(q).to_vec();
        let width = layout.n_heads * layout.head_dim;
        if shape.len() != 2 || shape[1] != width || layout.rows() > shape[0] {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: shape,
                rhs: vec![layout.rows(), width],
            });
        }
        for s in &layout.spans {
            if s.allowed.len() != s.len * s.len {
                return Err(Error::invalid("attention", "mask size does not match span"));
            }
        }
        let hd = layout.head_dim;
        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![T::zero(); qv.len()];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for span in &layout.spans {
            let n = span.len;
            for h in 0..layout.n_heads {
                let off = h * hd;
                for i in 0..n {
                    let qi = &qv[(span.start + i) * width + off..][..hd];
                    scores.clear();
                    for j in 0..n {
                        if span.allowed[i * n + j] {
                            let kj = &kv[(span.start + j) * width + off..][..hd];
                            let dot: T = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum();
                            scores.push(dot * scale);
                        } else {
                            scores.push(T::neg_infinity());
                        }
                    }
                    let base = probs.len();
                    probs.resize(base + n, T::zero());
                    kernels::softmax_into(&scores, &mut probs[base..]);
                    let oi = (span.start + i) * width + off;
                    for j in 0..n {
                        let p = probs[base + j];
                        if p == T::zero() {
                            continue;
                        }
                        let vj = &vv[(span.start + j) * width + off..][..hd];
                        for (o, &x) in out[oi..oi + hd].iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            shape,
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            rg,
        ))
    }

    /// Selects rows of a 2-D tensor.
    pub fn gather_rows(&mut self, x: Var, rows_idx: Rc<[usize]>) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || rows_idx.iter().any(|&r| r >= shape[0]) || rows_idx.is_empty() {
            return Err(Error::invalid("gather_rows", format!("bad rows for {shape:?}")));
        }
        let c = shape[1];
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows_idx.len() * c);
        for &r in rows_idx.iter() {
            out.extend_from_slice(&src[r * c..(r + 1) * c]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![rows_idx.len(), c],
            out,
            Op::GatherRows { x, rows: rows_idx },
            rg,
        ))
    }

    /// Scatters each part's rows into the given output rows. Together the
    /// parts must cover `0..n_rows` exactly once.
    pub fn merge_rows(&mut self, parts: Vec<(Var, Rc<[usize]>)>, n_rows: usize) -> Result<Var> {
        let c = match parts.first() {
            Some((v, _)) => cols(self.shape(*v)),
            None => return Err(Error::invalid("merge_rows", "no parts")),
        };
        let mut seen = vec![false; n_rows];
        let mut out = vec![T::zero(); n_rows * c];
        for (v, idx) in &parts {
            let s = self.shape(*v);
            if s.len() != 2 || s[1] != c || s[0] != idx.len() {
                return Err(Error::invalid("merge_rows", format!("part shape {s:?}")));
            }
            let src = self.value(*v);
            for (i, &r) in idx.iter().enumerate() {
                if r >= n_rows || seen[r] {
                    return Err(Error::invalid("merge_rows", "rows must form a partition"));
                }
                seen[r] = true;
                out[r * c..(r + 1) * c].copy_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::invalid("merge_rows", "rows must form a partition"));
        }
        let vars: Vec<Var> = parts.iter().map(|(v, _)| *v).collect();
        let rg = self.rg(&vars);
        Ok(self.push(vec![n_rows, c], out, Op::MergeRows { parts }, rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: sa,
                rhs: sb,
            });
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for r in 0..sa[0] {
            out.extend_from_slice(&va[r * sa[1]..(r + 1) * sa[1]]);
            out.extend_from_slice(&vb[r * sb[1]..(r + 1) * sb[1]]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![sa[0], sa[1] + sb[1]], out, Op::ConcatCols(a, b), rg))
    }

    /// Mean negative log-likelihood over rows whose mask is set. With no
    /// unmasked rows the result is exactly zero and carries no gradient.
    pub fn cross_entropy_logits(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || targets.len() != shape[0] || mask.len() != shape[0] {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_logits",
                lhs: shape,
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let v = shape[1];
        let mut tg = Vec::with_capacity(targets.len());
        for (&t, &m) in targets.iter().zip(mask) {
            if m && t >= v {
                return Err(Error::invalid(
                    "cross_entropy_logits",
                    format!("target {t} outside vocabulary of {v}"),
                ));
            }
            tg.push(m.then_some(t));
        }
        let count = tg.iter().filter(|t| t.is_some()).count();
        let probs = kernels::softmax_rows(self.value(logits), v);
        let mut total = T::zero();
        for (i, t) in tg.iter().enumerate() {
            if let Some(t) = t {
                // log-sum-exp form for accuracy on confident rows
                let row = &self.value(logits)[i * v..(i + 1) * v];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
                total += lse - row[*t];
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_usize(count).unwrap()
        };
        let rg = count > 0 && self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: tg,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Mean of `(pred - target)^2` over all coordinates.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let n = T::from_usize(self.value(pred).len()).unwrap();
        let loss = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<T>()
            / n;
        let rg = self.rg(&[pred, target]);
        Ok(self.push(vec![1], vec![loss], Op::MeanSquaredError(pred, target), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    /// Reverse sweep from a scalar `loss`. Every node is visited once.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Only leaves and the nodes callers hold keep meaningful gradients;
        // drop the rest to keep memory flat.
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Grads { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                slot(nodes, grads, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    kernels::matmul_grad_a(g, &nodes[b.0].value, m, k, n, acc!(*a));
                }
                if wants(*b) {
                    kernels::matmul_grad_b(&nodes[a.0].value, g, m, k, n, acc!(*b));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(*v) {
                        acc!(*v).iter_mut().zip(g).for_each(|(o, &d)| *o += d);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(o, &d)| *o += d);
                }
                if wants(*b) {
                    acc!(*b).iter_mut().zip(g).for_each(|(o, &d)| *o -= d);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = &nodes[b.0].value;
                    for ((o, &d), &y) in acc!(*a).iter_mut().zip(g).zip(bv) {
                        *o += d * y;
                    }
                }
                if wants(*b) {
                    let av = &nodes[a.0].value;
                    for ((o, &d), &x) in acc!(*b).iter_mut().zip(g).zip(av) {
                        *o += d * x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    acc!(*a).iter_mut().zip(g).for_each(|(o, &d)| *o += d * *s);
                }
            }
            Op::Silu(a) => {
                if wants(*a) {
                    let av = &nodes[a.0].value;
                    for ((o, &d), &x) in acc!(*a).iter_mut().zip(g).zip(av) {
                        *o += d * kernels::silu_grad(x);
                    }
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let c = cols(&node.shape);
                    let acc = acc!(*a);
                    for ((y, dy), o) in node.value.chunks(c).zip(g.chunks(c)).zip(acc.chunks_mut(c)) {
                        kernels::softmax_backward_into(y, dy, o);
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (xv, gv) = (&nodes[x.0].value, &nodes[gain.0].value);
                if wants(*x) {
                    kernels::rmsnorm_backward(xv, gv, inv_rms, g, Some(acc!(*x)), None);
                }
                if wants(*gain) {
                    kernels::rmsnorm_backward(xv, gv, inv_rms, g, None, Some(acc!(*gain)));
                }
            }
            Op::Rope {
                x,
                positions,
                n_heads,
                head_dim,
            } => {
                if wants(*x) {
                    kernels::rope_apply(g, positions, *n_heads, *head_dim, -1.0, acc!(*x));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => self.attention_backward(*q, *k, *v, layout, probs, g, grads),
            Op::GatherRows { x, rows: idx } => {
                if wants(*x) {
                    let c = node.shape[1];
                    let acc = acc!(*x);
                    for (i, &r) in idx.iter().enumerate() {
                        for (o, &d) in acc[r * c..(r + 1) * c].iter_mut().zip(&g[i * c..]) {
                            *o += d;
                        }
                    }
                }
            }
            Op::MergeRows { parts } => {
                let c = node.shape[1];
                for (v, idx) in parts {
                    if wants(*v) {
                        let acc = acc!(*v);
                        for (i, &r) in idx.iter().enumerate() {
                            for (o, &d) in acc[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..]) {
                                *o += d;
                            }
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = nodes[a.0].shape[1];
                let cb = nodes[b.0].shape[1];
                let r = rows(&node.shape);
                if wants(*a) {
                    let acc = acc!(*a);
                    for i in 0..r {
                        for (o, &d) in acc[i * ca..(i + 1) * ca]
                            .iter_mut()
                            .zip(&g[i * (ca + cb)..])
                        {
                            *o += d;
                        }
                    }
                }
                if wants(*b) {
                    let acc = acc!(*b);
                    for i in 0..r {
                        for (o, &d) in acc[i * cb..(i + 1) * cb]
                            .iter_mut()
                            .zip(&g[i * (ca + cb) + ca..])
                        {
                            *o += d;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if wants(*logits) && *count > 0 {
                    let v = nodes[logits.0].shape[1];
                    let scale = g[0] / T::from_usize(*count).unwrap();
                    let acc = acc!(*logits);
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            let row = &mut acc[i * v..(i + 1) * v];
                            for (o, &p) in row.iter_mut().zip(&probs[i * v..]) {
                                *o += p * scale;
                            }
                            row[*t] -= scale;
                        }
                    }
                }
            }
            Op::MeanSquaredError(p, t) => {
                let pv = &nodes[p.0].value;
                let tv = &nodes[t.0].value;
                let two = T::from_f64_lossy(2.0) * g[0] / T::from_usize(pv.len()).unwrap();
                if wants(*p) {
                    for ((o, &a), &b) in acc!(*p).iter_mut().zip(pv).zip(tv) {
                        *o += two * (a - b);
                    }
                }
                if wants(*t) {
                    for ((o, &a), &b) in acc!(*t).iter_mut().zip(pv).zip(tv) {
                        *o -= two * (a - b);
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    acc!(*a).iter_mut().for_each(|o| *o += g[0]);
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
        layout: &AttentionLayout,
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let nodes = &self.nodes;
        let hd = layout.head_dim;
        let width = layout.n_heads * hd;
        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
        let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
        let len = qv.len();
        let mut dq = vec![T::zero(); len];
        let mut dk = vec![T::zero(); len];
        let mut dv = vec![T::zero(); len];
        let mut dp = Vec::new();
        let mut ds = Vec::new();
        let mut base = 0;
        for span in &layout.spans {
            let n = span.len;
            for h in 0..layout.n_heads {
                let off = h * hd;
                for i in 0..n {
                    let p = &probs[base..base + n];
                    base += n;
                    let gi = &g[(span.start + i) * width + off..][..hd];
                    dp.clear();
                    for j in 0..n {
                        if p[j] == T::zero() {
                            dp.push(T::zero());
                            continue;
                        }
                        let vj = &vv[(span.start + j) * width + off..][..hd];
                        dp.push(gi.iter().zip(vj).map(|(&a, &b)| a * b).sum());
                        let dvj = &mut dv[(span.start + j) * width + off..][..hd];
                        for (o, &x) in dvj.iter_mut().zip(gi) {
                            *o += p[j] * x;
                        }
                    }
                    ds.clear();
                    ds.resize(n, T::zero());
                    kernels::softmax_backward_into(p, &dp, &mut ds);
                    let qi_off = (span.start + i) * width + off;
                    for j in 0..n {
                        if ds[j] == T::zero() {
                            continue;
                        }
                        let s = ds[j] * scale;
                        let kj_off = (span.start + j) * width + off;
                        for t in 0..hd {
                            dq[qi_off + t] += s * kv[kj_off + t];
                            dk[kj_off + t] += s * qv[qi_off + t];
                        }
                    }
                }
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if nodes[var.0].requires_grad {
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(o, &x)| *o += x),
                    slot @ None => *slot = Some(d),
                }
            }
        }
    }
}
