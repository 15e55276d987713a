use super::{check_finite, Real, SeededRng, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool, shared_b: bool },
    Add { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    ScaleBlocks { a: Var, g: Var, block: usize },
    Relu { a: Var },
    Dropout { a: Var, mask: Vec<T> },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    LayerNorm { a: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Normalize { a: Var, center: bool, rnorm: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    MaskedFill { a: Var, mask: Vec<bool>, repeat: usize, block: usize },
    Reshape { a: Var },
    SplitHeads { a: Var, batch: usize, seq: usize, heads: usize, head_dim: usize },
    MergeHeads { a: Var, batch: usize, seq: usize, heads: usize, head_dim: usize },
    NllMean { logp: Var, targets: Vec<Option<usize>>, count: usize },
    Sum { a: Var },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of operations. Inputs of every node precede it, so a single
/// reverse sweep visits each node after all of its consumers.
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("tensors have rank >= 1")
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Gradient of a node after [`Tape::backward`]. Leaves that require a
    /// gradient but were not reached report zeros.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Record a leaf. The tensor's `requires_grad` flag decides whether the
    /// backward pass fills a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn param(&mut self, tensor: &Tensor<T>) -> Var {
        let t = Tensor::new(tensor.shape(), tensor.data().to_vec())
            .expect("parameter layout is valid")
            .with_requires_grad(true);
        self.push(t, Op::Leaf, true)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn emit(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<T>, op: Op<T>, rg: bool) -> Result<Var> {
        check_finite(name, &data)?;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, op, rg))
    }

    fn check_open(&self) -> Result<()> {
        if self.consumed {
            Err(Error::State("tape already consumed by backward".into()))
        } else {
            Ok(())
        }
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        self.check_open()?;
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Shape(format!("matmul needs rank >= 2, got {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b { (sb[sb.len() - 1], sb[sb.len() - 2]) } else { (sb[sb.len() - 2], sb[sb.len() - 1]) };
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let shared_b = lead_b.is_empty();
        if k != kb || (!shared_b && lead_a != lead_b) {
            return Err(Error::Shape(format!(
                "matmul dimension mismatch: {sa:?} x {sb:?}{}",
                if trans_b { " (transposed)" } else { "" }
            )));
        }
        let batch: usize = lead_a.iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
            for bi in 0..batch {
                let a_blk = &ad[bi * m * k..(bi + 1) * m * k];
                let b_blk = if shared_b { bd } else { &bd[bi * k * n..(bi + 1) * k * n] };
                let c_blk = &mut out[bi * m * n..(bi + 1) * m * n];
                T::gemm(m, k, n, T::one(), a_blk, k as isize, 1, b_blk, rsb, csb, T::zero(), c_blk, n as isize, 1);
            }
        }
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        self.emit("matmul", shape, out, Op::MatMul { a, b, batch, m, k, n, trans_b, shared_b }, rg)
    }

    /// `a · b` over the last two axes. `b` is either rank 2 (shared across the
    /// batch) or has the same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!("{op}: {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        self.same_shape("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.emit("add", self.shape(a).to_vec(), data, Op::Add { a, b }, rg)
    }

    /// Adds a vector along the last axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.check_open()?;
        let d = last_dim(self.shape(a));
        if self.shape(bias) != [d] {
            return Err(Error::Shape(format!("bias {:?} for input {:?}", self.shape(bias), self.shape(a))));
        }
        let bd = self.data(bias);
        let data = self.data(a).chunks(d).flat_map(|row| row.iter().zip(bd).map(|(&x, &b)| x + b)).collect();
        let rg = self.rg(a) || self.rg(bias);
        self.emit("add_bias", self.shape(a).to_vec(), data, Op::AddBias { a, bias }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_open()?;
        self.same_shape("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.emit("mul", self.shape(a).to_vec(), data, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        self.check_open()?;
        let data = self.data(a).iter().map(|&x| x * factor).collect();
        let rg = self.rg(a);
        self.emit("scale", self.shape(a).to_vec(), data, Op::Scale { a, factor }, rg)
    }

    /// Multiplies consecutive blocks of `a` (each `block` elements long) by a
    /// learnable scale: block `i` uses `g[i % g.len()]`. With attention scores
    /// laid out as `[batch * heads, q, k]` and `g` of length `heads`, each
    /// head gets its own scale; a length-1 `g` is shared by all heads.
    pub fn scale_blocks(&mut self, a: Var, g: Var, block: usize) -> Result<Var> {
        self.check_open()?;
        let numel = self.value(a).numel();
        if block == 0 || !numel.is_multiple_of(block) || self.shape(g).len() != 1 {
            return Err(Error::Shape(format!(
                "scale_blocks: block {block} over {:?} with scale {:?}",
                self.shape(a),
                self.shape(g)
            )));
        }
        let gd = self.data(g);
        let data = self
            .data(a)
            .chunks(block)
            .enumerate()
            .flat_map(|(i, blk)| {
                let s = gd[i % gd.len()];
                blk.iter().map(move |&x| x * s)
            })
            .collect();
        let rg = self.rg(a) || self.rg(g);
        self.emit("scale_blocks", self.shape(a).to_vec(), data, Op::ScaleBlocks { a, g, block }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        let data = self.data(a).iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let rg = self.rg(a);
        self.emit("relu", self.shape(a).to_vec(), data, Op::Relu { a }, rg)
    }

    /// Inverted dropout: kept units are scaled by `1/(1-p)`.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut SeededRng) -> Result<Var> {
        self.check_open()?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> =
            (0..self.value(a).numel()).map(|_| if rng.uniform() < p { T::zero() } else { keep }).collect();
        let data = self.data(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let rg = self.rg(a);
        self.emit("dropout", self.shape(a).to_vec(), data, Op::Dropout { a, mask }, rg)
    }

    /// Softmax over the last axis, stabilised by subtracting the slice maximum.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        let d = last_dim(self.shape(a));
        let data = softmax_rows(self.data(a), d);
        let rg = self.rg(a);
        self.emit("softmax", self.shape(a).to_vec(), data, Op::Softmax { a }, rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        let d = last_dim(self.shape(a));
        let mut data = Vec::with_capacity(self.value(a).numel());
        for row in self.data(a).chunks(d) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            data.extend(row.iter().map(|&x| x - lse));
        }
        let rg = self.rg(a);
        self.emit("log_softmax", self.shape(a).to_vec(), data, Op::LogSoftmax { a }, rg)
    }

    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.check_open()?;
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Parameter(format!("layer_norm eps must be positive, got {eps}")));
        }
        let d = last_dim(self.shape(a));
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm affine {:?}/{:?} for input {:?}",
                self.shape(gamma),
                self.shape(beta),
                self.shape(a)
            )));
        }
        let eps = T::lit(eps);
        let dn = T::from_usize(d).unwrap();
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let rows = self.value(a).numel() / d;
        let mut xhat = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for row in self.data(a).chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &x) in row.iter().enumerate() {
                let h = (x - mean) * r;
                xhat.push(h);
                out.push(h * gd[j] + bd[j]);
            }
        }
        let rg = self.rg(a) || self.rg(gamma) || self.rg(beta);
        self.emit("layer_norm", self.shape(a).to_vec(), out, Op::LayerNorm { a, gamma, beta, xhat, rstd }, rg)
    }

    /// Scales each last-axis slice to unit L2 norm, optionally after removing
    /// the slice mean. Slices whose (centered) norm is at most `eps`, and
    /// constant slices when centering, map to the zero vector.
    pub fn normalize(&mut self, a: Var, center: bool, eps: f64) -> Result<Var> {
        self.check_open()?;
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Parameter(format!("normalize eps must be positive, got {eps}")));
        }
        let d = last_dim(self.shape(a));
        let eps = T::lit(eps);
        let dn = T::from_usize(d).unwrap();
        let mut out = Vec::with_capacity(self.value(a).numel());
        let mut rnorm = Vec::with_capacity(self.value(a).numel() / d);
        let mut centered = vec![T::zero(); d];
        for row in self.data(a).chunks(d) {
            let constant = row.iter().all(|&x| x == row[0]);
            let mean = if center { row.iter().copied().sum::<T>() / dn } else { T::zero() };
            for (c, &x) in centered.iter_mut().zip(row) {
                *c = x - mean;
            }
            let norm = centered.iter().map(|&c| c * c).sum::<T>().sqrt();
            let r = if (center && constant) || norm <= eps { T::zero() } else { T::one() / norm };
            rnorm.push(r);
            out.extend(centered.iter().map(|&c| c * r));
        }
        let rg = self.rg(a);
        self.emit("normalize", self.shape(a).to_vec(), out, Op::Normalize { a, center, rnorm }, rg)
    }

    /// Gathers rows of `table` (`[vocab, d]`); output shape is `lead ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        self.check_open()?;
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::Shape(format!("embedding table must be rank 2, got {ts:?}")));
        }
        if lead.iter().product::<usize>() != ids.len() || ids.is_empty() {
            return Err(Error::Shape(format!("{} ids for lead shape {lead:?}", ids.len())));
        }
        let (vocab, d) = (ts[0], ts[1]);
        if let Some((pos, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= vocab) {
            return Err(Error::Index(format!("id {id} at position {pos} outside vocabulary of {vocab}")));
        }
        let td = self.data(table);
        let data = ids.iter().flat_map(|&id| td[id * d..(id + 1) * d].iter().copied()).collect();
        let mut shape = lead.to_vec();
        shape.push(d);
        let rg = self.rg(table);
        self.emit("embedding", shape, data, Op::Embedding { table, ids: ids.to_vec() }, rg)
    }

    /// Replaces positions where `mask` is false with `fill`. `a` is
    /// `[n, q, k]`; `mask` covers `n / repeat` such blocks, block `i` of `a`
    /// using mask block `i / repeat`.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], repeat: usize, fill: T) -> Result<Var> {
        self.check_open()?;
        let numel = self.value(a).numel();
        if repeat == 0 || mask.len() * repeat != numel {
            return Err(Error::Shape(format!(
                "mask of {} entries (x{repeat}) for scores {:?}",
                mask.len(),
                self.shape(a)
            )));
        }
        let s = self.shape(a);
        let blk = s[s.len() - 2] * s[s.len() - 1];
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let (b, r) = (i / blk, i % blk);
                if mask[(b / repeat) * blk + r] {
                    x
                } else {
                    fill
                }
            })
            .collect();
        let rg = self.rg(a);
        self.emit("masked_fill", s.to_vec(), data, Op::MaskedFill { a, mask: mask.to_vec(), repeat, block: blk }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check_open()?;
        if shape.iter().product::<usize>() != self.value(a).numel() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape(a))));
        }
        let data = self.data(a).to_vec();
        let rg = self.rg(a);
        self.emit("reshape", shape.to_vec(), data, Op::Reshape { a }, rg)
    }

    /// `[b, s, h*dh]` → `[b*h, s, dh]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        self.check_open()?;
        let s = self.shape(a).to_vec();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(Error::Shape(format!("cannot split {s:?} into {heads} heads")));
        }
        let (batch, seq, head_dim) = (s[0], s[1], s[2] / heads);
        let src = self.data(a);
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let from = (b * seq + t) * heads * head_dim + h * head_dim;
                    let to = ((b * heads + h) * seq + t) * head_dim;
                    out[to..to + head_dim].copy_from_slice(&src[from..from + head_dim]);
                }
            }
        }
        let rg = self.rg(a);
        let op = Op::SplitHeads { a, batch, seq, heads, head_dim };
        self.emit("split_heads", vec![batch * heads, seq, head_dim], out, op, rg)
    }

    /// `[b*h, s, dh]` → `[b, s, h*dh]`.
    pub fn merge_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        self.check_open()?;
        let s = self.shape(a).to_vec();
        if s.len() != 3 || heads == 0 || !s[0].is_multiple_of(heads) {
            return Err(Error::Shape(format!("cannot merge {s:?} from {heads} heads")));
        }
        let (batch, seq, head_dim) = (s[0] / heads, s[1], s[2]);
        let src = self.data(a);
        let mut out = vec![T::zero(); src.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let to = (b * seq + t) * heads * head_dim + h * head_dim;
                    let from = ((b * heads + h) * seq + t) * head_dim;
                    out[to..to + head_dim].copy_from_slice(&src[from..from + head_dim]);
                }
            }
        }
        let rg = self.rg(a);
        let op = Op::MergeHeads { a, batch, seq, heads, head_dim };
        self.emit("merge_heads", vec![batch, seq, heads * head_dim], out, op, rg)
    }

    /// Mean negative log-likelihood of `targets` under row-wise log
    /// probabilities `logp` (`[rows, vocab]`). `None` targets are padding.
    pub fn nll_mean(&mut self, logp: Var, targets: &[Option<usize>]) -> Result<Var> {
        self.check_open()?;
        let s = self.shape(logp).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::Shape(format!("{} targets for log-probabilities {s:?}", targets.len())));
        }
        let vocab = s[1];
        if let Some((pos, t)) = targets.iter().enumerate().find(|(_, t)| t.is_some_and(|t| t >= vocab)) {
            return Err(Error::Index(format!("target {t:?} at position {pos} outside vocabulary of {vocab}")));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Contract("loss over an all-padding target".into()));
        }
        let ld = self.data(logp);
        let total: T = targets.iter().enumerate().filter_map(|(r, t)| t.map(|t| -ld[r * vocab + t])).sum();
        let loss = total / T::from_usize(count).unwrap();
        let rg = self.rg(logp);
        self.emit("nll_mean", vec![1], vec![loss], Op::NllMean { logp, targets: targets.to_vec(), count }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check_open()?;
        let total = self.data(a).iter().copied().sum();
        let rg = self.rg(a);
        self.emit("sum", vec![1], vec![total], Op::Sum { a }, rg)
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [T], &[Node<T>])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        let g = slot.get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        f(g, &self.nodes);
    }

    /// Reverse sweep from a scalar loss. Fills gradients for every node that
    /// requires one; the tape cannot be swept twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::State("backward called twice on the same tape".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::State("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        self.consumed = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            self.grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            // Temporarily detach the op so its saved buffers can be read while
            // gradients of earlier nodes are mutated.
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(i, &op, &gy);
            self.nodes[i].op = op;
        }
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grad.is_none() {
                *grad = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        Ok(())
    }

    fn backward_op(&mut self, i: usize, op: &Op<T>, gy: &[T]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b, batch, m, k, n, trans_b, shared_b } => {
                self.accumulate(a, |ga, nodes| {
                    let bd = nodes[b.0].value.data();
                    // ga = gy · op(b)ᵀ
                    let (rs, cs) = if trans_b { (k as isize, 1) } else { (1, n as isize) };
                    for bi in 0..batch {
                        let b_blk = if shared_b { bd } else { &bd[bi * k * n..(bi + 1) * k * n] };
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &gy[bi * m * n..(bi + 1) * m * n],
                            n as isize,
                            1,
                            b_blk,
                            rs,
                            cs,
                            T::one(),
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            k as isize,
                            1,
                        );
                    }
                });
                self.accumulate(b, |gb, nodes| {
                    let ad = nodes[a.0].value.data();
                    for bi in 0..batch {
                        let a_blk = &ad[bi * m * k..(bi + 1) * m * k];
                        let g_blk = &gy[bi * m * n..(bi + 1) * m * n];
                        let gb_blk = if shared_b { &mut gb[..] } else { &mut gb[bi * k * n..(bi + 1) * k * n] };
                        if trans_b {
                            // gb (n×k) = gyᵀ · a
                            T::gemm(
                                n,
                                m,
                                k,
                                T::one(),
                                g_blk,
                                1,
                                n as isize,
                                a_blk,
                                k as isize,
                                1,
                                T::one(),
                                gb_blk,
                                k as isize,
                                1,
                            );
                        } else {
                            // gb (k×n) = aᵀ · gy
                            T::gemm(
                                k,
                                m,
                                n,
                                T::one(),
                                a_blk,
                                1,
                                k as isize,
                                g_blk,
                                n as isize,
                                1,
                                T::one(),
                                gb_blk,
                                n as isize,
                                1,
                            );
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(a, |ga, _| ga.iter_mut().zip(gy).for_each(|(g, &d)| *g += d));
                self.accumulate(b, |gb, _| gb.iter_mut().zip(gy).for_each(|(g, &d)| *g += d));
            }
            Op::AddBias { a, bias } => {
                self.accumulate(a, |ga, _| ga.iter_mut().zip(gy).for_each(|(g, &d)| *g += d));
                self.accumulate(bias, |gb, _| {
                    let d = gb.len();
                    for row in gy.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(g, &x)| *g += x);
                    }
                });
            }
            Op::Mul { a, b } => {
                self.accumulate(a, |ga, nodes| {
                    let bd = nodes[b.0].value.data();
                    for ((g, &d), &y) in ga.iter_mut().zip(gy).zip(bd) {
                        *g += d * y;
                    }
                });
                self.accumulate(b, |gb, nodes| {
                    let ad = nodes[a.0].value.data();
                    for ((g, &d), &x) in gb.iter_mut().zip(gy).zip(ad) {
                        *g += d * x;
                    }
                });
            }
            Op::Scale { a, factor } => {
                self.accumulate(a, |ga, _| ga.iter_mut().zip(gy).for_each(|(g, &d)| *g += d * factor));
            }
            Op::ScaleBlocks { a, g, block } => {
                self.accumulate(a, |ga, nodes| {
                    let gd = nodes[g.0].value.data();
                    for (bi, (gblk, dblk)) in ga.chunks_mut(block).zip(gy.chunks(block)).enumerate() {
                        let s = gd[bi % gd.len()];
                        gblk.iter_mut().zip(dblk).for_each(|(x, &d)| *x += d * s);
                    }
                });
                self.accumulate(g, |gg, nodes| {
                    let ad = nodes[a.0].value.data();
                    let len = gg.len();
                    for (bi, (ablk, dblk)) in ad.chunks(block).zip(gy.chunks(block)).enumerate() {
                        gg[bi % len] += ablk.iter().zip(dblk).map(|(&x, &d)| x * d).sum::<T>();
                    }
                });
            }
            Op::Relu { a } => {
                self.accumulate(a, |ga, nodes| {
                    let y = nodes[i].value.data();
                    for ((g, &d), &o) in ga.iter_mut().zip(gy).zip(y) {
                        if o > T::zero() {
                            *g += d;
                        }
                    }
                });
            }
            Op::Dropout { a, ref mask } => {
                self.accumulate(a, |ga, _| {
                    for ((g, &d), &m) in ga.iter_mut().zip(gy).zip(mask) {
                        *g += d * m;
                    }
                });
            }
            Op::Softmax { a } => {
                self.accumulate(a, |ga, nodes| {
                    let y = nodes[i].value.data();
                    let d = last_dim(nodes[i].value.shape());
                    for ((g, dy), yy) in ga.chunks_mut(d).zip(gy.chunks(d)).zip(y.chunks(d)) {
                        let dot: T = dy.iter().zip(yy).map(|(&a, &b)| a * b).sum();
                        for ((x, &dd), &p) in g.iter_mut().zip(dy).zip(yy) {
                            *x += p * (dd - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { a } => {
                self.accumulate(a, |ga, nodes| {
                    let y = nodes[i].value.data();
                    let d = last_dim(nodes[i].value.shape());
                    for ((g, dy), yy) in ga.chunks_mut(d).zip(gy.chunks(d)).zip(y.chunks(d)) {
                        let total: T = dy.iter().copied().sum();
                        for ((x, &dd), &lp) in g.iter_mut().zip(dy).zip(yy) {
                            *x += dd - lp.exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm { a, gamma, beta, ref xhat, ref rstd } => {
                let d = xhat.len() / rstd.len();
                self.accumulate(gamma, |gg, _| {
                    for (dy, xh) in gy.chunks(d).zip(xhat.chunks(d)) {
                        for ((g, &dd), &h) in gg.iter_mut().zip(dy).zip(xh) {
                            *g += dd * h;
                        }
                    }
                });
                self.accumulate(beta, |gb, _| {
                    for dy in gy.chunks(d) {
                        gb.iter_mut().zip(dy).for_each(|(g, &dd)| *g += dd);
                    }
                });
                self.accumulate(a, |ga, nodes| {
                    let gam = nodes[gamma.0].value.data();
                    let dn = T::from_usize(d).unwrap();
                    let mut gh = vec![T::zero(); d];
                    for (((g, dy), xh), &r) in ga.chunks_mut(d).zip(gy.chunks(d)).zip(xhat.chunks(d)).zip(rstd) {
                        for ((h, &dd), &w) in gh.iter_mut().zip(dy).zip(gam) {
                            *h = dd * w;
                        }
                        let mean_gh = gh.iter().copied().sum::<T>() / dn;
                        let mean_ghx = gh.iter().zip(xh).map(|(&p, &q)| p * q).sum::<T>() / dn;
                        for ((x, &h), &q) in g.iter_mut().zip(&gh).zip(xh) {
                            *x += r * (h - mean_gh - q * mean_ghx);
                        }
                    }
                });
            }
            Op::Normalize { a, center, ref rnorm } => {
                self.accumulate(a, |ga, nodes| {
                    let y = nodes[i].value.data();
                    let d = y.len() / rnorm.len();
                    let dn = T::from_usize(d).unwrap();
                    let mut gc = vec![T::zero(); d];
                    for (((g, dy), yy), &r) in ga.chunks_mut(d).zip(gy.chunks(d)).zip(y.chunks(d)).zip(rnorm) {
                        // y = c·r, r = 1/|c|: dc = r·(dy - y·(y·dy)); zeroed slices have r = 0
                        let dot: T = dy.iter().zip(yy).map(|(&p, &q)| p * q).sum();
                        for ((c, &dd), &q) in gc.iter_mut().zip(dy).zip(yy) {
                            *c = r * (dd - q * dot);
                        }
                        let shift = if center { gc.iter().copied().sum::<T>() / dn } else { T::zero() };
                        for (x, &c) in g.iter_mut().zip(&gc) {
                            *x += c - shift;
                        }
                    }
                });
            }
            Op::Embedding { table, ref ids } => {
                self.accumulate(table, |gt, _| {
                    let d = gy.len() / ids.len();
                    for (&id, row) in ids.iter().zip(gy.chunks(d)) {
                        gt[id * d..(id + 1) * d].iter_mut().zip(row).for_each(|(g, &x)| *g += x);
                    }
                });
            }
            Op::MaskedFill { a, ref mask, repeat, block } => {
                self.accumulate(a, |ga, _| {
                    for (j, (g, &d)) in ga.iter_mut().zip(gy).enumerate() {
                        if mask[(j / block / repeat) * block + j % block] {
                            *g += d;
                        }
                    }
                });
            }
            Op::Reshape { a } => {
                self.accumulate(a, |ga, _| ga.iter_mut().zip(gy).for_each(|(g, &d)| *g += d));
            }
            Op::SplitHeads { a, batch, seq, heads, head_dim } => {
                self.accumulate(a, |ga, _| {
                    for b in 0..batch {
                        for t in 0..seq {
                            for h in 0..heads {
                                let to = (b * seq + t) * heads * head_dim + h * head_dim;
                                let from = ((b * heads + h) * seq + t) * head_dim;
                                ga[to..to + head_dim]
                                    .iter_mut()
                                    .zip(&gy[from..from + head_dim])
                                    .for_each(|(g, &d)| *g += d);
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { a, batch, seq, heads, head_dim } => {
                self.accumulate(a, |ga, _| {
                    for b in 0..batch {
                        for t in 0..seq {
                            for h in 0..heads {
                                let from = (b * seq + t) * heads * head_dim + h * head_dim;
                                let to = ((b * heads + h) * seq + t) * head_dim;
                                ga[to..to + head_dim]
                                    .iter_mut()
                                    .zip(&gy[from..from + head_dim])
                                    .for_each(|(g, &d)| *g += d);
                            }
                        }
                    }
                });
            }
            Op::NllMean { logp, ref targets, count } => {
                self.accumulate(logp, |gl, _| {
                    let vocab = gl.len() / targets.len();
                    let w = gy[0] / T::from_usize(count).unwrap();
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            gl[r * vocab + t] -= w;
                        }
                    }
                });
            }
            Op::Sum { a } => {
                self.accumulate(a, |ga, _| ga.iter_mut().for_each(|g| *g += gy[0]));
            }
        }
    }
}

pub(crate) fn softmax_rows<T: Real>(data: &[T], d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(d) {
        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let start = out.len();
        out.extend(row.iter().map(|&x| (x - max).exp()));
        let total: T = out[start..].iter().copied().sum();
        out[start..].iter_mut().for_each(|x| *x = *x / total);
    }
    out
}
