//! Recording tape for reverse-mode differentiation.
//!
//! Every operator appends a node holding its output value and enough context
//! to run its backward rule. Nodes are only ever appended, so the node list is
//! already in topological order and `backward` is a single reverse sweep.

use num_traits::Float;

use super::kernels::{gemm_acc, gemm_nt_acc, gemm_tn_acc, softmax_row, Scalar};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Fill value for masked attention logits.
pub const MASK_FILL: f64 = -1e9;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool, batch: usize, m: usize, k: usize, n: usize },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, shift: Var, xhat: Vec<F>, rstd: Vec<F> },
    Embedding { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var> },
    Scale(Var, F),
    MaskedFill { x: Var, mask: Vec<bool> },
    CrossEntropy { logits: Var, targets: Vec<usize>, valid: Vec<bool>, probs: Vec<F>, n_valid: usize },
    Sum(Var),
    Reshape(Var),
    SwapAxes12 { x: Var, dims: [usize; 4] },
}

#[derive(Debug)]
struct Node<F> {
    tensor: Tensor<F>,
    op: Op<F>,
}

#[derive(Debug)]
pub struct Tape<F = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Its `requires_grad` flag decides whether
    /// gradients flow into it.
    pub fn leaf(&mut self, mut tensor: Tensor<F>) -> Var {
        tensor.grad = None;
        self.nodes.push(Node { tensor, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor<F>) -> Var {
        self.leaf(tensor.with_grad())
    }

    pub fn constant(&mut self, mut tensor: Tensor<F>) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].tensor.shape
    }

    pub fn data(&self, v: Var) -> &[F] {
        &self.nodes[v.0].tensor.data
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    /// Clears every accumulated gradient on the tape.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.needs_grad(v));
        let tensor = Tensor { shape, data, requires_grad, grad: None };
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    // ---- forward operators ----

    /// `[m,k]x[k,n]` or batched `[b,m,k]x[b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Multiplies by the transpose of `b`: `[m,k]x[n,k]^T`, optionally batched.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let name = if trans_b { "matmul_t" } else { "matmul" };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, bk, bn) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [r, c]) => (1, *m, *k, *r, *c),
            ([b0, m, k], [b1, r, c]) if b0 == b1 => (*b0, *m, *k, *r, *c),
            _ => return Err(Error::shape(name, &sa, &sb)),
        };
        let (kb, n) = if trans_b { (bn, bk) } else { (bk, bn) };
        if kb != k {
            return Err(Error::shape(name, &sa, &sb));
        }
        let mut out = vec![F::zero(); batch * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for bi in 0..batch {
                let a_blk = &ad[bi * m * k..(bi + 1) * m * k];
                let b_blk = &bd[bi * k * n..(bi + 1) * k * n];
                let o_blk = &mut out[bi * m * n..(bi + 1) * m * n];
                if trans_b {
                    gemm_nt_acc(a_blk, b_blk, o_blk, m, k, n);
                } else {
                    gemm_acc(a_blk, b_blk, o_blk, m, k, n);
                }
            }
        }
        let shape = if sa.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        Ok(self.push(shape, out, Op::MatMul { a, b, trans_b, batch, m, k, n }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `[n]` bias to every row of a `[.., n]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let bd = self.data(bias);
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(n) {
            for (v, &b) in row.iter_mut().zip(bd) {
                *v = *v + b;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, data, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v.max(F::zero())).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::Relu(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.finite("softmax", x)?;
        let n = self.value(x).last_dim();
        let mut out = vec![F::zero(); self.value(x).numel()];
        for (row, o) in self.data(x).chunks(n).zip(out.chunks_mut(n)) {
            softmax_row(row, o);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Softmax(x), &[x]))
    }

    /// Layer normalization over the last axis with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: F) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.shape(gain) != [n] || self.shape(shift) != [n] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let nf = F::from(n).unwrap();
        let total = self.value(x).numel();
        let mut xhat = vec![F::zero(); total];
        let mut rstd = Vec::with_capacity(total / n.max(1));
        let mut out = vec![F::zero(); total];
        let (g, s) = (self.data(gain), self.data(shift));
        for ((row, xh), o) in self.data(x).chunks(n).zip(xhat.chunks_mut(n)).zip(out.chunks_mut(n)) {
            let mean = row.iter().fold(F::zero(), |a, &v| a + v) / nf;
            let var = row.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) / nf;
            let r = (var + eps).sqrt().recip();
            for i in 0..n {
                xh[i] = (row[i] - mean) * r;
                o[i] = xh[i] * g[i] + s[i];
            }
            rstd.push(r);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::LayerNorm { x, gain, shift, xhat, rstd }, &[x, gain, shift]))
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        let [rows, d] = shape[..] else {
            return Err(Error::shape("embedding", &shape, &[ids.len()]));
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Data(format!("embedding: id {bad} out of range for {rows} rows")));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        Ok(self.push(vec![ids.len(), d], out, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Usage("concat: no inputs".into()));
        };
        let lead = &self.shape(first)[..self.shape(first).len().saturating_sub(1)];
        for &p in parts {
            let sp = self.shape(p);
            if sp.is_empty() || &sp[..sp.len() - 1] != lead {
                return Err(Error::shape("concat", self.shape(first), sp));
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.push(shape, out, Op::Concat { parts: parts.to_vec() }, parts))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let data = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, data, Op::Scale(x, c), &[x])
    }

    /// Replaces positions where `mask` is true with [`MASK_FILL`].
    pub fn masked_fill(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::shape("masked_fill", self.shape(x), &[mask.len()]));
        }
        let fill = F::from(MASK_FILL).unwrap();
        let data = self.data(x).iter().zip(mask).map(|(&v, &m)| if m { fill } else { v }).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, data, Op::MaskedFill { x, mask: mask.to_vec() }, &[x]))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `[n, vocab]` logits, over rows whose `valid` flag is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], valid: &[bool]) -> Result<Var> {
        self.finite("cross_entropy", logits)?;
        let shape = self.shape(logits).to_vec();
        let [rows, vocab] = shape[..] else {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        };
        if targets.len() != rows || valid.len() != rows {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len(), valid.len()]));
        }
        let n_valid = valid.iter().filter(|&&v| v).count();
        if n_valid == 0 {
            return Err(Error::Usage("cross_entropy: no valid target positions".into()));
        }
        let mut probs = vec![F::zero(); rows * vocab];
        let mut total = F::zero();
        for (r, (row, p)) in self.data(logits).chunks(vocab).zip(probs.chunks_mut(vocab)).enumerate() {
            if !valid[r] {
                continue;
            }
            let t = targets[r];
            if t >= vocab {
                return Err(Error::Data(format!("cross_entropy: target {t} out of range for vocab {vocab}")));
            }
            let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let sum = row.iter().fold(F::zero(), |a, &v| a + (v - max).exp());
            total = total + (max + sum.ln() - row[t]);
            softmax_row(row, p);
        }
        let loss = total / F::from(n_valid).unwrap();
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), valid: valid.to_vec(), probs, n_valid };
        Ok(self.push(vec![], vec![loss], op, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().fold(F::zero(), |a, &v| a + v);
        self.push(vec![], vec![s], Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let data = self.data(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), &[x]))
    }

    /// `[a,b,c,d] -> [a,c,b,d]`; used to split and merge attention heads.
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [d0, d1, d2, d3] = shape[..] else {
            return Err(Error::shape("swap_axes12", &shape, &[4]));
        };
        let data = swap12(self.data(x), [d0, d1, d2, d3]);
        Ok(self.push(vec![d0, d2, d1, d3], data, Op::SwapAxes12 { x, dims: [d0, d1, d2, d3] }, &[x]))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn finite(&self, op: &str, x: Var) -> Result<()> {
        if !self.value(x).is_finite() {
            return Err(Error::Numerical(format!("{op}: non-finite input")));
        }
        Ok(())
    }

    // ---- reverse sweep ----

    /// Back-propagates from a scalar node. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grads`]; interior gradients are recomputed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Usage("backward: empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!("backward: loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.tensor.grad = None;
            }
        }
        if !self.needs_grad(loss) {
            return Ok(());
        }
        self.accumulate(loss, vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].tensor.grad.take() else { continue };
            let contribs = self.backward_rule(i, &g);
            self.nodes[i].tensor.grad = Some(g);
            for (v, c) in contribs {
                if self.needs_grad(v) {
                    self.accumulate(v, c);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<F>) {
        let slot = &mut self.nodes[v.0].tensor.grad;
        match slot {
            Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, &b)| *a = *a + b),
            None => *slot = Some(contrib),
        }
    }

    fn backward_rule(&self, i: usize, g: &[F]) -> Vec<(Var, Vec<F>)> {
        let node = &self.nodes[i];
        let wants = |v: Var| self.needs_grad(v);
        match &node.op {
            Op::Leaf => vec![],
            &Op::MatMul { a, b, trans_b, batch, m, k, n } => {
                let (ad, bd) = (self.data(a), self.data(b));
                let mut out = Vec::new();
                if wants(a) {
                    let mut da = vec![F::zero(); batch * m * k];
                    for bi in 0..batch {
                        let g_blk = &g[bi * m * n..(bi + 1) * m * n];
                        let b_blk = &bd[bi * k * n..(bi + 1) * k * n];
                        let da_blk = &mut da[bi * m * k..(bi + 1) * m * k];
                        if trans_b {
                            gemm_acc(g_blk, b_blk, da_blk, m, n, k);
                        } else {
                            gemm_nt_acc(g_blk, b_blk, da_blk, m, n, k);
                        }
                    }
                    out.push((a, da));
                }
                if wants(b) {
                    let mut db = vec![F::zero(); batch * k * n];
                    for bi in 0..batch {
                        let g_blk = &g[bi * m * n..(bi + 1) * m * n];
                        let a_blk = &ad[bi * m * k..(bi + 1) * m * k];
                        let db_blk = &mut db[bi * k * n..(bi + 1) * k * n];
                        if trans_b {
                            gemm_tn_acc(g_blk, a_blk, db_blk, m, n, k);
                        } else {
                            gemm_tn_acc(a_blk, g_blk, db_blk, m, k, n);
                        }
                    }
                    out.push((b, db));
                }
                out
            }
            &Op::Add(a, b) => vec![(a, g.to_vec()), (b, g.to_vec())],
            &Op::Mul(a, b) => {
                let da = g.iter().zip(self.data(b)).map(|(&g, &y)| g * y).collect();
                let db = g.iter().zip(self.data(a)).map(|(&g, &x)| g * x).collect();
                vec![(a, da), (b, db)]
            }
            &Op::AddBias { x, bias } => {
                let n = self.value(bias).numel();
                let mut db = vec![F::zero(); n];
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                }
                vec![(x, g.to_vec()), (bias, db)]
            }
            &Op::Relu(x) => {
                let dx = g.iter().zip(self.data(x)).map(|(&g, &v)| if v > F::zero() { g } else { F::zero() }).collect();
                vec![(x, dx)]
            }
            &Op::Softmax(x) => {
                let n = node.tensor.last_dim();
                let mut dx = vec![F::zero(); g.len()];
                for ((y, gr), d) in node.tensor.data.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot = y.iter().zip(gr).fold(F::zero(), |a, (&y, &g)| a + y * g);
                    for j in 0..n {
                        d[j] = y[j] * (gr[j] - dot);
                    }
                }
                vec![(x, dx)]
            }
            Op::LayerNorm { x, gain, shift, xhat, rstd } => {
                let n = node.tensor.last_dim();
                let nf = F::from(n).unwrap();
                let gd = self.data(*gain);
                let mut dx = vec![F::zero(); g.len()];
                let mut dgain = vec![F::zero(); n];
                let mut dshift = vec![F::zero(); n];
                for (r, ((gr, xh), d)) in g.chunks(n).zip(xhat.chunks(n)).zip(dx.chunks_mut(n)).enumerate() {
                    let mut mean_dxh = F::zero();
                    let mut mean_dxh_xh = F::zero();
                    for j in 0..n {
                        let dxh = gr[j] * gd[j];
                        mean_dxh = mean_dxh + dxh;
                        mean_dxh_xh = mean_dxh_xh + dxh * xh[j];
                        dgain[j] = dgain[j] + gr[j] * xh[j];
                        dshift[j] = dshift[j] + gr[j];
                    }
                    mean_dxh = mean_dxh / nf;
                    mean_dxh_xh = mean_dxh_xh / nf;
                    for j in 0..n {
                        d[j] = rstd[r] * (gr[j] * gd[j] - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                vec![(*x, dx), (*gain, dgain), (*shift, dshift)]
            }
            Op::Embedding { table, ids } => {
                let d = node.tensor.last_dim();
                let mut dt = vec![F::zero(); self.value(*table).numel()];
                for (row, &id) in g.chunks(d).zip(ids) {
                    let dst = &mut dt[id * d..(id + 1) * d];
                    dst.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                }
                vec![(*table, dt)]
            }
            Op::Concat { parts } => {
                let total = node.tensor.last_dim();
                let rows = node.tensor.numel() / total.max(1);
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = self.value(p).last_dim();
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    out.push((p, dp));
                }
                out
            }
            &Op::Scale(x, c) => vec![(x, g.iter().map(|&v| v * c).collect())],
            Op::MaskedFill { x, mask } => {
                let dx = g.iter().zip(mask).map(|(&v, &m)| if m { F::zero() } else { v }).collect();
                vec![(*x, dx)]
            }
            Op::CrossEntropy { logits, targets, valid, probs, n_valid } => {
                let vocab = self.value(*logits).last_dim();
                let scale = g[0] / F::from(*n_valid).unwrap();
                let mut dl = vec![F::zero(); probs.len()];
                for (r, (p, d)) in probs.chunks(vocab).zip(dl.chunks_mut(vocab)).enumerate() {
                    if !valid[r] {
                        continue;
                    }
                    for j in 0..vocab {
                        d[j] = p[j] * scale;
                    }
                    d[targets[r]] = d[targets[r]] - scale;
                }
                vec![(*logits, dl)]
            }
            &Op::Sum(x) => vec![(x, vec![g[0]; self.value(x).numel()])],
            &Op::Reshape(x) => vec![(x, g.to_vec())],
            &Op::SwapAxes12 { x, dims: [d0, d1, d2, d3] } => vec![(x, swap12(g, [d0, d2, d1, d3]))],
        }
    }
}

fn swap12<F: Float>(src: &[F], [d0, d1, d2, d3]: [usize; 4]) -> Vec<F> {
    let mut out = vec![F::zero(); src.len()];
    for a in 0..d0 {
        for b in 0..d1 {
            for c in 0..d2 {
                let s = ((a * d1 + b) * d2 + c) * d3;
                let t = ((a * d2 + c) * d1 + b) * d3;
                out[t..t + d3].copy_from_slice(&src[s..s + d3]);
            }
        }
    }
    out
}
