//! Define-by-run reverse-mode differentiation over rank-2 tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value and enough cached state to run its adjoint. Nodes are appended in
//! topological order, so `backward` is a single reverse sweep.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    /// `x + tile(b)` where `b`'s rows divide `x`'s rows.
    AddBroadcast(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        weights: Vec<T>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Concat(Vec<Var>),
    Reshape(Var),
    BlockSoftmax {
        x: Var,
        block: usize,
    },
    Mixture {
        weights: Var,
        candidates: Var,
        tokens: usize,
        granularity: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
}

/// Layout of a batched attention call: `batch` independent sequences, queries
/// of length `seq_q`, keys of length `seq_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub heads: usize,
    pub seq_q: usize,
    pub seq_k: usize,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
    training: bool,
    rng: Option<ChaCha8Rng>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl<T: Scalar> Graph<T> {
    /// A graph in inference mode: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            training: false,
            rng: None,
        }
    }

    /// A graph in training mode; dropout masks are drawn from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Self {
            training: true,
            rng: Some(rng),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        dims(&self.nodes[v.0].value)
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::Domain(format!("matmul of {m}×{k} by {k2}×{n}")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Domain(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (r, c) = self.shape(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::matrix(r, c, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// Adds `b` tiled down the rows of `x`; `b` is a bias row or a block of
    /// rows (e.g. a positional encoding) whose row count divides `x`'s.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let (br, bc) = self.shape(b);
        if bc != c || br == 0 || r % br != 0 {
            return Err(Error::Domain(format!(
                "cannot broadcast {br}×{bc} over {r}×{c}"
            )));
        }
        let bd = self.value(b).data();
        let block = br * c;
        let data: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % block])
            .collect();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::AddBroadcast(x, b), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(t, Op::Gelu(x), rg)
    }

    /// Row-wise layer normalization with learned scale and shift rows.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(Error::Domain(format!("layer norm width {c} mismatch")));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let n = T::of_usize(c);
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![T::zero(); r * c];
        let mut inv_std = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gd[j] + bd[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::matrix(r, c, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Batched multi-head scaled dot-product attention.
    ///
    /// `q` is `(batch·seq_q) × d`, `k` and `v` are `(batch·seq_k) × d`; head `h`
    /// uses columns `h·d/heads .. (h+1)·d/heads`. `key_mask[j] = false` removes
    /// key position `j` in every sequence.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let AttentionShape {
            batch,
            heads,
            seq_q,
            seq_k,
        } = shape;
        let (qr, d) = self.shape(q);
        let (kr, kd) = self.shape(k);
        if self.shape(v) != (kr, kd) || kd != d {
            return Err(Error::Domain(format!(
                "attention operands {:?}, {:?}, {:?} disagree",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Domain(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        if qr != batch * seq_q || kr != batch * seq_k || seq_k == 0 {
            return Err(Error::Domain(format!(
                "attention rows {qr}/{kr} do not match batch {batch} × ({seq_q}, {seq_k})"
            )));
        }
        if let Some(m) = key_mask {
            if m.len() != seq_k || !m.iter().any(|&b| b) {
                return Err(Error::Domain(
                    "key mask must cover every key and allow one".into(),
                ));
            }
        }
        let dh = d / heads;
        let scale = T::one() / T::of_usize(dh).sqrt();
        let qd = self.value(q).data();
        let kd_ = self.value(k).data();
        let vd = self.value(v).data();
        let mut weights = vec![T::zero(); batch * heads * seq_q * seq_k];
        let mut out = vec![T::zero(); qr * d];
        let mut scores = vec![T::zero(); seq_k];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq_q {
                    let qrow = &qd[(b * seq_q + i) * d + off..(b * seq_q + i) * d + off + dh];
                    let mut max = T::neg_infinity();
                    for j in 0..seq_k {
                        if key_mask.is_some_and(|m| !m[j]) {
                            scores[j] = T::neg_infinity();
                            continue;
                        }
                        let krow = &kd_[(b * seq_k + j) * d + off..(b * seq_k + j) * d + off + dh];
                        let s = qrow.iter().zip(krow).map(|(&x, &y)| x * y).sum::<T>() * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let wbase = ((b * heads + h) * seq_q + i) * seq_k;
                    let mut total = T::zero();
                    for j in 0..seq_k {
                        let e = if scores[j] == T::neg_infinity() {
                            T::zero()
                        } else {
                            (scores[j] - max).exp()
                        };
                        weights[wbase + j] = e;
                        total = total + e;
                    }
                    let orow = (b * seq_q + i) * d + off;
                    for j in 0..seq_k {
                        let w = weights[wbase + j] / total;
                        weights[wbase + j] = w;
                        if w == T::zero() {
                            continue;
                        }
                        let vrow = &vd[(b * seq_k + j) * d + off..(b * seq_k + j) * d + off + dh];
                        for (c, &vv) in vrow.iter().enumerate() {
                            out[orow + c] = out[orow + c] + w * vv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::matrix(qr, d, out)?,
            Op::Attention {
                q,
                k,
                v,
                shape,
                weights,
            },
            rg,
        ))
    }

    /// Attention weights cached by an attention node, laid out
    /// `[batch][head][query][key]`.
    pub fn attention_weights(&self, v: Var) -> Option<(&[T], AttentionShape)> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, shape, .. } => Some((weights, *shape)),
            _ => None,
        }
    }

    /// Output row `r` is input row `index[r]`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::Domain(format!(
                "row {bad} out of range for {r} rows"
            )));
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in &index {
            data.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::matrix(index.len(), c, data)?,
            Op::Gather { x, index },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Domain("concatenation of nothing".into()));
        };
        let c = self.shape(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.shape(p);
            if pc != c {
                return Err(Error::Domain(format!("concat of widths {c} and {pc}")));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::matrix(rows, c, data)?,
            Op::Concat(parts.to_vec()),
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(x).clone().reshape(vec![rows, cols])?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Softmax down each column within consecutive blocks of `block` rows.
    pub fn block_softmax(&mut self, x: Var, block: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if block == 0 || r % block != 0 {
            return Err(Error::Domain(format!(
                "{r} rows do not split into blocks of {block}"
            )));
        }
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for b in 0..r / block {
            for j in 0..c {
                let at = |s: usize| (b * block + s) * c + j;
                let max = (0..block)
                    .map(|s| xd[at(s)])
                    .fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for s in 0..block {
                    let e = (xd[at(s)] - max).exp();
                    out[at(s)] = e;
                    total = total + e;
                }
                for s in 0..block {
                    out[at(s)] = out[at(s)] / total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::matrix(r, c, out)?,
            Op::BlockSoftmax { x, block },
            rg,
        ))
    }

    /// Per-batch weighted sum of candidate day matrices.
    ///
    /// `weights` is `(batch·tokens) × n`; `candidates` is
    /// `(batch·tokens·granularity) × n` with candidate `s` of batch `b` at rows
    /// `(b·tokens+s)·granularity ..`. Output is `(batch·granularity) × n` with
    /// `out[b, g, n] = Σ_s weights[b, s, n] · candidates[b, s, g, n]`.
    pub fn mixture(
        &mut self,
        weights: Var,
        candidates: Var,
        tokens: usize,
        granularity: usize,
    ) -> Result<Var> {
        let (wr, n) = self.shape(weights);
        let (cr, cn) = self.shape(candidates);
        if tokens == 0 || wr % tokens != 0 || cn != n || cr != wr * granularity {
            return Err(Error::Domain(format!(
                "mixture of {wr}×{n} weights over {cr}×{cn} candidates"
            )));
        }
        let batch = wr / tokens;
        let wd = self.value(weights).data();
        let cd = self.value(candidates).data();
        let mut out = vec![T::zero(); batch * granularity * n];
        for b in 0..batch {
            for s in 0..tokens {
                let wrow = &wd[(b * tokens + s) * n..(b * tokens + s + 1) * n];
                for g in 0..granularity {
                    let crow = ((b * tokens + s) * granularity + g) * n;
                    let orow = (b * granularity + g) * n;
                    for j in 0..n {
                        out[orow + j] = out[orow + j] + wrow[j] * cd[crow + j];
                    }
                }
            }
        }
        let rg = self.rg(weights) || self.rg(candidates);
        Ok(self.push(
            Tensor::matrix(batch * granularity, n, out)?,
            Op::Mixture {
                weights,
                candidates,
                tokens,
                granularity,
            },
            rg,
        ))
    }

    /// Inverted dropout; the identity outside training mode or for `p = 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return x;
        }
        let keep = T::one() / T::of(1.0 - p);
        let len = self.value(x).len();
        let rng = self.rng.as_mut().expect("training graph has an rng");
        let mask: Vec<T> = (0..len)
            .map(|_| {
                if rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let t = {
            let xv = self.value(x);
            let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
            Tensor::matrix(xv.rows(), xv.cols(), data).expect("same shape")
        };
        let rg = self.rg(x);
        self.push(t, Op::Dropout { x, mask }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::of_usize(t.len().max(1));
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let diff = self.zip_same(pred, target, "mse", |x, y| x - y)?;
        let s = diff.data().iter().map(|&d| d * d).sum::<T>() / T::of_usize(diff.len().max(1));
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(s), Op::Mse(pred, target), rg))
    }

    /// Reverse sweep from a scalar node. Gradients of earlier calls are cleared.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Domain("backward needs a scalar output".into()));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    /// Adds parameter gradients from the last backward pass into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (&id, &v) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                store.grad_mut(id).add_assign(g);
            }
        }
    }

    fn acc(&mut self, v: Var, t: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn acc_with(&mut self, v: Var, f: impl FnOnce(&Self) -> Tensor<T>) {
        if self.nodes[v.0].requires_grad {
            let t = f(self);
            self.acc(v, t);
        }
    }

    fn propagate(&mut self, i: usize, gout: &Tensor<T>) {
        let gd = gout.data();
        // Ops are matched by reference and their operands copied out so the
        // accumulators below can borrow `self` mutably.
        match &self.nodes[i].op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.shape(a);
                let n = self.shape(b).1;
                self.acc_with(a, |s| {
                    let mut da = vec![T::zero(); m * k];
                    matmul_nt_acc(gd, s.value(b).data(), &mut da, m, n, k);
                    Tensor::matrix(m, k, da).expect("shape")
                });
                self.acc_with(b, |s| {
                    let mut db = vec![T::zero(); k * n];
                    matmul_tn_acc(s.value(a).data(), gd, &mut db, m, k, n);
                    Tensor::matrix(k, n, db).expect("shape")
                });
            }
            &Op::Add(a, b) => {
                self.acc(a, gout.clone());
                self.acc(b, gout.clone());
            }
            &Op::Sub(a, b) => {
                self.acc(a, gout.clone());
                self.acc(b, gout.map(|x| -x));
            }
            &Op::Mul(a, b) => {
                self.acc_with(a, |s| zip_map(gout, s.value(b), |g, y| g * y));
                self.acc_with(b, |s| zip_map(gout, s.value(a), |g, x| g * x));
            }
            &Op::Scale(a, c) => self.acc(a, gout.map(|g| g * c)),
            &Op::AddBroadcast(x, b) => {
                self.acc(x, gout.clone());
                self.acc_with(b, |s| {
                    let (br, c) = s.shape(b);
                    let block = br * c;
                    let mut db = vec![T::zero(); block];
                    for (idx, &g) in gd.iter().enumerate() {
                        db[idx % block] = db[idx % block] + g;
                    }
                    Tensor::matrix(br, c, db).expect("shape")
                });
            }
            &Op::Gelu(x) => {
                self.acc_with(x, |s| zip_map(gout, s.value(x), |g, v| g * gelu_grad(v)));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (r, c) = dims(gout);
                let gam = self.value(gamma).data();
                let mut dx = vec![T::zero(); r * c];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let n = T::of_usize(c);
                for (row, &inv) in inv_std.iter().enumerate().take(r) {
                    let base = row * c;
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..c {
                        let g = gd[base + j];
                        let h = xhat[base + j];
                        dgamma[j] = dgamma[j] + g * h;
                        dbeta[j] = dbeta[j] + g;
                        let dh = g * gam[j];
                        mean_dh = mean_dh + dh;
                        mean_dh_h = mean_dh_h + dh * h;
                    }
                    mean_dh = mean_dh / n;
                    mean_dh_h = mean_dh_h / n;
                    for j in 0..c {
                        let dh = gd[base + j] * gam[j];
                        dx[base + j] = inv * (dh - mean_dh - xhat[base + j] * mean_dh_h);
                    }
                }
                self.acc(x, Tensor::matrix(r, c, dx).expect("shape"));
                self.acc(gamma, Tensor::matrix(1, c, dgamma).expect("shape"));
                self.acc(beta, Tensor::matrix(1, c, dbeta).expect("shape"));
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                weights,
            } => {
                let (q, k, v) = (*q, *k, *v);
                let (dq, dk, dv) = attention_backward(
                    gd,
                    self.value(q),
                    self.value(k),
                    self.value(v),
                    *shape,
                    weights,
                );
                self.acc(q, dq);
                self.acc(k, dk);
                self.acc(v, dv);
            }
            Op::Gather { x, index } => {
                let x = *x;
                if self.rg(x) {
                    let (r, c) = self.shape(x);
                    let mut dx = vec![T::zero(); r * c];
                    for (out_row, &src) in index.iter().enumerate() {
                        for j in 0..c {
                            dx[src * c + j] = dx[src * c + j] + gd[out_row * c + j];
                        }
                    }
                    self.acc(x, Tensor::matrix(r, c, dx).expect("shape"));
                }
            }
            Op::Concat(parts) => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.shape(p);
                    let slice = gd[offset..offset + r * c].to_vec();
                    offset += r * c;
                    self.acc(p, Tensor::matrix(r, c, slice).expect("shape"));
                }
            }
            &Op::Reshape(x) => {
                let (r, c) = self.shape(x);
                self.acc(x, Tensor::matrix(r, c, gd.to_vec()).expect("shape"));
            }
            &Op::BlockSoftmax { x, block } => {
                let y = self.nodes[i].value.data();
                let (r, c) = dims(gout);
                let mut dx = vec![T::zero(); r * c];
                for b in 0..r / block {
                    for j in 0..c {
                        let at = |s: usize| (b * block + s) * c + j;
                        let dot = (0..block).map(|s| y[at(s)] * gd[at(s)]).sum::<T>();
                        for s in 0..block {
                            dx[at(s)] = y[at(s)] * (gd[at(s)] - dot);
                        }
                    }
                }
                self.acc(x, Tensor::matrix(r, c, dx).expect("shape"));
            }
            &Op::Mixture {
                weights,
                candidates,
                tokens,
                granularity,
            } => {
                let (wr, n) = self.shape(weights);
                let batch = wr / tokens;
                let wd = self.value(weights).data();
                let cd = self.value(candidates).data();
                let mut dw = vec![T::zero(); wr * n];
                let mut dc = vec![T::zero(); wr * granularity * n];
                for b in 0..batch {
                    for s in 0..tokens {
                        let wrow = (b * tokens + s) * n;
                        for g in 0..granularity {
                            let crow = ((b * tokens + s) * granularity + g) * n;
                            let orow = (b * granularity + g) * n;
                            for j in 0..n {
                                dw[wrow + j] = dw[wrow + j] + gd[orow + j] * cd[crow + j];
                                dc[crow + j] = wd[wrow + j] * gd[orow + j];
                            }
                        }
                    }
                }
                self.acc(weights, Tensor::matrix(wr, n, dw).expect("shape"));
                self.acc(
                    candidates,
                    Tensor::matrix(wr * granularity, n, dc).expect("shape"),
                );
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                let data = gd.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                let (r, c) = dims(gout);
                self.acc(x, Tensor::matrix(r, c, data).expect("shape"));
            }
            &Op::Sum(x) => {
                let g = gd[0];
                let t = self.value(x).map(|_| g);
                self.acc(x, t);
            }
            &Op::Mean(x) => {
                let n = T::of_usize(self.value(x).len().max(1));
                let g = gd[0] / n;
                let t = self.value(x).map(|_| g);
                self.acc(x, t);
            }
            &Op::Mse(p, t) => {
                let n = T::of_usize(self.value(p).len().max(1));
                let two_g = (T::one() + T::one()) * gd[0] / n;
                let diff = zip_map(self.value(p), self.value(t), |a, b| (a - b) * two_g);
                self.acc_with(t, |_| diff.map(|d| -d));
                self.acc(p, diff);
            }
        }
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::matrix(a.rows(), a.cols(), data).expect("same shape")
}

fn gelu_consts<T: Scalar>() -> (T, T) {
    (T::of((2.0 / std::f64::consts::PI).sqrt()), T::of(0.044715))
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

fn attention_backward<T: Scalar>(
    gd: &[T],
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    shape: AttentionShape,
    weights: &[T],
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let AttentionShape {
        batch,
        heads,
        seq_q,
        seq_k,
    } = shape;
    let d = q.cols();
    let dh = d / heads;
    let scale = T::one() / T::of_usize(dh).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut dq = vec![T::zero(); qd.len()];
    let mut dk = vec![T::zero(); kd.len()];
    let mut dv = vec![T::zero(); vd.len()];
    let mut dw = vec![T::zero(); seq_k];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            for i in 0..seq_q {
                let wbase = ((b * heads + h) * seq_q + i) * seq_k;
                let orow = (b * seq_q + i) * d + off;
                let grow = &gd[orow..orow + dh];
                let mut dot = T::zero();
                for j in 0..seq_k {
                    let w = weights[wbase + j];
                    let vrow = (b * seq_k + j) * d + off;
                    let mut s = T::zero();
                    for c in 0..dh {
                        s = s + grow[c] * vd[vrow + c];
                        dv[vrow + c] = dv[vrow + c] + w * grow[c];
                    }
                    dw[j] = s;
                    dot = dot + w * s;
                }
                for j in 0..seq_k {
                    let ds = weights[wbase + j] * (dw[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let krow = (b * seq_k + j) * d + off;
                    for c in 0..dh {
                        dq[orow + c] = dq[orow + c] + ds * kd[krow + c];
                        dk[krow + c] = dk[krow + c] + ds * qd[orow + c];
                    }
                }
            }
        }
    }
    let mk = |data: Vec<T>, like: &Tensor<T>| {
        Tensor::matrix(like.rows(), like.cols(), data).expect("shape")
    };
    (mk(dq, q), mk(dk, k), mk(dv, v))
}
