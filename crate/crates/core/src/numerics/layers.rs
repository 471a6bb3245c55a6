//! Differentiable building blocks: linear maps, layer norm, feed-forward,
//! multi-head attention, and pre-norm Transformer encoder/decoder stacks.
//!
//! Token batches are flat `(batch·len) × d_model` matrices; a [`SeqShape`]
//! says how to cut them into sequences.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{AttentionShape, Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqShape {
    pub batch: usize,
    pub len: usize,
}

impl SeqShape {
    pub fn new(batch: usize, len: usize) -> Self {
        Self { batch, len }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformerDims {
    pub d_model: usize,
    pub n_heads: usize,
    /// Feed-forward hidden width as a multiple of `d_model`.
    pub ff_mult: usize,
    pub dropout: f64,
}

impl TransformerDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.add_glorot(format!("{name}.weight"), in_dim, out_dim, rng)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[1, out_dim]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let (_, c) = g.shape(x);
        if c != self.in_dim {
            return Err(Error::Domain(format!(
                "linear layer expects width {}, got {c}",
                self.in_dim
            )));
        }
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_broadcast(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[1, dim], T::one()))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[1, dim]))?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Two linear layers with a GELU between them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        out_bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, true, rng)?,
            fc2: Linear::new(
                store,
                &format!("{name}.fc2"),
                hidden,
                out_dim,
                out_bias,
                rng,
            )?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, store, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.fc1.params();
        p.extend(self.fc2.params());
        p
    }
}

/// Multi-head attention with query/key/value/output projections.
///
/// The key projection has no bias: it would shift every score in a softmax
/// row by the same amount.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        n_heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} not divisible by {n_heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), d_model, d_model, true, rng)?,
            key: Linear::new(store, &format!("{name}.key"), d_model, d_model, false, rng)?,
            value: Linear::new(store, &format!("{name}.value"), d_model, d_model, true, rng)?,
            output: Linear::new(
                store,
                &format!("{name}.output"),
                d_model,
                d_model,
                true,
                rng,
            )?,
            n_heads,
        })
    }

    /// Returns the projected output and the raw attention node (for weights).
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        queries: Var,
        keys_values: Var,
        q_shape: SeqShape,
        kv_shape: SeqShape,
        key_mask: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        if q_shape.batch != kv_shape.batch {
            return Err(Error::Domain(format!(
                "query batch {} differs from key batch {}",
                q_shape.batch, kv_shape.batch
            )));
        }
        let q = self.query.forward(g, store, queries)?;
        let k = self.key.forward(g, store, keys_values)?;
        let v = self.value.forward(g, store, keys_values)?;
        let shape = AttentionShape {
            batch: q_shape.batch,
            heads: self.n_heads,
            seq_q: q_shape.len,
            seq_k: kv_shape.len,
        };
        let attn = g.attention(q, k, v, shape, key_mask)?;
        Ok((self.output.forward(g, store, attn)?, attn))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
    pub dropout: f64,
}

impl EncoderLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: TransformerDims,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = dims.d_model;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d)?,
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, dims.n_heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d)?,
            ff: FeedForward::new(
                store,
                &format!("{name}.ff"),
                d,
                d * dims.ff_mult,
                d,
                true,
                rng,
            )?,
            dropout: dims.dropout,
        })
    }

    /// Returns the layer output and its self-attention node.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        shape: SeqShape,
    ) -> Result<(Var, Var)> {
        let h = self.norm1.forward(g, store, x)?;
        let (a, weights) = self.attn.forward(g, store, h, h, shape, shape, None)?;
        let a = g.dropout(a, self.dropout);
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, store, x)?;
        let f = self.ff.forward(g, store, h)?;
        let f = g.dropout(f, self.dropout);
        Ok((g.add(x, f)?, weights))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm3: LayerNorm,
    pub ff: FeedForward,
    pub dropout: f64,
}

impl DecoderLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: TransformerDims,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = dims.d_model;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d)?,
            self_attn: MultiHeadAttention::new(
                store,
                &format!("{name}.self_attn"),
                d,
                dims.n_heads,
                rng,
            )?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d)?,
            cross_attn: MultiHeadAttention::new(
                store,
                &format!("{name}.cross_attn"),
                d,
                dims.n_heads,
                rng,
            )?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d)?,
            ff: FeedForward::new(
                store,
                &format!("{name}.ff"),
                d,
                d * dims.ff_mult,
                d,
                true,
                rng,
            )?,
            dropout: dims.dropout,
        })
    }

    /// Returns the output plus the self- and cross-attention nodes.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        memory: Var,
        shape: SeqShape,
        memory_shape: SeqShape,
    ) -> Result<(Var, Var, Var)> {
        let h = self.norm1.forward(g, store, x)?;
        let (a, self_w) = self.self_attn.forward(g, store, h, h, shape, shape, None)?;
        let a = g.dropout(a, self.dropout);
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, store, x)?;
        let (c, cross_w) =
            self.cross_attn
                .forward(g, store, h, memory, shape, memory_shape, None)?;
        let c = g.dropout(c, self.dropout);
        let x = g.add(x, c)?;
        let h = self.norm3.forward(g, store, x)?;
        let f = self.ff.forward(g, store, h)?;
        let f = g.dropout(f, self.dropout);
        Ok((g.add(x, f)?, self_w, cross_w))
    }
}

fn check_width<T: Scalar>(g: &Graph<T>, x: Var, d_model: usize, shape: SeqShape) -> Result<()> {
    let (r, c) = g.shape(x);
    if c != d_model {
        return Err(Error::Domain(format!(
            "tokens have width {c}, stack expects d_model {d_model}"
        )));
    }
    if r != shape.rows() {
        return Err(Error::Domain(format!(
            "{r} token rows do not match {} sequences of {}",
            shape.batch, shape.len
        )));
    }
    Ok(())
}

/// Pre-norm encoder stack. A non-empty stack ends with a layer norm; an empty
/// stack is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerEncoder {
    pub d_model: usize,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: Option<LayerNorm>,
}

impl TransformerEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        n_layers: usize,
        dims: TransformerDims,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        dims.validate()?;
        let layers = (0..n_layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layers.{i}"), dims, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = if n_layers > 0 {
            Some(LayerNorm::new(
                store,
                &format!("{name}.final_norm"),
                dims.d_model,
            )?)
        } else {
            None
        };
        Ok(Self {
            d_model: dims.d_model,
            layers,
            final_norm,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        shape: SeqShape,
    ) -> Result<Var> {
        Ok(self.forward_traced(g, store, x, shape)?.0)
    }

    /// Also returns each layer's self-attention node.
    pub fn forward_traced<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mut x: Var,
        shape: SeqShape,
    ) -> Result<(Var, Vec<Var>)> {
        check_width(g, x, self.d_model, shape)?;
        let mut attn = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, w) = layer.forward(g, store, x, shape)?;
            x = y;
            attn.push(w);
        }
        if let Some(norm) = &self.final_norm {
            x = norm.forward(g, store, x)?;
        }
        Ok((x, attn))
    }
}

/// Pre-norm decoder stack with cross-attention to an encoder memory.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerDecoder {
    pub d_model: usize,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: Option<LayerNorm>,
}

impl TransformerDecoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        n_layers: usize,
        dims: TransformerDims,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        dims.validate()?;
        let layers = (0..n_layers)
            .map(|i| DecoderLayer::new(store, &format!("{name}.layers.{i}"), dims, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = if n_layers > 0 {
            Some(LayerNorm::new(
                store,
                &format!("{name}.final_norm"),
                dims.d_model,
            )?)
        } else {
            None
        };
        Ok(Self {
            d_model: dims.d_model,
            layers,
            final_norm,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mut x: Var,
        memory: Var,
        shape: SeqShape,
        memory_shape: SeqShape,
    ) -> Result<Var> {
        check_width(g, x, self.d_model, shape)?;
        check_width(g, memory, self.d_model, memory_shape)?;
        for layer in &self.layers {
            x = layer.forward(g, store, x, memory, shape, memory_shape)?.0;
        }
        if let Some(norm) = &self.final_norm {
            x = norm.forward(g, store, x)?;
        }
        Ok(x)
    }
}
