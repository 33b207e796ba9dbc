//! Layers built on the tape: affine maps, layer norm, multi-head
//! self-attention, feed-forward and pre-norm encoder blocks.

use super::graph::{Graph, Var};
use super::optim::{ParamId, ParameterStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Per-forward state: training flag and the dropout stream.
pub struct ForwardCtx {
    pub dropout: f64,
    rng: Option<Rng>,
    /// Attention weights of every head, recorded when enabled.
    pub attention_trace: Option<Vec<Tensor>>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            dropout: 0.0,
            rng: None,
            attention_trace: None,
        }
    }

    /// Training mode. The dropout mask depends only on `(seed, step)`.
    pub fn train(dropout: f64, seed: u64, step: u64) -> Self {
        ForwardCtx {
            dropout,
            rng: Some(rng::stream(seed, &[rng::tag::DROPOUT, step])),
            attention_trace: None,
        }
    }

    pub fn with_attention_trace(mut self) -> Self {
        self.attention_trace = Some(Vec::new());
        self
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn dropout(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        let p = self.dropout;
        match &mut self.rng {
            Some(r) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let mask = (0..g.value(x).len())
                    .map(|_| if rng::unit(r) < p { 0.0 } else { keep })
                    .collect();
                g.mask(x, mask)
            }
            _ => Ok(x),
        }
    }
}

/// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
fn uniform_init(rng: &mut Rng, fan_in: usize, shape: Vec<usize>) -> Result<Tensor> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng::uniform(rng, -bound, bound)).collect())
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParameterStore, rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), uniform_init(rng, fan_in, vec![fan_in, fan_out])?)?;
        let bias = store.add(format!("{name}.bias"), uniform_init(rng, fan_in, vec![1, fan_out])?)?;
        Ok(Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, store: &ParameterStore, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParameterStore, name: &str, dim: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::matrix(1, dim, vec![1.0; dim])?)?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![1, dim]))?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward(&self, store: &ParameterStore, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        g.layer_norm(x, gamma, beta)
    }
}

/// Multi-head self-attention without positional information, so the map
/// is equivariant to any permutation of the input rows.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParameterStore, rng: &mut Rng, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::arg(format!("model dim {dim} not divisible by {heads} heads")));
        }
        Ok(SelfAttention {
            query: Linear::new(store, rng, &format!("{name}.q"), dim, dim)?,
            key: Linear::new(store, rng, &format!("{name}.k"), dim, dim)?,
            value: Linear::new(store, rng, &format!("{name}.v"), dim, dim)?,
            out: Linear::new(store, rng, &format!("{name}.o"), dim, dim)?,
            heads,
            dim,
        })
    }

    pub fn forward(&self, store: &ParameterStore, g: &mut Graph, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let cols = g.value(x).cols();
        if cols != self.dim {
            return Err(Error::Shape {
                op: "self_attention",
                left: g.value(x).shape().to_vec(),
                right: vec![self.dim],
            });
        }
        let q = self.query.forward(store, g, x)?;
        let k = self.key.forward(store, g, x)?;
        let v = self.value.forward(store, g, x)?;
        let dh = self.dim / self.heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, inv_sqrt)?;
            let attn = g.softmax_rows(scores)?;
            if let Some(trace) = &mut ctx.attention_trace {
                trace.push(g.value(attn).clone());
            }
            heads.push(g.matmul(attn, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        self.out.forward(store, g, cat)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParameterStore, rng: &mut Rng, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(store, rng, &format!("{name}.up"), dim, hidden)?,
            down: Linear::new(store, rng, &format!("{name}.down"), hidden, dim)?,
        })
    }

    pub fn forward(&self, store: &ParameterStore, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(store, g, x)?;
        let h = g.relu(h)?;
        self.down.forward(store, g, h)
    }
}

/// Pre-norm transformer encoder block:
/// `x + drop(attn(ln(x)))`, then `x + drop(ffn(ln(x)))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln_attn: LayerNorm,
    pub attn: SelfAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut Rng,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(EncoderBlock {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim)?,
            attn: SelfAttention::new(store, rng, &format!("{name}.attn"), dim, heads)?,
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), dim)?,
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim, hidden)?,
        })
    }

    pub fn forward(&self, store: &ParameterStore, g: &mut Graph, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let h = self.ln_attn.forward(store, g, x)?;
        let h = self.attn.forward(store, g, h, ctx)?;
        let h = ctx.dropout(g, h)?;
        let x = g.add(x, h)?;
        let h = self.ln_ffn.forward(store, g, x)?;
        let h = self.ffn.forward(store, g, h)?;
        let h = ctx.dropout(g, h)?;
        g.add(x, h)
    }
}
