//! Reusable parameterised building blocks: linear maps, layer norm,
//! position-wise feed-forward networks and (multi-head) scaled dot-product attention.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{self, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut ChaCha8Rng) -> Self {
        let weight = store.insert(format!("{name}.weight"), params::xavier(rng, in_dim, out_dim));
        let bias = bias.then(|| store.insert(format!("{name}.bias"), params::bias(out_dim)));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x · W (+ b)` for `x` of shape `[rows × in_dim]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64) -> Self {
        LayerNorm {
            gamma: store.insert(format!("{name}.gamma"), params::ones(dim)),
            beta: store.insert(format!("{name}.beta"), params::bias(dim)),
            eps,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }
}

/// `max(0, x·W₁ + b₁)·W₂ + b₂`, applied row by row.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            inner: Linear::new(store, &format!("{name}.inner"), dim, hidden, true, rng),
            outer: Linear::new(store, &format!("{name}.outer"), hidden, out, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.inner.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.outer.forward(tape, store, h)
    }
}

/// `softmax(q·kᵀ/√d_k)·v` with optional mask (`true` = blocked). Returns the
/// output and the attention weights.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    d_k: usize,
    mask: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d_k as f64).sqrt());
    let weights = tape.masked_softmax(scores, mask)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Row-major `[n × n]` mask blocking keys after each query position.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|idx| idx % n > idx / n).collect()
}

/// Broadcast a key-padding mask over `queries` rows.
pub fn key_mask(queries: usize, key_pad: &[bool]) -> Vec<bool> {
    (0..queries).flat_map(|_| key_pad.iter().copied()).collect()
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, kv_dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "heads must divide dim");
        MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true, rng),
            key: Linear::new(store, &format!("{name}.key"), kv_dim, dim, true, rng),
            value: Linear::new(store, &format!("{name}.value"), kv_dim, dim, true, rng),
            output: Linear::new(store, &format!("{name}.output"), dim, dim, true, rng),
            heads,
            dim,
        }
    }

    /// Attend from `x` (`[T × dim]`) over `memory` (`[S × kv_dim]`).
    /// Returns the projected output and per-head `[T × S]` weight nodes.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        memory: Var,
        mask: Option<&[bool]>,
    ) -> Result<(Var, Vec<Var>)> {
        let q = self.query.forward(tape, store, x)?;
        let k = self.key.forward(tape, store, memory)?;
        let v = self.value.forward(tape, store, memory)?;
        let hd = self.dim / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * hd, hd)?;
            let kh = tape.slice_cols(k, h * hd, hd)?;
            let vh = tape.slice_cols(v, h * hd, hd)?;
            let (o, w) = scaled_dot_attention(tape, qh, kh, vh, hd, mask)?;
            outs.push(o);
            weights.push(w);
        }
        let merged = tape.concat_last(&outs)?;
        Ok((self.output.forward(tape, store, merged)?, weights))
    }
}
