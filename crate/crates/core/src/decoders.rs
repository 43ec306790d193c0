//! Caption decoders: an LSTM fed a fixed image/keyword context at every step,
//! and a post-norm transformer decoder attending over fused memory rows.
//!
//! Both decoders share the word embedding table with the keyword side of the
//! model. Teacher-forced passes consume `START w1 .. wn` and predict
//! `w1 .. wn END`; the per-example loss is the summed token cross-entropy, to
//! be divided by the token count of the batch.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{causal_mask, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{self, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::text::{TokenSequence, START_ID};

/// Input/target split of a `START .. END` sequence.
pub fn shift(seq: &TokenSequence) -> Result<(Vec<usize>, Vec<usize>)> {
    let toks = seq.tokens();
    if toks.len() < 2 || toks[0] != START_ID {
        return Err(Error::Contract(
            "teacher forcing needs a START-wrapped sequence of length >= 2".into(),
        ));
    }
    Ok((toks[..toks.len() - 1].to_vec(), toks[1..].to_vec()))
}

/// Optional dropout source for training passes.
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut ChaCha8Rng,
}

pub(crate) fn maybe_dropout(tape: &mut Tape, x: Var, drop: &mut Option<Dropout<'_>>) -> Result<Var> {
    match drop {
        Some(d) => tape.dropout(x, d.p, Mode::Train, d.rng),
        None => Ok(x),
    }
}

/// Four-gate LSTM cell over `[context, x, h]`.
///
/// The weight matrix of the concatenated input is stored as three row blocks
/// (context, token, recurrent) so the constant context contribution can be
/// computed once per sequence.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ctx: ParamId,
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, ctx_dim: usize, in_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let total = ctx_dim + in_dim + hidden;
        let w = params::xavier(rng, total, 4 * hidden);
        let block = |start: usize, rows: usize| {
            let cols = 4 * hidden;
            Tensor::new(vec![rows, cols], w.data()[start * cols..(start + rows) * cols].to_vec()).expect("block")
        };
        LstmCell {
            w_ctx: store.insert(format!("{name}.w_ctx"), block(0, ctx_dim)),
            w_x: store.insert(format!("{name}.w_x"), block(ctx_dim, in_dim)),
            w_h: store.insert(format!("{name}.w_h"), block(ctx_dim + in_dim, hidden)),
            bias: store.insert(format!("{name}.bias"), params::bias(4 * hidden)),
            hidden,
        }
    }

    /// `ctx·W_ctx + b`, shared by every step.
    pub fn context_gates(&self, tape: &mut Tape, store: &ParamStore, ctx: Var) -> Result<Var> {
        let w = tape.param(store, self.w_ctx);
        let b = tape.param(store, self.bias);
        let g = tape.matmul(ctx, w)?;
        tape.add_row(g, b)
    }

    /// Token contributions `x·W_x` for a block of rows.
    pub fn input_gates(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w_x);
        tape.matmul(x, w)
    }

    /// One update from precomputed context and token gate contributions.
    pub fn step(&self, tape: &mut Tape, store: &ParamStore, ctx_gates: Var, x_gates: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let wh = tape.param(store, self.w_h);
        let hg = tape.matmul(h, wh)?;
        let g = tape.add(ctx_gates, x_gates)?;
        let g = tape.add(g, hg)?;
        let n = self.hidden;
        let i = tape.slice_cols(g, 0, n)?;
        let f = tape.slice_cols(g, n, n)?;
        let cand = tape.slice_cols(g, 2 * n, n)?;
        let o = tape.slice_cols(g, 3 * n, n)?;
        let i = tape.sigmoid(i);
        let f = tape.sigmoid(f);
        let cand = tape.tanh(cand);
        let o = tape.sigmoid(o);
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, cand)?;
        let c_next = tape.add(keep, write)?;
        let tc = tape.tanh(c_next);
        let h_next = tape.mul(o, tc)?;
        Ok((h_next, c_next))
    }

    /// Full update from raw inputs: context `[1 × ctx]`, token `[1 × in]`.
    pub fn step_raw(&self, tape: &mut Tape, store: &ParamStore, ctx: Var, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let cg = self.context_gates(tape, store, ctx)?;
        let xg = self.input_gates(tape, store, x)?;
        self.step(tape, store, cg, xg, h, c)
    }
}

/// LSTM caption decoder. Input at each step is `[e, k_final, x_t]` where
/// `e = φ(I)·W_d` and `k_final` stay fixed across steps.
#[derive(Clone, Debug)]
pub struct LstmDecoder {
    pub image_proj: Linear,
    pub forward_cell: LstmCell,
    pub backward_cell: Option<LstmCell>,
    pub output: Linear,
    pub output_backward: Option<Linear>,
    pub embed_dim: usize,
    pub context_dim: usize,
}

/// Running LSTM state during decoding.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        image_dim: usize,
        embed_dim: usize,
        fused_dim: usize,
        hidden: usize,
        vocab: usize,
        bidirectional: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let image_proj = Linear::new(store, "lstm.image_proj", image_dim, embed_dim, false, rng);
        let context_dim = embed_dim + fused_dim;
        let forward_cell = LstmCell::new(store, "lstm.forward", context_dim, embed_dim, hidden, rng);
        let output = Linear::new(store, "lstm.output", hidden, vocab, true, rng);
        let (backward_cell, output_backward) = if bidirectional {
            (
                Some(LstmCell::new(store, "lstm.backward", context_dim, embed_dim, hidden, rng)),
                Some(Linear::new(store, "lstm.output_backward", hidden, vocab, true, rng)),
            )
        } else {
            (None, None)
        };
        LstmDecoder {
            image_proj,
            forward_cell,
            backward_cell,
            output,
            output_backward,
            embed_dim,
            context_dim,
        }
    }

    pub fn hidden(&self) -> usize {
        self.forward_cell.hidden
    }

    /// `[e, k]` with multi-row fused context mean-pooled to one row.
    pub fn context(&self, tape: &mut Tape, store: &ParamStore, pooled: Var, k_final: Var) -> Result<Var> {
        let e = self.image_proj.forward(tape, store, pooled)?;
        let k = if tape.value(k_final).rows() > 1 {
            tape.mean_rows(k_final)?
        } else {
            k_final
        };
        tape.concat_last(&[e, k])
    }

    fn run(&self, tape: &mut Tape, store: &ParamStore, cell: &LstmCell, ctx: Var, xs: Var, reverse: bool) -> Result<Var> {
        let steps = tape.value(xs).rows();
        let cg = cell.context_gates(tape, store, ctx)?;
        let xg = cell.input_gates(tape, store, xs)?;
        let mut h = tape.constant(Tensor::zeros(&[1, cell.hidden]));
        let mut c = h;
        let mut hs = vec![h; steps];
        for s in 0..steps {
            let t = if reverse { steps - 1 - s } else { s };
            let xt = tape.slice_rows(xg, t, 1)?;
            (h, c) = cell.step(tape, store, cg, xt, h, c)?;
            hs[t] = h;
        }
        tape.concat_rows(&hs)
    }

    /// Teacher-forced logits `[T × V]` and their targets.
    pub fn teacher_forced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        embedding: ParamId,
        pooled: Var,
        k_final: Var,
        seq: &TokenSequence,
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<(Var, Vec<usize>)> {
        let (inputs, targets) = shift(seq)?;
        let ctx = self.context(tape, store, pooled, k_final)?;
        let table = tape.param(store, embedding);
        let xs = tape.gather_rows(table, &inputs)?;
        let xs = maybe_dropout(tape, xs, drop)?;
        let hf = self.run(tape, store, &self.forward_cell, ctx, xs, false)?;
        let mut logits = self.output.forward(tape, store, hf)?;
        if let (Some(cell), Some(out)) = (&self.backward_cell, &self.output_backward) {
            let hb = self.run(tape, store, cell, ctx, xs, true)?;
            let lb = out.forward(tape, store, hb)?;
            let sum = tape.add(logits, lb)?;
            logits = tape.scale(sum, 0.5);
        }
        Ok((logits, targets))
    }

    /// Constant gate contribution of the context, for decoding.
    pub fn context_gates(&self, store: &ParamStore, pooled: &Tensor, k_final: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let p = tape.constant(pooled.clone());
        let k = tape.constant(k_final.clone());
        let ctx = self.context(&mut tape, store, p, k)?;
        let g = self.forward_cell.context_gates(&mut tape, store, ctx)?;
        Ok(tape.value(g).clone())
    }

    pub fn initial_state(&self) -> LstmState {
        let z = Tensor::zeros(&[1, self.hidden()]);
        LstmState { h: z.clone(), c: z }
    }

    /// Forward-direction step: feed `token`, return the new state and logits.
    pub fn step(&self, store: &ParamStore, embedding: ParamId, ctx_gates: &Tensor, state: &LstmState, token: usize) -> Result<(LstmState, Tensor)> {
        let mut tape = Tape::inference();
        let cg = tape.constant(ctx_gates.clone());
        let table = tape.param(store, embedding);
        let x = tape.gather_rows(table, &[token])?;
        let xg = self.forward_cell.input_gates(&mut tape, store, x)?;
        let h = tape.constant(state.h.clone());
        let c = tape.constant(state.c.clone());
        let (h, c) = self.forward_cell.step(&mut tape, store, cg, xg, h, c)?;
        let logits = self.output.forward(&mut tape, store, h)?;
        Ok((
            LstmState {
                h: tape.value(h).clone(),
                c: tape.value(c).clone(),
            },
            tape.value(logits).clone(),
        ))
    }
}

/// Fixed sinusoidal position table `[len × dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 / rate;
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, dim], data).expect("shape")
}

/// Post-norm block: masked self-attention, cross-attention over memory, FFN;
/// each sub-layer wrapped as `LayerNorm(x + sublayer(x))`.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

impl DecoderBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, mem_dim: usize, heads: usize, ffn: usize, eps: f64, rng: &mut ChaCha8Rng) -> Self {
        DecoderBlock {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), hidden, hidden, heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), hidden, eps),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), hidden, mem_dim, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), hidden, eps),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), hidden, ffn, hidden, rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), hidden, eps),
        }
    }

    /// Returns the block output and per-head cross-attention weights.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, memory: Var) -> Result<(Var, Vec<Var>)> {
        let n = tape.value(x).rows();
        let mask = causal_mask(n);
        let (a, _) = self.self_attn.forward(tape, store, x, x, Some(&mask))?;
        let a = tape.add(x, a)?;
        let a = self.norm1.forward(tape, store, a)?;
        let (b, weights) = self.cross_attn.forward(tape, store, a, memory, None)?;
        let b = tape.add(a, b)?;
        let b = self.norm2.forward(tape, store, b)?;
        let f = self.ffn.forward(tape, store, b)?;
        let f = tape.add(b, f)?;
        Ok((self.norm3.forward(tape, store, f)?, weights))
    }
}

#[derive(Clone, Debug)]
pub struct TransformerDecoder {
    pub input_proj: Option<Linear>,
    pub blocks: Vec<DecoderBlock>,
    pub output: Linear,
    pub hidden: usize,
    pub max_len: usize,
    pub positions: Tensor,
}

/// Transformer outputs for a prefix.
#[derive(Clone, Copy, Debug)]
pub struct TransformerPass {
    /// `[T × V]`
    pub logits: Var,
    /// Last-block cross-attention averaged over heads, `[T × M]`.
    pub cross_attention: Var,
}

impl TransformerDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        embed_dim: usize,
        mem_dim: usize,
        hidden: usize,
        heads: usize,
        ffn: usize,
        blocks: usize,
        max_len: usize,
        vocab: usize,
        eps: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let input_proj = (embed_dim != hidden).then(|| Linear::new(store, "transformer.input_proj", embed_dim, hidden, false, rng));
        let blocks = (0..blocks)
            .map(|i| DecoderBlock::new(store, &format!("transformer.block{i}"), hidden, mem_dim, heads, ffn, eps, rng))
            .collect();
        TransformerDecoder {
            input_proj,
            blocks,
            output: Linear::new(store, "transformer.output", hidden, vocab, true, rng),
            hidden,
            max_len,
            positions: sinusoidal_positions(max_len, hidden),
        }
    }

    /// Run the decoder over `prefix` attending to `memory` (`[M × mem_dim]`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        embedding: ParamId,
        prefix: &[usize],
        memory: Var,
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<TransformerPass> {
        if prefix.is_empty() {
            return Err(Error::Contract("decoder prefix is empty".into()));
        }
        if prefix.len() > self.max_len {
            return Err(Error::Contract(format!(
                "prefix length {} exceeds max length {}",
                prefix.len(),
                self.max_len
            )));
        }
        let table = tape.param(store, embedding);
        let mut x = tape.gather_rows(table, prefix)?;
        if let Some(p) = &self.input_proj {
            x = p.forward(tape, store, x)?;
        }
        let pe = Tensor::new(
            vec![prefix.len(), self.hidden],
            self.positions.data()[..prefix.len() * self.hidden].to_vec(),
        )?;
        let pe = tape.constant(pe);
        x = tape.add(x, pe)?;
        x = maybe_dropout(tape, x, drop)?;
        let mut last = Vec::new();
        for block in &self.blocks {
            (x, last) = block.forward(tape, store, x, memory)?;
        }
        let mut avg = last[0];
        for &w in &last[1..] {
            avg = tape.add(avg, w)?;
        }
        let cross_attention = tape.scale(avg, 1.0 / last.len() as f64);
        Ok(TransformerPass {
            logits: self.output.forward(tape, store, x)?,
            cross_attention,
        })
    }

    pub fn teacher_forced(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        embedding: ParamId,
        memory: Var,
        seq: &TokenSequence,
        drop: &mut Option<Dropout<'_>>,
    ) -> Result<(Var, Vec<usize>)> {
        let (inputs, targets) = shift(seq)?;
        let pass = self.forward(tape, store, embedding, &inputs, memory, drop)?;
        Ok((pass.logits, targets))
    }

    /// Logits for the next token after `prefix`.
    pub fn step(&self, store: &ParamStore, embedding: ParamId, memory: &Tensor, prefix: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let m = tape.constant(memory.clone());
        let pass = self.forward(&mut tape, store, embedding, prefix, m, &mut None)?;
        let logits = tape.value(pass.logits);
        Ok(Tensor::row(logits.row_slice(prefix.len() - 1).to_vec()))
    }

    /// Head-averaged last-block cross-attention for every prefix position.
    pub fn cross_attention(&self, store: &ParamStore, embedding: ParamId, memory: &Tensor, prefix: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let m = tape.constant(memory.clone());
        let pass = self.forward(&mut tape, store, embedding, prefix, m, &mut None)?;
        Ok(tape.value(pass.cross_attention).clone())
    }
}

/// Mean over observations of `-log P[gold]` for explicit distributions.
pub fn cross_entropy_loss(distributions: &[Vec<f64>], gold: &[usize]) -> Result<f64> {
    if distributions.len() != gold.len() {
        return Err(Error::Dimension(format!(
            "{} distributions for {} gold tokens",
            distributions.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, &g) in distributions.iter().zip(gold) {
        let pg = *p.get(g).ok_or(Error::Vocabulary { id: g, size: p.len() })?;
        total -= pg.ln();
    }
    Ok(total / gold.len() as f64)
}
