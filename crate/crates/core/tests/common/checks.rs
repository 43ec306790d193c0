//! Criterion-level checks. Each returns a one-line summary on success and a
//! description of the first violation otherwise.

use std::path::{Path, PathBuf};

use clap::Parser;
use medcap::autodiff::{Mode, Tape, Var};
use medcap::cli::{self, Cli};
use medcap::config::{DecoderKind, FusionKind, HyperConfig};
use medcap::decoders::{LstmCell, LstmDecoder, TransformerDecoder};
use medcap::encoders::{EncoderBlock, KeywordEncoder, MaskedSelfAttention};
use medcap::fusion::Fusion;
use medcap::heads::{multilabel_bce, prec_at_k, rank_classes};
use medcap::layers::{causal_mask, key_mask, scaled_dot_attention, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use medcap::metrics::{self, Tokens};
use medcap::model::{Decoder, Model};
use medcap::params::ParamStore;
use medcap::search::{beam_decode, greedy_decode};
use medcap::tensor::Tensor;
use medcap::text::{TokenSequence, END, END_ID, PAD, SEP, START, START_ID, UNK};
use medcap::trainer::Checkpoint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fixtures::{exhaustive_best, micro_cfg, micro_example, RandomModel, TableModel, MICRO_VOCAB};
use super::grad::{self, project, random, GradCheck};
use super::metric_oracle as oracle;

pub type Check = Result<String, String>;

type LossFn = Box<dyn Fn(&mut Tape, &ParamStore) -> medcap::Result<Var>>;

// ---------------------------------------------------------------- gradients

/// Every tape operation and layer on small random inputs.
pub fn op_gradients() -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut s = ParamStore::new();
    let a = s.insert("a", random(&mut rng, &[3, 4], 1.0));
    let b = s.insert("b", random(&mut rng, &[4, 2], 1.0));
    let c = s.insert("c", random(&mut rng, &[3, 4], 1.0));
    let r = s.insert("r", random(&mut rng, &[1, 4], 1.0));
    let gamma = s.insert("gamma", random(&mut rng, &[4], 1.0));
    let beta = s.insert("beta", random(&mut rng, &[4], 1.0));
    let ctx = s.insert("ctx", random(&mut rng, &[1, 3], 1.0));
    let x1 = s.insert("x1", random(&mut rng, &[1, 4], 1.0));
    let h1 = s.insert("h1", random(&mut rng, &[1, 5], 1.0));
    let c1 = s.insert("c1", random(&mut rng, &[1, 5], 1.0));
    let linear = Linear::new(&mut s, "linear", 4, 3, true, &mut rng);
    let norm = LayerNorm::new(&mut s, "norm", 4, 1e-5);
    let ffn = FeedForward::new(&mut s, "ffn", 4, 6, 4, &mut rng);
    let mha = MultiHeadAttention::new(&mut s, "mha", 4, 4, 2, &mut rng);
    let msa = MaskedSelfAttention::new(&mut s, "msa", 4, 4, &mut rng);
    let block = EncoderBlock::new(&mut s, "block", 4, 4, 6, 1e-5, &mut rng);
    let cell = LstmCell::new(&mut s, "cell", 3, 4, 5, &mut rng);
    // Perturb LayerNorm's unit/zero init so its gradient is generic.
    for name in ["norm.gamma", "norm.beta"] {
        if let Some(id) = s.id(name) {
            *s.get_mut(id) = random(&mut rng, &[4], 1.0);
        }
    }

    let mask: Vec<bool> = vec![
        false, true, false, true, //
        true, true, true, true, //
        false, false, false, true,
    ];
    let ops: Vec<(&str, LossFn)> = vec![
        ("matmul", Box::new(move |t, s| {
            let (x, y) = (t.param(s, a), t.param(s, b));
            let z = t.matmul(x, y)?;
            project(t, z)
        })),
        ("transpose", Box::new(move |t, s| {
            let x = t.param(s, a);
            let z = t.transpose(x)?;
            project(t, z)
        })),
        ("add", Box::new(move |t, s| {
            let (x, y) = (t.param(s, a), t.param(s, c));
            let z = t.add(x, y)?;
            project(t, z)
        })),
        ("sub", Box::new(move |t, s| {
            let (x, y) = (t.param(s, a), t.param(s, c));
            let z = t.sub(x, y)?;
            project(t, z)
        })),
        ("mul", Box::new(move |t, s| {
            let (x, y) = (t.param(s, a), t.param(s, c));
            let z = t.mul(x, y)?;
            project(t, z)
        })),
        ("add_row", Box::new(move |t, s| {
            let (x, y) = (t.param(s, a), t.param(s, r));
            let z = t.add_row(x, y)?;
            project(t, z)
        })),
        ("scale", Box::new(move |t, s| {
            let x = t.param(s, a);
            let z = t.scale(x, -0.7);
            project(t, z)
        })),
        ("relu", Box::new(move |t, s| {
            let x = t.param(s, a);
            let z = t.relu(x);
            project(t, z)
        })),
        ("sigmoid", Box::new(move |t, s| {
            let x = t.param(s, a);
            let z = t.sigmoid(x);
            project(t, z)
        })),
        ("tanh", Box::new(move |t, s| {
            let x = t.param(s, a);
            let z = t.tanh(x);
            project(t, z)
        })),
        ("softmax", Box::new(move |t, s| {
            let x = t.param(s, a);
            let z = t.softmax(x)?;
            project(t, z)
        })),
        ("masked_softmax", Box::new(move |t, s| {
            let x = t.param(s, a);
            let z = t.masked_softmax(x, Some(&mask))?;
            project(t, z)
        })),
        ("layer_norm", Box::new(move |t, s| {
            let (x, g, bb) = (t.param(s, a), t.param(s, gamma), t.param(s, beta));
            let z = t.layer_norm(x, g, bb, 1e-5)?;
            project(t, z)
        })),
        ("concat_last", Box::new(move |t, s| {
            let (x, y) = (t.param(s, a), t.param(s, c));
            let z = t.concat_last(&[x, y, x])?;
            project(t, z)
        })),
        ("concat_rows", Box::new(move |t, s| {
            let (x, y) = (t.param(s, a), t.param(s, r));
            let z = t.concat_rows(&[x, y])?;
            project(t, z)
        })),
        ("slice_cols", Box::new(move |t, s| {
            let x = t.param(s, a);
            let z = t.slice_cols(x, 1, 2)?;
            project(t, z)
        })),
        ("slice_rows", Box::new(move |t, s| {
            let x = t.param(s, a);
            let z = t.slice_rows(x, 1, 2)?;
            project(t, z)
        })),
        ("gather_rows", Box::new(move |t, s| {
            let x = t.param(s, a);
            let z = t.gather_rows(x, &[2, 0, 2, 1])?;
            project(t, z)
        })),
        ("reshape", Box::new(move |t, s| {
            let x = t.param(s, a);
            let z = t.reshape(x, &[2, 6])?;
            project(t, z)
        })),
        ("sum", Box::new(move |t, s| {
            let (x, y) = (t.param(s, a), t.param(s, c));
            let z = t.mul(x, y)?;
            Ok(t.sum(z))
        })),
        ("mean_rows", Box::new(move |t, s| {
            let x = t.param(s, a);
            let z = t.mean_rows(x)?;
            project(t, z)
        })),
        ("cross_entropy", Box::new(move |t, s| {
            let x = t.param(s, a);
            t.cross_entropy(x, &[1, 3, 0])
        })),
        ("dropout", Box::new(move |t, s| {
            let x = t.param(s, a);
            let z = t.dropout(x, 0.3, Mode::Train, &mut ChaCha8Rng::seed_from_u64(3))?;
            project(t, z)
        })),
        ("multilabel_bce", Box::new(move |t, s| {
            let x = t.param(s, r);
            multilabel_bce(t, x, &[true, false, true, false])
        })),
        ("scaled_dot_attention", Box::new(move |t, s| {
            let (q, k) = (t.param(s, a), t.param(s, c));
            let (z, _) = scaled_dot_attention(t, q, k, k, 4, Some(&causal_mask(3)))?;
            project(t, z)
        })),
        ("linear", Box::new(move |t, s| {
            let x = t.param(s, a);
            let z = linear.forward(t, s, x)?;
            project(t, z)
        })),
        ("layer_norm_layer", Box::new(move |t, s| {
            let x = t.param(s, a);
            let z = norm.forward(t, s, x)?;
            project(t, z)
        })),
        ("feed_forward", Box::new(move |t, s| {
            let x = t.param(s, a);
            let z = ffn.forward(t, s, x)?;
            project(t, z)
        })),
        ("multi_head_attention", Box::new(move |t, s| {
            let (x, m) = (t.param(s, a), t.param(s, c));
            let (z, _) = mha.forward(t, s, x, m, Some(&causal_mask(3)))?;
            project(t, z)
        })),
        ("masked_self_attention", Box::new(move |t, s| {
            let x = t.param(s, a);
            let (z, _) = msa.forward(t, s, x)?;
            project(t, z)
        })),
        ("encoder_block", Box::new(move |t, s| {
            let x = t.param(s, a);
            let z = block.forward(t, s, x)?;
            project(t, z)
        })),
        ("lstm_cell", Box::new(move |t, s| {
            let (cx, x, h, cc) = (t.param(s, ctx), t.param(s, x1), t.param(s, h1), t.param(s, c1));
            let (h2, c2) = cell.step_raw(t, s, cx, x, h, cc)?;
            let z = t.concat_last(&[h2, c2])?;
            project(t, z)
        })),
    ];
    ops.into_iter().map(|(n, f)| grad::check(n, &s, f)).collect()
}

fn keywords() -> TokenSequence {
    TokenSequence::padded(vec![5, 4, 6], 4)
}

/// Fusion blocks, keyword encoder and the decoders on micro sizes.
pub fn component_gradients() -> Vec<GradCheck> {
    let mut out = Vec::new();
    for kind in [FusionKind::Transfuser, FusionKind::Coattention, FusionKind::Contextual] {
        let cfg = micro_cfg(DecoderKind::Lstm, kind);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut s = ParamStore::new();
        let emb = s.insert("embedding", random(&mut rng, &[MICRO_VOCAB, 4], 0.5));
        let pooled = s.insert("pooled", random(&mut rng, &[1, 4], 1.0));
        let patches = s.insert("patches", random(&mut rng, &[4, 4], 1.0));
        let f = Fusion::new(&mut s, &cfg, &mut rng);
        let name = format!("fusion_{kind}");
        out.push(grad::check(&name, &s, move |t, s| {
            let (p, pt) = (t.param(s, pooled), t.param(s, patches));
            let fused = f.forward(t, s, p, pt, &keywords(), emb)?;
            project(t, fused.k_final)
        }));
    }

    {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut s = ParamStore::new();
        let emb = s.insert("embedding", random(&mut rng, &[MICRO_VOCAB, 4], 0.5));
        let enc = KeywordEncoder::new(&mut s, "kw", 4, 4, 6, 2, 1e-5, &mut rng);
        out.push(grad::check("keyword_encoder", &s, move |t, s| {
            let e = enc.encode(t, s, emb, &keywords())?;
            project(t, e.pooled)
        }));
    }

    let description = TokenSequence::padded(vec![START_ID, 5, 7, END_ID], 5);
    for bidirectional in [false, true] {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut s = ParamStore::new();
        let emb = s.insert("embedding", random(&mut rng, &[MICRO_VOCAB, 4], 0.5));
        let pooled = s.insert("pooled", random(&mut rng, &[1, 4], 1.0));
        let fused = s.insert("fused", random(&mut rng, &[1, 4], 1.0));
        let dec = LstmDecoder::new(&mut s, 4, 4, 4, 5, MICRO_VOCAB, bidirectional, &mut rng);
        let seq = description.clone();
        let name = if bidirectional { "lstm_decoder_3_steps_bidirectional" } else { "lstm_decoder_3_steps" };
        out.push(grad::check(name, &s, move |t, s| {
            let (p, k) = (t.param(s, pooled), t.param(s, fused));
            let (logits, targets) = dec.teacher_forced(t, s, emb, p, k, &seq, &mut None)?;
            t.cross_entropy(logits, &targets)
        }));
    }

    {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut s = ParamStore::new();
        let emb = s.insert("embedding", random(&mut rng, &[MICRO_VOCAB, 4], 0.5));
        let memory = s.insert("memory", random(&mut rng, &[4, 4], 1.0));
        let dec = TransformerDecoder::new(&mut s, 4, 4, 8, 2, 6, 2, 6, MICRO_VOCAB, 1e-5, &mut rng);
        let seq = TokenSequence::padded(vec![START_ID, 5, 7, 8, END_ID], 6);
        out.push(grad::check("transformer_decoder", &s, move |t, s| {
            let m = t.param(s, memory);
            let (logits, targets) = dec.teacher_forced(t, s, emb, m, &seq, &mut None)?;
            t.cross_entropy(logits, &targets)
        }));
    }

    let grid = [
        (DecoderKind::Lstm, FusionKind::Transfuser),
        (DecoderKind::Transformer, FusionKind::Transfuser),
        (DecoderKind::Transformer, FusionKind::Coattention),
        (DecoderKind::Lstm, FusionKind::Coattention),
        (DecoderKind::Transformer, FusionKind::Contextual),
        (DecoderKind::Lstm, FusionKind::Mul),
        (DecoderKind::Lstm, FusionKind::Concat),
    ];
    for (decoder, fusion) in grid {
        let cfg = micro_cfg(decoder, fusion);
        let (model, store) = Model::build(&cfg, MICRO_VOCAB, 3, 3).unwrap();
        let ex = micro_example(5);
        let cap = model.caption.clone();
        out.push(grad::check(&format!("caption_model_{decoder}_{fusion}"), &store, move |t, s| {
            Ok(cap.loss(t, s, &ex, &mut None)?.0)
        }));
    }

    let cfg = micro_cfg(DecoderKind::Lstm, FusionKind::Transfuser);
    let (model, store) = Model::build(&cfg, MICRO_VOCAB, 3, 3).unwrap();
    let ex = micro_example(6);
    let (pred, ex2) = (model.predictor.clone(), ex.clone());
    out.push(grad::check("keyword_predictor", &store, move |t, s| {
        let z = pred.logits(t, s, &ex2.image)?;
        multilabel_bce(t, z, &ex2.keyword_labels)
    }));
    let cls = model.classifier.clone();
    out.push(grad::check("disease_classifier", &store, move |t, s| {
        let z = cls.logits(t, s, &ex.image)?;
        t.cross_entropy(z, &[ex.disease])
    }));
    out
}

pub fn gradient_suite() -> Vec<GradCheck> {
    let mut v = op_gradients();
    v.extend(component_gradients());
    v
}

pub fn summarize_gradients(checks: &[GradCheck]) -> Check {
    if let Some(bad) = checks.iter().find(|c| !c.passed()) {
        return Err(format!(
            "{}: rel err {:.3e} at {} (tolerance {:.0e})",
            bad.name,
            bad.rel_err,
            bad.worst_param,
            grad::TOLERANCE
        ));
    }
    let worst = checks.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).unwrap();
    let scalars: usize = checks.iter().map(|c| c.scalars).sum();
    Ok(format!(
        "{} checks, {scalars} scalars, worst rel err {:.2e} ({})",
        checks.len(),
        worst.rel_err,
        worst.name
    ))
}

// ---------------------------------------------------------------- attention

fn check_rows(what: &str, w: &Tensor, mask: Option<&[bool]>) -> Result<f64, String> {
    let n = w.cols();
    let mut worst = 0.0f64;
    for row in 0..w.rows() {
        let vals = w.row_slice(row);
        let blocked = |j: usize| mask.is_some_and(|m| m[row * n + j]);
        if (0..n).all(blocked) {
            if vals.iter().any(|&v| v != 0.0) {
                return Err(format!("{what}: fully masked row {row} is not all zero"));
            }
            continue;
        }
        for (j, &v) in vals.iter().enumerate() {
            if blocked(j) && v != 0.0 {
                return Err(format!("{what}: masked entry ({row},{j}) = {v:e}"));
            }
        }
        let dev = (vals.iter().sum::<f64>() - 1.0).abs();
        worst = worst.max(dev);
        if dev > 1e-9 {
            return Err(format!("{what}: row {row} sums to 1 {dev:+e}"));
        }
    }
    Ok(worst)
}

/// Row sums and masked zeros for every attention map the model produces.
pub fn attention_rows() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    let mut maps = 0;

    let mut t = Tape::new();
    let q = t.constant(random(&mut rng, &[3, 4], 3.0));
    let k = t.constant(random(&mut rng, &[4, 4], 3.0));
    let pad = key_mask(3, &[false, true, false, true]);
    let (_, w) = scaled_dot_attention(&mut t, q, k, k, 4, Some(&pad)).map_err(|e| e.to_string())?;
    worst = worst.max(check_rows("key-padded attention", t.value(w), Some(&pad))?);
    let all = vec![true; 12];
    let (_, w) = scaled_dot_attention(&mut t, q, k, k, 4, Some(&all)).map_err(|e| e.to_string())?;
    check_rows("fully masked attention", t.value(w), Some(&all))?;
    maps += 2;

    let mut s = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut s, "mha", 4, 4, 2, &mut rng);
    let msa = MaskedSelfAttention::new(&mut s, "msa", 4, 4, &mut rng);
    let mut t = Tape::new();
    let x = t.constant(random(&mut rng, &[5, 4], 2.0));
    let causal = causal_mask(5);
    let (_, heads) = mha.forward(&mut t, &s, x, x, Some(&causal)).map_err(|e| e.to_string())?;
    for (h, w) in heads.iter().enumerate() {
        worst = worst.max(check_rows(&format!("self-attention head {h}"), t.value(*w), Some(&causal))?);
        maps += 1;
    }
    let (_, w) = msa.forward(&mut t, &s, x).map_err(|e| e.to_string())?;
    worst = worst.max(check_rows("keyword self-attention", t.value(w), Some(&causal))?);
    maps += 1;

    for fusion in [FusionKind::Transfuser, FusionKind::Coattention] {
        let cfg = micro_cfg(DecoderKind::Transformer, fusion);
        let (model, store) = Model::build(&cfg, MICRO_VOCAB, 3, 3).unwrap();
        let ex = micro_example(7);
        let ctx = model.caption.context(&store, &ex.image, &ex.keywords).map_err(|e| e.to_string())?;
        let att = ctx.fused.attention.as_ref().ok_or("fusion exported no attention")?;
        let m = key_mask(att.rows(), &ex.keywords.pad_mask());
        worst = worst.max(check_rows(&format!("{fusion} keyword attention"), att, Some(&m))?);
        let cross = model
            .caption
            .cross_attention(&store, &ctx, &[5, 7, END_ID])
            .map_err(|e| e.to_string())?;
        worst = worst.max(check_rows(&format!("{fusion} decoder cross-attention"), &cross, None)?);
        maps += 2;
    }
    Ok(format!("{maps} attention maps, worst row-sum deviation {worst:.1e}, masked entries exactly 0"))
}

/// Logits at position t depend on nothing after t, bitwise.
pub fn decoder_causality() -> Check {
    let mut checked = 0;
    for fusion in [FusionKind::Transfuser, FusionKind::Coattention] {
        let cfg = micro_cfg(DecoderKind::Transformer, fusion);
        let (model, store) = Model::build(&cfg, MICRO_VOCAB, 3, 3).unwrap();
        let Decoder::Transformer(dec) = &model.caption.decoder else {
            unreachable!()
        };
        let ex = micro_example(8);
        let ctx = model.caption.context(&store, &ex.image, &ex.keywords).map_err(|e| e.to_string())?;
        let memory = &ctx.fused.k_final;
        let emb = model.caption.embedding;
        let prefix = [START_ID, 5, 7, 8, 6, 5];
        let mut tape = Tape::inference();
        let m = tape.constant(memory.clone());
        let full = dec.forward(&mut tape, &store, emb, &prefix, m, &mut None).map_err(|e| e.to_string())?;
        let full = tape.value(full.logits).clone();
        for t in 0..prefix.len() {
            let row = dec.step(&store, emb, memory, &prefix[..=t]).map_err(|e| e.to_string())?;
            if row.data() != full.row_slice(t) {
                return Err(format!("{fusion}: logits at position {t} change when later tokens are dropped"));
            }
            let mut altered = prefix;
            for (j, tok) in altered.iter_mut().enumerate().skip(t + 1) {
                *tok = 4 + (j % 5);
            }
            let mut tape = Tape::inference();
            let m = tape.constant(memory.clone());
            let alt = dec.forward(&mut tape, &store, emb, &altered, m, &mut None).map_err(|e| e.to_string())?;
            if tape.value(alt.logits).row_slice(t) != full.row_slice(t) {
                return Err(format!("{fusion}: logits at position {t} change when later tokens change"));
            }
            checked += 2;
        }
    }
    Ok(format!("{checked} prefix comparisons bitwise equal"))
}

fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

/// Fused output under every ordering of four keywords.
pub fn keyword_permutation_invariance() -> Check {
    let mut worst = 0.0f64;
    for fusion in [FusionKind::Transfuser, FusionKind::Coattention] {
        for seed in 0..3 {
            let cfg = HyperConfig {
                seed,
                ..micro_cfg(DecoderKind::Transformer, fusion)
            };
            let (model, store) = Model::build(&cfg, MICRO_VOCAB, 3, 3).unwrap();
            let ex = micro_example(9 + seed);
            let base = TokenSequence::padded(vec![5, 6, 7, 8], 5);
            let reference = model.caption.context(&store, &ex.image, &base).map_err(|e| e.to_string())?;
            for p in permutations(&[5, 6, 7, 8]) {
                let seq = TokenSequence::padded(p.clone(), 5);
                let ctx = model.caption.context(&store, &ex.image, &seq).map_err(|e| e.to_string())?;
                let d = ctx.fused.k_final.max_abs_diff(&reference.fused.k_final);
                worst = worst.max(d);
                if d > 1e-9 {
                    return Err(format!("{fusion}: order {p:?} moves the fused output by {d:e}"));
                }
            }
        }
    }
    Ok(format!("24 orderings x 3 seeds x 2 fusions, worst deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- metrics

fn close(what: &str, got: f64, want: f64, tol: f64) -> Result<f64, String> {
    let d = (got - want).abs();
    if d <= tol {
        Ok(d)
    } else {
        Err(format!("{what}: got {got}, oracle {want} (|Δ| = {d:e})"))
    }
}

fn t(s: &str) -> Tokens {
    oracle::words(s)
}

/// Library metrics against the brute-force oracles on a seeded corpus.
pub fn metric_corpus(seed: u64) -> Result<f64, String> {
    let (cands, refs) = oracle::corpus(seed);
    let mut worst = 0.0f64;
    let lib = |e: medcap::Error| e.to_string();
    for n in 1..=4 {
        let got = metrics::bleu(&cands, &refs, n).map_err(lib)?;
        worst = worst.max(close(&format!("BLEU-{n}"), got, oracle::bleu(&cands, &refs, n), 1e-9)?);
    }
    worst = worst.max(close("CIDEr", metrics::cider(&cands, &refs).map_err(lib)?, oracle::cider(&cands, &refs), 1e-9)?);
    let rl = metrics::corpus_rouge_l(&cands, &refs, 1.0).map_err(lib)?;
    worst = worst.max(close("ROUGE-L", rl, oracle::corpus_best(&cands, &refs, |c, r| oracle::rouge_l(c, r, 1.0)), 1e-9)?);
    let me = metrics::corpus_meteor(&cands, &refs).map_err(lib)?;
    worst = worst.max(close("METEOR", me, oracle::corpus_best(&cands, &refs, oracle::meteor), 1e-9)?);
    for (i, (c, rs)) in cands.iter().zip(&refs).enumerate() {
        for (j, r) in rs.iter().enumerate() {
            let what = format!("pair {i}/{j}");
            if metrics::lcs_len(c, r) != oracle::lcs(c, r) {
                return Err(format!("{what}: LCS mismatch"));
            }
            worst = worst.max(close(&format!("{what} ROUGE-L"), metrics::rouge_l(c, r, 1.0), oracle::rouge_l(c, r, 1.0), 1e-9)?);
            worst = worst.max(close(&format!("{what} METEOR"), metrics::meteor(c, r), oracle::meteor(c, r), 1e-9)?);
        }
        let one = [c.clone()];
        let one_ref = [rs.clone()];
        for n in 1..=4 {
            let got = metrics::bleu(&one, &one_ref, n).map_err(lib)?;
            worst = worst.max(close(&format!("pair {i} BLEU-{n}"), got, oracle::bleu(&one, &one_ref, n), 1e-9)?);
        }
    }
    Ok(worst)
}

/// The worked examples, each against its hand value and the oracle.
pub fn metric_examples() -> Result<usize, String> {
    let lib = |e: medcap::Error| e.to_string();
    let mut n = 0;
    let c = vec![t("the cat sat")];
    let r = vec![vec![t("the cat sat down")]];
    let b1 = metrics::bleu(&c, &r, 1).map_err(lib)?;
    close("BLEU-1 brevity example", b1, 0.716531, 1e-6)?;
    close("BLEU-1 brevity example (exact)", b1, (1.0f64 - 4.0 / 3.0).exp(), 1e-12)?;
    close("BLEU-1 brevity example (oracle)", b1, oracle::bleu(&c, &r, 1), 1e-12)?;
    n += 1;

    let same = vec![t("a b c d e")];
    close("BLEU-4 identity", metrics::bleu(&same, &[same.clone()], 4).map_err(lib)?, 1.0, 0.0)?;
    n += 1;

    let long = vec![t("the cat sat down now")];
    let lref = vec![vec![t("the cat sat down")]];
    close("BLEU-1 with c > r", metrics::bleu(&long, &lref, 1).map_err(lib)?, 0.8, 1e-12)?;
    n += 1;

    let ident = vec![t("mild edema seen at the disc")];
    close("CIDEr self", metrics::cider(&ident, &[ident.clone()]).map_err(lib)?, 1.0, 1e-12)?;
    close("CIDEr disjoint", metrics::cider(&[t("x y z w")], &[ident.clone()]).map_err(lib)?, 0.0, 0.0)?;
    n += 2;

    let cands = vec![t("mild edema at the disc"), t("fluid near fovea")];
    let refs = vec![vec![t("mild edema near macula")], vec![t("drusen and fluid")]];
    close("CIDEr two-document toy", metrics::cider(&cands, &refs).map_err(lib)?, oracle::cider(&cands, &refs), 1e-9)?;
    n += 1;

    close("ROUGE-L example", metrics::rouge_l(&t("a c d"), &t("a b c d"), 1.0), 0.857143, 1e-6)?;
    close("ROUGE-L example (oracle)", metrics::rouge_l(&t("a c d"), &t("a b c d"), 1.0), oracle::rouge_l(&t("a c d"), &t("a b c d"), 1.0), 1e-12)?;
    close("ROUGE-L identity", metrics::rouge_l(&t("x y z"), &t("x y z"), 1.0), 1.0, 0.0)?;
    close("ROUGE-L disjoint", metrics::rouge_l(&t("x y"), &t("p q"), 1.0), 0.0, 0.0)?;
    n += 3;

    close("METEOR identity pair", metrics::meteor(&t("a b"), &t("a b")), 0.9375, 1e-12)?;
    close("METEOR reordered", metrics::meteor(&t("a c b"), &t("a b c")), 0.5, 1e-12)?;
    close("METEOR reordered (oracle)", metrics::meteor(&t("a c b"), &t("a b c")), oracle::meteor(&t("a c b"), &t("a b c")), 1e-12)?;
    close("METEOR disjoint", metrics::meteor(&t("x"), &t("y")), 0.0, 0.0)?;
    n += 3;
    Ok(n)
}

pub fn metric_oracles() -> Check {
    let worst = metric_corpus(0)?;
    let n = metric_examples()?;
    Ok(format!("20-pair corpus worst |Δ| {worst:.1e}; {n} worked examples match"))
}

// ---------------------------------------------------------------- search

/// Beam width 1 against greedy on seeded caption models and random tables.
pub fn beam_one_is_greedy() -> Result<usize, String> {
    let mut n = 0;
    for seed in 0..20u64 {
        let decoder = if seed % 2 == 0 { DecoderKind::Lstm } else { DecoderKind::Transformer };
        let fusion = [FusionKind::Transfuser, FusionKind::Coattention, FusionKind::Sum, FusionKind::Contextual][(seed % 4) as usize];
        let cfg = HyperConfig {
            seed,
            ..micro_cfg(decoder, fusion)
        };
        let (model, store) = Model::build(&cfg, MICRO_VOCAB, 3, 3).unwrap();
        let ex = micro_example(seed);
        let ctx = model.caption.context(&store, &ex.image, &ex.keywords).map_err(|e| e.to_string())?;
        let stepper = model.caption.stepper(&store, &ctx).map_err(|e| e.to_string())?;
        let len = model.caption.max_generated();
        let g = greedy_decode(&stepper, len).map_err(|e| e.to_string())?;
        let b = beam_decode(&stepper, 1, len).map_err(|e| e.to_string())?;
        if g != b {
            return Err(format!("caption model seed {seed}: greedy {g:?} vs beam-1 {b:?}"));
        }
        let r = RandomModel::new(seed, 7);
        let g = greedy_decode(&r, 6).map_err(|e| e.to_string())?;
        let b = beam_decode(&r, 1, 6).map_err(|e| e.to_string())?;
        if g != b {
            return Err(format!("random model seed {seed}: greedy {g:?} vs beam-1 {b:?}"));
        }
        n += 2;
    }
    Ok(n)
}

/// Three live tokens (END and two words), length cap 3: 27 hypotheses at most.
pub fn toy_model(seed: u64) -> RandomModel {
    RandomModel {
        banned: vec![0, 1, 2, 4],
        ..RandomModel::new(1000 + seed, 7)
    }
}

pub fn wide_beam_is_exhaustive() -> Result<usize, String> {
    for seed in 0..20 {
        let m = toy_model(seed);
        let (tokens, score) = exhaustive_best(&m, 3);
        let b = beam_decode(&m, 27, 3).map_err(|e| e.to_string())?;
        if b.tokens != tokens || b.log_prob != score {
            return Err(format!(
                "toy seed {seed}: beam {:?} ({}) vs exhaustive {tokens:?} ({score})",
                b.tokens, b.log_prob
            ));
        }
    }
    Ok(20)
}

pub const A: usize = 5;
pub const B: usize = 6;
pub const C: usize = 7;
pub const D: usize = 8;

/// Greedy commits to A (−0.6) and finishes A C END at −2.3; keeping B alive
/// reaches B D END at −1.9.
pub fn counterexample_table() -> TableModel {
    let mut m = TableModel {
        vocab: 10,
        rows: Default::default(),
    };
    m.row(&[], &[(A, (-0.6f64).exp()), (B, (-0.9f64).exp())]);
    m.row(&[A], &[(C, (-0.9f64).exp())]);
    m.row(&[B], &[(D, (-0.2f64).exp())]);
    m.row(&[A, C], &[(END_ID, (-0.8f64).exp())]);
    m.row(&[B, D], &[(END_ID, (-0.8f64).exp())]);
    m
}

pub fn beam_counterexample() -> Check {
    let m = counterexample_table();
    let g = greedy_decode(&m, 3).map_err(|e| e.to_string())?;
    let b = beam_decode(&m, 2, 3).map_err(|e| e.to_string())?;
    let (ex, ex_score) = exhaustive_best(&m, 3);
    if g.tokens != [A, C, END_ID] || (g.log_prob + 2.3).abs() > 1e-12 {
        return Err(format!("greedy found {:?} at {}", g.tokens, g.log_prob));
    }
    if b.tokens != [B, D, END_ID] || (b.log_prob + 1.9).abs() > 1e-12 {
        return Err(format!("beam-2 found {:?} at {}", b.tokens, b.log_prob));
    }
    if ex != b.tokens || ex_score != b.log_prob {
        return Err("beam-2 result is not the exhaustive optimum".into());
    }
    Ok(format!("greedy {:.3} < beam-2 {:.3} = exhaustive", g.log_prob, b.log_prob))
}

pub fn search_correctness() -> Check {
    let a = beam_one_is_greedy()?;
    let b = wide_beam_is_exhaustive()?;
    let c = beam_counterexample()?;
    Ok(format!("{a} beam-1/greedy pairs bitwise equal; {b} toy models k=27 = exhaustive; {c}"))
}

// ---------------------------------------------------------------- Prec@k

pub fn prec_fixture() -> (Vec<Vec<usize>>, Vec<usize>) {
    (
        vec![
            vec![2, 0, 1, 3, 4, 5],
            vec![1, 2, 0, 5, 4, 3],
            vec![5, 4, 3, 2, 1, 0],
            vec![0, 1, 2, 3, 4, 5],
            vec![3, 5, 1, 0, 2, 4],
        ],
        vec![2, 0, 0, 4, 4],
    )
}

/// Hand-computed: gold ranks are 0, 2, 5, 4, 5.
pub const PREC_FIXTURE: [(usize, f64); 6] = [(1, 0.2), (2, 0.2), (3, 0.4), (4, 0.4), (5, 0.6), (6, 1.0)];

pub fn prec_enumerate(rankings: &[Vec<usize>], gold: &[usize], k: usize) -> f64 {
    let mut hits = 0;
    for (r, &g) in rankings.iter().zip(gold) {
        for pos in 0..k {
            if r[pos] == g {
                hits += 1;
            }
        }
    }
    hits as f64 / gold.len() as f64
}

pub fn prec_checks() -> Check {
    let (rankings, gold) = prec_fixture();
    for (k, want) in PREC_FIXTURE {
        let got = prec_at_k(&rankings, &gold, k).map_err(|e| e.to_string())?;
        if got != want || got != prec_enumerate(&rankings, &gold, k) {
            return Err(format!("fixture Prec@{k}: got {got}, table {want}"));
        }
    }
    if prec_at_k(&rankings, &gold, 0).is_ok() || prec_at_k(&rankings, &gold, 7).is_ok() {
        return Err("k outside 1..=C accepted".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let evaluations = 200;
    for e in 0..evaluations {
        let classes = rng.random_range(5..12);
        let n = rng.random_range(1..30);
        let mut rankings = Vec::new();
        let mut gold = Vec::new();
        for _ in 0..n {
            let logits: Vec<f64> = (0..classes).map(|_| rng.random_range(-3.0..3.0)).collect();
            rankings.push(rank_classes(&logits).into_iter().map(|x| x.0).collect::<Vec<_>>());
            gold.push(rng.random_range(0..classes));
        }
        let p1 = prec_at_k(&rankings, &gold, 1).map_err(|e| e.to_string())?;
        let p5 = prec_at_k(&rankings, &gold, 5).map_err(|e| e.to_string())?;
        if p1 > p5 {
            return Err(format!("evaluation {e}: Prec@1 {p1} > Prec@5 {p5}"));
        }
        if p5 != prec_enumerate(&rankings, &gold, 5) {
            return Err(format!("evaluation {e}: Prec@5 disagrees with enumeration"));
        }
    }
    Ok(format!("fixture matches for k=1..6; Prec@1 <= Prec@5 on {evaluations} random evaluations"))
}

// ---------------------------------------------------------------- reproducibility

/// Forward values that a checkpoint must preserve.
fn fingerprint(model: &Model, store: &ParamStore) -> Result<Vec<u64>, String> {
    let e = |e: medcap::Error| e.to_string();
    let mut bits = Vec::new();
    for seed in 0..3 {
        let ex = micro_example(seed);
        let mut tape = Tape::inference();
        let (loss, _) = model.caption.loss(&mut tape, store, &ex, &mut None).map_err(e)?;
        bits.push(tape.value(loss).item().to_bits());
        let ctx = model.caption.context(store, &ex.image, &ex.keywords).map_err(e)?;
        let beam = model.caption.generate(store, &ctx, 2).map_err(e)?;
        bits.push(beam.log_prob.to_bits());
        bits.extend(beam.tokens.iter().map(|&t| t as u64));
        let z = model.predictor.logits(&mut tape, store, &ex.image).map_err(e)?;
        bits.extend(tape.value(z).data().iter().map(|v| v.to_bits()));
        bits.extend(model.classifier.rank(store, &ex.image).map_err(e)?.iter().map(|x| x.1.to_bits()));
    }
    Ok(bits)
}

pub fn checkpoint_round_trip() -> Check {
    let mut n = 0;
    for decoder in [DecoderKind::Lstm, DecoderKind::Transformer] {
        for fusion in [FusionKind::Transfuser, FusionKind::Coattention] {
            let cfg = micro_cfg(decoder, fusion);
            let lex = medcap::model::Lexicon {
                vocab: medcap::text::Vocabulary::from_tokens(
                    [PAD, UNK, START, END, SEP, "a", "b", "c", "d"].iter().map(|s| s.to_string()).collect(),
                )
                .map_err(|e| e.to_string())?,
                keywords: vec!["k0".into(), "k1".into(), "k2".into()],
            };
            assert_eq!(lex.vocab.len(), MICRO_VOCAB);
            let (model, mut store) = Model::build(&cfg, MICRO_VOCAB, 3, 3).unwrap();
            // Move away from the initialization so the check is not vacuous.
            let mut rng = ChaCha8Rng::seed_from_u64(51);
            for id in store.ids().collect::<Vec<_>>() {
                let noise = random(&mut rng, store.get(id).shape(), 0.05);
                let v = store.get_mut(id);
                for (x, d) in v.data_mut().iter_mut().zip(noise.data()) {
                    *x += d;
                }
            }
            let before = fingerprint(&model, &store)?;
            let ckpt = Checkpoint::new(&cfg, &lex, 3, 17, store.clone());
            let bytes = ckpt.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
            if back.step != 17 || back.header.config != cfg {
                return Err("checkpoint header or step changed".into());
            }
            for (id, (name, v)) in store.iter().enumerate() {
                let w = back.store.get(back.store.id(name).ok_or(format!("lost parameter {name}"))?);
                if v.shape() != w.shape() || v.data().iter().zip(w.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
                    return Err(format!("parameter {id} ({name}) changed"));
                }
            }
            let model2 = back.model().map_err(|e| e.to_string())?;
            if fingerprint(&model2, &back.store)? != before {
                return Err(format!("{decoder}/{fusion}: forward outputs differ after reload"));
            }
            n += 1;
        }
    }
    Ok(format!("{n} checkpoints reload with bitwise-identical parameters and forward outputs"))
}

pub fn run_cli<I, S>(args: I) -> medcap::Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let mut full: Vec<std::ffi::OsString> = vec!["medcap".into()];
    full.extend(args.into_iter().map(Into::into));
    cli::run(Cli::try_parse_from(full).expect("arguments parse"))
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Compare every output file except the manifest, which records its own
/// output directory.
pub fn same_outputs(a: &Path, b: &Path) -> Result<usize, String> {
    let fa = files_under(a);
    let fb = files_under(b);
    if fa != fb {
        return Err(format!("file sets differ: {fa:?} vs {fb:?}"));
    }
    let mut n = 0;
    for f in fa {
        if f == Path::new("manifest.json") {
            continue;
        }
        if std::fs::read(a.join(&f)).unwrap() != std::fs::read(b.join(&f)).unwrap() {
            return Err(format!("{} differs between run and replay", f.display()));
        }
        n += 1;
    }
    Ok(n)
}

/// Tiny settings that keep every command to a few seconds.
pub const TINY: [&str; 20] = [
    "--set", "epochs=1",
    "--set", "head_epochs=1",
    "--set", "embed_dim=8",
    "--set", "image_dim=8",
    "--set", "fusion_hidden=8",
    "--set", "fusion_ffn=8",
    "--set", "lstm_hidden=8",
    "--set", "decoder_hidden=8",
    "--set", "decoder_ffn=8",
    "--set", "predictor_hidden=8",
];

/// Run every command once, replay each from its manifest into a fresh
/// directory and compare outputs byte for byte.
pub fn manifest_replay(root: &Path) -> Check {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let e = |e: medcap::Error| e.to_string();
    run_cli(["synth-data", "--seed", "3", "--n", "40", "--out", &p("data")]).map_err(e)?;
    let data = p("data/data.jsonl");
    let mut train: Vec<String> = ["train", "--data", &data, "--out", &p("train")].map(String::from).to_vec();
    train.extend(TINY.map(String::from));
    train.extend(["--set", "decoder=transformer", "--set", "fusion=coattention"].map(String::from));
    run_cli(&train).map_err(e)?;
    let ckpt = p("train/model.ckpt");
    run_cli(["generate", "--ckpt", &ckpt, "--data", &data, "--beam", "2", "--out", &p("gen")]).map_err(e)?;
    run_cli([
        "evaluate",
        "--cand",
        &p("gen/candidates.jsonl"),
        "--ref",
        &p("gen/references.jsonl"),
        "--out",
        &p("eval"),
    ])
    .map_err(e)?;
    run_cli(["report", "--ckpt", &ckpt, "--data", &data, "--limit", "3", "--attention", "--out", &p("report")]).map_err(e)?;
    run_cli(["export-attention", "--ckpt", &ckpt, "--data", &data, "--record", "1", "--out", &p("attn")]).map_err(e)?;
    let mut ablate: Vec<String> = [
        "ablate", "--data", &data, "--fusions", "sum,transfuser", "--modalities", "image+keywords",
        "--decoders", "lstm", "--beams", "1,2", "--seeds", "0,1", "--out", &p("ablate"),
    ]
    .map(String::from)
    .to_vec();
    ablate.extend(TINY.map(String::from));
    run_cli(&ablate).map_err(e)?;

    let mut files = 0;
    for cmd in ["data", "train", "gen", "eval", "report", "attn", "ablate"] {
        let replay = p(&format!("{cmd}_replay"));
        run_cli(["replay", "--manifest", &p(&format!("{cmd}/manifest.json")), "--out", &replay]).map_err(e)?;
        files += same_outputs(&root.join(cmd), Path::new(&replay))?;
    }
    Ok(format!("7 commands replayed, {files} output files bitwise identical"))
}

pub fn reproducibility(root: &Path) -> Check {
    let a = checkpoint_round_trip()?;
    let b = manifest_replay(root)?;
    Ok(format!("{a}; {b}"))
}
