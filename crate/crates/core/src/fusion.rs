//! Image/keyword fusion strategies.
//!
//! * TransFuser: the pooled image vector is the single attention query over
//!   keyword keys/values, followed by a residual with the query, layer norm
//!   and a ReLU feed-forward network.
//! * Co-attention: the same block with one query per image patch, producing
//!   one fused row per patch.
//! * Baselines: sum, element-wise product, average and concatenation of a
//!   projected image vector and a mean-pooled keyword vector.
//! * Contextual: image vector concatenated with the contextualized keyword
//!   encoder output.
//!
//! Keywords get no positional encoding, so the attention-based strategies are
//! invariant to keyword order. PAD positions are masked out of the attention.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::{FusionKind, HyperConfig};
use crate::encoders::{masked_mean_weights, KeywordEncoder};
use crate::error::{Error, Result};
use crate::layers::{key_mask, scaled_dot_attention, FeedForward, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::text::TokenSequence;

/// Fusion output on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Fused {
    /// `[1 × D]` for vector strategies, `[N × T_H]` for co-attention.
    pub k_final: Var,
    /// Keyword attention weights (`[1 × L]` or `[N × L]`) when the strategy attends.
    pub weights: Option<Var>,
    /// Set when the keyword set was empty and only the image contributed.
    pub image_only: bool,
}

/// Value snapshot of a fusion result, detached from the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedContext {
    pub strategy: FusionKind,
    pub k_final: Tensor,
    pub attention: Option<Tensor>,
    pub image_only: bool,
}

impl Fused {
    pub fn snapshot(&self, tape: &Tape, strategy: FusionKind) -> FusedContext {
        FusedContext {
            strategy,
            k_final: tape.value(self.k_final).clone(),
            attention: self.weights.map(|w| tape.value(w).clone()),
            image_only: self.image_only,
        }
    }
}

/// Parameters of every fusion strategy; only the ones the kind needs are created.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub kind: FusionKind,
    pub hidden: usize,
    /// `W_t`: pooled image → query (no bias).
    pub image_query: Option<Linear>,
    /// `W_q, b_q`: per-patch image → query.
    pub patch_query: Option<Linear>,
    pub key: Option<Linear>,
    pub value: Option<Linear>,
    pub norm: Option<LayerNorm>,
    pub ffn: Option<FeedForward>,
    pub keyword_encoder: Option<KeywordEncoder>,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, cfg: &HyperConfig, rng: &mut ChaCha8Rng) -> Self {
        let kind = cfg.fusion;
        let th = cfg.fusion_hidden;
        let attends = matches!(kind, FusionKind::Transfuser | FusionKind::Coattention);
        let image_query = (kind != FusionKind::Coattention)
            .then(|| Linear::new(store, "fusion.image_query", cfg.image_dim, th, false, rng));
        let patch_query = (kind == FusionKind::Coattention)
            .then(|| Linear::new(store, "fusion.patch_query", cfg.image_dim, th, true, rng));
        let needs_value = attends || matches!(kind, FusionKind::Sum | FusionKind::Mul | FusionKind::Average | FusionKind::Concat);
        let key = attends.then(|| Linear::new(store, "fusion.key", cfg.embed_dim, th, true, rng));
        let value = needs_value.then(|| Linear::new(store, "fusion.value", cfg.embed_dim, th, true, rng));
        let norm = attends.then(|| LayerNorm::new(store, "fusion.norm", th, cfg.layer_norm_eps));
        let ffn = attends.then(|| FeedForward::new(store, "fusion.ffn", th, cfg.fusion_ffn, th, rng));
        let keyword_encoder = (kind == FusionKind::Contextual).then(|| {
            KeywordEncoder::new(
                store,
                "fusion.keyword_encoder",
                cfg.embed_dim,
                th,
                cfg.fusion_ffn,
                cfg.encoder_blocks,
                cfg.layer_norm_eps,
                rng,
            )
        });
        Fusion {
            kind,
            hidden: th,
            image_query,
            patch_query,
            key,
            value,
            norm,
            ffn,
            keyword_encoder,
        }
    }

    /// Width of each `k_final` row.
    pub fn out_dim(&self) -> usize {
        match self.kind {
            FusionKind::Concat | FusionKind::Contextual => 2 * self.hidden,
            _ => self.hidden,
        }
    }

    /// Fuse image features with keywords.
    ///
    /// `pooled` is `[1 × F]`, `patches` is `[N × F]`; `embedding` is the shared
    /// word embedding table.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pooled: Var,
        patches: Var,
        keywords: &TokenSequence,
        embedding: ParamId,
    ) -> Result<Fused> {
        match self.kind {
            FusionKind::Transfuser => self.transfuse(tape, store, pooled, keywords, embedding),
            FusionKind::Coattention => self.coattend(tape, store, patches, keywords, embedding),
            FusionKind::Contextual => {
                let enc = self.keyword_encoder.as_ref().expect("contextual encoder");
                let img = self.image_vector(tape, store, pooled)?;
                let kw = enc.encode(tape, store, embedding, keywords)?;
                Ok(Fused {
                    k_final: tape.concat_last(&[img, kw.pooled])?,
                    weights: None,
                    image_only: kw.empty,
                })
            }
            kind => {
                let img = self.image_vector(tape, store, pooled)?;
                let kw = self.keyword_vector(tape, store, keywords, embedding)?;
                Ok(Fused {
                    k_final: fuse_baseline(tape, kind, img, kw)?,
                    weights: None,
                    image_only: keywords.is_empty(),
                })
            }
        }
    }

    fn image_vector(&self, tape: &mut Tape, store: &ParamStore, pooled: Var) -> Result<Var> {
        self.image_query
            .as_ref()
            .expect("image query projection")
            .forward(tape, store, pooled)
    }

    /// Keyword keys and values `[L × T_H]`.
    fn keys_values(&self, tape: &mut Tape, store: &ParamStore, keywords: &TokenSequence, embedding: ParamId) -> Result<(Var, Var)> {
        let table = tape.param(store, embedding);
        let x = tape.gather_rows(table, &keywords.ids)?;
        let k = self.key.as_ref().expect("key projection").forward(tape, store, x)?;
        let v = self.value.as_ref().expect("value projection").forward(tape, store, x)?;
        Ok((k, v))
    }

    /// Mean of keyword value vectors over non-PAD positions (zeros when empty).
    fn keyword_vector(&self, tape: &mut Tape, store: &ParamStore, keywords: &TokenSequence, embedding: ParamId) -> Result<Var> {
        if keywords.is_empty() {
            return Ok(tape.constant(Tensor::zeros(&[1, self.hidden])));
        }
        let table = tape.param(store, embedding);
        let x = tape.gather_rows(table, &keywords.ids)?;
        let v = self.value.as_ref().expect("value projection").forward(tape, store, x)?;
        let w = tape.constant(masked_mean_weights(keywords));
        tape.matmul(w, v)
    }

    /// Attention from `query` rows over the keywords, residual, norm and FFN.
    fn attend(&self, tape: &mut Tape, store: &ParamStore, query: Var, keywords: &TokenSequence, embedding: ParamId) -> Result<Fused> {
        let rows = tape.value(query).rows();
        let (z, weights) = if keywords.is_empty() {
            (tape.constant(Tensor::zeros(&[rows, self.hidden])), None)
        } else {
            let (k, v) = self.keys_values(tape, store, keywords, embedding)?;
            let mask = key_mask(rows, &keywords.pad_mask());
            let (z, w) = scaled_dot_attention(tape, query, k, v, self.hidden, Some(&mask))?;
            (z, Some(w))
        };
        let resid = tape.add(query, z)?;
        let zn = self.norm.as_ref().expect("fusion norm").forward(tape, store, resid)?;
        let k_final = self.ffn.as_ref().expect("fusion ffn").forward(tape, store, zn)?;
        Ok(Fused {
            k_final,
            weights,
            image_only: keywords.is_empty(),
        })
    }

    pub fn transfuse(&self, tape: &mut Tape, store: &ParamStore, pooled: Var, keywords: &TokenSequence, embedding: ParamId) -> Result<Fused> {
        let q = self.image_vector(tape, store, pooled)?;
        self.attend(tape, store, q, keywords, embedding)
    }

    pub fn coattend(&self, tape: &mut Tape, store: &ParamStore, patches: Var, keywords: &TokenSequence, embedding: ParamId) -> Result<Fused> {
        if tape.value(patches).rows() == 0 {
            return Err(Error::Contract("co-attention needs at least one patch".into()));
        }
        let q = self
            .patch_query
            .as_ref()
            .ok_or_else(|| Error::Contract("co-attention parameters missing".into()))?
            .forward(tape, store, patches)?;
        self.attend(tape, store, q, keywords, embedding)
    }
}

/// Element-wise sum / product / mean, or concatenation, of two `[1 × D]` vectors.
pub fn fuse_baseline(tape: &mut Tape, kind: FusionKind, image: Var, keywords: Var) -> Result<Var> {
    match kind {
        FusionKind::Sum => tape.add(image, keywords),
        FusionKind::Mul => tape.mul(image, keywords),
        FusionKind::Average => {
            let s = tape.add(image, keywords)?;
            Ok(tape.scale(s, 0.5))
        }
        FusionKind::Concat => tape.concat_last(&[image, keywords]),
        other => Err(Error::Contract(format!("{other} is not a baseline fusion"))),
    }
}
