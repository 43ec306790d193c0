//! Image and keyword encoders.
//!
//! The image side is a patch embedder: the image is cut into a grid of square
//! patches, each flattened and linearly projected. It stands in for a
//! pretrained CNN and keeps the same output shapes (per-patch features plus a
//! pooled vector).
//!
//! The keyword side is the contextualized keyword encoder: token embeddings
//! pass through a stack of masked self-attention blocks (attention, layer
//! norm, feed-forward) and a fully connected reinforcement stack, and are then
//! mean-pooled over non-PAD positions.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{causal_mask, scaled_dot_attention, FeedForward, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::text::TokenSequence;

/// Grayscale image with values in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Dimension(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(GrayImage { height, width, pixels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        GrayImage {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn scaled(&self, a: f64) -> Self {
        GrayImage {
            pixels: self.pixels.iter().map(|p| p * a).collect(),
            ..self.clone()
        }
    }
}

/// `N × P` matrix of flattened square patches in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatches {
    pub patches: Tensor,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
}

impl ImagePatches {
    pub fn extract(image: &GrayImage, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || image.height % patch_size != 0 || image.width % patch_size != 0 {
            return Err(Error::Config(format!(
                "{}x{} image is not divisible into {patch_size}x{patch_size} patches",
                image.height, image.width
            )));
        }
        let (gh, gw) = (image.height / patch_size, image.width / patch_size);
        let p = patch_size * patch_size;
        let mut data = Vec::with_capacity(gh * gw * p);
        for gy in 0..gh {
            for gx in 0..gw {
                for y in 0..patch_size {
                    let row = (gy * patch_size + y) * image.width + gx * patch_size;
                    data.extend_from_slice(&image.pixels[row..row + patch_size]);
                }
            }
        }
        Ok(ImagePatches {
            patches: Tensor::new(vec![gh * gw, p], data)?,
            height: image.height,
            width: image.width,
            patch_size,
        })
    }

    pub fn count(&self) -> usize {
        self.patches.rows()
    }

    /// Patch grid as (rows, cols).
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }
}

/// What the model sees of an image: pixel patches, or a precomputed `[1 × F]`
/// feature row that bypasses the embedder (treated as a single patch).
#[derive(Clone, Debug, PartialEq)]
pub enum ImageInput {
    Patches(ImagePatches),
    Features(Tensor),
}

/// Per-patch features `[N × H_I]` and their mean `[1 × H_I]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    pub features: Tensor,
    pub pooled: Tensor,
}

/// Linear projection of flattened patches.
#[derive(Clone, Debug)]
pub struct PatchEmbedder {
    pub proj: Linear,
    pub patch_size: usize,
}

impl PatchEmbedder {
    pub fn new(store: &mut ParamStore, name: &str, patch_size: usize, feature_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        PatchEmbedder {
            proj: Linear::new(store, name, patch_size * patch_size, feature_dim, true, rng),
            patch_size,
        }
    }

    /// Returns (per-patch features, pooled features).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, patches: &ImagePatches) -> Result<(Var, Var)> {
        if patches.patch_size != self.patch_size {
            return Err(Error::Config(format!(
                "embedder expects {0}x{0} patches, got {1}x{1}",
                self.patch_size, patches.patch_size
            )));
        }
        let x = tape.constant(patches.patches.clone());
        let feats = self.proj.forward(tape, store, x)?;
        let pooled = tape.mean_rows(feats)?;
        Ok((feats, pooled))
    }

    /// (per-patch features, pooled features) for either input form.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, input: &ImageInput) -> Result<(Var, Var)> {
        match input {
            ImageInput::Patches(p) => self.forward(tape, store, p),
            ImageInput::Features(f) => {
                if f.shape() != [1, self.proj.out_dim] {
                    return Err(Error::Dimension(format!(
                        "precomputed features have shape {:?}, expected [1, {}]",
                        f.shape(),
                        self.proj.out_dim
                    )));
                }
                let v = tape.constant(f.clone());
                Ok((v, v))
            }
        }
    }

    pub fn embed(&self, store: &ParamStore, image: &GrayImage) -> Result<ImageFeatures> {
        let patches = ImagePatches::extract(image, self.patch_size)?;
        let mut tape = Tape::inference();
        let (f, p) = self.forward(&mut tape, store, &patches)?;
        Ok(ImageFeatures {
            features: tape.value(f).clone(),
            pooled: tape.value(p).clone(),
        })
    }
}

/// Single-head causal self-attention with biased Q/K/V projections.
#[derive(Clone, Debug)]
pub struct MaskedSelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub hidden: usize,
}

impl MaskedSelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        MaskedSelfAttention {
            query: Linear::new(store, &format!("{name}.query"), in_dim, hidden, true, rng),
            key: Linear::new(store, &format!("{name}.key"), in_dim, hidden, true, rng),
            value: Linear::new(store, &format!("{name}.value"), in_dim, hidden, true, rng),
            hidden,
        }
    }

    /// Returns (output `[N × hidden]`, attention weights `[N × N]`).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let n = tape.value(x).rows();
        let q = self.query.forward(tape, store, x)?;
        let k = self.key.forward(tape, store, x)?;
        let v = self.value.forward(tape, store, x)?;
        let mask = causal_mask(n);
        scaled_dot_attention(tape, q, k, v, self.hidden, Some(&mask))
    }
}

/// `FFN(LayerNorm(MaskAtten(x)))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attention: MaskedSelfAttention,
    pub norm: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, ffn: usize, eps: f64, rng: &mut ChaCha8Rng) -> Self {
        EncoderBlock {
            attention: MaskedSelfAttention::new(store, &format!("{name}.attn"), in_dim, hidden, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), hidden, eps),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), hidden, ffn, hidden, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (z, _) = self.attention.forward(tape, store, x)?;
        let z = self.norm.forward(tape, store, z)?;
        self.ffn.forward(tape, store, z)
    }
}

/// Pooled keyword representation `F` plus a flag set when the input had no tokens.
#[derive(Clone, Copy, Debug)]
pub struct KeywordEncoding {
    pub pooled: Var,
    pub empty: bool,
}

#[derive(Clone, Debug)]
pub struct KeywordEncoder {
    pub blocks: Vec<EncoderBlock>,
    pub reinforce: [Linear; 2],
    pub hidden: usize,
}

impl KeywordEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        embed_dim: usize,
        hidden: usize,
        ffn: usize,
        blocks: usize,
        eps: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let blocks = (0..blocks)
            .map(|i| {
                let in_dim = if i == 0 { embed_dim } else { hidden };
                EncoderBlock::new(store, &format!("{name}.block{i}"), in_dim, hidden, ffn, eps, rng)
            })
            .collect();
        KeywordEncoder {
            blocks,
            reinforce: [
                Linear::new(store, &format!("{name}.reinforce0"), hidden, hidden, true, rng),
                Linear::new(store, &format!("{name}.reinforce1"), hidden, hidden, true, rng),
            ],
            hidden,
        }
    }

    /// Per-token contextual features `[L × hidden]` over the padded sequence.
    pub fn token_features(&self, tape: &mut Tape, store: &ParamStore, embedding: ParamId, keywords: &TokenSequence) -> Result<Var> {
        let table = tape.param(store, embedding);
        let mut x = tape.gather_rows(table, &keywords.ids)?;
        for block in &self.blocks {
            x = block.forward(tape, store, x)?;
        }
        let h = self.reinforce[0].forward(tape, store, x)?;
        let h = tape.relu(h);
        self.reinforce[1].forward(tape, store, h)
    }

    /// Masked mean of [`token_features`](Self::token_features) over non-PAD positions.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, embedding: ParamId, keywords: &TokenSequence) -> Result<KeywordEncoding> {
        if keywords.is_empty() {
            let zero = tape.constant(Tensor::zeros(&[1, self.hidden]));
            return Ok(KeywordEncoding {
                pooled: zero,
                empty: true,
            });
        }
        let feats = self.token_features(tape, store, embedding, keywords)?;
        let w = masked_mean_weights(keywords);
        let w = tape.constant(w);
        Ok(KeywordEncoding {
            pooled: tape.matmul(w, feats)?,
            empty: false,
        })
    }
}

/// `[1 × L]` row with `1/true_length` at real positions and 0 at PAD.
pub fn masked_mean_weights(seq: &TokenSequence) -> Tensor {
    let n = seq.true_length.max(1) as f64;
    Tensor::row(
        (0..seq.ids.len())
            .map(|i| if i < seq.true_length { 1.0 / n } else { 0.0 })
            .collect(),
    )
}
