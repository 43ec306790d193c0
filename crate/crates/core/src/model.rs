//! Full model: patch embedder, fusion, decoder and the two prediction heads,
//! plus conversion of dataset records into model-ready examples.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::config::{DecoderKind, HyperConfig, Modality};
use crate::datasynth::{ImageData, Record};
use crate::decoders::{Dropout, LstmDecoder, LstmState, TransformerDecoder};
use crate::encoders::{GrayImage, ImageInput, ImagePatches, PatchEmbedder};
use crate::error::{Error, Result};
use crate::fusion::{Fused, FusedContext, Fusion};
use crate::heads::{DiseaseClassifier, KeywordPredictor};
use crate::params::{self, ParamId, ParamStore};
use crate::search::{self, Beam, StepModel};
use crate::tensor::{log_softmax, Tensor};
use crate::text::{preprocess, TokenSequence, Vocabulary};

/// Word vocabulary plus the keyword label set of the predictor head.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    pub vocab: Vocabulary,
    pub keywords: Vec<String>,
}

impl Lexicon {
    /// Vocabulary over descriptions and keywords; label set = distinct keywords, sorted.
    pub fn from_records(records: &[&Record]) -> Self {
        let descs: Vec<Vec<String>> = records.iter().map(|r| preprocess(&r.description)).collect();
        let kws: Vec<Vec<String>> = records
            .iter()
            .map(|r| r.keywords.iter().flat_map(|k| preprocess(k)).collect())
            .collect();
        let mut keywords: Vec<String> = records.iter().flat_map(|r| r.keywords.iter().cloned()).collect();
        keywords.sort();
        keywords.dedup();
        Lexicon {
            vocab: Vocabulary::build(&descs, &kws, true),
            keywords,
        }
    }

    pub fn keyword_labels(&self, keywords: &[String]) -> Vec<bool> {
        self.keywords.iter().map(|k| keywords.contains(k)).collect()
    }
}

/// A record encoded for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image: ImageInput,
    pub keywords: TokenSequence,
    pub keyword_labels: Vec<bool>,
    pub description: TokenSequence,
    pub disease: usize,
}

pub fn image_input(image: &ImageData, cfg: &HyperConfig) -> Result<ImageInput> {
    match image {
        ImageData::Pixels(rows) => {
            let h = rows.len();
            if h != cfg.image_size || rows.iter().any(|r| r.len() != cfg.image_size) {
                return Err(Error::Data(format!(
                    "expected a {0}x{0} image, got {h} rows of widths {1:?}",
                    cfg.image_size,
                    rows.iter().map(Vec::len).collect::<std::collections::BTreeSet<_>>()
                )));
            }
            let pixels = rows.iter().flatten().map(|&p| p as f64 / 255.0).collect();
            let img = GrayImage::new(h, cfg.image_size, pixels)?;
            Ok(ImageInput::Patches(ImagePatches::extract(&img, cfg.patch_size)?))
        }
        ImageData::Features(f) => Ok(ImageInput::Features(Tensor::row(f.clone()))),
    }
}

impl Example {
    pub fn from_record(record: &Record, lex: &Lexicon, cfg: &HyperConfig) -> Result<Self> {
        Ok(Example {
            image: image_input(&record.image, cfg)?,
            keywords: lex.vocab.encode_keywords(&record.keywords, cfg.keyword_max_len),
            keyword_labels: lex.keyword_labels(&record.keywords),
            description: lex.vocab.encode_description(&record.description, cfg.max_len),
            disease: record.disease,
        })
    }
}

#[derive(Clone, Debug)]
pub enum Decoder {
    Lstm(LstmDecoder),
    Transformer(TransformerDecoder),
}

/// Image/keyword encoder, fusion and caption decoder.
#[derive(Clone, Debug)]
pub struct CaptionModel {
    pub cfg: HyperConfig,
    pub embedding: ParamId,
    pub image: PatchEmbedder,
    pub fusion: Fusion,
    pub decoder: Decoder,
    pub vocab_size: usize,
}

/// Encoder-side values needed to decode one example.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeContext {
    pub pooled: Tensor,
    pub fused: FusedContext,
}

impl CaptionModel {
    pub fn new(store: &mut ParamStore, cfg: &HyperConfig, vocab_size: usize, rng: &mut ChaCha8Rng) -> Self {
        let embedding = store.insert("embedding", params::embedding(rng, vocab_size, cfg.embed_dim));
        let image = PatchEmbedder::new(store, "image", cfg.patch_size, cfg.image_dim, rng);
        let fusion = Fusion::new(store, cfg, rng);
        let decoder = match cfg.decoder {
            DecoderKind::Lstm => Decoder::Lstm(LstmDecoder::new(
                store,
                cfg.image_dim,
                cfg.embed_dim,
                fusion.out_dim(),
                cfg.lstm_hidden,
                vocab_size,
                cfg.lstm_bidirectional,
                rng,
            )),
            DecoderKind::Transformer => Decoder::Transformer(TransformerDecoder::new(
                store,
                cfg.embed_dim,
                fusion.out_dim(),
                cfg.decoder_hidden,
                cfg.decoder_heads,
                cfg.decoder_ffn,
                cfg.decoder_blocks,
                cfg.max_len,
                vocab_size,
                cfg.layer_norm_eps,
                rng,
            )),
        };
        CaptionModel {
            cfg: cfg.clone(),
            embedding,
            image,
            fusion,
            decoder,
            vocab_size,
        }
    }

    /// Image features and fused context, with the configured modality applied:
    /// image-only drops the keywords, keywords-only zeroes the image features.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, image: &ImageInput, keywords: &TokenSequence) -> Result<(Var, Fused)> {
        let (patches, pooled) = match self.cfg.modality {
            Modality::KeywordsOnly => {
                let rows = match image {
                    ImageInput::Patches(p) => p.count(),
                    ImageInput::Features(_) => 1,
                };
                (
                    tape.constant(Tensor::zeros(&[rows, self.cfg.image_dim])),
                    tape.constant(Tensor::zeros(&[1, self.cfg.image_dim])),
                )
            }
            _ => self.image.encode(tape, store, image)?,
        };
        let empty;
        let keywords = if self.cfg.modality == Modality::ImageOnly {
            empty = TokenSequence::padded(Vec::new(), keywords.ids.len());
            &empty
        } else {
            keywords
        };
        let fused = self.fusion.forward(tape, store, pooled, patches, keywords, self.embedding)?;
        Ok((pooled, fused))
    }

    /// Summed token cross-entropy of the description and the token count.
    pub fn loss(&self, tape: &mut Tape, store: &ParamStore, ex: &Example, drop: &mut Option<Dropout<'_>>) -> Result<(Var, usize)> {
        let (pooled, fused) = self.encode(tape, store, &ex.image, &ex.keywords)?;
        let (logits, targets) = match &self.decoder {
            Decoder::Lstm(d) => d.teacher_forced(tape, store, self.embedding, pooled, fused.k_final, &ex.description, drop)?,
            Decoder::Transformer(d) => d.teacher_forced(tape, store, self.embedding, fused.k_final, &ex.description, drop)?,
        };
        Ok((tape.cross_entropy(logits, &targets)?, targets.len()))
    }

    pub fn context(&self, store: &ParamStore, image: &ImageInput, keywords: &TokenSequence) -> Result<DecodeContext> {
        let mut tape = Tape::inference();
        let (pooled, fused) = self.encode(&mut tape, store, image, keywords)?;
        Ok(DecodeContext {
            pooled: tape.value(pooled).clone(),
            fused: fused.snapshot(&tape, self.cfg.fusion),
        })
    }

    pub fn stepper<'a>(&'a self, store: &'a ParamStore, ctx: &DecodeContext) -> Result<CaptionStepper<'a>> {
        let inner = match &self.decoder {
            Decoder::Lstm(d) => StepContext::Lstm(d.context_gates(store, &ctx.pooled, &ctx.fused.k_final)?),
            Decoder::Transformer(_) => StepContext::Transformer(ctx.fused.k_final.clone()),
        };
        Ok(CaptionStepper {
            model: self,
            store,
            inner,
        })
    }

    /// Longest generated sequence, END included.
    pub fn max_generated(&self) -> usize {
        self.cfg.max_len - 1
    }

    pub fn generate(&self, store: &ParamStore, ctx: &DecodeContext, beam: usize) -> Result<Beam> {
        let stepper = self.stepper(store, ctx)?;
        search::decode(&stepper, beam, self.max_generated())
    }

    /// Head-averaged last-block cross-attention for each generated token
    /// (`[T × M]`, memory rows = patches under co-attention).
    pub fn cross_attention(&self, store: &ParamStore, ctx: &DecodeContext, generated: &[usize]) -> Result<Tensor> {
        match &self.decoder {
            Decoder::Lstm(_) => Err(Error::Unsupported(
                "attention export needs a transformer-decoder checkpoint".into(),
            )),
            Decoder::Transformer(d) => {
                if generated.is_empty() {
                    return Err(Error::Contract("no generated tokens to explain".into()));
                }
                let mut prefix = vec![crate::text::START_ID];
                prefix.extend_from_slice(&generated[..generated.len() - 1]);
                d.cross_attention(store, self.embedding, &ctx.fused.k_final, &prefix)
            }
        }
    }
}

enum StepContext {
    Lstm(Tensor),
    Transformer(Tensor),
}

/// Decoder state for search.
#[derive(Clone, Debug)]
pub enum CaptionState {
    Lstm(LstmState),
    Prefix(Vec<usize>),
}

pub struct CaptionStepper<'a> {
    model: &'a CaptionModel,
    store: &'a ParamStore,
    inner: StepContext,
}

impl StepModel for CaptionStepper<'_> {
    type State = CaptionState;

    fn initial(&self) -> Result<CaptionState> {
        Ok(match &self.model.decoder {
            Decoder::Lstm(d) => CaptionState::Lstm(d.initial_state()),
            Decoder::Transformer(_) => CaptionState::Prefix(Vec::new()),
        })
    }

    fn step(&self, state: &CaptionState, token: usize) -> Result<(CaptionState, Vec<f64>)> {
        let emb = self.model.embedding;
        match (&self.model.decoder, &self.inner, state) {
            (Decoder::Lstm(d), StepContext::Lstm(gates), CaptionState::Lstm(s)) => {
                let (next, logits) = d.step(self.store, emb, gates, s, token)?;
                Ok((CaptionState::Lstm(next), log_softmax(logits.data())))
            }
            (Decoder::Transformer(d), StepContext::Transformer(mem), CaptionState::Prefix(p)) => {
                let mut prefix = p.clone();
                prefix.push(token);
                let logits = d.step(self.store, emb, mem, &prefix)?;
                Ok((CaptionState::Prefix(prefix), log_softmax(logits.data())))
            }
            _ => Err(Error::Contract("decoder state does not match the decoder".into())),
        }
    }
}

/// Caption model plus keyword predictor and disease classifier.
#[derive(Clone, Debug)]
pub struct Model {
    pub caption: CaptionModel,
    pub predictor: KeywordPredictor,
    pub classifier: DiseaseClassifier,
}

impl Model {
    /// Build the architecture and initialize parameters from `cfg.seed`.
    pub fn build(cfg: &HyperConfig, vocab_size: usize, keyword_labels: usize, classes: usize) -> Result<(Model, ParamStore)> {
        cfg.validate()?;
        if classes < 1 {
            return Err(Error::Config("at least one disease class is required".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let caption = CaptionModel::new(&mut store, cfg, vocab_size, &mut rng);
        let predictor = KeywordPredictor::new(
            &mut store,
            cfg.patch_size,
            cfg.image_dim,
            cfg.predictor_hidden,
            keyword_labels.max(1),
            cfg.threshold,
            &mut rng,
        );
        let classifier = DiseaseClassifier::new(&mut store, cfg.patch_size, cfg.image_dim, classes, &mut rng);
        Ok((
            Model {
                caption,
                predictor,
                classifier,
            },
            store,
        ))
    }
}
