//! Adam, minibatch training loops and the binary checkpoint container.
//!
//! Each example gets its own tape; gradients are summed into per-parameter
//! buffers in example order, then divided by the batch's observation count
//! (tokens for captions, labels for the keyword predictor, examples for the
//! classifier). Batches are drawn from a seeded shuffle and processed in
//! ascending index order, so a run is fully determined by its seed.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! b"MCKP"  u32 version  u32 header_len  header (JSON)
//! u64 step  u32 tensor_count
//! per tensor: u32 name_len  name (UTF-8)  u32 ndim  u64 dims[ndim]  f64 data[prod(dims)]
//! ```
//!
//! The JSON header holds the config, the vocabulary tokens, the keyword label
//! set and the number of disease classes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::config::HyperConfig;
use crate::decoders::Dropout;
use crate::error::{Error, Result};
use crate::heads::multilabel_bce;
use crate::model::{Example, Lexicon, Model};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::text::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with lazily allocated moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&[f64]> {
        self.m.get(id.index())?.as_deref()
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&[f64]> {
        self.v.get(id.index())?.as_deref()
    }

    /// One update. `grads[i]` is the gradient of parameter `i`; `None` means
    /// zero (moments still decay).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (id, g) in store.ids().zip(grads) {
            if let Some(g) = g {
                if g.shape() != store.get(id).shape() {
                    return Err(Error::Contract(format!(
                        "gradient of {} has shape {:?}, parameter has {:?}",
                        store.name(id),
                        g.shape(),
                        store.get(id).shape()
                    )));
                }
            }
        }
        self.m.resize(store.len(), None);
        self.v.resize(store.len(), None);
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (id, g) in store.ids().zip(grads) {
            let i = id.index();
            if g.is_none() && self.m[i].is_none() {
                continue;
            }
            let n = store.get(id).len();
            let m = self.m[i].get_or_insert_with(|| vec![0.0; n]);
            let v = self.v[i].get_or_insert_with(|| vec![0.0; n]);
            let p = store.get_mut(id).data_mut();
            for j in 0..n {
                let gj = g.as_ref().map_or(0.0, |g| g.data()[j]);
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Rescale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Settings of one training loop.
#[derive(Clone, Debug, PartialEq)]
pub struct FitSettings {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl FitSettings {
    pub fn captions(cfg: &HyperConfig) -> Self {
        FitSettings {
            adam: AdamConfig {
                lr: cfg.learning_rate,
                beta1: cfg.adam_beta1,
                beta2: cfg.adam_beta2,
                eps: cfg.adam_eps,
            },
            epochs: cfg.epochs,
            max_steps: cfg.max_steps,
            batch_size: cfg.batch_size,
            grad_clip: cfg.grad_clip,
            dropout: cfg.dropout,
            seed: cfg.seed,
        }
    }

    pub fn heads(cfg: &HyperConfig) -> Self {
        FitSettings {
            adam: AdamConfig {
                lr: cfg.head_learning_rate,
                ..Self::captions(cfg).adam
            },
            epochs: cfg.head_epochs,
            max_steps: 0,
            dropout: 0.0,
            ..Self::captions(cfg)
        }
    }
}

/// `(step, mean loss)` per optimizer update.
pub type LossCurve = Vec<(usize, f64)>;

/// Generic minibatch loop. `loss(tape, store, i, dropout)` builds the summed
/// loss of example `i` and returns it with its observation count.
pub fn fit<F>(store: &mut ParamStore, n: usize, settings: &FitSettings, mut loss: F) -> Result<LossCurve>
where
    F: FnMut(&mut Tape, &ParamStore, usize, &mut Option<Dropout<'_>>) -> Result<(Var, usize)>,
{
    if n == 0 {
        return Err(Error::Contract("training split is empty".into()));
    }
    if settings.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(settings.seed.wrapping_add(1));
    let mut adam = Adam::new(settings.adam);
    let mut curve = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    'outer: for _ in 0..settings.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(settings.batch_size) {
            if settings.max_steps > 0 && curve.len() >= settings.max_steps {
                break 'outer;
            }
            let mut batch = chunk.to_vec();
            batch.sort_unstable();
            let mut grads: Vec<Option<Tensor>> = vec![None; store.len()];
            let mut total = 0.0;
            let mut count = 0usize;
            for &i in &batch {
                let mut tape = Tape::new();
                let mut drop = (settings.dropout > 0.0).then(|| Dropout {
                    p: settings.dropout,
                    rng: &mut drop_rng,
                });
                let (l, c) = loss(&mut tape, store, i, &mut drop)?;
                total += tape.value(l).item();
                count += c;
                let g = tape.backward(l)?;
                for (pid, var) in tape.bound_params() {
                    if let Some(gv) = g.get(var) {
                        match &mut grads[pid.index()] {
                            Some(acc) => acc.data_mut().iter_mut().zip(gv.data()).for_each(|(a, b)| *a += b),
                            slot => *slot = Some(gv.clone()),
                        }
                    }
                }
            }
            let scale = 1.0 / count.max(1) as f64;
            for g in grads.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
            }
            clip_global_norm(&mut grads, settings.grad_clip);
            adam.step(store, &grads)?;
            let step = curve.len() + 1;
            curve.push((step, total * scale));
        }
    }
    Ok(curve)
}

/// Teacher-forced caption training; the loss is mean token cross-entropy.
pub fn train_captions(model: &Model, store: &mut ParamStore, examples: &[Example], cfg: &HyperConfig) -> Result<LossCurve> {
    fit(store, examples.len(), &FitSettings::captions(cfg), |tape, store, i, drop| {
        model.caption.loss(tape, store, &examples[i], drop)
    })
}

/// Keyword predictor with mean binary cross-entropy over labels.
pub fn train_predictor(model: &Model, store: &mut ParamStore, examples: &[Example], cfg: &HyperConfig) -> Result<LossCurve> {
    let p = &model.predictor;
    fit(store, examples.len(), &FitSettings::heads(cfg), |tape, store, i, _| {
        let ex = &examples[i];
        let z = p.logits(tape, store, &ex.image)?;
        Ok((multilabel_bce(tape, z, &ex.keyword_labels)?, p.labels()))
    })
}

/// Disease classifier with softmax cross-entropy.
pub fn train_classifier(model: &Model, store: &mut ParamStore, examples: &[Example], cfg: &HyperConfig) -> Result<LossCurve> {
    let c = &model.classifier;
    fit(store, examples.len(), &FitSettings::heads(cfg), |tape, store, i, _| {
        let ex = &examples[i];
        if ex.disease >= c.classes() {
            return Err(Error::Data(format!("disease {} outside {} classes", ex.disease, c.classes())));
        }
        let z = c.logits(tape, store, &ex.image)?;
        Ok((tape.cross_entropy(z, &[ex.disease])?, 1))
    })
}

/// Mean per-token cross-entropy without dropout.
pub fn evaluate_loss(model: &Model, store: &ParamStore, examples: &[Example]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for ex in examples {
        let mut tape = Tape::inference();
        let (l, c) = model.caption.loss(&mut tape, store, ex, &mut None)?;
        total += tape.value(l).item();
        count += c;
    }
    Ok(total / count.max(1) as f64)
}

pub fn write_loss_csv(path: &Path, curve: &[(usize, f64)]) -> Result<()> {
    let mut s = String::from("step,loss\n");
    for (step, loss) in curve {
        s.push_str(&format!("{step},{loss}\n"));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

const MAGIC: &[u8; 4] = b"MCKP";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: HyperConfig,
    pub vocab: Vec<String>,
    pub keywords: Vec<String>,
    pub classes: usize,
}

/// Trained parameters plus everything needed to rebuild the model.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub step: u64,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn new(cfg: &HyperConfig, lex: &Lexicon, classes: usize, step: u64, store: ParamStore) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                config: cfg.clone(),
                vocab: lex.vocab.tokens().to_vec(),
                keywords: lex.keywords.clone(),
                classes,
            },
            step,
            store,
        }
    }

    pub fn lexicon(&self) -> Result<Lexicon> {
        Ok(Lexicon {
            vocab: Vocabulary::from_tokens(self.header.vocab.clone())?,
            keywords: self.header.keywords.clone(),
        })
    }

    /// Rebuild the architecture from the header; parameters come from the file.
    pub fn model(&self) -> Result<Model> {
        let h = &self.header;
        let (model, fresh) = Model::build(&h.config, h.vocab.len(), h.keywords.len(), h.classes)?;
        if fresh.len() != self.store.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, model expects {}",
                self.store.len(),
                fresh.len()
            )));
        }
        for (name, t) in fresh.iter() {
            let id = self
                .store
                .id(name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter {name}")))?;
            if self.store.get(id).shape() != t.shape() {
                return Err(Error::Data(format!("parameter {name} has the wrong shape")));
            }
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + self.store.num_scalars() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for (name, t) in self.store.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Data("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {version}")));
        }
        let hlen = read_u32(&mut r)? as usize;
        let mut hbuf = vec![0u8; hlen];
        read_exact(&mut r, &mut hbuf)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&hbuf).map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
        let step = read_u64(&mut r)?;
        let count = read_u32(&mut r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let nlen = read_u32(&mut r)? as usize;
            let mut nbuf = vec![0u8; nlen];
            read_exact(&mut r, &mut nbuf)?;
            let name = String::from_utf8(nbuf).map_err(|_| Error::Data("tensor name is not UTF-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            if len.saturating_mul(8) > r.len() {
                return Err(Error::Data(format!("tensor {name} is truncated")));
            }
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            if store.id(&name).is_some() {
                return Err(Error::Data(format!("duplicate tensor {name}")));
            }
            store.insert(name, Tensor::new(shape, data)?);
        }
        if !r.is_empty() {
            return Err(Error::Data("trailing bytes after checkpoint tensors".into()));
        }
        Ok(Checkpoint { header, step, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(f).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    if r.len() < buf.len() {
        return Err(Error::Data("checkpoint is truncated".into()));
    }
    let (head, tail) = r.split_at(buf.len());
    buf.copy_from_slice(head);
    *r = tail;
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
