//! Prediction heads on pooled image features: a multi-label keyword predictor
//! and a disease classifier with Prec@k evaluation.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sigmoid, Tape, Var};
use crate::encoders::{ImageInput, PatchEmbedder};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::ParamStore;
use crate::tensor::{log_softmax, Tensor};

/// Label indices whose logistic probability strictly exceeds `threshold`.
pub fn select_keywords(logits: &[f64], threshold: f64) -> Vec<usize> {
    logits
        .iter()
        .enumerate()
        .filter(|(_, &z)| sigmoid(z) > threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Classes ordered by softmax probability, ties by ascending class id.
pub fn rank_classes(logits: &[f64]) -> Vec<(usize, f64)> {
    let probs: Vec<f64> = log_softmax(logits).into_iter().map(f64::exp).collect();
    let mut ranked: Vec<(usize, f64)> = probs.into_iter().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked
}

/// Fraction of examples whose gold label is among the first `k` ranked classes.
pub fn prec_at_k(rankings: &[Vec<usize>], gold: &[usize], k: usize) -> Result<f64> {
    if rankings.len() != gold.len() {
        return Err(Error::Dimension(format!(
            "{} rankings for {} gold labels",
            rankings.len(),
            gold.len()
        )));
    }
    if k == 0 {
        return Err(Error::Contract("Prec@k needs k >= 1".into()));
    }
    if rankings.is_empty() {
        return Err(Error::Contract("Prec@k over an empty set".into()));
    }
    let mut hits = 0usize;
    for (r, &g) in rankings.iter().zip(gold) {
        if k > r.len() {
            return Err(Error::Contract(format!("k = {k} exceeds {} classes", r.len())));
        }
        if r[..k].contains(&g) {
            hits += 1;
        }
    }
    Ok(hits as f64 / rankings.len() as f64)
}

/// Binary cross-entropy with logits, summed over labels: each label becomes a
/// two-way softmax over `[0, z]`.
pub fn multilabel_bce(tape: &mut Tape, logits: Var, labels: &[bool]) -> Result<Var> {
    let n = tape.value(logits).cols();
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} logits", labels.len())));
    }
    let col = tape.transpose(logits)?;
    let zero = tape.constant(Tensor::zeros(&[n, 1]));
    let pairs = tape.concat_last(&[zero, col])?;
    let targets: Vec<usize> = labels.iter().map(|&b| b as usize).collect();
    tape.cross_entropy(pairs, &targets)
}

/// One-hidden-layer ReLU MLP over pooled image features, one logit per keyword.
#[derive(Clone, Debug)]
pub struct KeywordPredictor {
    pub embedder: PatchEmbedder,
    pub hidden: Linear,
    pub output: Linear,
    pub threshold: f64,
}

impl KeywordPredictor {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        patch_size: usize,
        image_dim: usize,
        hidden: usize,
        labels: usize,
        threshold: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        KeywordPredictor {
            embedder: PatchEmbedder::new(store, "predictor.image", patch_size, image_dim, rng),
            hidden: Linear::new(store, "predictor.hidden", image_dim, hidden, true, rng),
            output: Linear::new(store, "predictor.output", hidden, labels, true, rng),
            threshold,
        }
    }

    pub fn labels(&self) -> usize {
        self.output.out_dim
    }

    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, image: &ImageInput) -> Result<Var> {
        let (_, pooled) = self.embedder.encode(tape, store, image)?;
        let h = self.hidden.forward(tape, store, pooled)?;
        let h = tape.relu(h);
        self.output.forward(tape, store, h)
    }

    pub fn predict(&self, store: &ParamStore, image: &ImageInput) -> Result<Vec<usize>> {
        let mut tape = Tape::inference();
        let z = self.logits(&mut tape, store, image)?;
        Ok(select_keywords(tape.value(z).data(), self.threshold))
    }
}

/// Linear disease classifier over pooled image features.
#[derive(Clone, Debug)]
pub struct DiseaseClassifier {
    pub embedder: PatchEmbedder,
    pub output: Linear,
}

impl DiseaseClassifier {
    pub fn new(store: &mut ParamStore, patch_size: usize, image_dim: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        DiseaseClassifier {
            embedder: PatchEmbedder::new(store, "classifier.image", patch_size, image_dim, rng),
            output: Linear::new(store, "classifier.output", image_dim, classes, true, rng),
        }
    }

    pub fn classes(&self) -> usize {
        self.output.out_dim
    }

    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, image: &ImageInput) -> Result<Var> {
        let (_, pooled) = self.embedder.encode(tape, store, image)?;
        self.output.forward(tape, store, pooled)
    }

    pub fn rank(&self, store: &ParamStore, image: &ImageInput) -> Result<Vec<(usize, f64)>> {
        let mut tape = Tape::inference();
        let z = self.logits(&mut tape, store, image)?;
        Ok(rank_classes(tape.value(z).data()))
    }
}
