//! End-to-end steps shared by the CLI and the experiment harnesses: load a
//! dataset, train every component, decode a split, score it.

use std::path::{Path, PathBuf};

use crate::config::HyperConfig;
use crate::datasynth::{load_jsonl, Record, Splits};
use crate::error::{Error, Result};
use crate::metrics::{tokenize, MetricReport, Tokens};
use crate::model::{image_input, Example, Lexicon, Model};
use crate::params::ParamStore;
use crate::search::Beam;
use crate::trainer::{self, Checkpoint, LossCurve};

/// Records plus their split assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub splits: Splits,
}

impl Dataset {
    /// Load `data`; splits come from `splits` if given, else from `splits.txt`
    /// beside the data file, else from a seeded assignment.
    pub fn load(data: &Path, splits: Option<&Path>, cfg: &HyperConfig) -> Result<Self> {
        let records = load_jsonl(data)?;
        let default_path = data.with_file_name("splits.txt");
        let splits = match splits {
            Some(p) => Splits::load(p)?,
            None if default_path.exists() => Splits::load(&default_path)?,
            None => Splits::assign(records.len(), &cfg.split, cfg.seed)?,
        };
        Self::new(records, splits)
    }

    pub fn new(records: Vec<Record>, splits: Splits) -> Result<Self> {
        let n = records.len();
        if let Some(&bad) = splits.train.iter().chain(&splits.val).chain(&splits.test).find(|&&i| i >= n) {
            return Err(Error::Data(format!("split index {bad} outside {n} records")));
        }
        Ok(Dataset { records, splits })
    }

    pub fn subset(&self, split: &str) -> Result<Vec<&Record>> {
        Ok(self.splits.get(split)?.iter().map(|&i| &self.records[i]).collect())
    }

    pub fn classes(&self) -> usize {
        self.records.iter().map(|r| r.disease + 1).max().unwrap_or(1).max(2)
    }
}

pub fn examples(records: &[&Record], lex: &Lexicon, cfg: &HyperConfig) -> Result<Vec<Example>> {
    records.iter().map(|r| Example::from_record(r, lex, cfg)).collect()
}

/// A trained model with the artifacts of its training run.
#[derive(Clone, Debug)]
pub struct Trained {
    pub cfg: HyperConfig,
    pub model: Model,
    pub store: ParamStore,
    pub lexicon: Lexicon,
    pub classes: usize,
    pub caption_curve: LossCurve,
    pub predictor_curve: LossCurve,
    pub classifier_curve: LossCurve,
}

impl Trained {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            &self.cfg,
            &self.lexicon,
            self.classes,
            self.caption_curve.len() as u64,
            self.store.clone(),
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Trained {
            cfg: ckpt.header.config.clone(),
            model: ckpt.model()?,
            store: ckpt.store.clone(),
            lexicon: ckpt.lexicon()?,
            classes: ckpt.header.classes,
            caption_curve: Vec::new(),
            predictor_curve: Vec::new(),
            classifier_curve: Vec::new(),
        })
    }
}

/// Train the caption model, then the keyword predictor and disease classifier
/// (skipped when `head_epochs` is 0), all on the training split.
pub fn train(cfg: &HyperConfig, data: &Dataset) -> Result<Trained> {
    cfg.validate()?;
    let train = data.subset("train")?;
    if train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    let lexicon = Lexicon::from_records(&train);
    let classes = data.classes();
    let ex = examples(&train, &lexicon, cfg)?;
    let (model, mut store) = Model::build(cfg, lexicon.vocab.len(), lexicon.keywords.len(), classes)?;
    let caption_curve = trainer::train_captions(&model, &mut store, &ex, cfg)?;
    let (predictor_curve, classifier_curve) = if cfg.head_epochs > 0 {
        (
            trainer::train_predictor(&model, &mut store, &ex, cfg)?,
            trainer::train_classifier(&model, &mut store, &ex, cfg)?,
        )
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(Trained {
        cfg: cfg.clone(),
        model,
        store,
        lexicon,
        classes,
        caption_curve,
        predictor_curve,
        classifier_curve,
    })
}

/// Where decoding keywords come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum KeywordSource {
    /// Ground-truth keywords from the record.
    Expert,
    /// Keywords predicted from the image by the predictor head.
    Predicted,
}

/// One decoded record.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub index: usize,
    pub keywords: Vec<String>,
    pub beam: Beam,
    pub caption: String,
}

impl Trained {
    pub fn keywords_for(&self, record: &Record, source: KeywordSource) -> Result<Vec<String>> {
        match source {
            KeywordSource::Expert => Ok(record.keywords.clone()),
            KeywordSource::Predicted => {
                let img = image_input(&record.image, &self.cfg)?;
                let ids = self.model.predictor.predict(&self.store, &img)?;
                Ok(ids
                    .into_iter()
                    .filter_map(|i| self.lexicon.keywords.get(i).cloned())
                    .collect())
            }
        }
    }

    pub fn generate_one(&self, index: usize, record: &Record, beam: usize, source: KeywordSource) -> Result<Generated> {
        let keywords = self.keywords_for(record, source)?;
        let img = image_input(&record.image, &self.cfg)?;
        let seq = self.lexicon.vocab.encode_keywords(&keywords, self.cfg.keyword_max_len);
        let ctx = self.model.caption.context(&self.store, &img, &seq)?;
        let b = self.model.caption.generate(&self.store, &ctx, beam)?;
        let caption = self.lexicon.vocab.decode(b.words());
        Ok(Generated {
            index,
            keywords,
            beam: b,
            caption,
        })
    }

    pub fn generate(&self, data: &Dataset, split: &str, beam: usize, source: KeywordSource) -> Result<Vec<Generated>> {
        data.splits
            .get(split)?
            .iter()
            .map(|&i| self.generate_one(i, &data.records[i], beam, source))
            .collect()
    }
}

/// Score generated captions against the records' descriptions.
pub fn score(data: &Dataset, generated: &[Generated]) -> Result<MetricReport> {
    let cands: Vec<Tokens> = generated.iter().map(|g| tokenize(&g.caption)).collect();
    let refs: Vec<Vec<Tokens>> = generated
        .iter()
        .map(|g| vec![tokenize(&data.records[g.index].description)])
        .collect();
    MetricReport::compute(&cands, &refs)
}

/// Write `contents` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp: PathBuf = {
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(".tmp");
        path.with_file_name(name)
    };
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
