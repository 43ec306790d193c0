//! Command-line surface. Every command writes into an output directory and
//! finishes by atomically writing `manifest.json`, which echoes the command,
//! its arguments, the effective config and the seed. `replay` re-runs a
//! manifest.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{DecoderKind, FusionKind, HyperConfig, Modality, SplitSpec};
use crate::datasynth::{self, Splits, SynthConfig};
use crate::error::{Error, Result};
use crate::heads::prec_at_k;
use crate::metrics::{tokenize, MetricReport, Tokens};
use crate::model::image_input;
use crate::pipeline::{self, write_atomic, Dataset, KeywordSource, Trained};
use crate::tensor::Tensor;
use crate::trainer::{write_loss_csv, Checkpoint};

#[derive(Debug, Parser)]
#[command(name = "medcap", version, about = "Keyword-driven medical image captioning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its split manifest.
    SynthData(SynthArgs),
    /// Train the caption model and prediction heads.
    Train(TrainArgs),
    /// Decode captions for a split.
    Generate(GenerateArgs),
    /// Score candidate captions against references.
    Evaluate(EvaluateArgs),
    /// Train and score every cell of a fusion × modality × decoder grid.
    Ablate(AblateArgs),
    /// Write per-token cross-attention heatmaps for one record.
    ExportAttention(ExportArgs),
    /// Write one structured report per record.
    Report(ReportArgs),
    /// Re-run a command from its manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Split fractions, e.g. 0.6,0.2,0.2.
    #[arg(long, default_value = "0.6,0.2,0.2")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ConfigArgs {
    /// TOML config; omitted keys take the desk defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Config override `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct DataArgs {
    /// Dataset JSONL.
    #[arg(long)]
    pub data: PathBuf,
    /// Split manifest; defaults to splits.txt beside the data file.
    #[arg(long)]
    pub splits: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 1)]
    pub beam: usize,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, value_enum, default_value = "expert")]
    pub keywords: KeywordSource,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    /// Candidates JSONL: {"id": .., "caption": ".."} per line.
    #[arg(long)]
    pub cand: PathBuf,
    /// References JSONL: {"id": .., "references": [".."]} per line.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Comma-separated fusion strategies.
    #[arg(long, default_value = "transfuser,coattention,sum,mul,average,concat,contextual")]
    pub fusions: String,
    /// Comma-separated input modalities.
    #[arg(long, default_value = "image+keywords,image,keywords")]
    pub modalities: String,
    /// Comma-separated decoders.
    #[arg(long, default_value = "lstm,transformer")]
    pub decoders: String,
    /// Comma-separated beam widths evaluated per trained cell.
    #[arg(long, default_value = "1")]
    pub beams: String,
    /// Comma-separated training seeds; defaults to the config seed.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ExportArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Record index in the dataset file.
    #[arg(long)]
    pub record: usize,
    #[arg(long, default_value_t = 1)]
    pub beam: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReportArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, value_enum, default_value = "expert")]
    pub keywords: KeywordSource,
    #[arg(long, default_value_t = 1)]
    pub beam: usize,
    /// Report at most this many records of the split.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Also export attention heatmaps (transformer checkpoints only).
    #[arg(long)]
    pub attention: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write into this directory instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Echo of a command run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub args: serde_json::Value,
    pub config: Option<HyperConfig>,
    pub seed: Option<u64>,
    pub outputs: Vec<String>,
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))
        })
        .collect()
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<HyperConfig> {
        let base = match &self.config {
            Some(p) => HyperConfig::load(p)?,
            None => HyperConfig::desk(),
        };
        base.with_overrides(&parse_overrides(&self.overrides)?)
    }
}

fn parse_list<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<Vec<T>> {
    s.split(',').filter(|t| !t.trim().is_empty()).map(|t| t.trim().parse()).collect()
}

fn parse_numbers<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad {what} `{t}`")))
        })
        .collect()
}

fn parse_split(s: &str) -> Result<SplitSpec> {
    let v: Vec<f64> = parse_numbers(s, "split fraction")?;
    if v.len() != 3 {
        return Err(Error::Config(format!("split needs three fractions, got `{s}`")));
    }
    let spec = SplitSpec {
        train: v[0],
        val: v[1],
        test: v[2],
    };
    spec.validate()?;
    Ok(spec)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn finish<A: Serialize>(out: &Path, command: &str, args: &A, config: Option<&HyperConfig>, seed: Option<u64>, outputs: &[&str]) -> Result<()> {
    let m = Manifest {
        command: command.into(),
        args: serde_json::to_value(args).expect("args serialize"),
        config: config.cloned(),
        seed,
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    let mut s = serde_json::to_string_pretty(&m).expect("manifest serializes");
    s.push('\n');
    write_atomic(&out.join("manifest.json"), s.as_bytes())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData(a) => synth_data(&a),
        Command::Train(a) => train(&a),
        Command::Generate(a) => generate(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Ablate(a) => ablate(&a),
        Command::ExportAttention(a) => export_attention(&a),
        Command::Report(a) => report(&a),
        Command::Replay(a) => replay(&a),
    }
}

pub fn synth_data(a: &SynthArgs) -> Result<()> {
    let spec = parse_split(&a.split)?;
    ensure_dir(&a.out)?;
    let records = datasynth::generate(a.seed, a.n, &SynthConfig::default())?;
    datasynth::save_jsonl(&a.out.join("data.jsonl"), &records)?;
    Splits::assign(records.len(), &spec, a.seed)?.save(&a.out.join("splits.txt"))?;
    finish(&a.out, "synth-data", a, None, Some(a.seed), &["data.jsonl", "splits.txt"])
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let data = Dataset::load(&a.data.data, a.data.splits.as_deref(), &cfg)?;
    ensure_dir(&a.out)?;
    let t = pipeline::train(&cfg, &data)?;
    t.checkpoint().save(&a.out.join("model.ckpt"))?;
    write_loss_csv(&a.out.join("loss.csv"), &t.caption_curve)?;
    write_loss_csv(&a.out.join("predictor_loss.csv"), &t.predictor_curve)?;
    write_loss_csv(&a.out.join("classifier_loss.csv"), &t.classifier_curve)?;
    t.lexicon.vocab.save(&a.out.join("vocab.txt"))?;
    write_file(&a.out.join("config.toml"), cfg.to_toml_string())?;
    finish(
        &a.out,
        "train",
        a,
        Some(&cfg),
        Some(cfg.seed),
        &["model.ckpt", "loss.csv", "predictor_loss.csv", "classifier_loss.csv", "vocab.txt", "config.toml"],
    )
}

fn load_trained(ckpt: &Path) -> Result<Trained> {
    Trained::from_checkpoint(&Checkpoint::load(ckpt)?)
}

#[derive(Serialize, Deserialize)]
struct Candidate {
    id: usize,
    caption: String,
}

#[derive(Serialize, Deserialize)]
struct Reference {
    id: usize,
    references: Vec<String>,
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| serde_json::to_string(i).expect("serializes") + "\n")
        .collect()
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let t = load_trained(&a.ckpt)?;
    let data = Dataset::load(&a.data.data, a.data.splits.as_deref(), &t.cfg)?;
    ensure_dir(&a.out)?;
    let gens = t.generate(&data, &a.split, a.beam, a.keywords)?;
    let cands: Vec<Candidate> = gens
        .iter()
        .map(|g| Candidate {
            id: g.index,
            caption: g.caption.clone(),
        })
        .collect();
    let refs: Vec<Reference> = gens
        .iter()
        .map(|g| Reference {
            id: g.index,
            references: vec![data.records[g.index].description.clone()],
        })
        .collect();
    write_file(&a.out.join("candidates.jsonl"), jsonl(&cands))?;
    write_file(&a.out.join("references.jsonl"), jsonl(&refs))?;
    finish(&a.out, "generate", a, Some(&t.cfg), Some(t.cfg.seed), &["candidates.jsonl", "references.jsonl"])
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    s.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                msg: format!("{}: {e}", path.display()),
            })
        })
        .collect()
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let cands: Vec<Candidate> = read_jsonl(&a.cand)?;
    let refs: Vec<Reference> = read_jsonl(&a.reference)?;
    let by_id: std::collections::BTreeMap<usize, &Reference> = refs.iter().map(|r| (r.id, r)).collect();
    let mut c_tok: Vec<Tokens> = Vec::new();
    let mut r_tok: Vec<Vec<Tokens>> = Vec::new();
    for c in &cands {
        let r = by_id
            .get(&c.id)
            .ok_or_else(|| Error::Data(format!("no references for candidate id {}", c.id)))?;
        c_tok.push(tokenize(&c.caption));
        r_tok.push(r.references.iter().map(|s| tokenize(s)).collect());
    }
    let report = MetricReport::compute(&c_tok, &r_tok)?;
    ensure_dir(&a.out)?;
    write_file(&a.out.join("metrics.txt"), report.to_string())?;
    finish(&a.out, "evaluate", a, None, None, &["metrics.txt"])
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub fusion: FusionKind,
    pub modality: Modality,
    pub decoder: DecoderKind,
    pub seed: u64,
    pub beam: usize,
    pub report: MetricReport,
}

/// Train one config and score the test split at each beam width.
pub fn run_cell(cfg: &HyperConfig, data: &Dataset, beams: &[usize]) -> Result<Vec<MetricReport>> {
    let t = pipeline::train(cfg, data)?;
    beams
        .iter()
        .map(|&b| {
            let gens = t.generate(data, "test", b, KeywordSource::Expert)?;
            pipeline::score(data, &gens)
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("fusion\tmodality\tdecoder\tseed\tbeam");
    for (k, _) in MetricReport::compute(&[vec!["x".into()]], &[vec![vec!["x".into()]]])
        .expect("trivial report")
        .fields()
    {
        s.push('\t');
        s.push_str(k);
    }
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{}\t{}\t{}\t{}\t{}", r.fusion, r.modality, r.decoder, r.seed, r.beam));
        for (_, v) in r.report.fields() {
            s.push_str(&format!("\t{v:.6}"));
        }
        s.push('\n');
    }
    s
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let base = a.config.resolve()?;
    let fusions: Vec<FusionKind> = parse_list(&a.fusions)?;
    let modalities: Vec<Modality> = parse_list(&a.modalities)?;
    let decoders: Vec<DecoderKind> = parse_list(&a.decoders)?;
    let beams: Vec<usize> = parse_numbers(&a.beams, "beam width")?;
    if beams.contains(&0) {
        return Err(Error::Config("beam widths must be at least 1".into()));
    }
    let seeds: Vec<u64> = match &a.seeds {
        Some(s) => parse_numbers(s, "seed")?,
        None => vec![base.seed],
    };
    let data = Dataset::load(&a.data.data, a.data.splits.as_deref(), &base)?;
    ensure_dir(&a.out)?;
    let mut rows = Vec::new();
    for &decoder in &decoders {
        for &fusion in &fusions {
            for &modality in &modalities {
                for &seed in &seeds {
                    let cfg = HyperConfig {
                        fusion,
                        modality,
                        decoder,
                        seed,
                        ..base.clone()
                    };
                    for (report, &beam) in run_cell(&cfg, &data, &beams)?.into_iter().zip(&beams) {
                        rows.push(AblationRow {
                            fusion,
                            modality,
                            decoder,
                            seed,
                            beam,
                            report,
                        });
                    }
                }
            }
        }
    }
    write_file(&a.out.join("ablation.tsv"), ablation_table(&rows))?;
    finish(&a.out, "ablate", a, Some(&base), Some(base.seed), &["ablation.tsv"])
}

/// Plain PGM (P2) of a weight grid scaled so the maximum maps to 255.
/// Returns the image text and the maximum weight.
pub fn heatmap_pgm(weights: &[f64], rows: usize, cols: usize) -> Result<(String, f64)> {
    if weights.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "{} weights for a {rows}x{cols} heatmap",
            weights.len()
        )));
    }
    let max_w = weights.iter().copied().fold(0.0, f64::max);
    let mut s = format!("P2\n{cols} {rows}\n255\n");
    for r in 0..rows {
        let line: Vec<String> = (0..cols)
            .map(|c| {
                let w = weights[r * cols + c];
                let px = if max_w > 0.0 { (255.0 * w / max_w).round() as u8 } else { 0 };
                px.to_string()
            })
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    Ok((s, max_w))
}

/// Parse a plain PGM back into pixel values (rows × cols).
pub fn parse_pgm(text: &str) -> Result<(usize, usize, Vec<u8>)> {
    let mut it = text.split_whitespace();
    let bad = || Error::Data("malformed PGM".into());
    if it.next() != Some("P2") {
        return Err(bad());
    }
    let mut num = || -> Result<usize> { it.next().ok_or_else(bad)?.parse().map_err(|_| bad()) };
    let cols = num()?;
    let rows = num()?;
    let _max = num()?;
    let px = (0..rows * cols)
        .map(|_| num().and_then(|v| u8::try_from(v).map_err(|_| bad())))
        .collect::<Result<Vec<u8>>>()?;
    Ok((rows, cols, px))
}

/// Heatmaps for `record`; returns the index file body.
fn write_heatmaps(t: &Trained, record: &datasynth::Record, beam: usize, dir: &Path) -> Result<String> {
    let cap = &t.model.caption;
    let grid = t.cfg.image_size / t.cfg.patch_size;
    let img = image_input(&record.image, &t.cfg)?;
    let seq = t.lexicon.vocab.encode_keywords(&record.keywords, t.cfg.keyword_max_len);
    let ctx = cap.context(&t.store, &img, &seq)?;
    if matches!(cap.decoder, crate::model::Decoder::Lstm(_)) {
        return Err(Error::Unsupported("attention export needs a transformer-decoder checkpoint".into()));
    }
    let rows = ctx.fused.k_final.rows();
    if rows != grid * grid {
        return Err(Error::Unsupported(format!(
            "decoder memory has {rows} row(s); patch heatmaps need one row per patch (co-attention fusion)"
        )));
    }
    let b = cap.generate(&t.store, &ctx, beam)?;
    let att: Tensor = cap.cross_attention(&t.store, &ctx, &b.tokens)?;
    ensure_dir(dir)?;
    let mut index = String::from("step\ttoken\tfile\tmax_weight\n");
    for (step, &tok) in b.tokens.iter().enumerate() {
        let (pgm, max_w) = heatmap_pgm(att.row_slice(step), grid, grid)?;
        let file = format!("step_{step:02}.pgm");
        write_file(&dir.join(&file), pgm)?;
        index.push_str(&format!("{step}\t{}\t{file}\t{max_w}\n", t.lexicon.vocab.token(tok)));
    }
    write_file(&dir.join("index.tsv"), &index)?;
    Ok(index)
}

pub fn export_attention(a: &ExportArgs) -> Result<()> {
    let t = load_trained(&a.ckpt)?;
    let data = Dataset::load(&a.data.data, a.data.splits.as_deref(), &t.cfg)?;
    let record = data
        .records
        .get(a.record)
        .ok_or_else(|| Error::Data(format!("record {} outside {} records", a.record, data.records.len())))?;
    ensure_dir(&a.out)?;
    write_heatmaps(&t, record, a.beam, &a.out)?;
    finish(&a.out, "export-attention", a, Some(&t.cfg), Some(t.cfg.seed), &["index.tsv"])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedDisease {
    pub class: usize,
    pub name: String,
    pub score: f64,
}

/// Table-style report for one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub id: usize,
    pub disease_top5: Vec<RankedDisease>,
    pub keywords: Vec<String>,
    /// "expert" for ground-truth keywords, "pseudo" for predicted ones.
    pub keyword_source: String,
    pub description: String,
    pub heatmap: Option<String>,
}

fn disease_name(class: usize) -> String {
    datasynth::disease_names()
        .get(class)
        .map_or_else(|| format!("class {class}"), |s| s.to_string())
}

pub fn emit_report(t: &Trained, id: usize, record: &datasynth::Record, source: KeywordSource, beam: usize, heatmap: Option<String>) -> Result<ReportRecord> {
    let img = image_input(&record.image, &t.cfg)?;
    let ranked = t.model.classifier.rank(&t.store, &img)?;
    let g = t.generate_one(id, record, beam, source)?;
    Ok(ReportRecord {
        id,
        disease_top5: ranked
            .iter()
            .take(5)
            .map(|&(class, score)| RankedDisease {
                class,
                name: disease_name(class),
                score,
            })
            .collect(),
        keywords: g.keywords,
        keyword_source: match source {
            KeywordSource::Expert => "expert".into(),
            KeywordSource::Predicted => "pseudo".into(),
        },
        description: g.caption,
        heatmap,
    })
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let t = load_trained(&a.ckpt)?;
    let data = Dataset::load(&a.data.data, a.data.splits.as_deref(), &t.cfg)?;
    let mut ids = data.splits.get(&a.split)?.to_vec();
    if let Some(l) = a.limit {
        ids.truncate(l);
    }
    ensure_dir(&a.out)?;
    let dir = a.out.join("reports");
    ensure_dir(&dir)?;
    let mut rankings = Vec::new();
    let mut gold = Vec::new();
    for &i in &ids {
        let rec = &data.records[i];
        let heatmap = if a.attention {
            let sub = format!("attention_{i:05}");
            write_heatmaps(&t, rec, a.beam, &a.out.join(&sub))?;
            Some(format!("{sub}/index.tsv"))
        } else {
            None
        };
        let r = emit_report(&t, i, rec, a.keywords, a.beam, heatmap)?;
        let img = image_input(&rec.image, &t.cfg)?;
        rankings.push(t.model.classifier.rank(&t.store, &img)?.into_iter().map(|x| x.0).collect::<Vec<_>>());
        gold.push(rec.disease);
        let body = serde_json::to_string_pretty(&r).expect("report serializes") + "\n";
        write_file(&dir.join(format!("record_{i:05}.json")), body)?;
    }
    let mut summary = String::new();
    if !ids.is_empty() {
        let classes = t.model.classifier.classes();
        for k in [1usize, 5] {
            if k <= classes {
                summary.push_str(&format!("prec_at_{k}={}\n", prec_at_k(&rankings, &gold, k)?));
            }
        }
    }
    summary.push_str(&format!("records={}\n", ids.len()));
    write_file(&a.out.join("summary.txt"), summary)?;
    finish(&a.out, "report", a, Some(&t.cfg), Some(t.cfg.seed), &["reports", "summary.txt"])
}

pub fn replay(a: &ReplayArgs) -> Result<()> {
    let text = fs::read_to_string(&a.manifest).map_err(|e| Error::io(&a.manifest, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: format!("manifest: {e}"),
    })?;
    let mut args = m.args;
    if let Some(out) = &a.out {
        args["out"] = serde_json::Value::String(out.to_string_lossy().into_owned());
    }
    fn de<T: for<'de> Deserialize<'de>>(v: serde_json::Value) -> Result<T> {
        serde_json::from_value(v).map_err(|e| Error::Data(format!("manifest arguments: {e}")))
    }
    match m.command.as_str() {
        "synth-data" => synth_data(&de(args)?),
        "train" => train(&de(args)?),
        "generate" => generate(&de(args)?),
        "evaluate" => evaluate(&de(args)?),
        "ablate" => ablate(&de(args)?),
        "export-attention" => export_attention(&de(args)?),
        "report" => report(&de(args)?),
        other => Err(Error::Data(format!("manifest names unknown command `{other}`"))),
    }
}
