//! Synthetic retinal-report records, JSONL I/O and dataset splits.
//!
//! Each record has a disease class, two to five keywords drawn from a
//! class-conditional pool, a description rendered from the disease and
//! keywords, and a 64×64 grayscale image. The image carries a strong
//! class-specific stripe texture and faint keyword-specific 8×8 tiles stamped
//! at a few patch positions, under Gaussian noise, so the disease is readable
//! from the image while the keywords are only weakly so. Diseases come in
//! look-alike pairs sharing one keyword pool, so keywords alone narrow the
//! disease to a pair and only the image separates the two.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::de::{self, MapAccess, SeqAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::config::SplitSpec;
use crate::error::{Error, Result};

/// Image payload: a grid of 8-bit pixels or a precomputed feature vector.
#[derive(Clone, Debug, PartialEq)]
pub enum ImageData {
    Pixels(Vec<Vec<u8>>),
    Features(Vec<f64>),
}

impl Serialize for ImageData {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ImageData::Pixels(rows) => rows.serialize(s),
            ImageData::Features(f) => {
                let mut m = s.serialize_map(Some(1))?;
                m.serialize_entry("features", f)?;
                m.end()
            }
        }
    }
}

impl<'de> Deserialize<'de> for ImageData {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct ImageVisitor;

        impl<'de> Visitor<'de> for ImageVisitor {
            type Value = ImageData;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a pixel grid or {\"features\": [...]}")
            }

            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> std::result::Result<ImageData, A::Error> {
                let mut rows = Vec::with_capacity(seq.size_hint().unwrap_or(64));
                while let Some(row) = seq.next_element::<Vec<u8>>()? {
                    rows.push(row);
                }
                Ok(ImageData::Pixels(rows))
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<ImageData, A::Error> {
                let mut features = None;
                while let Some(key) = map.next_key::<String>()? {
                    if key == "features" {
                        features = Some(map.next_value::<Vec<f64>>()?);
                    } else {
                        return Err(de::Error::unknown_field(&key, &["features"]));
                    }
                }
                features
                    .map(ImageData::Features)
                    .ok_or_else(|| de::Error::missing_field("features"))
            }
        }

        d.deserialize_any(ImageVisitor)
    }
}

impl ImageData {
    /// Pixel grid dimensions, or `None` for feature vectors.
    pub fn size(&self) -> Option<(usize, usize)> {
        match self {
            ImageData::Pixels(rows) => Some((rows.len(), rows.first().map_or(0, Vec::len))),
            ImageData::Features(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub image: ImageData,
    pub keywords: Vec<String>,
    pub description: String,
    pub disease: usize,
}

const DISEASES: [&str; 8] = [
    "diabetic retinopathy",
    "central serous chorioretinopathy",
    "age related macular degeneration",
    "branch retinal vein occlusion",
    "retinitis pigmentosa",
    "polypoidal choroidal vasculopathy",
    "macular hole",
    "hypertensive retinopathy",
];

const KEYWORDS: [&str; 24] = [
    "microaneurysms",
    "hard exudates",
    "dot hemorrhages",
    "cotton wool spots",
    "neovascularization",
    "macular edema",
    "serous detachment",
    "leakage point",
    "pigment changes",
    "drusen",
    "geographic atrophy",
    "subretinal fluid",
    "flame hemorrhages",
    "venous dilation",
    "bone spicules",
    "vessel attenuation",
    "polyps",
    "hemorrhagic detachment",
    "full thickness defect",
    "operculum",
    "arteriolar narrowing",
    "av nicking",
    "choroidal thinning",
    "optic disc pallor",
];

const POOLS: [[usize; 6]; 8] = [
    [0, 1, 2, 3, 12, 20],
    [5, 6, 7, 11, 16, 17],
    [8, 9, 10, 18, 19, 22],
    [4, 13, 14, 15, 21, 23],
    [4, 13, 14, 15, 21, 23],
    [5, 6, 7, 11, 16, 17],
    [8, 9, 10, 18, 19, 22],
    [0, 1, 2, 3, 12, 20],
];

const FINDINGS: [&str; 4] = ["seen", "noted", "present", "observed"];

/// Knobs of the image renderer and keyword sampler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub min_keywords: usize,
    pub max_keywords: usize,
    pub background: f64,
    pub class_amplitude: f64,
    pub keyword_amplitude: f64,
    pub stamps_per_keyword: usize,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            patch_size: 8,
            min_keywords: 2,
            max_keywords: 5,
            background: 0.2,
            class_amplitude: 0.3,
            keyword_amplitude: 0.3,
            stamps_per_keyword: 2,
            noise: 0.15,
        }
    }
}

/// Fixed structure of the synthetic domain: names, pools, textures.
#[derive(Clone, Debug)]
pub struct World {
    pub config: SynthConfig,
    tiles: Vec<Vec<f64>>,
}

/// The sentence fragment a keyword contributes to a description.
pub fn keyword_fragment(keyword_id: usize) -> String {
    format!("{} {}", KEYWORDS[keyword_id], FINDINGS[keyword_id % FINDINGS.len()])
}

pub fn disease_names() -> &'static [&'static str] {
    &DISEASES
}

pub fn keyword_names() -> &'static [&'static str] {
    &KEYWORDS
}

pub fn keyword_pool(disease: usize) -> &'static [usize] {
    &POOLS[disease]
}

/// Description for a disease and keyword set; keyword order does not matter.
pub fn render_description(disease: usize, keyword_ids: &[usize]) -> String {
    let mut ids = keyword_ids.to_vec();
    ids.sort_unstable();
    let mut s = format!("fundus image shows {}.", DISEASES[disease]);
    for k in ids {
        s.push(' ');
        s.push_str(&keyword_fragment(k));
        s.push('.');
    }
    s
}

impl World {
    pub fn new(config: SynthConfig) -> Self {
        // Tiles are part of the domain, not of a particular sample: fixed seed.
        let mut rng = ChaCha8Rng::seed_from_u64(0x7e7_11e5);
        let p = config.patch_size * config.patch_size;
        let tiles = (0..KEYWORDS.len())
            .map(|_| (0..p).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect())
            .collect();
        World { config, tiles }
    }

    fn class_texture(&self, disease: usize, y: usize, x: usize) -> f64 {
        let period = if disease < 4 { 8 } else { 4 };
        let u = match disease % 4 {
            0 => y,
            1 => x,
            2 => x + y,
            _ => x + period - y % period,
        } % period;
        0.5 + 0.5 * (2.0 * std::f64::consts::PI * u as f64 / period as f64).cos()
    }

    pub fn render_image(&self, disease: usize, keyword_ids: &[usize], rng: &mut ChaCha8Rng) -> Vec<Vec<u8>> {
        let c = &self.config;
        let n = c.image_size;
        let ps = c.patch_size;
        let grid = n / ps;
        let mut img = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                img[y * n + x] = c.background + c.class_amplitude * self.class_texture(disease, y, x);
            }
        }
        for &k in keyword_ids {
            for _ in 0..c.stamps_per_keyword {
                let cell = rng.random_range(0..grid * grid);
                let (gy, gx) = (cell / grid, cell % grid);
                for dy in 0..ps {
                    for dx in 0..ps {
                        img[(gy * ps + dy) * n + gx * ps + dx] += c.keyword_amplitude * self.tiles[k][dy * ps + dx];
                    }
                }
            }
        }
        let normal = Normal::new(0.0, c.noise).expect("noise scale");
        img.chunks(n)
            .map(|row| {
                row.iter()
                    .map(|&v| {
                        let v: f64 = v + normal.sample(rng);
                        (v.clamp(0.0, 1.0) * 255.0).round() as u8
                    })
                    .collect()
            })
            .collect()
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Record {
        let disease = rng.random_range(0..DISEASES.len());
        let pool = POOLS[disease];
        let hi = self.config.max_keywords.min(pool.len());
        let lo = self.config.min_keywords.clamp(1, hi);
        let count = rng.random_range(lo..=hi);
        let mut ids: Vec<usize> = pool.choose_multiple(rng, count).copied().collect();
        ids.shuffle(rng);
        let image = self.render_image(disease, &ids, rng);
        Record {
            image: ImageData::Pixels(image),
            keywords: ids.iter().map(|&k| KEYWORDS[k].to_string()).collect(),
            description: render_description(disease, &ids),
            disease,
        }
    }
}

/// `n_records` records, reproducible from `seed`.
pub fn generate(seed: u64, n_records: usize, config: &SynthConfig) -> Result<Vec<Record>> {
    if n_records == 0 {
        return Err(Error::Contract("n_records must be at least 1".into()));
    }
    if config.image_size % config.patch_size != 0 {
        return Err(Error::Config("synthetic image size must be a multiple of the patch size".into()));
    }
    let world = World::new(config.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_records).map(|_| world.sample(&mut rng)).collect())
}

pub fn save_jsonl(path: &Path, records: &[Record]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Data(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parse records; blank lines are skipped, errors carry the 1-based line number.
pub fn parse_jsonl(reader: impl BufRead) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Record>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(BufReader::new(f))
}

/// Record indices per split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Seeded shuffle, then contiguous train/val/test blocks sized by rounding.
    pub fn assign(n: usize, spec: &SplitSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = ((n as f64) * spec.train).round() as usize;
        let n_val = (((n as f64) * spec.val).round() as usize).min(n - n_train);
        let mut train = idx[..n_train].to_vec();
        let mut val = idx[n_train..n_train + n_val].to_vec();
        let mut test = idx[n_train + n_val..].to_vec();
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        Ok(Splits { train, val, test })
    }

    pub fn get(&self, name: &str) -> Result<&[usize]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }

    pub fn to_text(&self) -> String {
        let line = |name: &str, v: &[usize]| {
            let ids: Vec<String> = v.iter().map(usize::to_string).collect();
            format!("{name}: {}\n", ids.join(" "))
        };
        line("train", &self.train) + &line("val", &self.val) + &line("test", &self.test)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut parts: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (name, rest) = line.split_once(':').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "expected `name: indices`".into(),
            })?;
            let ids = rest
                .split_whitespace()
                .map(|t| {
                    t.parse().map_err(|_| Error::Parse {
                        line: i + 1,
                        msg: format!("bad index `{t}`"),
                    })
                })
                .collect::<Result<Vec<usize>>>()?;
            parts.insert(name.trim(), ids);
        }
        let mut take = |n: &str| {
            parts
                .remove(n)
                .ok_or_else(|| Error::Data(format!("split manifest has no `{n}` line")))
        };
        Ok(Splits {
            train: take("train")?,
            val: take("val")?,
            test: take("test")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&s)
    }
}

fn entropy<'a>(counts: impl Iterator<Item = &'a usize>) -> f64 {
    let counts: Vec<f64> = counts.map(|&c| c as f64).collect();
    let total: f64 = counts.iter().sum();
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / total;
            -p * p.ln()
        })
        .sum()
}

/// `(H(W), H(W | K))` in nats: entropy of description tokens, unconditioned
/// and conditioned on the record's keyword set.
pub fn description_entropy(records: &[Record]) -> (f64, f64) {
    let mut all: BTreeMap<String, usize> = BTreeMap::new();
    let mut by_set: BTreeMap<BTreeSet<String>, BTreeMap<String, usize>> = BTreeMap::new();
    for r in records {
        let key: BTreeSet<String> = r.keywords.iter().cloned().collect();
        let bucket = by_set.entry(key).or_default();
        for w in crate::text::preprocess(&r.description) {
            *all.entry(w.clone()).or_insert(0) += 1;
            *bucket.entry(w).or_insert(0) += 1;
        }
    }
    let total: usize = all.values().sum();
    let h = entropy(all.values());
    let h_cond = by_set
        .values()
        .map(|b| {
            let n: usize = b.values().sum();
            n as f64 / total as f64 * entropy(b.values())
        })
        .sum();
    (h, h_cond)
}
