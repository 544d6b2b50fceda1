//! Sample records, the manifest format, image files, the synthetic generator
//! and the train/test/val split.
//!
//! Manifest layout (UTF-8, one record per line, tab-separated):
//!
//! ```text
//! # ctxreport-manifest v1
//! # fields: id image report labels split
//! # seed=7 samples=64 positives=30        (optional, written by the generator)
//! s0000<TAB>images/s0000.grid<TAB>The heart size is normal. ...<TAB>10000000000000<TAB>train
//! ```
//!
//! `image` is relative to the manifest's directory. In `report`, backslash,
//! tab, newline and carriage return are written as `\\`, `\t`, `\n`, `\r`.
//! `labels` is 14 characters of `0`/`1` in [`LABEL_NAMES`] order.
//!
//! Image files are either raw grids (`.grid`: magic `CTXRGRID`, u32 version,
//! u32 channels, u32 height, u32 width, then f32 values, all little-endian)
//! or 8-bit grayscale PNGs scaled to `[0, 1]`.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LABEL_NAMES: [&str; 14] = [
    "No Finding",
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Opacity",
    "Lung Lesion",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
];
pub const NO_FINDING: usize = 0;

const MANIFEST_MAGIC: &str = "# ctxreport-manifest v1";
const MANIFEST_FIELDS: &str = "# fields: id\timage\treport\tlabels\tsplit";
const GRID_MAGIC: &[u8; 8] = b"CTXRGRID";
const GRID_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct LabelSet(pub [bool; 14]);

impl LabelSet {
    pub fn no_finding() -> Self {
        let mut l = [false; 14];
        l[NO_FINDING] = true;
        Self(l)
    }

    pub fn is_no_finding(&self) -> bool {
        self.0[NO_FINDING]
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.0
            .iter()
            .zip(LABEL_NAMES)
            .filter(|(b, _)| **b)
            .map(|(_, n)| n)
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for LabelSet {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.len() != 14 {
            return Err(format!("expected 14 label flags, got {}", s.len()));
        }
        let mut l = [false; 14];
        for (i, c) in s.chars().enumerate() {
            l[i] = match c {
                '0' => false,
                '1' => true,
                other => return Err(format!("label flag must be 0 or 1, got `{other}`")),
            };
        }
        Ok(Self(l))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub id: String,
    /// Relative to the manifest directory.
    pub image: PathBuf,
    pub report: String,
    pub labels: LabelSet,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ManifestMeta {
    pub seed: u64,
    pub samples: usize,
    pub positives: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub meta: Option<ManifestMeta>,
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if r.id.is_empty() {
                return Err(Error::Validation("empty sample id".into()));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Validation(format!("duplicate sample id `{}`", r.id)));
            }
        }
        Ok(())
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match it.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(o) => return Err(format!("unknown escape `\\{o}`")),
            None => return Err("dangling escape at end of field".into()),
        }
    }
    Ok(out)
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    let mut s = String::new();
    s.push_str(MANIFEST_MAGIC);
    s.push('\n');
    s.push_str(MANIFEST_FIELDS);
    s.push('\n');
    if let Some(m) = &manifest.meta {
        s.push_str(&format!(
            "# seed={} samples={} positives={}\n",
            m.seed, m.samples, m.positives
        ));
    }
    for r in &manifest.records {
        let image = r
            .image
            .to_str()
            .ok_or_else(|| Error::invalid("image path is not UTF-8"))?;
        if r.id.contains(['\t', '\n']) || image.contains(['\t', '\n']) {
            return Err(Error::Validation(format!(
                "id or image path of `{}` contains a tab or newline",
                r.id
            )));
        }
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.id,
            image,
            escape(&r.report),
            r.labels,
            r.split
        ));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn parse_meta(line: &str) -> Option<ManifestMeta> {
    let mut seed = None;
    let mut samples = None;
    let mut positives = None;
    for kv in line.trim_start_matches('#').split_whitespace() {
        let (k, v) = kv.split_once('=')?;
        match k {
            "seed" => seed = v.parse().ok(),
            "samples" => samples = v.parse().ok(),
            "positives" => positives = v.parse().ok(),
            _ => return None,
        }
    }
    Some(ManifestMeta {
        seed: seed?,
        samples: samples?,
        positives: positives?,
    })
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let perr = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut meta = None;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if lineno == 1 {
            if line != MANIFEST_MAGIC {
                return Err(perr(1, "missing manifest header".into()));
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(m) = parse_meta(rest) {
                meta = Some(m);
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(perr(
                lineno,
                format!("expected 5 tab-separated fields, found {}", fields.len()),
            ));
        }
        let report = unescape(fields[2]).map_err(|m| perr(lineno, m))?;
        let labels = fields[3].parse().map_err(|m| perr(lineno, m))?;
        let split = fields[4].parse().map_err(|m| perr(lineno, m))?;
        records.push(SampleRecord {
            id: fields[0].to_string(),
            image: PathBuf::from(fields[1]),
            report,
            labels,
            split,
        });
    }
    let m = Manifest { meta, records };
    m.validate()?;
    Ok(m)
}

pub fn save_grid(image: &Tensor, path: &Path) -> Result<()> {
    let [c, h, w] = image.shape()[..] else {
        return Err(Error::invalid("image must be C x H x W"));
    };
    let mut buf = Vec::with_capacity(24 + 4 * image.len());
    buf.extend_from_slice(GRID_MAGIC);
    for v in [GRID_VERSION, c as u32, h as u32, w as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for &v in image.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_grid(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Validation(format!("{}: {m}", path.display()));
    if bytes.len() < 24 || &bytes[..8] != GRID_MAGIC {
        return Err(bad("not a grid file"));
    }
    let word =
        |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes"));
    if word(0) != GRID_VERSION {
        return Err(bad("unsupported grid version"));
    }
    let (c, h, w) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let n = c * h * w;
    if bytes.len() != 24 + 4 * n {
        return Err(bad("grid size does not match its header"));
    }
    let data = bytes[24..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(vec![c, h, w], data)
}

/// Load a `.grid` file or any 8-bit image (converted to grayscale, `[0, 1]`).
pub fn load_image(path: &Path) -> Result<Tensor> {
    if path.extension().is_some_and(|e| e == "grid") {
        return load_grid(path);
    }
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&p| p as f64 / 255.0).collect();
    Tensor::new(vec![1, h as usize, w as usize], data)
}

/// Bilinear resize of every channel to `size x size`.
pub fn resize(image: &Tensor, size: usize) -> Result<Tensor> {
    let [c, h, w] = image.shape()[..] else {
        return Err(Error::invalid("image must be C x H x W"));
    };
    if h == size && w == size {
        return Ok(image.clone());
    }
    let src = image.data();
    let mut out = Vec::with_capacity(c * size * size);
    let map = |i: usize, n: usize| {
        ((i as f64 + 0.5) * n as f64 / size as f64 - 0.5).clamp(0.0, (n - 1) as f64)
    };
    for ch in 0..c {
        for i in 0..size {
            let y = map(i, h);
            let (y0, fy) = (y.floor() as usize, y.fract());
            let y1 = (y0 + 1).min(h - 1);
            for j in 0..size {
                let x = map(j, w);
                let (x0, fx) = (x.floor() as usize, x.fract());
                let x1 = (x0 + 1).min(w - 1);
                let p = |yy: usize, xx: usize| src[ch * h * w + yy * w + xx];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, size, size], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitRatios {
    pub train: f64,
    pub test: f64,
    pub val: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            test: 0.1,
            val: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn split_of(&self, id: &str) -> Option<Split> {
        if self.train.iter().any(|x| x == id) {
            Some(Split::Train)
        } else if self.val.iter().any(|x| x == id) {
            Some(Split::Val)
        } else if self.test.iter().any(|x| x == id) {
            Some(Split::Test)
        } else {
            None
        }
    }
}

/// Seeded shuffle, then contiguous train/test/val slices. Test and val get
/// the floor of their share; train takes the remainder.
pub fn split_dataset(ids: &[String], ratios: SplitRatios, seed: u64) -> Result<DatasetSplit> {
    if ids.is_empty() {
        return Err(Error::invalid("cannot split an empty id list"));
    }
    let SplitRatios { train, test, val } = ratios;
    if [train, test, val].iter().any(|r| !(0.0..=1.0).contains(r))
        || (train + test + val - 1.0).abs() > 1e-9
    {
        return Err(Error::invalid(
            "split ratios must be in [0, 1] and sum to 1",
        ));
    }
    let n = ids.len();
    let n_test = (test * n as f64 + 1e-9).floor() as usize;
    let n_val = (val * n as f64 + 1e-9).floor() as usize;
    let n_train = n - n_test - n_val;
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut it = shuffled.into_iter();
    let train: Vec<String> = it.by_ref().take(n_train).collect();
    let test: Vec<String> = it.by_ref().take(n_test).collect();
    let val: Vec<String> = it.collect();
    Ok(DatasetSplit { train, val, test })
}

/// Sentences the generator draws reports from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhraseBank {
    pub heart: String,
    /// One sentence per background level.
    pub lungs: Vec<String>,
    /// Appended to every negative report.
    pub normal: Vec<String>,
    /// Per quadrant (top-left, top-right, bottom-left, bottom-right):
    /// `[small, large]` finding sentences.
    pub findings: Vec<[String; 2]>,
    /// Label index set by a finding in each quadrant.
    pub finding_labels: Vec<usize>,
    /// Closing sentence of every positive report.
    pub positive_note: String,
}

impl Default for PhraseBank {
    fn default() -> Self {
        let s = |x: &str| x.to_string();
        Self {
            heart: s("The heart size is normal."),
            lungs: vec![
                s("The lungs are well expanded."),
                s("Lung volumes are low."),
            ],
            normal: vec![
                s("No focal consolidation, pleural effusion or pneumothorax."),
                s("There is no acute cardiopulmonary abnormality."),
            ],
            findings: vec![
                [
                    s("There is a small opacity in the right upper lobe."),
                    s("There is a large opacity in the right upper lobe."),
                ],
                [
                    s("There is mild consolidation in the left upper lobe."),
                    s("There is extensive consolidation in the left upper lobe."),
                ],
                [
                    s("There is minimal atelectasis at the right base."),
                    s("There is moderate atelectasis at the right base."),
                ],
                [
                    s("There is a small left pleural effusion."),
                    s("There is a large left pleural effusion."),
                ],
            ],
            finding_labels: vec![3, 6, 8, 10],
            positive_note: s("Note that follow-up imaging is recommended."),
        }
    }
}

impl PhraseBank {
    pub fn all_findings(&self) -> impl Iterator<Item = &str> {
        self.findings
            .iter()
            .flat_map(|p| p.iter().map(String::as_str))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub samples: usize,
    pub image_size: usize,
    /// Probability that a sample carries at least one finding.
    pub prevalence: f64,
    /// Background intensity per level; the level picks the lung sentence.
    pub background: Vec<f64>,
    pub noise: f64,
    pub blob_amplitude: f64,
    pub phrases: PhraseBank,
    pub split: SplitRatios,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            samples: 64,
            image_size: 32,
            prevalence: 0.5,
            background: vec![0.2, 0.4],
            noise: 0.03,
            blob_amplitude: 0.6,
            phrases: PhraseBank::default(),
            split: SplitRatios::default(),
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prevalence > 0.0 && self.prevalence < 1.0) {
            return Err(Error::Config("prevalence must lie in (0, 1)".into()));
        }
        if self.image_size < 8 || !self.image_size.is_multiple_of(2) {
            return Err(Error::Config(
                "image size must be even and at least 8".into(),
            ));
        }
        if self.samples == 0 {
            return Err(Error::Config("sample count must be positive".into()));
        }
        let p = &self.phrases;
        if p.lungs.len() != self.background.len() || p.lungs.is_empty() {
            return Err(Error::Config(
                "need one lung sentence per background level".into(),
            ));
        }
        if p.findings.len() != 4
            || p.finding_labels.len() != 4
            || p.finding_labels.iter().any(|&l| l == 0 || l >= 14)
        {
            return Err(Error::Config(
                "need four quadrant findings with disease labels".into(),
            ));
        }
        if self.noise < 0.0 {
            return Err(Error::Config("noise must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Records with their images held in memory, keyed by id.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub images: IndexMap<String, Tensor>,
}

impl Dataset {
    pub fn records(&self) -> &[SampleRecord] {
        &self.manifest.records
    }

    pub fn record(&self, id: &str) -> Option<&SampleRecord> {
        self.manifest.records.iter().find(|r| r.id == id)
    }

    pub fn image(&self, id: &str) -> Result<&Tensor> {
        self.images
            .get(id)
            .ok_or_else(|| Error::invalid(format!("no image for sample `{id}`")))
    }

    pub fn ids_in(&self, split: Split) -> Vec<String> {
        self.records()
            .iter()
            .filter(|r| r.split == split)
            .map(|r| r.id.clone())
            .collect()
    }

    /// Load a manifest and every image it references, resized to `size`.
    pub fn load(manifest_path: &Path, size: usize) -> Result<Self> {
        let manifest = load_manifest(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut images = IndexMap::new();
        for r in &manifest.records {
            let img = load_image(&base.join(&r.image))?;
            images.insert(r.id.clone(), resize(&img, size)?);
        }
        Ok(Self { manifest, images })
    }

    /// Write the manifest plus one grid file per image into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for r in self.records() {
            let p = dir.join(&r.image);
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            save_grid(self.image(&r.id)?, &p)?;
        }
        let path = dir.join("manifest.tsv");
        save_manifest(&self.manifest, &path)?;
        Ok(path)
    }
}

/// A quadrant finding drawn by the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Blob {
    quadrant: usize,
    large: bool,
}

/// Build a synthetic dataset in memory. Everything is drawn from one seeded
/// stream, so a fixed config yields identical records and pixels.
pub fn generate_synthetic_dataset(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let size = cfg.image_size;
    let width = (cfg.samples.max(1) - 1).to_string().len().max(4);
    let mut records = Vec::with_capacity(cfg.samples);
    let mut images = IndexMap::new();
    let mut positives = 0;
    for i in 0..cfg.samples {
        let id = format!("s{i:0width$}");
        let positive = rng.random_bool(cfg.prevalence);
        let level = rng.random_range(0..cfg.background.len());
        let mut blobs = Vec::new();
        if positive {
            positives += 1;
            let k = rng.random_range(1..=2);
            let mut quads: Vec<usize> = rand::seq::index::sample(&mut rng, 4, k).into_vec();
            quads.sort_unstable();
            for q in quads {
                blobs.push(Blob {
                    quadrant: q,
                    large: rng.random_bool(0.5),
                });
            }
        }
        let mut px = vec![cfg.background[level]; size * size];
        for p in px.iter_mut() {
            *p += noise.sample(&mut rng);
        }
        let quarter = size as f64 / 4.0;
        for b in &blobs {
            let jitter = size as f64 / 32.0;
            let cy =
                quarter * (1 + 2 * (b.quadrant / 2)) as f64 + rng.random_range(-jitter..=jitter);
            let cx =
                quarter * (1 + 2 * (b.quadrant % 2)) as f64 + rng.random_range(-jitter..=jitter);
            let sigma = if b.large {
                size as f64 / 8.0
            } else {
                size as f64 / 16.0
            };
            for y in 0..size {
                for x in 0..size {
                    let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                    px[y * size + x] += cfg.blob_amplitude * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
        let ph = &cfg.phrases;
        let mut sentences = vec![ph.heart.clone(), ph.lungs[level].clone()];
        let mut labels = LabelSet::default();
        if blobs.is_empty() {
            sentences.extend(ph.normal.iter().cloned());
            labels = LabelSet::no_finding();
        } else {
            for b in &blobs {
                sentences.push(ph.findings[b.quadrant][b.large as usize].clone());
                labels.0[ph.finding_labels[b.quadrant]] = true;
            }
            sentences.push(ph.positive_note.clone());
        }
        images.insert(id.clone(), Tensor::new(vec![1, size, size], px)?);
        records.push(SampleRecord {
            image: PathBuf::from(format!("images/{id}.grid")),
            id,
            report: sentences.join(" "),
            labels,
            split: Split::Train,
        });
    }
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let split = split_dataset(&ids, cfg.split, cfg.seed)?;
    for r in &mut records {
        r.split = split.split_of(&r.id).expect("split is exhaustive");
    }
    Ok(Dataset {
        manifest: Manifest {
            meta: Some(ManifestMeta {
                seed: cfg.seed,
                samples: cfg.samples,
                positives,
            }),
            records,
        },
        images,
    })
}
