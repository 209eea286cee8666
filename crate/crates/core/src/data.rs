//! Feature records, synthetic long-tailed datasets, label statistics and
//! the binary feature-file format.
//!
//! File layout (little-endian):
//!
//! ```text
//! "MEDC" | version u32 = 1 | N u64 | C u32 | L u32 | D u32
//! N × { id_len u16 | id (UTF-8) | n_labels u16 | n_labels × u32 | L·D × f32 }
//! ```
//!
//! Features are held as `f64` in memory and stored as `f32` on disk, so a
//! round trip is exact for every `f32`-representable value.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{MedcError, Result};
use crate::rng::stream;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MEDC";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 28;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    /// `L × D` frame features.
    pub features: Tensor,
    /// Binary label vector of length `C`.
    pub labels: Vec<bool>,
}

impl FeatureRecord {
    pub fn positives(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(c, &y)| y.then_some(c))
            .collect()
    }

    pub fn from_positives(id: impl Into<String>, features: Tensor, positives: &[usize], c: usize) -> Self {
        let mut labels = vec![false; c];
        for &p in positives {
            labels[p] = true;
        }
        Self {
            id: id.into(),
            features,
            labels,
        }
    }
}

/// Records sharing class count `C`, frame count `L` and feature width `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub frames: usize,
    pub dim: usize,
    pub records: Vec<FeatureRecord>,
}

impl Dataset {
    pub fn new(num_classes: usize, frames: usize, dim: usize, records: Vec<FeatureRecord>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(MedcError::Invalid(format!(
                "frames and feature dim must be positive (L={frames}, D={dim})"
            )));
        }
        for r in &records {
            if r.features.shape() != [frames, dim] {
                return Err(MedcError::Shape(format!(
                    "record {} has features {:?}, expected [{frames}, {dim}]",
                    r.id,
                    r.features.shape()
                )));
            }
            if r.labels.len() != num_classes {
                return Err(MedcError::Shape(format!(
                    "record {} has {} labels, expected C={num_classes}",
                    r.id,
                    r.labels.len()
                )));
            }
            if !r.labels.iter().any(|&y| y) {
                return Err(MedcError::Invalid(format!("record {} has no positive label", r.id)));
            }
            if !r.features.is_finite() {
                return Err(MedcError::NonFinite(format!("record {} features", r.id)));
            }
        }
        Ok(Self {
            num_classes,
            frames,
            dim,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn label_lists(&self) -> Vec<Vec<usize>> {
        self.records.iter().map(FeatureRecord::positives).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Head,
    Medium,
    Tail,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Head, Group::Medium, Group::Tail];
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Head => "head",
            Group::Medium => "medium",
            Group::Tail => "tail",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub counts: Vec<usize>,
    pub total: usize,
    pub frequencies: Vec<f64>,
    pub groups: Vec<Group>,
}

impl LabelStats {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    /// Build from raw class counts. Every positive label occurrence counts
    /// once toward the total, so multi-label records contribute several times.
    pub fn from_counts(counts: Vec<usize>, head_threshold: usize, medium_threshold: usize) -> Result<Self> {
        if medium_threshold == 0 || head_threshold <= medium_threshold {
            return Err(MedcError::Invalid(format!(
                "group thresholds must satisfy head > medium > 0, got ({head_threshold}, {medium_threshold})"
            )));
        }
        let empty: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] == 0).collect();
        if !empty.is_empty() {
            return Err(MedcError::EmptyClasses(empty));
        }
        let total: usize = counts.iter().sum();
        let frequencies = counts.iter().map(|&n| n as f64 / total as f64).collect();
        let groups = counts
            .iter()
            .map(|&n| {
                if n > head_threshold {
                    Group::Head
                } else if n > medium_threshold {
                    Group::Medium
                } else {
                    Group::Tail
                }
            })
            .collect();
        Ok(Self {
            counts,
            total,
            frequencies,
            groups,
        })
    }
}

pub fn compute_label_stats(
    records: &[FeatureRecord],
    num_classes: usize,
    head_threshold: usize,
    medium_threshold: usize,
) -> Result<LabelStats> {
    let mut counts = vec![0usize; num_classes];
    for r in records {
        for c in r.positives() {
            if c >= num_classes {
                return Err(MedcError::Shape(format!(
                    "record {} has label {c} but C={num_classes}",
                    r.id
                )));
            }
            counts[c] += 1;
        }
    }
    LabelStats::from_counts(counts, head_threshold, medium_threshold)
}

/// How many training videos each class receives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CountSpec {
    Explicit(Vec<usize>),
    /// `max(min, round(max / (k+1)^exponent))` for class `k`.
    Zipf { exponent: f64, max: usize, #[serde(default = "one")] min: usize },
}

fn one() -> usize {
    1
}

impl CountSpec {
    pub fn resolve(&self, num_classes: usize) -> Result<Vec<usize>> {
        let counts = match self {
            CountSpec::Explicit(v) => {
                if v.len() != num_classes {
                    return Err(MedcError::Invalid(format!(
                        "explicit counts list has {} entries but C={num_classes}",
                        v.len()
                    )));
                }
                v.clone()
            }
            CountSpec::Zipf { exponent, max, min } => (0..num_classes)
                .map(|k| {
                    let raw = (*max as f64 / ((k + 1) as f64).powf(*exponent)).round() as usize;
                    raw.max(*min)
                })
                .collect(),
        };
        if counts.contains(&0) {
            return Err(MedcError::Invalid(format!("class counts must be positive: {counts:?}")));
        }
        Ok(counts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub frames: usize,
    pub counts: CountSpec,
    /// Test videos generated per class (0 disables the test split).
    pub test_per_class: usize,
    pub class_sep: f64,
    pub noise: f64,
    pub temporal_jitter: f64,
    pub multilabel_prob: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            feature_dim: 32,
            frames: 8,
            counts: CountSpec::Zipf {
                exponent: 40f64.ln() / 20f64.ln(),
                max: 200,
                min: 5,
            },
            test_per_class: 20,
            class_sep: 3.0,
            noise: 1.0,
            temporal_jitter: 0.5,
            multilabel_prob: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<Vec<usize>> {
        if self.num_classes < 2 {
            return Err(MedcError::Invalid(format!(
                "synthetic data needs at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.feature_dim == 0 || self.frames == 0 {
            return Err(MedcError::Invalid("feature_dim and frames must be positive".into()));
        }
        if !(self.class_sep > 0.0) {
            return Err(MedcError::Invalid(format!("class_sep must be > 0, got {}", self.class_sep)));
        }
        if !(self.noise >= 0.0) || !(self.temporal_jitter >= 0.0) {
            return Err(MedcError::Invalid("noise and temporal_jitter must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.multilabel_prob) {
            return Err(MedcError::Invalid(format!(
                "multilabel_prob must lie in [0, 1], got {}",
                self.multilabel_prob
            )));
        }
        self.counts.resolve(self.num_classes)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: Dataset,
    pub test: Dataset,
    /// `C × D` class prototypes.
    pub prototypes: Tensor,
}

fn to_f32_grid(v: f64) -> f64 {
    v as f32 as f64
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Long-tailed synthetic frame features around random class prototypes.
///
/// Prototypes are isotropic Gaussian directions scaled to norm
/// `class_sep / √2`, so pairwise distances concentrate near `class_sep`.
/// Each class draws from its own stream keyed by `(seed, class)`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    let counts = cfg.validate()?;
    let (c, d, l) = (cfg.num_classes, cfg.feature_dim, cfg.frames);

    let mut proto_rng = stream(cfg.seed, "data.prototypes", &[]);
    let mut prototypes = Tensor::zeros(&[c, d]);
    for k in 0..c {
        let row: Vec<f64> = (0..d).map(|_| normal(&mut proto_rng)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let scale = cfg.class_sep / std::f64::consts::SQRT_2 / norm;
        for (j, v) in row.into_iter().enumerate() {
            prototypes.data_mut()[k * d + j] = v * scale;
        }
    }

    let make_split = |tag: &str, per_class: &dyn Fn(usize) -> usize| -> Result<Dataset> {
        let mut records = Vec::new();
        for k in 0..c {
            let mut rng = stream(cfg.seed, tag, &[k as u64]);
            let proto = prototypes.row(k);
            for i in 0..per_class(k) {
                let offset: Vec<f64> = (0..d).map(|_| cfg.noise * normal(&mut rng)).collect();
                let mut feats = Vec::with_capacity(l * d);
                for _ in 0..l {
                    for j in 0..d {
                        let v = proto[j] + offset[j] + cfg.temporal_jitter * normal(&mut rng);
                        feats.push(to_f32_grid(v));
                    }
                }
                let mut positives = vec![k];
                if cfg.multilabel_prob > 0.0 && rng.random::<f64>() < cfg.multilabel_prob {
                    let other = rng.random_range(0..c - 1);
                    positives.push(if other >= k { other + 1 } else { other });
                }
                let id = format!("{tag}-c{k:04}-{i:06}");
                records.push(FeatureRecord::from_positives(
                    id,
                    Tensor::new(vec![l, d], feats)?,
                    &positives,
                    c,
                ));
            }
        }
        Dataset::new(c, l, d, records)
    };

    let train = make_split("train", &|k| counts[k])?;
    let test = make_split("test", &|_| cfg.test_per_class)?;
    Ok(SyntheticData {
        train,
        test,
        prototypes,
    })
}

/// Serialize a dataset into the binary feature format.
pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let per_record = ds.frames * ds.dim * 4;
    let mut out = Vec::with_capacity(HEADER_BYTES + ds.len() * (per_record + 32));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    for v in [ds.num_classes, ds.frames, ds.dim] {
        let v = u32::try_from(v).map_err(|_| MedcError::Invalid(format!("dimension {v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    for r in &ds.records {
        let id = r.id.as_bytes();
        let id_len = u16::try_from(id.len())
            .map_err(|_| MedcError::Invalid(format!("record id longer than 65535 bytes: {}", r.id)))?;
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(id);
        let pos = r.positives();
        out.extend_from_slice(&(pos.len() as u16).to_le_bytes());
        for p in pos {
            out.extend_from_slice(&(p as u32).to_le_bytes());
        }
        for &v in r.features.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(MedcError::Parse {
                offset: self.pos as u64,
                message: format!(
                    "truncated file: need {n} bytes for {what}, {} remain",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn err(&self, at: usize, message: String) -> MedcError {
        MedcError::Parse {
            offset: at as u64,
            message,
        }
    }
}

pub fn decode_dataset(buf: &[u8]) -> Result<Dataset> {
    let mut cur = Cursor { buf, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(cur.err(0, format!("bad magic {magic:?}, expected \"MEDC\"")));
    }
    let version = cur.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(cur.err(4, format!("unsupported version {version}, expected {FORMAT_VERSION}")));
    }
    let n = cur.u64("record count")?;
    let c = cur.u32("class count")? as usize;
    let l = cur.u32("frame count")? as usize;
    let d = cur.u32("feature dim")? as usize;
    if l == 0 || d == 0 {
        return Err(cur.err(20, format!("frame count and feature dim must be positive (L={l}, D={d})")));
    }
    let mut records = Vec::new();
    for _ in 0..n {
        let start = cur.pos;
        let id_len = cur.u16("id length")? as usize;
        let id_at = cur.pos;
        let id = std::str::from_utf8(cur.take(id_len, "id")?)
            .map_err(|e| cur.err(id_at, format!("record id is not UTF-8: {e}")))?
            .to_owned();
        let n_labels = cur.u16("label count")? as usize;
        if n_labels == 0 {
            return Err(cur.err(start, format!("record {id} has no positive label")));
        }
        let mut labels = vec![false; c];
        for _ in 0..n_labels {
            let at = cur.pos;
            let k = cur.u32("label index")? as usize;
            if k >= c {
                return Err(cur.err(at, format!("label {k} out of range for C={c}")));
            }
            labels[k] = true;
        }
        let feat_at = cur.pos;
        let raw = cur.take(l * d * 4, "features")?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(cur.err(feat_at, format!("record {id} has non-finite features")));
        }
        records.push(FeatureRecord {
            id,
            features: Tensor::new(vec![l, d], values)?,
            labels,
        });
    }
    if cur.pos != buf.len() {
        return Err(cur.err(cur.pos, format!("{} trailing bytes after last record", buf.len() - cur.pos)));
    }
    Dataset::new(c, l, d, records)
}

pub fn write_feature_file(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_dataset(ds)?;
    fs::write(path, bytes).map_err(|e| MedcError::io(path, e))
}

pub fn read_feature_file(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| MedcError::io(path, e))?;
    decode_dataset(&bytes)
}
