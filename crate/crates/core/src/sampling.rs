//! Per-expert re-sampling distributions over training records.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabelStats;
use crate::error::{MedcError, Result};

/// Which inter-class distribution an expert simulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertKind {
    LongTailed,
    Uniform,
    Inverse,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; 3] = [ExpertKind::LongTailed, ExpertKind::Uniform, ExpertKind::Inverse];

    pub fn sampler_kind(self) -> SamplerKind {
        match self {
            ExpertKind::LongTailed => SamplerKind::Original,
            ExpertKind::Uniform => SamplerKind::Uniform,
            ExpertKind::Inverse => SamplerKind::Inverse,
        }
    }

    /// Short label used in ablation tables (`E1`, `E2`, `E3`).
    pub fn short_name(self) -> &'static str {
        match self {
            ExpertKind::LongTailed => "E1",
            ExpertKind::Uniform => "E2",
            ExpertKind::Inverse => "E3",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ExpertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExpertKind::LongTailed => "long_tailed",
            ExpertKind::Uniform => "uniform",
            ExpertKind::Inverse => "inverse",
        })
    }
}

impl FromStr for ExpertKind {
    type Err = MedcError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "e1" | "long_tailed" | "longtailed" | "lt" => Ok(ExpertKind::LongTailed),
            "e2" | "uniform" => Ok(ExpertKind::Uniform),
            "e3" | "inverse" => Ok(ExpertKind::Inverse),
            other => Err(MedcError::Invalid(format!("unknown expert '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Original,
    Uniform,
    Inverse,
}

/// Immutable sampling distribution over record indices.
#[derive(Debug, Clone)]
pub struct SamplerSpec {
    kind: SamplerKind,
    weights: Vec<f64>,
    cumulative: Vec<f64>,
}

impl SamplerSpec {
    fn from_raw(kind: SamplerKind, raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(MedcError::Invalid("sampler over zero records".into()));
        }
        let total: f64 = raw.iter().sum();
        if !(total > 0.0) || raw.iter().any(|w| !(*w >= 0.0)) {
            return Err(MedcError::Invalid("sampler weights must be non-negative with positive sum".into()));
        }
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Ok(Self {
            kind,
            weights,
            cumulative,
        })
    }

    pub fn kind(&self) -> SamplerKind {
        self.kind
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn draw(&self, rng: &mut impl Rng) -> usize {
        let total = *self.cumulative.last().expect("non-empty");
        let u = rng.random::<f64>() * total;
        let i = self.cumulative.partition_point(|&c| c <= u);
        // guard against rounding at the top end and zero-weight tails
        let mut i = i.min(self.weights.len() - 1);
        while self.weights[i] == 0.0 && i > 0 {
            i -= 1;
        }
        i
    }
}

pub fn original_weights(n_records: usize) -> Result<SamplerSpec> {
    if n_records == 0 {
        return Err(MedcError::Invalid("original sampler needs at least one record".into()));
    }
    SamplerSpec::from_raw(SamplerKind::Original, vec![1.0; n_records])
}

fn check_labels(stats: &LabelStats, labels: &[Vec<usize>]) -> Result<()> {
    let c = stats.num_classes();
    let empty: Vec<usize> = (0..c).filter(|&k| stats.counts[k] == 0).collect();
    if !empty.is_empty() {
        return Err(MedcError::EmptyClasses(empty));
    }
    for (i, l) in labels.iter().enumerate() {
        if l.is_empty() {
            return Err(MedcError::Invalid(format!("record {i} has no positive label")));
        }
        if let Some(bad) = l.iter().find(|&&k| k >= c) {
            return Err(MedcError::Shape(format!("record {i} has label {bad} but C={c}")));
        }
    }
    Ok(())
}

fn per_record(kind: SamplerKind, class_weight: &[f64], labels: &[Vec<usize>]) -> Result<SamplerSpec> {
    let raw = labels
        .iter()
        .map(|l| l.iter().map(|&k| class_weight[k]).sum::<f64>() / l.len() as f64)
        .collect();
    SamplerSpec::from_raw(kind, raw)
}

/// Each class drawn with probability `1/C` (single-label data).
pub fn uniform_class_weights(stats: &LabelStats, labels: &[Vec<usize>]) -> Result<SamplerSpec> {
    check_labels(stats, labels)?;
    let c = stats.num_classes() as f64;
    let class_weight: Vec<f64> = stats.counts.iter().map(|&n| (1.0 / c) / n as f64).collect();
    per_record(SamplerKind::Uniform, &class_weight, labels)
}

/// Label frequencies with their order reversed: the class ranked `r` by
/// descending frequency receives the frequency ranked `C−1−r`. Ties are
/// ranked by ascending class index.
pub fn reversed_frequencies(stats: &LabelStats) -> Vec<f64> {
    let w = &stats.frequencies;
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; w.len()];
    for (r, &class) in order.iter().enumerate() {
        out[class] = w[order[w.len() - 1 - r]];
    }
    out
}

pub fn inverse_class_weights(stats: &LabelStats, labels: &[Vec<usize>]) -> Result<SamplerSpec> {
    check_labels(stats, labels)?;
    let reversed = reversed_frequencies(stats);
    let class_weight: Vec<f64> = reversed
        .iter()
        .zip(&stats.counts)
        .map(|(w, &n)| w / n as f64)
        .collect();
    per_record(SamplerKind::Inverse, &class_weight, labels)
}

pub fn sampler_for(kind: SamplerKind, stats: &LabelStats, labels: &[Vec<usize>]) -> Result<SamplerSpec> {
    match kind {
        SamplerKind::Original => original_weights(labels.len()),
        SamplerKind::Uniform => uniform_class_weights(stats, labels),
        SamplerKind::Inverse => inverse_class_weights(stats, labels),
    }
}

/// I.i.d. draws with replacement.
pub fn sample_batch(spec: &SamplerSpec, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if batch_size == 0 {
        return Err(MedcError::Invalid("batch_size must be >= 1".into()));
    }
    Ok((0..batch_size).map(|_| spec.draw(rng)).collect())
}
