//! Training objectives: mean contrastive loss, multi-label classification
//! loss, variance-region calibration loss and their weighted total, plus
//! per-expert variance targets.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::LabelStats;
use crate::error::{MedcError, Result};
use crate::sampling::{reversed_frequencies, ExpertKind};
use crate::tensor::Tensor;

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub gamma_uniform: f64,
    /// Dot-product temperature of the mean contrastive loss.
    pub temperature: f64,
    /// Classification loss with only the positive-label term.
    pub positive_only_cls: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.8,
            lambda2: 1.0,
            lambda3: 0.4,
            gamma_min: 0.01,
            gamma_max: 1.0,
            gamma_uniform: 0.5,
            temperature: 1.0,
            positive_only_cls: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        let all = [lambda1, lambda2, lambda3];
        if all.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(MedcError::Invalid(format!("loss weights must be finite and >= 0, got {all:?}")));
        }
        if all.iter().all(|&l| l == 0.0) {
            return Err(MedcError::Invalid("at least one loss weight must be positive".into()));
        }
        Ok(Self {
            lambda1,
            lambda2,
            lambda3,
        })
    }
}

impl LossConfig {
    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.lambda1, self.lambda2, self.lambda3)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights()?;
        if !(self.gamma_max > self.gamma_min && self.gamma_min > 0.0) {
            return Err(MedcError::Invalid(format!(
                "gamma range must satisfy max > min > 0, got ({}, {})",
                self.gamma_min, self.gamma_max
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(MedcError::Invalid("temperature must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-class variance targets for one expert.
#[derive(Debug, Clone, PartialEq)]
pub struct GammaTargets(pub Vec<f64>);

/// Min-max scale class frequencies into `[a, b]`: long-tailed experts use
/// the frequencies as-is, inverse experts use the reversed order, uniform
/// experts a constant. Equal frequencies map to the midpoint.
pub fn gamma_targets(stats: &LabelStats, kind: ExpertKind, a: f64, b: f64, uniform_const: f64) -> Result<GammaTargets> {
    if !(b > a && a > 0.0) {
        return Err(MedcError::Invalid(format!("gamma range must satisfy b > a > 0, got ({a}, {b})")));
    }
    let freqs = match kind {
        ExpertKind::Uniform => return Ok(GammaTargets(vec![uniform_const; stats.num_classes()])),
        ExpertKind::LongTailed => stats.frequencies.clone(),
        ExpertKind::Inverse => reversed_frequencies(stats),
    };
    let lo = freqs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = freqs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let g = if hi == lo {
        vec![(a + b) / 2.0; freqs.len()]
    } else {
        freqs.iter().map(|w| a + (b - a) * (w - lo) / (hi - lo)).collect()
    };
    Ok(GammaTargets(g))
}

/// Binary label matrix `B × C`.
pub fn label_matrix(labels: &[Vec<usize>], num_classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), num_classes]);
    for (i, l) in labels.iter().enumerate() {
        for &c in l {
            if c >= num_classes {
                return Err(MedcError::Shape(format!("label {c} out of range for C={num_classes}")));
            }
            t.data_mut()[i * num_classes + c] = 1.0;
        }
    }
    Ok(t)
}

fn shares_label(a: &[usize], b: &[usize]) -> bool {
    a.iter().any(|x| b.contains(x))
}

/// Contrastive loss over L2-normalized means `B × d`.
///
/// For each anchor with at least one in-batch positive (shares a label) and
/// one negative (disjoint labels): `−log softmax` of the nearest positive's
/// scaled dot product against all negatives. Averaged over eligible anchors;
/// zero when none are eligible.
pub fn mean_contrastive_loss(g: &mut Graph, mus: Var, labels: &[Vec<usize>], temperature: f64) -> Result<Var> {
    let (b, _) = g.value(mus).dims2()?;
    if b != labels.len() {
        return Err(MedcError::Shape(format!("{b} means but {} label lists", labels.len())));
    }
    if b < 2 {
        return Err(MedcError::Invalid("contrastive loss needs a batch of at least 2".into()));
    }
    let mt = g.transpose(mus)?;
    let sims = g.matmul(mus, mt)?;
    let sims = g.scale(sims, 1.0 / temperature);
    let sim_values = g.value(sims).clone();

    let mut anchors = Vec::new();
    let mut positives = Vec::new();
    let mut mask = Vec::new();
    for i in 0..b {
        let row = sim_values.row(i);
        let mut best: Option<usize> = None;
        let mut has_negative = false;
        for j in (0..b).filter(|&j| j != i) {
            if shares_label(&labels[i], &labels[j]) {
                if best.is_none_or(|k| row[j] > row[k]) {
                    best = Some(j);
                }
            } else {
                has_negative = true;
            }
        }
        g.note_branch(best.map_or(u64::MAX, |k| k as u64));
        let Some(pos) = best else { continue };
        if !has_negative {
            continue;
        }
        anchors.push(i);
        positives.push(i * b + pos);
        mask.extend((0..b).map(|j| {
            let member = j == pos || (j != i && !shares_label(&labels[i], &labels[j]));
            if member {
                0.0
            } else {
                -1e30
            }
        }));
    }
    if anchors.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let a = anchors.len();
    let rows = g.select_rows(sims, &anchors)?;
    let mask = g.constant(Tensor::new(vec![a, b], mask)?);
    let masked = g.add(rows, mask)?;
    let lse = g.logsumexp(masked, 1)?;
    let flat = g.reshape(sims, &[b * b])?;
    let pos = g.select_rows(flat, &positives)?;
    let per_anchor = g.sub(lse, pos)?;
    g.mean(per_anchor)
}

/// Mean binary cross-entropy of `B × C` probabilities against binary
/// labels, with probabilities clamped to `[1e-7, 1 − 1e-7]`. With
/// `positive_only`, only `−(1/C) Σ y log p` is kept.
pub fn classification_loss(g: &mut Graph, p: Var, y: &Tensor, positive_only: bool) -> Result<Var> {
    if g.shape(p) != y.shape() {
        return Err(MedcError::Shape(format!(
            "probabilities {:?} vs labels {:?}",
            g.shape(p),
            y.shape()
        )));
    }
    let pc = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let yv = g.constant(y.clone());
    let log_p = g.log(pc);
    let pos = g.mul(yv, log_p)?;
    let total = if positive_only {
        pos
    } else {
        let one_minus_y = g.constant(y.map(|v| 1.0 - v));
        let q = g.neg(pc);
        let q = g.add_scalar(q, 1.0);
        let log_q = g.log(q);
        let neg = g.mul(one_minus_y, log_q)?;
        g.add(pos, neg)?
    };
    let m = g.mean(total)?;
    Ok(g.neg(m))
}

/// Mean over samples, positive labels and dimensions of `(σ² − γ_c)²`.
pub fn variance_region_loss(g: &mut Graph, sigmas: Var, labels: &[Vec<usize>], gamma: &GammaTargets) -> Result<Var> {
    let (b, _) = g.value(sigmas).dims2()?;
    if b != labels.len() {
        return Err(MedcError::Shape(format!("{b} sigma rows but {} label lists", labels.len())));
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        for &c in l {
            let t = *gamma
                .0
                .get(c)
                .ok_or_else(|| MedcError::Shape(format!("label {c} has no gamma target")))?;
            rows.push(i);
            targets.push(t);
        }
    }
    if rows.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let var = g.square(sigmas);
    let picked = g.select_rows(var, &rows)?;
    let target = g.constant(Tensor::new(vec![targets.len(), 1], targets)?);
    let diff = g.sub(picked, target)?;
    let sq = g.square(diff);
    g.mean(sq)
}

/// One expert's three loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub mean: Var,
    pub cls: Var,
    pub sigma: Var,
}

/// `λ1·Σ L_μ + λ2·Σ L_cls + λ3·Σ L_σ` summed over experts.
pub fn total_loss(g: &mut Graph, terms: &[LossTerms], w: LossWeights) -> Result<Var> {
    let mut acc = g.constant(Tensor::scalar(0.0));
    for t in terms {
        for (v, lambda) in [(t.mean, w.lambda1), (t.cls, w.lambda2), (t.sigma, w.lambda3)] {
            if lambda == 0.0 {
                continue;
            }
            let s = g.scale(v, lambda);
            acc = g.add(acc, s)?;
        }
    }
    Ok(acc)
}
