//! Finite-difference check of the complete multi-expert objective.

use crate::autograd::{gradient_check, GradCheckReport, Graph, ParamStore, Var};
use crate::data::LabelStats;
use crate::error::Result;
use crate::losses::{
    classification_loss, label_matrix, mean_contrastive_loss, total_loss, variance_region_loss, GammaTargets,
    LossConfig, LossTerms,
};
use crate::model::{MedcModel, ModelConfig, Noise};
use crate::rng::stream;
use crate::sampling::ExpertKind;
use crate::tensor::Tensor;
use crate::training::expert_gamma;
use rand::Rng;
use rand_distr::StandardNormal;

pub const GRADCHECK_STEP: f64 = 1e-4;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Problem size of the check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckShape {
    pub num_classes: usize,
    pub embed_dim: usize,
    pub frames: usize,
    pub batch: usize,
    pub input_dim: usize,
    pub temporal_attention: bool,
}

impl Default for GradCheckShape {
    fn default() -> Self {
        Self {
            num_classes: 4,
            embed_dim: 8,
            frames: 4,
            batch: 4,
            input_dim: 6,
            temporal_attention: true,
        }
    }
}

struct ExpertBatch {
    videos: Vec<Tensor>,
    labels: Vec<Vec<usize>>,
    epsilon: Tensor,
}

/// Random three-expert model and per-expert batches with fixed ε; compares
/// the gradient of the summed objective with central differences.
pub fn check_full_objective(seed: u64, shape: GradCheckShape) -> Result<GradCheckReport> {
    check_full_objective_with_step(seed, shape, GRADCHECK_STEP)
}

pub fn check_full_objective_with_step(seed: u64, shape: GradCheckShape, h: f64) -> Result<GradCheckReport> {
    let c = shape.num_classes;
    let counts: Vec<usize> = (0..c).map(|k| 8usize.pow((c - k) as u32 % 4) + k + 1).collect();
    let stats = LabelStats::from_counts(counts, 100, 10)?;
    let losses = LossConfig::default();
    let experts: Vec<(ExpertKind, Vec<f64>)> = ExpertKind::ALL
        .iter()
        .map(|&k| Ok((k, expert_gamma(&losses, &stats, k)?.0)))
        .collect::<Result<_>>()?;
    let cfg = ModelConfig {
        trunk_dim: shape.embed_dim,
        hidden_dim: shape.embed_dim,
        embed_dim: shape.embed_dim,
        temporal_attention: shape.temporal_attention,
        ..ModelConfig::default()
    };
    let mut model = MedcModel::new(cfg, shape.input_dim, c, &experts, seed)?;
    // Move off the zero-bias initial point: there a ReLU-dead trunk row
    // reaches the row normalization with zero variance, where the function
    // bends on the 1e-5 guard scale and central differences are meaningless.
    let mut rng = stream(seed, "gradcheck.jitter", &[]);
    for p in model.params.iter_mut() {
        for v in p.tensor.data_mut() {
            *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }

    let mut rng = stream(seed, "gradcheck.batch", &[]);
    let batches: Vec<ExpertBatch> = (0..experts.len())
        .map(|_| {
            let videos = (0..shape.batch)
                .map(|_| {
                    let data = (0..shape.frames * shape.input_dim).map(|_| rng.sample(StandardNormal)).collect();
                    Tensor::new(vec![shape.frames, shape.input_dim], data)
                })
                .collect::<Result<Vec<_>>>()?;
            // first two samples share a class so the contrastive term is active
            let shared = rng.random_range(0..c);
            let labels = (0..shape.batch)
                .map(|i| {
                    let first = if i < 2 { shared } else { rng.random_range(0..c) };
                    let mut l = vec![first];
                    if rng.random_bool(0.3) {
                        let extra = rng.random_range(0..c);
                        if extra != first {
                            l.push(extra);
                        }
                    }
                    l.sort();
                    l
                })
                .collect();
            let eps = (0..shape.batch * shape.embed_dim).map(|_| rng.sample(StandardNormal)).collect();
            Ok(ExpertBatch {
                videos,
                labels,
                epsilon: Tensor::new(vec![shape.batch, shape.embed_dim], eps)?,
            })
        })
        .collect::<Result<_>>()?;

    let weights = losses.weights()?;
    let objective = |g: &mut Graph, store: &ParamStore| -> Result<Var> {
        let mut m = model.clone();
        m.params = store.clone();
        let mut terms = Vec::new();
        for (head, b) in m.experts.iter().zip(&batches) {
            let refs: Vec<&Tensor> = b.videos.iter().collect();
            let (x, bs, l) = m.stack_inputs(g, &refs)?;
            let h0 = m.trunk_forward(g, x)?;
            let f = m.forward_expert(g, h0, bs, l, head, Noise::Fixed(b.epsilon.clone()))?;
            let mean = mean_contrastive_loss(g, f.mu, &b.labels, losses.temperature)?;
            let y = label_matrix(&b.labels, c)?;
            let cls = classification_loss(g, f.p, &y, false)?;
            let sigma = variance_region_loss(g, f.sigma, &b.labels, &GammaTargets(head.gamma.clone()))?;
            terms.push(LossTerms { mean, cls, sigma });
        }
        total_loss(g, &terms, weights)
    };
    let mut store = model.params.clone();
    gradient_check(objective, &mut store, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_objective_passes_for_one_seed() {
        let r = check_full_objective(7, GradCheckShape::default()).unwrap();
        assert!(r.entries_checked > 1000);
        assert!(r.entries_straddling_kinks * 50 < r.entries_checked);
        assert!(r.max_rel_err < GRADCHECK_TOLERANCE, "{r:?}");
    }

    #[test]
    fn without_attention_passes_too() {
        let shape = GradCheckShape {
            temporal_attention: false,
            ..GradCheckShape::default()
        };
        let r = check_full_objective(3, shape).unwrap();
        assert!(r.max_rel_err < GRADCHECK_TOLERANCE, "{r:?}");
    }
}
