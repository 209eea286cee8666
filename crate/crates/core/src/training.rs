//! Adam optimization of all experts under their own re-sampled batches.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore};
use crate::checkpoint::{self, Checkpoint};
use crate::data::{Dataset, LabelStats};
use crate::error::{MedcError, Result};
use crate::losses::{
    classification_loss, gamma_targets, label_matrix, mean_contrastive_loss, total_loss, variance_region_loss,
    GammaTargets, LossConfig, LossTerms,
};
use crate::model::{MedcModel, ModelConfig, Noise};
use crate::rng::stream;
use crate::sampling::{sample_batch, sampler_for, ExpertKind, SamplerSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub active_experts: Vec<ExpertKind>,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub losses: LossConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 30,
            batch_size: 32,
            active_experts: ExpertKind::ALL.to_vec(),
            checkpoint_every: 10,
            losses: LossConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Settings used for the full-size video benchmark.
    pub fn full_scale() -> Self {
        Self {
            epochs: 120,
            batch_size: 128,
            model: ModelConfig {
                trunk_dim: 1024,
                hidden_dim: 1024,
                ..ModelConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(MedcError::Invalid(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(MedcError::Invalid("batch_size must be >= 1".into()));
        }
        if self.active_experts.is_empty() {
            return Err(MedcError::Invalid("active_experts must not be empty".into()));
        }
        let mut seen = self.active_experts.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.active_experts.len() {
            return Err(MedcError::Invalid("active_experts lists an expert twice".into()));
        }
        self.losses.validate()?;
        self.model.validate()
    }
}

/// Adam moments for every parameter of a store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update from the gradients held in `store`.
/// Parameters with `trainable[i] == false` keep their values and moments.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64, trainable: Option<&[bool]>) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(MedcError::Shape(format!(
            "adam state tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    for p in store.iter() {
        if !p.grad.is_finite() {
            return Err(MedcError::NonFinite(format!("gradient of parameter {}", p.name)));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        if trainable.is_some_and(|mask| !mask[i]) {
            continue;
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let grad = p.grad.data();
        for (k, theta) in p.tensor.data_mut().iter_mut().enumerate() {
            let g = grad[k];
            m[k] = b1 * m[k] + (1.0 - b1) * g;
            v[k] = b2 * v[k] + (1.0 - b2) * g * g;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *theta -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Mean of each loss term over one epoch's steps, for one expert.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertLosses {
    pub expert: ExpertKind,
    pub mean: f64,
    pub cls: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub expert: ExpertKind,
    pub term: String,
    pub value: f64,
}

pub fn history_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("epoch,expert,term,value\n");
    for r in history {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.expert, r.term, r.value));
    }
    s
}

/// Model, optimizer state and samplers for one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: MedcModel,
    pub adam: AdamState,
    pub cfg: TrainConfig,
    pub stats: LabelStats,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<LossRecord>,
    trainable: Option<Vec<bool>>,
    samplers: Vec<SamplerSpec>,
    labels: Vec<Vec<usize>>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, data: &Dataset, stats: LabelStats, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let experts: Vec<(ExpertKind, Vec<f64>)> = cfg
            .active_experts
            .iter()
            .map(|&k| Ok((k, expert_gamma(&cfg.losses, &stats, k)?.0)))
            .collect::<Result<_>>()?;
        let model = MedcModel::new(cfg.model.clone(), data.dim, data.num_classes, &experts, seed)?;
        Self::with_model(cfg, data, stats, seed, model)
    }

    /// Trainer around an existing model; its experts and γ targets are kept.
    pub fn with_model(cfg: TrainConfig, data: &Dataset, stats: LabelStats, seed: u64, model: MedcModel) -> Result<Self> {
        cfg.validate()?;
        if model.expert_kinds() != cfg.active_experts {
            return Err(MedcError::Invalid(format!(
                "model experts {:?} differ from active_experts {:?}",
                model.expert_kinds(),
                cfg.active_experts
            )));
        }
        if stats.num_classes() != data.num_classes {
            return Err(MedcError::Shape(format!(
                "label stats cover {} classes but data has C={}",
                stats.num_classes(),
                data.num_classes
            )));
        }
        if data.is_empty() {
            return Err(MedcError::Invalid("training data is empty".into()));
        }
        let labels = data.label_lists();
        let samplers = cfg
            .active_experts
            .iter()
            .map(|k| sampler_for(k.sampler_kind(), &stats, &labels))
            .collect::<Result<_>>()?;
        let adam = AdamState::new(&model.params);
        Ok(Self {
            model,
            adam,
            cfg,
            stats,
            seed,
            epoch: 0,
            history: Vec::new(),
            trainable: None,
            samplers,
            labels,
        })
    }

    /// Restrict updates to parameters whose name satisfies `keep`.
    pub fn freeze_except(&mut self, keep: impl Fn(&str) -> bool) {
        self.trainable = Some(self.model.params.iter().map(|p| keep(&p.name)).collect());
    }

    pub fn sampler(&self, kind: ExpertKind) -> Option<&SamplerSpec> {
        let i = self.cfg.active_experts.iter().position(|k| *k == kind)?;
        self.samplers.get(i)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.labels.len().div_ceil(self.cfg.batch_size)
    }

    /// One optimizer step. `batches[e]` are record indices for the e-th
    /// active expert. Returns each expert's loss terms before the update.
    pub fn step(&mut self, data: &Dataset, batches: &[Vec<usize>], noise_rngs: &mut [crate::rng::StreamRng]) -> Result<Vec<ExpertLosses>> {
        let model = &self.model;
        let losses_cfg = &self.cfg.losses;
        let weights = losses_cfg.weights()?;
        let mut g = Graph::new();
        let mut terms = Vec::with_capacity(batches.len());
        for ((head, batch), rng) in model.experts.iter().zip(batches).zip(noise_rngs.iter_mut()) {
            let videos: Vec<&Tensor> = batch.iter().map(|&i| &data.records[i].features).collect();
            let labels: Vec<Vec<usize>> = batch.iter().map(|&i| self.labels[i].clone()).collect();
            let (x, b, l) = model.stack_inputs(&mut g, &videos)?;
            let h0 = model.trunk_forward(&mut g, x)?;
            let f = model.forward_expert(&mut g, h0, b, l, head, Noise::Sample(rng))?;
            let mean = if b >= 2 {
                mean_contrastive_loss(&mut g, f.mu, &labels, losses_cfg.temperature)?
            } else {
                g.constant(Tensor::scalar(0.0))
            };
            let y = label_matrix(&labels, model.num_classes)?;
            let cls = classification_loss(&mut g, f.p, &y, losses_cfg.positive_only_cls)?;
            let sigma = variance_region_loss(&mut g, f.sigma, &labels, &GammaTargets(head.gamma.clone()))?;
            terms.push((head.kind, LossTerms { mean, cls, sigma }));
        }
        let lt: Vec<LossTerms> = terms.iter().map(|(_, t)| *t).collect();
        let total = total_loss(&mut g, &lt, weights)?;
        let report = terms
            .iter()
            .map(|(kind, t)| ExpertLosses {
                expert: *kind,
                mean: g.value(t.mean).item(),
                cls: g.value(t.cls).item(),
                sigma: g.value(t.sigma).item(),
            })
            .collect();
        if !g.value(total).is_finite() {
            return Err(MedcError::NonFinite(format!("total loss at epoch {}", self.epoch + 1)));
        }
        g.backward(total)?;
        self.model.params.zero_grad();
        g.accumulate_param_grads(&mut self.model.params);
        adam_step(&mut self.model.params, &mut self.adam, self.cfg.learning_rate, self.trainable.as_deref())?;
        Ok(report)
    }

    /// ⌈N / batch_size⌉ steps. Every expert draws its own batch from its
    /// own sampler stream; streams are keyed by (seed, expert, epoch) so a
    /// resumed run sees the same draws as an uninterrupted one.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<Vec<ExpertLosses>> {
        let epoch = self.epoch as u64;
        let kinds = self.cfg.active_experts.clone();
        let mut sampler_rngs: Vec<_> = kinds
            .iter()
            .map(|k| stream(self.seed, "sampler", &[k.index() as u64, epoch]))
            .collect();
        let mut noise_rngs: Vec<_> = kinds
            .iter()
            .map(|k| stream(self.seed, "epsilon", &[k.index() as u64, epoch]))
            .collect();
        let steps = self.steps_per_epoch();
        let mut sums = vec![[0.0f64; 3]; kinds.len()];
        for _ in 0..steps {
            let batches: Vec<Vec<usize>> = self
                .samplers
                .iter()
                .zip(sampler_rngs.iter_mut())
                .map(|(s, rng)| sample_batch(s, self.cfg.batch_size, rng))
                .collect::<Result<_>>()?;
            let losses = self.step(data, &batches, &mut noise_rngs)?;
            for (acc, l) in sums.iter_mut().zip(&losses) {
                acc[0] += l.mean;
                acc[1] += l.cls;
                acc[2] += l.sigma;
            }
        }
        self.epoch += 1;
        let n = steps as f64;
        let out: Vec<ExpertLosses> = kinds
            .iter()
            .zip(&sums)
            .map(|(&expert, s)| ExpertLosses {
                expert,
                mean: s[0] / n,
                cls: s[1] / n,
                sigma: s[2] / n,
            })
            .collect();
        for l in &out {
            for (term, value) in [("mean", l.mean), ("cls", l.cls), ("sigma", l.sigma)] {
                self.history.push(LossRecord {
                    epoch: self.epoch,
                    expert: l.expert,
                    term: term.into(),
                    value,
                });
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        checkpoint::from_trainer(self)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    /// Continue a run from a saved checkpoint.
    pub fn resume(ckpt: Checkpoint, data: &Dataset) -> Result<Self> {
        let (model, adam) = ckpt.restore()?;
        let meta = ckpt.meta;
        if meta.num_classes != data.num_classes || meta.input_dim != data.dim {
            return Err(MedcError::Checkpoint(format!(
                "checkpoint expects C={} D={}, data has C={} D={}",
                meta.num_classes, meta.input_dim, data.num_classes, data.dim
            )));
        }
        let mut t = Self::with_model(meta.train, data, meta.label_stats, meta.seed, model)?;
        t.adam = adam;
        t.epoch = meta.epoch;
        t.history = meta.history;
        Ok(t)
    }
}

pub fn expert_gamma(cfg: &LossConfig, stats: &LabelStats, kind: ExpertKind) -> Result<GammaTargets> {
    gamma_targets(stats, kind, cfg.gamma_min, cfg.gamma_max, cfg.gamma_uniform)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub checkpoints: Vec<PathBuf>,
}

/// Run epochs until `trainer.cfg.epochs` are complete, writing checkpoints
/// into `out_dir` every `checkpoint_every` epochs and at the end.
pub fn run_training(mut trainer: Trainer, data: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut checkpoints = Vec::new();
    let every = trainer.cfg.checkpoint_every;
    while trainer.epoch < trainer.cfg.epochs {
        trainer.train_epoch(data)?;
        if let Some(dir) = out_dir {
            if every > 0 && trainer.epoch.is_multiple_of(every) && trainer.epoch < trainer.cfg.epochs {
                let p = dir.join(format!("checkpoint-epoch{:04}.json", trainer.epoch));
                trainer.save(&p)?;
                checkpoints.push(p);
            }
        }
    }
    if let Some(dir) = out_dir {
        let p = dir.join("checkpoint.json");
        trainer.save(&p)?;
        checkpoints.push(p);
    }
    Ok(TrainOutcome { trainer, checkpoints })
}

pub fn train(cfg: TrainConfig, data: &Dataset, stats: LabelStats, seed: u64, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    run_training(Trainer::new(cfg, data, stats, seed)?, data, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, CountSpec, SyntheticConfig};
    use approx::assert_abs_diff_eq;

    fn tiny_data(seed: u64) -> Dataset {
        generate_synthetic(&SyntheticConfig {
            num_classes: 2,
            feature_dim: 4,
            frames: 2,
            counts: CountSpec::Explicit(vec![12, 8]),
            test_per_class: 0,
            class_sep: 4.0,
            noise: 0.3,
            temporal_jitter: 0.2,
            seed,
            ..SyntheticConfig::default()
        })
        .unwrap()
        .train
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 5e-3,
            epochs: 3,
            batch_size: 8,
            model: ModelConfig {
                trunk_dim: 8,
                hidden_dim: 8,
                embed_dim: 4,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn stats(d: &Dataset) -> LabelStats {
        crate::data::compute_label_stats(&d.records, d.num_classes, 10, 5).unwrap()
    }

    #[test]
    fn adam_first_step() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(0.0));
        let mut st = AdamState::new(&store);
        store.get_mut(id).grad = Tensor::scalar(1.0);
        adam_step(&mut store, &mut st, 1e-4, None).unwrap();
        assert_abs_diff_eq!(store.get(id).tensor.item(), -1e-4 / (1.0 + 1e-8), epsilon = 1e-18);
        assert_eq!(st.t, 1);

        for g in [-3.0, 0.01, 250.0] {
            let mut store = ParamStore::new();
            let id = store.add("w", Tensor::scalar(1.0));
            let mut st = AdamState::new(&store);
            store.get_mut(id).grad = Tensor::scalar(g);
            adam_step(&mut store, &mut st, 1e-3, None).unwrap();
            let delta = store.get(id).tensor.item() - 1.0;
            assert_eq!(delta.signum(), -g.signum());
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![0.3, -0.7]));
        let mut st = AdamState::new(&store);
        adam_step(&mut store, &mut st, 1e-2, None).unwrap();
        assert_eq!(store.get(id).tensor.data(), &[0.3, -0.7]);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("layer.weight", Tensor::scalar(0.0));
        store.get_mut(id).grad = Tensor::scalar(f64::NAN);
        let mut st = AdamState::new(&store);
        let err = adam_step(&mut store, &mut st, 1e-3, None).unwrap_err();
        assert!(err.to_string().contains("layer.weight"));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = tiny_data(1);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..tiny_cfg()
        };
        let mut t = Trainer::new(cfg, &data, stats(&data), 4).unwrap();
        let before = t.model.params.clone();
        t.train_epoch(&data).unwrap();
        for (a, b) in before.iter().zip(t.model.params.iter()) {
            assert_eq!(a.tensor, b.tensor, "{}", a.name);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_data(2);
        let run = || train(tiny_cfg(), &data, stats(&data), 9, None).unwrap().trainer.history;
        assert_eq!(run(), run());
    }

    #[test]
    fn history_shape() {
        let data = tiny_data(3);
        let cfg = TrainConfig {
            active_experts: vec![ExpertKind::LongTailed, ExpertKind::Inverse],
            ..tiny_cfg()
        };
        let out = train(cfg, &data, stats(&data), 1, None).unwrap();
        assert_eq!(out.trainer.history.len(), 3 * 2 * 3);
        let csv = history_csv(&out.trainer.history);
        assert!(csv.starts_with("epoch,expert,term,value\n1,long_tailed,mean,"));
    }

    #[test]
    fn zero_epochs_returns_initial_model() {
        let data = tiny_data(4);
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_cfg()
        };
        let init = Trainer::new(cfg.clone(), &data, stats(&data), 5).unwrap();
        let out = train(cfg, &data, stats(&data), 5, None).unwrap();
        for (a, b) in init.model.params.iter().zip(out.trainer.model.params.iter()) {
            assert_eq!(a.tensor, b.tensor);
        }
        assert!(out.trainer.history.is_empty());
    }

    #[test]
    fn classification_loss_falls_on_separable_data() {
        let data = generate_synthetic(&SyntheticConfig {
            num_classes: 2,
            feature_dim: 4,
            frames: 2,
            counts: CountSpec::Explicit(vec![10, 10]),
            test_per_class: 0,
            class_sep: 4.0,
            noise: 0.2,
            temporal_jitter: 0.1,
            seed: 8,
            ..SyntheticConfig::default()
        })
        .unwrap()
        .train;
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            epochs: 16,
            batch_size: 20,
            active_experts: vec![ExpertKind::LongTailed],
            losses: LossConfig {
                lambda1: 0.0,
                lambda2: 1.0,
                lambda3: 0.0,
                ..LossConfig::default()
            },
            ..tiny_cfg()
        };
        let mut t = Trainer::new(cfg, &data, stats(&data), 3).unwrap();
        let first = t.train_epoch(&data).unwrap()[0].cls;
        let mut last = first;
        for _ in 0..15 {
            last = t.train_epoch(&data).unwrap()[0].cls;
        }
        assert!(last < 0.75 * first, "{last} vs {first}");
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            active_experts: vec![],
            ..tiny_cfg()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            active_experts: vec![ExpertKind::Uniform, ExpertKind::Uniform],
            ..tiny_cfg()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            learning_rate: -1.0,
            ..tiny_cfg()
        };
        assert!(bad.validate().is_err());
        assert_eq!(TrainConfig::full_scale().batch_size, 128);
        assert_eq!(TrainConfig::full_scale().epochs, 120);
    }
}
