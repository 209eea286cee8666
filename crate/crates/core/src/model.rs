//! The multi-expert network.
//!
//! A shared per-frame trunk feeds one head per expert. Each head estimates
//! a per-video Gaussian: the mean by pooling a frame MLP over time, the
//! spread by temporal attention over frame deviations from that mean.
//! A reparameterized draw `z = μ + ε ⊙ σ` is classified with per-class
//! sigmoids. Inference averages the experts' probabilities.
//!
//! All batched tensors stack `B` videos of `L` frames as `B·L` rows.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{MedcError, Result};
use crate::nn::{Linear, Mlp};
use crate::rng::{stream, StreamRng};
use crate::sampling::ExpertKind;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of the shared trunk output.
    pub trunk_dim: usize,
    pub trunk_layers: usize,
    /// Hidden width of the mean and variance MLPs.
    pub hidden_dim: usize,
    /// Embedding dimension `d`.
    pub embed_dim: usize,
    pub mean_layers: usize,
    pub var_layers: usize,
    /// Feature normalization after each hidden linear layer.
    pub hidden_norm: bool,
    /// `false` swaps attention for direct pooling of the variance MLP.
    pub temporal_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            trunk_dim: 64,
            trunk_layers: 1,
            hidden_dim: 64,
            embed_dim: 16,
            mean_layers: 2,
            var_layers: 2,
            hidden_norm: true,
            temporal_attention: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trunk_dim == 0 || self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(MedcError::Invalid("model widths must be positive".into()));
        }
        if self.trunk_layers == 0 {
            return Err(MedcError::Invalid("trunk needs at least one layer".into()));
        }
        for (name, layers) in [("mean_layers", self.mean_layers), ("var_layers", self.var_layers)] {
            if layers == 0 && self.trunk_dim != self.embed_dim {
                return Err(MedcError::Invalid(format!(
                    "{name} = 0 requires trunk_dim == embed_dim"
                )));
            }
        }
        Ok(())
    }

    fn dims(&self, input: usize, layers: usize, output: usize) -> Vec<usize> {
        let mut d = vec![input];
        for i in 0..layers {
            d.push(if i + 1 == layers { output } else { self.hidden_dim });
        }
        d
    }
}

/// One expert's private parameters and calibration targets.
#[derive(Debug, Clone)]
pub struct ExpertHead {
    pub kind: ExpertKind,
    pub phi_mu: Mlp,
    pub phi_var: Mlp,
    pub f_q: Linear,
    pub f_k: Linear,
    pub f_v: Linear,
    pub classifier: Linear,
    /// Per-class variance targets.
    pub gamma: Vec<f64>,
}

/// A reparameterized embedding for a batch of videos, as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub mu: Tensor,
    pub sigma: Tensor,
    pub z: Tensor,
    pub epsilon: Tensor,
}

/// Source of ε in the reparameterization.
pub enum Noise<'a> {
    /// ε = 0, so z = μ.
    Eval,
    Sample(&'a mut StreamRng),
    Fixed(Tensor),
}

/// Graph handles for one expert's forward pass over a batch.
#[derive(Debug, Clone)]
pub struct ExpertForward {
    pub pooled: Var,
    pub mu: Var,
    pub sigma: Var,
    pub z: Var,
    pub p: Var,
    pub epsilon: Tensor,
    /// `B × L` attention weights when temporal attention is on.
    pub attention: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct MedcModel {
    pub config: ModelConfig,
    pub input_dim: usize,
    pub num_classes: usize,
    pub trunk: Mlp,
    pub experts: Vec<ExpertHead>,
    pub params: ParamStore,
}

impl MedcModel {
    /// Linear weights start uniform in `±1/√fan_in` with zero biases. The
    /// trunk and each expert draw from their own init streams, so an
    /// expert's initial weights do not depend on which others exist.
    pub fn new(
        config: ModelConfig,
        input_dim: usize,
        num_classes: usize,
        experts: &[(ExpertKind, Vec<f64>)],
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if experts.is_empty() {
            return Err(MedcError::Invalid("model needs at least one expert".into()));
        }
        if input_dim == 0 || num_classes == 0 {
            return Err(MedcError::Invalid("input dim and class count must be positive".into()));
        }
        let mut params = ParamStore::new();
        let mut rng = stream(seed, "init.trunk", &[]);
        let trunk_dims = config.dims(input_dim, config.trunk_layers, config.trunk_dim);
        let trunk = Mlp::new(&mut params, "trunk", &trunk_dims, config.hidden_norm, true, &mut rng)?;

        let d = config.embed_dim;
        let mut heads = Vec::with_capacity(experts.len());
        for (kind, gamma) in experts {
            if gamma.len() != num_classes {
                return Err(MedcError::Shape(format!(
                    "expert {kind}: {} gamma targets for C={num_classes}",
                    gamma.len()
                )));
            }
            if heads.iter().any(|h: &ExpertHead| h.kind == *kind) {
                return Err(MedcError::Invalid(format!("expert {kind} listed twice")));
            }
            let mut rng = stream(seed, "init.expert", &[kind.index() as u64]);
            let p = format!("expert.{kind}");
            let mean_dims = config.dims(config.trunk_dim, config.mean_layers, d);
            let var_dims = config.dims(config.trunk_dim, config.var_layers, d);
            heads.push(ExpertHead {
                kind: *kind,
                phi_mu: Mlp::new(&mut params, &format!("{p}.phi_mu"), &mean_dims, config.hidden_norm, false, &mut rng)?,
                phi_var: Mlp::new(&mut params, &format!("{p}.phi_var"), &var_dims, config.hidden_norm, false, &mut rng)?,
                f_q: Linear::new(&mut params, &format!("{p}.f_q"), d, d, &mut rng),
                f_k: Linear::new(&mut params, &format!("{p}.f_k"), d, d, &mut rng),
                f_v: Linear::new(&mut params, &format!("{p}.f_v"), d, d, &mut rng),
                classifier: Linear::new(&mut params, &format!("{p}.classifier"), d, num_classes, &mut rng),
                gamma: gamma.clone(),
            });
        }
        Ok(Self {
            config,
            input_dim,
            num_classes,
            trunk,
            experts: heads,
            params,
        })
    }

    pub fn expert_kinds(&self) -> Vec<ExpertKind> {
        self.experts.iter().map(|h| h.kind).collect()
    }

    pub fn head(&self, kind: ExpertKind) -> Option<&ExpertHead> {
        self.experts.iter().find(|h| h.kind == kind)
    }

    /// Stack `L × D` feature matrices into a `B·L × D` constant.
    pub fn stack_inputs(&self, g: &mut Graph, videos: &[&Tensor]) -> Result<(Var, usize, usize)> {
        let first = videos
            .first()
            .ok_or_else(|| MedcError::Invalid("empty batch".into()))?;
        let (l, dcols) = first.dims2()?;
        if l == 0 {
            return Err(MedcError::Shape("videos need at least one frame".into()));
        }
        if dcols != self.input_dim {
            return Err(MedcError::Shape(format!(
                "features have D={dcols} but the model expects D={}",
                self.input_dim
            )));
        }
        let mut data = Vec::with_capacity(videos.len() * l * dcols);
        for v in videos {
            if v.shape() != [l, dcols] {
                return Err(MedcError::Shape(format!(
                    "batch mixes feature shapes {:?} and {:?}",
                    first.shape(),
                    v.shape()
                )));
            }
            data.extend_from_slice(v.data());
        }
        let x = g.constant(Tensor::new(vec![videos.len() * l, dcols], data)?);
        Ok((x, videos.len(), l))
    }

    /// Per-frame shared MLP: `B·L × D → B·L × trunk_dim`.
    pub fn trunk_forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.trunk.forward(g, &self.params, x)
    }

    /// Time-pooled `phi_mu` output and its L2-normalized version.
    pub fn estimate_mean(&self, g: &mut Graph, h0: Var, batch: usize, frames: usize, head: &ExpertHead) -> Result<(Var, Var)> {
        let d = head.phi_mu.out_dim();
        let m = head.phi_mu.forward(g, &self.params, h0)?;
        let m = g.reshape(m, &[batch, frames, d])?;
        let pooled = g.mean_pool_axis(m, 1)?;
        Ok((pooled, l2_normalize_rows(g, pooled)?))
    }

    /// Spread estimate `σ ≥ 0` for each video (`B × d`), plus attention
    /// weights when temporal attention is enabled.
    pub fn estimate_variance(
        &self,
        g: &mut Graph,
        h0: Var,
        mu: Var,
        batch: usize,
        frames: usize,
        head: &ExpertHead,
    ) -> Result<(Var, Option<Var>)> {
        let d = head.phi_var.out_dim();
        let h = head.phi_var.forward(g, &self.params, h0)?;
        let h = g.reshape(h, &[batch, frames, d])?;
        if !self.config.temporal_attention {
            let pooled = g.mean_pool_axis(h, 1)?;
            return Ok((g.softplus(pooled), None));
        }
        let mu3 = g.reshape(mu, &[batch, 1, d])?;
        let delta = g.sub(h, mu3)?;
        let delta = g.reshape(delta, &[batch * frames, d])?;
        let q = head.f_q.forward(g, &self.params, delta)?;
        let k = head.f_k.forward(g, &self.params, delta)?;
        let v = head.f_v.forward(g, &self.params, delta)?;
        let qk = g.mul(q, k)?;
        let scores = g.sum_axis(qk, 1)?;
        let scores = g.reshape(scores, &[batch, frames])?;
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let alpha = g.softmax_along(scores, 1)?;
        let alpha3 = g.reshape(alpha, &[batch, frames, 1])?;
        let v3 = g.reshape(v, &[batch, frames, d])?;
        let weighted = g.mul(alpha3, v3)?;
        let raw = g.sum_axis(weighted, 1)?;
        Ok((g.softplus(raw), Some(alpha)))
    }

    pub fn classify(&self, g: &mut Graph, z: Var, head: &ExpertHead) -> Result<Var> {
        let logits = head.classifier.forward(g, &self.params, z)?;
        Ok(g.sigmoid(logits))
    }

    pub fn forward_expert(
        &self,
        g: &mut Graph,
        h0: Var,
        batch: usize,
        frames: usize,
        head: &ExpertHead,
        noise: Noise<'_>,
    ) -> Result<ExpertForward> {
        let (pooled, mu) = self.estimate_mean(g, h0, batch, frames, head)?;
        let (sigma, attention) = self.estimate_variance(g, h0, mu, batch, frames, head)?;
        let (z, epsilon) = reparameterize(g, mu, sigma, noise)?;
        let p = self.classify(g, z, head)?;
        Ok(ExpertForward {
            pooled,
            mu,
            sigma,
            z,
            p,
            epsilon,
            attention,
        })
    }

    /// Eval-mode probabilities averaged over `experts` (all when `None`),
    /// one `C`-vector per video.
    pub fn forward_inference(&self, videos: &[&Tensor], experts: Option<&[ExpertKind]>) -> Result<Vec<Vec<f64>>> {
        let heads: Vec<&ExpertHead> = match experts {
            None => self.experts.iter().collect(),
            Some(kinds) => kinds
                .iter()
                .map(|k| {
                    self.head(*k)
                        .ok_or_else(|| MedcError::Invalid(format!("model has no {k} expert")))
                })
                .collect::<Result<_>>()?,
        };
        if heads.is_empty() {
            return Err(MedcError::Invalid("inference needs at least one expert".into()));
        }
        let c = self.num_classes;
        let mut out = Vec::with_capacity(videos.len());
        for chunk in videos.chunks(256) {
            let mut g = Graph::new();
            let (x, b, l) = self.stack_inputs(&mut g, chunk)?;
            let h0 = self.trunk_forward(&mut g, x)?;
            let mut acc = vec![0.0; b * c];
            for head in &heads {
                let f = self.forward_expert(&mut g, h0, b, l, head, Noise::Eval)?;
                for (a, p) in acc.iter_mut().zip(g.value(f.p).data()) {
                    *a += p;
                }
            }
            let n = heads.len() as f64;
            out.extend(acc.chunks(c).map(|row| row.iter().map(|v| v / n).collect()));
        }
        Ok(out)
    }

    /// Eval-mode embedding of a single video under one expert.
    pub fn embed(&self, video: &Tensor, kind: ExpertKind) -> Result<Embedding> {
        let head = self
            .head(kind)
            .ok_or_else(|| MedcError::Invalid(format!("model has no {kind} expert")))?;
        let mut g = Graph::new();
        let (x, b, l) = self.stack_inputs(&mut g, &[video])?;
        let h0 = self.trunk_forward(&mut g, x)?;
        let f = self.forward_expert(&mut g, h0, b, l, head, Noise::Eval)?;
        Ok(Embedding {
            mu: g.value(f.mu).clone(),
            sigma: g.value(f.sigma).clone(),
            z: g.value(f.z).clone(),
            epsilon: f.epsilon,
        })
    }
}

/// Rows scaled to unit L2 norm.
pub fn l2_normalize_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let (rows, _) = g.value(x).dims2()?;
    let sq = g.square(x);
    let ss = g.sum_axis(sq, 1)?;
    let ss = g.reshape(ss, &[rows, 1])?;
    let ss = g.add_scalar(ss, 1e-24);
    let norm = g.sqrt(ss);
    g.div(x, norm)
}

/// `z = μ + ε ⊙ σ`; gradients reach μ with factor 1 and σ with factor ε.
pub fn reparameterize(g: &mut Graph, mu: Var, sigma: Var, noise: Noise<'_>) -> Result<(Var, Tensor)> {
    let shape = g.shape(mu).to_vec();
    if g.shape(sigma) != shape.as_slice() {
        return Err(MedcError::Shape(format!(
            "reparameterize: mu {:?} vs sigma {:?}",
            shape,
            g.shape(sigma)
        )));
    }
    let eps = match noise {
        Noise::Eval => return Ok((mu, Tensor::zeros(&shape))),
        Noise::Fixed(t) => {
            if t.shape() != shape.as_slice() {
                return Err(MedcError::Shape(format!(
                    "fixed epsilon {:?} vs mu {:?}",
                    t.shape(),
                    shape
                )));
            }
            t
        }
        Noise::Sample(rng) => {
            let mut t = Tensor::zeros(&shape);
            for v in t.data_mut() {
                *v = rng.sample(StandardNormal);
            }
            t
        }
    };
    let e = g.constant(eps.clone());
    let spread = g.mul(e, sigma)?;
    let z = g.add(mu, spread)?;
    Ok((z, eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            trunk_dim: 6,
            hidden_dim: 5,
            embed_dim: 4,
            ..ModelConfig::default()
        }
    }

    fn model(experts: &[ExpertKind]) -> MedcModel {
        let e: Vec<_> = experts.iter().map(|k| (*k, vec![0.5; 3])).collect();
        MedcModel::new(tiny_config(), 5, 3, &e, 17).unwrap()
    }

    fn video(seed: u64, l: usize) -> Tensor {
        let mut rng = stream(seed, "video", &[]);
        let data = (0..l * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(vec![l, 5], data).unwrap()
    }

    #[test]
    fn identity_trunk_is_relu() {
        let cfg = ModelConfig {
            trunk_dim: 3,
            embed_dim: 3,
            ..tiny_config()
        };
        let mut m = MedcModel::new(cfg, 3, 2, &[(ExpertKind::Uniform, vec![0.5; 2])], 1).unwrap();
        let w = m.trunk.linear_layers().next().unwrap().weight;
        m.params.get_mut(w).tensor = Tensor::eye(3);
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![-0.1, 0.0, 3.0]]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let h0 = m.trunk_forward(&mut g, xv).unwrap();
        assert_eq!(g.value(h0), &x.map(|v| v.max(0.0)));
    }

    #[test]
    fn mean_pooling_of_identity_phi() {
        let cfg = ModelConfig {
            trunk_dim: 2,
            embed_dim: 2,
            mean_layers: 0,
            ..tiny_config()
        };
        let m = MedcModel::new(cfg, 2, 2, &[(ExpertKind::Uniform, vec![0.5; 2])], 1).unwrap();
        let mut g = Graph::new();
        let h0 = g.constant(Tensor::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap());
        let (pooled, mu) = m.estimate_mean(&mut g, h0, 1, 2, &m.experts[0]).unwrap();
        assert_eq!(g.value(pooled).data(), &[2.0, 4.0]);
        let n: f64 = g.value(mu).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_abs_diff_eq!(n, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn identical_frames_pool_to_frame_output() {
        let m = model(&[ExpertKind::LongTailed]);
        let row = video(1, 1);
        let repeated = Tensor::new(vec![4, 5], row.data().repeat(4)).unwrap();
        let mut g = Graph::new();
        let (x1, _, _) = m.stack_inputs(&mut g, &[&row]).unwrap();
        let (x4, _, _) = m.stack_inputs(&mut g, &[&repeated]).unwrap();
        let h1 = m.trunk_forward(&mut g, x1).unwrap();
        let h4 = m.trunk_forward(&mut g, x4).unwrap();
        let (p1, _) = m.estimate_mean(&mut g, h1, 1, 1, &m.experts[0]).unwrap();
        let (p4, _) = m.estimate_mean(&mut g, h4, 1, 4, &m.experts[0]).unwrap();
        for (a, b) in g.value(p1).data().iter().zip(g.value(p4).data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_deviation_gives_softplus_zero() {
        // phi_var output equal to mu and zero value bias → sigma = ln 2
        let cfg = ModelConfig {
            trunk_dim: 2,
            embed_dim: 2,
            mean_layers: 0,
            var_layers: 0,
            ..tiny_config()
        };
        let m = MedcModel::new(cfg, 2, 2, &[(ExpertKind::Uniform, vec![0.5; 2])], 3).unwrap();
        let head = &m.experts[0];
        let mut g = Graph::new();
        // identical unit-norm frames make h_l − μ = 0
        let h0 = g.constant(Tensor::from_rows(&[vec![0.6, 0.8], vec![0.6, 0.8], vec![0.6, 0.8]]).unwrap());
        let (_, mu) = m.estimate_mean(&mut g, h0, 1, 3, head).unwrap();
        let (sigma, alpha) = m.estimate_variance(&mut g, h0, mu, 1, 3, head).unwrap();
        for s in g.value(sigma).data() {
            assert_abs_diff_eq!(*s, 2f64.ln(), epsilon = 1e-12);
        }
        for a in g.value(alpha.unwrap()).data() {
            assert_abs_diff_eq!(*a, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_frame_attention_is_one() {
        let m = model(&[ExpertKind::Inverse]);
        let v = video(4, 1);
        let mut g = Graph::new();
        let (x, b, l) = m.stack_inputs(&mut g, &[&v]).unwrap();
        let h0 = m.trunk_forward(&mut g, x).unwrap();
        let f = m.forward_expert(&mut g, h0, b, l, &m.experts[0], Noise::Eval).unwrap();
        assert_eq!(g.value(f.attention.unwrap()).data(), &[1.0]);
        assert!(g.value(f.sigma).data().iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn reparameterize_cases() {
        let mut g = Graph::new();
        let mu = g.constant(Tensor::from_rows(&[vec![0.5, -1.0]]).unwrap());
        let sigma = g.constant(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap());
        let mut rng = stream(2, "eps", &[]);
        let (z, eps) = reparameterize(&mut g, mu, sigma, Noise::Sample(&mut rng)).unwrap();
        assert!(eps.data().iter().any(|&e| e != 0.0));
        assert_eq!(g.value(z), g.value(mu));

        let sigma = g.constant(Tensor::from_rows(&[vec![2.0, 3.0]]).unwrap());
        let (z, eps) = reparameterize(&mut g, mu, sigma, Noise::Eval).unwrap();
        assert_eq!(z, mu);
        assert!(eps.data().iter().all(|&e| e == 0.0));

        let fixed = Tensor::from_rows(&[vec![1.0, -0.5]]).unwrap();
        let (z, _) = reparameterize(&mut g, mu, sigma, Noise::Fixed(fixed)).unwrap();
        assert_eq!(g.value(z).data(), &[2.5, -2.5]);
    }

    #[test]
    fn reparameterize_gradients() {
        let mut store = ParamStore::new();
        let mu_id = store.add("mu", Tensor::from_rows(&[vec![0.2, 0.4]]).unwrap());
        let sd_id = store.add("sd", Tensor::from_rows(&[vec![1.5, 0.5]]).unwrap());
        let eps = Tensor::from_rows(&[vec![0.7, -1.3]]).unwrap();
        let mut g = Graph::new();
        let mu = g.param(&store, mu_id);
        let sd = g.param(&store, sd_id);
        let (z, _) = reparameterize(&mut g, mu, sd, Noise::Fixed(eps.clone())).unwrap();
        let s = g.sum(z);
        g.backward(s).unwrap();
        g.accumulate_param_grads(&mut store);
        assert_eq!(store.get(mu_id).grad.data(), &[1.0, 1.0]);
        assert_eq!(store.get(sd_id).grad.data(), eps.data());
    }

    #[test]
    fn zero_classifier_gives_half() {
        let mut m = model(&[ExpertKind::Uniform]);
        let cls = m.experts[0].classifier.weight;
        m.params.get_mut(cls).tensor.data_mut().fill(0.0);
        let p = m.forward_inference(&[&video(1, 3)], None).unwrap();
        assert_eq!(p[0], vec![0.5; 3]);
    }

    #[test]
    fn classifier_bias_offsets() {
        let mut m = model(&[ExpertKind::Uniform]);
        let head = m.experts[0].classifier.clone();
        m.params.get_mut(head.weight).tensor.data_mut().fill(0.0);
        m.params.get_mut(head.bias).tensor = Tensor::from_rows(&[vec![0.0, 3f64.ln(), -3f64.ln()]]).unwrap();
        let p = m.forward_inference(&[&video(2, 2)], None).unwrap();
        assert_abs_diff_eq!(p[0][0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p[0][1], 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(p[0][2], 0.25, epsilon = 1e-15);
    }

    #[test]
    fn eval_forward_is_deterministic_and_train_mode_reproducible() {
        let m = model(&ExpertKind::ALL);
        let v = video(9, 4);
        assert_eq!(
            m.forward_inference(&[&v], None).unwrap(),
            m.forward_inference(&[&v], None).unwrap()
        );
        let run = || {
            let mut g = Graph::new();
            let (x, b, l) = m.stack_inputs(&mut g, &[&v]).unwrap();
            let h0 = m.trunk_forward(&mut g, x).unwrap();
            let mut rng = stream(5, "eps", &[]);
            let f = m.forward_expert(&mut g, h0, b, l, &m.experts[1], Noise::Sample(&mut rng)).unwrap();
            (g.value(f.p).clone(), f.epsilon)
        };
        let (p1, e1) = run();
        let (p2, e2) = run();
        assert_eq!(p1, p2);
        assert_eq!(e1, e2);
        assert_eq!(p1.shape(), &[1, 3]);
    }

    #[test]
    fn inference_averages_and_commutes() {
        let m = model(&ExpertKind::ALL);
        let v = video(3, 4);
        let all = m.forward_inference(&[&v], None).unwrap();
        let singles: Vec<Vec<f64>> = ExpertKind::ALL
            .iter()
            .map(|k| m.forward_inference(&[&v], Some(&[*k])).unwrap().remove(0))
            .collect();
        for c in 0..3 {
            let mean = singles.iter().map(|s| s[c]).sum::<f64>() / 3.0;
            assert_abs_diff_eq!(all[0][c], mean, epsilon = 1e-15);
        }
        let reordered = m
            .forward_inference(&[&v], Some(&[ExpertKind::Inverse, ExpertKind::LongTailed, ExpertKind::Uniform]))
            .unwrap();
        for (a, b) in all[0].iter().zip(&reordered[0]) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
        assert!(m.forward_inference(&[&v], Some(&[])).is_err());
    }

    #[test]
    fn batched_matches_single() {
        let m = model(&ExpertKind::ALL);
        let (a, b) = (video(1, 4), video(2, 4));
        let both = m.forward_inference(&[&a, &b], None).unwrap();
        let one = m.forward_inference(&[&b], None).unwrap();
        for (x, y) in both[1].iter().zip(&one[0]) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-14);
        }
    }

    #[test]
    fn shape_errors() {
        let m = model(&[ExpertKind::Uniform]);
        let wrong = Tensor::zeros(&[3, 4]);
        assert!(matches!(m.forward_inference(&[&wrong], None), Err(MedcError::Shape(_))));
        assert!(MedcModel::new(tiny_config(), 5, 3, &[], 1).is_err());
        assert!(MedcModel::new(tiny_config(), 5, 3, &[(ExpertKind::Uniform, vec![0.5; 2])], 1).is_err());
    }

    #[test]
    fn expert_init_independent_of_other_experts() {
        let a = model(&[ExpertKind::Inverse]);
        let b = model(&ExpertKind::ALL);
        let name = "expert.inverse.f_v.weight";
        let ta = &a.params.get(a.params.find(name).unwrap()).tensor;
        let tb = &b.params.get(b.params.find(name).unwrap()).tensor;
        assert_eq!(ta, tb);
    }
}
