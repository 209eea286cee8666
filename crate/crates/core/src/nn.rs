//! Layers built from tape operations: linear maps, per-row feature
//! normalization and small MLPs.

use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{MedcError, Result};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// `(x − mean_row) / (std_row + 1e-5)` over the last axis of a matrix.
pub fn normalize_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let (rows, cols) = g.value(x).dims2()?;
    let mean = g.mean_pool_axis(x, 1)?;
    let mean = g.reshape(mean, &[rows, 1])?;
    let centered = g.sub(x, mean)?;
    let sq = g.square(centered);
    let var = g.mean_pool_axis(sq, 1)?;
    let var = g.reshape(var, &[rows, 1])?;
    // keeps d sqrt finite when a row is constant
    let var = g.add_scalar(var, 1e-24);
    let std = g.sqrt(var);
    let denom = g.add_scalar(std, NORM_EPS);
    debug_assert_eq!(g.shape(centered), &[rows, cols]);
    g.div(centered, denom)
}

/// `scale ⊙ normalize_rows(xW + b) + shift`.
pub fn affine_norm_layer(
    g: &mut Graph,
    x: Var,
    weight: Var,
    bias: Var,
    scale: Var,
    shift: Var,
) -> Result<Var> {
    let xw = g.matmul(x, weight)?;
    let lin = g.add(xw, bias)?;
    let normed = normalize_rows(g, lin)?;
    let scaled = g.mul(normed, scale)?;
    g.add(scaled, shift)
}

fn uniform_init(rng: &mut impl Rng, fan_in: usize, shape: &[usize]) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(-bound..bound);
    }
    t
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(rng, in_dim, &[in_dim, out_dim]),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[1, out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }
}

#[derive(Debug, Clone)]
pub struct NormAffine {
    pub scale: ParamId,
    pub shift: ParamId,
}

#[derive(Debug, Clone)]
struct MlpLayer {
    linear: Linear,
    norm: Option<NormAffine>,
    relu: bool,
}

/// Per-row MLP. Hidden layers are `linear → [norm] → relu`; the output
/// layer is a plain linear map, optionally followed by relu.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<MlpLayer>,
    in_dim: usize,
    out_dim: usize,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`. A single entry builds the identity map.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        norm_hidden: bool,
        output_relu: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(MedcError::Invalid(format!(
                "{name}: layer dimensions must be non-empty and positive, got {dims:?}"
            )));
        }
        let n = dims.len() - 1;
        let mut layers = Vec::with_capacity(n);
        for (i, w) in dims.windows(2).enumerate() {
            let last = i + 1 == n;
            let lname = format!("{name}.{i}");
            let linear = Linear::new(store, &lname, w[0], w[1], rng);
            let norm = (!last && norm_hidden).then(|| NormAffine {
                scale: store.add(format!("{lname}.norm.scale"), Tensor::full(&[1, w[1]], 1.0)),
                shift: store.add(format!("{lname}.norm.shift"), Tensor::zeros(&[1, w[1]])),
            });
            layers.push(MlpLayer {
                linear,
                norm,
                relu: !last || output_relu,
            });
        }
        Ok(Self {
            layers,
            in_dim: dims[0],
            out_dim: dims[n],
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn linear_layers(&self) -> impl Iterator<Item = &Linear> {
        self.layers.iter().map(|l| &l.linear)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (_, cols) = g.value(x).dims2()?;
        if cols != self.in_dim {
            return Err(MedcError::Shape(format!(
                "mlp expects {} input features, got {cols}",
                self.in_dim
            )));
        }
        let mut h = x;
        for layer in &self.layers {
            h = match &layer.norm {
                Some(n) => {
                    let w = g.param(store, layer.linear.weight);
                    let b = g.param(store, layer.linear.bias);
                    let s = g.param(store, n.scale);
                    let t = g.param(store, n.shift);
                    affine_norm_layer(g, h, w, b, s, t)?
                }
                None => layer.linear.forward(g, store, h)?,
            };
            if layer.relu {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}
