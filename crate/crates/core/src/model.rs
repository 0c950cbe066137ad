//! Neural-process encoder/decoder.
//!
//! Encoder: per-point embedding `h`, permutation-invariant pooling, then
//! either a plain head `rho` producing `q(z | C)`, or a semi-implicit head
//! where `rho` maps `(s_C, ε)` to a mixing variable `ψ` and `eta` maps
//! `(s_C, ψ)` to the conditional `q(z | ψ, C)`. Decoder `g` maps a target
//! coordinate and `z` to a per-point Gaussian.

use std::collections::{BTreeMap, HashSet};

use thiserror::Error;

use crate::distributions::{DiagGaussian, DistributionError, GaussianVar};
use crate::rng::Rng;
use crate::tensor::{Element, Graph, Gradients, PoolMode, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error("context set is empty")]
    EmptyContext,
    #[error("operation needs the {expected:?} head, model has {found:?}")]
    HeadMismatch { expected: Head, found: Head },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid point set: {0}")]
    InvalidPoints(String),
    #[error("parameter tensor {0} missing")]
    MissingTensor(String),
    #[error("unexpected parameter tensor {0}")]
    UnexpectedTensor(String),
    #[error("parameter {name} has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("context and target sets overlap at {0} point(s)")]
    Overlap(usize),
    #[error("sample count must be at least 1")]
    NoSamples,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    Plain,
    Sivi,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ObsVariance {
    /// `σ_y = σ₀` everywhere.
    Fixed,
    /// `σ_y = 0.9 + 0.1·softplus(σ'_y)`.
    Learned,
}

/// Squashing applied to the raw latent scale output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LatentStdHead {
    /// `0.9 + 0.1·sigmoid(σ'_z)`, range (0.9, 1.0).
    Narrow,
    /// `0.1 + 0.9·sigmoid(σ'_z)`, range (0.1, 1.0).
    Wide,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_x: usize,
    pub d_y: usize,
    pub d_h: usize,
    pub d_s: usize,
    pub d_z: usize,
    pub d_psi: usize,
    pub d_eps: usize,
    pub pooling: PoolMode,
    pub head: Head,
    pub obs_variance: ObsVariance,
    pub obs_std: f64,
    pub latent_std: LatentStdHead,
}

impl Default for ModelConfig {
    /// Desk scale: 64-wide layers, 16-dim mixing variable.
    fn default() -> Self {
        ModelConfig {
            d_x: 2,
            d_y: 1,
            d_h: 64,
            d_s: 64,
            d_z: 64,
            d_psi: 16,
            d_eps: 16,
            pooling: PoolMode::Max,
            head: Head::Plain,
            obs_variance: ObsVariance::Learned,
            obs_std: 0.2,
            latent_std: LatentStdHead::Narrow,
        }
    }
}

impl ModelConfig {
    /// Full-size widths: 512 hidden/embedding/latent, 32 mixing.
    pub fn full_scale() -> Self {
        ModelConfig {
            d_h: 512,
            d_s: 512,
            d_z: 512,
            d_psi: 32,
            d_eps: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("d_x", self.d_x),
            ("d_y", self.d_y),
            ("d_h", self.d_h),
            ("d_s", self.d_s),
            ("d_z", self.d_z),
            ("d_psi", self.d_psi),
            ("d_eps", self.d_eps),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, d)| *d == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if !(self.obs_std > 0.0 && self.obs_std.is_finite()) {
            return Err(ModelError::InvalidConfig(format!(
                "obs_std must be positive, got {}",
                self.obs_std
            )));
        }
        Ok(())
    }

    fn decoder_out(&self) -> usize {
        match self.obs_variance {
            ObsVariance::Fixed => self.d_y,
            ObsVariance::Learned => 2 * self.d_y,
        }
    }

    /// `(group, [(fan_in, fan_out)])` for every network, in a fixed order.
    fn layer_dims(&self) -> Vec<(&'static str, Vec<(usize, usize)>)> {
        let mut out = vec![(
            "embed",
            vec![(self.d_x + self.d_y, self.d_h), (self.d_h, self.d_h), (self.d_h, self.d_s)],
        )];
        match self.head {
            Head::Plain => out.push(("rho", vec![(self.d_s, self.d_h), (self.d_h, 2 * self.d_z)])),
            Head::Sivi => {
                out.push(("rho", vec![(self.d_s + self.d_eps, self.d_h), (self.d_h, self.d_psi)]));
                out.push(("eta", vec![(self.d_s + self.d_psi, self.d_h), (self.d_h, 2 * self.d_z)]));
            }
        }
        out.push((
            "decoder",
            vec![
                (self.d_x + self.d_z, self.d_h),
                (self.d_h, self.d_h),
                (self.d_h, self.d_h),
                (self.d_h, self.d_h),
                (self.d_h, self.decoder_out()),
            ],
        ));
        out
    }
}

/// Fully connected layer, `weight: [fan_in, fan_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> Linear<T> {
    /// Weights and biases uniform on `±1/sqrt(fan_in)`.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<T> {
            (0..n)
                .map(|_| T::from_f64((2.0 * rng.uniform() - 1.0) * bound))
                .collect()
        };
        let weight = Tensor::matrix(fan_in, fan_out, draw(fan_in * fan_out)).expect("shape");
        let bias = Tensor::vector(draw(fan_out));
        Linear { weight, bias }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> BoundLinear {
        BoundLinear {
            weight: g.param(self.weight.clone()),
            bias: g.param(self.bias.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn gradients<T: Element>(&self, grads: &Gradients<T>, like: &Linear<T>) -> Linear<T> {
        Linear {
            weight: grads.get_or_zeros(self.weight, like.weight.shape()),
            bias: grads.get_or_zeros(self.bias, like.bias.shape()),
        }
    }
}

/// Applies layers with relu between them and nothing after the last.
pub fn mlp<T: Element>(g: &mut Graph<T>, layers: &[BoundLinear], x: Var) -> Result<Var, TensorError> {
    let mut h = x;
    for (i, l) in layers.iter().enumerate() {
        h = g.affine(h, l.weight, l.bias)?;
        if i + 1 < layers.len() {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

/// All trainable tensors of a model. `eta` is empty for the plain head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub embed: Vec<Linear<T>>,
    pub rho: Vec<Linear<T>>,
    pub eta: Vec<Linear<T>>,
    pub decoder: Vec<Linear<T>>,
}

impl<T: Element> ModelParams<T> {
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let mut p = ModelParams {
            embed: vec![],
            rho: vec![],
            eta: vec![],
            decoder: vec![],
        };
        for (group, dims) in config.layer_dims() {
            let layers: Vec<Linear<T>> = dims.iter().map(|&(i, o)| Linear::init(i, o, rng)).collect();
            *p.group_mut(group) = layers;
        }
        Ok(p)
    }

    fn group_mut(&mut self, name: &str) -> &mut Vec<Linear<T>> {
        match name {
            "embed" => &mut self.embed,
            "rho" => &mut self.rho,
            "eta" => &mut self.eta,
            "decoder" => &mut self.decoder,
            _ => unreachable!("unknown group {name}"),
        }
    }

    fn groups(&self) -> [(&'static str, &Vec<Linear<T>>); 4] {
        [
            ("embed", &self.embed),
            ("rho", &self.rho),
            ("eta", &self.eta),
            ("decoder", &self.decoder),
        ]
    }

    /// `("embed.0.weight", tensor)`, ... in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (group, layers) in self.groups() {
            for (i, l) in layers.iter().enumerate() {
                out.push((format!("{group}.{i}.weight"), &l.weight));
                out.push((format!("{group}.{i}.bias"), &l.bias));
            }
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layers in [&mut self.embed, &mut self.rho, &mut self.eta, &mut self.decoder] {
            for l in layers.iter_mut() {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Rebuilds parameters from named tensors, requiring every tensor the
    /// config implies exactly once with the right shape.
    pub fn from_named(config: &ModelConfig, mut tensors: BTreeMap<String, Tensor<T>>) -> Result<Self, ModelError> {
        config.validate()?;
        let mut p = ModelParams {
            embed: vec![],
            rho: vec![],
            eta: vec![],
            decoder: vec![],
        };
        for (group, dims) in config.layer_dims() {
            let mut layers = Vec::new();
            for (i, &(fan_in, fan_out)) in dims.iter().enumerate() {
                let mut take = |suffix: &str, shape: Vec<usize>| -> Result<Tensor<T>, ModelError> {
                    let name = format!("{group}.{i}.{suffix}");
                    let t = tensors.remove(&name).ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
                    if t.shape() != shape.as_slice() {
                        return Err(ModelError::ParamShape {
                            name,
                            expected: shape,
                            found: t.shape().to_vec(),
                        });
                    }
                    Ok(t)
                };
                let weight = take("weight", vec![fan_in, fan_out])?;
                let bias = take("bias", vec![fan_out])?;
                layers.push(Linear { weight, bias });
            }
            *p.group_mut(group) = layers;
        }
        if let Some(name) = tensors.into_keys().next() {
            return Err(ModelError::UnexpectedTensor(name));
        }
        Ok(p)
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        let conv = |ls: &Vec<Linear<T>>| -> Vec<Linear<U>> {
            ls.iter()
                .map(|l| Linear {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect()
        };
        ModelParams {
            embed: conv(&self.embed),
            rho: conv(&self.rho),
            eta: conv(&self.eta),
            decoder: conv(&self.decoder),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams {
        let bind = |ls: &Vec<Linear<T>>, g: &mut Graph<T>| ls.iter().map(|l| l.bind(g)).collect();
        BoundParams {
            embed: bind(&self.embed, g),
            rho: bind(&self.rho, g),
            eta: bind(&self.eta, g),
            decoder: bind(&self.decoder, g),
        }
    }
}

/// Graph handles of a [`ModelParams`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub embed: Vec<BoundLinear>,
    pub rho: Vec<BoundLinear>,
    pub eta: Vec<BoundLinear>,
    pub decoder: Vec<BoundLinear>,
}

impl BoundParams {
    /// Collects gradients into a tensor set shaped like `like`.
    pub fn gradients<T: Element>(&self, grads: &Gradients<T>, like: &ModelParams<T>) -> ModelParams<T> {
        let collect = |bound: &[BoundLinear], ls: &[Linear<T>]| -> Vec<Linear<T>> {
            bound.iter().zip(ls).map(|(b, l)| b.gradients(grads, l)).collect()
        };
        ModelParams {
            embed: collect(&self.embed, &like.embed),
            rho: collect(&self.rho, &like.rho),
            eta: collect(&self.eta, &like.eta),
            decoder: collect(&self.decoder, &like.decoder),
        }
    }

    /// Inverse of [`BoundParams::vars`] for parameters shaped like `like`.
    pub fn from_vars<T: Element>(like: &ModelParams<T>, vars: &[Var]) -> Self {
        let mut it = vars.iter().copied();
        let mut take = |n: usize| -> Vec<BoundLinear> {
            (0..n)
                .map(|_| BoundLinear {
                    weight: it.next().expect("too few vars"),
                    bias: it.next().expect("too few vars"),
                })
                .collect()
        };
        BoundParams {
            embed: take(like.embed.len()),
            rho: take(like.rho.len()),
            eta: take(like.eta.len()),
            decoder: take(like.decoder.len()),
        }
    }

    /// Parameter vars in the same order as [`ModelParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for layers in [&self.embed, &self.rho, &self.eta, &self.decoder] {
            for l in layers {
                out.push(l.weight);
                out.push(l.bias);
            }
        }
        out
    }
}

/// Image geometry; pixel `(r, c)` sits at `(r/(H-1), c/(W-1))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
}

impl GridSpec {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn coord(&self, index: usize) -> [f64; 2] {
        let (r, c) = (index / self.width, index % self.width);
        let norm = |v: usize, n: usize| if n > 1 { v as f64 / (n - 1) as f64 } else { 0.0 };
        [norm(r, self.height), norm(c, self.width)]
    }

    /// Inverse of [`GridSpec::coord`] for coordinates that lie on the grid.
    pub fn index_of(&self, coord: &[f64]) -> Option<usize> {
        let r = (coord[0] * (self.height.max(2) - 1) as f64).round();
        let c = (coord[1] * (self.width.max(2) - 1) as f64).round();
        if r < 0.0 || c < 0.0 || r as usize >= self.height || c as usize >= self.width {
            return None;
        }
        Some(r as usize * self.width + c as usize)
    }

    pub fn coords<T: Element>(&self, indices: &[usize]) -> Tensor<T> {
        let data = indices
            .iter()
            .flat_map(|&i| self.coord(i))
            .map(T::from_f64)
            .collect();
        Tensor::matrix(indices.len(), 2, data).expect("shape")
    }

    pub fn all_coords<T: Element>(&self) -> Tensor<T> {
        self.coords(&(0..self.pixels()).collect::<Vec<_>>())
    }
}

/// A context or target set: `coords [n, d_x]`, `values [n, d_y]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet<T> {
    coords: Tensor<T>,
    values: Tensor<T>,
}

impl<T: Element> PointSet<T> {
    /// Validates coordinate range and uniqueness.
    pub fn new(coords: Tensor<T>, values: Tensor<T>) -> Result<Self, ModelError> {
        if coords.rank() != 2 || values.rank() != 2 || coords.rows() != values.rows() {
            return Err(ModelError::InvalidPoints(format!(
                "coords {:?} and values {:?} disagree",
                coords.shape(),
                values.shape()
            )));
        }
        if coords.data().iter().any(|&c| c < T::zero() || c > T::one()) {
            return Err(ModelError::InvalidPoints("coordinate outside [0, 1]".into()));
        }
        let mut seen = HashSet::new();
        for r in 0..coords.rows() {
            let key: Vec<u64> = coords.row(r).iter().map(|v| v.as_f64().to_bits()).collect();
            if !seen.insert(key) {
                return Err(ModelError::InvalidPoints(format!("duplicate coordinate at row {r}")));
            }
        }
        Ok(PointSet { coords, values })
    }

    /// Pixels `indices` of a single-channel image laid out on `grid`.
    pub fn from_pixels(grid: GridSpec, image: &[f32], indices: &[usize]) -> Result<Self, ModelError> {
        let values = indices.iter().map(|&i| T::from_f64(image[i] as f64)).collect();
        Self::new(
            grid.coords(indices),
            Tensor::matrix(indices.len(), 1, values).expect("shape"),
        )
    }

    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coords(&self) -> &Tensor<T> {
        &self.coords
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    /// `[n, d_x + d_y]` rows of `(x_i, y_i)`.
    pub fn inputs(&self) -> Tensor<T> {
        let (dx, dy) = (self.coords.cols(), self.values.cols());
        let mut data = Vec::with_capacity(self.len() * (dx + dy));
        for r in 0..self.len() {
            data.extend_from_slice(self.coords.row(r));
            data.extend_from_slice(self.values.row(r));
        }
        Tensor::matrix(self.len(), dx + dy, data).expect("shape")
    }

    /// Rows `indices` as a new set.
    pub fn select(&self, indices: &[usize]) -> Self {
        PointSet {
            coords: self.coords.gather_rows(indices),
            values: self.values.gather_rows(indices),
        }
    }

    /// Number of coordinates shared with `other`.
    pub fn overlap(&self, other: &PointSet<T>) -> usize {
        let key = |t: &Tensor<T>, r: usize| -> Vec<u64> { t.row(r).iter().map(|v| v.as_f64().to_bits()).collect() };
        let mine: HashSet<Vec<u64>> = (0..self.len()).map(|r| key(&self.coords, r)).collect();
        (0..other.len()).filter(|&r| mine.contains(&key(&other.coords, r))).count()
    }
}

/// Plain-head encoder output.
#[derive(Clone, Copy, Debug)]
pub struct NpEncoding {
    pub pooled: Var,
    pub posterior: GaussianVar,
}

/// Semi-implicit encoder output for one draw of `ε`.
#[derive(Clone, Copy, Debug)]
pub struct SiviEncoding {
    pub pooled: Var,
    pub psi: Var,
    pub posterior: GaussianVar,
}

fn require_head(config: &ModelConfig, head: Head) -> Result<(), ModelError> {
    if config.head != head {
        return Err(ModelError::HeadMismatch {
            expected: head,
            found: config.head,
        });
    }
    Ok(())
}

/// `s_i = h(x_i, y_i)` for every point, `[n, d_s]`.
pub fn embed_points<T: Element>(g: &mut Graph<T>, p: &BoundParams, set: &PointSet<T>) -> Result<Var, ModelError> {
    if set.is_empty() {
        return Err(ModelError::EmptyContext);
    }
    let x = g.constant(set.inputs());
    Ok(mlp(g, &p.embed, x)?)
}

/// Splits a `[.., 2·d_z]` output into mean and squashed scale.
fn latent_gaussian<T: Element>(g: &mut Graph<T>, config: &ModelConfig, raw: Var) -> Result<GaussianVar, TensorError> {
    let d = config.d_z;
    let mu = g.slice_cols(raw, 0, d)?;
    let pre = g.slice_cols(raw, d, 2 * d)?;
    let sq = g.sigmoid(pre)?;
    let sigma = match config.latent_std {
        LatentStdHead::Narrow => {
            let s = g.scale(sq, 0.1)?;
            g.offset(s, 0.9)?
        }
        LatentStdHead::Wide => {
            let s = g.scale(sq, 0.9)?;
            g.offset(s, 0.1)?
        }
    };
    Ok(GaussianVar::new(mu, sigma))
}

/// Plain head on pooled embeddings `[d_s]` or `[k, d_s]`.
pub fn plain_posterior<T: Element>(
    g: &mut Graph<T>,
    p: &BoundParams,
    config: &ModelConfig,
    pooled: Var,
) -> Result<GaussianVar, ModelError> {
    require_head(config, Head::Plain)?;
    let raw = mlp(g, &p.rho, pooled)?;
    Ok(latent_gaussian(g, config, raw)?)
}

/// Pools `[n, d_s]` point embeddings with the configured operator.
pub fn pool<T: Element>(g: &mut Graph<T>, config: &ModelConfig, points: Var) -> Result<Var, ModelError> {
    if g.value(points).rows() == 0 {
        return Err(ModelError::EmptyContext);
    }
    Ok(g.pool(points, config.pooling)?)
}

pub fn encode_np<T: Element>(
    g: &mut Graph<T>,
    p: &BoundParams,
    config: &ModelConfig,
    context: &PointSet<T>,
) -> Result<NpEncoding, ModelError> {
    require_head(config, Head::Plain)?;
    let s = embed_points(g, p, context)?;
    let pooled = pool(g, config, s)?;
    let posterior = plain_posterior(g, p, config, pooled)?;
    Ok(NpEncoding { pooled, posterior })
}

/// `ψ = rho(s, ε)` and `q(z | ψ, s)` for noise `[d_eps]` or `[k, d_eps]`;
/// rank follows the noise.
pub fn sivi_conditionals<T: Element>(
    g: &mut Graph<T>,
    p: &BoundParams,
    config: &ModelConfig,
    pooled: Var,
    noise: Tensor<T>,
) -> Result<(Var, GaussianVar), ModelError> {
    require_head(config, Head::Sivi)?;
    let eps = g.constant(noise);
    let rho_in = g.concat(pooled, eps)?;
    let psi = mlp(g, &p.rho, rho_in)?;
    let eta_in = g.concat(pooled, psi)?;
    let raw = mlp(g, &p.eta, eta_in)?;
    Ok((psi, latent_gaussian(g, config, raw)?))
}

/// Semi-implicit encoder with caller-supplied `ε`.
pub fn encode_sivi_with_noise<T: Element>(
    g: &mut Graph<T>,
    p: &BoundParams,
    config: &ModelConfig,
    context: &PointSet<T>,
    noise: Tensor<T>,
) -> Result<SiviEncoding, ModelError> {
    require_head(config, Head::Sivi)?;
    let s = embed_points(g, p, context)?;
    let pooled = pool(g, config, s)?;
    let (psi, posterior) = sivi_conditionals(g, p, config, pooled, noise)?;
    Ok(SiviEncoding { pooled, psi, posterior })
}

/// Semi-implicit encoder with `ε ~ N(0, I)`.
pub fn encode_sivi<T: Element>(
    g: &mut Graph<T>,
    p: &BoundParams,
    config: &ModelConfig,
    context: &PointSet<T>,
    rng: &mut Rng,
) -> Result<SiviEncoding, ModelError> {
    let noise = rng.normals(&[config.d_eps]);
    encode_sivi_with_noise(g, p, config, context, noise)
}

/// Per-point predictive Gaussians `[m, d_y]` for target coordinates `[m, d_x]`.
pub fn decode<T: Element>(
    g: &mut Graph<T>,
    p: &BoundParams,
    config: &ModelConfig,
    coords: &Tensor<T>,
    z: Var,
) -> Result<GaussianVar, ModelError> {
    let m = coords.rows();
    let x = g.constant(coords.clone());
    let input = g.concat(x, z)?;
    let out = mlp(g, &p.decoder, input)?;
    let d = config.d_y;
    match config.obs_variance {
        ObsVariance::Fixed => {
            let sigma = g.constant(Tensor::full(&[m, d], T::from_f64(config.obs_std)));
            Ok(GaussianVar::new(out, sigma))
        }
        ObsVariance::Learned => {
            let mu = g.slice_cols(out, 0, d)?;
            let pre = g.slice_cols(out, d, 2 * d)?;
            let sp = g.softplus(pre)?;
            let s = g.scale(sp, 0.1)?;
            let sigma = g.offset(s, 0.9)?;
            Ok(GaussianVar::new(mu, sigma))
        }
    }
}

/// Stack of predictive-mean images plus their per-pixel spread.
#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    /// `k` images, each `pixels · d_y` values in row-major order.
    pub means: Vec<Vec<f64>>,
    /// Per-pixel sample standard deviation over the `k` means (zeros for `k = 1`).
    pub std: Vec<f64>,
}

/// A model together with its configuration, for evaluation outside training.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralProcess<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Element> NeuralProcess<T> {
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        let params = ModelParams::init(&config, rng)?;
        Ok(NeuralProcess { config, params })
    }

    pub fn new(config: ModelConfig, params: ModelParams<T>) -> Result<Self, ModelError> {
        let named = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        ModelParams::from_named(&config, named)?;
        Ok(NeuralProcess { config, params })
    }

    pub fn cast<U: Element>(&self) -> NeuralProcess<U> {
        NeuralProcess {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Per-point embeddings `[n, d_s]`.
    pub fn point_embeddings(&self, set: &PointSet<T>) -> Result<Tensor<T>, ModelError> {
        let mut g = Graph::new();
        let embed: Vec<BoundLinear> = self.params.embed.iter().map(|l| l.bind(&mut g)).collect();
        if set.is_empty() {
            return Err(ModelError::EmptyContext);
        }
        let x = g.constant(set.inputs());
        let s = mlp(&mut g, &embed, x)?;
        Ok(g.value(s).clone())
    }

    /// Pooled embedding `s_C`.
    pub fn pooled_embedding(&self, context: &PointSet<T>) -> Result<Vec<f64>, ModelError> {
        let points = self.point_embeddings(context)?;
        let mut g = Graph::new();
        let s = g.constant(points);
        let pooled = pool(&mut g, &self.config, s)?;
        Ok(g.value(pooled).to_f64_vec())
    }

    /// Plain-head posteriors for a batch of pooled embeddings `[k, d_s]`.
    pub fn plain_posteriors(&self, pooled: &Tensor<T>) -> Result<Vec<DiagGaussian>, ModelError> {
        require_head(&self.config, Head::Plain)?;
        let mut g = Graph::new();
        let rho: Vec<BoundLinear> = self.params.rho.iter().map(|l| l.bind(&mut g)).collect();
        let s = g.constant(pooled.clone());
        let raw = mlp(&mut g, &rho, s)?;
        let q = latent_gaussian(&mut g, &self.config, raw)?;
        let (mu, sigma) = (g.value(q.mu), g.value(q.sigma));
        (0..mu.rows())
            .map(|r| {
                Ok(DiagGaussian::new(
                    mu.row(r).iter().map(|v| v.as_f64()).collect(),
                    sigma.row(r).iter().map(|v| v.as_f64()).collect(),
                )?)
            })
            .collect()
    }

    /// Semi-implicit conditionals `q(z | ψ_j, s)` for a batch of pooled
    /// embeddings `[k, d_s]`, one list per row, one entry per noise row.
    pub fn sivi_posteriors(&self, pooled: &Tensor<T>, noise: &Tensor<T>) -> Result<Vec<Vec<DiagGaussian>>, ModelError> {
        require_head(&self.config, Head::Sivi)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let mut out = Vec::with_capacity(pooled.rows());
        for r in 0..pooled.rows() {
            let s = g.constant(Tensor::vector(pooled.row(r).to_vec()));
            let (_, q) = sivi_conditionals(&mut g, &p, &self.config, s, noise.clone())?;
            let (mu, sigma) = (g.value(q.mu), g.value(q.sigma));
            let mut row = Vec::with_capacity(mu.rows());
            for j in 0..mu.rows() {
                row.push(DiagGaussian::new(
                    mu.row(j).iter().map(|v| v.as_f64()).collect(),
                    sigma.row(j).iter().map(|v| v.as_f64()).collect(),
                )?);
            }
            out.push(row);
        }
        Ok(out)
    }

    /// `q(z | C)` for the plain head; for the semi-implicit head, the
    /// conditional `q(z | ψ, C)` at one fresh draw of `ε`.
    pub fn posterior(&self, context: &PointSet<T>, rng: &mut Rng) -> Result<DiagGaussian, ModelError> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let q = match self.config.head {
            Head::Plain => encode_np(&mut g, &p, &self.config, context)?.posterior,
            Head::Sivi => encode_sivi(&mut g, &p, &self.config, context, rng)?.posterior,
        };
        Ok(q.to_diag(&g)?)
    }

    /// `k` draws from the (plain or semi-implicit) posterior.
    pub fn sample_latents(&self, context: &PointSet<T>, k: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>, ModelError> {
        if context.is_empty() {
            return Err(ModelError::EmptyContext);
        }
        match self.config.head {
            Head::Plain => {
                let q = self.posterior(context, rng)?;
                Ok((0..k).map(|_| q.sample(rng)).collect())
            }
            Head::Sivi => {
                let points = self.point_embeddings(context)?;
                let mut g = Graph::new();
                let s = g.constant(points);
                let pooled = pool(&mut g, &self.config, s)?;
                let pooled = Tensor::matrix(1, self.config.d_s, g.value(pooled).data().to_vec())?;
                let noise = rng.normals(&[k, self.config.d_eps]);
                let qs = self.sivi_posteriors(&pooled, &noise)?;
                Ok(qs[0].iter().map(|q| q.sample(rng)).collect())
            }
        }
    }

    /// Predictive Gaussian at `coords` for a fixed latent `z`.
    pub fn predict(&self, coords: &Tensor<T>, z: &[f64]) -> Result<DiagGaussian, ModelError> {
        let mut g = Graph::new();
        let decoder: Vec<BoundLinear> = self.params.decoder.iter().map(|l| l.bind(&mut g)).collect();
        let p = BoundParams {
            embed: vec![],
            rho: vec![],
            eta: vec![],
            decoder,
        };
        let zv = g.constant(Tensor::vector(z.iter().map(|&v| T::from_f64(v)).collect()));
        let out = decode(&mut g, &p, &self.config, coords, zv)?;
        Ok(out.to_diag(&g)?)
    }

    /// Decodes the mean image of every latent in `latents`; optionally pastes
    /// the context values over their own pixels.
    pub fn complete_from_latents(
        &self,
        context: &PointSet<T>,
        grid: GridSpec,
        latents: &[Vec<f64>],
        copy_context: bool,
    ) -> Result<Completion, ModelError> {
        if latents.is_empty() {
            return Err(ModelError::NoSamples);
        }
        let coords = grid.all_coords::<T>();
        let d_y = self.config.d_y;
        let context_pixels: Vec<Option<usize>> = (0..context.len())
            .map(|r| grid.index_of(&context.coords().row(r).iter().map(|v| v.as_f64()).collect::<Vec<_>>()))
            .collect();
        let mut means = Vec::with_capacity(latents.len());
        for z in latents {
            let mut img = self.predict(&coords, z)?.mu().to_vec();
            if copy_context {
                for (r, px) in context_pixels.iter().enumerate() {
                    if let Some(px) = px {
                        for (c, v) in context.values().row(r).iter().enumerate() {
                            img[px * d_y + c] = v.as_f64();
                        }
                    }
                }
            }
            means.push(img);
        }
        let std = pixel_std(&means);
        Ok(Completion { means, std })
    }

    /// Draws `k` latents from the posterior given `context` and decodes the
    /// mean image of each over the full grid.
    pub fn sample_completion(
        &self,
        context: &PointSet<T>,
        grid: GridSpec,
        k: usize,
        copy_context: bool,
        rng: &mut Rng,
    ) -> Result<Completion, ModelError> {
        if k == 0 {
            return Err(ModelError::NoSamples);
        }
        let latents = self.sample_latents(context, k, rng)?;
        self.complete_from_latents(context, grid, &latents, copy_context)
    }
}

/// Pools rows `rows` of `[n, d]` embeddings, with the same arithmetic as
/// [`Graph::pool`].
pub fn pool_rows<T: Element>(embeddings: &Tensor<T>, rows: &[usize], mode: PoolMode) -> Result<Vec<T>, ModelError> {
    let (&first, rest) = rows.split_first().ok_or(ModelError::EmptyContext)?;
    let mut acc = embeddings.row(first).to_vec();
    for &r in rest {
        for (a, &v) in acc.iter_mut().zip(embeddings.row(r)) {
            *a = match mode {
                PoolMode::Mean => *a + v,
                PoolMode::Max => {
                    if v > *a {
                        v
                    } else {
                        *a
                    }
                }
            };
        }
    }
    if mode == PoolMode::Mean {
        let inv = T::from_f64(rows.len() as f64);
        acc.iter_mut().for_each(|a| *a = *a / inv);
    }
    Ok(acc)
}

fn pixel_std(images: &[Vec<f64>]) -> Vec<f64> {
    let k = images.len();
    let n = images[0].len();
    if k < 2 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|i| {
            // Shifted by the first sample so identical samples give exactly 0.
            let shift = images[0][i];
            let d: Vec<f64> = images.iter().map(|im| im[i] - shift).collect();
            let mean = d.iter().sum::<f64>() / k as f64;
            let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
            var.max(0.0).sqrt()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(head: Head, pooling: PoolMode) -> ModelConfig {
        ModelConfig {
            d_h: 8,
            d_s: 8,
            d_z: 6,
            d_psi: 4,
            d_eps: 4,
            head,
            pooling,
            ..ModelConfig::default()
        }
    }

    fn image(grid: GridSpec, seed: u64) -> Vec<f32> {
        let mut rng = Rng::seed(seed);
        (0..grid.pixels()).map(|_| rng.uniform() as f32).collect()
    }

    const GRID: GridSpec = GridSpec { height: 6, width: 5 };

    #[test]
    fn grid_coordinates_round_trip() {
        assert_eq!(GRID.coord(0), [0.0, 0.0]);
        assert_eq!(GRID.coord(29), [1.0, 1.0]);
        for i in 0..GRID.pixels() {
            assert_eq!(GRID.index_of(&GRID.coord(i)), Some(i));
        }
    }

    #[test]
    fn point_set_validation() {
        let dup = Tensor::<f64>::matrix(2, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let vals = Tensor::<f64>::matrix(2, 1, vec![0.0, 1.0]).unwrap();
        assert!(PointSet::new(dup, vals.clone()).is_err());
        let outside = Tensor::<f64>::matrix(2, 2, vec![0.5, 1.5, 0.5, 0.5]).unwrap();
        assert!(PointSet::new(outside, vals).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        c.d_z = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.obs_std = 0.0;
        assert!(c.validate().is_err());
        assert_eq!(ModelConfig::full_scale().d_psi, 32);
    }

    #[test]
    fn full_scale_dims_give_narrow_latent_scales() {
        let cfg = ModelConfig::full_scale();
        let mut rng = Rng::seed(1);
        let model = NeuralProcess::<f32>::init(cfg, &mut rng).unwrap();
        let img = image(GridSpec { height: 28, width: 28 }, 2);
        let ctx = PointSet::from_pixels(GridSpec { height: 28, width: 28 }, &img, &[3, 100, 400]).unwrap();
        let q = model.posterior(&ctx, &mut rng).unwrap();
        assert_eq!(q.dim(), 512);
        assert!(q.sigma().iter().all(|&s| s > 0.9 && s < 1.0));
    }

    #[test]
    fn sivi_full_scale_config_has_32_dim_psi() {
        let cfg = ModelConfig {
            head: Head::Sivi,
            ..ModelConfig::full_scale()
        };
        let mut rng = Rng::seed(4);
        let params = ModelParams::<f32>::init(&cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let img = image(GRID, 3);
        let ctx = PointSet::from_pixels(GRID, &img, &[1, 2]).unwrap();
        let enc = encode_sivi(&mut g, &p, &cfg, &ctx, &mut rng).unwrap();
        assert_eq!(g.shape(enc.psi), &[32]);
        assert_eq!(g.shape(enc.posterior.mu), &[512]);
    }

    #[test]
    fn permuted_context_gives_same_posterior() {
        for pooling in [PoolMode::Max, PoolMode::Mean] {
            let cfg = small_config(Head::Plain, pooling);
            let mut rng = Rng::seed(5);
            let model = NeuralProcess::<f64>::init(cfg, &mut rng).unwrap();
            let img = image(GRID, 6);
            let idx = vec![4, 9, 17, 22, 3, 28];
            let mut perm = idx.clone();
            perm.reverse();
            let a = model.posterior(&PointSet::from_pixels(GRID, &img, &idx).unwrap(), &mut rng).unwrap();
            let b = model.posterior(&PointSet::from_pixels(GRID, &img, &perm).unwrap(), &mut rng).unwrap();
            for (x, y) in a.mu().iter().zip(b.mu()) {
                assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }
    }

    #[test]
    fn duplicated_points_leave_max_pool_unchanged() {
        let cfg = small_config(Head::Plain, PoolMode::Max);
        let mut rng = Rng::seed(7);
        let model = NeuralProcess::<f64>::init(cfg, &mut rng).unwrap();
        let img = image(GRID, 8);
        let ctx = PointSet::from_pixels(GRID, &img, &[0, 5, 12]).unwrap();
        // Duplicate rows bypass PointSet's uniqueness check on purpose.
        let emb = model.point_embeddings(&ctx).unwrap();
        let doubled = emb.gather_rows(&[0, 1, 2, 0, 1, 2]);
        let mut g = Graph::new();
        let a = g.constant(emb);
        let b = g.constant(doubled);
        let pa = g.pool(a, PoolMode::Max).unwrap();
        let pb = g.pool(b, PoolMode::Max).unwrap();
        assert_eq!(g.value(pa), g.value(pb));
    }

    #[test]
    fn value_pooling_matches_graph_pooling() {
        let cfg = small_config(Head::Plain, PoolMode::Mean);
        let mut rng = Rng::seed(17);
        let model = NeuralProcess::<f32>::init(cfg, &mut rng).unwrap();
        let all: Vec<usize> = (0..GRID.pixels()).collect();
        let emb = model.point_embeddings(&PointSet::from_pixels(GRID, &image(GRID, 18), &all).unwrap()).unwrap();
        let rows = [7usize, 2, 19, 4, 11];
        for mode in [PoolMode::Mean, PoolMode::Max] {
            let mut g = Graph::new();
            let s = g.constant(emb.gather_rows(&rows));
            let pooled = g.pool(s, mode).unwrap();
            assert_eq!(g.value(pooled).data(), pool_rows(&emb, &rows, mode).unwrap().as_slice());
        }
    }

    #[test]
    fn empty_context_is_rejected() {
        let cfg = small_config(Head::Plain, PoolMode::Max);
        let mut rng = Rng::seed(9);
        let model = NeuralProcess::<f64>::init(cfg, &mut rng).unwrap();
        let empty = PointSet::from_pixels(GRID, &image(GRID, 1), &[]).unwrap();
        assert_eq!(model.posterior(&empty, &mut rng), Err(ModelError::EmptyContext));
    }

    #[test]
    fn head_mismatch_is_reported() {
        let cfg = small_config(Head::Plain, PoolMode::Max);
        let mut rng = Rng::seed(9);
        let params = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = params.bind(&mut g);
        let ctx = PointSet::from_pixels(GRID, &image(GRID, 1), &[2]).unwrap();
        assert!(matches!(
            encode_sivi(&mut g, &p, &cfg, &ctx, &mut rng),
            Err(ModelError::HeadMismatch { .. })
        ));
    }

    #[test]
    fn sivi_noise_controls_the_conditional() {
        let cfg = small_config(Head::Sivi, PoolMode::Max);
        let mut rng = Rng::seed(10);
        let params = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
        let ctx = PointSet::from_pixels(GRID, &image(GRID, 2), &[2, 7, 11]).unwrap();
        let run = |noise: Tensor<f64>| {
            let mut g = Graph::new();
            let p = params.bind(&mut g);
            let enc = encode_sivi_with_noise(&mut g, &p, &cfg, &ctx, noise).unwrap();
            (g.value(enc.psi).clone(), enc.posterior.to_diag(&g).unwrap())
        };
        let (psi_a, _) = run(Tensor::zeros(&[4]));
        let (psi_b, _) = run(Tensor::zeros(&[4]));
        assert_eq!(psi_a, psi_b);
        let mut r1 = Rng::seed(1);
        let mut r2 = Rng::seed(2);
        let (_, qa) = run(r1.normals(&[4]));
        let (_, qb) = run(r2.normals(&[4]));
        assert_ne!(qa.mu(), qb.mu());
    }

    #[test]
    fn decoder_scales() {
        let mut rng = Rng::seed(12);
        let fixed = ModelConfig {
            obs_variance: ObsVariance::Fixed,
            ..small_config(Head::Plain, PoolMode::Max)
        };
        let model = NeuralProcess::<f64>::init(fixed, &mut rng).unwrap();
        let coords = GRID.coords::<f64>(&[0, 1, 2, 3, 4, 5, 6]);
        let out = model.predict(&coords, &[0.1; 6]).unwrap();
        assert_eq!(out.dim(), 7);
        assert!(out.sigma().iter().all(|&s| s == 0.2));

        // Zero last-layer weights and bias make σ'_y = 0.
        let learned = small_config(Head::Plain, PoolMode::Max);
        let mut model = NeuralProcess::<f64>::init(learned, &mut rng).unwrap();
        let last = model.params.decoder.last_mut().unwrap();
        last.weight = Tensor::zeros(last.weight.shape());
        last.bias = Tensor::zeros(last.bias.shape());
        let out = model.predict(&coords, &[0.3; 6]).unwrap();
        for &s in out.sigma() {
            assert!((s - (0.9 + 0.1 * std::f64::consts::LN_2)).abs() < 1e-12);
            assert!((s - 0.969315).abs() < 1e-6);
        }
    }

    #[test]
    fn completion_copies_context_and_is_deterministic() {
        let cfg = small_config(Head::Plain, PoolMode::Max);
        let mut rng = Rng::seed(13);
        let model = NeuralProcess::<f64>::init(cfg, &mut rng).unwrap();
        let img = image(GRID, 14);
        let idx = [3usize, 8, 20];
        let ctx = PointSet::from_pixels(GRID, &img, &idx).unwrap();
        let run = |seed| model.sample_completion(&ctx, GRID, 4, true, &mut Rng::seed(seed)).unwrap();
        let a = run(99);
        assert_eq!(a, run(99));
        for m in &a.means {
            for &i in &idx {
                assert_eq!(m[i], img[i] as f64);
            }
        }
        assert_eq!(a.means.len(), 4);
        assert!(a.std.iter().any(|&s| s > 0.0));
    }

    #[test]
    fn point_mass_posterior_has_zero_spread() {
        let cfg = small_config(Head::Plain, PoolMode::Mean);
        let mut rng = Rng::seed(15);
        let model = NeuralProcess::<f64>::init(cfg, &mut rng).unwrap();
        let ctx = PointSet::from_pixels(GRID, &image(GRID, 3), &[1]).unwrap();
        let z = vec![0.25; 6];
        let latents = vec![z; 1000];
        let c = model.complete_from_latents(&ctx, GRID, &latents, false).unwrap();
        assert!(c.std.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn named_round_trip_and_missing_tensor() {
        let cfg = small_config(Head::Sivi, PoolMode::Max);
        let mut rng = Rng::seed(16);
        let params = ModelParams::<f32>::init(&cfg, &mut rng).unwrap();
        let named: BTreeMap<String, Tensor<f32>> =
            params.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        assert_eq!(ModelParams::from_named(&cfg, named.clone()).unwrap(), params);
        let mut missing = named.clone();
        missing.remove("eta.1.bias");
        assert_eq!(
            ModelParams::from_named(&cfg, missing),
            Err(ModelError::MissingTensor("eta.1.bias".into()))
        );
        let mut extra = named;
        extra.insert("bogus".into(), Tensor::zeros(&[1]));
        assert!(matches!(ModelParams::from_named(&cfg, extra), Err(ModelError::UnexpectedTensor(_))));
    }
}
