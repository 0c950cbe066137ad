//! Task sampling, Adam, the learning-rate schedule and the training loop.

use std::path::PathBuf;
use std::time::Instant;

use thiserror::Error;

use crate::dataio::checkpoint::Checkpoint;
use crate::dataio::ImageDataset;
use crate::model::{ModelConfig, ModelError, ModelParams, NeuralProcess};
use crate::objectives::{elbo_terms, np_objective_terms, sivi_bound_terms, SiviPrior, Task};
use crate::rng::Rng;
use crate::tensor::{Element, Graph, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("image has no pixels")]
    EmptyImage,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite objective at epoch {epoch}, batch {batch} (images {images:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        images: Vec<usize>,
    },
    #[error("parameter and gradient sets disagree")]
    ShapeMismatch,
}

/// One training task: `target` lists distinct pixel indices; the context
/// is its first `n_context` entries.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskInstance {
    pub image: usize,
    pub n_context: usize,
    pub target: Vec<usize>,
}

impl TaskInstance {
    pub fn context(&self) -> &[usize] {
        &self.target[..self.n_context]
    }

    pub fn to_task<T: Element>(&self, dataset: &ImageDataset) -> Result<Task<T>, ModelError> {
        Task::from_pixels(dataset.grid(), dataset.image(self.image), self.context(), &self.target)
    }
}

/// Draws `n` from `n_range` and `m'` from `mprime_range` (half-open), then
/// `n + m'` distinct pixels. Ranges are clamped to the pixel count.
pub fn sample_task(
    image: usize,
    pixels: usize,
    rng: &mut Rng,
    n_range: (usize, usize),
    mprime_range: (usize, usize),
) -> Result<TaskInstance, TrainError> {
    if pixels == 0 {
        return Err(TrainError::EmptyImage);
    }
    let n_hi = n_range.1.min(pixels + 1).max(n_range.0 + 1);
    let n = rng.range(n_range.0, n_hi).clamp(1, pixels);
    let m_hi = mprime_range.1.max(mprime_range.0 + 1);
    let m = rng.range(mprime_range.0, m_hi).min(pixels - n);
    Ok(TaskInstance {
        image,
        n_context: n,
        target: rng.choose_distinct(pixels, n + m),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ObjectiveKind {
    Np,
    Elbo,
    Sivi,
}

/// Which NP-objective form supplies the training gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NpDivergence {
    /// Closed-form `KL(q(·|T) ‖ q(·|C))`.
    Analytic,
    /// Single-sample `log q(z|T) - log q(z|C)`.
    Sampled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    pub np_divergence: NpDivergence,
    pub sivi_prior: SiviPrior,
    pub sivi_k: usize,
    pub z_samples: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub schedule: bool,
    pub milestones: Vec<usize>,
    pub lr_factor: f64,
    pub n_range: (usize, usize),
    pub mprime_range: (usize, usize),
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub data_dir: PathBuf,
    pub train_images: usize,
    pub test_images: usize,
    /// Save a checkpoint every this many epochs; 0 saves only the last.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: ObjectiveKind::Np,
            np_divergence: NpDivergence::Analytic,
            sivi_prior: SiviPrior::Standard,
            sivi_k: 16,
            z_samples: 1,
            batch_size: 16,
            epochs: 10,
            lr: 5e-4,
            schedule: false,
            milestones: vec![20, 50, 80],
            lr_factor: 0.1,
            n_range: (1, 200),
            mprime_range: (0, 200),
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            data_dir: PathBuf::from("data/mnist"),
            train_images: 2000,
            test_images: 500,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.n_range.0 < 1 || self.n_range.0 >= self.n_range.1 {
            return bad(format!("n range {:?} must be nonempty and start at 1 or more", self.n_range));
        }
        if self.mprime_range.0 >= self.mprime_range.1 {
            return bad(format!("m' range {:?} is empty", self.mprime_range));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive".into());
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return bad(format!("lr_factor must lie in (0, 1], got {}", self.lr_factor));
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return bad("grad_clip must be positive".into());
            }
        }
        Ok(())
    }
}

/// Base rate times `lr_factor` per milestone already reached.
pub fn lr_at(config: &TrainConfig, epoch: usize) -> f64 {
    if !config.schedule {
        return config.lr;
    }
    let passed = config.milestones.iter().filter(|&&m| epoch >= m).count();
    config.lr * config.lr_factor.powi(passed as i32)
}

/// Adam moments for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Element> AdamState<T> {
    pub fn new(like: &ModelParams<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let mut zeros = like.clone();
        for t in zeros.tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn push_to(&self, checkpoint: &mut Checkpoint) {
        checkpoint.push_params("adam.m.", &self.m);
        checkpoint.push_params("adam.v.", &self.v);
    }

    /// Moments from a checkpoint; `step` and betas come from elsewhere.
    pub fn from_checkpoint(
        checkpoint: &Checkpoint,
        config: &ModelConfig,
        step: u64,
        train: &TrainConfig,
    ) -> Result<Self, ModelError> {
        Ok(AdamState {
            m: ModelParams::from_named(config, checkpoint.with_prefix("adam.m."))?,
            v: ModelParams::from_named(config, checkpoint.with_prefix("adam.v."))?,
            step,
            beta1: train.beta1,
            beta2: train.beta2,
            eps: train.adam_eps,
        })
    }
}

/// One bias-corrected Adam update that descends `grads`.
pub fn adam_step<T: Element>(
    state: &mut AdamState<T>,
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    lr: f64,
) -> Result<(), TrainError> {
    let named = grads.named();
    for (name, g) in &named {
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient(name.clone()));
        }
    }
    let grads: Vec<&Tensor<T>> = named.iter().map(|(_, g)| *g).collect();
    state.step += 1;
    adam_update(
        params.tensors_mut(),
        state.m.tensors_mut(),
        state.v.tensors_mut(),
        &grads,
        state.step,
        (state.beta1, state.beta2, state.eps),
        lr,
    )
}

/// Adam update of parallel tensor lists at (1-based) step `step`.
pub fn adam_update<T: Element>(
    params: Vec<&mut Tensor<T>>,
    ms: Vec<&mut Tensor<T>>,
    vs: Vec<&mut Tensor<T>>,
    grads: &[&Tensor<T>],
    step: u64,
    (b1, b2, eps): (f64, f64, f64),
    lr: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || ms.len() != grads.len() || vs.len() != grads.len() {
        return Err(TrainError::ShapeMismatch);
    }
    let t = step as i32;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, m), v), g) in params.into_iter().zip(ms).zip(vs).zip(grads) {
        if p.shape() != g.shape() || m.shape() != g.shape() || v.shape() != g.shape() {
            return Err(TrainError::ShapeMismatch);
        }
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            let gi = g.data()[i].as_f64();
            let mi = b1 * md[i].as_f64() + (1.0 - b1) * gi;
            let vi = b2 * vd[i].as_f64() + (1.0 - b2) * gi * gi;
            md[i] = T::from_f64(mi);
            vd[i] = T::from_f64(vi);
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            pd[i] = T::from_f64(pd[i].as_f64() - update);
        }
    }
    Ok(())
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradients<T: Element>(grads: &mut ModelParams<T>, max_norm: f64) -> f64 {
    let norm = grads
        .tensors()
        .iter()
        .flat_map(|t| t.data().iter())
        .map(|v| v.as_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::from_f64(max_norm / norm);
        for t in grads.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_objective: f64,
    pub lr: f64,
    pub seconds: f64,
}

impl EpochMetrics {
    pub fn tsv(&self) -> String {
        format!("{}\t{:.6}\t{:e}\t{:.3}", self.epoch, self.mean_objective, self.lr, self.seconds)
    }
}

/// Objective of one task inside a batch graph.
fn task_objective<T: Element>(
    g: &mut Graph<T>,
    p: &crate::model::BoundParams,
    model: &ModelConfig,
    config: &TrainConfig,
    task: &Task<T>,
    rng: &mut Rng,
) -> Result<crate::tensor::Var, ModelError> {
    Ok(match config.objective {
        ObjectiveKind::Elbo => elbo_terms(g, p, model, task, config.z_samples, rng)?.value,
        ObjectiveKind::Sivi => sivi_bound_terms(g, p, model, task, config.sivi_k, config.sivi_prior, rng)?.value,
        ObjectiveKind::Np => {
            let terms = np_objective_terms(g, p, model, task, config.z_samples, rng)?;
            match config.np_divergence {
                NpDivergence::Sampled => terms.value,
                NpDivergence::Analytic => terms.analytic.expect("np objective has a closed form"),
            }
        }
    })
}

/// Mean objective over a batch and its gradient (of the objective, not the
/// loss) with respect to every parameter.
pub fn batch_gradient<T: Element>(
    model: &NeuralProcess<T>,
    config: &TrainConfig,
    tasks: &[Task<T>],
    rng: &mut Rng,
) -> Result<(f64, ModelParams<T>), ModelError> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let mut values = Vec::with_capacity(tasks.len());
    for task in tasks {
        values.push(task_objective(&mut g, &p, &model.config, config, task, rng)?);
    }
    let stacked = g.stack(&values)?;
    let total = g.sum(stacked)?;
    let mean = g.scale(total, 1.0 / tasks.len() as f64)?;
    let grads = g.backward(mean)?;
    Ok((g.item(mean).as_f64(), p.gradients(&grads, &model.params)))
}

/// Trained model, optimizer state and per-epoch log.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub model: NeuralProcess<T>,
    pub adam: AdamState<T>,
    pub metrics: Vec<EpochMetrics>,
}

/// Maximizes the configured objective with Adam. `on_epoch` is called after
/// every epoch with the epoch index, the current model and optimizer state.
pub fn train<T, F>(
    model_config: &ModelConfig,
    config: &TrainConfig,
    dataset: &ImageDataset,
    seed: u64,
    mut on_epoch: F,
) -> Result<TrainOutcome<T>, TrainError>
where
    T: Element,
    F: FnMut(&EpochMetrics, &NeuralProcess<T>, &AdamState<T>) -> Result<(), TrainError>,
{
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut init_rng = Rng::stream(seed, 0);
    let mut order_rng = Rng::stream(seed, 1);
    let mut task_rng = Rng::stream(seed, 2);
    let mut noise_rng = Rng::stream(seed, 3);
    let mut model = NeuralProcess::<T>::init(model_config.clone(), &mut init_rng)?;
    let mut adam = AdamState::new(&model.params, config.beta1, config.beta2, config.adam_eps);
    let pixels = dataset.height * dataset.width;
    let mut metrics = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let start = Instant::now();
        let lr = lr_at(config, epoch);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order_rng.shuffle(&mut order);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let tasks: Vec<Task<T>> = chunk
                .iter()
                .map(|&i| {
                    let inst = sample_task(i, pixels, &mut task_rng, config.n_range, config.mprime_range)?;
                    Ok(inst.to_task(dataset)?)
                })
                .collect::<Result<_, TrainError>>()?;
            let nonfinite = || TrainError::NonFiniteLoss {
                epoch,
                batch: b,
                images: chunk.to_vec(),
            };
            let (value, mut grads) = match batch_gradient(&model, config, &tasks, &mut noise_rng) {
                Ok(r) => r,
                Err(ModelError::Tensor(crate::tensor::TensorError::NonFinite(_))) => return Err(nonfinite()),
                Err(e) => return Err(e.into()),
            };
            if !value.is_finite() {
                return Err(nonfinite());
            }
            // Ascend the objective by descending its negation.
            for t in grads.tensors_mut() {
                t.data_mut().iter_mut().for_each(|v| *v = -*v);
            }
            if let Some(c) = config.grad_clip {
                clip_gradients(&mut grads, c);
            }
            adam_step(&mut adam, &mut model.params, &grads, lr)?;
            sum += value;
            batches += 1;
        }
        let m = EpochMetrics {
            epoch,
            mean_objective: sum / batches as f64,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&m, &model, &adam)?;
        metrics.push(m);
    }
    Ok(TrainOutcome { model, adam, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Head;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn default_ranges_and_rates() {
        let c = TrainConfig::default();
        assert_eq!(c.n_range, (1, 200));
        assert_eq!(c.mprime_range, (0, 200));
        assert_eq!(c.lr, 5e-4);
        assert_eq!(lr_at(&c, 85), 5e-4);
        let s = TrainConfig {
            schedule: true,
            ..c
        };
        assert!((lr_at(&s, 19) - 5e-4).abs() < 1e-18);
        assert!((lr_at(&s, 25) - 5e-5).abs() < 1e-18);
        assert!((lr_at(&s, 85) - 5e-7).abs() < 1e-18);
    }

    #[test]
    fn context_size_is_uniform() {
        let mut rng = Rng::seed(1);
        let mut counts = vec![0usize; 200];
        let draws = 100_000;
        for _ in 0..draws {
            let t = sample_task(0, 784, &mut rng, (1, 200), (0, 200)).unwrap();
            counts[t.n_context] += 1;
        }
        assert_eq!(counts[0], 0);
        let expected = draws as f64 / 199.0;
        let chi2: f64 = counts[1..].iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new(198.0).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2 = {chi2}, p = {p}");
    }

    #[test]
    fn ranges_clamp_to_small_images() {
        let mut rng = Rng::seed(2);
        for _ in 0..200 {
            let t = sample_task(0, 10, &mut rng, (1, 200), (0, 200)).unwrap();
            assert!(t.n_context >= 1 && t.target.len() <= 10);
        }
        assert!(matches!(
            sample_task(0, 0, &mut rng, (1, 200), (0, 200)),
            Err(TrainError::EmptyImage)
        ));
    }

    proptest! {
        #[test]
        fn sampled_tasks_are_well_formed(seed in any::<u64>(), pixels in 1usize..900) {
            let mut rng = Rng::seed(seed);
            let t = sample_task(3, pixels, &mut rng, (1, 200), (0, 200)).unwrap();
            prop_assert!(t.n_context >= 1);
            prop_assert!(t.n_context <= t.target.len());
            prop_assert_eq!(t.context(), &t.target[..t.n_context]);
            let mut sorted = t.target.clone();
            sorted.sort_unstable();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), t.target.len());
            prop_assert!(t.target.iter().all(|&i| i < pixels));
        }

        #[test]
        fn lr_never_increases(e in 0usize..200) {
            let c = TrainConfig { schedule: true, ..TrainConfig::default() };
            prop_assert!(lr_at(&c, e + 1) <= lr_at(&c, e));
        }
    }

    fn tiny_params(seed: u64) -> ModelParams<f64> {
        let cfg = ModelConfig {
            d_h: 3,
            d_s: 3,
            d_z: 2,
            head: Head::Plain,
            ..ModelConfig::default()
        };
        ModelParams::init(&cfg, &mut Rng::seed(seed)).unwrap()
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut params = tiny_params(3);
        let before = params.clone();
        let mut grads = params.clone();
        for t in grads.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.37);
        }
        let mut state = AdamState::new(&params, 0.9, 0.999, 1e-8);
        adam_step(&mut state, &mut params, &grads, 1e-3).unwrap();
        for (a, b) in params.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!(((y - x) - 1e-3).abs() < 1e-9);
            }
        }
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = tiny_params(4);
        let before = params.clone();
        let mut grads = params.clone();
        for t in grads.tensors_mut() {
            *t = Tensor::zeros(t.shape());
        }
        let mut state = AdamState::new(&params, 0.9, 0.999, 1e-8);
        adam_step(&mut state, &mut params, &grads, 1e-3).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut params = tiny_params(5);
        let mut grads = params.clone();
        grads.decoder[0].bias.data_mut()[0] = f64::NAN;
        let mut state = AdamState::new(&params, 0.9, 0.999, 1e-8);
        assert!(matches!(
            adam_step(&mut state, &mut params, &grads, 1e-3),
            Err(TrainError::NonFiniteGradient(name)) if name == "decoder.0.bias"
        ));
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut grads = tiny_params(6);
        for t in grads.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 1.0);
        }
        let before = clip_gradients(&mut grads, 0.5);
        assert!(before > 0.5);
        let after = clip_gradients(&mut grads, 0.5);
        assert!((after - 0.5).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs() {
        let c = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            n_range: (5, 5),
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
