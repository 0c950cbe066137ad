//! Scalar training and evaluation objectives. All are lower bounds to be
//! maximized.
//!
//! The `*_terms` functions build the objective inside a caller's graph so a
//! whole batch can share one backward pass; the plain functions evaluate a
//! single task and return numbers.

use crate::distributions::{standard_normal_logpdf, DiagGaussian, GaussianVar};
use crate::model::{
    decode, embed_points, plain_posterior, pool, sivi_conditionals, BoundParams, GridSpec, Head,
    ModelConfig, ModelError, NeuralProcess, PointSet,
};
use crate::rng::Rng;
use crate::tensor::{logsumexp, Element, Graph, Tensor, Var};

/// Mixture size used when `elbo` is asked to score a semi-implicit model.
pub const DEFAULT_SIVI_K: usize = 16;

/// A context set and a target set drawn from one function.
#[derive(Clone, Debug, PartialEq)]
pub struct Task<T> {
    context: PointSet<T>,
    target: PointSet<T>,
    /// Context equals the first `context.len()` target rows.
    prefix: bool,
}

impl<T: Element> Task<T> {
    pub fn new(context: PointSet<T>, target: PointSet<T>) -> Result<Self, ModelError> {
        if target.is_empty() {
            return Err(ModelError::InvalidPoints("target set is empty".into()));
        }
        let n = context.len();
        let prefix = n <= target.len() && target.select(&(0..n).collect::<Vec<_>>()) == context;
        Ok(Task {
            context,
            target,
            prefix,
        })
    }

    /// Context = first `n` target points.
    pub fn nested(target: PointSet<T>, n: usize) -> Result<Self, ModelError> {
        if n > target.len() {
            return Err(ModelError::InvalidPoints(format!(
                "context size {n} exceeds target size {}",
                target.len()
            )));
        }
        let context = target.select(&(0..n).collect::<Vec<_>>());
        Self::new(context, target)
    }

    /// Fully supervised task: context and target are the same set.
    pub fn full(points: PointSet<T>) -> Result<Self, ModelError> {
        let n = points.len();
        Self::nested(points, n)
    }

    pub fn from_pixels(
        grid: GridSpec,
        image: &[f32],
        context: &[usize],
        target: &[usize],
    ) -> Result<Self, ModelError> {
        Self::new(
            PointSet::from_pixels(grid, image, context)?,
            PointSet::from_pixels(grid, image, target)?,
        )
    }

    pub fn context(&self) -> &PointSet<T> {
        &self.context
    }

    pub fn target(&self) -> &PointSet<T> {
        &self.target
    }
}

/// Which density stands in for `p(z)` in the semi-implicit bound.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SiviPrior {
    /// `N(0, I)`.
    Standard,
    /// The semi-implicit posterior given the context set, estimated by
    /// averaging its conditionals over `K + 1` fresh mixing draws.
    Context,
}

/// Graph handles of an objective and its parts.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveTerms {
    /// `reconstruction - divergence`.
    pub value: Var,
    /// `log p(y_T | z, x_T)` averaged over latent draws.
    pub reconstruction: Var,
    /// Sampled divergence estimate.
    pub divergence: Var,
    /// `reconstruction - KL` with the KL in closed form, where available.
    pub analytic: Option<Var>,
}

impl ObjectiveTerms {
    pub fn read<T: Element>(&self, g: &Graph<T>) -> ObjectiveValue {
        ObjectiveValue {
            value: g.item(self.value).as_f64(),
            reconstruction: g.item(self.reconstruction).as_f64(),
            divergence: g.item(self.divergence).as_f64(),
            analytic: self.analytic.map(|a| g.item(a).as_f64()),
        }
    }
}

/// Objective value in nats with its breakdown.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveValue {
    pub value: f64,
    pub reconstruction: f64,
    pub divergence: f64,
    pub analytic: Option<f64>,
}

impl ObjectiveValue {
    /// Closed-form divergence implied by `analytic`.
    pub fn analytic_kl(&self) -> Option<f64> {
        self.analytic.map(|a| self.reconstruction - a)
    }
}

fn reconstruction<T: Element>(
    g: &mut Graph<T>,
    p: &BoundParams,
    config: &ModelConfig,
    target: &PointSet<T>,
    z: Var,
) -> Result<Var, ModelError> {
    let pred = decode(g, p, config, target.coords(), z)?;
    let y = g.constant(target.values().clone());
    Ok(pred.logpdf(g, y)?)
}

/// Pooled embeddings of the target and the context, sharing the per-point
/// pass when the context is a prefix of the target.
fn pooled_pair<T: Element>(
    g: &mut Graph<T>,
    p: &BoundParams,
    config: &ModelConfig,
    task: &Task<T>,
) -> Result<(Var, Var), ModelError> {
    if task.context.is_empty() {
        return Err(ModelError::EmptyContext);
    }
    let s_t = embed_points(g, p, &task.target)?;
    let pooled_t = pool(g, config, s_t)?;
    let pooled_c = if task.prefix {
        let s_c = g.slice_rows(s_t, 0, task.context.len())?;
        pool(g, config, s_c)?
    } else {
        let s_c = embed_points(g, p, &task.context)?;
        pool(g, config, s_c)?
    };
    Ok((pooled_t, pooled_c))
}

fn mean_of<T: Element>(g: &mut Graph<T>, xs: &[Var]) -> Result<Var, ModelError> {
    let stacked = g.stack(xs)?;
    let s = g.sum(stacked)?;
    Ok(g.scale(s, 1.0 / xs.len() as f64)?)
}

/// Standard ELBO with `q(z | T)` and prior `N(0, I)`. The semi-implicit
/// head falls back to [`sivi_bound_terms`].
pub fn elbo_terms<T: Element>(
    g: &mut Graph<T>,
    p: &BoundParams,
    config: &ModelConfig,
    task: &Task<T>,
    z_samples: usize,
    rng: &mut Rng,
) -> Result<ObjectiveTerms, ModelError> {
    if config.head == Head::Sivi {
        return sivi_bound_terms(g, p, config, task, DEFAULT_SIVI_K, SiviPrior::Standard, rng);
    }
    let s = embed_points(g, p, &task.target)?;
    let pooled = pool(g, config, s)?;
    let q = plain_posterior(g, p, config, pooled)?;
    let mut recons = Vec::with_capacity(z_samples);
    for _ in 0..z_samples.max(1) {
        let z = q.reparam_sample(g, rng)?;
        recons.push(reconstruction(g, p, config, &task.target, z)?);
    }
    let recon = mean_of(g, &recons)?;
    let kl = q.kl_to_standard(g)?;
    let value = g.sub(recon, kl)?;
    Ok(ObjectiveTerms {
        value,
        reconstruction: recon,
        divergence: kl,
        analytic: Some(value),
    })
}

/// NP objective: `z ~ q(z | T)`, value `log p(y_T | z) + log q(z | C) - log q(z | T)`.
/// `analytic` carries `log p(y_T | z) - KL(q(·|T) ‖ q(·|C))`.
pub fn np_objective_terms<T: Element>(
    g: &mut Graph<T>,
    p: &BoundParams,
    config: &ModelConfig,
    task: &Task<T>,
    z_samples: usize,
    rng: &mut Rng,
) -> Result<ObjectiveTerms, ModelError> {
    if config.head != Head::Plain {
        return Err(ModelError::HeadMismatch {
            expected: Head::Plain,
            found: config.head,
        });
    }
    let (pooled_t, pooled_c) = pooled_pair(g, p, config, task)?;
    let q_t = plain_posterior(g, p, config, pooled_t)?;
    let q_c = plain_posterior(g, p, config, pooled_c)?;
    let mut recons = Vec::new();
    let mut divs = Vec::new();
    for _ in 0..z_samples.max(1) {
        let z = q_t.reparam_sample(g, rng)?;
        recons.push(reconstruction(g, p, config, &task.target, z)?);
        let lt = q_t.logpdf(g, z)?;
        let lc = q_c.logpdf(g, z)?;
        divs.push(g.sub(lt, lc)?);
    }
    let recon = mean_of(g, &recons)?;
    let divergence = mean_of(g, &divs)?;
    let value = g.sub(recon, divergence)?;
    let kl = q_t.kl(g, &q_c)?;
    let analytic = g.sub(recon, kl)?;
    Ok(ObjectiveTerms {
        value,
        reconstruction: recon,
        divergence,
        analytic: Some(analytic),
    })
}

/// `log (1/(K+1)) Σ_k q(z | ψ_k, s)` for `z [d_z]` against `K + 1` mixing draws,
/// the first of which is `eps0` when given.
fn mixture_logpdf<T: Element>(
    g: &mut Graph<T>,
    p: &BoundParams,
    config: &ModelConfig,
    pooled: Var,
    z: Var,
    k: usize,
    eps0: Option<&Tensor<T>>,
    rng: &mut Rng,
) -> Result<Var, ModelError> {
    let mut noise = rng.normals::<T>(&[k + 1, config.d_eps]);
    if let Some(e) = eps0 {
        noise.data_mut()[..config.d_eps].copy_from_slice(e.data());
    }
    let (_, q) = sivi_conditionals(g, p, config, pooled, noise)?;
    let zb = g.broadcast_rows(z, k + 1)?;
    let lq = q.logpdf_rows(g, zb)?;
    let lse = g.logsumexp(lq)?;
    Ok(g.offset(lse, -((k + 1) as f64).ln())?)
}

/// Semi-implicit bound: `(ψ_0, z)` drawn jointly given `T`, `ψ_1..ψ_K`
/// independently; value `log p(y | z) + log p(z) - log (1/(K+1)) Σ_k q(z | ψ_k)`.
pub fn sivi_bound_terms<T: Element>(
    g: &mut Graph<T>,
    p: &BoundParams,
    config: &ModelConfig,
    task: &Task<T>,
    k: usize,
    prior: SiviPrior,
    rng: &mut Rng,
) -> Result<ObjectiveTerms, ModelError> {
    if config.head != Head::Sivi {
        return Err(ModelError::HeadMismatch {
            expected: Head::Sivi,
            found: config.head,
        });
    }
    let (pooled_t, pooled_c) = match prior {
        SiviPrior::Context => {
            let (t, c) = pooled_pair(g, p, config, task)?;
            (t, Some(c))
        }
        SiviPrior::Standard => {
            let s = embed_points(g, p, &task.target)?;
            (pool(g, config, s)?, None)
        }
    };
    let eps0 = rng.normals::<T>(&[config.d_eps]);
    let (_, q0) = sivi_conditionals(g, p, config, pooled_t, eps0.clone())?;
    let z = q0.reparam_sample(g, rng)?;
    let recon = reconstruction(g, p, config, &task.target, z)?;
    let log_q = mixture_logpdf(g, p, config, pooled_t, z, k, Some(&eps0), rng)?;
    let log_prior = match pooled_c {
        None => standard_normal_logpdf(g, z)?,
        Some(c) => mixture_logpdf(g, p, config, c, z, k, None, rng)?,
    };
    let divergence = g.sub(log_q, log_prior)?;
    let value = g.sub(recon, divergence)?;
    Ok(ObjectiveTerms {
        value,
        reconstruction: recon,
        divergence,
        analytic: None,
    })
}

pub fn elbo<T: Element>(model: &NeuralProcess<T>, task: &Task<T>, rng: &mut Rng) -> Result<ObjectiveValue, ModelError> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    Ok(elbo_terms(&mut g, &p, &model.config, task, 1, rng)?.read(&g))
}

pub fn np_objective<T: Element>(
    model: &NeuralProcess<T>,
    task: &Task<T>,
    rng: &mut Rng,
) -> Result<ObjectiveValue, ModelError> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    Ok(np_objective_terms(&mut g, &p, &model.config, task, 1, rng)?.read(&g))
}

pub fn sivi_bound<T: Element>(
    model: &NeuralProcess<T>,
    task: &Task<T>,
    k: usize,
    prior: SiviPrior,
    rng: &mut Rng,
) -> Result<ObjectiveValue, ModelError> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    Ok(sivi_bound_terms(&mut g, &p, &model.config, task, k, prior, rng)?.read(&g))
}

/// Importance-weighted predictive log-likelihood per target point,
/// `(1/|T|) log (1/K) Σ_k p(y_T | x_T, z_k)` with `z_k` from the posterior
/// given `context`. Context and target must be disjoint.
pub fn iwae_loglik<T: Element>(
    model: &NeuralProcess<T>,
    context: &PointSet<T>,
    target: &PointSet<T>,
    k: usize,
    rng: &mut Rng,
) -> Result<f64, ModelError> {
    let shared = context.overlap(target);
    if shared > 0 {
        return Err(ModelError::Overlap(shared));
    }
    if k == 0 {
        return Err(ModelError::NoSamples);
    }
    if target.is_empty() {
        return Err(ModelError::InvalidPoints("target set is empty".into()));
    }
    let y = target.values().to_f64_vec();
    let latents = model.sample_latents(context, k, rng)?;
    let mut logs = Vec::with_capacity(k);
    for z in &latents {
        let pred: DiagGaussian = model.predict(target.coords(), z)?;
        logs.push(pred.logpdf(&y)?);
    }
    Ok((logsumexp(&logs) - (k as f64).ln()) / target.len() as f64)
}

/// Graph form of [`iwae_loglik`] with reparameterized draws, for gradient
/// checks. Draws the same random numbers as the value form.
pub fn iwae_terms<T: Element>(
    g: &mut Graph<T>,
    p: &BoundParams,
    config: &ModelConfig,
    context: &PointSet<T>,
    target: &PointSet<T>,
    k: usize,
    rng: &mut Rng,
) -> Result<Var, ModelError> {
    let shared = context.overlap(target);
    if shared > 0 {
        return Err(ModelError::Overlap(shared));
    }
    if k == 0 {
        return Err(ModelError::NoSamples);
    }
    let s = embed_points(g, p, context)?;
    let pooled = pool(g, config, s)?;
    let posteriors: Vec<GaussianVar> = match config.head {
        Head::Plain => vec![plain_posterior(g, p, config, pooled)?; k],
        Head::Sivi => {
            let noise = rng.normals::<T>(&[k, config.d_eps]);
            (0..k)
                .map(|i| {
                    let row = Tensor::vector(noise.row(i).to_vec());
                    Ok(sivi_conditionals(g, p, config, pooled, row)?.1)
                })
                .collect::<Result<_, ModelError>>()?
        }
    };
    let mut logs = Vec::with_capacity(k);
    for q in posteriors {
        let z = q.reparam_sample(g, rng)?;
        logs.push(reconstruction(g, p, config, target, z)?);
    }
    let stacked = g.stack(&logs)?;
    let lse = g.logsumexp(stacked)?;
    let avg = g.offset(lse, -(k as f64).ln())?;
    Ok(g.scale(avg, 1.0 / target.len() as f64)?)
}

/// Plain-head `q(z | T)` and `q(z | C)` as values.
pub fn task_posteriors<T: Element>(model: &NeuralProcess<T>, task: &Task<T>) -> Result<TaskPosteriors, ModelError> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let (pt, pc) = pooled_pair(&mut g, &p, &model.config, task)?;
    let qt = plain_posterior(&mut g, &p, &model.config, pt)?;
    let qc = plain_posterior(&mut g, &p, &model.config, pc)?;
    Ok(TaskPosteriors {
        target: qt.to_diag(&g)?,
        context: qc.to_diag(&g)?,
    })
}

/// Plain-head posteriors given the target and the context of a task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskPosteriors {
    pub target: DiagGaussian,
    pub context: DiagGaussian,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ObsVariance};
    use crate::tensor::{grad_check, PoolMode, TensorError};

    const GRID: GridSpec = GridSpec { height: 6, width: 6 };

    fn config(head: Head) -> ModelConfig {
        ModelConfig {
            d_h: 6,
            d_s: 5,
            d_z: 4,
            d_psi: 3,
            d_eps: 3,
            head,
            ..ModelConfig::default()
        }
    }

    fn image(seed: u64) -> Vec<f32> {
        let mut rng = Rng::seed(seed);
        (0..GRID.pixels()).map(|_| rng.uniform() as f32).collect()
    }

    fn task(seed: u64, n: usize, m: usize) -> Task<f64> {
        let mut rng = Rng::seed(seed);
        let idx = rng.choose_distinct(GRID.pixels(), m);
        Task::nested(PointSet::from_pixels(GRID, &image(seed), &idx).unwrap(), n).unwrap()
    }

    #[test]
    fn elbo_with_prior_posterior_is_reconstruction() {
        let mut rng = Rng::seed(1);
        let mut model = NeuralProcess::<f64>::init(config(Head::Plain), &mut rng).unwrap();
        let last = model.params.rho.last_mut().unwrap();
        last.weight = Tensor::zeros(last.weight.shape());
        let d = model.config.d_z;
        // mu = 0, sigma = 0.9 + 0.1·sigmoid(40) = 1.
        last.bias = Tensor::vector((0..2 * d).map(|i| if i < d { 0.0 } else { 40.0 }).collect());
        let v = elbo(&model, &task(2, 4, 10), &mut rng).unwrap();
        assert!(v.divergence.abs() < 1e-12, "{v:?}");
        assert!((v.value - v.reconstruction).abs() < 1e-12);
    }

    #[test]
    fn np_objective_with_equal_sets_has_zero_kl() {
        let mut rng = Rng::seed(3);
        let model = NeuralProcess::<f64>::init(config(Head::Plain), &mut rng).unwrap();
        let v = np_objective(&model, &task(4, 12, 12), &mut rng).unwrap();
        assert_eq!(v.analytic_kl().unwrap().abs(), 0.0);
        assert!(v.value.is_finite());
    }

    #[test]
    fn np_objective_needs_a_context() {
        let mut rng = Rng::seed(3);
        let model = NeuralProcess::<f64>::init(config(Head::Plain), &mut rng).unwrap();
        assert_eq!(
            np_objective(&model, &task(4, 0, 12), &mut rng),
            Err(ModelError::EmptyContext)
        );
    }

    #[test]
    fn non_prefix_context_matches_prefix_path() {
        let mut rng = Rng::seed(5);
        let model = NeuralProcess::<f64>::init(config(Head::Plain), &mut rng).unwrap();
        let t = task(6, 5, 12);
        // Same context points, listed in another order, force the separate path.
        let mut order: Vec<usize> = (0..5).collect();
        order.reverse();
        let shuffled = Task::new(t.context().select(&order), t.target().clone()).unwrap();
        assert!(t.prefix && !shuffled.prefix);
        let a = np_objective(&model, &t, &mut Rng::seed(9)).unwrap();
        let b = np_objective(&model, &shuffled, &mut Rng::seed(9)).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
    }

    #[test]
    fn permuting_context_and_target_keeps_np_value() {
        let mut rng = Rng::seed(7);
        for pooling in [PoolMode::Max, PoolMode::Mean] {
            let cfg = ModelConfig {
                pooling,
                ..config(Head::Plain)
            };
            let model = NeuralProcess::<f64>::init(cfg, &mut rng).unwrap();
            let t = task(8, 4, 10);
            let order = [3, 1, 0, 2, 9, 4, 8, 5, 7, 6];
            let permuted = Task::nested(t.target().select(&order), 4).unwrap();
            let a = np_objective(&model, &t, &mut Rng::seed(11)).unwrap();
            let b = np_objective(&model, &permuted, &mut Rng::seed(11)).unwrap();
            assert!((a.value - b.value).abs() < 1e-9, "{a:?} {b:?}");
        }
    }

    #[test]
    fn sivi_k0_uses_only_the_joint_draw() {
        let mut rng = Rng::seed(12);
        let model = NeuralProcess::<f64>::init(config(Head::Sivi), &mut rng).unwrap();
        let t = task(13, 3, 9);
        let v = sivi_bound(&model, &t, 0, SiviPrior::Standard, &mut Rng::seed(14)).unwrap();

        // Replay the same draws by hand.
        let mut r = Rng::seed(14);
        let cfg = &model.config;
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let s = embed_points(&mut g, &p, t.target()).unwrap();
        let pooled = pool(&mut g, cfg, s).unwrap();
        let eps0 = r.normals::<f64>(&[cfg.d_eps]);
        let (_, q0) = sivi_conditionals(&mut g, &p, cfg, pooled, eps0).unwrap();
        let z = q0.reparam_sample(&mut g, &mut r).unwrap();
        let recon = reconstruction(&mut g, &p, cfg, t.target(), z).unwrap();
        let lq = q0.logpdf(&mut g, z).unwrap();
        let lp = standard_normal_logpdf(&mut g, z).unwrap();
        let expected = g.item(recon) + g.item(lp) - g.item(lq);
        assert!((v.value - expected).abs() < 1e-10, "{} vs {expected}", v.value);
    }

    #[test]
    fn sivi_with_psi_ignored_matches_sampled_elbo_for_every_k() {
        let mut rng = Rng::seed(15);
        let mut model = NeuralProcess::<f64>::init(config(Head::Sivi), &mut rng).unwrap();
        // Zero the eta input rows that read ψ.
        let d_s = model.config.d_s;
        let first = &mut model.params.eta[0];
        let cols = first.weight.cols();
        for v in &mut first.weight.data_mut()[d_s * cols..] {
            *v = 0.0;
        }
        let t = task(16, 3, 9);
        let reference = sivi_bound(&model, &t, 0, SiviPrior::Standard, &mut Rng::seed(17)).unwrap();
        for k in [1, 4, 16] {
            let v = sivi_bound(&model, &t, k, SiviPrior::Standard, &mut Rng::seed(17)).unwrap();
            assert!((v.value - reference.value).abs() < 1e-10, "K={k}");
        }
    }

    #[test]
    fn head_mismatch() {
        let mut rng = Rng::seed(18);
        let plain = NeuralProcess::<f64>::init(config(Head::Plain), &mut rng).unwrap();
        let sivi = NeuralProcess::<f64>::init(config(Head::Sivi), &mut rng).unwrap();
        let t = task(19, 3, 8);
        assert!(matches!(
            sivi_bound(&plain, &t, 2, SiviPrior::Standard, &mut rng),
            Err(ModelError::HeadMismatch { .. })
        ));
        assert!(matches!(np_objective(&sivi, &t, &mut rng), Err(ModelError::HeadMismatch { .. })));
        // elbo scores a semi-implicit model with its own bound.
        assert!(elbo(&sivi, &t, &mut rng).unwrap().analytic.is_none());
    }

    #[test]
    fn iwae_single_draw_and_overlap() {
        let mut rng = Rng::seed(20);
        let model = NeuralProcess::<f64>::init(config(Head::Plain), &mut rng).unwrap();
        let img = image(21);
        let c = PointSet::from_pixels(GRID, &img, &[0, 1, 2]).unwrap();
        let t = PointSet::from_pixels(GRID, &img, &[5, 6, 7, 8]).unwrap();
        let v = iwae_loglik(&model, &c, &t, 1, &mut Rng::seed(22)).unwrap();
        let z = model.sample_latents(&c, 1, &mut Rng::seed(22)).unwrap();
        let lp = model.predict(t.coords(), &z[0]).unwrap().logpdf(&t.values().to_f64_vec()).unwrap();
        assert!((v - lp / 4.0).abs() < 1e-12);

        let overlapping = PointSet::from_pixels(GRID, &img, &[2, 3]).unwrap();
        assert_eq!(
            iwae_loglik(&model, &c, &overlapping, 5, &mut rng),
            Err(ModelError::Overlap(1))
        );
    }

    fn check_params<F>(head: Head, obs: ObsVariance, f: F)
    where
        F: Fn(&mut Graph<f64>, &BoundParams, &ModelConfig, &Task<f64>, &mut Rng) -> Result<ObjectiveTerms, ModelError>,
    {
        let cfg = ModelConfig {
            obs_variance: obs,
            ..config(head)
        };
        let mut rng = Rng::seed(30);
        let params = crate::model::ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
        let t = task(31, 3, 7);
        let theta: Vec<Tensor<f64>> = params.tensors().into_iter().cloned().collect();
        let report = grad_check(
            |g, vars| {
                let p = BoundParams::from_vars(&params, vars);
                let terms = f(g, &p, &cfg, &t, &mut Rng::seed(32)).map_err(|e| match e {
                    ModelError::Tensor(t) => t,
                    other => panic!("{other}"),
                })?;
                Ok::<Var, TensorError>(terms.value)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert!(report.checked > report.excluded);
    }

    #[test]
    fn iwae_graph_form_matches_value_form() {
        for head in [Head::Plain, Head::Sivi] {
            let mut rng = Rng::seed(23);
            let model = NeuralProcess::<f64>::init(config(head), &mut rng).unwrap();
            let img = image(24);
            let c = PointSet::from_pixels(GRID, &img, &[0, 9, 13]).unwrap();
            let t = PointSet::from_pixels(GRID, &img, &[5, 6, 7, 30]).unwrap();
            let v = iwae_loglik(&model, &c, &t, 6, &mut Rng::seed(25)).unwrap();
            let mut g = Graph::new();
            let p = model.params.bind(&mut g);
            let w = iwae_terms(&mut g, &p, &model.config, &c, &t, 6, &mut Rng::seed(25)).unwrap();
            assert!((v - g.item(w)).abs() < 1e-10, "{head:?}: {v} vs {}", g.item(w));
        }
    }

    #[test]
    fn iwae_gradients() {
        for head in [Head::Plain, Head::Sivi] {
            check_params(head, ObsVariance::Learned, |g, p, c, t, r| {
                let n = t.target().len();
                let ctx = t.target().select(&[0, 1]);
                let tgt = t.target().select(&(2..n).collect::<Vec<_>>());
                let value = iwae_terms(g, p, c, &ctx, &tgt, 4, r)?;
                Ok(ObjectiveTerms {
                    value,
                    reconstruction: value,
                    divergence: value,
                    analytic: None,
                })
            });
        }
    }

    #[test]
    fn elbo_gradients() {
        check_params(Head::Plain, ObsVariance::Learned, |g, p, c, t, r| elbo_terms(g, p, c, t, 1, r));
    }

    #[test]
    fn np_objective_gradients() {
        check_params(Head::Plain, ObsVariance::Fixed, |g, p, c, t, r| {
            np_objective_terms(g, p, c, t, 2, r)
        });
    }

    #[test]
    fn sivi_gradients() {
        for prior in [SiviPrior::Standard, SiviPrior::Context] {
            check_params(Head::Sivi, ObsVariance::Learned, |g, p, c, t, r| {
                sivi_bound_terms(g, p, c, t, 3, prior, r)
            });
        }
    }
}
