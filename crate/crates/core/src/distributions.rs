//! Diagonal Gaussians, both as plain values and as differentiable graph nodes.
//!
//! All densities and entropies are in nats.

use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::{Element, Graph, Tensor, TensorError, Var};

/// `½ ln 2π`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistributionError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("standard deviation {value} at index {index} is not strictly positive")]
    NonPositiveSigma { index: usize, value: f64 },
}

/// `N(mu, diag(sigma²))`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self, DistributionError> {
        if mu.len() != sigma.len() {
            return Err(DistributionError::DimensionMismatch(mu.len(), sigma.len()));
        }
        if let Some((index, &value)) = sigma.iter().enumerate().find(|(_, &s)| !(s > 0.0)) {
            return Err(DistributionError::NonPositiveSigma { index, value });
        }
        Ok(DiagGaussian { mu, sigma })
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mu: vec![0.0; dim],
            sigma: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn logpdf(&self, v: &[f64]) -> Result<f64, DistributionError> {
        if v.len() != self.dim() {
            return Err(DistributionError::DimensionMismatch(self.dim(), v.len()));
        }
        Ok(self
            .mu
            .iter()
            .zip(&self.sigma)
            .zip(v)
            .map(|((&m, &s), &x)| {
                let t = (x - m) / s;
                -s.ln() - HALF_LN_2PI - 0.5 * t * t
            })
            .sum())
    }

    pub fn entropy(&self) -> f64 {
        self.dim() as f64 * (HALF_LN_2PI + 0.5) + self.sigma.iter().map(|s| s.ln()).sum::<f64>()
    }

    /// `KL(self ‖ p)`.
    pub fn kl(&self, p: &DiagGaussian) -> Result<f64, DistributionError> {
        if p.dim() != self.dim() {
            return Err(DistributionError::DimensionMismatch(self.dim(), p.dim()));
        }
        Ok((0..self.dim())
            .map(|i| {
                let (mq, sq, mp, sp) = (self.mu[i], self.sigma[i], p.mu[i], p.sigma[i]);
                (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5
            })
            .sum())
    }

    /// `mu + sigma ⊙ eps`.
    pub fn sample_with(&self, eps: &[f64]) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.sigma)
            .zip(eps)
            .map(|((&m, &s), &e)| m + s * e)
            .collect()
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let eps: Vec<f64> = (0..self.dim()).map(|_| rng.normal()).collect();
        self.sample_with(&eps)
    }
}

/// Diagonal Gaussian whose parameters live in a graph. `mu` and `sigma`
/// share a shape; densities sum over every element.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianVar {
    pub mu: Var,
    pub sigma: Var,
}

impl GaussianVar {
    pub fn new(mu: Var, sigma: Var) -> Self {
        GaussianVar { mu, sigma }
    }

    /// Reads the current values out as a [`DiagGaussian`] (flattened).
    pub fn to_diag<T: Element>(&self, g: &Graph<T>) -> Result<DiagGaussian, DistributionError> {
        DiagGaussian::new(g.value(self.mu).to_f64_vec(), g.value(self.sigma).to_f64_vec())
    }

    fn standardized_sq<T: Element>(&self, g: &mut Graph<T>, v: Var) -> Result<Var, TensorError> {
        let diff = g.sub(v, self.mu)?;
        let t = g.div(diff, self.sigma)?;
        g.square(t)
    }

    /// `log N(v; mu, sigma²)` summed over all elements.
    pub fn logpdf<T: Element>(&self, g: &mut Graph<T>, v: Var) -> Result<Var, TensorError> {
        let n = g.value(self.mu).numel() as f64;
        let sq = self.standardized_sq(g, v)?;
        let sq_sum = g.sum(sq)?;
        let log_sigma = g.log(self.sigma)?;
        let log_sigma_sum = g.sum(log_sigma)?;
        let half = g.scale(sq_sum, -0.5)?;
        let out = g.sub(half, log_sigma_sum)?;
        g.offset(out, -n * HALF_LN_2PI)
    }

    /// Per-row log-density of a `[k, d]` family evaluated at `[k, d]` points.
    pub fn logpdf_rows<T: Element>(&self, g: &mut Graph<T>, v: Var) -> Result<Var, TensorError> {
        let d = g.value(self.mu).cols() as f64;
        let sq = self.standardized_sq(g, v)?;
        let half = g.scale(sq, -0.5)?;
        let log_sigma = g.log(self.sigma)?;
        let terms = g.sub(half, log_sigma)?;
        let rows = g.row_sums(terms)?;
        g.offset(rows, -d * HALF_LN_2PI)
    }

    pub fn entropy<T: Element>(&self, g: &mut Graph<T>) -> Result<Var, TensorError> {
        let n = g.value(self.sigma).numel() as f64;
        let log_sigma = g.log(self.sigma)?;
        let s = g.sum(log_sigma)?;
        g.offset(s, n * (HALF_LN_2PI + 0.5))
    }

    /// Closed-form `KL(self ‖ p)`.
    pub fn kl<T: Element>(&self, g: &mut Graph<T>, p: &GaussianVar) -> Result<Var, TensorError> {
        let n = g.value(self.mu).numel() as f64;
        let log_sp = g.log(p.sigma)?;
        let log_sq = g.log(self.sigma)?;
        let log_ratio = g.sub(log_sp, log_sq)?;
        let var_q = g.square(self.sigma)?;
        let dm = g.sub(self.mu, p.mu)?;
        let dm2 = g.square(dm)?;
        let num = g.add(var_q, dm2)?;
        let var_p = g.square(p.sigma)?;
        let frac = g.div(num, var_p)?;
        let half = g.scale(frac, 0.5)?;
        let terms = g.add(log_ratio, half)?;
        let s = g.sum(terms)?;
        g.offset(s, -0.5 * n)
    }

    /// Closed-form `KL(self ‖ N(0, I))`.
    pub fn kl_to_standard<T: Element>(&self, g: &mut Graph<T>) -> Result<Var, TensorError> {
        let n = g.value(self.mu).numel() as f64;
        let var_q = g.square(self.sigma)?;
        let mu2 = g.square(self.mu)?;
        let num = g.add(var_q, mu2)?;
        let half = g.scale(num, 0.5)?;
        let log_sq = g.log(self.sigma)?;
        let terms = g.sub(half, log_sq)?;
        let s = g.sum(terms)?;
        g.offset(s, -0.5 * n)
    }

    /// `mu + sigma ⊙ eps` for caller-supplied noise.
    pub fn reparam_with_noise<T: Element>(&self, g: &mut Graph<T>, eps: Tensor<T>) -> Result<Var, TensorError> {
        let e = g.constant(eps);
        let scaled = g.mul(self.sigma, e)?;
        g.add(self.mu, scaled)
    }

    pub fn reparam_sample<T: Element>(&self, g: &mut Graph<T>, rng: &mut Rng) -> Result<Var, TensorError> {
        let eps = rng.normals(g.shape(self.mu));
        self.reparam_with_noise(g, eps)
    }
}

/// `log N(z; 0, I)` summed over all elements.
pub fn standard_normal_logpdf<T: Element>(g: &mut Graph<T>, z: Var) -> Result<Var, TensorError> {
    let n = g.value(z).numel() as f64;
    let sq = g.square(z)?;
    let s = g.sum(sq)?;
    let half = g.scale(s, -0.5)?;
    g.offset(half, -n * HALF_LN_2PI)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    #[test]
    fn logpdf_examples() {
        close(DiagGaussian::standard(1).logpdf(&[0.0]).unwrap(), -0.918939, 1e-6);
        close(DiagGaussian::standard(5).logpdf(&[0.0; 5]).unwrap(), 5.0 * -0.918939, 1e-5);
        let g = DiagGaussian::new(vec![0.7], vec![0.2]).unwrap();
        close(g.logpdf(&[0.7]).unwrap(), -(0.2f64.ln()) - HALF_LN_2PI, 1e-12);
        close(g.logpdf(&[0.7]).unwrap(), 0.690499, 1e-6);
        assert!(g.logpdf(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn entropy_examples() {
        close(DiagGaussian::standard(1).entropy(), 1.418939, 1e-6);
        close(DiagGaussian::standard(512).entropy(), 726.4968, 1e-3);
        let g = DiagGaussian::new(vec![0.0; 3], vec![0.4, 1.5, 0.9]).unwrap();
        let doubled = DiagGaussian::new(vec![0.0; 3], vec![0.8, 3.0, 1.8]).unwrap();
        close(doubled.entropy() - g.entropy(), 3.0 * std::f64::consts::LN_2, 1e-12);
    }

    #[test]
    fn kl_examples() {
        let q = DiagGaussian::new(vec![0.3, -1.0], vec![0.5, 2.0]).unwrap();
        assert_eq!(q.kl(&q).unwrap(), 0.0);
        let n1 = DiagGaussian::new(vec![1.0], vec![1.0]).unwrap();
        close(n1.kl(&DiagGaussian::standard(1)).unwrap(), 0.5, 1e-15);
        assert!(q.kl(&DiagGaussian::standard(3)).is_err());
    }

    #[test]
    fn invalid_sigma_rejected() {
        assert!(DiagGaussian::new(vec![0.0], vec![0.0]).is_err());
        assert!(DiagGaussian::new(vec![0.0, 1.0], vec![1.0]).is_err());
    }

    #[test]
    fn graph_forms_match_values() {
        let q = DiagGaussian::new(vec![0.3, -1.0, 0.2], vec![0.5, 2.0, 0.9]).unwrap();
        let p = DiagGaussian::new(vec![0.0, 0.5, -0.1], vec![1.0, 1.5, 0.3]).unwrap();
        let v = [0.1, 0.2, 0.3];
        let mut g = Graph::<f64>::new();
        let gq = GaussianVar::new(
            g.param(Tensor::vector(q.mu().to_vec())),
            g.param(Tensor::vector(q.sigma().to_vec())),
        );
        let gp = GaussianVar::new(
            g.param(Tensor::vector(p.mu().to_vec())),
            g.param(Tensor::vector(p.sigma().to_vec())),
        );
        let x = g.constant(Tensor::vector(v.to_vec()));
        let lp = gq.logpdf(&mut g, x).unwrap();
        close(g.item(lp), q.logpdf(&v).unwrap(), 1e-12);
        let kl = gq.kl(&mut g, &gp).unwrap();
        close(g.item(kl), q.kl(&p).unwrap(), 1e-12);
        let kls = gq.kl_to_standard(&mut g).unwrap();
        close(g.item(kls), q.kl(&DiagGaussian::standard(3)).unwrap(), 1e-12);
        let h = gq.entropy(&mut g).unwrap();
        close(g.item(h), q.entropy(), 1e-12);
        let lz = standard_normal_logpdf(&mut g, x).unwrap();
        close(g.item(lz), DiagGaussian::standard(3).logpdf(&v).unwrap(), 1e-12);
    }

    #[test]
    fn reparam_examples() {
        let mut g = Graph::<f64>::new();
        let q = GaussianVar::new(
            g.param(Tensor::vector(vec![0.5, -2.0])),
            g.param(Tensor::vector(vec![0.3, 1.7])),
        );
        let z0 = q.reparam_with_noise(&mut g, Tensor::zeros(&[2])).unwrap();
        assert_eq!(g.value(z0).data(), &[0.5, -2.0]);

        let eps = vec![0.8, -1.3];
        let z = q.reparam_with_noise(&mut g, Tensor::vector(eps.clone())).unwrap();
        let s = g.sum(z).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(q.mu).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.get(q.sigma).unwrap().data(), eps.as_slice());

        let mut draws = Vec::new();
        for _ in 0..2 {
            let mut rng = Rng::seed(11);
            let zs = q.reparam_sample(&mut g, &mut rng).unwrap();
            draws.push(g.value(zs).clone());
        }
        assert_eq!(draws[0], draws[1]);
    }
}
