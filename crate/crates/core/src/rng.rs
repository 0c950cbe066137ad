//! Seeded random streams.
//!
//! Backed by ChaCha8, a counter-based generator: `(seed, stream)` names an
//! independent sequence, which is how per-worker streams are derived.
//! Standard-normal variates use the Box–Muller transform, consuming two
//! uniforms per pair and caching the second variate.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn seed(seed: u64) -> Self {
        Self::stream(seed, 0)
    }

    /// Independent stream `stream` under `seed`.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { inner, spare: None }
    }

    /// Child generator seeded from this one.
    pub fn fork(&mut self) -> Rng {
        Rng::seed(self.inner.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform integer on `lo..hi`. Panics on an empty range.
    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.gen_range(lo..hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.range(0, n)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normals<T: Element>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(self.normal())).collect();
        Tensor::new(shape.to_vec(), data).expect("shape product")
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.range(0, i + 1);
            xs.swap(i, j);
        }
    }

    /// `k` distinct values from `0..n` in random order (partial Fisher–Yates).
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} distinct values from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = self.range(i, n);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::seed(7);
        let mut b = Rng::seed(7);
        for _ in 0..10 {
            assert_eq!(a.normal(), b.normal());
        }
        let mut c = Rng::stream(7, 1);
        assert_ne!(Rng::seed(7).next_u64(), c.next_u64());
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng::seed(1);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt());
        // SE of the sample variance for a normal is sqrt(2/(n-1)).
        assert!((var - 1.0).abs() < 3.0 * (2.0 / (n - 1) as f64).sqrt());
    }

    #[test]
    fn distinct_draws() {
        let mut rng = Rng::seed(3);
        let mut xs = rng.choose_distinct(50, 50);
        xs.sort_unstable();
        assert_eq!(xs, (0..50).collect::<Vec<_>>());
    }
}
