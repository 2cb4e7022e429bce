//! Deterministic randomness. Same seed + same call sequence gives a
//! bitwise-identical stream; parallel code must split seeds, never share
//! one generator.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Counter-based pseudorandom generator with an explicit 64-bit seed.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derive an independent child generator; advances this one.
    pub fn split(&mut self) -> Rng {
        Rng::from_seed(self.inner.gen::<u64>())
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..hi)
    }

    pub fn gen_index(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Fisher-Yates shuffle of 0..n, reproducible under seed.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.inner.gen_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }

    /// i.i.d. N(0, std²) tensor.
    pub fn gaussian(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        if std < 0.0 {
            return Err(Error::InvalidArgument(format!("negative std {std}")));
        }
        Ok(Tensor::from_fn(shape, |_| std * self.standard_normal()))
    }

    /// i.i.d. uniform tensor on [lo, hi).
    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.uniform(lo, hi))
    }
}
