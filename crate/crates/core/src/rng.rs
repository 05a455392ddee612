//! Counter-based seeded randomness.
//!
//! Each [`Rng`] is a ChaCha8 keystream selected by `(seed, counter)`: the seed
//! is expanded to a 256-bit key with `rand_core`'s `seed_from_u64` and the
//! counter picks the ChaCha stream. Normal draws use `rand_distr`'s ziggurat
//! sampler, whose only transcendental calls go through `libm`, so sequences
//! are reproducible across platforms.

use alloc::vec::Vec;

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    counter: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64, counter: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(counter);
        Rng { seed, counter, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// A fresh generator on another stream of the same seed.
    pub fn fork(&self, counter: u64) -> Rng {
        Rng::new(self.seed, counter)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }
}

/// I.i.d. standard normal entries.
pub fn gaussian(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, rng.normals(n)).expect("shape product matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_tensor() {
        let a = gaussian(&mut Rng::new(42, 0), &[3, 4]);
        let b = gaussian(&mut Rng::new(42, 0), &[3, 4]);
        assert_eq!(a, b);
    }

    #[test]
    fn counters_differ() {
        let a = gaussian(&mut Rng::new(42, 0), &[8]);
        let b = gaussian(&mut Rng::new(42, 1), &[8]);
        assert_ne!(a, b);
        assert_eq!(Rng::new(42, 0).fork(1).next_u64(), Rng::new(42, 1).next_u64());
    }

    #[test]
    fn golden_sequence() {
        let mut r = Rng::new(7, 3);
        let u: Vec<u64> = (0..3).map(|_| r.next_u64()).collect();
        assert_eq!(u, GOLDEN_U64);
        let mut r = Rng::new(7, 3);
        let z: Vec<u64> = (0..3).map(|_| r.normal().to_bits()).collect();
        assert_eq!(z, GOLDEN_NORMAL_BITS);
    }

    const GOLDEN_U64: [u64; 3] = [3348856302973006449, 1713045363199913294, 18059454136845528042];
    const GOLDEN_NORMAL_BITS: [u64; 3] = [13830751060072627705, 13833028830388433948, 4604329518672806073];

    #[test]
    fn moments_at_1e5() {
        let t = gaussian(&mut Rng::new(2024, 0), &[100_000]);
        let mean = t.mean();
        let var = t.data().iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / t.len() as f64;
        assert!(mean.abs() <= 0.02, "mean {mean}");
        assert!((var - 1.0).abs() <= 0.03, "var {var}");
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = Rng::new(1, 0);
        for _ in 0..1000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
            assert!(r.below(5) < 5);
        }
    }
}
