use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Tensor;

/// Seeded, platform-independent random stream.
///
/// Independent sub-streams are derived with [`Rng::stream`] so that enabling
/// or disabling one consumer never shifts the draws seen by another.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Child stream keyed by `(seed, key)`; deterministic and independent of
    /// how many draws the parent has made.
    pub fn stream(&self, key: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(key);
        Rng {
            seed: self.seed,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }
}

pub fn seeded_rng(seed: u64) -> Rng {
    Rng::new(seed)
}

/// Standard-normal tensor of the given shape.
pub fn gaussian_draw(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let mut t = Tensor::zeros(shape);
    for (slot, v) in t.values_mut().iter_mut().zip(rng.normals(n)) {
        *slot = v;
    }
    t
}

/// Uniform `[0, 1)` tensor of the given shape.
pub fn uniform_draw(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for slot in t.values_mut() {
        *slot = rng.uniform();
    }
    t
}
