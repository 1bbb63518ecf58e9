//! Name-keyed parameter initialization.
//!
//! Each tensor draws from its own stream seeded by `(seed, name)`, so adding
//! or removing parameters never changes the values of the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name))
}

pub(crate) struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub seed: u64,
}

impl<T: Scalar> Init<'_, T> {
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, trainable: bool) {
        let t = Tensor::randn(shape, std, &mut rng_for(self.seed, name));
        self.store.insert(name, t, trainable);
    }

    /// `N(0, 1/fan_in)` weights, the scale used for linear maps feeding norms.
    pub fn fan_in(&mut self, name: &str, shape: &[usize], fan_in: usize, trainable: bool) {
        self.normal(name, shape, (1.0 / fan_in as f64).sqrt(), trainable);
    }

    /// `N(0, 2/fan_in)` weights for layers followed by a rectifying activation.
    pub fn he(&mut self, name: &str, shape: &[usize], fan_in: usize, trainable: bool) {
        self.normal(name, shape, (2.0 / fan_in as f64).sqrt(), trainable);
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize], trainable: bool) {
        self.store.insert(name, Tensor::zeros(shape), trainable);
    }

    pub fn ones(&mut self, name: &str, shape: &[usize], trainable: bool) {
        self.store.insert(name, Tensor::full(shape, T::one()), trainable);
    }
}
