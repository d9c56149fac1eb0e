//! Deterministic random streams keyed by `(seed, name)`.
//!
//! Every consumer (a parameter initializer, a dropout site, a data sampler)
//! derives its own ChaCha8 stream from the run seed and a stable string key,
//! so results do not depend on the order in which streams are created.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Scalar, Tensor};

pub const RNG_ALGORITHM: &str = "chacha8/sha256-key";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed }
    }

    pub fn algorithm(&self) -> &'static str {
        RNG_ALGORITHM
    }

    pub fn stream(&self, key: &str) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(key.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, the fans read from a 2-D shape.
    pub fn xavier_uniform<T: Scalar>(&self, key: &str, shape: &[usize]) -> Tensor<T> {
        let (fan_in, fan_out) = match shape {
            [n] => (*n, *n),
            [r, c] => (*r, *c),
            _ => panic!("xavier init expects rank 1 or 2, got {shape:?}"),
        };
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(key, shape, -bound, bound)
    }

    pub fn uniform<T: Scalar>(&self, key: &str, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        let mut rng = self.stream(key);
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| T::from_f64_lossy(rng.random_range(lo..hi)))
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn normal<T: Scalar>(&self, key: &str, shape: &[usize], std: f64) -> Tensor<T> {
        let mut rng = self.stream(key);
        let dist = Normal::new(0.0, std).expect("finite positive std");
        let len = shape.iter().product();
        let data = (0..len)
            .map(|_| T::from_f64_lossy(dist.sample(&mut rng)))
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Inverted-dropout multipliers: `0` with probability `rate`, else `1 / (1 - rate)`.
    pub fn dropout_mask<T: Scalar>(&self, key: &str, len: usize, rate: f64) -> Vec<T> {
        let mut rng = self.stream(key);
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        (0..len)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_key_is_bit_identical() {
        let a: Tensor<f32> = RngState::new(7).xavier_uniform("layer0.wq", &[8, 8]);
        let b: Tensor<f32> = RngState::new(7).xavier_uniform("layer0.wq", &[8, 8]);
        assert_eq!(a, b);
        let c: Tensor<f32> = RngState::new(7).xavier_uniform("layer0.wk", &[8, 8]);
        assert_ne!(a, c);
        let d: Tensor<f32> = RngState::new(8).xavier_uniform("layer0.wq", &[8, 8]);
        assert_ne!(a, d);
    }

    #[test]
    fn xavier_bound_respected() {
        let t: Tensor<f64> = RngState::new(1).xavier_uniform("w", &[10, 14]);
        let bound = (6.0f64 / 24.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn dropout_mask_rate() {
        let m: Vec<f64> = RngState::new(3).dropout_mask("site", 10_000, 0.25);
        let dropped = m.iter().filter(|&&v| v == 0.0).count();
        assert!((2200..2800).contains(&dropped), "dropped {dropped}");
        assert!(m.iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-12));
    }
}
