//! Seeded randomness.
//!
//! A [`Seed`] is split into independent child seeds by hashing it together
//! with integer keys (SplitMix64 finalizer), and each seed drives a ChaCha8
//! stream. Both steps are pure integer arithmetic, so streams are identical
//! across runs and platforms, and a child's stream does not depend on the
//! order in which siblings are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Seed {
    /// Child seed keyed by `keys`. Different key paths give unrelated streams.
    pub fn derive(self, keys: &[u64]) -> Seed {
        let mut h = splitmix64(self.0);
        for &k in keys {
            h = splitmix64(h ^ splitmix64(k.wrapping_add(0x632B_E59B_D9B4_E019)));
        }
        Seed(h)
    }

    /// Child seed keyed by a string label, used to separate pipeline stages.
    pub fn derive_str(self, label: &str) -> Seed {
        let keys: Vec<u64> = label.bytes().map(u64::from).collect();
        self.derive(&keys)
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

impl From<u64> for Seed {
    fn from(v: u64) -> Self {
        Seed(v)
    }
}

/// I.i.d. standard normal samples filling a tensor of the given extents.
pub fn gaussian_noise(dims: &[usize], seed: Seed) -> Result<Tensor> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::invalid(format!(
            "gaussian_noise needs non-empty positive dims, got {dims:?}"
        )));
    }
    let n: usize = dims.iter().product();
    let mut rng = seed.rng();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(dims.to_vec(), data)
}
