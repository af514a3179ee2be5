use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Identifies a reproducible standard-normal draw: a seed plus a stream index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoiseKey {
    pub seed: u64,
    pub index: u64,
}

/// Standard-normal inputs of one reparameterised sample.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub eps_r: Vec<f64>,
    pub eps_l: Vec<f64>,
}

impl NoiseDraw {
    /// Regenerate the draw for `key`: `eps_r` first, then `eps_l`.
    pub fn generate(key: NoiseKey, n: usize, rank: usize) -> Self {
        let mut rng = key.rng();
        let eps_r = (0..rank).map(|_| StandardNormal.sample(&mut rng)).collect();
        let eps_l = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self { eps_r, eps_l }
    }

    pub fn zeros(n: usize, rank: usize) -> Self {
        Self {
            eps_r: vec![0.0; rank],
            eps_l: vec![0.0; n],
        }
    }
}

impl NoiseKey {
    pub fn new(seed: u64, index: u64) -> Self {
        Self { seed, index }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.index);
        rng
    }
}

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce5_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of a named component's stream family: `splitmix64(root ^ fnv1a(name))`.
///
/// Individual draws then select a ChaCha stream by sample index, so the
/// values never depend on evaluation order.
pub fn component_seed(root: u64, component: &str) -> u64 {
    splitmix64(root ^ fnv1a(component.as_bytes()))
}

/// Generator for component `component`, stream `index`.
pub fn component_rng(root: u64, component: &str, index: u64) -> ChaCha8Rng {
    NoiseKey::new(component_seed(root, component), index).rng()
}
