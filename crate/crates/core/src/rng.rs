//! Seeded random streams.
//!
//! There is no global RNG anywhere in the crate. A single master seed fans
//! out to per-component streams through [`split_seed`]: the stream seed is
//! `splitmix64(master XOR fnv1a64(label))`, so every (master, label) pair
//! names one reproducible stream and distinct labels decorrelate even under
//! identical masters.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic seed for the component stream named `label`.
pub fn split_seed(master: u64, label: &str) -> u64 {
    splitmix64(master ^ fnv1a64(label.as_bytes()))
}

/// A labeled, reproducible random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    label: String,
    seed: u64,
    rng: StdRng,
}

impl RngStream {
    /// Stream derived from a master seed and a component label.
    pub fn derive(master: u64, label: &str) -> Self {
        let seed = split_seed(master, label);
        RngStream {
            label: label.to_string(),
            seed,
            rng: StdRng::seed_from_u64(seed),
        }
    }

    /// Stream from a raw seed, for tests and standalone use.
    pub fn from_seed(seed: u64) -> Self {
        RngStream {
            label: "raw".to_string(),
            seed,
            rng: StdRng::seed_from_u64(seed),
        }
    }

    /// Identifier recorded in sampler reports.
    pub fn id(&self) -> String {
        format!("{}#{:016x}", self.label, self.seed)
    }

    /// Uniform draw in [0, 1).
    pub fn gen_f64(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn gen_u64(&mut self) -> u64 {
        self.rng.gen::<u64>()
    }

    /// Index drawn from an (approximately normalized) probability vector by
    /// inverse CDF. Falls back to the last positive entry if rounding leaves
    /// the cumulative short of the draw.
    pub fn choose_weighted(&mut self, probs: &[f64]) -> usize {
        let u = self.gen_f64();
        let mut cum = 0.0;
        let mut last_positive = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                last_positive = i;
                cum += p;
                if u < cum {
                    return i;
                }
            }
        }
        last_positive
    }
}
