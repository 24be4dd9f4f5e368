//! Seeded, splittable random streams.
//!
//! A stream is a plain `(seed, stream_id)` value. Consumers never share a
//! generator; they derive child streams with [`RngStream::substream`] and
//! instantiate their own xoshiro256++ state from it.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

pub type StreamRng = Xoshiro256PlusPlus;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix(a: u64, b: u64) -> u64 {
    let mut s = a ^ b.rotate_left(32);
    let h = splitmix64(&mut s);
    let mut t = h ^ b;
    splitmix64(&mut t)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, stream_id: 0 }
    }

    /// Child stream identified by `id`. Children of distinct parents or with
    /// distinct ids do not collide in practice.
    pub fn substream(&self, id: u64) -> Self {
        RngStream {
            seed: self.seed,
            stream_id: mix(self.stream_id.wrapping_add(0x632B_E59B_D9B4_E019), id),
        }
    }

    /// Child stream keyed by a pair, e.g. `(level, chain)`.
    pub fn substream2(&self, a: u64, b: u64) -> Self {
        self.substream(a).substream(b)
    }

    pub fn rng(&self) -> StreamRng {
        let mut state = mix(self.seed, self.stream_id);
        let mut bytes = [0u8; 32];
        for chunk in bytes.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        Xoshiro256PlusPlus::from_seed(bytes)
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn fill_standard_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}
