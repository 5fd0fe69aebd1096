use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::Grid;

/// Deterministic random stream.
///
/// The generator is ChaCha12 keyed from a 64-bit seed expanded with
/// SplitMix64, so identical seeds reproduce identical streams on every
/// platform. Named sub-streams are derived by mixing an FNV-1a hash of the
/// label into the parent seed; this lets one run seed feed independent
/// dataset / training / sampling streams that can each be reproduced in
/// isolation.
///
/// Gaussians come from the Box-Muller transform over the uniform stream
/// (one cached value per pair), which keeps the draw sequence an explicit,
/// documented function of the raw ChaCha output.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    rng: ChaCha12Rng,
    cached_gaussian: Option<f32>,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xCBF2_9CE4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

impl RngState {
    /// Create a stream from a 64-bit seed.
    pub fn seeded(seed: u64) -> Self {
        let mut sm = seed;
        let mut key = [0u8; 32];
        for chunk in key.chunks_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut sm).to_le_bytes());
        }
        RngState {
            seed,
            rng: ChaCha12Rng::from_seed(key),
            cached_gaussian: None,
        }
    }

    /// Derive an independent named sub-stream. The derivation depends only on
    /// this stream's seed and the label, not on how many values were drawn.
    pub fn substream(&self, label: &str) -> Self {
        RngState::seeded(self.seed ^ fnv1a64(label.as_bytes()).rotate_left(17))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)` by rejection, bias-free.
    pub fn uniform_index(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "uniform_index bound must be positive");
        let bound = bound as u64;
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.rng.next_u64();
            if v < zone {
                return (v % bound) as usize;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal draw (Box-Muller over the uniform stream).
    pub fn gaussian_scalar(&mut self) -> f32 {
        if let Some(v) = self.cached_gaussian.take() {
            return v;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached_gaussian = Some((r * theta.sin()) as f32);
        (r * theta.cos()) as f32
    }

    /// Grid of independent standard normals.
    pub fn gaussian(&mut self, shape: Vec<usize>) -> Grid {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| self.gaussian_scalar()).collect();
        Grid::new(shape, data).expect("shape/data agree by construction")
    }

    /// Position in the underlying ChaCha stream, for checkpoint resume.
    /// The cached Box-Muller value is intentionally not part of the state;
    /// restore points are taken between grid-sized draws.
    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn set_word_pos(&mut self, pos: u128) {
        self.rng.set_word_pos(pos);
        self.cached_gaussian = None;
    }
}
