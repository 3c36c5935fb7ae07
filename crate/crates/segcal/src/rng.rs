//! Seeded deterministic random numbers.
//!
//! The generator is SplitMix64 (Steele, Lea & Flood's `splitmix64` finalizer
//! driving a Weyl sequence). It is tiny, has a 64-bit state, and produces the
//! same stream for the same seed on every run of a given build. Gaussian
//! draws use the Box-Muller transform on two fresh uniforms per call, so the
//! normal stream is a pure function of the integer stream (transcendental
//! calls can differ by an ulp across libm implementations; on any one target
//! the sequence is bit-stable).

/// SplitMix64 generator. Single-owner mutable state; never share one
/// instance across concurrent tasks — derive independent substreams instead.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    state: u64,
}

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, state: seed }
    }

    /// Seed this generator was created with.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent substream: a fresh generator whose seed mixes this
    /// generator's seed with `stream`. Deriving the same stream id twice
    /// yields the same substream, so per-item generation can be parallelized
    /// without changing results.
    pub fn derive(&self, stream: u64) -> Rng {
        Rng::new(mix(self.seed ^ mix(stream.wrapping_mul(GAMMA).wrapping_add(1))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix(self.state)
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). Multiply-shift; bias is below 2^-64 per
    /// draw for any n that fits in a u64.
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (((self.next_u64() as u128) * (n as u128)) >> 64) as usize
    }

    /// Standard normal via Box-Muller. Consumes exactly two uniforms.
    pub fn next_normal(&mut self) -> f64 {
        // 1 - u keeps the log argument in (0, 1].
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
