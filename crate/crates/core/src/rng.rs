//! Deterministic counter-based random number generator.
//!
//! Every draw is a pure function of `(seed, position)`, so the stream can be
//! checkpointed and resumed bit-exactly on any platform. Derived streams
//! (per clip, per epoch) are obtained by hashing a stream id into the seed.

/// Identifier stored in checkpoints so a reader can refuse unknown streams.
pub const RNG_ALGORITHM: &str = "sm64ctr";

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based RNG: identical `(seed, position)` yields identical draws.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededRng {
    seed: u64,
    pos: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { seed, pos: 0 }
    }

    /// Restore a stream at an exact position (checkpoint resume).
    pub fn restore(seed: u64, pos: u64) -> Self {
        SeededRng { seed, pos }
    }

    pub fn state(&self) -> (u64, u64) {
        (self.seed, self.pos)
    }

    /// Independent stream derived from this seed and a stream id.
    pub fn derive(&self, stream: u64) -> SeededRng {
        SeededRng::new(splitmix64(
            self.seed ^ splitmix64(stream.wrapping_mul(GOLDEN).wrapping_add(0x5851_f42d)),
        ))
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = splitmix64(self.seed.wrapping_add(self.pos.wrapping_mul(GOLDEN).wrapping_add(1)));
        self.pos += 1;
        v
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller (consumes two draws).
    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let u1 = (self.next_u64() >> 11) as f64 + 1.0; // in [1, 2^53]
        let u1 = u1 * (1.0 / (1u64 << 53) as f64); // in (0, 1]
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        mean + std * r * (std::f64::consts::TAU * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Stable per-item seed: `hash(master, index)`.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream.wrapping_mul(GOLDEN).wrapping_add(0x5851_f42d)))
}
