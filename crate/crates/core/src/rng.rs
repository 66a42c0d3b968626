//! Counter-based SplitMix64 stream.
//!
//! Draw `i` of seed `s` is `mix(s + (i + 1) * 0x9E3779B97F4A7C15)` where
//! `mix` is the SplitMix64 finalizer. Because each draw depends only on the
//! seed and its index, streams are reproducible in any language.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64_mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CounterRng {
    seed: u64,
    index: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        CounterRng { seed, index: 0 }
    }

    /// Number of 64-bit draws consumed so far.
    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn next_u64(&mut self) -> u64 {
        let state = self
            .seed
            .wrapping_add(self.index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA));
        self.index += 1;
        splitmix64_mix(state)
    }

    /// Uniform in `(0, 1]`, 53 bits.
    pub fn next_open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[0, 1)`, 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via the cosine branch of Box-Muller; two draws each.
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_open01();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
